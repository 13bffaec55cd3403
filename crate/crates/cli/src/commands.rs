//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::anyhow;

use rlhf_lab::config::PipelineConfig;
use rlhf_lab::rm::{corpus_features, rm_validation_accuracy, train_rm, HeadSelector, RmCheckpoint};
use rlhf_lab::synthdata::{gen_preference_corpus, read_corpus, write_corpus};

use crate::overrides::load_config;
use crate::pipeline::{
    corpus_stats, evaluate_policy, load_policy_checkpoint, load_rm_checkpoint, resolve_length_bias,
    run_rl, write_atomic, write_history_csv, Algo, Head, ModeArg, RlRunSpec, Stages,
};
use crate::sweep::{
    append_aggregate, fronts_by_arm, read_aggregate, run_sweep, write_pareto_csv, AggregateRow,
    SweepSpec, AGGREGATE_SCHEMA,
};
use crate::{classify, CliError, CliResult};

fn ensure_out_dir(out: &Path) -> CliResult<()> {
    fs::create_dir_all(out)
        .map_err(|e| CliError::runtime(anyhow!("creating {}: {e}", out.display())))
}

/// `gen-data`: corpus JSONL plus a stats sidecar.
pub fn cmd_gen_data(config_path: &Path, out: &Path, overrides: &[String]) -> CliResult<()> {
    let config: PipelineConfig = load_config(config_path, overrides)?;
    config.validate().map_err(classify)?;
    ensure_out_dir(out)?;
    let bias = resolve_length_bias(&config)?;
    let corpus_config = config.data.corpus_config(config.seed, bias);
    let corpus = gen_preference_corpus(&corpus_config, &config.data.samplers).map_err(classify)?;
    let stats = corpus_stats(&corpus, &corpus_config, bias);
    let mut buffer = Vec::new();
    write_corpus(&corpus, &corpus_config.tokens, &mut buffer).map_err(classify)?;
    write_atomic(&out.join("corpus.jsonl"), std::str::from_utf8(&buffer).expect("utf-8"))?;
    write_atomic(
        &out.join("corpus.stats.json"),
        &serde_json::to_string_pretty(&stats).map_err(|e| CliError::runtime(anyhow!(e)))?,
    )?;
    println!(
        "wrote {} pairs (chosen-longer fraction {:.3}, annotator bias {:.3}) to {}",
        stats.n_pairs,
        stats.chosen_longer_fraction,
        stats.annotator_length_bias,
        out.join("corpus.jsonl").display()
    );
    Ok(())
}

/// `train-rm`: reward model checkpoint plus history CSV; prints validation
/// accuracy and the reward-length correlation report.
pub fn cmd_train_rm(
    config_path: &Path,
    mode: ModeArg,
    corpus_path: &Path,
    out: &Path,
    overrides: &[String],
) -> CliResult<()> {
    let config: PipelineConfig = load_config(config_path, overrides)?;
    config.validate().map_err(classify)?;
    ensure_out_dir(out)?;
    let file = fs::File::open(corpus_path)
        .map_err(|e| CliError::runtime(anyhow!("missing corpus {}: {e}", corpus_path.display())))?;
    let corpus = read_corpus(std::io::BufReader::new(file)).map_err(classify)?;
    let space = config.data.tokens();
    let t_max = config.data.t_max;
    let hyper = config.rm.hyper(config.seed);
    let (params, history) =
        train_rm(&corpus, &space, t_max, &hyper, mode.rm_mode()).map_err(classify)?;

    let head = match mode {
        ModeArg::Baseline => HeadSelector::Full,
        ModeArg::Odin => HeadSelector::Quality,
    };
    let features = corpus_features(&corpus, &space, t_max);
    let accuracy = rm_validation_accuracy(&params, &features, head).map_err(classify)?;
    let report =
        rlhf_lab::eval::rm_length_report(&params, &corpus, &space, t_max, head).map_err(classify)?;

    let tag = match mode {
        ModeArg::Baseline => "baseline",
        ModeArg::Odin => "odin",
    };
    let ckpt_path = out.join(format!("rm_{tag}.json"));
    let ckpt = RmCheckpoint::new(params, space, t_max);
    write_atomic(&ckpt_path, &ckpt.to_json().map_err(classify)?)?;
    write_history_csv(&out.join(format!("rm_{tag}_history.csv")), &history)?;
    println!(
        "{tag} reward model: accuracy {accuracy:.3}, reward-length correlations \
         rho {:.3} r_s {:.3} tau {:.3} -> {}",
        report.pearson,
        report.spearman,
        report.kendall,
        ckpt_path.display()
    );
    Ok(())
}

/// `train-rl`: runs PPO or ReMax against a reward-model checkpoint.
#[allow(clippy::too_many_arguments)]
pub fn cmd_train_rl(
    config_path: &Path,
    algo: Algo,
    head: Head,
    rm_checkpoint: &Path,
    sft_checkpoint: Option<&Path>,
    out: &Path,
    run_seed: u64,
    overrides: &[String],
) -> CliResult<()> {
    let config: PipelineConfig = load_config(config_path, overrides)?;
    config.validate().map_err(classify)?;
    ensure_out_dir(out)?;
    let rm = load_rm_checkpoint(rm_checkpoint)?;
    if rm.tokens != config.data.tokens() || rm.t_max != config.data.t_max {
        return Err(CliError::usage(anyhow!(
            "reward-model checkpoint token space does not match the config"
        )));
    }
    let stages = Stages::new(out);
    let sft = match sft_checkpoint {
        Some(path) => load_policy_checkpoint(path)?.params,
        None => stages.ensure_sft(&config)?.0,
    };
    let mode = match rm.params.mode {
        rlhf_lab::rm::RmMode::SingleHead => ModeArg::Baseline,
        rlhf_lab::rm::RmMode::TwoHead => ModeArg::Odin,
    };
    let spec = RlRunSpec {
        config,
        algo,
        mode,
        head,
        run_seed,
    };
    let (dir, record) = run_rl(&stages, &spec, &rm.params, &sft)?;
    println!(
        "run {} completed: {} checkpoints, log at {}",
        record.run_id,
        record.artifacts.checkpoints.len(),
        dir.join(&record.artifacts.runlog).display()
    );
    for (tag, file) in &record.artifacts.checkpoints {
        println!("  checkpoint {tag}: {}", dir.join(file).display());
    }
    if spec.config.rl.config.clip_inactive() {
        println!("  note: N = b and K = 1, PPO ratio clipping is inactive");
    }
    Ok(())
}

/// `eval`: judges a policy checkpoint against the SFT baseline.
#[allow(clippy::too_many_arguments)]
pub fn cmd_eval(
    config_path: &Path,
    policy_path: &Path,
    sft_checkpoint: Option<&Path>,
    out: &Path,
    append_to: Option<&Path>,
    run_id: &str,
    checkpoint: &str,
    arm: &str,
    overrides: &[String],
) -> CliResult<()> {
    let config: PipelineConfig = load_config(config_path, overrides)?;
    config.validate().map_err(classify)?;
    let policy = load_policy_checkpoint(policy_path)?;
    let stages = Stages::new(out.parent().unwrap_or(Path::new(".")));
    let sft = match sft_checkpoint {
        Some(path) => load_policy_checkpoint(path)?.params,
        None => stages.ensure_sft(&config)?.0,
    };
    let report = evaluate_policy(&config, &policy.params, &sft)?;
    write_atomic(
        out,
        &serde_json::to_string_pretty(&report).map_err(|e| CliError::runtime(anyhow!(e)))?,
    )?;
    println!(
        "win score {:.1} (win {} / tie {} / lose {}) at mean length {:.2} -> {}",
        report.win_score,
        report.n_win,
        report.n_tie,
        report.n_lose,
        report.mean_length,
        out.display()
    );
    if let Some(path) = append_to {
        let row = AggregateRow {
            schema: AGGREGATE_SCHEMA.to_string(),
            run_id: run_id.to_string(),
            arm: arm.to_string(),
            checkpoint: checkpoint.to_string(),
            algo: String::new(),
            mode: String::new(),
            head: String::new(),
            beta: config.rl.config.beta,
            epsilon: config.rl.config.epsilon,
            clip_c: config.rl.config.clip_c,
            alpha: config.rl.config.alpha,
            n_experience: config.rl.config.n_experience,
            lr: config.rl.config.lr,
            run_seed: 0,
            mean_length: report.mean_length,
            win_score: report.win_score,
        };
        append_aggregate(path, &[row])?;
    }
    Ok(())
}

/// `sweep`: executes a sweep spec and emits aggregate, Pareto, and plot.
pub fn cmd_sweep(spec_path: &Path, out: &Path) -> CliResult<()> {
    let text = fs::read_to_string(spec_path)
        .map_err(|e| CliError::runtime(anyhow!("reading {}: {e}", spec_path.display())))?;
    let spec = SweepSpec::from_json(&text)?;
    ensure_out_dir(out)?;
    let summary = run_sweep(&spec, out)?;
    let rows = read_aggregate(&out.join("aggregate.csv"))?;
    let fronts = fronts_by_arm(&rows);
    write_pareto_csv(&out.join("pareto.csv"), &fronts)?;
    write_atomic(&out.join("plot.svg"), &crate::svg::plot(&fronts))?;
    println!(
        "sweep finished: {} cells ({} trained, {} reused), {} aggregate rows",
        summary.cells_total, summary.cells_trained, summary.cells_reused, summary.aggregate_rows
    );
    Ok(())
}

/// `pareto`: extracts per-arm fronts from an aggregate CSV.
pub fn cmd_pareto(aggregate: &Path, out: &Path) -> CliResult<()> {
    let rows = read_aggregate(aggregate)?;
    let fronts = fronts_by_arm(&rows);
    write_pareto_csv(out, &fronts)?;
    for (arm, points, front) in &fronts {
        println!("{arm}: {} points, {} on the front", points.len(), front.len());
    }
    Ok(())
}

/// `plot`: renders the aggregate (plus fronts) as SVG.
pub fn cmd_plot(aggregate: &Path, out: &Path) -> CliResult<()> {
    let rows = read_aggregate(aggregate)?;
    let fronts = fronts_by_arm(&rows);
    write_atomic(out, &crate::svg::plot(&fronts))?;
    println!("wrote {}", out.display());
    Ok(())
}

/// Writes a default config file, mostly a convenience for getting started.
pub fn cmd_init_config(out: &Path) -> CliResult<()> {
    let config = PipelineConfig::default();
    write_atomic(out, &config.to_json().map_err(classify)?)?;
    println!("wrote {}", out.display());
    Ok(())
}

/// Output paths of `gen-data` for reuse by tests.
pub fn gen_data_outputs(out: &Path) -> (PathBuf, PathBuf) {
    (out.join("corpus.jsonl"), out.join("corpus.stats.json"))
}
