//! Cached pipeline stages. Each artifact (corpus, SFT policy, reward model,
//! RL run) lives under a hash of exactly the configuration that produced it,
//! so re-running a command or resuming a sweep never recomputes finished
//! work.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, Context};
use serde::{Deserialize, Serialize};
use serde_json::json;

use rlhf_lab::config::{derive_seed, PipelineConfig};
use rlhf_lab::eval::{eval_policy, EvalReport, EvalSampling};
use rlhf_lab::policy::{
    bc_pretrain, policy_logprob, sample_response, PolicyCheckpoint, PolicyParams,
};
use rlhf_lab::rl::{
    train_ppo, train_remax, CheckpointTag, RewardShaper, RunLog, TrainOutcome,
    ValueParams,
};
use rlhf_lab::rm::{train_rm, HeadSelector, RmCheckpoint, RmMode, RmParams, TrainHistory};
use rlhf_lab::rng;
use rlhf_lab::synthdata::{
    calibrate_length_bias, chosen_longer_fraction, demo_response, gen_preference_corpus,
    gen_prompts, read_corpus, true_quality, write_corpus, CorpusConfig, DemoParams,
    PreferencePair, Prompt, Response,
};

use crate::runid::run_id;
use crate::{classify, CliError, CliResult};

pub const LENGTH_HISTOGRAM_BINS: usize = 8;

/// Sidecar statistics written next to every generated corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n_pairs: usize,
    pub chosen_longer_fraction: f64,
    pub equal_length_fraction: f64,
    pub annotator_length_bias: f64,
    pub mean_length_chosen: f64,
    pub mean_length_rejected: f64,
    pub length_histogram_chosen: Vec<usize>,
    pub length_histogram_rejected: Vec<usize>,
}

/// Sidecar statistics for the SFT policy: the reference length under the RL
/// sampling configuration and the held-out quality.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SftStats {
    pub l_sft: f64,
    pub mean_quality: f64,
}

pub fn write_atomic(path: &Path, contents: &str) -> CliResult<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents)
        .with_context(|| format!("writing {}", tmp.display()))
        .map_err(CliError::runtime)?;
    fs::rename(&tmp, path)
        .with_context(|| format!("renaming into {}", path.display()))
        .map_err(CliError::runtime)?;
    Ok(())
}

fn ensure_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path)
        .with_context(|| format!("creating {}", path.display()))
        .map_err(CliError::runtime)
}

fn now_secs() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Resolves the annotator bias: an explicit config value wins, otherwise
/// bisection calibrates to the configured target fraction.
pub fn resolve_length_bias(config: &PipelineConfig) -> CliResult<f64> {
    if let Some(bias) = config.data.length_bias {
        return Ok(bias);
    }
    let base = config.data.corpus_config(config.seed, 0.0);
    calibrate_length_bias(&base, &config.data.samplers, config.data.calibrate_target)
        .map_err(classify)
}

pub fn corpus_stats(
    corpus: &[PreferencePair],
    config: &CorpusConfig,
    bias: f64,
) -> CorpusStats {
    let space = &config.tokens;
    let histogram = |side: &dyn Fn(&PreferencePair) -> usize| -> Vec<usize> {
        let mut bins = vec![0usize; LENGTH_HISTOGRAM_BINS];
        for pair in corpus {
            let len = side(pair);
            let bin = (len * LENGTH_HISTOGRAM_BINS / (config.t_max + 1)).min(LENGTH_HISTOGRAM_BINS - 1);
            bins[bin] += 1;
        }
        bins
    };
    let mean = |side: &dyn Fn(&PreferencePair) -> usize| -> f64 {
        corpus.iter().map(|p| side(p) as f64).sum::<f64>() / corpus.len().max(1) as f64
    };
    let chosen_len = |p: &PreferencePair| p.chosen.len(space);
    let rejected_len = |p: &PreferencePair| p.rejected.len(space);
    let equal = corpus
        .iter()
        .filter(|p| chosen_len(p) == rejected_len(p))
        .count();
    CorpusStats {
        n_pairs: corpus.len(),
        chosen_longer_fraction: chosen_longer_fraction(corpus, space),
        equal_length_fraction: equal as f64 / corpus.len().max(1) as f64,
        annotator_length_bias: bias,
        mean_length_chosen: mean(&chosen_len),
        mean_length_rejected: mean(&rejected_len),
        length_histogram_chosen: histogram(&chosen_len),
        length_histogram_rejected: histogram(&rejected_len),
    }
}

/// Artifact store rooted at an output directory.
pub struct Stages {
    pub out_dir: PathBuf,
}

impl Stages {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        Self {
            out_dir: out_dir.into(),
        }
    }

    fn corpus_key(config: &PipelineConfig) -> String {
        run_id(&json!({"seed": config.seed, "data": config.data}))
    }

    fn sft_key(config: &PipelineConfig) -> String {
        run_id(&json!({
            "seed": config.seed,
            "tokens": config.data.tokens(),
            "t_max": config.data.t_max,
            "bc": config.bc,
        }))
    }

    fn rm_key(config: &PipelineConfig, mode: RmMode) -> String {
        run_id(&json!({
            "seed": config.seed,
            "data": config.data,
            "rm": config.rm,
            "mode": mode,
        }))
    }

    pub fn corpus_path(&self, config: &PipelineConfig) -> PathBuf {
        self.out_dir
            .join("corpus")
            .join(format!("{}.jsonl", Self::corpus_key(config)))
    }

    pub fn sft_path(&self, config: &PipelineConfig) -> PathBuf {
        self.out_dir
            .join("sft")
            .join(format!("{}.json", Self::sft_key(config)))
    }

    pub fn rm_path(&self, config: &PipelineConfig, mode: RmMode) -> PathBuf {
        let tag = match mode {
            RmMode::SingleHead => "baseline",
            RmMode::TwoHead => "odin",
        };
        self.out_dir
            .join("rm")
            .join(format!("{}_{}.json", tag, Self::rm_key(config, mode)))
    }

    /// Generates (or reloads) the preference corpus and its stats sidecar.
    pub fn ensure_corpus(
        &self,
        config: &PipelineConfig,
    ) -> CliResult<(Vec<PreferencePair>, CorpusStats, PathBuf)> {
        let path = self.corpus_path(config);
        let stats_path = path.with_extension("stats.json");
        if path.exists() && stats_path.exists() {
            let file = fs::File::open(&path).map_err(|e| CliError::runtime(anyhow!(e)))?;
            let corpus = read_corpus(std::io::BufReader::new(file)).map_err(classify)?;
            let stats: CorpusStats = serde_json::from_str(
                &fs::read_to_string(&stats_path).map_err(|e| CliError::runtime(anyhow!(e)))?,
            )
            .map_err(|e| CliError::runtime(anyhow!(e)))?;
            return Ok((corpus, stats, path));
        }
        ensure_dir(path.parent().unwrap())?;
        let bias = resolve_length_bias(config)?;
        let corpus_config = config.data.corpus_config(config.seed, bias);
        let corpus = gen_preference_corpus(&corpus_config, &config.data.samplers).map_err(classify)?;
        let stats = corpus_stats(&corpus, &corpus_config, bias);
        let mut buffer = Vec::new();
        write_corpus(&corpus, &corpus_config.tokens, &mut buffer).map_err(classify)?;
        write_atomic(&path, std::str::from_utf8(&buffer).expect("JSONL is UTF-8"))?;
        write_atomic(
            &stats_path,
            &serde_json::to_string_pretty(&stats).map_err(|e| CliError::runtime(anyhow!(e)))?,
        )?;
        Ok((corpus, stats, path))
    }

    /// Behavior-clones (or reloads) the SFT policy shared by all RL runs.
    pub fn ensure_sft(&self, config: &PipelineConfig) -> CliResult<(PolicyParams, SftStats, PathBuf)> {
        let path = self.sft_path(config);
        let stats_path = path.with_extension("stats.json");
        if path.exists() && stats_path.exists() {
            let ckpt = PolicyCheckpoint::from_json(
                &fs::read_to_string(&path).map_err(|e| CliError::runtime(anyhow!(e)))?,
            )
            .map_err(classify)?;
            let stats: SftStats = serde_json::from_str(
                &fs::read_to_string(&stats_path).map_err(|e| CliError::runtime(anyhow!(e)))?,
            )
            .map_err(|e| CliError::runtime(anyhow!(e)))?;
            return Ok((ckpt.params, stats, path));
        }
        ensure_dir(path.parent().unwrap())?;
        let (params, stats) = train_sft(config)?;
        let ckpt = PolicyCheckpoint::new(
            params.clone(),
            config.data.tokens(),
            config.data.t_max,
            Self::sft_key(config),
        );
        write_atomic(&path, &ckpt.to_json().map_err(classify)?)?;
        write_atomic(
            &stats_path,
            &serde_json::to_string_pretty(&stats).map_err(|e| CliError::runtime(anyhow!(e)))?,
        )?;
        Ok((params, stats, path))
    }

    /// Trains (or reloads) a reward model of the given mode.
    pub fn ensure_rm(
        &self,
        config: &PipelineConfig,
        mode: RmMode,
        corpus: &[PreferencePair],
    ) -> CliResult<(RmParams, Option<TrainHistory>, PathBuf)> {
        let path = self.rm_path(config, mode);
        if path.exists() {
            let ckpt = RmCheckpoint::from_json(
                &fs::read_to_string(&path).map_err(|e| CliError::runtime(anyhow!(e)))?,
            )
            .map_err(classify)?;
            return Ok((ckpt.params, None, path));
        }
        ensure_dir(path.parent().unwrap())?;
        let space = config.data.tokens();
        let hyper = config.rm.hyper(config.seed);
        let (params, history) =
            train_rm(corpus, &space, config.data.t_max, &hyper, mode).map_err(classify)?;
        let ckpt = RmCheckpoint::new(params.clone(), space, config.data.t_max);
        write_atomic(&path, &ckpt.to_json().map_err(classify)?)?;
        let history_csv = path.with_extension("history.csv");
        write_history_csv(&history_csv, &history)?;
        Ok((params, Some(history), path))
    }
}

/// RL prompt set, derived from the data config but disjoint from both the
/// corpus prompts and the evaluation prompts by stream name.
pub fn rl_prompts(config: &PipelineConfig) -> CliResult<Vec<Prompt>> {
    let cc = CorpusConfig {
        seed: derive_seed(config.seed, "rl/promptgen"),
        ..config.data.corpus_config(config.seed, 0.0)
    };
    gen_prompts(&cc, config.rl.n_prompts).map_err(classify)
}

/// Held-out evaluation prompts.
pub fn eval_prompts(config: &PipelineConfig) -> CliResult<Vec<Prompt>> {
    let cc = CorpusConfig {
        seed: derive_seed(config.seed, "eval/promptgen"),
        ..config.data.corpus_config(config.seed, 0.0)
    };
    gen_prompts(&cc, config.eval.n_prompts).map_err(classify)
}

/// Behavior-clones the SFT policy from scripted demonstrations and measures
/// its reference length under the RL sampling configuration.
pub fn train_sft(config: &PipelineConfig) -> CliResult<(PolicyParams, SftStats)> {
    let space = config.data.tokens();
    let t_max = config.data.t_max;
    let demo_config = CorpusConfig {
        seed: derive_seed(config.seed, "bc/promptgen"),
        ..config.data.corpus_config(config.seed, 0.0)
    };
    let prompts = gen_prompts(&demo_config, config.bc.n_demos).map_err(classify)?;
    let scripted = DemoParams::scripted();
    let demos: Vec<(Prompt, Response)> = prompts
        .iter()
        .map(|p| {
            let mut rng = rng::stream_n(derive_seed(config.seed, "bc/demo"), "demo", &[p.id]);
            (p.clone(), demo_response(p, &demo_config, &scripted, &mut rng))
        })
        .collect();
    let params = bc_pretrain(&demos, &space, t_max, &config.bc.bc_config(config.seed))
        .map_err(classify)?;

    let reference = rl_prompts(config)?;
    let mut length_sum = 0.0;
    let mut quality_sum = 0.0;
    for prompt in &reference {
        let mut rng = rng::stream_n(derive_seed(config.seed, "bc/reference"), "sample", &[prompt.id]);
        let resp = sample_response(
            &params,
            prompt,
            &space,
            t_max,
            config.rl.config.sample_temperature,
            config.rl.config.sample_top_p,
            &mut rng,
        );
        length_sum += resp.len(&space) as f64;
        quality_sum += true_quality(prompt, &resp, &space, t_max);
    }
    let n = reference.len().max(1) as f64;
    Ok((
        params,
        SftStats {
            l_sft: length_sum / n,
            mean_quality: quality_sum / n,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Algo {
    Ppo,
    Remax,
}

/// Reward-model flavor names used on the command line and in sweep grids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ModeArg {
    Baseline,
    Odin,
}

impl ModeArg {
    pub fn rm_mode(self) -> RmMode {
        match self {
            ModeArg::Baseline => RmMode::SingleHead,
            ModeArg::Odin => RmMode::TwoHead,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Full,
    Quality,
}

impl Head {
    pub fn selector(self) -> HeadSelector {
        match self {
            Head::Full => HeadSelector::Full,
            Head::Quality => HeadSelector::Quality,
        }
    }
}

/// Everything identifying one RL run.
#[derive(Debug, Clone, Serialize)]
pub struct RlRunSpec {
    pub config: PipelineConfig,
    pub algo: Algo,
    /// Which reward model drives the run.
    pub mode: ModeArg,
    pub head: Head,
    /// Run-level seed offset on top of the pipeline seed.
    pub run_seed: u64,
}

impl RlRunSpec {
    pub fn run_id(&self) -> String {
        run_id(self)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub status: String,
    pub config: serde_json::Value,
    pub artifacts: RunArtifacts,
    pub started_at: u64,
    pub finished_at: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunArtifacts {
    pub runlog: String,
    pub checkpoints: Vec<(String, String)>,
}

pub fn tag_name(tag: CheckpointTag) -> &'static str {
    match tag {
        CheckpointTag::Mid => "mid",
        CheckpointTag::Final => "final",
        CheckpointTag::Best => "best",
    }
}

/// Trains one RL run (or reloads it when its record says completed) and
/// persists the run log plus the three policy snapshots.
pub fn run_rl(
    stages: &Stages,
    spec: &RlRunSpec,
    rm: &RmParams,
    sft: &PolicyParams,
) -> CliResult<(PathBuf, RunRecord)> {
    let id = spec.run_id();
    let dir = stages.out_dir.join("runs").join(&id);
    let record_path = dir.join("record.json");
    if record_path.exists() {
        let record: RunRecord = serde_json::from_str(
            &fs::read_to_string(&record_path).map_err(|e| CliError::runtime(anyhow!(e)))?,
        )
        .map_err(|e| CliError::runtime(anyhow!(e)))?;
        if record.status == "completed" {
            return Ok((dir, record));
        }
    }
    ensure_dir(&dir)?;
    let started = now_secs();
    let config = &spec.config;
    let space = config.data.tokens();
    let t_max = config.data.t_max;
    let shaper = RewardShaper::new(rm, spec.head.selector(), space, t_max, &config.rl.config)
        .map_err(classify)?;
    let prompts = rl_prompts(config)?;
    let seed = derive_seed(config.seed, "rl").wrapping_add(spec.run_seed);
    let outcome: TrainOutcome = match spec.algo {
        Algo::Ppo => train_ppo(
            sft,
            &ValueParams::zeros(),
            sft,
            &shaper,
            &prompts,
            &config.rl.config,
            seed,
        )
        .map_err(classify)?,
        Algo::Remax => train_remax(sft, sft, &shaper, &prompts, &config.rl.config, seed)
            .map_err(classify)?,
    };

    let runlog_path = dir.join("runlog.csv");
    write_runlog_csv(&runlog_path, &outcome.log)?;
    let mut checkpoints = Vec::new();
    for snapshot in &outcome.snapshots {
        let name = format!("ckpt_{}.json", tag_name(snapshot.tag));
        let path = dir.join(&name);
        let ckpt = PolicyCheckpoint::new(snapshot.policy.clone(), space, t_max, id.clone());
        write_atomic(&path, &ckpt.to_json().map_err(classify)?)?;
        checkpoints.push((tag_name(snapshot.tag).to_string(), name));
    }
    let record = RunRecord {
        run_id: id,
        status: "completed".to_string(),
        config: serde_json::to_value(spec).map_err(|e| CliError::runtime(anyhow!(e)))?,
        artifacts: RunArtifacts {
            runlog: "runlog.csv".to_string(),
            checkpoints,
        },
        started_at: started,
        finished_at: now_secs(),
    };
    write_atomic(
        &record_path,
        &serde_json::to_string_pretty(&record).map_err(|e| CliError::runtime(anyhow!(e)))?,
    )?;
    Ok((dir, record))
}

/// Evaluates a policy against the SFT baseline with the configured judge.
pub fn evaluate_policy(
    config: &PipelineConfig,
    policy: &PolicyParams,
    baseline: &PolicyParams,
) -> CliResult<EvalReport> {
    let space = config.data.tokens();
    let sampling = EvalSampling {
        temperature: config.eval.temperature,
        top_p: config.eval.top_p,
        seed: derive_seed(config.seed, "eval"),
    };
    let prompts = eval_prompts(config)?;
    eval_policy(
        policy,
        baseline,
        &config.eval.judge,
        &sampling,
        &prompts,
        &space,
        config.data.t_max,
    )
    .map_err(classify)
}

/// Sanity check used by commands that receive explicit checkpoint paths.
pub fn load_policy_checkpoint(path: &Path) -> CliResult<PolicyCheckpoint> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading policy checkpoint {}", path.display()))
        .map_err(CliError::runtime)?;
    PolicyCheckpoint::from_json(&text).map_err(classify)
}

pub fn load_rm_checkpoint(path: &Path) -> CliResult<RmCheckpoint> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading reward-model checkpoint {}", path.display()))
        .map_err(CliError::runtime)?;
    RmCheckpoint::from_json(&text).map_err(classify)
}

pub const RM_HISTORY_SCHEMA: &str = "rm_history_v1";
pub const RUNLOG_SCHEMA: &str = "runlog_v1";

pub fn write_history_csv(path: &Path, history: &TrainHistory) -> CliResult<()> {
    let mut out = String::new();
    out.push_str("schema,epoch,ranking_loss,corr_loss,orth_loss,val_acc,pearson,spearman,kendall\n");
    for row in history {
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            RM_HISTORY_SCHEMA,
            row.epoch,
            row.ranking_loss,
            row.corr_loss,
            row.orth_loss,
            row.val_acc,
            row.pearson,
            row.spearman,
            row.kendall
        ));
    }
    write_atomic(path, &out)
}

pub fn write_runlog_csv(path: &Path, log: &RunLog) -> CliResult<()> {
    let mut out = String::new();
    out.push_str(
        "schema,iter,mean_shaped_reward,mean_rm_reward,mean_true_quality,mean_length,\
         kl_estimate,off_policy_frac,max_ratio_dev,clip_inactive\n",
    );
    for row in log {
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}\n",
            RUNLOG_SCHEMA,
            row.iter,
            row.mean_shaped_reward,
            row.mean_rm_reward,
            row.mean_true_quality,
            row.mean_length,
            row.kl_estimate,
            row.off_policy_frac,
            row.max_ratio_dev,
            row.clip_inactive
        ));
    }
    write_atomic(path, &out)
}

/// `log pi(y|x)` helper for diagnostics.
pub fn sequence_logprob(
    policy: &PolicyParams,
    prompt: &Prompt,
    response: &Response,
    config: &PipelineConfig,
) -> CliResult<f64> {
    policy_logprob(
        policy,
        prompt,
        response,
        &config.data.tokens(),
        config.data.t_max,
    )
    .map_err(classify)
}
