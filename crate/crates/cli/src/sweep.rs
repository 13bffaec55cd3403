//! Config-grid sweeps: cartesian expansion over dotted parameter paths,
//! resumable execution keyed by run id, aggregate CSV emission, and per-arm
//! Pareto fronts.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::anyhow;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use rlhf_lab::config::PipelineConfig;
use rlhf_lab::eval::{pareto_front, ParetoPoint};

use crate::overrides::apply_overrides;
use crate::pipeline::{
    evaluate_policy, run_rl, Algo, Head, ModeArg, RlRunSpec, Stages,
};
use crate::{classify, CliError, CliResult};

pub const AGGREGATE_SCHEMA: &str = "aggregate_v1";
pub const PARETO_SCHEMA: &str = "pareto_v1";

/// One sweep cell after grid expansion.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellSpec {
    pub config: PipelineConfig,
    pub algo: Algo,
    pub mode: ModeArg,
    pub head: Head,
    #[serde(default)]
    pub run_seed: u64,
}

impl CellSpec {
    pub fn arm(&self) -> String {
        let algo = match self.algo {
            Algo::Ppo => "ppo",
            Algo::Remax => "remax",
        };
        let mode = match self.mode {
            ModeArg::Baseline => "baseline",
            ModeArg::Odin => "odin",
        };
        let head = match self.head {
            Head::Full => "full",
            Head::Quality => "quality",
        };
        format!("{algo}-{mode}-{head}")
    }

    pub fn rl_spec(&self) -> RlRunSpec {
        RlRunSpec {
            config: self.config.clone(),
            algo: self.algo,
            mode: self.mode,
            head: self.head,
            run_seed: self.run_seed,
        }
    }
}

/// Sweep description: a base config, a grid of dotted paths into the cell
/// spec, and seeds per cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepSpec {
    pub base: PipelineConfig,
    #[serde(default = "default_algo")]
    pub algo: Algo,
    #[serde(default = "default_mode")]
    pub mode: ModeArg,
    #[serde(default = "default_head")]
    pub head: Head,
    /// Map from dotted path (rooted at the cell spec, so `config.rl.beta`,
    /// `mode`, `head`, ...) to the list of values to sweep.
    #[serde(default)]
    pub grid: BTreeMap<String, Vec<Value>>,
    /// Run seeds per cell.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

fn default_algo() -> Algo {
    Algo::Ppo
}
fn default_mode() -> ModeArg {
    ModeArg::Baseline
}
fn default_head() -> Head {
    Head::Full
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}

impl SweepSpec {
    pub fn from_json(json: &str) -> CliResult<Self> {
        serde_json::from_str(json).map_err(|e| CliError::usage(anyhow!(e)))
    }

    pub fn cell_count(&self) -> usize {
        self.grid.values().map(|v| v.len().max(1)).product::<usize>() * self.seeds.len().max(1)
    }

    /// Expands the cartesian product of the grid into cell specs.
    pub fn expand(&self) -> CliResult<Vec<CellSpec>> {
        let template = serde_json::json!({
            "config": self.base,
            "algo": self.algo,
            "mode": self.mode,
            "head": self.head,
            "run_seed": 0,
        });
        let keys: Vec<&String> = self.grid.keys().collect();
        let mut assignments: Vec<Vec<(String, Value)>> = vec![Vec::new()];
        for key in keys {
            let values = &self.grid[key];
            if values.is_empty() {
                return Err(CliError::usage(anyhow!("grid entry {key} has no values")));
            }
            let mut next = Vec::with_capacity(assignments.len() * values.len());
            for base in &assignments {
                for value in values {
                    let mut row = base.clone();
                    row.push((key.clone(), value.clone()));
                    next.push(row);
                }
            }
            assignments = next;
        }
        let mut cells = Vec::with_capacity(assignments.len() * self.seeds.len());
        for assignment in &assignments {
            for &seed in &self.seeds {
                let mut tree = template.clone();
                // Object values are composite assignments: each entry is its
                // own dotted path, which lets a single grid dimension hold a
                // hand-picked list of cells.
                let mut args: Vec<String> = Vec::new();
                for (key, value) in assignment {
                    match value {
                        Value::Object(map) => {
                            for (k, v) in map {
                                args.push(format!("--{k}={v}"));
                            }
                        }
                        other => args.push(format!("--{key}={other}")),
                    }
                }
                args.push(format!("--run_seed={seed}"));
                apply_overrides(&mut tree, &args)?;
                let cell: CellSpec =
                    serde_json::from_value(tree).map_err(|e| CliError::usage(anyhow!(e)))?;
                cell.config.validate().map_err(classify)?;
                cells.push(cell);
            }
        }
        Ok(cells)
    }
}

/// One row of the aggregate CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateRow {
    pub schema: String,
    pub run_id: String,
    pub arm: String,
    pub checkpoint: String,
    pub algo: String,
    pub mode: String,
    pub head: String,
    pub beta: f64,
    pub epsilon: f64,
    pub clip_c: Option<f64>,
    pub alpha: f64,
    pub n_experience: usize,
    pub lr: f64,
    pub run_seed: u64,
    pub mean_length: f64,
    pub win_score: f64,
}

impl AggregateRow {
    pub fn point(&self) -> ParetoPoint {
        ParetoPoint {
            mean_length: self.mean_length,
            win_score: self.win_score,
            run_id: self.run_id.clone(),
            checkpoint: self.checkpoint.clone(),
        }
    }
}

pub fn read_aggregate(path: &Path) -> CliResult<Vec<AggregateRow>> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| CliError::runtime(anyhow!("reading {}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for result in reader.deserialize() {
        let row: AggregateRow =
            result.map_err(|e| CliError::runtime(anyhow!("parsing {}: {e}", path.display())))?;
        if row.schema != AGGREGATE_SCHEMA {
            return Err(CliError::usage(anyhow!(
                "unknown aggregate schema {:?} in {}",
                row.schema,
                path.display()
            )));
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Appends rows atomically (rewrite to a temp file, then rename).
pub fn append_aggregate(path: &Path, new_rows: &[AggregateRow]) -> CliResult<()> {
    let mut rows = if path.exists() {
        read_aggregate(path)?
    } else {
        Vec::new()
    };
    rows.extend(new_rows.iter().cloned());
    let mut writer = csv::Writer::from_writer(Vec::new());
    for row in &rows {
        writer
            .serialize(row)
            .map_err(|e| CliError::runtime(anyhow!(e)))?;
    }
    let bytes = writer
        .into_inner()
        .map_err(|e| CliError::runtime(anyhow!("{e}")))?;
    crate::pipeline::write_atomic(path, std::str::from_utf8(&bytes).expect("CSV is UTF-8"))
}

/// Outcome summary, mainly for tests and resumability checks.
pub struct SweepSummary {
    pub cells_total: usize,
    pub cells_trained: usize,
    pub cells_reused: usize,
    pub aggregate_rows: usize,
}

/// Runs every cell (skipping completed runs by id), evaluates the three
/// checkpoints of each run, and maintains the aggregate CSV.
pub fn run_sweep(spec: &SweepSpec, out_dir: &Path) -> CliResult<SweepSummary> {
    let cells = spec.expand()?;
    println!(
        "sweep: {} cells ({} grid keys, {} seeds)",
        cells.len(),
        spec.grid.len(),
        spec.seeds.len()
    );
    let stages = Stages::new(out_dir);
    let aggregate_path = out_dir.join("aggregate.csv");
    let mut trained = 0usize;
    let mut reused = 0usize;
    for (i, cell) in cells.iter().enumerate() {
        let spec_rl = cell.rl_spec();
        let run_id = spec_rl.run_id();
        let existing: Vec<AggregateRow> = if aggregate_path.exists() {
            read_aggregate(&aggregate_path)?
                .into_iter()
                .filter(|r| r.run_id == run_id)
                .collect()
        } else {
            Vec::new()
        };
        if !existing.is_empty() {
            reused += 1;
            continue;
        }
        let (corpus, _, _) = stages.ensure_corpus(&cell.config)?;
        let (sft, _, _) = stages.ensure_sft(&cell.config)?;
        let (rm, _, _) = stages.ensure_rm(&cell.config, cell.mode.rm_mode(), &corpus)?;
        let run_dir_before = out_dir.join("runs").join(&run_id).join("record.json");
        let had_record = run_dir_before.exists();
        let (run_dir, record) = run_rl(&stages, &spec_rl, &rm, &sft)?;
        if had_record {
            reused += 1;
        } else {
            trained += 1;
        }
        let mut rows = Vec::new();
        for (tag, file) in &record.artifacts.checkpoints {
            let ckpt = crate::pipeline::load_policy_checkpoint(&run_dir.join(file))?;
            let report = evaluate_policy(&cell.config, &ckpt.params, &sft)?;
            let report_path = run_dir.join(format!("eval_{tag}.json"));
            crate::pipeline::write_atomic(
                &report_path,
                &serde_json::to_string_pretty(&report).map_err(|e| CliError::runtime(anyhow!(e)))?,
            )?;
            rows.push(AggregateRow {
                schema: AGGREGATE_SCHEMA.to_string(),
                run_id: run_id.clone(),
                arm: cell.arm(),
                checkpoint: tag.clone(),
                algo: format!("{:?}", cell.algo).to_lowercase(),
                mode: match cell.mode {
                    ModeArg::Baseline => "baseline".to_string(),
                    ModeArg::Odin => "odin".to_string(),
                },
                head: format!("{:?}", cell.head).to_lowercase(),
                beta: cell.config.rl.config.beta,
                epsilon: cell.config.rl.config.epsilon,
                clip_c: cell.config.rl.config.clip_c,
                alpha: cell.config.rl.config.alpha,
                n_experience: cell.config.rl.config.n_experience,
                lr: cell.config.rl.config.lr,
                run_seed: cell.run_seed,
                mean_length: report.mean_length,
                win_score: report.win_score,
            });
        }
        append_aggregate(&aggregate_path, &rows)?;
        println!(
            "  cell {}/{} [{}] {} points appended",
            i + 1,
            cells.len(),
            cell.arm(),
            rows.len()
        );
    }
    let rows = if aggregate_path.exists() {
        read_aggregate(&aggregate_path)?.len()
    } else {
        0
    };
    Ok(SweepSummary {
        cells_total: cells.len(),
        cells_trained: trained,
        cells_reused: reused,
        aggregate_rows: rows,
    })
}

/// Groups aggregate rows by arm and extracts each arm's Pareto front.
pub fn fronts_by_arm(rows: &[AggregateRow]) -> Vec<(String, Vec<ParetoPoint>, Vec<ParetoPoint>)> {
    let mut arms: BTreeMap<String, Vec<ParetoPoint>> = BTreeMap::new();
    for row in rows {
        arms.entry(row.arm.clone()).or_default().push(row.point());
    }
    arms.into_iter()
        .map(|(arm, points)| {
            let front = pareto_front(&points);
            (arm, points, front)
        })
        .collect()
}

/// Writes the per-arm fronts as CSV.
pub fn write_pareto_csv(path: &Path, fronts: &[(String, Vec<ParetoPoint>, Vec<ParetoPoint>)]) -> CliResult<()> {
    let mut out = String::new();
    out.push_str("schema,arm,mean_length,win_score,run_id,checkpoint\n");
    for (arm, _, front) in fronts {
        for p in front {
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{},{}\n",
                PARETO_SCHEMA, arm, p.mean_length, p.win_score, p.run_id, p.checkpoint
            ));
        }
    }
    crate::pipeline::write_atomic(path, &out)
}

pub fn read_pareto_csv(path: &Path) -> CliResult<Vec<(String, ParetoPoint)>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::runtime(anyhow!(e)))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 6 {
            return Err(CliError::runtime(anyhow!("malformed pareto row: {line}")));
        }
        if parts[0] != PARETO_SCHEMA {
            return Err(CliError::usage(anyhow!("unknown pareto schema {:?}", parts[0])));
        }
        rows.push((
            parts[1].to_string(),
            ParetoPoint {
                mean_length: parts[2].parse().map_err(|e| CliError::runtime(anyhow!("{e}")))?,
                win_score: parts[3].parse().map_err(|e| CliError::runtime(anyhow!("{e}")))?,
                run_id: parts[4].to_string(),
                checkpoint: parts[5].to_string(),
            },
        ));
    }
    Ok(rows)
}
