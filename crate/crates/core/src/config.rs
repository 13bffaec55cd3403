//! Pipeline configuration: one top-level seed plus per-stage sections.
//!
//! Every stage derives its own seed from the top-level one through a named
//! sub-stream, so configs stay small and runs stay reproducible end to end.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::eval::JudgeConfig;
use crate::policy::BcConfig;
use crate::rl::RlConfig;
use crate::rm::RmHyper;
use crate::rng;
use crate::synthdata::{CorpusConfig, DemoParams, TokenSpace};

/// Derives a stage seed from the pipeline seed.
pub fn derive_seed(seed: u64, name: &str) -> u64 {
    use rand::Rng;
    rng::stream(seed, name).gen()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    pub n_pairs: usize,
    pub keyword_vocab: usize,
    pub filler_vocab: usize,
    pub t_max: usize,
    /// Explicit annotator length bias; `None` calibrates to
    /// `calibrate_target`.
    pub length_bias: Option<f64>,
    pub calibrate_target: f64,
    pub noise_std: f64,
    pub retry_cap: usize,
    pub samplers: [DemoParams; 2],
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            n_pairs: 10000,
            keyword_vocab: 5,
            filler_vocab: 10,
            t_max: 128,
            length_bias: None,
            calibrate_target: 0.66,
            noise_std: 0.15,
            retry_cap: 8,
            samplers: [DemoParams::default(), DemoParams::default()],
        }
    }
}

impl DataSection {
    pub fn tokens(&self) -> TokenSpace {
        TokenSpace {
            keyword_vocab: self.keyword_vocab,
            filler_vocab: self.filler_vocab,
        }
    }

    /// Corpus config at a given bias value (calibration resolves
    /// `length_bias = None`).
    pub fn corpus_config(&self, pipeline_seed: u64, bias: f64) -> CorpusConfig {
        CorpusConfig {
            n_pairs: self.n_pairs,
            tokens: self.tokens(),
            t_max: self.t_max,
            annotator_length_bias: bias,
            annotator_noise_std: self.noise_std,
            seed: derive_seed(pipeline_seed, "data"),
            retry_cap: self.retry_cap,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BcSection {
    pub n_demos: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
}

impl Default for BcSection {
    fn default() -> Self {
        Self {
            n_demos: 400,
            epochs: 25,
            lr: 0.05,
            batch: 256,
        }
    }
}

impl BcSection {
    pub fn bc_config(&self, pipeline_seed: u64) -> BcConfig {
        BcConfig {
            epochs: self.epochs,
            lr: self.lr,
            batch: self.batch,
            seed: derive_seed(pipeline_seed, "bc"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RmSection {
    pub lambda_l: f64,
    pub lambda_o: f64,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub hidden: usize,
    pub freeze_gains: bool,
    pub val_fraction: f64,
}

impl Default for RmSection {
    fn default() -> Self {
        let h = RmHyper::default();
        Self {
            lambda_l: h.lambda_l,
            lambda_o: h.lambda_o,
            lr: h.lr,
            batch: h.batch,
            epochs: h.epochs,
            hidden: h.hidden,
            freeze_gains: h.freeze_gains,
            val_fraction: h.val_fraction,
        }
    }
}

impl RmSection {
    pub fn hyper(&self, pipeline_seed: u64) -> RmHyper {
        RmHyper {
            lambda_l: self.lambda_l,
            lambda_o: self.lambda_o,
            lr: self.lr,
            batch: self.batch,
            epochs: self.epochs,
            seed: derive_seed(pipeline_seed, "rm"),
            hidden: self.hidden,
            freeze_gains: self.freeze_gains,
            val_fraction: self.val_fraction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RlSection {
    /// Number of distinct prompts in the RL tuning set.
    pub n_prompts: usize,
    #[serde(flatten)]
    pub config: RlConfig,
}

impl Default for RlSection {
    fn default() -> Self {
        Self {
            n_prompts: 512,
            config: RlConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    /// Held-out evaluation prompt count.
    pub n_prompts: usize,
    pub temperature: f64,
    pub top_p: f64,
    pub judge: JudgeConfig,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            n_prompts: 300,
            temperature: 0.8,
            top_p: 0.8,
            judge: JudgeConfig::default(),
        }
    }
}

/// Whole-pipeline configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub data: DataSection,
    pub bc: BcSection,
    pub rm: RmSection,
    pub rl: RlSection,
    pub eval: EvalSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 17,
            data: DataSection::default(),
            bc: BcSection::default(),
            rm: RmSection::default(),
            rl: RlSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_json(json: &str) -> Result<Self> {
        Ok(serde_json::from_str(json)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.corpus_config(self.seed, 0.0).validate()?;
        self.rl.config.validate()?;
        Ok(())
    }
}
