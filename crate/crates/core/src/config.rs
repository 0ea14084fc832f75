//! Run configuration: a sectioned TOML file where every key has a default
//! and unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Task;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, SeerParts};
use crate::objectives::{Ablation, Mechanism};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub training: TrainingSection,
    pub data: DataSection,
    pub eval: EvalSection,
    pub io: IoSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub dropout: f64,
    /// Training pairs with a longer side are dropped.
    pub max_len: usize,
    /// `false` trains a plain Transformer baseline.
    pub seer_decoder: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            d_ffn: 256,
            dropout: 0.1,
            max_len: 128,
            seer_decoder: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub mechanism: Mechanism,
    pub lambda: f64,
    pub alpha: f64,
    pub ablation: Ablation,
    /// Steps trained on `L_c + L_s` before the L2 term switches on.
    pub pretrain_steps: u64,
    pub max_steps: u64,
    pub seed: u64,
    pub warmup_steps: u64,
    pub peak_lr: f64,
    /// Padded-token budget per batch.
    pub batch_tokens: usize,
    pub label_smoothing: f64,
    pub log_every: u64,
    pub eval_every: u64,
    pub checkpoint_every: u64,
    pub disc_channels: usize,
}

impl Default for TrainingSection {
    fn default() -> Self {
        TrainingSection {
            mechanism: Mechanism::Kd,
            lambda: 0.5,
            alpha: 0.2,
            ablation: Ablation::Full,
            pretrain_steps: 0,
            max_steps: 5000,
            seed: 1,
            warmup_steps: 400,
            peak_lr: 2e-3,
            batch_tokens: 256,
            label_smoothing: 0.0,
            log_every: 100,
            eval_every: 1000,
            checkpoint_every: 1000,
            disc_channels: 64,
        }
    }
}

/// A generated toy corpus in place of files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSection {
    pub task: Task,
    pub train_size: usize,
    pub valid_size: usize,
    pub test_size: usize,
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Seeds the lexicon and the sentences; defaults to the training seed.
    pub seed: Option<u64>,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        SyntheticSection {
            task: Task::Lexicon,
            train_size: 10_000,
            valid_size: 200,
            test_size: 500,
            vocab_size: 50,
            min_len: 5,
            max_len: 15,
            seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub train_src: Option<PathBuf>,
    pub train_tgt: Option<PathBuf>,
    pub valid_src: Option<PathBuf>,
    pub valid_tgt: Option<PathBuf>,
    pub synthetic: Option<SyntheticSection>,
    pub min_freq: usize,
    pub max_vocab: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            train_src: None,
            train_tgt: None,
            valid_src: None,
            valid_tgt: None,
            synthetic: None,
            min_freq: 1,
            max_vocab: 50_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub beam: usize,
    pub length_penalty: f64,
    pub max_len_factor: f64,
    pub max_len_margin: usize,
    pub bins: usize,
    /// Validation sentences decoded for BLEU during training.
    pub valid_bleu_sentences: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            beam: 4,
            length_penalty: 0.6,
            max_len_factor: 1.5,
            max_len_margin: 5,
            bins: 8,
            valid_bleu_sentences: 200,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IoSection {
    /// Relative paths resolve against the run root.
    pub run_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let msg = e.message().replace('\n', " ");
            let line = e
                .span()
                .map(|s| text[..s.start].matches('\n').count() + 1);
            match line {
                Some(l) => Error::Config(format!("line {l}: {msg}")),
                None => Error::Config(msg),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let t = &self.training;
        if !(0.0..=1.0).contains(&t.lambda) {
            return bad(format!("training.lambda = {} is outside [0, 1]", t.lambda));
        }
        if t.alpha < 0.0 {
            return bad("training.alpha must be non-negative".into());
        }
        if !(0.0..1.0).contains(&t.label_smoothing) {
            return bad("training.label_smoothing must lie in [0, 1)".into());
        }
        if t.batch_tokens < self.model.max_len {
            return bad(format!(
                "training.batch_tokens = {} is below model.max_len = {}",
                t.batch_tokens, self.model.max_len
            ));
        }
        if t.log_every == 0 || t.eval_every == 0 || t.checkpoint_every == 0 {
            return bad("training.log_every, eval_every and checkpoint_every must be positive".into());
        }
        if t.peak_lr <= 0.0 {
            return bad("training.peak_lr must be positive".into());
        }
        if !self.model.seer_decoder {
            if self.mechanism() != Mechanism::None {
                return bad("a model without seer decoder needs training.mechanism = \"none\"".into());
            }
            if t.ablation != Ablation::Full && t.ablation != Ablation::NoKd {
                return bad("seer ablations need model.seer_decoder = true".into());
            }
        }
        if self.eval.beam == 0 || self.eval.bins == 0 {
            return bad("eval.beam and eval.bins must be at least 1".into());
        }
        let d = &self.data;
        match &d.synthetic {
            Some(s) => {
                if s.vocab_size <= 4 || s.min_len == 0 || s.min_len > s.max_len {
                    return bad("data.synthetic needs vocab_size > 4 and 1 <= min_len <= max_len".into());
                }
                if d.train_src.is_some() || d.train_tgt.is_some() {
                    return bad("data.synthetic and data.train_* are exclusive".into());
                }
            }
            None => {
                if d.train_src.is_none() || d.train_tgt.is_none() {
                    return bad("data needs train_src and train_tgt, or a [data.synthetic] table".into());
                }
                if d.valid_src.is_some() != d.valid_tgt.is_some() {
                    return bad("data.valid_src and data.valid_tgt go together".into());
                }
            }
        }
        self.model_config(5, 5).validate().map_err(|e| match e {
            Error::HeadDivisibility { .. } => Error::Config(e.to_string()),
            other => other,
        })
    }

    /// `none` whenever the ablation drops distillation.
    pub fn mechanism(&self) -> Mechanism {
        match self.training.ablation {
            Ablation::NoKd => Mechanism::None,
            _ => self.training.mechanism,
        }
    }

    pub fn seer_parts(&self) -> Option<SeerParts> {
        if !self.model.seer_decoder {
            return None;
        }
        Some(match self.training.ablation {
            Ablation::NoFuture => SeerParts {
                past: true,
                future: false,
            },
            Ablation::NoPast => SeerParts {
                past: false,
                future: true,
            },
            _ => SeerParts::FULL,
        })
    }

    pub fn model_config(&self, src_vocab: usize, tgt_vocab: usize) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            n_layers: m.n_layers,
            d_model: m.d_model,
            n_heads: m.n_heads,
            d_ffn: m.d_ffn,
            dropout: m.dropout,
            max_len: m.max_len,
            src_vocab,
            tgt_vocab,
            seer: self.seer_parts(),
        }
    }

    pub fn synthetic_seed(&self) -> u64 {
        self.data
            .synthetic
            .as_ref()
            .and_then(|s| s.seed)
            .unwrap_or(self.training.seed)
    }

    /// SHA-256 of the canonical JSON form; key order in the file is
    /// irrelevant.
    pub fn hash(&self) -> String {
        let v = serde_json::to_value(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical(&v).as_bytes()))
    }
}

fn canonical(v: &serde_json::Value) -> String {
    use serde_json::Value;
    match v {
        Value::Object(m) => {
            let mut keys: Vec<&String> = m.keys().collect();
            keys.sort();
            let parts: Vec<String> = keys
                .iter()
                .map(|k| format!("{}:{}", Value::String((*k).clone()), canonical(&m[*k])))
                .collect();
            format!("{{{}}}", parts.join(","))
        }
        Value::Array(a) => format!("[{}]", a.iter().map(canonical).collect::<Vec<_>>().join(",")),
        other => other.to_string(),
    }
}
