//! Encoder, conventional decoder, seer decoder and their parameters.

mod fwd;
pub mod seer;
pub mod transformer;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng::{Rng, Streams};
use crate::tensor::{Scalar, Tensor};

pub use fwd::Fwd;
pub use seer::{build_seer_masks, SeerMasks, SeerOut};
pub use transformer::Encoded;

/// Which seer paths exist. Ablations drop one of them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeerParts {
    pub past: bool,
    pub future: bool,
}

impl SeerParts {
    pub const FULL: SeerParts = SeerParts {
        past: true,
        future: true,
    };

    pub fn is_full(self) -> bool {
        self.past && self.future
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub dropout: f64,
    pub max_len: usize,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    /// `None` builds a plain Transformer with no seer decoder.
    pub seer: Option<SeerParts>,
}

impl ModelConfig {
    pub fn desk(src_vocab: usize, tgt_vocab: usize) -> Self {
        ModelConfig {
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            d_ffn: 256,
            dropout: 0.1,
            max_len: 128,
            src_vocab,
            tgt_vocab,
            seer: Some(SeerParts::FULL),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::HeadDivisibility {
                d_model: self.d_model,
                n_heads: self.n_heads,
            });
        }
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_layers == 0 {
            return bad("model.n_layers must be at least 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("model.dropout must lie in [0, 1)");
        }
        if self.d_ffn == 0 || self.max_len == 0 {
            return bad("model.d_ffn and model.max_len must be positive");
        }
        if self.src_vocab <= 4 || self.tgt_vocab <= 4 {
            return bad("vocabularies need at least one non-reserved token");
        }
        if let Some(p) = self.seer {
            if !p.past && !p.future {
                return bad("seer decoder needs a past or a future path");
            }
        }
        Ok(())
    }
}

/// A configuration plus its named parameters.
#[derive(Clone, Debug)]
pub struct Model<T: Scalar = f32> {
    pub cfg: ModelConfig,
    pub params: ParamStore<T>,
}

struct Init<'a> {
    store: &'a mut ParamStore<f32>,
    rng: Rng,
}

impl Init<'_> {
    fn xavier(&mut self, name: &str, rows: usize, cols: usize) -> Result<()> {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        let rng = &mut self.rng;
        let t = Tensor::from_fn(&[rows, cols], |_| rng.random_range(-a..a) as f32);
        self.store.insert(name, t).map(drop)
    }

    fn zeros(&mut self, name: &str, n: usize) -> Result<()> {
        self.store.insert(name, Tensor::zeros(&[n])).map(drop)
    }

    fn ln(&mut self, p: &str, d: usize) -> Result<()> {
        self.store.insert(format!("{p}.gain"), Tensor::full(&[d], 1.0))?;
        self.zeros(&format!("{p}.bias"), d)
    }

    fn mha(&mut self, p: &str, d: usize) -> Result<()> {
        for w in ["q", "k", "v", "o"] {
            self.xavier(&format!("{p}.w{w}"), d, d)?;
            self.zeros(&format!("{p}.b{w}"), d)?;
        }
        Ok(())
    }

    fn ffn(&mut self, p: &str, d: usize, f: usize) -> Result<()> {
        self.xavier(&format!("{p}.w1"), d, f)?;
        self.zeros(&format!("{p}.b1"), f)?;
        self.xavier(&format!("{p}.w2"), f, d)?;
        self.zeros(&format!("{p}.b2"), d)
    }

    fn decoder_layer(&mut self, p: &str, d: usize, f: usize) -> Result<()> {
        self.mha(&format!("{p}.mha"), d)?;
        self.ln(&format!("{p}.ln1"), d)?;
        self.mha(&format!("{p}.cross"), d)?;
        self.ln(&format!("{p}.ln2"), d)?;
        self.ffn(&format!("{p}.ffn"), d, f)?;
        self.ln(&format!("{p}.ln3"), d)
    }

    fn embedding(&mut self, name: &str, v: usize, d: usize) -> Result<()> {
        let normal = Normal::new(0.0, (d as f64).powf(-0.5)).expect("positive std");
        let rng = &mut self.rng;
        let t = Tensor::from_fn(&[v, d], |_| normal.sample(rng) as f32);
        self.store.insert(name, t).map(drop)
    }
}

impl Model<f32> {
    /// Fresh parameters drawn from the seed's `init` stream.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init {
            store: &mut store,
            rng: Streams::new(seed).stream("init"),
        };
        let (d, f, n) = (cfg.d_model, cfg.d_ffn, cfg.n_layers);
        init.embedding("src_embed", cfg.src_vocab, d)?;
        init.embedding("tgt_embed", cfg.tgt_vocab, d)?;
        for l in 0..n {
            let p = format!("encoder.layer{l}");
            init.mha(&format!("{p}.mha"), d)?;
            init.ln(&format!("{p}.ln1"), d)?;
            init.ffn(&format!("{p}.ffn"), d, f)?;
            init.ln(&format!("{p}.ln2"), d)?;
        }
        for l in 0..n {
            init.decoder_layer(&format!("decoder.layer{l}"), d, f)?;
        }
        if let Some(parts) = cfg.seer {
            for l in 0..n - 1 {
                init.decoder_layer(&format!("seer.sub.layer{l}"), d, f)?;
            }
            init.mha("seer.fusion.mha", d)?;
            init.ln("seer.fusion.ln1", d)?;
            if parts.past {
                init.xavier("seer.fusion.wp", d, d)?;
            }
            if parts.future {
                init.xavier("seer.fusion.wf", d, d)?;
            }
            init.mha("seer.fusion.cross", d)?;
            init.ln("seer.fusion.ln2", d)?;
            init.ffn("seer.fusion.ffn", d, f)?;
            init.ln("seer.fusion.ln3", d)?;
        }
        init.xavier("output.wo", cfg.tgt_vocab, d)?;
        Ok(Model { cfg, params: store })
    }
}

impl<T: Scalar> Model<T> {
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
        }
    }

    pub fn has_seer(&self) -> bool {
        self.cfg.seer.is_some()
    }

    /// Fails unless both seer paths are present, naming what is missing.
    pub fn require_full_seer(&self) -> Result<()> {
        match self.cfg.seer {
            None => Err(Error::Capability(
                "the checkpoint has no seer decoder (model.seer_decoder = false)".into(),
            )),
            Some(p) if !p.future => Err(Error::Capability(
                "the checkpoint's seer decoder has no future subdecoder (ablation no_future)"
                    .into(),
            )),
            Some(p) if !p.past => Err(Error::Capability(
                "the checkpoint's seer decoder has no past subdecoder (ablation no_past)".into(),
            )),
            Some(_) => Ok(()),
        }
    }
}

/// Parameter-name predicates used for gradient provenance and freezing.
pub mod names {
    pub fn is_seer(name: &str) -> bool {
        name.starts_with("seer.")
    }

    pub fn is_encoder(name: &str) -> bool {
        name.starts_with("encoder.") || name == "src_embed"
    }

    pub fn is_conventional(name: &str) -> bool {
        name.starts_with("decoder.")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_subdecoder_set_and_one_wo() {
        let m = Model::new(ModelConfig::desk(20, 20), 1).unwrap();
        let names: Vec<&str> = m.params.iter().map(|(_, n, _)| n).collect();
        assert_eq!(names.iter().filter(|n| n.starts_with("seer.sub.layer0.mha.wq")).count(), 1);
        assert!(!names.iter().any(|n| n.starts_with("seer.sub.layer1")));
        assert_eq!(names.iter().filter(|n| n.ends_with(".wo") && !n.contains("mha") && !n.contains("cross")).count(), 1);
    }

    #[test]
    fn same_seed_same_init() {
        let a = Model::new(ModelConfig::desk(20, 20), 5).unwrap();
        let b = Model::new(ModelConfig::desk(20, 20), 5).unwrap();
        assert_eq!(a.params.checksum(|_| true), b.params.checksum(|_| true));
    }

    #[test]
    fn bad_heads_rejected() {
        let mut c = ModelConfig::desk(20, 20);
        c.n_heads = 5;
        assert!(matches!(Model::new(c, 0), Err(Error::HeadDivisibility { .. })));
    }

    #[test]
    fn ablated_checkpoint_names_missing_part() {
        let mut c = ModelConfig::desk(20, 20);
        c.seer = Some(SeerParts {
            past: true,
            future: false,
        });
        let m = Model::new(c, 0).unwrap();
        assert!(m.params.id("seer.fusion.wf").is_none());
        let err = m.require_full_seer().unwrap_err().to_string();
        assert!(err.contains("future"));
    }
}
