use std::sync::Arc;

use rand::Rng as _;

use crate::autograd::{AttnShape, Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::{position_encoding, AttnMask};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

use super::Model;

const LN_EPS: f64 = 1e-6;

/// One forward pass: a tape, the model it reads, and the pass's switches.
pub struct Fwd<'m, T: Scalar = f32> {
    pub tape: Tape<T>,
    pub model: &'m Model<T>,
    dropout: Option<(f64, Rng)>,
    /// When false every cross-attention sublayer contributes zeros inside
    /// its residual branch.
    pub cross_attention: bool,
}

impl<'m, T: Scalar> Fwd<'m, T> {
    /// Gradient-tracking pass without dropout.
    pub fn new(model: &'m Model<T>) -> Self {
        Fwd {
            tape: Tape::new(),
            model,
            dropout: None,
            cross_attention: true,
        }
    }

    /// Gradient-tracking pass with the model's dropout rate.
    pub fn train(model: &'m Model<T>, rng: Rng) -> Self {
        let p = model.cfg.dropout;
        Fwd {
            dropout: (p > 0.0).then_some((p, rng)),
            ..Fwd::new(model)
        }
    }

    /// Parameters bound as constants.
    pub fn inference(model: &'m Model<T>) -> Self {
        Fwd {
            tape: Tape::inference(),
            ..Fwd::new(model)
        }
    }

    pub fn p(&mut self, name: &str) -> Result<Var> {
        let store = &self.model.params;
        let id = store
            .id(name)
            .ok_or_else(|| Error::Capability(format!("missing parameter {name}")))?;
        Ok(self.tape.param(store, id))
    }

    pub fn d(&self) -> usize {
        self.model.cfg.d_model
    }

    pub(crate) fn dropout(&mut self, x: Var) -> Result<Var> {
        let Some((p, rng)) = self.dropout.as_mut() else {
            return Ok(x);
        };
        let keep = T::lit(1.0 / (1.0 - *p));
        let n = self.tape.value(x).len();
        let mask = (0..n)
            .map(|_| if rng.random::<f64>() < *p { T::zero() } else { keep })
            .collect();
        self.tape.dropout_mask(x, mask)
    }

    pub(crate) fn affine(&mut self, x: Var, w: &str, b: &str) -> Result<Var> {
        let (w, b) = (self.p(w)?, self.p(b)?);
        let y = self.tape.matmul(x, w)?;
        self.tape.add_row(y, b)
    }

    pub(crate) fn layer_norm(&mut self, x: Var, p: &str) -> Result<Var> {
        let g = self.p(&format!("{p}.gain"))?;
        let b = self.p(&format!("{p}.bias"))?;
        self.tape.layer_norm(x, g, b, T::lit(LN_EPS))
    }

    /// `LN(x + dropout(y))`.
    pub(crate) fn residual(&mut self, x: Var, y: Var, ln: &str) -> Result<Var> {
        let y = self.dropout(y)?;
        let s = self.tape.add(x, y)?;
        self.layer_norm(s, ln)
    }

    pub(crate) fn mha(
        &mut self,
        xq: Var,
        xkv: Var,
        shape: AttnShape,
        mask: Arc<AttnMask>,
        p: &str,
    ) -> Result<Var> {
        let q = self.affine(xq, &format!("{p}.wq"), &format!("{p}.bq"))?;
        let k = self.affine(xkv, &format!("{p}.wk"), &format!("{p}.bk"))?;
        let v = self.affine(xkv, &format!("{p}.wv"), &format!("{p}.bv"))?;
        let o = self.tape.attention(q, k, v, shape, mask)?;
        self.affine(o, &format!("{p}.wo"), &format!("{p}.bo"))
    }

    pub(crate) fn ffn(&mut self, x: Var, p: &str) -> Result<Var> {
        let h = self.affine(x, &format!("{p}.w1"), &format!("{p}.b1"))?;
        let h = self.tape.relu(h);
        let h = self.dropout(h)?;
        self.affine(h, &format!("{p}.w2"), &format!("{p}.b2"))
    }

    /// Scaled embedding plus position encoding for a `batch × width` id
    /// matrix; position is the column index.
    pub(crate) fn embed(&mut self, table: &str, ids: &[usize], width: usize) -> Result<Var> {
        let d = self.d();
        let t = self.p(table)?;
        let e = self.tape.embedding(t, ids)?;
        let e = self.tape.scale(e, T::lit((d as f64).sqrt()));
        let pe: Vec<Vec<T>> = (0..width).map(|p| position_encoding(p, d)).collect();
        let mut data = Vec::with_capacity(ids.len() * d);
        for r in 0..ids.len() {
            data.extend_from_slice(&pe[r % width]);
        }
        let pe = self.tape.constant(Tensor::new(vec![ids.len(), d], data)?);
        let x = self.tape.add(e, pe)?;
        self.dropout(x)
    }

    /// Self-attention, cross-attention and FFN sublayers, each followed by a
    /// residual connection and layer norm.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn decoder_layer(
        &mut self,
        x: Var,
        batch: usize,
        len: usize,
        self_mask: Arc<AttnMask>,
        enc: &super::Encoded,
        cross_mask: Arc<AttnMask>,
        p: &str,
    ) -> Result<Var> {
        let heads = self.model.cfg.n_heads;
        let shape = AttnShape {
            batch,
            q_len: len,
            k_len: len,
            heads,
        };
        let a = self.mha(x, x, shape, self_mask, &format!("{p}.mha"))?;
        let x = self.residual(x, a, &format!("{p}.ln1"))?;
        let x = self.cross(x, batch, len, enc, cross_mask, p)?;
        let f = self.ffn(x, &format!("{p}.ffn"))?;
        self.residual(x, f, &format!("{p}.ln3"))
    }

    /// Cross-attention sublayer `{p}.cross` with norm `{p}.ln2`.
    pub(crate) fn cross(
        &mut self,
        x: Var,
        batch: usize,
        len: usize,
        enc: &super::Encoded,
        mask: Arc<AttnMask>,
        p: &str,
    ) -> Result<Var> {
        if !self.cross_attention {
            return self.layer_norm(x, &format!("{p}.ln2"));
        }
        let shape = AttnShape {
            batch,
            q_len: len,
            k_len: enc.width,
            heads: self.model.cfg.n_heads,
        };
        let c = self.mha(x, enc.h, shape, mask, &format!("{p}.cross"))?;
        self.residual(x, c, &format!("{p}.ln2"))
    }

    /// `states · Woᵀ`; the one output matrix shared by both decoders.
    pub fn project(&mut self, states: Var) -> Result<Var> {
        let wo = self.p("output.wo")?;
        self.tape.matmul_nt(states, wo)
    }
}
