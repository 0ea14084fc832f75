//! The seer decoder: past and future subdecoders over one shared parameter
//! set, and the fusion layer.
//!
//! The subdecoders read the decorated sequence `[BOS, y1..yI, EOS]`
//! (positions `0..=I+1`). `Mp` lets position `q` see positions `≤ q`; `Mf`
//! lets it see positions `≥ q`. Prediction `i` therefore reads the past
//! representation at row `i − 1` (context `BOS, y1..y(i−1)`) and the future
//! representation at row `i + 1` (context `y(i+1)..yI, EOS`); neither
//! contains `yi`, and no row is ever fully masked.

use std::sync::Arc;

use crate::autograd::{AttnShape, Var};
use crate::data::{Batch, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::kernels::AttnMask;
use crate::tensor::Scalar;

use super::{Encoded, Fwd};

/// `Mp` and `Mf` over a decorated sequence of `I + 2` positions.
#[derive(Clone, Debug)]
pub struct SeerMasks {
    pub len: usize,
    pub mp: AttnMask,
    pub mf: AttnMask,
}

impl SeerMasks {
    /// Row of `Mp` that serves prediction `i` (1-based).
    pub fn past_row(i: usize) -> usize {
        i - 1
    }

    /// Row of `Mf` that serves prediction `i` (1-based).
    pub fn future_row(i: usize) -> usize {
        i + 1
    }

    /// Decorated positions visible to prediction `i` through the past path.
    pub fn past_context(&self, i: usize) -> Vec<usize> {
        self.mp.permitted(0, Self::past_row(i))
    }

    pub fn future_context(&self, i: usize) -> Vec<usize> {
        self.mf.permitted(0, Self::future_row(i))
    }
}

pub fn build_seer_masks(target_len: usize) -> Result<SeerMasks> {
    if target_len == 0 {
        return Err(Error::InvalidArgument("seer masks need I >= 1".into()));
    }
    let n = target_len + 2;
    Ok(SeerMasks {
        len: target_len,
        mp: AttnMask::from_fn(n, n, |q, k| k > q),
        mf: AttnMask::from_fn(n, n, |q, k| k < q),
    })
}

fn batched_masks(lens: &[usize], width: usize) -> (Arc<AttnMask>, Arc<AttnMask>) {
    let b = lens.len();
    let mp = AttnMask::batched_from_fn(b, width, width, |b, q, k| k > q || k >= lens[b] + 2);
    let mf = AttnMask::batched_from_fn(b, width, width, |b, q, k| k < q || k >= lens[b] + 2);
    (Arc::new(mp), Arc::new(mf))
}

/// Seer decoder outputs for a batch laid out as `batch × max I` rows.
#[derive(Clone, Debug)]
pub struct SeerOut {
    /// `S_s`; row `(b, i−1)` serves prediction `i`.
    pub states: Var,
    /// The fused representation before cross-attention.
    pub fused: Var,
    /// `H'p` rows aligned to predictions, times `Wp`.
    pub past_part: Option<Var>,
    /// `H''f` rows aligned to predictions, times `Wf`.
    pub future_part: Option<Var>,
    /// Subdecoder outputs over the decorated sequence, `batch × (max I + 2)`.
    pub hp: Option<Var>,
    pub hf: Option<Var>,
    pub width: usize,
}

impl<T: Scalar> Fwd<'_, T> {
    /// Runs the `N − 1` shared subdecoder layers under `mask`.
    pub fn subdecoder(
        &mut self,
        x: Var,
        batch: usize,
        width: usize,
        mask: Arc<AttnMask>,
        enc: &Encoded,
    ) -> Result<Var> {
        let cross = enc.cross_mask(width);
        let mut h = x;
        for l in 0..self.model.cfg.n_layers - 1 {
            h = self.decoder_layer(
                h,
                batch,
                width,
                mask.clone(),
                enc,
                cross.clone(),
                &format!("seer.sub.layer{l}"),
            )?;
        }
        Ok(h)
    }

    pub fn seer(&mut self, batch: &Batch, enc: &Encoded) -> Result<SeerOut> {
        let parts = self
            .model
            .cfg
            .seer
            .ok_or_else(|| Error::Capability("the model has no seer decoder".into()))?;
        let (b, imax) = (batch.size(), batch.tgt_width);
        let width = imax + 2;
        let mut ids = vec![PAD; b * width];
        for r in 0..b {
            let row = batch.tgt_row(r);
            ids[r * width] = BOS;
            ids[r * width + 1..r * width + 1 + row.len()].copy_from_slice(row);
            ids[r * width + 1 + row.len()] = EOS;
        }
        let (mp, mf) = batched_masks(&batch.tgt_lens, width);
        let x = self.embed("tgt_embed", &ids, width)?;
        let shape = AttnShape {
            batch: b,
            q_len: width,
            k_len: width,
            heads: self.model.cfg.n_heads,
        };

        let mut hp = None;
        let mut hf = None;
        let mut past_part = None;
        let mut future_part = None;
        if parts.past {
            let h = self.subdecoder(x, b, width, mp.clone(), enc)?;
            hp = Some(h);
            let a = self.mha(h, h, shape, mp, "seer.fusion.mha")?;
            let h = self.residual(h, a, "seer.fusion.ln1")?;
            let idx: Vec<usize> = (0..b)
                .flat_map(|r| (1..=imax).map(move |i| r * width + i - 1))
                .collect();
            let rows = self.tape.gather_rows(h, &idx)?;
            let wp = self.p("seer.fusion.wp")?;
            past_part = Some(self.tape.matmul(rows, wp)?);
        }
        if parts.future {
            let h = self.subdecoder(x, b, width, mf.clone(), enc)?;
            hf = Some(h);
            let a = self.mha(h, h, shape, mf, "seer.fusion.mha")?;
            let h = self.residual(h, a, "seer.fusion.ln1")?;
            let lens = &batch.tgt_lens;
            let idx: Vec<usize> = (0..b)
                .flat_map(|r| (1..=imax).map(move |i| r * width + (i + 1).min(lens[r] + 1)))
                .collect();
            let rows = self.tape.gather_rows(h, &idx)?;
            let wf = self.p("seer.fusion.wf")?;
            future_part = Some(self.tape.matmul(rows, wf)?);
        }
        let fused = match (past_part, future_part) {
            (Some(p), Some(f)) => self.tape.add(p, f)?,
            (Some(p), None) => p,
            (None, Some(f)) => f,
            (None, None) => unreachable!("validated seer parts"),
        };
        let cross = enc.cross_mask(imax);
        let s = self.cross(fused, b, imax, enc, cross, "seer.fusion")?;
        let f = self.ffn(s, "seer.fusion.ffn")?;
        let states = self.residual(s, f, "seer.fusion.ln3")?;
        Ok(SeerOut {
            states,
            fused,
            past_part,
            future_part,
            hp,
            hf,
            width: imax,
        })
    }
}
