use std::sync::Arc;

use crate::autograd::{AttnShape, Var};
use crate::data::{Batch, BOS, PAD};
use crate::error::Result;
use crate::kernels::AttnMask;
use crate::tensor::Scalar;

use super::Fwd;

/// Encoder states `H`, `[batch·width × d]`, with the source lengths that
/// define which key rows are real.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub h: Var,
    pub lens: Vec<usize>,
    pub width: usize,
}

impl Encoded {
    pub fn batch(&self) -> usize {
        self.lens.len()
    }

    /// Mask for `q_len` decoder queries per sentence over the real source
    /// positions.
    pub fn cross_mask(&self, q_len: usize) -> Arc<AttnMask> {
        Arc::new(AttnMask::batched_from_fn(
            self.batch(),
            q_len,
            self.width,
            |b, _, k| k >= self.lens[b],
        ))
    }
}

/// Decoder input `[BOS, y1..yI]` per row, padded to `max I + 1`.
pub struct DecoderInput {
    pub ids: Vec<usize>,
    pub lens: Vec<usize>,
    pub width: usize,
}

impl DecoderInput {
    pub fn from_batch(batch: &Batch) -> Self {
        let width = batch.tgt_width + 1;
        let mut ids = vec![PAD; batch.size() * width];
        for b in 0..batch.size() {
            ids[b * width] = BOS;
            let row = batch.tgt_row(b);
            ids[b * width + 1..b * width + 1 + row.len()].copy_from_slice(row);
        }
        DecoderInput {
            ids,
            lens: batch.tgt_lens.iter().map(|l| l + 1).collect(),
            width,
        }
    }

    /// Prefixes that all start with `BOS` and share one length.
    pub fn from_prefixes(prefixes: &[&[usize]]) -> Self {
        let width = prefixes[0].len();
        DecoderInput {
            ids: prefixes.iter().flat_map(|p| p.iter().copied()).collect(),
            lens: vec![width; prefixes.len()],
            width,
        }
    }
}

impl<T: Scalar> Fwd<'_, T> {
    pub fn encode(&mut self, src: &[usize], lens: &[usize], width: usize) -> Result<Encoded> {
        let batch = lens.len();
        let mask = Arc::new(AttnMask::batched_from_fn(batch, width, width, |b, _, k| {
            k >= lens[b]
        }));
        let shape = AttnShape {
            batch,
            q_len: width,
            k_len: width,
            heads: self.model.cfg.n_heads,
        };
        let mut x = self.embed("src_embed", src, width)?;
        for l in 0..self.model.cfg.n_layers {
            let p = format!("encoder.layer{l}");
            let a = self.mha(x, x, shape, mask.clone(), &format!("{p}.mha"))?;
            x = self.residual(x, a, &format!("{p}.ln1"))?;
            let f = self.ffn(x, &format!("{p}.ffn"))?;
            x = self.residual(x, f, &format!("{p}.ln2"))?;
        }
        Ok(Encoded {
            h: x,
            lens: lens.to_vec(),
            width,
        })
    }

    pub fn encode_batch(&mut self, batch: &Batch) -> Result<Encoded> {
        self.encode(&batch.src, &batch.src_lens, batch.src_width)
    }

    /// Conventional decoder states `S_t`, `[batch·width × d]`. Row `t` of a
    /// sentence predicts target token `t + 1` (`EOS` after the last).
    pub fn decode_conventional(&mut self, input: &DecoderInput, enc: &Encoded) -> Result<Var> {
        let (batch, w) = (input.lens.len(), input.width);
        let lens = &input.lens;
        let self_mask = Arc::new(AttnMask::batched_from_fn(batch, w, w, |b, q, k| {
            k > q || k >= lens[b]
        }));
        let cross_mask = enc.cross_mask(w);
        let mut x = self.embed("tgt_embed", &input.ids, w)?;
        for l in 0..self.model.cfg.n_layers {
            x = self.decoder_layer(
                x,
                batch,
                w,
                self_mask.clone(),
                enc,
                cross_mask.clone(),
                &format!("decoder.layer{l}"),
            )?;
        }
        Ok(x)
    }
}
