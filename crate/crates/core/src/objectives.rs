//! Cross-entropy losses for both decoders and the combined objective.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::data::{Batch, EOS};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// How the seer decoder's knowledge reaches the conventional decoder.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mechanism {
    #[default]
    Kd,
    L2,
    Al,
    None,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    NoFuture,
    NoPast,
    NoKd,
}

impl FromStr for Mechanism {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.into()))
            .map_err(|_| Error::Config(format!("unknown mechanism {s:?}")))
    }
}

impl FromStr for Ablation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.into()))
            .map_err(|_| Error::Config(format!("unknown ablation {s:?}")))
    }
}

/// Losses of one step. Per-token values divide the summed losses by the
/// batch's target token count; the adversarial loss is per sequence.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossReport {
    pub step: u64,
    pub l_c: f64,
    pub l_s: f64,
    pub l_transfer: f64,
    pub l_total: f64,
    pub l_c_sum: f64,
    pub l_s_sum: f64,
    pub l_transfer_sum: f64,
    pub tokens: usize,
    pub sentences: usize,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.l_c, self.l_s, self.l_transfer, self.l_total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// `L_s + λ·L_c + (1 − λ)·L_transfer`.
pub fn total_loss(l_s: f64, l_c: f64, l_transfer: f64, lambda: f64) -> f64 {
    l_s + lambda * l_c + (1.0 - lambda) * l_transfer
}

/// Row selections pairing decoder outputs with gold tokens.
///
/// Conventional rows live in a `batch × (max I + 1)` layout, seer rows in
/// `batch × max I`.
#[derive(Clone, Debug)]
pub struct Targets {
    /// Every conventional row that predicts a token, `EOS` included.
    pub conv_rows: Vec<usize>,
    pub conv_gold: Vec<usize>,
    /// Conventional rows that predict `y1..yI` (no `EOS`), aligned with
    /// `seer_rows`.
    pub conv_word_rows: Vec<usize>,
    pub seer_rows: Vec<usize>,
    pub word_gold: Vec<usize>,
}

impl Targets {
    pub fn new(batch: &Batch) -> Self {
        let (cw, sw) = (batch.tgt_width + 1, batch.tgt_width);
        let mut t = Targets {
            conv_rows: Vec::new(),
            conv_gold: Vec::new(),
            conv_word_rows: Vec::new(),
            seer_rows: Vec::new(),
            word_gold: Vec::new(),
        };
        for b in 0..batch.size() {
            let row = batch.tgt_row(b);
            for (i, &y) in row.iter().enumerate() {
                t.conv_rows.push(b * cw + i);
                t.conv_gold.push(y);
                t.conv_word_rows.push(b * cw + i);
                t.seer_rows.push(b * sw + i);
                t.word_gold.push(y);
            }
            t.conv_rows.push(b * cw + row.len());
            t.conv_gold.push(EOS);
        }
        t
    }
}

/// One-hot rows, optionally smoothed toward the uniform distribution.
pub fn one_hot<T: Scalar>(gold: &[usize], vocab: usize, smoothing: f64) -> Tensor<T> {
    let off = smoothing / vocab as f64;
    let on = 1.0 - smoothing + off;
    let mut data = vec![T::lit(off); gold.len() * vocab];
    for (r, &g) in gold.iter().enumerate() {
        data[r * vocab + g] = T::lit(on);
    }
    Tensor::new(vec![gold.len(), vocab], data).expect("consistent one-hot shape")
}

/// Summed cross-entropy of the selected logit rows against gold ids.
pub fn cross_entropy<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    rows: &[usize],
    gold: &[usize],
    smoothing: f64,
) -> Result<Var> {
    let v = tape.value(logits).cols();
    let sel = tape.gather_rows(logits, rows)?;
    let target = tape.constant(one_hot(gold, v, smoothing));
    tape.soft_cross_entropy(sel, target)
}

/// `L_c`, summed over every non-pad position including the `EOS` step.
pub fn loss_conventional<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    targets: &Targets,
    smoothing: f64,
) -> Result<Var> {
    cross_entropy(tape, logits, &targets.conv_rows, &targets.conv_gold, smoothing)
}

/// `L_s`, summed over the `I` predictions of every sentence.
pub fn loss_seer<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    targets: &Targets,
    smoothing: f64,
) -> Result<Var> {
    cross_entropy(tape, logits, &targets.seer_rows, &targets.word_gold, smoothing)
}

/// `L_kd = −Σ_i Σ_l p_s(l)·log p_c(l)` with the teacher behind a
/// stop-gradient.
pub fn loss_kd<T: Scalar>(
    tape: &mut Tape<T>,
    student_logits: Var,
    teacher_logits: Var,
    targets: &Targets,
) -> Result<Var> {
    let s = tape.gather_rows(student_logits, &targets.conv_word_rows)?;
    let t = tape.gather_rows(teacher_logits, &targets.seer_rows)?;
    let t = tape.stop_grad(t);
    let p = tape.softmax(t);
    tape.soft_cross_entropy(s, p)
}
