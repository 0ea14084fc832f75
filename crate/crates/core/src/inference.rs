//! Decoding with the conventional decoder, and teacher-forced scoring of
//! either decoder.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{Batch, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::kernels::log_softmax_row;
use crate::model::transformer::DecoderInput;
use crate::model::{Encoded, Fwd, Model};
use crate::objectives::Targets;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Greedy,
    Beam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    pub beam_size: usize,
    pub max_len_factor: f64,
    pub max_len_margin: usize,
    pub length_penalty: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            mode: DecodeMode::Beam,
            beam_size: 4,
            max_len_factor: 1.5,
            max_len_margin: 5,
            length_penalty: 0.6,
        }
    }
}

impl DecodeConfig {
    pub fn greedy() -> Self {
        DecodeConfig {
            mode: DecodeMode::Greedy,
            beam_size: 1,
            ..Default::default()
        }
    }

    /// Output-length cap (tokens before `EOS`) for a source of `src_len`.
    pub fn max_output_len(&self, src_len: usize) -> usize {
        (self.max_len_factor * src_len as f64).floor() as usize + self.max_len_margin
    }
}

/// Next-token log-probabilities for a set of equal-length prefixes, each
/// starting with `BOS`.
pub trait StepScorer {
    fn log_probs(&mut self, prefixes: &[&[usize]]) -> Result<Vec<Vec<f64>>>;
}

/// The conventional decoder over one encoded source sentence.
pub struct ConvScorer<'m> {
    model: &'m Model,
    h: Tensor,
    src_len: usize,
}

impl<'m> ConvScorer<'m> {
    pub fn new(model: &'m Model, src: &[usize]) -> Result<Self> {
        let mut f = Fwd::inference(model);
        let enc = f.encode(src, &[src.len()], src.len())?;
        Ok(ConvScorer {
            model,
            h: f.tape.value(enc.h).clone(),
            src_len: src.len(),
        })
    }
}

/// Log-softmax of the last-row logits of each prefix.
fn last_row_log_probs(f: &mut Fwd<'_>, states: crate::autograd::Var, n: usize, w: usize) -> Result<Vec<Vec<f64>>> {
    let idx: Vec<usize> = (0..n).map(|b| b * w + w - 1).collect();
    let last = f.tape.gather_rows(states, &idx)?;
    let logits = f.project(last)?;
    let lv = f.tape.value(logits);
    Ok((0..n)
        .map(|r| {
            let row: Vec<f64> = lv.row(r).iter().map(|&x| x as f64).collect();
            let mut out = vec![0.0; row.len()];
            log_softmax_row(&row, &mut out);
            out
        })
        .collect())
}

impl StepScorer for ConvScorer<'_> {
    fn log_probs(&mut self, prefixes: &[&[usize]]) -> Result<Vec<Vec<f64>>> {
        let n = prefixes.len();
        let mut f = Fwd::inference(self.model);
        let d = self.h.cols();
        let mut data = Vec::with_capacity(n * self.h.len());
        for _ in 0..n {
            data.extend_from_slice(self.h.data());
        }
        let h = f.tape.constant(Tensor::new(vec![n * self.src_len, d], data)?);
        let enc = Encoded {
            h,
            lens: vec![self.src_len; n],
            width: self.src_len,
        };
        let input = DecoderInput::from_prefixes(prefixes);
        let states = f.decode_conventional(&input, &enc)?;
        last_row_log_probs(&mut f, states, n, input.width)
    }
}

/// Highest-scoring emittable token; ties go to the lowest id.
fn argmax_token(lp: &[f64]) -> usize {
    let mut best = EOS;
    for (t, &v) in lp.iter().enumerate() {
        if t == PAD || t == BOS {
            continue;
        }
        if v > lp[best] {
            best = t;
        }
    }
    best
}

/// GNMT length penalty `((5 + n) / 6)^α`.
pub fn length_penalty(len: usize, alpha: f64) -> f64 {
    ((5.0 + len as f64) / 6.0).powf(alpha)
}

/// Length-normalized score of a hypothesis; `len` counts `EOS` when the
/// hypothesis finished.
pub fn normalized_score(log_prob: f64, len: usize, alpha: f64) -> f64 {
    log_prob / length_penalty(len, alpha)
}

/// A decoded hypothesis: tokens without `BOS`/`EOS`.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    pub fn scored_len(&self) -> usize {
        self.tokens.len() + usize::from(self.finished)
    }

    pub fn score(&self, alpha: f64) -> f64 {
        normalized_score(self.log_prob, self.scored_len(), alpha)
    }
}

pub fn greedy<S: StepScorer>(scorer: &mut S, max_len: usize) -> Result<Hypothesis> {
    let mut prefix = vec![BOS];
    let mut log_prob = 0.0;
    while prefix.len() <= max_len {
        let lp = scorer.log_probs(&[&prefix])?.remove(0);
        let t = argmax_token(&lp);
        log_prob += lp[t];
        if t == EOS {
            return Ok(Hypothesis {
                tokens: prefix[1..].to_vec(),
                log_prob,
                finished: true,
            });
        }
        prefix.push(t);
    }
    Ok(Hypothesis {
        tokens: prefix[1..].to_vec(),
        log_prob,
        finished: false,
    })
}

/// Beam search over length-normalized scores. Each step keeps the best
/// `beam` expansions; those ending in `EOS` retire. The greedy hypothesis
/// joins the final pool, so the result never scores below it.
pub fn beam<S: StepScorer>(
    scorer: &mut S,
    beam: usize,
    alpha: f64,
    max_len: usize,
) -> Result<Hypothesis> {
    let beam = beam.max(1);
    let mut alive: Vec<(Vec<usize>, f64)> = vec![(vec![BOS], 0.0)];
    let mut pool: Vec<Hypothesis> = Vec::new();
    while !alive.is_empty() && alive[0].0.len() <= max_len {
        let prefixes: Vec<&[usize]> = alive.iter().map(|(p, _)| p.as_slice()).collect();
        let lps = scorer.log_probs(&prefixes)?;
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (bi, lp) in lps.iter().enumerate() {
            for (t, &v) in lp.iter().enumerate() {
                if t != PAD && t != BOS && v.is_finite() {
                    cands.push((alive[bi].1 + v, bi, t));
                }
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next = Vec::new();
        for &(lp, bi, t) in cands.iter().take(beam) {
            let mut p = alive[bi].0.clone();
            if t == EOS {
                pool.push(Hypothesis {
                    tokens: p[1..].to_vec(),
                    log_prob: lp,
                    finished: true,
                });
            } else {
                p.push(t);
                next.push((p, lp));
            }
        }
        alive = next;
    }
    for (p, lp) in alive {
        pool.push(Hypothesis {
            tokens: p[1..].to_vec(),
            log_prob: lp,
            finished: false,
        });
    }
    pool.push(greedy(scorer, max_len)?);
    let mut best = 0;
    for (i, h) in pool.iter().enumerate() {
        if h.score(alpha) > pool[best].score(alpha) {
            best = i;
        }
    }
    Ok(pool.swap_remove(best))
}

pub fn greedy_decode(model: &Model, src: &[usize], cfg: &DecodeConfig) -> Result<Vec<usize>> {
    let mut s = ConvScorer::new(model, src)?;
    Ok(greedy(&mut s, cfg.max_output_len(src.len()))?.tokens)
}

pub fn beam_search(model: &Model, src: &[usize], cfg: &DecodeConfig) -> Result<Vec<usize>> {
    let mut s = ConvScorer::new(model, src)?;
    let max = cfg.max_output_len(src.len());
    Ok(beam(&mut s, cfg.beam_size, cfg.length_penalty, max)?.tokens)
}

pub fn decode(model: &Model, src: &[usize], cfg: &DecodeConfig) -> Result<Vec<usize>> {
    if src.is_empty() {
        return Ok(Vec::new());
    }
    match cfg.mode {
        DecodeMode::Greedy => greedy_decode(model, src, cfg),
        DecodeMode::Beam => beam_search(model, src, cfg),
    }
}

/// Greedy decoding of many sentences in lockstep; same output as
/// [`greedy_decode`] per sentence.
pub fn greedy_decode_many(
    model: &Model,
    srcs: &[Vec<usize>],
    cfg: &DecodeConfig,
    chunk: usize,
) -> Result<Vec<Vec<usize>>> {
    let mut out = vec![Vec::new(); srcs.len()];
    let order: Vec<usize> = (0..srcs.len()).filter(|&i| !srcs[i].is_empty()).collect();
    for group in order.chunks(chunk.max(1)) {
        let pairs: Vec<(&[usize], &[usize])> =
            group.iter().map(|&i| (srcs[i].as_slice(), &[][..])).collect();
        let batch = Batch::from_pairs(&pairs);
        let mut f = Fwd::inference(model);
        let enc = f.encode_batch(&batch)?;
        let h = f.tape.value(enc.h).clone();
        let d = h.cols();
        let sw = batch.src_width;
        let mut live: Vec<usize> = (0..group.len()).collect();
        let mut prefixes: Vec<Vec<usize>> = vec![vec![BOS]; group.len()];
        while !live.is_empty() {
            let mut f = Fwd::inference(model);
            let mut data = Vec::with_capacity(live.len() * sw * d);
            for &r in &live {
                data.extend_from_slice(&h.data()[r * sw * d..(r + 1) * sw * d]);
            }
            let hv = f.tape.constant(Tensor::new(vec![live.len() * sw, d], data)?);
            let enc = Encoded {
                h: hv,
                lens: live.iter().map(|&r| batch.src_lens[r]).collect(),
                width: sw,
            };
            let refs: Vec<&[usize]> = live.iter().map(|&r| prefixes[r].as_slice()).collect();
            let input = DecoderInput::from_prefixes(&refs);
            let states = f.decode_conventional(&input, &enc)?;
            let lps = last_row_log_probs(&mut f, states, live.len(), input.width)?;
            let mut still = Vec::new();
            for (k, &r) in live.iter().enumerate() {
                let t = argmax_token(&lps[k]);
                let cap = cfg.max_output_len(batch.src_lens[r]);
                if t != EOS {
                    prefixes[r].push(t);
                    if prefixes[r].len() <= cap {
                        still.push(r);
                    }
                }
            }
            live = still;
        }
        for (k, &i) in group.iter().enumerate() {
            out[i] = prefixes[k][1..].to_vec();
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderKind {
    Conventional,
    Seer,
}

impl FromStr for DecoderKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conventional" => Ok(DecoderKind::Conventional),
            "seer" => Ok(DecoderKind::Seer),
            _ => Err(Error::InvalidArgument(format!("unknown decoder {s:?}"))),
        }
    }
}

/// Per-position argmax with gold context: past gold for the conventional
/// decoder, past and future gold for the seer decoder. One prediction per
/// reference token.
pub fn teacher_forced_argmax(
    model: &Model,
    decoder: DecoderKind,
    cross_attention: bool,
    batch: &Batch,
) -> Result<Vec<Vec<usize>>> {
    if decoder == DecoderKind::Seer {
        model.require_full_seer()?;
    }
    let mut f = Fwd::inference(model);
    f.cross_attention = cross_attention;
    let enc = f.encode_batch(batch)?;
    let targets = Targets::new(batch);
    let (states, rows) = match decoder {
        DecoderKind::Conventional => {
            let s = f.decode_conventional(&DecoderInput::from_batch(batch), &enc)?;
            (s, targets.conv_word_rows.clone())
        }
        DecoderKind::Seer => (f.seer(batch, &enc)?.states, targets.seer_rows.clone()),
    };
    let sel = f.tape.gather_rows(states, &rows)?;
    let logits = f.project(sel)?;
    let lv = f.tape.value(logits);
    let mut out = Vec::with_capacity(batch.size());
    let mut r = 0;
    for b in 0..batch.size() {
        let mut pred = Vec::with_capacity(batch.tgt_lens[b]);
        for _ in 0..batch.tgt_lens[b] {
            let row: Vec<f64> = lv.row(r).iter().map(|&x| x as f64).collect();
            pred.push(argmax_token(&row));
            r += 1;
        }
        out.push(pred);
    }
    Ok(out)
}
