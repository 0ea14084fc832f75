#![allow(dead_code)]

//! Small models, random sentences and independent reference
//! implementations shared by the integration tests.

use std::collections::{BTreeMap, HashMap};

use rand::Rng as _;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use seer_core::data::{Batch, BOS, EOS, NUM_RESERVED, PAD};
use seer_core::inference::StepScorer;
use seer_core::model::transformer::DecoderInput;
use seer_core::model::{Fwd, Model, ModelConfig, SeerParts};
use seer_core::{Result, Tensor};

pub const VOCAB: usize = 14;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A two-layer `f64` model with every seer part and no dropout.
pub fn tiny_model(seed: u64) -> Model<f64> {
    tiny_model_with(Some(SeerParts::FULL), seed)
}

pub fn tiny_model_with(seer: Option<SeerParts>, seed: u64) -> Model<f64> {
    let cfg = ModelConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        d_ffn: 24,
        dropout: 0.0,
        max_len: 32,
        src_vocab: VOCAB,
        tgt_vocab: VOCAB,
        seer,
    };
    Model::new(cfg, seed).unwrap().cast()
}

pub fn sentence(rng: &mut ChaCha8Rng, min: usize, max: usize) -> Vec<usize> {
    let n = rng.random_range(min..=max);
    (0..n).map(|_| rng.random_range(NUM_RESERVED..VOCAB)).collect()
}

/// A content token different from `t`.
pub fn other_token(rng: &mut ChaCha8Rng, t: usize) -> usize {
    loop {
        let u = rng.random_range(NUM_RESERVED..VOCAB);
        if u != t {
            return u;
        }
    }
}

pub fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Conventional-decoder logits; row `t` predicts target token `t + 1`.
pub fn conv_logits(m: &Model<f64>, src: &[usize], tgt: &[usize]) -> Vec<Vec<f64>> {
    let batch = Batch::from_pairs(&[(src, tgt)]);
    let mut f = Fwd::new(m);
    let enc = f.encode_batch(&batch).unwrap();
    let s = f.decode_conventional(&DecoderInput::from_batch(&batch), &enc).unwrap();
    let l = f.project(s).unwrap();
    rows(f.tape.value(l))
}

/// Seer logits, subdecoder outputs `H'p` and `H''f` over the decorated
/// sequence.
pub struct SeerView {
    pub logits: Vec<Vec<f64>>,
    pub hp: Vec<Vec<f64>>,
    pub hf: Vec<Vec<f64>>,
}

pub fn seer_view(m: &Model<f64>, src: &[usize], tgt: &[usize]) -> SeerView {
    let batch = Batch::from_pairs(&[(src, tgt)]);
    let mut f = Fwd::new(m);
    let enc = f.encode_batch(&batch).unwrap();
    let out = f.seer(&batch, &enc).unwrap();
    let l = f.project(out.states).unwrap();
    SeerView {
        logits: rows(f.tape.value(l)),
        hp: rows(f.tape.value(out.hp.unwrap())),
        hf: rows(f.tape.value(out.hf.unwrap())),
    }
}

// ---------------------------------------------------------------------------
// BLEU, written from the textbook definition with owned n-gram keys

pub fn bleu_oracle(hyps: &[String], refs: &[String]) -> f64 {
    let mut hit = [0usize; 4];
    let mut total = [0usize; 4];
    let mut c = 0usize;
    let mut r = 0usize;
    for (h, rf) in hyps.iter().zip(refs) {
        let h: Vec<String> = h.split_whitespace().map(String::from).collect();
        let rf: Vec<String> = rf.split_whitespace().map(String::from).collect();
        c += h.len();
        r += rf.len();
        for n in 1..=4 {
            let mut ref_counts: BTreeMap<Vec<String>, usize> = BTreeMap::new();
            let mut i = 0;
            while i + n <= rf.len() {
                *ref_counts.entry(rf[i..i + n].to_vec()).or_default() += 1;
                i += 1;
            }
            let mut hyp_counts: BTreeMap<Vec<String>, usize> = BTreeMap::new();
            let mut i = 0;
            while i + n <= h.len() {
                *hyp_counts.entry(h[i..i + n].to_vec()).or_default() += 1;
                total[n - 1] += 1;
                i += 1;
            }
            for (g, k) in hyp_counts {
                hit[n - 1] += k.min(*ref_counts.get(&g).unwrap_or(&0));
            }
        }
    }
    if hit[0] == 0 {
        return 0.0;
    }
    let mut logs = Vec::new();
    let mut k = 0;
    for n in 0..4 {
        if total[n] == 0 {
            continue;
        }
        let p = if hit[n] > 0 {
            hit[n] as f64 / total[n] as f64
        } else {
            k += 1;
            1.0 / (2f64.powi(k) * total[n] as f64)
        };
        logs.push(p.ln());
    }
    let bp = if c >= r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    100.0 * bp * (logs.iter().sum::<f64>() / logs.len() as f64).exp()
}

// ---------------------------------------------------------------------------
// Attention by explicit loops

/// `softmax(q_h k_hᵀ / √d_h)·v_h` per head and batch block, concatenated
/// over heads. `forbidden(b, i, j)` hides key `j` from query `i`.
pub fn attention_oracle(
    q: &[Vec<f64>],
    k: &[Vec<f64>],
    v: &[Vec<f64>],
    batch: usize,
    heads: usize,
    forbidden: impl Fn(usize, usize, usize) -> bool,
) -> Vec<Vec<f64>> {
    let d = q[0].len();
    let dh = d / heads;
    let (ql, kl) = (q.len() / batch, k.len() / batch);
    let mut out = vec![vec![0.0; d]; q.len()];
    for b in 0..batch {
        for h in 0..heads {
            for i in 0..ql {
                let qi = &q[b * ql + i][h * dh..(h + 1) * dh];
                let mut scores = Vec::new();
                for j in 0..kl {
                    if forbidden(b, i, j) {
                        continue;
                    }
                    let kj = &k[b * kl + j][h * dh..(h + 1) * dh];
                    let s: f64 = qi.iter().zip(kj).map(|(a, c)| a * c).sum();
                    scores.push((j, s / (dh as f64).sqrt()));
                }
                let top = scores.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s.1 - top).exp()).sum();
                for &(j, s) in &scores {
                    let w = (s - top).exp() / z;
                    for c in 0..dh {
                        out[b * ql + i][h * dh + c] += w * v[b * kl + j][h * dh + c];
                    }
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// A table-driven next-token model and the exhaustive search over it

/// Next-token log-probabilities that depend on the whole prefix, drawn once
/// per prefix from a seeded generator. `PAD` and `BOS` get `-inf`.
pub struct TableScorer {
    pub vocab: usize,
    seed: u64,
    cache: HashMap<Vec<usize>, Vec<f64>>,
}

impl TableScorer {
    pub fn new(vocab: usize, seed: u64) -> Self {
        TableScorer {
            vocab,
            seed,
            cache: HashMap::new(),
        }
    }

    pub fn dist(&mut self, prefix: &[usize]) -> Vec<f64> {
        let (vocab, seed) = (self.vocab, self.seed);
        self.cache
            .entry(prefix.to_vec())
            .or_insert_with(|| {
                let key = prefix.iter().fold(seed, |h, &t| h.wrapping_mul(1_000_003).wrapping_add(t as u64 + 1));
                let mut r = rng(key);
                let logits: Vec<f64> = (0..vocab).map(|_| r.random_range(-2.0..2.0)).collect();
                let z: f64 = (EOS..vocab).map(|t| logits[t].exp()).sum();
                (0..vocab)
                    .map(|t| if t == PAD || t == BOS { f64::NEG_INFINITY } else { logits[t] - z.ln() })
                    .collect()
            })
            .clone()
    }
}

impl StepScorer for TableScorer {
    fn log_probs(&mut self, prefixes: &[&[usize]]) -> Result<Vec<Vec<f64>>> {
        Ok(prefixes.iter().map(|p| self.dist(p)).collect())
    }
}

/// Every output of at most `max_len` tokens: sequences that end in `EOS`
/// count `EOS` in their length; sequences that reach the cap without it
/// are scored as they stand. Returns `(tokens, normalized score)` of the
/// best one.
pub fn exhaustive_best(s: &mut TableScorer, max_len: usize, alpha: f64) -> (Vec<usize>, f64) {
    let lp = |len: usize| ((5.0 + len as f64) / 6.0).powf(alpha);
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut consider = |toks: Vec<usize>, logp: f64, len: usize| {
        let score = logp / lp(len);
        if best.as_ref().is_none_or(|b| score > b.1) {
            best = Some((toks, score));
        }
    };
    let mut frontier: Vec<(Vec<usize>, f64)> = vec![(vec![BOS], 0.0)];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for (p, logp) in frontier {
            let d = s.dist(&p);
            consider(p[1..].to_vec(), logp + d[EOS], p.len());
            for t in EOS + 1..s.vocab {
                let mut q = p.clone();
                q.push(t);
                next.push((q, logp + d[t]));
            }
        }
        frontier = next;
    }
    for (p, logp) in frontier {
        consider(p[1..].to_vec(), logp, p.len() - 1);
    }
    best.unwrap()
}
