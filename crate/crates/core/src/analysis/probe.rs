//! Bag-of-future-words probe: a linear readout `softmax(Ww · s_t)` trained
//! on frozen conventional-decoder states to predict the set of target words
//! still to come.

use std::collections::BTreeSet;

use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::autograd::Tape;
use crate::data::{Batch, EncodedCorpus};
use crate::error::{Error, Result};
use crate::model::transformer::DecoderInput;
use crate::model::{Fwd, Model};
use crate::objectives::Targets;
use crate::optim::Adam;
use crate::params::ParamStore;
use crate::rng::Streams;
use crate::tensor::Tensor;

/// `max(2, (J − i)·2)`, capped at the vocabulary size.
pub fn bag_size(src_len: usize, i: usize, vocab: usize) -> usize {
    (src_len.saturating_sub(i) * 2).max(2).min(vocab)
}

/// Frozen states with their gold bags, one row per target position.
#[derive(Clone, Debug)]
pub struct ProbeData {
    /// `[positions × d]`; row for position `i` is the state that predicts
    /// `y_i`.
    pub states: Tensor,
    /// `{y_(i+1) .. y_I}` as a sorted set.
    pub bags: Vec<Vec<usize>>,
    pub src_lens: Vec<usize>,
    /// 1-based target position of each row.
    pub positions: Vec<usize>,
}

pub fn collect_probe_data(model: &Model, corpus: &EncodedCorpus, chunk: usize) -> Result<ProbeData> {
    let d = model.cfg.d_model;
    let mut states = Vec::new();
    let mut bags = Vec::new();
    let mut src_lens = Vec::new();
    let mut positions = Vec::new();
    for group in corpus.pairs.chunks(chunk.max(1)) {
        let pairs: Vec<(&[usize], &[usize])> =
            group.iter().map(|(s, t)| (s.as_slice(), t.as_slice())).collect();
        let batch = Batch::from_pairs(&pairs);
        let mut f = Fwd::inference(model);
        let enc = f.encode_batch(&batch)?;
        let s = f.decode_conventional(&DecoderInput::from_batch(&batch), &enc)?;
        let rows = Targets::new(&batch).conv_word_rows;
        let sel = f.tape.gather_rows(s, &rows)?;
        states.extend_from_slice(f.tape.value(sel).data());
        for (src, tgt) in group {
            for i in 1..=tgt.len() {
                let bag: BTreeSet<usize> = tgt[i..].iter().copied().collect();
                bags.push(bag.into_iter().collect());
                src_lens.push(src.len());
                positions.push(i);
            }
        }
    }
    if positions.is_empty() {
        return Err(Error::EmptyCorpus("no target positions for the probe".into()));
    }
    Ok(ProbeData {
        states: Tensor::new(vec![positions.len(), d], states)?,
        bags,
        src_lens,
        positions,
    })
}

#[derive(Clone, Debug)]
pub struct BowProbe {
    /// `[|V| × d]`.
    pub ww: Tensor,
}

#[derive(Clone, Debug)]
pub struct ProbeTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub rows_per_step: usize,
    pub seed: u64,
}

impl Default for ProbeTrainConfig {
    fn default() -> Self {
        ProbeTrainConfig {
            epochs: 20,
            lr: 1e-2,
            rows_per_step: 256,
            seed: 1,
        }
    }
}

/// `−Σ_rows Σ_{w ∈ bag} log softmax(Ww·s)_w` for the given rows.
pub fn bow_loss(ww: &Tensor<f64>, states: &Tensor<f64>, bags: &[Vec<usize>]) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let w = tape.constant(ww.clone());
    let s = tape.constant(states.clone());
    let l = probe_loss(&mut tape, w, s, bags)?;
    Ok(tape.value(l).item())
}

fn probe_loss<T: crate::tensor::Scalar>(
    tape: &mut Tape<T>,
    ww: crate::autograd::Var,
    states: crate::autograd::Var,
    bags: &[Vec<usize>],
) -> Result<crate::autograd::Var> {
    let v = tape.value(ww).rows();
    let mut target = vec![T::zero(); bags.len() * v];
    for (r, bag) in bags.iter().enumerate() {
        for &w in bag {
            target[r * v + w] = T::one();
        }
    }
    let logits = tape.matmul_nt(states, ww)?;
    let target = tape.constant(Tensor::new(vec![bags.len(), v], target)?);
    tape.soft_cross_entropy(logits, target)
}

/// Trains `Ww` from zero by Adam on cached states; the model is only read.
pub fn train_bow_probe(data: &ProbeData, vocab: usize, cfg: &ProbeTrainConfig) -> Result<BowProbe> {
    let d = data.states.cols();
    let mut store = ParamStore::new();
    let id = store.insert("probe.ww", Tensor::zeros(&[vocab, d]))?;
    let mut adam = Adam::new(&store);
    let n = data.positions.len();
    let mut order: Vec<usize> = (0..n).collect();
    let streams = Streams::new(cfg.seed);
    for epoch in 0..cfg.epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut streams.indexed("probe", epoch as u64));
        for chunk in order.chunks(cfg.rows_per_step.max(1)) {
            let rows: Vec<f32> = chunk
                .iter()
                .flat_map(|&r| data.states.row(r).iter().copied())
                .collect();
            let bags: Vec<Vec<usize>> = chunk.iter().map(|&r| data.bags[r].clone()).collect();
            let mut tape = Tape::<f32>::new();
            let w = tape.param(&store, id);
            let s = tape.constant(Tensor::new(vec![chunk.len(), d], rows)?);
            let l = probe_loss(&mut tape, w, s, &bags)?;
            let l = tape.scale(l, 1.0 / chunk.len() as f32);
            let grads = tape.backward(l)?.params(&tape, &store);
            adam.step(&mut store, &grads, cfg.lr);
        }
    }
    Ok(BowProbe {
        ww: store.get(id).clone(),
    })
}

/// A `Ww` drawn at random and never trained; the probe's floor.
pub fn random_probe(vocab: usize, d: usize, seed: u64) -> BowProbe {
    let normal = Normal::new(0.0, (d as f64).powf(-0.5)).expect("positive std");
    let mut rng = Streams::new(seed).stream("probe/random");
    BowProbe {
        ww: Tensor::from_fn(&[vocab, d], |_| normal.sample(&mut rng) as f32),
    }
}

/// Micro-averaged over positions whose gold bag is non-empty.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeScores {
    pub accuracy: f64,
    pub recall: f64,
    pub f1: f64,
    pub positions: usize,
    pub averaging: &'static str,
}

/// Set overlap counts of one predicted bag against its gold bag.
pub fn overlap(pred: &[usize], gold: &[usize]) -> usize {
    pred.iter().filter(|w| gold.contains(w)).count()
}

pub fn harmonic_mean(a: f64, b: f64) -> f64 {
    if a + b == 0.0 {
        0.0
    } else {
        2.0 * a * b / (a + b)
    }
}

pub fn eval_bow_probe(probe: &BowProbe, data: &ProbeData) -> Result<ProbeScores> {
    let v = probe.ww.rows();
    let logits = data.states.matmul(&probe.ww.transpose())?;
    let (mut hit, mut picked, mut gold_total, mut positions) = (0usize, 0usize, 0usize, 0usize);
    for r in 0..data.positions.len() {
        let gold = &data.bags[r];
        if gold.is_empty() {
            continue;
        }
        let k = bag_size(data.src_lens[r], data.positions[r], v);
        let row = logits.row(r);
        let mut ids: Vec<usize> = (0..v).collect();
        ids.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        ids.truncate(k);
        hit += overlap(&ids, gold);
        picked += k;
        gold_total += gold.len();
        positions += 1;
    }
    if positions == 0 {
        return Err(Error::EmptyCorpus("no position has a non-empty future bag".into()));
    }
    let accuracy = hit as f64 / picked as f64;
    let recall = hit as f64 / gold_total as f64;
    Ok(ProbeScores {
        accuracy,
        recall,
        f1: harmonic_mean(accuracy, recall),
        positions,
        averaging: "micro",
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bag_size_examples() {
        assert_eq!(bag_size(10, 3, 1000), 14);
        assert_eq!(bag_size(10, 10, 1000), 2);
        assert_eq!(bag_size(10, 12, 1000), 2);
        assert_eq!(bag_size(10, 0, 6), 6);
    }

    #[test]
    fn set_arithmetic() {
        let (a, g) = ([4, 5], [4, 6]);
        let hit = overlap(&a, &g) as f64;
        let (acc, rec) = (hit / 2.0, hit / 2.0);
        assert_eq!((acc, rec, harmonic_mean(acc, rec)), (0.5, 0.5, 0.5));
    }

    #[test]
    fn uniform_probe_costs_ln_v() {
        let ww = Tensor::<f64>::zeros(&[4, 3]);
        let s = Tensor::<f64>::from_fn(&[1, 3], |i| i as f64);
        assert!((bow_loss(&ww, &s, &[vec![2]]).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert_eq!(bow_loss(&ww, &s, &[vec![]]).unwrap(), 0.0);
    }
}
