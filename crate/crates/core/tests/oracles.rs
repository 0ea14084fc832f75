//! Library results against independent reference implementations.

mod common;

use std::sync::Arc;

use rand::Rng as _;

use common::*;
use seer_core::analysis::bleu::MAX_N;
use seer_core::analysis::corpus_bleu;
use seer_core::autograd::AttnShape;
use seer_core::data::{Batch, EOS};
use seer_core::inference::{beam, greedy};
use seer_core::objectives::{loss_conventional, loss_kd, Targets};
use seer_core::{AttnMask, Tape, Tensor};

fn random_text(r: &mut rand_chacha::ChaCha8Rng, max_len: usize) -> String {
    let words = ["a", "b", "c", "d", "e", "f"];
    let n = r.random_range(0..=max_len);
    (0..n)
        .map(|_| words[r.random_range(0..words.len())])
        .collect::<Vec<_>>()
        .join(" ")
}

#[test]
fn bleu_agrees_with_second_implementation() {
    let mut r = rng(11);
    for case in 0..50 {
        let n = r.random_range(1..=6);
        let refs: Vec<String> = (0..n).map(|_| random_text(&mut r, 12)).collect();
        // half the cases start from the reference and mutate it, so higher
        // orders match too
        let hyps: Vec<String> = refs
            .iter()
            .map(|s| {
                if case % 2 == 0 {
                    random_text(&mut r, 12)
                } else {
                    let mut w: Vec<&str> = s.split(' ').filter(|x| !x.is_empty()).collect();
                    if !w.is_empty() && r.random_bool(0.5) {
                        let i = r.random_range(0..w.len());
                        w[i] = "z";
                    }
                    if r.random_bool(0.3) {
                        w.pop();
                    }
                    w.join(" ")
                }
            })
            .collect();
        let got = corpus_bleu(&hyps, &refs, MAX_N).unwrap().score;
        let want = bleu_oracle(&hyps, &refs);
        assert!((got - want).abs() < 1e-9, "case {case}: {got} vs {want}\n{hyps:?}\n{refs:?}");
    }
}

#[test]
fn identical_corpus_scores_100() {
    let refs = vec!["a b c d e".to_string(), "b c d e f".to_string()];
    assert!((corpus_bleu(&refs, &refs, MAX_N).unwrap().score - 100.0).abs() < 1e-12);
    assert!((bleu_oracle(&refs, &refs) - 100.0).abs() < 1e-12);
}

#[test]
fn attention_agrees_with_loops() {
    let mut r = rng(5);
    for trial in 0..10 {
        let (batch, ql, kl, heads, d) = (2, 4, 5, 2, 6);
        let mut m = |n: usize| -> Vec<Vec<f64>> {
            (0..n).map(|_| (0..d).map(|_| r.random_range(-1.5..1.5)).collect()).collect()
        };
        let (q, k, v) = (m(batch * ql), m(batch * kl), m(batch * kl));
        let forbidden = move |b: usize, i: usize, j: usize| (i + 2 * j + b + trial) % 3 == 0 && j != i;
        let mask = Arc::new(AttnMask::batched_from_fn(batch, ql, kl, forbidden));
        let flat = |x: &Vec<Vec<f64>>| Tensor::new(vec![x.len(), d], x.concat()).unwrap();
        let mut tape = Tape::<f64>::new();
        let (qv, kv, vv) = (
            tape.constant(flat(&q)),
            tape.constant(flat(&k)),
            tape.constant(flat(&v)),
        );
        let shape = AttnShape {
            batch,
            q_len: ql,
            k_len: kl,
            heads,
        };
        let out = tape.attention(qv, kv, vv, shape, mask).unwrap();
        let got = rows(tape.value(out));
        let want = attention_oracle(&q, &k, &v, batch, heads, forbidden);
        for (a, b) in got.iter().zip(&want) {
            assert!(max_abs_diff(a, b) < 1e-5, "trial {trial}");
        }
    }
}

#[test]
fn beam_matches_exhaustive_search_on_two_steps() {
    // vocabulary of three emittable tokens: EOS and two words
    for seed in 0..40 {
        for alpha in [0.0, 0.6, 1.0] {
            let mut s = TableScorer::new(EOS + 3, seed);
            let (toks, score) = exhaustive_best(&mut s, 2, alpha);
            let h = beam(&mut s, 16, alpha, 2).unwrap();
            assert_eq!(h.tokens, toks, "seed {seed} alpha {alpha}");
            assert_eq!(h.score(alpha), score, "seed {seed} alpha {alpha}");
        }
    }
}

#[test]
fn beam_four_never_scores_below_greedy() {
    for seed in 0..30 {
        let mut s = TableScorer::new(9, 100 + seed);
        let g = greedy(&mut s, 5).unwrap();
        let b = beam(&mut s, 4, 0.6, 5).unwrap();
        assert!(b.score(0.6) >= g.score(0.6), "seed {seed}");
    }
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|x| (x - m).exp()).sum::<f64>().ln() + m;
    row.iter().map(|x| x - z).collect()
}

#[test]
fn conventional_loss_is_a_plain_sum_of_negative_log_likelihoods() {
    let mut r = rng(2);
    let batch = Batch::from_pairs(&[(&[5, 6][..], &[7, 8, 9][..]), (&[6][..], &[10][..])]);
    let targets = Targets::new(&batch);
    // conventional layout: 2 sentences × (max I + 1 = 4) rows
    let logits: Vec<Vec<f64>> = (0..8).map(|_| (0..12).map(|_| r.random_range(-3.0..3.0)).collect()).collect();
    let mut tape = Tape::<f64>::new();
    let lv = tape.constant(Tensor::new(vec![8, 12], logits.concat()).unwrap());
    let l = loss_conventional(&mut tape, lv, &targets, 0.0).unwrap();
    let gold = [(0, 7), (1, 8), (2, 9), (3, EOS), (4, 10), (5, EOS)];
    let want: f64 = gold.iter().map(|&(row, y)| -log_softmax(&logits[row])[y]).sum();
    assert!((tape.value(l).item() - want).abs() < 1e-12);
}

#[test]
fn kd_loss_is_teacher_weighted_student_log_likelihood() {
    let mut r = rng(3);
    let batch = Batch::from_pairs(&[(&[5][..], &[7, 8][..])]);
    let targets = Targets::new(&batch);
    let student: Vec<Vec<f64>> = (0..3).map(|_| (0..6).map(|_| r.random_range(-2.0..2.0)).collect()).collect();
    let teacher: Vec<Vec<f64>> = (0..2).map(|_| (0..6).map(|_| r.random_range(-2.0..2.0)).collect()).collect();
    let mut tape = Tape::<f64>::new();
    let s = tape.constant(Tensor::new(vec![3, 6], student.concat()).unwrap());
    let t = tape.constant(Tensor::new(vec![2, 6], teacher.concat()).unwrap());
    let l = loss_kd(&mut tape, s, t, &targets).unwrap();
    let mut want = 0.0;
    for i in 0..2 {
        let ps: Vec<f64> = log_softmax(&teacher[i]).iter().map(|x| x.exp()).collect();
        let lc = log_softmax(&student[i]);
        want -= ps.iter().zip(&lc).map(|(p, q)| p * q).sum::<f64>();
    }
    assert!((tape.value(l).item() - want).abs() < 1e-12);
}
