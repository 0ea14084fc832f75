use std::collections::HashMap;

use serde::Serialize;

use crate::error::{Error, Result};

pub const MAX_N: usize = 4;

/// Corpus BLEU with its ingredients. Precisions are fractions; `score` is
/// on the 0..100 scale.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BleuResult {
    pub score: f64,
    pub precisions: Vec<f64>,
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
    pub matches: Vec<usize>,
    pub totals: Vec<usize>,
}

fn ngrams<'a>(toks: &'a [&'a str], n: usize) -> HashMap<&'a [&'a str], usize> {
    let mut m = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

fn stats(hyp: &str, reference: &str, max_n: usize, matches: &mut [usize], totals: &mut [usize]) -> (usize, usize) {
    let h: Vec<&str> = hyp.split_whitespace().collect();
    let r: Vec<&str> = reference.split_whitespace().collect();
    for n in 1..=max_n {
        let hc = ngrams(&h, n);
        let rc = ngrams(&r, n);
        for (g, &c) in &hc {
            matches[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
        }
        totals[n - 1] += h.len().saturating_sub(n - 1);
    }
    (h.len(), r.len())
}

/// Corpus-level BLEU over whitespace tokens, compared verbatim.
///
/// Zero-match orders are smoothed exponentially: the k-th such order gets
/// precision `1 / (2^k · total)`. Orders with no hypothesis n-grams at all
/// are left out of the geometric mean. A corpus without a single matching
/// unigram scores 0.
pub fn corpus_bleu<S: AsRef<str>>(hyps: &[S], refs: &[S], max_n: usize) -> Result<BleuResult> {
    if hyps.len() != refs.len() {
        return Err(Error::InvalidArgument(format!(
            "{} hypotheses but {} references",
            hyps.len(),
            refs.len()
        )));
    }
    let mut matches = vec![0; max_n];
    let mut totals = vec![0; max_n];
    let (mut hl, mut rl) = (0, 0);
    for (h, r) in hyps.iter().zip(refs) {
        let (a, b) = stats(h.as_ref(), r.as_ref(), max_n, &mut matches, &mut totals);
        hl += a;
        rl += b;
    }
    let mut precisions = vec![0.0; max_n];
    let mut smooth = 1.0;
    let mut log_sum = 0.0;
    let mut used = 0;
    for n in 0..max_n {
        if totals[n] == 0 {
            continue;
        }
        precisions[n] = if matches[n] == 0 {
            smooth *= 2.0;
            1.0 / (smooth * totals[n] as f64)
        } else {
            matches[n] as f64 / totals[n] as f64
        };
        log_sum += precisions[n].ln();
        used += 1;
    }
    let bp = if hl == 0 {
        0.0
    } else if hl >= rl {
        1.0
    } else {
        (1.0 - rl as f64 / hl as f64).exp()
    };
    let score = if matches[0] == 0 || used == 0 {
        0.0
    } else {
        100.0 * bp * (log_sum / used as f64).exp()
    };
    Ok(BleuResult {
        score,
        precisions,
        brevity_penalty: bp,
        hyp_len: hl,
        ref_len: rl,
        matches,
        totals,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct BinResult {
    pub bin: usize,
    pub min_src_len: usize,
    pub max_src_len: usize,
    pub n: usize,
    pub bleu: BleuResult,
}

/// Splits sentences into `n_bins` equal-population bins by source length
/// (stable order among equal lengths) and scores each bin.
pub fn length_binned_bleu<S: AsRef<str>>(
    hyps: &[S],
    refs: &[S],
    srcs: &[S],
    n_bins: usize,
) -> Result<Vec<BinResult>> {
    if n_bins == 0 || srcs.len() < n_bins {
        return Err(Error::InvalidArgument(format!(
            "{} sentences cannot fill {n_bins} bins",
            srcs.len()
        )));
    }
    if hyps.len() != srcs.len() || refs.len() != srcs.len() {
        return Err(Error::InvalidArgument("hyps, refs and srcs differ in length".into()));
    }
    let len = |i: usize| srcs[i].as_ref().split_whitespace().count();
    let mut order: Vec<usize> = (0..srcs.len()).collect();
    order.sort_by_key(|&i| len(i));
    let (base, extra) = (srcs.len() / n_bins, srcs.len() % n_bins);
    let mut out = Vec::with_capacity(n_bins);
    let mut at = 0;
    for bin in 0..n_bins {
        let size = base + usize::from(bin < extra);
        let idx = &order[at..at + size];
        at += size;
        let h: Vec<&str> = idx.iter().map(|&i| hyps[i].as_ref()).collect();
        let r: Vec<&str> = idx.iter().map(|&i| refs[i].as_ref()).collect();
        out.push(BinResult {
            bin,
            min_src_len: len(idx[0]),
            max_src_len: len(idx[size - 1]),
            n: size,
            bleu: corpus_bleu(&h, &r, MAX_N)?,
        });
    }
    Ok(out)
}
