//! Per-position cosine similarity between the fused representation `A` and
//! its weighted past (`H'p·Wp`) and future (`H''f·Wf`) parts.

use serde::Serialize;

use crate::data::{Batch, EncodedCorpus};
use crate::error::{Error, Result};
use crate::kernels::cosine;
use crate::model::{Fwd, Model};

pub const MIN_LEN: usize = 15;
pub const MAX_LEN: usize = 25;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FusionRow {
    pub position: usize,
    pub n: usize,
    pub cos_past: Option<f64>,
    pub cos_future: Option<f64>,
}

/// Mean cosines for positions `1..=25` over sentences whose target length
/// lies in `[15, 25]`. Positions no sentence reaches have `n = 0`.
pub fn fusion_similarity(model: &Model, corpus: &EncodedCorpus, chunk: usize) -> Result<Vec<FusionRow>> {
    model.require_full_seer()?;
    let keep: Vec<&(Vec<usize>, Vec<usize>)> = corpus
        .pairs
        .iter()
        .filter(|(_, t)| (MIN_LEN..=MAX_LEN).contains(&t.len()))
        .collect();
    if keep.is_empty() {
        return Err(Error::EmptyCorpus(format!(
            "no sentence with target length in [{MIN_LEN}, {MAX_LEN}]"
        )));
    }
    let mut sum_p = vec![0.0; MAX_LEN];
    let mut sum_f = vec![0.0; MAX_LEN];
    let mut count = vec![0usize; MAX_LEN];
    for group in keep.chunks(chunk.max(1)) {
        let pairs: Vec<(&[usize], &[usize])> =
            group.iter().map(|(s, t)| (s.as_slice(), t.as_slice())).collect();
        let batch = Batch::from_pairs(&pairs);
        let mut f = Fwd::inference(model);
        let enc = f.encode_batch(&batch)?;
        let out = f.seer(&batch, &enc)?;
        let (a, p, q) = (
            f.tape.value(out.fused),
            f.tape.value(out.past_part.expect("full seer")),
            f.tape.value(out.future_part.expect("full seer")),
        );
        for b in 0..batch.size() {
            for i in 0..batch.tgt_lens[b] {
                let r = b * out.width + i;
                sum_p[i] += cosine(a.row(r), p.row(r));
                sum_f[i] += cosine(a.row(r), q.row(r));
                count[i] += 1;
            }
        }
    }
    Ok((0..MAX_LEN)
        .map(|i| {
            let n = count[i];
            let mean = |s: f64| (n > 0).then(|| s / n as f64);
            FusionRow {
                position: i + 1,
                n,
                cos_past: mean(sum_p[i]),
                cos_future: mean(sum_f[i]),
            }
        })
        .collect())
}

pub const CSV_HEADER: &str = "position,n,cos_past,cos_future";

pub fn to_csv(rows: &[FusionRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{}\n",
            r.position,
            r.n,
            fmt(r.cos_past),
            fmt(r.cos_future)
        ));
    }
    s
}
