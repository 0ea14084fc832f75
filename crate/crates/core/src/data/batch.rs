use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::Rng;

use super::corpus::EncodedCorpus;
use super::vocab::PAD;

/// Padded id matrices for one mini-batch.
///
/// Sources and targets are stored undecorated: consumers add `BOS`/`EOS`
/// as they need them.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    /// `size × src_width`, `PAD` past each length.
    pub src: Vec<usize>,
    /// `size × tgt_width`, `PAD` past each length.
    pub tgt: Vec<usize>,
    pub src_lens: Vec<usize>,
    pub tgt_lens: Vec<usize>,
    pub src_width: usize,
    pub tgt_width: usize,
    /// Corpus index of every row.
    pub origin: Vec<usize>,
}

impl Batch {
    pub fn from_pairs(pairs: &[(&[usize], &[usize])]) -> Self {
        let src_width = pairs.iter().map(|p| p.0.len()).max().unwrap_or(0);
        let tgt_width = pairs.iter().map(|p| p.1.len()).max().unwrap_or(0);
        let mut src = vec![PAD; pairs.len() * src_width];
        let mut tgt = vec![PAD; pairs.len() * tgt_width];
        for (b, (s, t)) in pairs.iter().enumerate() {
            src[b * src_width..b * src_width + s.len()].copy_from_slice(s);
            tgt[b * tgt_width..b * tgt_width + t.len()].copy_from_slice(t);
        }
        Batch {
            src,
            tgt,
            src_lens: pairs.iter().map(|p| p.0.len()).collect(),
            tgt_lens: pairs.iter().map(|p| p.1.len()).collect(),
            src_width,
            tgt_width,
            origin: (0..pairs.len()).collect(),
        }
    }

    pub fn size(&self) -> usize {
        self.src_lens.len()
    }

    pub fn src_row(&self, b: usize) -> &[usize] {
        &self.src[b * self.src_width..b * self.src_width + self.src_lens[b]]
    }

    pub fn tgt_row(&self, b: usize) -> &[usize] {
        &self.tgt[b * self.tgt_width..b * self.tgt_width + self.tgt_lens[b]]
    }

    pub fn src_is_pad(&self, b: usize, j: usize) -> bool {
        j >= self.src_lens[b]
    }

    pub fn tgt_is_pad(&self, b: usize, i: usize) -> bool {
        i >= self.tgt_lens[b]
    }

    pub fn num_tgt_tokens(&self) -> usize {
        self.tgt_lens.iter().sum()
    }

    /// Copy of row `b` with target token `i` replaced.
    pub fn with_target_token(&self, b: usize, i: usize, id: usize) -> Batch {
        let mut out = self.clone();
        out.tgt[b * self.tgt_width + i] = id;
        out
    }
}

/// Drops pairs with a side longer than `max_len`, groups the rest by target
/// length under a padded-token budget of `batch_tokens`, and shuffles the
/// batch order with `rng`. A pair wider than the budget gets a batch of its
/// own.
pub fn make_batches(
    corpus: &EncodedCorpus,
    batch_tokens: usize,
    max_len: usize,
    rng: &mut Rng,
) -> Result<Vec<Batch>> {
    if batch_tokens == 0 {
        return Err(Error::InvalidArgument("batch_tokens must be positive".into()));
    }
    let mut keep: Vec<usize> = (0..corpus.len())
        .filter(|&i| {
            let (s, t) = &corpus.pairs[i];
            !s.is_empty() && !t.is_empty() && s.len() <= max_len && t.len() <= max_len
        })
        .collect();
    if keep.is_empty() {
        return Err(Error::EmptyCorpus("no sentence pair survives the length filter".into()));
    }
    keep.shuffle(rng);
    keep.sort_by_key(|&i| (corpus.pairs[i].1.len(), corpus.pairs[i].0.len()));

    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut cur: Vec<usize> = Vec::new();
    let mut width = 0;
    for i in keep {
        let (s, t) = &corpus.pairs[i];
        let w = width.max(s.len()).max(t.len());
        if !cur.is_empty() && (cur.len() + 1) * w > batch_tokens {
            groups.push(std::mem::take(&mut cur));
            width = 0;
        }
        width = width.max(s.len()).max(t.len());
        cur.push(i);
    }
    groups.push(cur);
    groups.shuffle(rng);

    Ok(groups
        .into_iter()
        .map(|g| {
            let pairs: Vec<(&[usize], &[usize])> = g
                .iter()
                .map(|&i| (corpus.pairs[i].0.as_slice(), corpus.pairs[i].1.as_slice()))
                .collect();
            let mut b = Batch::from_pairs(&pairs);
            b.origin = g;
            b
        })
        .collect())
}
