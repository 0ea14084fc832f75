//! Toy translation tasks with known solutions.

use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Streams;

use super::corpus::ParallelCorpus;
use super::vocab::NUM_RESERVED;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// target = source
    Copy,
    /// target = source reversed
    Reverse,
    /// target = source through a fixed random bijection, then adjacent
    /// pairs swapped
    Lexicon,
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(Task::Copy),
            "reverse" => Ok(Task::Reverse),
            "lexicon" => Ok(Task::Lexicon),
            _ => Err(Error::InvalidArgument(format!("unknown task {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub task: Task,
    pub n: usize,
    /// Vocabulary size including the four reserved ids.
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
    /// Names the sentence stream so several sets can share one lexicon.
    pub stream: String,
}

pub fn source_token(k: usize) -> String {
    format!("s{k}")
}

/// The lexicon task's bijection for `seed`: `map[k]` is the target index of
/// source token `k`. Depends on the seed and vocabulary size only.
pub fn lexicon_map(seed: u64, content_tokens: usize) -> Vec<usize> {
    let mut map: Vec<usize> = (0..content_tokens).collect();
    map.shuffle(&mut Streams::new(seed).stream("lexicon"));
    map
}

/// Maps every token, then swaps positions (0,1), (2,3), …
pub fn apply_lexicon<F: Fn(&str) -> String>(source: &[String], map: F) -> Vec<String> {
    let mut out: Vec<String> = source.iter().map(|t| map(t)).collect();
    for pair in out.chunks_mut(2) {
        if pair.len() == 2 {
            pair.swap(0, 1);
        }
    }
    out
}

pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<ParallelCorpus> {
    if spec.vocab_size <= NUM_RESERVED {
        return Err(Error::InvalidArgument(format!(
            "vocab_size {} leaves no room past the reserved ids",
            spec.vocab_size
        )));
    }
    if spec.min_len == 0 || spec.min_len > spec.max_len {
        return Err(Error::InvalidArgument(format!(
            "bad length range [{}, {}]",
            spec.min_len, spec.max_len
        )));
    }
    let content = spec.vocab_size - NUM_RESERVED;
    let lexicon = lexicon_map(spec.seed, content);
    let mut rng = Streams::new(spec.seed).stream(&format!("sentences/{}", spec.stream));
    let mut pairs = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let len = rng.random_range(spec.min_len..=spec.max_len);
        let ids: Vec<usize> = (0..len).map(|_| rng.random_range(0..content)).collect();
        let src: Vec<String> = ids.iter().map(|&k| source_token(k)).collect();
        let tgt = match spec.task {
            Task::Copy => src.clone(),
            Task::Reverse => src.iter().rev().cloned().collect(),
            Task::Lexicon => {
                let mapped: Vec<String> = ids.iter().map(|&k| format!("t{}", lexicon[k])).collect();
                apply_lexicon(&mapped, |t| t.to_string())
            }
        };
        pairs.push((src, tgt));
    }
    Ok(ParallelCorpus { pairs })
}
