use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const NUM_RESERVED: usize = 4;

pub const UNK_SURFACE: &str = "<unk>";
const RESERVED_SURFACE: [&str; NUM_RESERVED] = ["<pad>", "<s>", "</s>", UNK_SURFACE];

/// Token table with four reserved ids (`PAD`, `BOS`, `EOS`, `UNK`) ahead of
/// the learned tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Counts whitespace tokens; keeps those seen at least `min_freq` times,
    /// most frequent first (ties lexicographic), until the table holds
    /// `max_size` entries including the reserved ones.
    pub fn build<S: AsRef<str>>(corpus: &[S], min_freq: usize, max_size: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus("cannot build a vocabulary".into()));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for line in corpus {
            for tok in line.as_ref().split_whitespace() {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(t, c)| c >= min_freq.max(1) && !RESERVED_SURFACE.contains(&t))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let keep = max_size.saturating_sub(NUM_RESERVED);
        Ok(Self::from_tokens(
            ranked.into_iter().take(keep).map(|(t, _)| t.to_string()),
        ))
    }

    /// Vocabulary whose non-reserved ids follow the given order.
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Self {
        let mut all: Vec<String> = RESERVED_SURFACE.iter().map(|s| s.to_string()).collect();
        all.extend(tokens);
        let index = all
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary { tokens: all, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == NUM_RESERVED
    }

    pub fn id(&self, token: &str) -> usize {
        match self.index.get(token) {
            Some(&i) if i >= NUM_RESERVED => i,
            _ => UNK,
        }
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(UNK_SURFACE, |s| s.as_str())
    }

    pub fn encode(&self, sentence: &str) -> Vec<usize> {
        sentence.split_whitespace().map(|t| self.id(t)).collect()
    }

    /// Joins tokens with single spaces; reserved ids other than `UNK` are
    /// dropped.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i == UNK || i >= NUM_RESERVED)
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn decode_tokens(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter(|&&i| i == UNK || i >= NUM_RESERVED)
            .map(|&i| self.token(i).to_string())
            .collect()
    }

    /// One token per line; line `n` (0-based) holds id `n + 4`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = String::new();
        for t in &self.tokens[NUM_RESERVED..] {
            s.push_str(t);
            s.push('\n');
        }
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_tokens(s.lines().map(|l| l.to_string())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_then_frequency_order() {
        let v = Vocabulary::build(&["a a b"], 1, 100).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v.id("a"), 4);
        assert_eq!(v.id("b"), 5);
        assert_eq!(v.token(PAD), "<pad>");
    }

    #[test]
    fn min_freq_maps_rare_to_unk() {
        let v = Vocabulary::build(&["a a b"], 2, 100).unwrap();
        assert_eq!(v.encode("a b"), vec![4, UNK]);
    }

    #[test]
    fn max_size_counts_reserved() {
        let line = "j i h g f e d c b a";
        let v = Vocabulary::build(&[line], 1, 5).unwrap();
        assert_eq!(v.len(), 5);
        // all counts tie, so the lexicographically first token survives
        assert_eq!(v.id("a"), 4);
    }

    #[test]
    fn empty_corpus_rejected() {
        let empty: [&str; 0] = [];
        assert!(Vocabulary::build(&empty, 1, 10).is_err());
    }

    #[test]
    fn encode_decode_examples() {
        let v = Vocabulary::build(&["a b"], 1, 10).unwrap();
        assert_eq!(v.encode("a b"), vec![4, 5]);
        assert_eq!(v.decode(&[4, 5]), "a b");
        assert_eq!(v.encode(""), Vec::<usize>::new());
        assert_eq!(v.decode(&[]), "");
        assert_eq!(v.encode("z"), vec![UNK]);
        assert_eq!(v.decode(&[UNK]), "<unk>");
    }

    #[test]
    fn reserved_surfaces_never_tokenize_to_reserved_ids() {
        let v = Vocabulary::build(&["<s> </s> <pad> x"], 1, 10).unwrap();
        for id in v.encode("<s> </s> <pad>") {
            assert_eq!(id, UNK);
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.txt");
        let v = Vocabulary::build(&["x y y z"], 1, 10).unwrap();
        v.save(&p).unwrap();
        assert_eq!(Vocabulary::load(&p).unwrap(), v);
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().next(), Some("y"));
    }
}
