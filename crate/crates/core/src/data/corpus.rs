use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::vocab::Vocabulary;

/// Aligned source/target sentences, each a list of whitespace tokens.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParallelCorpus {
    pub pairs: Vec<(Vec<String>, Vec<String>)>,
}

fn tokens(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

impl ParallelCorpus {
    pub fn from_lines<S: AsRef<str>>(src: &[S], tgt: &[S]) -> Result<Self> {
        if src.len() != tgt.len() {
            return Err(Error::InvalidArgument(format!(
                "source has {} lines but target has {}",
                src.len(),
                tgt.len()
            )));
        }
        let mut pairs = Vec::with_capacity(src.len());
        for (i, (s, t)) in src.iter().zip(tgt).enumerate() {
            let (s, t) = (tokens(s.as_ref()), tokens(t.as_ref()));
            if s.is_empty() || t.is_empty() {
                return Err(Error::InvalidArgument(format!("empty sentence at line {}", i + 1)));
            }
            pairs.push((s, t));
        }
        Ok(ParallelCorpus { pairs })
    }

    /// Reads two line-aligned UTF-8 files.
    pub fn load(src: &Path, tgt: &Path) -> Result<Self> {
        let s = fs::read_to_string(src).map_err(|e| Error::io(src, e))?;
        let t = fs::read_to_string(tgt).map_err(|e| Error::io(tgt, e))?;
        let s: Vec<&str> = s.lines().collect();
        let t: Vec<&str> = t.lines().collect();
        Self::from_lines(&s, &t)
    }

    pub fn save(&self, src: &Path, tgt: &Path) -> Result<()> {
        let join = |side: fn(&(Vec<String>, Vec<String>)) -> &Vec<String>| {
            let mut out = String::new();
            for p in &self.pairs {
                out.push_str(&side(p).join(" "));
                out.push('\n');
            }
            out
        };
        for path in [src, tgt] {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        fs::write(src, join(|p| &p.0)).map_err(|e| Error::io(src, e))?;
        fs::write(tgt, join(|p| &p.1)).map_err(|e| Error::io(tgt, e))
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn source_lines(&self) -> Vec<String> {
        self.pairs.iter().map(|p| p.0.join(" ")).collect()
    }

    pub fn target_lines(&self) -> Vec<String> {
        self.pairs.iter().map(|p| p.1.join(" ")).collect()
    }

    pub fn encode(&self, src_vocab: &Vocabulary, tgt_vocab: &Vocabulary) -> EncodedCorpus {
        let ids = |v: &Vocabulary, toks: &[String]| toks.iter().map(|t| v.id(t)).collect();
        EncodedCorpus {
            pairs: self
                .pairs
                .iter()
                .map(|(s, t)| (ids(src_vocab, s), ids(tgt_vocab, t)))
                .collect(),
        }
    }

    /// Splits off the last `n` pairs.
    pub fn split_tail(mut self, n: usize) -> (Self, Self) {
        let at = self.pairs.len().saturating_sub(n);
        let tail = self.pairs.split_off(at);
        (self, ParallelCorpus { pairs: tail })
    }
}

/// Token-id form of a corpus; targets carry no `BOS`/`EOS` decoration.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EncodedCorpus {
    pub pairs: Vec<(Vec<usize>, Vec<usize>)>,
}

impl EncodedCorpus {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}
