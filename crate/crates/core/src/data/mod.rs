//! Vocabulary, corpora, batching and synthetic tasks.

pub mod batch;
pub mod corpus;
pub mod synthetic;
pub mod vocab;

pub use batch::{make_batches, Batch};
pub use corpus::{EncodedCorpus, ParallelCorpus};
pub use synthetic::{gen_synthetic, SyntheticSpec, Task};
pub use vocab::{Vocabulary, BOS, EOS, NUM_RESERVED, PAD, UNK};
