//! BLEU, length-binned BLEU, the bag-of-future-words probe and the fusion
//! similarity curves. Every analysis writes a CSV plus a JSON metadata file.

pub mod bleu;
pub mod fusion;
pub mod probe;

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub use bleu::{corpus_bleu, length_binned_bleu, BinResult, BleuResult};
pub use fusion::{fusion_similarity, FusionRow};
pub use probe::{bag_size, eval_bow_probe, train_bow_probe, BowProbe, ProbeScores};

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `meta` next to a CSV as `<stem>.meta.json`.
pub fn write_meta(csv: &Path, meta: &serde_json::Value) -> Result<()> {
    let path = csv.with_extension("meta.json");
    let text = serde_json::to_string_pretty(meta).expect("json value serializes");
    write_text(&path, &text)
}
