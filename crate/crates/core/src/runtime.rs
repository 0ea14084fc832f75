//! The subcommands behind the `seer` binary, as plain functions.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

use crate::analysis::bleu::MAX_N;
use crate::analysis::probe::{collect_probe_data, random_probe, ProbeTrainConfig};
use crate::analysis::{
    corpus_bleu, fusion, fusion_similarity, length_binned_bleu, train_bow_probe, write_meta,
    write_text, BleuResult, FusionRow, ProbeScores,
};
use crate::checkpoint::{load_checkpoint, read_manifest, Checkpoint};
use crate::config::RunConfig;
use crate::data::{gen_synthetic, Batch, EncodedCorpus, ParallelCorpus, SyntheticSpec, Vocabulary};
use crate::diagnostics::{composite_grad_check, kernel_grad_checks};
use crate::error::{Error, Result};
use crate::gradcheck::{GradCheckConfig, GradCheckReport};
use crate::inference::{decode, teacher_forced_argmax, DecodeConfig, DecoderKind};
use crate::model::Model;
use crate::objectives::Mechanism;
use crate::train::{train_loop, RunDir, Summary};

/// Overrides the directory relative run directories resolve against.
pub const RUNS_DIR_ENV: &str = "SEER_RUNS_DIR";

/// 2 for configuration problems, 4 for capability mismatches, 3 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::HeadDivisibility { .. } => 2,
        Error::Capability(_) => 4,
        _ => 3,
    }
}

pub fn runs_root() -> PathBuf {
    std::env::var_os(RUNS_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// An explicit directory wins; then `io.run_dir`; then the config file's
/// stem. Relative results sit under [`runs_root`].
pub fn resolve_run_dir(cfg: &RunConfig, config_path: &Path, explicit: Option<&Path>) -> PathBuf {
    if let Some(p) = explicit {
        return p.to_path_buf();
    }
    let rel = cfg.io.run_dir.clone().unwrap_or_else(|| {
        PathBuf::from(config_path.file_stem().unwrap_or_else(|| "run".as_ref()))
    });
    if rel.is_absolute() {
        rel
    } else {
        runs_root().join(rel)
    }
}

pub fn cmd_train(config: &Path, run_dir: Option<&Path>, resume: bool) -> Result<(PathBuf, Summary)> {
    let cfg = RunConfig::load(config)?;
    let dir = resolve_run_dir(&cfg, config, run_dir);
    let summary = train_loop(&cfg, &dir, resume)?;
    Ok((dir, summary))
}

/// A checkpoint together with the vocabularies of its run directory.
pub struct Loaded {
    pub run: RunDir,
    pub ckpt: Checkpoint,
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
}

impl Loaded {
    pub fn open(manifest: &Path) -> Result<Self> {
        let ckpt = load_checkpoint(manifest)?;
        let run = RunDir::of_checkpoint(manifest);
        let (src_vocab, tgt_vocab) = run.load_vocabs()?;
        let m = &ckpt.model.cfg;
        if src_vocab.len() != m.src_vocab || tgt_vocab.len() != m.tgt_vocab {
            return Err(Error::checkpoint(
                manifest,
                format!(
                    "vocabulary sizes {}/{} in {} do not match the checkpoint's {}/{}",
                    src_vocab.len(),
                    tgt_vocab.len(),
                    run.root.display(),
                    m.src_vocab,
                    m.tgt_vocab
                ),
            ));
        }
        Ok(Loaded {
            run,
            ckpt,
            src_vocab,
            tgt_vocab,
        })
    }

    pub fn model(&self) -> &Model {
        &self.ckpt.model
    }

    pub fn encode(&self, corpus: &ParallelCorpus) -> EncodedCorpus {
        corpus.encode(&self.src_vocab, &self.tgt_vocab)
    }

    /// `--src/--ref` when given, else the run's test split, else its
    /// validation split.
    pub fn corpus(&self, src: Option<&Path>, reference: Option<&Path>) -> Result<(ParallelCorpus, [PathBuf; 2])> {
        let (s, t) = match (src, reference) {
            (Some(s), Some(t)) => (s.to_path_buf(), t.to_path_buf()),
            (None, None) => {
                let split = if self.run.data("test", "src").exists() { "test" } else { "valid" };
                (self.run.data(split, "src"), self.run.data(split, "tgt"))
            }
            _ => {
                return Err(Error::InvalidArgument(
                    "source and reference files go together".into(),
                ))
            }
        };
        Ok((ParallelCorpus::load(&s, &t)?, [s, t]))
    }

    fn meta(&self, corpus: &[PathBuf]) -> serde_json::Value {
        json!({
            "checkpoint": self.ckpt.path.display().to_string(),
            "step": self.ckpt.step,
            "config_hash": self.ckpt.config.hash(),
            "corpus": corpus.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
        })
    }

    /// `<run>/analysis/<name>` unless an explicit path is given.
    pub fn out_path(&self, explicit: Option<&Path>, name: &str) -> PathBuf {
        explicit
            .map(Path::to_path_buf)
            .unwrap_or_else(|| self.run.root.join("analysis").join(name))
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}

/// One output line per input line; returns the line count.
pub fn cmd_translate(manifest: &Path, input: &Path, output: &Path, cfg: &DecodeConfig) -> Result<usize> {
    let l = Loaded::open(manifest)?;
    let lines = read_lines(input)?;
    let mut out = String::new();
    for line in &lines {
        let src = l.src_vocab.encode(line);
        let hyp = decode(l.model(), &src, cfg)?;
        out.push_str(&l.tgt_vocab.decode(&hyp));
        out.push('\n');
    }
    write_text(output, &out)?;
    Ok(lines.len())
}

#[derive(Clone, Debug, Serialize)]
pub struct Evaluation {
    pub bleu: BleuResult,
    pub bins: Option<Vec<crate::analysis::BinResult>>,
}

/// Corpus BLEU of two line-aligned files, plus per-bin BLEU when sources
/// are given.
pub fn cmd_evaluate(
    hyp: &Path,
    reference: &Path,
    src: Option<&Path>,
    bins: usize,
    out: Option<&Path>,
) -> Result<Evaluation> {
    let h = read_lines(hyp)?;
    let r = read_lines(reference)?;
    let bleu = corpus_bleu(&h, &r, MAX_N)?;
    let bins = match src {
        Some(s) => Some(length_binned_bleu(&h, &r, &read_lines(s)?, bins)?),
        None => None,
    };
    if let Some(out) = out {
        let mut csv = String::from("bin,min_src_len,max_src_len,n,bleu\n");
        for b in bins.iter().flatten() {
            csv.push_str(&format!(
                "{},{},{},{},{:.6}\n",
                b.bin, b.min_src_len, b.max_src_len, b.n, b.bleu.score
            ));
        }
        csv.push_str(&format!("all,,,{},{:.6}\n", h.len(), bleu.score));
        write_text(out, &csv)?;
        write_meta(
            out,
            &json!({
                "hyp": hyp.display().to_string(),
                "ref": reference.display().to_string(),
                "src": src.map(|s| s.display().to_string()),
                "max_n": MAX_N,
                "smoothing": "exp",
            }),
        )?;
    }
    Ok(Evaluation { bleu, bins })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TeacherForcedScore {
    pub decoder: DecoderKind,
    pub cross_attention: bool,
    pub tokens: usize,
    pub correct: usize,
    /// Fraction of reference tokens the argmax reproduces.
    pub accuracy: f64,
    /// BLEU of the argmax sequences against the reference.
    pub bleu: f64,
}

pub fn score_teacher_forced(
    model: &Model,
    decoder: DecoderKind,
    cross_attention: bool,
    corpus: &EncodedCorpus,
) -> Result<(TeacherForcedScore, Vec<Vec<usize>>)> {
    let mut preds = Vec::with_capacity(corpus.len());
    let (mut tokens, mut correct) = (0, 0);
    for group in corpus.pairs.chunks(32) {
        let pairs: Vec<(&[usize], &[usize])> =
            group.iter().map(|(s, t)| (s.as_slice(), t.as_slice())).collect();
        let batch = Batch::from_pairs(&pairs);
        for (p, (_, gold)) in teacher_forced_argmax(model, decoder, cross_attention, &batch)?
            .into_iter()
            .zip(group)
        {
            tokens += gold.len();
            correct += p.iter().zip(gold).filter(|(a, b)| a == b).count();
            preds.push(p);
        }
    }
    let hyp: Vec<String> = preds.iter().map(|p| ids_line(p)).collect();
    let refs: Vec<String> = corpus.pairs.iter().map(|(_, t)| ids_line(t)).collect();
    let bleu = corpus_bleu(&hyp, &refs, MAX_N)?.score;
    Ok((
        TeacherForcedScore {
            decoder,
            cross_attention,
            tokens,
            correct,
            accuracy: correct as f64 / tokens.max(1) as f64,
            bleu,
        },
        preds,
    ))
}

fn ids_line(ids: &[usize]) -> String {
    ids.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" ")
}

pub fn cmd_score_teacher_forced(
    manifest: &Path,
    decoder: DecoderKind,
    cross_attention: bool,
    src: Option<&Path>,
    reference: Option<&Path>,
    out: Option<&Path>,
) -> Result<TeacherForcedScore> {
    let l = Loaded::open(manifest)?;
    if decoder == DecoderKind::Seer {
        l.model().require_full_seer()?;
    }
    let (corpus, paths) = l.corpus(src, reference)?;
    let (score, preds) = score_teacher_forced(l.model(), decoder, cross_attention, &l.encode(&corpus))?;
    let ca = if cross_attention { "on" } else { "off" };
    let decoder_name = match decoder {
        DecoderKind::Conventional => "conventional",
        DecoderKind::Seer => "seer",
    };
    let out = l.out_path(out, &format!("teacher_forced_{decoder_name}_{ca}.csv"));
    write_text(
        &out,
        &format!(
            "decoder,cross_attention,tokens,correct,accuracy,bleu\n{decoder_name},{ca},{},{},{:.6},{:.6}\n",
            score.tokens, score.correct, score.accuracy, score.bleu
        ),
    )?;
    let hyp: String = preds
        .iter()
        .map(|p| l.tgt_vocab.decode(p) + "\n")
        .collect();
    write_text(&out.with_extension("txt"), &hyp)?;
    let mut meta = l.meta(&paths);
    meta["reference_index"] = json!(0);
    write_meta(&out, &meta)?;
    Ok(score)
}

#[derive(Clone, Debug, Serialize)]
pub struct ProbeReport {
    pub trained: ProbeScores,
    pub random: ProbeScores,
}

/// Trains `Ww` on states of the probe's training pairs and scores it next
/// to an untrained random `Ww` on the evaluation pairs.
pub fn probe_bow(
    model: &Model,
    train: &EncodedCorpus,
    test: &EncodedCorpus,
    cfg: &ProbeTrainConfig,
) -> Result<ProbeReport> {
    let train_data = collect_probe_data(model, train, 32)?;
    let test_data = collect_probe_data(model, test, 32)?;
    let v = model.cfg.tgt_vocab;
    let probe = train_bow_probe(&train_data, v, cfg)?;
    let rand = random_probe(v, model.cfg.d_model, cfg.seed);
    Ok(ProbeReport {
        trained: crate::analysis::eval_bow_probe(&probe, &test_data)?,
        random: crate::analysis::eval_bow_probe(&rand, &test_data)?,
    })
}

pub fn cmd_probe_bow(
    manifest: &Path,
    train_pairs: usize,
    src: Option<&Path>,
    reference: Option<&Path>,
    out: Option<&Path>,
    cfg: &ProbeTrainConfig,
) -> Result<ProbeReport> {
    let l = Loaded::open(manifest)?;
    let before = l.model().params.checksum(|_| true);
    let mut train = l.run.load_split("train")?;
    train.pairs.truncate(train_pairs);
    let (test, paths) = l.corpus(src, reference)?;
    let rep = probe_bow(l.model(), &l.encode(&train), &l.encode(&test), cfg)?;
    debug_assert_eq!(before, l.model().params.checksum(|_| true));
    let out = l.out_path(out, "probe_bow.csv");
    let mut csv = String::from("probe,accuracy,recall,f1,positions\n");
    for (name, s) in [("trained", &rep.trained), ("random", &rep.random)] {
        csv.push_str(&format!(
            "{name},{:.6},{:.6},{:.6},{}\n",
            s.accuracy, s.recall, s.f1, s.positions
        ));
    }
    write_text(&out, &csv)?;
    let mut meta = l.meta(&paths);
    meta["averaging"] = json!("micro");
    meta["train_pairs"] = json!(train.len());
    meta["epochs"] = json!(cfg.epochs);
    meta["lr"] = json!(cfg.lr);
    meta["frozen_checksum"] = json!(before);
    write_meta(&out, &meta)?;
    Ok(rep)
}

pub fn cmd_analyze_fusion(
    manifest: &Path,
    src: Option<&Path>,
    reference: Option<&Path>,
    out: Option<&Path>,
) -> Result<Vec<FusionRow>> {
    let l = Loaded::open(manifest)?;
    l.model().require_full_seer()?;
    let (corpus, paths) = l.corpus(src, reference)?;
    let rows = fusion_similarity(l.model(), &l.encode(&corpus), 32)?;
    let out = l.out_path(out, "fusion.csv");
    write_text(&out, &fusion::to_csv(&rows))?;
    let mut meta = l.meta(&paths);
    meta["target_length"] = json!([fusion::MIN_LEN, fusion::MAX_LEN]);
    meta["fused"] = json!("A before cross-attention");
    write_meta(&out, &meta)?;
    Ok(rows)
}

/// Writes `<prefix>.src` and `<prefix>.tgt`.
pub fn cmd_gen_data(spec: &SyntheticSpec, prefix: &Path) -> Result<[PathBuf; 2]> {
    let corpus = gen_synthetic(spec)?;
    let s = PathBuf::from(format!("{}.src", prefix.display()));
    let t = PathBuf::from(format!("{}.tgt", prefix.display()));
    corpus.save(&s, &t)?;
    Ok([s, t])
}

/// Every kernel, then the full objective under each mechanism.
pub fn grad_check_suite() -> Result<Vec<(String, GradCheckReport)>> {
    let h = GradCheckConfig::default().h;
    let mut out: Vec<(String, GradCheckReport)> = kernel_grad_checks(h)?
        .into_iter()
        .map(|(n, r)| (format!("kernel/{n}"), r))
        .collect();
    let cfg = GradCheckConfig {
        samples_per_tensor: Some(3),
        ..Default::default()
    };
    for m in [Mechanism::None, Mechanism::Kd, Mechanism::L2, Mechanism::Al] {
        let name = format!("step/{}", format!("{m:?}").to_lowercase());
        out.push((name, composite_grad_check(m, &cfg)?));
    }
    Ok(out)
}

/// Reads a manifest without loading the payload.
pub fn checkpoint_step(manifest: &Path) -> Result<u64> {
    Ok(read_manifest(manifest)?.step)
}
