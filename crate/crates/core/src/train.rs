//! One training step, the epoch/batch schedule, validation, and the loop
//! that owns a run directory.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::analysis::corpus_bleu;
use crate::analysis::bleu::MAX_N;
use crate::autograd::Var;
use crate::checkpoint::{checkpoint_name, copy_checkpoint, load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::data::{
    gen_synthetic, make_batches, Batch, EncodedCorpus, ParallelCorpus, SyntheticSpec, Vocabulary,
};
use crate::error::{Error, Result};
use crate::inference::{greedy_decode_many, DecodeConfig};
use crate::model::transformer::{DecoderInput, Encoded};
use crate::model::{Fwd, Model};
use crate::objectives::{loss_conventional, loss_kd, loss_seer, LossReport, Mechanism, Targets};
use crate::optim::{learning_rate, Adam};
use crate::rng::Streams;
use crate::tensor::Scalar;
use crate::transfer::{add_l2_params, loss_adversarial, loss_l2, schedule_l2, Discriminator, L2_MAP};

/// The part of the configuration that shapes the objective.
#[derive(Clone, Debug)]
pub struct LossConfig {
    pub mechanism: Mechanism,
    pub lambda: f64,
    pub alpha: f64,
    pub pretrain_steps: u64,
    pub label_smoothing: f64,
    pub disc: Discriminator,
}

impl LossConfig {
    pub fn from_run(cfg: &RunConfig) -> Self {
        LossConfig {
            mechanism: cfg.mechanism(),
            lambda: cfg.training.lambda,
            alpha: cfg.training.alpha,
            pretrain_steps: cfg.training.pretrain_steps,
            label_smoothing: cfg.training.label_smoothing,
            disc: Discriminator {
                channels: cfg.training.disc_channels,
                width: 3,
            },
        }
    }
}

/// Loss nodes of one forward pass. Component losses are summed over
/// tokens (or sequences for the adversarial term); `total` is normalized.
#[derive(Clone, Copy, Debug)]
pub struct StepLosses {
    pub total: Var,
    pub l_c: Var,
    pub l_s: Option<Var>,
    pub l_transfer: Option<Var>,
    /// Multiplies `l_transfer` into a per-token value for reporting.
    pub transfer_norm: f64,
    pub disc_accuracy: Option<f64>,
}

/// Encoder, both decoders and the transfer term for one batch.
///
/// With `N` target words in the batch:
/// `kd`: `(L_s + λL_c + (1−λ)L_kd) / N`;
/// `l2`: `(L_c + L_s + w·L2) / N` with `w` from [`schedule_l2`];
/// `al`: `(L_c + L_s) / N + α·L_d / 2B`;
/// `none`: `(L_c + L_s) / N`.
pub fn forward_losses<T: Scalar>(
    f: &mut Fwd<'_, T>,
    batch: &Batch,
    lc: &LossConfig,
    step: u64,
) -> Result<StepLosses> {
    let n = batch.num_tgt_tokens() as f64;
    let inv_n = T::lit(1.0 / n);
    let enc = f.encode_batch(batch)?;
    let targets = Targets::new(batch);
    let input = DecoderInput::from_batch(batch);
    let conv_states = f.decode_conventional(&input, &enc)?;
    let conv_logits = f.project(conv_states)?;
    let l_c = loss_conventional(&mut f.tape, conv_logits, &targets, lc.label_smoothing)?;

    if !f.model.has_seer() {
        let total = f.tape.scale(l_c, inv_n);
        return Ok(StepLosses {
            total,
            l_c,
            l_s: None,
            l_transfer: None,
            transfer_norm: 0.0,
            disc_accuracy: None,
        });
    }

    let seer = f.seer(batch, &enc)?;
    let seer_logits = f.project(seer.states)?;
    let l_s = loss_seer(&mut f.tape, seer_logits, &targets, lc.label_smoothing)?;
    let both = f.tape.add(l_c, l_s)?;

    let (total, l_transfer, transfer_norm, disc_accuracy) = match lc.mechanism {
        Mechanism::None => (f.tape.scale(both, inv_n), None, 0.0, None),
        Mechanism::Kd => {
            let l_kd = loss_kd(&mut f.tape, conv_logits, seer_logits, &targets)?;
            let a = f.tape.scale(l_c, T::lit(lc.lambda));
            let b = f.tape.scale(l_kd, T::lit(1.0 - lc.lambda));
            let s = f.tape.add(l_s, a)?;
            let s = f.tape.add(s, b)?;
            (f.tape.scale(s, inv_n), Some(l_kd), 1.0 / n, None)
        }
        Mechanism::L2 => {
            let w = schedule_l2(step, lc.pretrain_steps, lc.alpha);
            if w == 0.0 {
                (f.tape.scale(both, inv_n), None, 1.0 / n, None)
            } else {
                // a second student pass whose encoder input is cut off, so
                // the L2 term reaches neither the encoder nor the teacher
                let frozen = Encoded {
                    h: f.tape.stop_grad(enc.h),
                    lens: enc.lens.clone(),
                    width: enc.width,
                };
                let student = f.decode_conventional(&input, &frozen)?;
                let st = f.tape.gather_rows(student, &targets.conv_word_rows)?;
                let ss = f.tape.gather_rows(seer.states, &targets.seer_rows)?;
                let g = f.p(L2_MAP)?;
                let l2 = loss_l2(&mut f.tape, st, ss, g)?;
                let wl = f.tape.scale(l2, T::lit(w));
                let s = f.tape.add(both, wl)?;
                (f.tape.scale(s, inv_n), Some(l2), 1.0 / n, None)
            }
        }
        Mechanism::Al => {
            let (b, imax) = (batch.size(), batch.tgt_width);
            let rows: Vec<usize> = (0..b)
                .flat_map(|r| (0..imax).map(move |i| r * (imax + 1) + i))
                .collect();
            let student = f.tape.gather_rows(conv_states, &rows)?;
            let adv = loss_adversarial(f, &lc.disc, student, seer.states, imax, &batch.tgt_lens)?;
            let per_seq = 1.0 / (2 * b) as f64;
            let a = f.tape.scale(both, inv_n);
            let d = f.tape.scale(adv.loss, T::lit(lc.alpha * per_seq));
            (f.tape.add(a, d)?, Some(adv.loss), per_seq, Some(adv.accuracy))
        }
    };
    Ok(StepLosses {
        total,
        l_c,
        l_s: Some(l_s),
        l_transfer,
        transfer_norm,
        disc_accuracy,
    })
}

/// Reads the values of `losses` into a report.
pub fn report<T: Scalar>(f: &Fwd<'_, T>, losses: &StepLosses, batch: &Batch, step: u64) -> LossReport {
    let v = |x: Option<Var>| x.map_or(0.0, |x| f.tape.value(x).item().as_f64());
    let n = batch.num_tgt_tokens();
    let (l_c_sum, l_s_sum, l_t_sum) = (v(Some(losses.l_c)), v(losses.l_s), v(losses.l_transfer));
    LossReport {
        step,
        l_c: l_c_sum / n as f64,
        l_s: l_s_sum / n as f64,
        l_transfer: l_t_sum * losses.transfer_norm,
        l_total: v(Some(losses.total)),
        l_c_sum,
        l_s_sum,
        l_transfer_sum: l_t_sum,
        tokens: n,
        sentences: batch.size(),
    }
}

/// Adds the parameters a mechanism needs beyond the two decoders.
pub fn add_mechanism_params(model: &mut Model, cfg: &RunConfig) -> Result<()> {
    match cfg.mechanism() {
        Mechanism::L2 => add_l2_params(model),
        Mechanism::Al => LossConfig::from_run(cfg)
            .disc
            .add_params(model, cfg.training.seed),
        _ => Ok(()),
    }
}

pub fn fresh_model(cfg: &RunConfig, src_vocab: usize, tgt_vocab: usize) -> Result<Model> {
    let mut model = Model::new(cfg.model_config(src_vocab, tgt_vocab), cfg.training.seed)?;
    add_mechanism_params(&mut model, cfg)?;
    Ok(model)
}

/// Forward, backward and one Adam update. `step` is the 0-based index of
/// the update; dropout draws from the step's own stream.
pub fn train_step(
    model: &mut Model,
    adam: &mut Adam,
    batch: &Batch,
    batch_id: usize,
    lc: &LossConfig,
    cfg: &RunConfig,
    step: u64,
) -> Result<LossReport> {
    let t = &cfg.training;
    let rng = Streams::new(t.seed).indexed("dropout", step);
    let (rep, grads) = {
        let mut f = Fwd::train(model, rng);
        let losses = forward_losses(&mut f, batch, lc, step)?;
        let rep = report(&f, &losses, batch, step + 1);
        if !rep.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: step + 1,
                batch: batch_id,
                value: rep.l_total,
            });
        }
        let grads = f.tape.backward(losses.total)?.params(&f.tape, &model.params);
        (rep, grads)
    };
    let lr = learning_rate(step, t.warmup_steps, t.peak_lr);
    adam.step(&mut model.params, &grads, lr);
    Ok(rep)
}

/// Maps update steps onto (epoch, batch) so a resumed run sees the same
/// batches in the same order.
pub struct Schedule<'c> {
    corpus: &'c EncodedCorpus,
    streams: Streams,
    batch_tokens: usize,
    max_len: usize,
    epoch: u64,
    batches: Vec<Batch>,
    next: usize,
}

impl<'c> Schedule<'c> {
    pub fn new(corpus: &'c EncodedCorpus, cfg: &RunConfig) -> Result<Self> {
        let mut s = Schedule {
            corpus,
            streams: Streams::new(cfg.training.seed),
            batch_tokens: cfg.training.batch_tokens,
            max_len: cfg.model.max_len,
            epoch: 0,
            batches: Vec::new(),
            next: 0,
        };
        s.batches = s.epoch_batches(0)?;
        Ok(s)
    }

    fn epoch_batches(&self, epoch: u64) -> Result<Vec<Batch>> {
        make_batches(
            self.corpus,
            self.batch_tokens,
            self.max_len,
            &mut self.streams.indexed("data", epoch),
        )
    }

    /// Positions the schedule after `steps` batches.
    pub fn skip(&mut self, mut steps: u64) -> Result<()> {
        while steps > 0 {
            let left = (self.batches.len() - self.next) as u64;
            if steps < left {
                self.next += steps as usize;
                return Ok(());
            }
            steps -= left;
            self.epoch += 1;
            self.batches = self.epoch_batches(self.epoch)?;
            self.next = 0;
        }
        Ok(())
    }

    /// The next batch and its id within the epoch.
    pub fn next_batch(&mut self) -> Result<(&Batch, usize)> {
        if self.next == self.batches.len() {
            self.epoch += 1;
            self.batches = self.epoch_batches(self.epoch)?;
            self.next = 0;
        }
        self.next += 1;
        Ok((&self.batches[self.next - 1], self.next - 1))
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Validation {
    /// Teacher-forced conventional cross-entropy per target token.
    pub ce: f64,
    pub bleu: f64,
}

pub fn validate(
    model: &Model,
    valid: &EncodedCorpus,
    valid_refs: &[String],
    tgt_vocab: &Vocabulary,
    bleu_sentences: usize,
) -> Result<Validation> {
    let mut sum = 0.0;
    let mut tokens = 0;
    for group in valid.pairs.chunks(32) {
        let pairs: Vec<(&[usize], &[usize])> =
            group.iter().map(|(s, t)| (s.as_slice(), t.as_slice())).collect();
        let batch = Batch::from_pairs(&pairs);
        let mut f = Fwd::inference(model);
        let enc = f.encode_batch(&batch)?;
        let states = f.decode_conventional(&DecoderInput::from_batch(&batch), &enc)?;
        let logits = f.project(states)?;
        let l = loss_conventional(&mut f.tape, logits, &Targets::new(&batch), 0.0)?;
        sum += f.tape.value(l).item() as f64;
        tokens += batch.num_tgt_tokens();
    }
    let k = bleu_sentences.min(valid.len());
    let srcs: Vec<Vec<usize>> = valid.pairs[..k].iter().map(|(s, _)| s.clone()).collect();
    let hyps: Vec<String> = greedy_decode_many(model, &srcs, &DecodeConfig::greedy(), 64)?
        .iter()
        .map(|h| tgt_vocab.decode(h))
        .collect();
    let bleu = corpus_bleu(&hyps, &valid_refs[..k].to_vec(), MAX_N)?.score;
    Ok(Validation {
        ce: sum / tokens.max(1) as f64,
        bleu,
    })
}

/// Files inside a run directory.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    /// The run directory owning a checkpoint manifest.
    pub fn of_checkpoint(manifest: &Path) -> Self {
        let ckpts = manifest.parent().unwrap_or(Path::new("."));
        RunDir::new(ckpts.parent().unwrap_or(Path::new(".")))
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }
    pub fn src_vocab(&self) -> PathBuf {
        self.root.join("src.vocab")
    }
    pub fn tgt_vocab(&self) -> PathBuf {
        self.root.join("tgt.vocab")
    }
    pub fn data(&self, split: &str, side: &str) -> PathBuf {
        self.root.join("data").join(format!("{split}.{side}"))
    }
    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }
    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }
    pub fn checkpoint(&self, step: u64) -> PathBuf {
        self.checkpoints().join(format!("{}.json", checkpoint_name(step)))
    }
    pub fn best(&self) -> PathBuf {
        self.checkpoints().join("best.json")
    }
    pub fn summary(&self) -> PathBuf {
        self.root.join("summary.json")
    }

    /// Step-numbered checkpoints, oldest first.
    pub fn list_checkpoints(&self) -> Result<Vec<(u64, PathBuf)>> {
        let dir = self.checkpoints();
        if !dir.exists() {
            return Ok(Vec::new());
        }
        let mut out = Vec::new();
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
            if let Some(step) = name
                .strip_prefix("ckpt-")
                .and_then(|n| n.strip_suffix(".json"))
                .and_then(|n| n.parse().ok())
            {
                out.push((step, path));
            }
        }
        out.sort();
        Ok(out)
    }

    pub fn load_vocabs(&self) -> Result<(Vocabulary, Vocabulary)> {
        Ok((Vocabulary::load(&self.src_vocab())?, Vocabulary::load(&self.tgt_vocab())?))
    }

    pub fn load_split(&self, split: &str) -> Result<ParallelCorpus> {
        ParallelCorpus::load(&self.data(split, "src"), &self.data(split, "tgt"))
    }
}

/// Training, validation and (for synthetic data) test splits.
pub struct Splits {
    pub train: ParallelCorpus,
    pub valid: ParallelCorpus,
    pub test: Option<ParallelCorpus>,
}

/// Validation pairs cut from the end of a file-based training set that
/// comes without a validation set.
pub fn held_out_size(train_len: usize) -> usize {
    (train_len / 10).clamp(1, 1000)
}

pub fn load_splits(cfg: &RunConfig) -> Result<Splits> {
    let d = &cfg.data;
    if let Some(s) = &d.synthetic {
        let spec = |n: usize, stream: &str| SyntheticSpec {
            task: s.task,
            n,
            vocab_size: s.vocab_size,
            min_len: s.min_len,
            max_len: s.max_len,
            seed: cfg.synthetic_seed(),
            stream: stream.into(),
        };
        return Ok(Splits {
            train: gen_synthetic(&spec(s.train_size, "train"))?,
            valid: gen_synthetic(&spec(s.valid_size, "valid"))?,
            test: Some(gen_synthetic(&spec(s.test_size, "test"))?),
        });
    }
    let (src, tgt) = match (&d.train_src, &d.train_tgt) {
        (Some(s), Some(t)) => (s, t),
        _ => return Err(Error::Config("data needs train_src and train_tgt".into())),
    };
    let train = ParallelCorpus::load(src, tgt)?;
    match (&d.valid_src, &d.valid_tgt) {
        (Some(s), Some(t)) => Ok(Splits {
            train,
            valid: ParallelCorpus::load(s, t)?,
            test: None,
        }),
        _ => {
            if train.len() < 2 {
                return Err(Error::EmptyCorpus("too few pairs to hold out a validation set".into()));
            }
            let n = held_out_size(train.len());
            let (train, valid) = train.split_tail(n);
            Ok(Splits {
                train,
                valid,
                test: None,
            })
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Summary {
    pub final_step: u64,
    pub config_hash: String,
    pub best_step: Option<u64>,
    pub best_valid_bleu: Option<f64>,
    pub best_valid_ce: Option<f64>,
    pub final_valid: Option<Validation>,
    pub src_vocab_size: usize,
    pub tgt_vocab_size: usize,
    pub parameters: usize,
    pub train_pairs: usize,
}

pub const METRICS_HEADER: &str = "step,L_c,L_s,L_transfer,L_total,valid_ce,valid_bleu";

fn metrics_row(r: &LossReport, v: Option<&Validation>) -> String {
    let (ce, bleu) = match v {
        Some(v) => (format!("{:.6}", v.ce), format!("{:.6}", v.bleu)),
        None => (String::new(), String::new()),
    };
    format!(
        "{},{:.6},{:.6},{:.6},{:.6},{ce},{bleu}\n",
        r.step, r.l_c, r.l_s, r.l_transfer, r.l_total
    )
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Keeps the header and the rows up to `step`.
fn truncate_metrics(path: &Path, step: u64) -> Result<()> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = String::new();
    for (k, line) in text.lines().enumerate() {
        let keep = k == 0
            || line
                .split(',')
                .next()
                .and_then(|s| s.parse::<u64>().ok())
                .is_some_and(|s| s <= step);
        if keep {
            out.push_str(line);
            out.push('\n');
        }
    }
    write(path, out.as_bytes())
}

fn better(v: &Validation, best: &Option<(u64, Validation)>) -> bool {
    match best {
        None => true,
        Some((_, b)) => v.bleu > b.bleu || (v.bleu == b.bleu && v.ce < b.ce),
    }
}

/// Trains per `cfg` inside `run_dir`. With `resume`, continues from the
/// newest checkpoint of an existing run with the same configuration.
pub fn train_loop(cfg: &RunConfig, run_dir: &Path, resume: bool) -> Result<Summary> {
    cfg.validate()?;
    let run = RunDir::new(run_dir);
    let existing = run.list_checkpoints()?;
    if !resume && (!existing.is_empty() || run.metrics().exists()) {
        return Err(Error::Config(format!(
            "{} already holds a run; pass --resume or pick a new directory",
            run_dir.display()
        )));
    }
    let resume_from = if resume {
        if run.config().exists() {
            let old = RunConfig::load(&run.config())?;
            if old.hash() != cfg.hash() {
                return Err(Error::Config(format!(
                    "resume conflict: {} was written by a different configuration",
                    run.config().display()
                )));
            }
        }
        existing.last().cloned()
    } else {
        None
    };

    let (src_vocab, tgt_vocab) = match &resume_from {
        Some(_) => run.load_vocabs()?,
        None => {
            let splits = load_splits(cfg)?;
            let src_lines = splits.train.source_lines();
            let tgt_lines = splits.train.target_lines();
            let sv = Vocabulary::build(&src_lines, cfg.data.min_freq, cfg.data.max_vocab)?;
            let tv = Vocabulary::build(&tgt_lines, cfg.data.min_freq, cfg.data.max_vocab)?;
            write(&run.config(), cfg.to_toml().as_bytes())?;
            sv.save(&run.src_vocab())?;
            tv.save(&run.tgt_vocab())?;
            splits.train.save(&run.data("train", "src"), &run.data("train", "tgt"))?;
            splits.valid.save(&run.data("valid", "src"), &run.data("valid", "tgt"))?;
            if let Some(t) = &splits.test {
                t.save(&run.data("test", "src"), &run.data("test", "tgt"))?;
            }
            (sv, tv)
        }
    };
    let train = run.load_split("train")?;
    let valid = run.load_split("valid")?;
    let train_enc = train.encode(&src_vocab, &tgt_vocab);
    let valid_enc = valid.encode(&src_vocab, &tgt_vocab);
    let valid_refs = valid.target_lines();

    let (mut model, mut adam, start) = match &resume_from {
        Some((_, path)) => {
            let ck = load_checkpoint(path)?;
            let adam = ck.adam.unwrap_or_else(|| Adam::new(&ck.model.params));
            (ck.model, adam, ck.step)
        }
        None => {
            let model = fresh_model(cfg, src_vocab.len(), tgt_vocab.len())?;
            let adam = Adam::new(&model.params);
            (model, adam, 0)
        }
    };

    let mut best: Option<(u64, Validation)> = None;
    if resume_from.is_some() {
        truncate_metrics(&run.metrics(), start)?;
        if run.best().exists() {
            let m = crate::checkpoint::read_manifest(&run.best())?;
            if m.step <= start {
                let v = validate(&load_checkpoint(&run.best())?.model, &valid_enc, &valid_refs, &tgt_vocab, cfg.eval.valid_bleu_sentences)?;
                best = Some((m.step, v));
            }
        }
    } else {
        write(&run.metrics(), format!("{METRICS_HEADER}\n").as_bytes())?;
        save_checkpoint(&run.checkpoints(), &checkpoint_name(0), 0, cfg, &model, Some(&adam))?;
    }

    let t = &cfg.training;
    let lc = LossConfig::from_run(cfg);
    let mut schedule = Schedule::new(&train_enc, cfg)?;
    schedule.skip(start)?;
    let mut metrics = fs::OpenOptions::new()
        .append(true)
        .open(run.metrics())
        .map_err(|e| Error::io(run.metrics(), e))?;
    let mut last_valid = None;
    for step in start..t.max_steps {
        let (batch, id) = schedule.next_batch()?;
        let rep = train_step(&mut model, &mut adam, batch, id, &lc, cfg, step)?;
        let s = step + 1;
        let last = s == t.max_steps;
        let eval = s % t.eval_every == 0 || last;
        let v = if eval {
            let v = validate(&model, &valid_enc, &valid_refs, &tgt_vocab, cfg.eval.valid_bleu_sentences)?;
            Some(v)
        } else {
            None
        };
        if s % t.log_every == 0 || eval {
            metrics
                .write_all(metrics_row(&rep, v.as_ref()).as_bytes())
                .map_err(|e| Error::io(run.metrics(), e))?;
        }
        if s % t.checkpoint_every == 0 || last || eval {
            let path = save_checkpoint(&run.checkpoints(), &checkpoint_name(s), s, cfg, &model, Some(&adam))?;
            if let Some(v) = &v {
                if better(v, &best) {
                    copy_checkpoint(&path, "best")?;
                    best = Some((s, v.clone()));
                }
            }
        }
        if let Some(v) = v {
            last_valid = Some(v);
        }
    }
    metrics.flush().map_err(|e| Error::io(run.metrics(), e))?;

    let summary = Summary {
        final_step: t.max_steps.max(start),
        config_hash: cfg.hash(),
        best_step: best.as_ref().map(|b| b.0),
        best_valid_bleu: best.as_ref().map(|b| b.1.bleu),
        best_valid_ce: best.as_ref().map(|b| b.1.ce),
        final_valid: last_valid,
        src_vocab_size: src_vocab.len(),
        tgt_vocab_size: tgt_vocab.len(),
        parameters: model.params.num_scalars(),
        train_pairs: train.len(),
    };
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write(&run.summary(), json.as_bytes())?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        RunConfig::from_toml(
            "[model]\nn_layers = 2\nd_model = 16\nn_heads = 2\nd_ffn = 32\nmax_len = 16\n\
             [training]\nbatch_tokens = 64\nmax_steps = 4\nlog_every = 1\neval_every = 2\ncheckpoint_every = 2\n\
             [data.synthetic]\ntask = \"copy\"\ntrain_size = 60\nvalid_size = 8\ntest_size = 8\nvocab_size = 12\nmin_len = 2\nmax_len = 6\n",
        )
        .unwrap()
    }

    #[test]
    fn schedule_skip_matches_stepping() {
        let cfg = tiny();
        let splits = load_splits(&cfg).unwrap();
        let v = Vocabulary::build(&splits.train.source_lines(), 1, 100).unwrap();
        let w = Vocabulary::build(&splits.train.target_lines(), 1, 100).unwrap();
        let enc = splits.train.encode(&v, &w);
        let mut a = Schedule::new(&enc, &cfg).unwrap();
        for _ in 0..23 {
            a.next_batch().unwrap();
        }
        let mut b = Schedule::new(&enc, &cfg).unwrap();
        b.skip(23).unwrap();
        assert_eq!(a.next_batch().unwrap().0, b.next_batch().unwrap().0);
        assert!(a.epoch() > 0);
    }

    #[test]
    fn zero_steps_leaves_initial_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny();
        cfg.training.max_steps = 0;
        train_loop(&cfg, dir.path(), false).unwrap();
        let run = RunDir::new(dir.path());
        let steps: Vec<u64> = run.list_checkpoints().unwrap().into_iter().map(|c| c.0).collect();
        assert_eq!(steps, vec![0]);
    }

    #[test]
    fn existing_run_needs_resume() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny();
        cfg.training.max_steps = 0;
        train_loop(&cfg, dir.path(), false).unwrap();
        assert!(train_loop(&cfg, dir.path(), false).is_err());
        cfg.training.lambda = 0.3;
        let err = train_loop(&cfg, dir.path(), true).unwrap_err().to_string();
        assert!(err.contains("resume conflict"), "{err}");
    }
}
