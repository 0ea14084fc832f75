use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use seer_core::analysis::probe::ProbeTrainConfig;
use seer_core::data::{SyntheticSpec, Task};
use seer_core::inference::{DecodeConfig, DecodeMode, DecoderKind};
use seer_core::runtime::{self, exit_code};
use seer_core::{Error, Result};

/// Train and analyse seer-decoder translation models.
#[derive(Parser)]
#[command(name = "seer", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Decoder {
    Conventional,
    Seer,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train from a TOML config into a run directory.
    Train {
        config: PathBuf,
        /// Defaults to io.run_dir, else the config's file stem, under $SEER_RUNS_DIR.
        #[arg(long)]
        run_dir: Option<PathBuf>,
        /// Continue from the newest checkpoint of an existing run.
        #[arg(long)]
        resume: bool,
    },
    /// Decode a file line by line with the conventional decoder.
    Translate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, conflicts_with = "beam")]
        greedy: bool,
        #[arg(long, default_value_t = 4)]
        beam: usize,
        #[arg(long, default_value_t = 0.6)]
        length_penalty: f64,
        #[arg(long, default_value_t = 1.5)]
        max_len_factor: f64,
        #[arg(long, default_value_t = 5)]
        max_len_margin: usize,
    },
    /// Corpus BLEU, and length-binned BLEU when sources are given.
    Evaluate {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        src: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        bins: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-position argmax of either decoder with gold context.
    ScoreTeacherForced {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        decoder: Decoder,
        #[arg(long, value_enum, default_value = "on")]
        cross_attention: Switch,
        #[arg(long, requires = "reference")]
        src: Option<PathBuf>,
        #[arg(long = "ref", requires = "src")]
        reference: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and score the bag-of-future-words probe.
    ProbeBow {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 2000)]
        train_pairs: usize,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-2)]
        lr: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, requires = "reference")]
        src: Option<PathBuf>,
        #[arg(long = "ref", requires = "src")]
        reference: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cosine similarity of the fused representation to its two parts.
    AnalyzeFusion {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, requires = "reference")]
        src: Option<PathBuf>,
        #[arg(long = "ref", requires = "src")]
        reference: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic parallel corpus as <out>.src and <out>.tgt.
    GenData {
        #[arg(long, default_value = "lexicon")]
        task: Task,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 50)]
        vocab_size: usize,
        #[arg(long, default_value_t = 5)]
        min_len: usize,
        #[arg(long, default_value_t = 15)]
        max_len: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Sentence stream; sets sharing a seed share one lexicon.
        #[arg(long, default_value = "train")]
        stream: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every kernel and of a full training step.
    GradCheck {
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train {
            config,
            run_dir,
            resume,
        } => {
            let (dir, s) = runtime::cmd_train(&config, run_dir.as_deref(), resume)?;
            println!("run directory: {}", dir.display());
            println!("final step: {}", s.final_step);
            if let (Some(step), Some(bleu)) = (s.best_step, s.best_valid_bleu) {
                println!("best valid BLEU {bleu:.2} at step {step}");
            }
        }
        Cmd::Translate {
            checkpoint,
            input,
            output,
            greedy,
            beam,
            length_penalty,
            max_len_factor,
            max_len_margin,
        } => {
            if beam == 0 {
                return Err(Error::InvalidArgument("--beam must be at least 1".into()));
            }
            let cfg = DecodeConfig {
                mode: if greedy { DecodeMode::Greedy } else { DecodeMode::Beam },
                beam_size: if greedy { 1 } else { beam },
                max_len_factor,
                max_len_margin,
                length_penalty,
            };
            let n = runtime::cmd_translate(&checkpoint, &input, &output, &cfg)?;
            eprintln!("translated {n} lines");
        }
        Cmd::Evaluate {
            hyp,
            reference,
            src,
            bins,
            out,
        } => {
            let e = runtime::cmd_evaluate(&hyp, &reference, src.as_deref(), bins, out.as_deref())?;
            println!("BLEU {:.2}", e.bleu.score);
            for b in e.bins.iter().flatten() {
                println!(
                    "bin {} (src len {}-{}, n={}): BLEU {:.2}",
                    b.bin, b.min_src_len, b.max_src_len, b.n, b.bleu.score
                );
            }
        }
        Cmd::ScoreTeacherForced {
            checkpoint,
            decoder,
            cross_attention,
            src,
            reference,
            out,
        } => {
            let kind = match decoder {
                Decoder::Conventional => DecoderKind::Conventional,
                Decoder::Seer => DecoderKind::Seer,
            };
            let s = runtime::cmd_score_teacher_forced(
                &checkpoint,
                kind,
                matches!(cross_attention, Switch::On),
                src.as_deref(),
                reference.as_deref(),
                out.as_deref(),
            )?;
            println!("accuracy {:.4} ({}/{}), BLEU {:.2}", s.accuracy, s.correct, s.tokens, s.bleu);
        }
        Cmd::ProbeBow {
            checkpoint,
            train_pairs,
            epochs,
            lr,
            seed,
            src,
            reference,
            out,
        } => {
            let cfg = ProbeTrainConfig {
                epochs,
                lr,
                seed,
                ..Default::default()
            };
            let r = runtime::cmd_probe_bow(
                &checkpoint,
                train_pairs,
                src.as_deref(),
                reference.as_deref(),
                out.as_deref(),
                &cfg,
            )?;
            for (name, s) in [("trained", &r.trained), ("random", &r.random)] {
                println!(
                    "{name}: accuracy {:.4} recall {:.4} F1 {:.4}",
                    s.accuracy, s.recall, s.f1
                );
            }
        }
        Cmd::AnalyzeFusion {
            checkpoint,
            src,
            reference,
            out,
        } => {
            let rows = runtime::cmd_analyze_fusion(
                &checkpoint,
                src.as_deref(),
                reference.as_deref(),
                out.as_deref(),
            )?;
            print!("{}", seer_core::analysis::fusion::to_csv(&rows));
        }
        Cmd::GenData {
            task,
            n,
            vocab_size,
            min_len,
            max_len,
            seed,
            stream,
            out,
        } => {
            let spec = SyntheticSpec {
                task,
                n,
                vocab_size,
                min_len,
                max_len,
                seed,
                stream,
            };
            let [s, t] = runtime::cmd_gen_data(&spec, &out)?;
            println!("{}\n{}", s.display(), t.display());
        }
        Cmd::GradCheck { tol } => {
            let mut failed = None;
            for (name, rep) in runtime::grad_check_suite()? {
                let ok = rep.max_rel_error <= tol;
                println!(
                    "{} {name}: max rel error {:.2e} over {} coordinates",
                    if ok { "ok  " } else { "FAIL" },
                    rep.max_rel_error,
                    rep.checked
                );
                if !ok && failed.is_none() {
                    failed = Some(rep);
                }
            }
            if let Some(rep) = failed {
                rep.ensure(tol)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
