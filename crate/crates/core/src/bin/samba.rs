//! Command-line surface for the whole pipeline: corpus synthesis, BPE
//! training, model training, transcription, evaluation, and the scan
//! scaling benchmark.
//!
//! Exit codes: 0 on success, 2 on usage errors, 1 on runtime errors (with
//! a message on stderr).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use samba_asr::audio::{features_for_file, FrontendConfig};
use samba_asr::bench::{bench_scan, rows_to_tsv};
use samba_asr::error::{Error, Result};
use samba_asr::eval::{evaluate, report_to_csv};
use samba_asr::manifest::parse_manifest;
use samba_asr::model::{greedy_decode, init_params, ModelConfig};
use samba_asr::synth::{synth_corpus, SynthSpec};
use samba_asr::tokenizer::{train_bpe, Vocab};
use samba_asr::training::{load_checkpoint, load_examples, train_loop, TrainConfig};

#[derive(Parser)]
#[command(name = "samba", version, about = "Selective state-space speech recognition at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic tone corpus with train/val/test manifests.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Number of utterances.
        #[arg(long, default_value_t = 32)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Gaussian noise amplitude added to the tones.
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
    },
    /// Train a byte-level BPE vocabulary from manifest transcripts.
    BpeTrain {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 516)]
        vocab_size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes metrics.csv, last.ckpt and best.ckpt.
    Train {
        /// JSON file with optional "model", "train", "frontend" sections.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        val_manifest: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Greedy-transcribe one WAV file.
    Transcribe {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        audio: PathBuf,
    },
    /// Pooled WER over a manifest; writes a per-utterance report CSV.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Report CSV destination.
        #[arg(long, default_value = "eval_report.csv")]
        report: PathBuf,
    },
    /// Time the parallel scan across sequence lengths and fit the
    /// growth exponent.
    Bench {
        /// Comma-separated, strictly increasing lengths.
        #[arg(long, value_delimiter = ',', default_value = "256,512,1024,2048,4096")]
        lengths: Vec<usize>,
        #[arg(long, default_value_t = 64)]
        d_model: usize,
        #[arg(long, default_value_t = 16)]
        d_state: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
    },
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default)]
struct FileConfig {
    model: ModelConfigOpt,
    train: TrainConfig,
    frontend: FrontendConfig,
}

// ModelConfig with defaults, kept separate so the JSON file can omit any
// field.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct ModelConfigOpt {
    #[serde(flatten)]
    inner: ModelConfig,
}

impl Default for ModelConfigOpt {
    fn default() -> Self {
        Self {
            inner: ModelConfig::default(),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { out, n, seed, noise } => {
            let spec = SynthSpec {
                n_utterances: n,
                seed,
                noise_amplitude: noise,
                ..SynthSpec::default()
            };
            let outputs = synth_corpus(&spec, &out)?;
            println!(
                "wrote {} train / {} val / {} test utterances under {}",
                outputs.n_train,
                outputs.n_val,
                outputs.n_test,
                out.display()
            );
            Ok(())
        }
        Command::BpeTrain {
            manifest,
            vocab_size,
            out,
        } => {
            let entries = parse_manifest(&manifest)?;
            let texts: Vec<String> = entries.into_iter().map(|e| e.text).collect();
            let vocab = train_bpe(&texts, vocab_size)?;
            vocab.save(&out)?;
            println!(
                "vocab: 256 bytes + {} merges + 4 specials = {} ids -> {}",
                vocab.n_merges(),
                vocab.size(),
                out.display()
            );
            Ok(())
        }
        Command::Train {
            config,
            manifest,
            val_manifest,
            vocab,
            out,
        } => {
            let mut cfg: FileConfig = match config {
                Some(path) => {
                    let text =
                        std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                    serde_json::from_str(&text)
                        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
                }
                None => FileConfig::default(),
            };
            let vocab = Vocab::load(&vocab)?;
            if vocab.size() > cfg.model.inner.vocab_size {
                return Err(Error::Config(format!(
                    "model vocab_size {} smaller than trained vocab {}",
                    cfg.model.inner.vocab_size,
                    vocab.size()
                )));
            }
            cfg.model.inner.n_mels = cfg.frontend.n_mels;

            let train_entries = parse_manifest(&manifest)?;
            let val_entries = parse_manifest(&val_manifest)?;
            let manifest_dir = manifest.parent().unwrap_or(std::path::Path::new("."));
            let val_dir = val_manifest.parent().unwrap_or(std::path::Path::new("."));
            eprintln!("extracting features for {} train / {} val utterances...", train_entries.len(), val_entries.len());
            let train_set = load_examples(
                &train_entries,
                manifest_dir,
                &cfg.frontend,
                &vocab,
                cfg.model.inner.max_text_len,
            )?;
            let val_set = load_examples(
                &val_entries,
                val_dir,
                &cfg.frontend,
                &vocab,
                cfg.model.inner.max_text_len,
            )?;

            let mut store = init_params(&cfg.model.inner, cfg.train.seed)?;
            let mut progress = |epoch: usize, step: usize, loss: f64| {
                if epoch % 25 == 0 {
                    eprintln!("epoch {epoch} step {step} train_loss {loss:.4}");
                }
            };
            let summary = train_loop(
                &mut store,
                &cfg.model.inner,
                &cfg.train,
                &cfg.frontend,
                &vocab,
                &train_set,
                &val_set,
                &out,
                Some(&mut progress),
            )?;
            println!(
                "trained {} steps over {} epochs; loss {:.4} -> {:.4}; best val WER {:.4}; metrics at {}",
                summary.steps,
                summary.epochs,
                summary.first_train_loss,
                summary.final_train_loss,
                summary.best_val_wer,
                summary.metrics_path.display()
            );
            Ok(())
        }
        Command::Transcribe { ckpt, vocab, audio } => {
            let checkpoint = load_checkpoint(&ckpt)?;
            let vocab = Vocab::load(&vocab)?;
            if vocab.hash() != checkpoint.vocab_hash {
                return Err(Error::Vocab(
                    "vocab file does not match the checkpoint's vocab hash".into(),
                ));
            }
            let mel = features_for_file(&audio, &checkpoint.frontend)?;
            let ids = greedy_decode(
                &checkpoint.store,
                &checkpoint.model_cfg,
                &vocab,
                &mel,
                checkpoint.model_cfg.max_text_len,
            )?;
            println!("{}", vocab.decode_string(&ids)?);
            Ok(())
        }
        Command::Eval {
            ckpt,
            vocab,
            manifest,
            report,
        } => {
            let checkpoint = load_checkpoint(&ckpt)?;
            let vocab = Vocab::load(&vocab)?;
            if vocab.hash() != checkpoint.vocab_hash {
                return Err(Error::Vocab(
                    "vocab file does not match the checkpoint's vocab hash".into(),
                ));
            }
            let entries = parse_manifest(&manifest)?;
            let dir = manifest.parent().unwrap_or(std::path::Path::new("."));
            let result = evaluate(
                &entries,
                dir,
                &checkpoint.store,
                &checkpoint.model_cfg,
                &vocab,
                &checkpoint.frontend,
            )?;
            std::fs::write(&report, report_to_csv(&result))
                .map_err(|e| Error::io(&report, e))?;
            println!(
                "pooled WER {:.6} ({} edits / {} reference words), report at {}",
                result.pooled_wer,
                result.total_edits,
                result.total_ref_words,
                report.display()
            );
            if !result.skipped.is_empty() {
                for s in &result.skipped {
                    eprintln!("skipped: {s}");
                }
                return Err(Error::Config(format!(
                    "{} audio file(s) missing",
                    result.skipped.len()
                )));
            }
            Ok(())
        }
        Command::Bench {
            lengths,
            d_model,
            d_state,
            repeats,
        } => {
            let rows = bench_scan(&lengths, d_model, d_state, repeats)?;
            print!("{}", rows_to_tsv(&rows));
            Ok(())
        }
    }
}
