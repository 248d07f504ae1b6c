//! The `pageforge` command line. JSON results go to standard output, logs
//! and diagnostics to standard error.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use pageforge_core::backbone::receptive_field_trace;
use pageforge_core::gradcheck::standard_suite;
use pageforge_core::pipeline::{Model, PipelineConfig, SetupKind};
use pageforge_core::synth::{GenConfig, Regime, Split};
use serde_json::json;

use crate::error::{Error, Result};
use crate::{checkpoint, config, dataset, eval};

#[derive(Parser, Debug)]
#[command(
    name = "pageforge",
    version,
    about = "Detect, read and tag words on document pages"
)]
pub struct Cli {
    /// Seed for generation, initialization and training order.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset.
    Gen {
        #[arg(long)]
        regime: Regime,
        #[arg(long)]
        out: PathBuf,
        /// Generator settings as JSON; flags override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        train_pages: Option<usize>,
        #[arg(long)]
        valid_pages: Option<usize>,
        #[arg(long)]
        test_pages: Option<usize>,
        /// Replace the dataset files of a non-empty directory.
        #[arg(long)]
        force: bool,
    },
    /// Train a model and write its checkpoint.
    Train {
        #[arg(long)]
        setup: SetupKind,
        #[arg(long)]
        data: PathBuf,
        /// Pipeline config JSON; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Continue the training state stored in this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many further epochs; the state is kept for `--resume`.
        #[arg(long)]
        max_epochs: Option<usize>,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Read one page image.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
    },
    /// Print the receptive field of one detection output.
    RfCalc {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Include the per-layer trace.
        #[arg(long)]
        trace: bool,
    },
    /// Check reverse-mode gradients against finite differences in 64-bit.
    Gradcheck,
    /// Recompute dataset statistics from the files.
    Stats {
        #[arg(long)]
        data: PathBuf,
    },
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{}", e.render());
                    0
                }
                _ => {
                    eprint!("{}", e.render());
                    1
                }
            };
        }
    };
    match execute(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn emit(out: &mut dyn Write, v: &serde_json::Value) -> Result<()> {
    let s = serde_json::to_string_pretty(v).expect("json value serializes");
    writeln!(out, "{s}").map_err(|e| Error::io("<stdout>", e))
}

fn execute(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::Gen {
            regime,
            out: root,
            config,
            train_pages,
            valid_pages,
            test_pages,
            force,
        } => {
            let mut cfg = match config {
                Some(p) => {
                    if !p.is_file() {
                        return Err(Error::Usage(format!(
                            "config file {} does not exist",
                            p.display()
                        )));
                    }
                    dataset::read_json(&p)?
                }
                None => GenConfig::new(regime, 0),
            };
            cfg.regime = regime;
            cfg.seed = seed.unwrap_or(cfg.seed);
            cfg.train_pages = train_pages.unwrap_or(cfg.train_pages);
            cfg.valid_pages = valid_pages.unwrap_or(cfg.valid_pages);
            cfg.test_pages = test_pages.unwrap_or(cfg.test_pages);
            log::info!(
                "generating {} pages into {}",
                cfg.train_pages + cfg.valid_pages + cfg.test_pages,
                root.display()
            );
            let stats = dataset::write_dataset(&root, &cfg, force)?;
            emit(out, &serde_json::to_value(&stats).expect("stats serialize"))
        }
        Command::Train {
            setup,
            data,
            config,
            out: ckpt,
            resume,
            max_epochs,
        } => train(
            setup,
            &data,
            config.as_deref(),
            &ckpt,
            resume.as_deref(),
            max_epochs,
            seed,
            out,
        ),
        Command::Eval { ckpt, data, split } => {
            let model = load_model(&ckpt)?;
            let pages = dataset::read_split(&data, split)?;
            let rep = eval::report(&model, split.name(), &pages)?;
            emit(out, &serde_json::to_value(&rep).expect("report serializes"))
        }
        Command::Predict { ckpt, image } => {
            let model = load_model(&ckpt)?;
            if !image.is_file() {
                return Err(Error::Usage(format!(
                    "image {} does not exist",
                    image.display()
                )));
            }
            let (h, w, px) = dataset::load_png(&image)?;
            let ink: Vec<f32> = px.iter().map(|&p| 1.0 - p as f32 / 255.0).collect();
            let words = model.predict_ink(&ink, h, w)?;
            emit(out, &json!({ "words": words }))
        }
        Command::RfCalc {
            config: path,
            trace,
        } => {
            let cfg = match path {
                Some(p) => config::load(&p)?,
                None => PipelineConfig::default(),
            };
            let layers = receptive_field_trace(&cfg.rf_layers())?;
            let last = layers
                .last()
                .ok_or_else(|| Error::Usage("the config lists no layers".into()))?;
            let mut v = json!({
                "receptive_field": last.r,
                "jump": last.j,
                "layers": layers.len(),
            });
            if trace {
                v["trace"] = serde_json::to_value(&layers).expect("layers serialize");
            }
            emit(out, &v)
        }
        Command::Gradcheck => {
            let cases = standard_suite(seed.unwrap_or(0))?;
            let ok = cases.iter().all(|c| c.passed());
            let v: Vec<_> = cases
                .iter()
                .map(|c| {
                    json!({
                        "name": c.name,
                        "max_rel_error": c.report.max_rel_error,
                        "tolerance": c.tolerance,
                        "checked": c.report.checked,
                        "passed": c.passed(),
                    })
                })
                .collect();
            emit(out, &json!({ "passed": ok, "cases": v }))?;
            if ok {
                Ok(())
            } else {
                Err(Error::Core(pageforge_core::Error::NonFinite(
                    "gradient check failed".into(),
                )))
            }
        }
        Command::Stats { data } => {
            let stats = dataset::compute_stats(&data)?;
            for (name, s) in &stats.splits {
                log::info!(
                    "{name:>5}: {} pages, {} words, {} OOV ({:.1}%), {:.1}% entities",
                    s.pages,
                    s.words,
                    s.oov_words,
                    s.oov_pct,
                    s.entity_pct
                );
            }
            emit(out, &serde_json::to_value(&stats).expect("stats serialize"))
        }
    }
}

fn load_model(path: &Path) -> Result<Model<f32>> {
    let (ck, _) = checkpoint::load(path)?;
    Ok(Model::from_checkpoint(&ck)?)
}

#[allow(clippy::too_many_arguments)]
fn train(
    setup: SetupKind,
    data: &Path,
    cfg_path: Option<&Path>,
    ckpt: &Path,
    resume: Option<&Path>,
    max_epochs: Option<usize>,
    seed: Option<u64>,
    out: &mut dyn Write,
) -> Result<()> {
    dataset::check_root(data)?;
    let (mut model, state) = match resume {
        Some(p) => {
            let (ck, state) = checkpoint::load(p)?;
            if state.is_none() {
                return Err(Error::Usage(format!(
                    "{} holds no training state",
                    p.display()
                )));
            }
            if ck.setup != setup {
                return Err(Error::Usage(format!(
                    "{} was trained as setup {}",
                    p.display(),
                    ck.setup.name()
                )));
            }
            (Model::from_checkpoint(&ck)?, state)
        }
        None => {
            let mut cfg = match cfg_path {
                Some(p) => config::load(p)?,
                None => PipelineConfig::default(),
            };
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            (Model::new(&cfg, setup)?, None)
        }
    };
    let train = dataset::read_split(data, Split::Train)?;
    let valid = dataset::read_split(data, Split::Valid)?;
    log::info!(
        "training setup {} on {} pages ({} validation)",
        setup.name(),
        train.len(),
        valid.len()
    );
    let mut log_epoch = |e: &pageforge_core::pipeline::EpochLog| {
        log::info!(
            "epoch {:4} step {:6} cls {:.4} reg {:.4} ctc {:.4} ner {:.4} | valid loss {:.4} ap {:.3}{}",
            e.epoch,
            e.steps,
            e.train.cls,
            e.train.reg,
            e.train.ctc,
            e.train.ner,
            e.valid_loss,
            e.valid_ap,
            if e.teacher_forcing { " (gt boxes)" } else { "" }
        );
    };
    match model.train_session(state, max_epochs, &train, &valid, &mut log_epoch) {
        Ok(st) => {
            checkpoint::save(ckpt, &model.checkpoint(), Some(&st))?;
            let r = &st.report;
            emit(
                out,
                &json!({
                    "setup": setup.name(),
                    "checkpoint": ckpt.display().to_string(),
                    "finished": st.finished,
                    "epochs": r.epochs,
                    "steps": r.steps,
                    "best_epoch": r.best_epoch,
                    "best_valid_loss": r.best_valid_loss,
                    "stopped_early": r.stopped_early,
                    "ctc_calls": r.ctc_calls,
                    "ctc_infeasible": r.ctc_infeasible,
                    "config_hash": config::hash(&model.config),
                }),
            )
        }
        Err(e @ pageforge_core::Error::Diverged { .. }) => {
            // parameters are those of the last finite step
            checkpoint::save(ckpt, &model.checkpoint(), None)?;
            log::error!("saved the last good parameters to {}", ckpt.display());
            Err(e.into())
        }
        Err(e) => Err(e.into()),
    }
}
