//! `labes train`: supervised, semi-supervised and self-training runs.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use labes::corpus::{DialogCorpus, Vocabulary};
use labes::model::Labes;
use labes::training::{EpochLog, Regime, TrainData, Trainer};
use serde::{Deserialize, Serialize};

use crate::config::{Overrides, RunConfig};
use crate::data::Dataset;
use crate::fail::{self, Kind};
use crate::manifest::{self, RunManifest, Status};

pub const STATE: &str = "state.ckpt";
pub const BEST: &str = "best.ckpt";
pub const LAST: &str = "last.ckpt";
pub const METRICS: &str = "metrics.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Sup,
    Semi,
    #[value(name = "self")]
    #[serde(rename = "self")]
    SelfTrain,
}

impl Mode {
    fn regime(self) -> Regime {
        match self {
            Mode::Sup => Regime::Sup,
            Mode::Semi => Regime::Semi,
            Mode::SelfTrain => Regime::SelfTrain,
        }
    }
}

#[derive(Debug, clap::Args)]
pub struct TrainArgs {
    #[arg(long, value_enum, required_unless_present_any = ["resume", "manifest"])]
    pub mode: Option<Mode>,
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory (falls back to data.dir, then LABES_DATA).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory for checkpoints, logs and the manifest.
    #[arg(long, required_unless_present = "resume")]
    pub out: Option<PathBuf>,
    /// Continue an interrupted run in this directory from its manifest and state.
    #[arg(long, conflicts_with_all = ["mode", "config", "data", "out", "manifest"])]
    pub resume: Option<PathBuf>,
    /// Re-run the command recorded in a manifest into `--out`.
    #[arg(long, conflicts_with_all = ["mode", "config", "data"])]
    pub manifest: Option<PathBuf>,
    /// Stop after this many epochs in this invocation (the run stays resumable).
    #[arg(long)]
    pub stop_after_epochs: Option<usize>,
    #[command(flatten)]
    pub overrides: Overrides,
}

/// Everything a training run needs to be reproduced.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct Recorded {
    mode: Mode,
    data_dir: PathBuf,
    run: RunConfig,
}

fn recorded(m: &RunManifest) -> Result<Recorded> {
    if m.command != "train" {
        return Err(fail::config(format!("manifest is for `{}`, not `train`", m.command)));
    }
    serde_json::from_value(m.config.clone()).map_err(|e| fail::config(format!("manifest config: {e}")))
}

struct Splits {
    labeled: DialogCorpus,
    unlabeled: DialogCorpus,
    dev: DialogCorpus,
    vocab: Vocabulary,
}

fn load_splits(ds: &Dataset, rec: &Recorded) -> Result<Splits> {
    let train = ds.split(&rec.run.data.train_split)?;
    let dev = ds.split(&rec.run.data.dev_split)?;
    let vocab = Vocabulary::build(&train.dialogs, &ds.schema, rec.run.data.vocab_size);
    let labeled_only = DialogCorpus::new(train.dialogs.iter().filter(|d| d.is_labeled()).cloned().collect());
    let (labeled, mut unlabeled) = labeled_only.split_labels(rec.run.train.label_fraction, rec.run.train.seed);
    unlabeled
        .dialogs
        .extend(train.dialogs.iter().filter(|d| !d.is_labeled()).cloned());
    if rec.mode == Mode::Sup {
        unlabeled = DialogCorpus::default();
    }
    if labeled.is_empty() {
        return Err(fail::data("no labeled training dialogs"));
    }
    Ok(Splits {
        labeled,
        unlabeled,
        dev,
        vocab,
    })
}

fn write_metrics(out: &Path, log: &[EpochLog]) -> Result<()> {
    let mut s = String::new();
    for l in log {
        s.push_str(&serde_json::to_string(l)?);
        s.push('\n');
    }
    manifest::write_atomic(&out.join(METRICS), s.as_bytes())
}

fn save_state(t: &Trainer, out: &Path) -> Result<()> {
    manifest::write_atomic(&out.join(STATE), &t.to_bytes())
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let (out, rec, mut manifest, resuming) = if let Some(dir) = &args.resume {
        let m = RunManifest::load(&dir.join(manifest::FILE))?;
        let rec = recorded(&m)?;
        if m.status == Status::Completed {
            println!("run in {} already completed", dir.display());
            return Ok(());
        }
        m.verify_inputs()?;
        (dir.clone(), rec, m, true)
    } else {
        let out = args.out.clone().expect("clap requires --out");
        let rec = match &args.manifest {
            Some(p) => recorded(&RunManifest::load(p)?)?,
            None => {
                let run = RunConfig::resolve(args.config.as_deref(), &args.overrides)?;
                let data_dir = crate::data::absolute(&run.data_dir(args.data.as_deref())?);
                Recorded {
                    mode: args.mode.expect("clap requires --mode"),
                    data_dir,
                    run,
                }
            }
        };
        std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        let ds = Dataset::open(&rec.data_dir)?;
        let inputs = ds.inputs(&[&rec.run.data.train_split, &rec.run.data.dev_split]);
        let m = RunManifest::start("train", serde_json::to_value(&rec)?, Some(rec.run.train.seed), &inputs)?;
        (out, rec, m, false)
    };

    let ds = Dataset::open(&rec.data_dir)?;
    let sp = load_splits(&ds, &rec)?;
    let data = TrainData {
        labeled: &sp.labeled,
        unlabeled: &sp.unlabeled,
        dev: &sp.dev,
        db: &ds.db,
    };
    let mut trainer = if resuming {
        let state = out.join(STATE);
        if state.is_file() {
            Trainer::load(&state, data).map_err(|e| fail::tag(Kind::Data, e.into()))?
        } else {
            fresh(&rec, &sp, &ds.schema, data)?
        }
    } else {
        fresh(&rec, &sp, &ds.schema, data)?
    };
    manifest.status = Status::Running;
    manifest.write(&out)?;
    println!(
        "training {:?}: {} labeled, {} unlabeled, {} dev dialogs, {} params",
        rec.mode,
        sp.labeled.len(),
        sp.unlabeled.len(),
        sp.dev.len(),
        trainer.model.params.num_scalars()
    );

    let mut epochs = 0;
    loop {
        if args.stop_after_epochs.is_some_and(|n| epochs >= n) {
            save_state(&trainer, &out)?;
            let files = [out.join(STATE), out.join(METRICS)];
            manifest.finish(Status::Interrupted, &files, &out)?;
            println!("stopped after {epochs} epochs; resume with `labes train --resume {}`", out.display());
            return Ok(());
        }
        let step = trainer.run_epoch();
        let log = match step {
            Ok(Some(l)) => l,
            Ok(None) => break,
            Err(e) => {
                manifest.finish(Status::Failed, &[], &out)?;
                return Err(e.into());
            }
        };
        epochs += 1;
        println!(
            "{:?} epoch {:>3}  loss {:>9.4}  kl {:>7.4}  dev joint goal {:.4}  lr {:.2e}",
            log.phase, log.epoch, log.train_loss, log.kl, log.dev_joint_goal, log.lr
        );
        save_state(&trainer, &out)?;
        write_metrics(&out, &trainer.state.log)?;
    }
    save_state(&trainer, &out)?;
    write_metrics(&out, &trainer.state.log)?;
    manifest::write_atomic(&out.join(BEST), &trainer.best_model().to_bytes())?;
    manifest::write_atomic(&out.join(LAST), &trainer.model.to_bytes())?;
    let files: Vec<PathBuf> = [BEST, LAST, STATE, METRICS].iter().map(|f| out.join(f)).collect();
    manifest.finish(Status::Completed, &files, &out)?;
    if let Some(b) = trainer.state.schedule.best {
        println!("best dev joint goal {b:.4}");
    }
    println!("wrote {}", out.join(BEST).display());
    Ok(())
}

fn fresh<'a>(rec: &Recorded, sp: &Splits, schema: &labes::corpus::Schema, data: TrainData<'a>) -> Result<Trainer<'a>> {
    let mut model = Labes::new(rec.run.model.clone(), schema.clone(), sp.vocab.clone(), rec.run.train.seed)
        .map_err(|e| fail::tag(Kind::Config, e.into()))?;
    if let Some(g) = &rec.run.data.glove {
        let hits = model.apply_glove(g).map_err(|e| fail::tag(Kind::Data, e.into()))?;
        println!("glove: initialized {hits} embedding rows");
    }
    Trainer::new(model, rec.run.train.clone(), rec.mode.regime(), data).map_err(|e| fail::tag(Kind::Config, e.into()))
}
