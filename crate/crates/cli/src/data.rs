//! Dataset directories and the `prepare` / `synth` commands.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use labes::corpus::{adapters, load_corpus, DialogCorpus, Schema};
use labes::kb::EntityDb;
use labes::synth::{self, SynthSpec};

use crate::fail::{self, Kind};
use crate::manifest::{RunManifest, Status};

pub const SCHEMA: &str = "schema.json";
pub const DB: &str = "db.json";

/// A normalized dataset directory: schema.json, db.json and `<split>.json`.
pub struct Dataset {
    pub dir: PathBuf,
    pub schema: Schema,
    pub db: EntityDb,
}

pub fn absolute(p: &Path) -> PathBuf {
    p.canonicalize().unwrap_or_else(|_| p.to_path_buf())
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Dataset> {
        if !dir.is_dir() {
            return Err(fail::data(format!("data directory {} does not exist", dir.display())));
        }
        let schema = Schema::load(dir.join(SCHEMA)).map_err(|e| fail::tag(Kind::Data, e.into()))?;
        let db = EntityDb::load(dir.join(DB), &schema).map_err(|e| fail::tag(Kind::Data, e.into()))?;
        Ok(Dataset {
            dir: absolute(dir),
            schema,
            db,
        })
    }

    pub fn split_path(&self, name: &str) -> PathBuf {
        self.dir.join(format!("{name}.json"))
    }

    pub fn split(&self, name: &str) -> Result<DialogCorpus> {
        let path = self.split_path(name);
        if !path.is_file() {
            return Err(fail::data(format!("split `{name}` not found at {}", path.display())));
        }
        load_corpus(&path, &self.schema, Some(&self.db)).map_err(|e| fail::tag(Kind::Data, e.into()))
    }

    /// Schema, database and the named split files, for manifests.
    pub fn inputs(&self, splits: &[&str]) -> Vec<PathBuf> {
        let mut v = vec![self.dir.join(SCHEMA), self.dir.join(DB)];
        v.extend(splits.iter().map(|s| self.split_path(s)));
        v
    }
}

fn write_dataset(out: &Path, schema: &Schema, db: &EntityDb, splits: &[(String, DialogCorpus)]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut files = vec![out.join(SCHEMA), out.join(DB)];
    schema.save(&files[0])?;
    db.save(&files[1])?;
    for (name, c) in splits {
        let p = out.join(format!("{name}.json"));
        c.save(&p, schema)?;
        files.push(p);
    }
    Ok(files)
}

fn print_stats(schema: &Schema, splits: &[(String, DialogCorpus)]) {
    let all = DialogCorpus::new(splits.iter().flat_map(|(_, c)| c.dialogs.iter().cloned()).collect());
    println!("{}", all.stats(schema));
    for (name, c) in splits {
        println!("{name}: {} dialogs, {} turns", c.len(), c.num_turns());
    }
}

#[derive(Debug, clap::Subcommand)]
pub enum Source {
    /// CamRest676 dialogs and restaurant database.
    Camrest {
        #[arg(long)]
        dialogs: PathBuf,
        #[arg(long)]
        db: PathBuf,
    },
    /// Stanford In-Car train/dev/test files.
    Incar {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        dev: PathBuf,
        #[arg(long)]
        test: PathBuf,
    },
    /// MultiWOZ 2.1 data.json, database directory and split lists.
    Multiwoz {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        db_dir: PathBuf,
        #[arg(long)]
        dev_list: PathBuf,
        #[arg(long)]
        test_list: PathBuf,
    },
    /// Synthetic corpus from a spec file.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, clap::Args)]
pub struct SynthArgs {
    /// TOML file with generator settings; missing keys take defaults.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub dialogs: Option<usize>,
    #[arg(long, default_value_t = 0.1)]
    pub dev_fraction: f64,
    #[arg(long, default_value_t = 0.1)]
    pub test_fraction: f64,
}

fn require(paths: &[&Path]) -> Result<()> {
    for p in paths {
        if !p.is_file() {
            return Err(fail::data(format!("source file {} not found", p.display())));
        }
    }
    Ok(())
}

pub fn cmd_prepare(source: &Source, out: &Path) -> Result<()> {
    let (prepared, inputs, config) = match source {
        Source::Synth(a) => return cmd_synth(a, out),
        Source::Camrest { dialogs, db } => {
            require(&[dialogs, db])?;
            let p = adapters::camrest676(dialogs, db);
            (p, vec![dialogs.clone(), db.clone()], "camrest")
        }
        Source::Incar { train, dev, test } => {
            require(&[train, dev, test])?;
            (adapters::incar(train, dev, test), vec![train.clone(), dev.clone(), test.clone()], "incar")
        }
        Source::Multiwoz { data, db_dir, dev_list, test_list } => {
            require(&[data, dev_list, test_list])?;
            if !db_dir.is_dir() {
                return Err(fail::data(format!("database directory {} not found", db_dir.display())));
            }
            (
                adapters::multiwoz21(data, db_dir, dev_list, test_list),
                vec![data.clone(), dev_list.clone(), test_list.clone()],
                "multiwoz",
            )
        }
    };
    let inputs: Vec<PathBuf> = inputs.iter().map(|p| absolute(p)).collect();
    let mut manifest = RunManifest::start("prepare", serde_json::json!({ "source": config }), None, &inputs)?;
    let prepared = prepared.map_err(|e| fail::tag(Kind::Data, e.into()))?;
    let files = write_dataset(out, &prepared.schema, &prepared.db, &prepared.splits)?;
    manifest.finish(Status::Completed, &files, out)?;
    print_stats(&prepared.schema, &prepared.splits);
    Ok(())
}

pub fn synth_spec(a: &SynthArgs) -> Result<SynthSpec> {
    let mut spec = match &a.spec {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).map_err(|e| fail::config(format!("{}: {e}", p.display())))?
        }
        None => SynthSpec::default(),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(n) = a.dialogs {
        spec.dialogs = n;
    }
    spec.validate().map_err(|e| fail::tag(Kind::Config, e.into()))?;
    Ok(spec)
}

pub fn cmd_synth(a: &SynthArgs, out: &Path) -> Result<()> {
    let spec = synth_spec(a)?;
    let inputs: Vec<PathBuf> = a.spec.iter().map(|p| absolute(p)).collect();
    let config = serde_json::json!({ "spec": spec, "dev_fraction": a.dev_fraction, "test_fraction": a.test_fraction });
    let mut manifest = RunManifest::start("synth", config, Some(spec.seed), &inputs)?;
    let data = synth::generate(&spec)?;
    let (train, dev, test) = data.split(a.dev_fraction, a.test_fraction);
    let splits = vec![("train".to_string(), train), ("dev".to_string(), dev), ("test".to_string(), test)];
    let files = write_dataset(out, &data.schema, &data.db, &splits)?;
    manifest.finish(Status::Completed, &files, out)?;
    print_stats(&data.schema, &splits);
    Ok(())
}
