//! `labes eval`: end-to-end decoding of a split and metric report.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use labes::eval::evaluate;
use labes::model::{DecodeMode, Labes};
use serde::{Deserialize, Serialize};

use crate::data::{absolute, Dataset};
use crate::fail::{self, Kind};
use crate::manifest::{self, RunManifest, Status};

pub const REPORT: &str = "report.json";
pub const TABLE: &str = "report.txt";
pub const DECODES: &str = "decodes.jsonl";

#[derive(Debug, clap::Args)]
pub struct EvalArgs {
    #[arg(long, required_unless_present = "manifest")]
    pub checkpoint: Option<PathBuf>,
    /// Dataset directory (falls back to LABES_DATA).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Beam width for response decoding; 0 keeps the checkpoint's setting.
    #[arg(long, default_value_t = 0)]
    pub beam: usize,
    /// Directory for report.json, report.txt, decodes.jsonl and the manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Re-run the evaluation recorded in a manifest.
    #[arg(long, conflicts_with_all = ["checkpoint", "data"])]
    pub manifest: Option<PathBuf>,
    /// Append one row per dialog to the printed table.
    #[arg(long)]
    pub per_dialog: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Recorded {
    checkpoint: PathBuf,
    data_dir: PathBuf,
    split: String,
    decode: DecodeMode,
}

pub fn load_model(path: &Path) -> Result<Labes> {
    Labes::load(path).map_err(|e| fail::tag(Kind::Data, anyhow::Error::from(e).context(format!("loading {}", path.display()))))
}

/// Fail with the offending slots when the dataset schema differs from the model's.
pub fn check_schema(model: &Labes, ds: &Dataset) -> Result<()> {
    let bad = model.schema_mismatch(&ds.schema);
    if bad.is_empty() {
        Ok(())
    } else {
        Err(labes::Error::SchemaMismatch(bad).into())
    }
}

pub fn data_dir(flag: Option<&Path>) -> Result<PathBuf> {
    flag.map(Path::to_path_buf)
        .or_else(|| std::env::var_os(crate::config::DATA_ENV).map(PathBuf::from))
        .ok_or_else(|| fail::config(format!("no data directory: pass --data or set {}", crate::config::DATA_ENV)))
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let rec = match &args.manifest {
        Some(p) => {
            let m = RunManifest::load(p)?;
            if m.command != "eval" {
                return Err(fail::config(format!("manifest is for `{}`, not `eval`", m.command)));
            }
            m.verify_inputs()?;
            serde_json::from_value(m.config).map_err(|e| fail::config(format!("manifest config: {e}")))?
        }
        None => {
            let checkpoint = absolute(args.checkpoint.as_deref().expect("clap requires --checkpoint"));
            let model = load_model(&checkpoint)?;
            let decode = match args.beam {
                0 => model.config.decode,
                w => DecodeMode::Beam { width: w },
            };
            Recorded {
                checkpoint,
                data_dir: absolute(&data_dir(args.data.as_deref())?),
                split: args.split.clone(),
                decode,
            }
        }
    };
    let mut model = load_model(&rec.checkpoint)?;
    model.config.decode = rec.decode;
    let ds = Dataset::open(&rec.data_dir)?;
    check_schema(&model, &ds)?;
    let corpus = ds.split(&rec.split)?;

    let mut inputs = ds.inputs(&[&rec.split]);
    inputs.push(rec.checkpoint.clone());
    let mut m = RunManifest::start("eval", serde_json::to_value(&rec)?, None, &inputs)?;
    if let Some(out) = &args.out {
        std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        let out = absolute(out);
        let ckpt_dir = rec.checkpoint.parent().map(absolute);
        if out == ds.dir || Some(&out) == ckpt_dir.as_ref() {
            return Err(fail::config("--out must differ from the data and checkpoint directories"));
        }
    }

    let ev = evaluate(&model, &corpus, &ds.db)?;
    print!("{}", ev.report.to_table(args.per_dialog));
    if let Some(out) = &args.out {
        let files = [out.join(REPORT), out.join(TABLE), out.join(DECODES)];
        manifest::write_atomic(&files[0], ev.report.to_json().as_bytes())?;
        manifest::write_atomic(&files[1], ev.report.to_table(true).as_bytes())?;
        let mut lines = String::new();
        for r in &ev.records {
            lines.push_str(&serde_json::to_string(r)?);
            lines.push('\n');
        }
        manifest::write_atomic(&files[2], lines.as_bytes())?;
        m.finish(Status::Completed, &files, out)?;
    }
    Ok(())
}
