//! `labes gradcheck`: finite-difference check of the training objectives.

use anyhow::Result;
use labes::training::gradcheck::{check_objectives, tiny_fixture};

use crate::fail;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Precision {
    Double,
    Single,
}

impl Precision {
    pub fn threshold(self) -> f64 {
        match self {
            Precision::Double => 1e-5,
            Precision::Single => 1e-2,
        }
    }
}

#[derive(Debug, clap::Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 8)]
    pub hidden: usize,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-3)]
    pub epsilon: f64,
    /// Selects the pass threshold.
    #[arg(long, value_enum, default_value_t = Precision::Double)]
    pub precision: Precision,
    /// Explicit threshold, overriding the precision default.
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Testing hook: add this offset to the first parameter's analytic gradient.
    #[arg(long, hide = true)]
    pub corrupt: Option<f64>,
    /// Print results as JSON.
    #[arg(long)]
    pub json: bool,
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<()> {
    if args.hidden == 0 || !(args.epsilon > 0.0) {
        return Err(fail::config("--hidden and --epsilon must be positive"));
    }
    let threshold = args.threshold.unwrap_or_else(|| args.precision.threshold());
    let (model, db, dialogs) = tiny_fixture(args.hidden, args.seed)?;
    let checks = check_objectives(&model, &dialogs, &db, args.epsilon, args.corrupt)?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&checks)?);
    } else {
        println!("{} parameters, epsilon {:e}, threshold {:e}", model.params.num_scalars(), args.epsilon, threshold);
        for c in &checks {
            let verdict = if c.max_rel_error < threshold { "pass" } else { "FAIL" };
            println!("{:<13} max rel error {:.3e} over {} entries  {verdict}", c.objective, c.max_rel_error, c.checked);
        }
    }
    let failed: Vec<String> = checks
        .iter()
        .filter(|c| !(c.max_rel_error < threshold))
        .map(|c| format!("{} ({:.3e}, worst {})", c.objective, c.max_rel_error, c.worst_param.as_deref().unwrap_or("?")))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(fail::numerical(format!("gradient check failed: {}", failed.join("; "))))
    }
}
