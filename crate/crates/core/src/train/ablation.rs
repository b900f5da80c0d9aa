//! The eight contiguous-memory / local-residual / global-fusion variants
//! trained under one budget.

use std::fmt::Write as _;
use std::path::Path;

use super::{PairDataset, Telemetry, TrainConfig, Trainer};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, RdnModel};

/// `(cm, lrl, gff)` in the published table's column order.
pub const TOGGLE_ORDER: [(bool, bool, bool); 8] = [
    (false, false, false),
    (true, false, false),
    (false, true, false),
    (false, false, true),
    (true, true, false),
    (true, false, true),
    (false, true, true),
    (true, true, true),
];

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRun {
    pub config: ModelConfig,
    pub records: Vec<Telemetry>,
    pub final_val_psnr: Option<f64>,
    /// Set when training aborted on a numerical failure.
    pub failure: Option<String>,
}

impl AblationRun {
    pub fn tag(&self) -> String {
        self.config.toggle_tag()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub runs: Vec<AblationRun>,
}

impl AblationReport {
    pub fn run(&self, cm: bool, lrl: bool, gff: bool) -> Option<&AblationRun> {
        self.runs
            .iter()
            .find(|r| (r.config.cm, r.config.lrl, r.config.gff) == (cm, lrl, gff))
    }

    /// Components as rows, variants as columns, final validation PSNR last.
    pub fn to_table(&self) -> String {
        let mark = |on: bool| if on { "yes" } else { "no" };
        let mut out = String::new();
        let _ = write!(out, "{:<6}", "");
        for i in 1..=self.runs.len() {
            let _ = write!(out, "{i:>8}");
        }
        out.push('\n');
        type Pick = fn(&ModelConfig) -> bool;
        let rows: [(&str, Pick); 3] = [("CM", |c| c.cm), ("LRL", |c| c.lrl), ("GFF", |c| c.gff)];
        for (label, pick) in rows {
            let _ = write!(out, "{label:<6}");
            for r in &self.runs {
                let _ = write!(out, "{:>8}", mark(pick(&r.config)));
            }
            out.push('\n');
        }
        let _ = write!(out, "{:<6}", "PSNR");
        for r in &self.runs {
            let cell = match (r.final_val_psnr, &r.failure) {
                (_, Some(_)) => "failed".to_string(),
                (Some(p), None) => format!("{p:.2}"),
                (None, None) => "-".to_string(),
            };
            let _ = write!(out, "{cell:>8}");
        }
        out.push('\n');
        out
    }

    /// Every telemetry record prefixed with its variant tag.
    pub fn to_curves(&self) -> String {
        let mut out = String::new();
        for r in &self.runs {
            for rec in &r.records {
                let _ = writeln!(out, "{} {rec}", r.tag());
            }
        }
        out
    }
}

/// Trains every toggle variant of `base` from the same seed and data.
///
/// Numerical failures are recorded on the affected row and the sweep
/// continues; any other error aborts it. With a run directory each variant
/// writes its artifacts into a subdirectory named by its tag.
pub fn run_ablation(
    base: ModelConfig,
    cfg: &TrainConfig,
    model_seed: u64,
    data: &PairDataset,
    val: &PairDataset,
    run_dir: Option<&Path>,
    sink: &mut dyn FnMut(&ModelConfig, &Telemetry),
) -> Result<AblationReport> {
    let mut runs = Vec::with_capacity(TOGGLE_ORDER.len());
    for (cm, lrl, gff) in TOGGLE_ORDER {
        let config = base.with_toggles(cm, lrl, gff);
        let mut trainer = Trainer::new(RdnModel::build(config, model_seed)?, cfg.clone())?;
        let dir = run_dir.map(|d| d.join(config.toggle_tag()));
        let outcome = trainer.run(data, Some(val), dir.as_deref(), None, &mut |rec| sink(&config, rec));
        let run = match outcome {
            Ok(report) => AblationRun {
                config,
                records: report.records,
                final_val_psnr: report.final_val_psnr,
                failure: None,
            },
            Err(e @ (Error::NonFiniteLoss { .. } | Error::NonFiniteGradient(_))) => AblationRun {
                config,
                records: Vec::new(),
                final_val_psnr: None,
                failure: Some(e.to_string()),
            },
            Err(e) => return Err(e),
        };
        runs.push(run);
    }
    Ok(AblationReport { runs })
}
