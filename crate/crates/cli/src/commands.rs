//! Subcommand implementations. Each returns a [`Failure`] carrying the
//! exit code class on error.

use std::fmt;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rdnsr::config::write_kv;
use rdnsr::degrade::{degradation_for, DegradationSpec};
use rdnsr::ensemble::self_ensemble;
use rdnsr::image::{list_pngs, Image};
use rdnsr::metrics::{evaluate_dataset, EvalProtocol};
use rdnsr::model::RdnModel;
use rdnsr::train::ablation::run_ablation;
use rdnsr::train::{Checkpoint, PairDataset, Trainer, LAST_CHECKPOINT};
use rdnsr::upscale::create_upscaler;
use rdnsr::Error;

use crate::config::{Needs, RunConfig, EFFECTIVE_CONFIG};

pub const MANIFEST: &str = "manifest.txt";
pub const ABLATION_TABLE: &str = "ablation.txt";
pub const ABLATION_CURVES: &str = "ablation-curves.txt";

/// Process exit classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExitClass {
    Usage = 1,
    Data = 2,
    Numeric = 3,
}

#[derive(Debug)]
pub struct Failure {
    pub class: ExitClass,
    pub messages: Vec<String>,
}

impl Failure {
    pub fn usage(messages: Vec<String>) -> Self {
        Failure { class: ExitClass::Usage, messages }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Failure { class: ExitClass::Data, messages: vec![message.into()] }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let class = match &e {
            Error::NonFiniteLoss { .. } | Error::NonFiniteGradient(_) => ExitClass::Numeric,
            Error::InvalidConfig(_) | Error::InvalidArgument(_) | Error::UnsupportedScale(_) => ExitClass::Usage,
            _ => ExitClass::Data,
        };
        let messages = match e {
            Error::InvalidConfig(list) => list,
            other => vec![other.to_string()],
        };
        Failure { class, messages }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, m) in self.messages.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "error: {m}")?;
        }
        Ok(())
    }
}

pub type CmdResult = Result<(), Failure>;

fn io_context(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| Failure::data(format!("{}: {e}", path.display()))
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Degrades every PNG in `hr_dir` into `out_dir`, writing a manifest.
/// Unreadable images are skipped with a warning; the command fails only
/// if every image fails.
pub fn degrade(hr_dir: &Path, out_dir: &Path, spec: DegradationSpec) -> CmdResult {
    let strategy = degradation_for(&spec)?;
    let inputs = list_pngs(hr_dir).map_err(|e| Failure::data(format!("{}: {e}", hr_dir.display())))?;
    std::fs::create_dir_all(out_dir).map_err(io_context(out_dir))?;
    let mut entries = Vec::new();
    spec.write_kv("degrade.", &mut entries);
    let (mut written, mut failed) = (Vec::new(), Vec::new());
    for (index, path) in inputs.iter().enumerate() {
        let name = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
        // The noise stream follows the sorted file position, so reruns match.
        let result = Image::load_png(path)
            .and_then(|hr| strategy.apply(&hr, index as u64))
            .and_then(|lr| lr.save_png(out_dir.join(&name)));
        match result {
            Ok(()) => written.push(name),
            Err(e) => {
                eprintln!("warning: skipping {}: {e}", path.display());
                failed.push(name);
            }
        }
    }
    entries.push(("images".into(), written.len().to_string()));
    for (i, name) in written.iter().enumerate() {
        entries.push((format!("image.{i}"), name.clone()));
    }
    entries.push(("skipped".into(), failed.len().to_string()));
    for (i, name) in failed.iter().enumerate() {
        entries.push((format!("skipped.{i}"), name.clone()));
    }
    let manifest = out_dir.join(MANIFEST);
    std::fs::write(&manifest, write_kv(&entries)).map_err(io_context(&manifest))?;
    eprintln!("degraded {} of {} images with {spec}", written.len(), inputs.len());
    if written.is_empty() && !failed.is_empty() {
        return Err(Failure::data(format!("every image in {} failed", hr_dir.display())));
    }
    Ok(())
}

fn load_hr_dir(dir: &Path) -> Result<Vec<(String, Image)>, Failure> {
    let paths = list_pngs(dir).map_err(|e| Failure::data(format!("{}: {e}", dir.display())))?;
    if paths.is_empty() {
        return Err(Failure::data(format!("{}: no PNG images", dir.display())));
    }
    paths.iter().map(|p| Ok((stem(p), Image::load_png(p)?))).collect()
}

fn dataset(dir: &Path, spec: &DegradationSpec) -> Result<PairDataset, Failure> {
    let strategy = degradation_for(spec)?;
    Ok(PairDataset::from_hr(&load_hr_dir(dir)?, strategy.as_ref())?)
}

fn prepare_run_dir(cfg: &RunConfig) -> CmdResult {
    std::fs::create_dir_all(&cfg.run_dir).map_err(io_context(&cfg.run_dir))?;
    let path = cfg.run_dir.join(EFFECTIVE_CONFIG);
    std::fs::write(&path, cfg.to_text()).map_err(io_context(&path))
}

fn print_telemetry(prefix: &str, line: &dyn fmt::Display) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{prefix}{line}");
}

/// Trains from scratch, or continues from the run directory's last
/// checkpoint when `resume` is set.
pub fn train(config: Option<&Path>, overrides: &[String], resume: bool) -> CmdResult {
    let cfg = RunConfig::load(config, overrides, Needs::Training).map_err(Failure::usage)?;
    let spec = cfg.train.degradation;
    let data = dataset(cfg.train_hr.as_deref().expect("validated"), &spec)?;
    let val = cfg.val_hr.as_deref().map(|d| dataset(d, &spec)).transpose()?;
    prepare_run_dir(&cfg)?;
    let mut trainer = if resume {
        let ckpt = Checkpoint::load(cfg.run_dir.join(LAST_CHECKPOINT))?;
        if ckpt.model_config != cfg.model || ckpt.train_config.as_ref() != Some(&cfg.train) {
            return Err(Failure::usage(vec![
                "the last checkpoint was written with a different model or training config".into(),
            ]));
        }
        Trainer::from_checkpoint(&ckpt)?
    } else {
        Trainer::new(RdnModel::build(cfg.model, cfg.model_seed)?, cfg.train.clone())?
    };
    let report = trainer.run(&data, val.as_ref(), Some(&cfg.run_dir), None, &mut |t| print_telemetry("", t))?;
    if let Some(psnr) = report.final_val_psnr {
        println!("final validation PSNR {psnr:.4} dB");
    }
    println!("run directory {}", cfg.run_dir.display());
    Ok(())
}

/// Upscaler choice for `sr`.
pub struct SrOptions {
    pub method: String,
    pub checkpoint: Option<PathBuf>,
    pub scale: Option<usize>,
    pub ensemble: bool,
}

pub fn super_resolve(lr_dir: &Path, out_dir: &Path, opts: &SrOptions) -> CmdResult {
    let model = match &opts.checkpoint {
        Some(path) => Some(Checkpoint::load(path)?.to_model()?),
        None => None,
    };
    let scale = match (&model, opts.scale) {
        (Some(m), Some(s)) if m.config().scale != s => {
            return Err(Failure::usage(vec![format!(
                "--scale {s} contradicts the checkpoint's scale {}",
                m.config().scale
            )]))
        }
        (Some(m), _) => m.config().scale,
        (None, Some(s)) => s,
        (None, None) => return Err(Failure::usage(vec!["--scale is required without a checkpoint".into()])),
    };
    let upscaler = create_upscaler(&opts.method, scale, model)?;
    let inputs = list_pngs(lr_dir).map_err(|e| Failure::data(format!("{}: {e}", lr_dir.display())))?;
    std::fs::create_dir_all(out_dir).map_err(io_context(out_dir))?;
    for path in &inputs {
        let lr = Image::load_png(path)?;
        let sr = if opts.ensemble {
            self_ensemble(upscaler.as_ref(), &lr)?
        } else {
            upscaler.upscale(&lr)?
        };
        sr.save_png(out_dir.join(path.file_name().expect("listed file")))?;
    }
    eprintln!("super-resolved {} images x{scale} with {}", inputs.len(), upscaler.name());
    Ok(())
}

pub fn eval(sr_dir: &Path, hr_dir: &Path, scale: usize, report_path: Option<&Path>) -> CmdResult {
    let report = evaluate_dataset(sr_dir, hr_dir, &EvalProtocol::for_scale(scale))?;
    print!("{}", report.to_text());
    let path = report_path.map(Path::to_path_buf).unwrap_or_else(|| sr_dir.join(format!("eval-x{scale}.txt")));
    std::fs::write(&path, report.to_records()).map_err(io_context(&path))
}

/// Trains all eight toggle combinations and writes the comparison table
/// and per-run curves into the run directory.
pub fn ablate(config: Option<&Path>, overrides: &[String]) -> CmdResult {
    let cfg = RunConfig::load(config, overrides, Needs::TrainingAndValidation).map_err(Failure::usage)?;
    let spec = cfg.train.degradation;
    let data = dataset(cfg.train_hr.as_deref().expect("validated"), &spec)?;
    let val = dataset(cfg.val_hr.as_deref().expect("validated"), &spec)?;
    prepare_run_dir(&cfg)?;
    let report = run_ablation(cfg.model, &cfg.train, cfg.model_seed, &data, &val, Some(&cfg.run_dir), &mut |m, t| {
        print_telemetry(&format!("[{}] ", m.toggle_tag()), t)
    })?;
    let table = report.to_table();
    print!("{table}");
    for (name, text) in [(ABLATION_TABLE, table), (ABLATION_CURVES, report.to_curves())] {
        let path = cfg.run_dir.join(name);
        std::fs::write(&path, text).map_err(io_context(&path))?;
    }
    if report.runs.iter().all(|r| r.failure.is_some()) {
        return Err(Failure { class: ExitClass::Numeric, messages: vec!["every ablation run failed".into()] });
    }
    Ok(())
}
