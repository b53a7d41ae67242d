//! `pucare` command line.
//!
//! Exit status: 0 success, 1 usage error, 2 data/format/parameter error,
//! 3 verification failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::augment::{build_augmented_set, AugmentConfig};
use crate::data_io::{
    generate_synthetic, load_checkpoint, load_dataset, read_image_png, read_mask_png,
    render_overlay, save_checkpoint, save_dataset, write_image_png, write_mask_png, write_report,
    CheckpointMeta, Dataset, Domain, Report, Sample, SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::gradsuite;
use crate::metrics::binarize;
use crate::model::{init_params, ModelConfig, ModelParams};
use crate::preprocess::{resize_bilinear, resize_mask_nearest, PreprocessConfig};
use crate::training::{evaluate_model, fit, pretrain_finetune, predict, split_dataset, SplitSpec, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_VERIFY: i32 = 3;

/// Settings file: every section optional, unknown keys rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Source-domain phase of `pretrain`; falls back to `train`.
    pub pretrain: Option<TrainConfig>,
    pub augment: AugmentConfig,
    pub preprocess: PreprocessConfig,
    pub split: SplitSpec,
}

impl CliConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(CliConfig::default()),
            Some(p) => serde_json::from_slice(&fs::read(p)?)
                .map_err(|e| Error::Format(format!("{}: {e}", p.display()))),
        }
    }

    /// Apply a single `--seed` to every seeded component.
    pub fn override_seed(&mut self, seed: Option<u64>) {
        if let Some(s) = seed {
            self.model.seed = s;
            self.train.seed = s;
            if let Some(p) = self.pretrain.as_mut() {
                p.seed = s;
            }
            self.augment.seed = s;
            self.split.seed = s;
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

#[derive(Parser, Debug)]
#[command(name = "pucare", version, about = "Wound segmentation toolkit", arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// JSON settings file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for every random component; overrides the settings file.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value = "source")]
        domain: String,
        #[arg(long, default_value_t = 224)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Resize a dataset to the model input size.
    Preprocess {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        no_antialias: bool,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Expand a dataset with rotations, reflections and watershed copies.
    Augment {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        rotations: Option<usize>,
        #[arg(long, overrides_with = "no_reflect")]
        reflect: bool,
        #[arg(long)]
        no_reflect: bool,
        #[arg(long, overrides_with = "no_watershed")]
        watershed: bool,
        #[arg(long)]
        no_watershed: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Split a dataset 70/10/20 and train on the first part.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        no_attention: bool,
        /// Report path; defaults to `<out>.report.json`.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train on a source dataset, then fine-tune on a target dataset.
    Pretrain {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Which split to score, using the split recorded with the checkpoint.
        #[arg(long, value_enum, default_value = "all")]
        split: SplitArg,
    },
    /// Segment one image.
    Predict {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out_mask: PathBuf,
        #[arg(long)]
        overlay: Option<PathBuf>,
        #[arg(long, default_value_t = 0.4)]
        alpha: f64,
    },
    /// Blend a mask into an image.
    Overlay {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.4)]
        alpha: f64,
        /// Overlay color as `r,g,b` in [0, 1].
        #[arg(long, default_value = "0,1,0")]
        color: String,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        /// Comma-separated subset of ops.
        #[arg(long, value_delimiter = ',')]
        ops: Option<Vec<String>>,
        #[arg(long, default_value_t = gradsuite::DEFAULT_SEEDS)]
        seeds: usize,
    },
}

/// Parse `argv` (including the program name), run, and return the exit status.
pub fn dispatch<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Verification(_) => EXIT_VERIFY,
                _ => EXIT_DATA,
            }
        }
    }
}

fn default_report(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".report.json");
    PathBuf::from(s)
}

fn parse_color(s: &str) -> Result<[f64; 3]> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::param(format!("color {s:?}: {e}")))?;
    <[f64; 3]>::try_from(parts).map_err(|_| Error::param(format!("color {s:?} needs three components")))
}

fn run(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Synth {
            out,
            n,
            domain,
            size,
            seed,
        } => {
            let spec = SyntheticSpec::new(n, domain.parse::<Domain>()?, size, seed);
            let ds = generate_synthetic(&spec)?;
            save_dataset(&ds, &out)?;
            println!("wrote {} samples to {}", ds.len(), out.display());
        }
        Command::Preprocess {
            input,
            out,
            size,
            no_antialias,
            config,
        } => {
            let mut pc = CliConfig::load(config.as_deref())?.preprocess;
            if let Some(s) = size {
                pc.target_size = s;
            }
            if no_antialias {
                pc.antialias = false;
            }
            pc.validate()?;
            let ds = load_dataset(&input)?;
            let samples = ds
                .samples()
                .iter()
                .map(|s| {
                    let (img, mask) = pc.apply(&s.image, &s.mask)?;
                    Sample::new(s.id.clone(), img, mask)
                })
                .collect::<Result<Vec<_>>>()?;
            let mut meta = ds.meta.clone();
            meta.preprocessing.push(format!(
                "resize {0}x{0} bilinear antialias={1}; mask nearest",
                pc.target_size, pc.antialias
            ));
            let ds = Dataset::new(samples, meta)?;
            save_dataset(&ds, &out)?;
            println!("wrote {} samples to {}", ds.len(), out.display());
        }
        Command::Augment {
            input,
            out,
            rotations,
            reflect,
            no_reflect,
            watershed,
            no_watershed,
            cfg,
        } => {
            let mut c = CliConfig::load(cfg.config.as_deref())?;
            c.override_seed(cfg.seed);
            let mut a = c.augment;
            if let Some(r) = rotations {
                a.rotations_per_image = r;
            }
            if reflect || no_reflect {
                a.reflect_x = reflect;
                a.reflect_y = reflect;
            }
            if watershed || no_watershed {
                a.watershed = watershed;
            }
            let ds = load_dataset(&input)?;
            let aug = build_augmented_set(&ds, &a)?;
            save_dataset(&aug, &out)?;
            println!("wrote {} samples to {}", aug.len(), out.display());
        }
        Command::Train {
            data,
            out,
            init,
            no_attention,
            report,
            epochs,
            cfg,
        } => {
            let mut c = CliConfig::load(cfg.config.as_deref())?;
            c.override_seed(cfg.seed);
            if let Some(e) = epochs {
                c.train.epochs = e;
            }
            let params = match init {
                Some(p) => {
                    let (params, _) = load_checkpoint(&p)?;
                    if no_attention && params.config.attention {
                        return Err(Error::param("--no-attention conflicts with an attention checkpoint"));
                    }
                    c.model = params.config.clone();
                    params
                }
                None => {
                    if no_attention {
                        c.model.attention = false;
                    }
                    init_params(&c.model)?
                }
            };
            let ds = load_dataset(&data)?;
            let split = split_dataset(&ds, &c.split)?;
            let (params, history) = fit(&split.train, &split.val, params, &c.train)?;
            let eval = if split.val.is_empty() {
                None
            } else {
                Some(evaluate_model(&split.val, &params, &c.train)?)
            };
            finish_training(&c, &params, &history, eval.as_ref(), &out, report)?;
        }
        Command::Pretrain {
            source,
            target,
            out,
            report,
            cfg,
        } => {
            let mut c = CliConfig::load(cfg.config.as_deref())?;
            c.override_seed(cfg.seed);
            let src = load_dataset(&source)?;
            let tgt = load_dataset(&target)?;
            let split = split_dataset(&tgt, &c.split)?;
            let pre_cfg = c.pretrain.clone().unwrap_or_else(|| c.train.clone());
            let outcome = pretrain_finetune(&src, &split.train, &split.val, &pre_cfg, &c.train, &c.model)?;
            let eval = if split.val.is_empty() {
                None
            } else {
                Some(evaluate_model(&split.val, &outcome.params, &c.train)?)
            };
            finish_training(&c, &outcome.params, &outcome.finetune, eval.as_ref(), &out, report.clone())?;
            let pre_report = Report::new(c.to_json(), &outcome.pretrain, None);
            let mut path = report.unwrap_or_else(|| default_report(&out)).into_os_string();
            path.push(".pretrain.json");
            write_report(&pre_report, Path::new(&path))?;
        }
        Command::Eval {
            data,
            ckpt,
            report,
            split,
        } => {
            let (params, meta) = load_checkpoint(&ckpt)?;
            let c: CliConfig = match &meta.resolved_config {
                Some(v) => serde_json::from_value(v.clone())
                    .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?,
                None => CliConfig::default(),
            };
            let ds = load_dataset(&data)?;
            let ds = match split {
                SplitArg::All => ds,
                other => {
                    let s = split_dataset(&ds, &c.split)?;
                    match other {
                        SplitArg::Train => s.train,
                        SplitArg::Val => s.val,
                        _ => s.test,
                    }
                }
            };
            let eval = evaluate_model(&ds, &params, &c.train)?;
            let mut r = Report::new(c.to_json(), &Default::default(), Some(&eval));
            r.epochs.clear();
            write_report(&r, &report)?;
            let m = eval.macro_avg;
            println!("acc {:.6} iou {:.6} dsc {:.6} over {} samples", m.acc, m.iou, m.dsc, ds.len());
        }
        Command::Predict {
            image,
            ckpt,
            out_mask,
            overlay,
            alpha,
        } => {
            let (params, meta) = load_checkpoint(&ckpt)?;
            let threshold = meta
                .resolved_config
                .as_ref()
                .and_then(|v| serde_json::from_value::<CliConfig>(v.clone()).ok())
                .map(|c| c.train.binarize_threshold)
                .unwrap_or(0.5);
            let img = read_image_png(&image)?;
            let mask = predict_mask(&params, &img, threshold)?;
            write_mask_png(&out_mask, &mask)?;
            if let Some(path) = overlay {
                write_image_png(&path, &render_overlay(&img, &mask, [0.0, 1.0, 0.0], alpha)?)?;
            }
            println!("{} wound pixels of {}", mask.count(), mask.len());
        }
        Command::Overlay {
            image,
            mask,
            out,
            alpha,
            color,
        } => {
            let img = read_image_png(&image)?;
            let m = read_mask_png(&mask)?;
            write_image_png(&out, &render_overlay(&img, &m, parse_color(&color)?, alpha)?)?;
        }
        Command::Gradcheck { ops, seeds } => {
            let ops: Vec<String> = ops.unwrap_or_else(|| gradsuite::OPS.iter().map(|s| s.to_string()).collect());
            let refs: Vec<&str> = ops.iter().map(String::as_str).collect();
            if seeds == 0 {
                return Err(Error::param("--seeds must be at least 1"));
            }
            let results = gradsuite::run_suite(&refs, seeds)?;
            println!("{:<18} {:>12} {:>8} {:>8} {:>8}  status", "op", "max_rel_err", "tol", "checked", "skipped");
            for r in &results {
                println!(
                    "{:<18} {:>12.3e} {:>8.0e} {:>8} {:>8}  {}",
                    r.op,
                    r.max_rel_error,
                    r.tolerance,
                    r.checked,
                    r.skipped,
                    if r.passed() { "ok" } else { "FAIL" }
                );
            }
            if results.iter().any(|r| !r.passed()) {
                return Err(Error::Verification("gradient check failed".into()));
            }
        }
    }
    Ok(EXIT_OK)
}

fn finish_training(
    c: &CliConfig,
    params: &ModelParams<f32>,
    history: &crate::training::TrainHistory,
    eval: Option<&crate::training::Evaluation>,
    out: &Path,
    report: Option<PathBuf>,
) -> Result<()> {
    let mut resolved = c.clone();
    resolved.model = params.config.clone();
    let meta = CheckpointMeta {
        train_seed: Some(resolved.train.seed),
        history_digest: Some(history.digest()),
        resolved_config: Some(resolved.to_json()),
    };
    save_checkpoint(params, out, &meta)?;
    let report_path = report.unwrap_or_else(|| default_report(out));
    write_report(&Report::new(resolved.to_json(), history, eval), &report_path)?;
    if let Some(m) = eval {
        let m = m.macro_avg;
        println!("validation acc {:.6} iou {:.6} dsc {:.6}", m.acc, m.iou, m.dsc);
    }
    println!("wrote {} and {}", out.display(), report_path.display());
    Ok(())
}

/// Resize to the model input, predict, binarize, and map back to the
/// image's own size.
pub fn predict_mask(params: &ModelParams<f32>, img: &crate::preprocess::Image, threshold: f64) -> Result<crate::preprocess::Mask> {
    let s = params.config.input_size;
    let resized = resize_bilinear(img, s, s, true)?;
    let sample = Sample::new("input", resized, crate::preprocess::Mask::zeros(s, s))?;
    let prob = predict(params, &[&sample])?;
    let mask = binarize(&prob, threshold)?.remove(0);
    resize_mask_nearest(&mask, img.height(), img.width())
}
