//! `dera` command-line front end. Exit codes: 0 success, 1 validation or usage
//! error, 2 numeric failure.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use super::ar_train::{context_clip, load_ar, train_ar, ArTrainOptions};
use super::config::{RunConfig, TeacherSpec};
use super::eval::{evaluate, swap_report};
use super::metrics::{read_rows, write_comparison, MetricsRow};
use super::train::{load_clips, load_tokenizer, make_teacher, split_clips, train_tokenizer, TrainOptions};
use crate::alignment::export_features;
use crate::argen::{sample, ArMode, Condition, SampleSettings, TokenFile};
use crate::error::{Error, Result};
use crate::videolab::{load_clip, save_clip, write_dataset};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_NUMERIC: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "dera", version, about = "Decoupled appearance/motion video tokenizer and generator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    /// Run configuration (JSON). Defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<RunConfig> {
        match &self.config {
            Some(p) => RunConfig::load(p),
            None => Ok(RunConfig::default()),
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the procedural dataset to DVID files.
    GenData {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n_clips: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the tokenizer.
    TrainTokenizer {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, default_value = "tokenizer.dckp")]
        ckpt: PathBuf,
        #[arg(long, default_value = "metrics.csv")]
        metrics: PathBuf,
        #[arg(long)]
        steps: Option<u64>,
        /// Continue from --ckpt if it exists.
        #[arg(long)]
        resume: bool,
        /// Stop after this many steps in total, keeping a checkpoint.
        #[arg(long)]
        stop_after: Option<u64>,
        /// Also train a baseline without alignment and write paired curves here.
        #[arg(long)]
        compare: Option<PathBuf>,
        #[arg(long, short)]
        verbose: bool,
    },
    /// Train the generator on a trained tokenizer's tokens.
    TrainAr {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, default_value = "tokenizer.dckp")]
        ckpt: PathBuf,
        #[arg(long, default_value = "ar.dckp")]
        ar_ckpt: PathBuf,
        #[arg(long, default_value = "ar_metrics.csv")]
        metrics: PathBuf,
        #[arg(long)]
        steps: Option<u64>,
        /// Token cache path; defaults to tokens.dtok beside --ar-ckpt.
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Encode, quantize and decode one clip.
    Reconstruct {
        #[arg(long, default_value = "tokenizer.dckp")]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample a token sequence and decode it.
    Generate {
        #[arg(long, default_value = "tokenizer.dckp")]
        ckpt: PathBuf,
        #[arg(long, default_value = "ar.dckp")]
        ar_ckpt: PathBuf,
        /// Class to condition on (class mode).
        #[arg(long)]
        class: Option<usize>,
        /// Clip whose first half conditions the prediction (prediction mode).
        #[arg(long)]
        context: Option<PathBuf>,
        #[arg(long)]
        cfg_scale: Option<f64>,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "generated.dvid")]
        out: PathBuf,
        /// Also write the sampled tokens as DERATOKS.
        #[arg(long)]
        tokens: Option<PathBuf>,
    },
    /// Exchange appearance tokens between clip pairs and classify the decodes.
    Swap {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, default_value = "tokenizer.dckp")]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 8)]
        pairs: usize,
        #[arg(long, default_value = "swap")]
        out_dir: PathBuf,
    },
    /// Write teacher features of the configured dataset as DFEA files.
    ExportFeatures {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Reconstruction metrics of a tokenizer checkpoint.
    Eval {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, default_value = "tokenizer.dckp")]
        ckpt: PathBuf,
        /// Evaluate on every clip instead of the held-out split.
        #[arg(long)]
        all: bool,
    },
    /// Finite-difference check of every primitive.
    GradCheck {
        #[arg(long, default_value_t = 10)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
}

/// Parses `argv` (including the program name) and runs the command.
pub fn main_with_args<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
        }
    };
    match run(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numeric() {
                EXIT_NUMERIC
            } else {
                EXIT_INVALID
            }
        }
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match path.extension() {
        Some(ext) => format!("{stem}{suffix}.{}", ext.to_string_lossy()),
        None => format!("{stem}{suffix}"),
    };
    path.with_file_name(name)
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { config, out, n_clips, seed } => {
            let mut cfg = config.load()?;
            cfg.data.n_clips = n_clips.unwrap_or(cfg.data.n_clips);
            cfg.data.seed = seed.unwrap_or(cfg.data.seed);
            cfg.data_dir = None;
            let clips = load_clips(&cfg)?;
            write_dataset(&out, &clips)?;
            println!("wrote {} clips to {}", clips.len(), out.display());
        }
        Command::TrainTokenizer { config, ckpt, metrics, steps, resume, stop_after, compare, verbose } => {
            let mut cfg = config.load()?;
            cfg.steps = steps.unwrap_or(cfg.steps);
            let opts = TrainOptions { checkpoint: ckpt.clone(), metrics: metrics.clone(), resume, stop_after, verbose };
            let out = train_tokenizer(&cfg, &opts)?;
            report_tokenizer_run("aligned", out.step, out.eval.as_ref().map(|e| e.mean_psnr));
            if let Some(csv) = compare {
                if cfg.teacher == TeacherSpec::None {
                    return Err(Error::Config("--compare needs a teacher in the configuration".into()));
                }
                let base_cfg = RunConfig { teacher: TeacherSpec::None, ..cfg };
                let base_opts = TrainOptions {
                    checkpoint: with_suffix(&ckpt, "_baseline"),
                    metrics: with_suffix(&metrics, "_baseline"),
                    ..opts
                };
                let base = train_tokenizer(&base_cfg, &base_opts)?;
                report_tokenizer_run("baseline", base.step, base.eval.as_ref().map(|e| e.mean_psnr));
                let aligned: Vec<MetricsRow> = read_rows(&metrics)?;
                let baseline: Vec<MetricsRow> = read_rows(&base_opts.metrics)?;
                let rows = write_comparison(&aligned, &baseline, &csv)?;
                println!("wrote {} paired rows to {}", rows.len(), csv.display());
            }
        }
        Command::TrainAr { config, ckpt, ar_ckpt, metrics, steps, cache } => {
            let mut cfg = config.load()?;
            cfg.ar_train.steps = steps.unwrap_or(cfg.ar_train.steps);
            let out = train_ar(&cfg, &ArTrainOptions { tokenizer_ckpt: ckpt, checkpoint: ar_ckpt.clone(), metrics, cache })?;
            let last = out.rows.last().map_or(f64::NAN, |r| r.loss);
            println!(
                "generator trained: final loss {last:.4}, token cache {}, checkpoint {}",
                if out.cache_reused { "reused" } else { "built" },
                ar_ckpt.display()
            );
        }
        Command::Reconstruct { ckpt, input, out } => {
            let (tok, _) = load_tokenizer(&ckpt)?;
            let clip = load_clip(&input)?;
            let recon = tok.reconstruct(&clip)?;
            save_clip(&out, &recon)?;
            println!("psnr {:.2} dB", super::eval::psnr(&clip, &recon)?);
        }
        Command::Generate { ckpt, ar_ckpt, class, context, cfg_scale, temperature, top_k, seed, out, tokens } => {
            let (tok, _) = load_tokenizer(&ckpt)?;
            let (model, tok_cfg) = load_ar(&ar_ckpt)?;
            if tok_cfg != tok.config {
                return Err(Error::Config("generator was trained for a different tokenizer".into()));
            }
            let mut settings = SampleSettings::from_config(&model.config, seed);
            settings.cfg_scale = cfg_scale.unwrap_or(settings.cfg_scale);
            settings.temperature = temperature.unwrap_or(settings.temperature);
            settings.top_k = top_k.unwrap_or(settings.top_k);
            let cond = match (model.config.mode, class, context) {
                (ArMode::Class, Some(c), None) => Condition::Class(c),
                (ArMode::Predict, None, Some(p)) => {
                    let ctx = tok.tokenize(&context_clip(&load_clip(&p)?)?)?;
                    Condition::Context(ctx.indices().to_vec())
                }
                (ArMode::Class, _, _) => return Err(Error::Invalid("class mode needs --class (and no --context)".into())),
                (ArMode::Predict, _, _) => {
                    return Err(Error::Invalid("prediction mode needs --context (and no --class)".into()))
                }
            };
            let seq = sample(&model, &cond, &settings, tok.config.l_a)?;
            save_clip(&out, &tok.detokenize(&seq)?)?;
            if let Some(p) = tokens {
                let labels = class.map(|c| vec![c as u32]);
                TokenFile { sequences: vec![seq], labels }.save(&p)?;
            }
            println!("wrote {}", out.display());
        }
        Command::Swap { config, ckpt, pairs, out_dir } => {
            let cfg = config.load()?;
            let (tok, _) = load_tokenizer(&ckpt)?;
            let clips = load_clips(&cfg)?;
            let pairs = swap_pairs(clips.len(), pairs)?;
            let report = swap_report(&tok, &clips, &pairs, &out_dir)?;
            println!(
                "appearance follows donor {:.2}, motion stays {:.2}; report in {}",
                report.appearance_follows_donor,
                report.motion_stays,
                out_dir.join("swap_report.json").display()
            );
        }
        Command::ExportFeatures { config, out_dir } => {
            let cfg = config.load()?;
            let teacher = make_teacher(&cfg)?.ok_or_else(|| Error::Config("no teacher configured".into()))?;
            let written = export_features(teacher.as_ref(), &load_clips(&cfg)?, &out_dir)?;
            println!("wrote {} feature files to {}", written.len(), out_dir.display());
        }
        Command::Eval { config, ckpt, all } => {
            let cfg = config.load()?;
            let (tok, _) = load_tokenizer(&ckpt)?;
            let clips = load_clips(&cfg)?;
            let clips = if all { clips } else { split_clips(&cfg, clips)?.1 };
            let report = evaluate(&tok, &clips)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
        }
        Command::GradCheck { points, seed, tol } => {
            let reports = diffcore::gradcheck::run_suite(points, seed, tol, false)?;
            println!("{:<20} {:>12}  result", "primitive", "max rel err");
            for r in &reports {
                println!("{:<20} {:>12.3e}  {}", r.op_id, r.worst(), if r.passed() { "PASS" } else { "FAIL" });
            }
            let failed = reports.iter().filter(|r| !r.passed()).count();
            if failed > 0 {
                return Err(Error::Numeric(format!("{failed} primitive(s) failed the gradient check")));
            }
        }
    }
    Ok(())
}

fn report_tokenizer_run(label: &str, step: u64, psnr: Option<f64>) {
    match psnr {
        Some(p) => println!("{label}: {step} steps, eval psnr {p:.2} dB"),
        None => println!("{label}: {step} steps"),
    }
}

/// Pairs `(2i, 2i + 1)`: neighbouring procedural clips differ in both appearance and motion.
pub fn swap_pairs(n_clips: usize, n: usize) -> Result<Vec<(usize, usize)>> {
    if n == 0 || 2 * n > n_clips {
        return Err(Error::Invalid(format!("{n} pairs need at least {} clips, have {n_clips}", 2 * n)));
    }
    Ok((0..n).map(|i| (2 * i, 2 * i + 1)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::videolab::dataset::factors;

    #[test]
    fn swap_pairs_differ_in_both_factors() {
        for (i, j) in swap_pairs(16, 8).unwrap() {
            let (a, b) = (factors(i), factors(j));
            assert!(a.0 != b.0 && a.1 != b.1, "{i} {j}");
        }
        assert!(swap_pairs(15, 8).is_err());
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(main_with_args(["dera", "frobnicate"]), EXIT_INVALID);
        assert_eq!(main_with_args(["dera", "eval", "--no-such-flag"]), EXIT_INVALID);
        assert_eq!(main_with_args(["dera", "--help"]), EXIT_OK);
    }

    #[test]
    fn suffixes() {
        assert_eq!(with_suffix(Path::new("a/m.csv"), "_baseline"), PathBuf::from("a/m_baseline.csv"));
        assert_eq!(with_suffix(Path::new("ckpt"), "_b"), PathBuf::from("ckpt_b"));
    }
}
