//! `tdefense`: generate corpora, attack, defend, sweep, benchmark and
//! decompose from the command line.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 numerical
//! failure, 3 I/O or file-format failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use tensor_defense::attack::{perturbation_stats, pgd_attack_batch};
use tensor_defense::config::ExperimentConfig;
use tensor_defense::decomp::{decompose_traced, write_factors, DecompSettings, Method};
use tensor_defense::defense::{apply_defense, install_hooks};
use tensor_defense::harness::{
    emit_report, mean_pair_similarity, recall_many, rerun, run_bench, run_sweep, write_image_set, Axis, BenchSpec,
    CorpusManifest, Direction, ReportFormat, RetrievalCorpus, SweepReport,
};
use tensor_defense::model::ToyClip;
use tensor_defense::tensor::{read_tdf1, write_tdf1};
use tensor_defense::Error;

type Result<T> = std::result::Result<T, Error>;

#[derive(Parser, Debug)]
#[command(name = "tdefense", version, about = "Low-rank tensor defense experiments on a seeded toy encoder")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment config (JSON). Missing sections use defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed; every section seed is derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for attacks (bench defaults to 1).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a seeded image/caption corpus as TDF1 images plus manifest.json.
    GenCorpus {
        /// Output directory.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Config overrides such as corpus.pairs=50.
        #[arg(value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Craft PGD adversarial images for every entry of a manifest.
    Attack {
        /// Manifest of clean images and captions.
        #[arg(long, value_name = "PATH")]
        manifest: PathBuf,
        /// Output directory for adversarial images and their manifest.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Config overrides such as defense.rank=16.
        #[arg(value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Apply the configured defense to a stored activation tensor, or run
    /// defended retrieval over a manifest.
    Defend {
        /// Activation tensor (TDF1) to filter.
        #[arg(long, value_name = "PATH", conflicts_with = "manifest", required_unless_present = "manifest")]
        input: Option<PathBuf>,
        /// Manifest of images to embed with the defense installed.
        #[arg(long, value_name = "PATH")]
        manifest: Option<PathBuf>,
        /// Filtered tensor (with --input, required) or metrics JSON (with --manifest).
        #[arg(long, value_name = "PATH", required_unless_present = "manifest")]
        out: Option<PathBuf>,
        /// Config overrides such as defense.alpha=0.3.
        #[arg(value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Sweep one defense parameter and write a CSV or JSON report.
    Sweep {
        /// alpha, rank, method, layer or multilayer.
        #[arg(long, required_unless_present = "rerun")]
        axis: Option<String>,
        /// Comma-separated values; defaults depend on the axis.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        /// Report path; the extension (.csv or .json) picks the format.
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        /// Regenerate a JSON report from its embedded metadata instead.
        #[arg(long, value_name = "PATH", conflicts_with_all = ["axis", "values"])]
        rerun: Option<PathBuf>,
        /// Config overrides such as harness.batch_size=16.
        #[arg(value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Time defended forward passes against the undefended baseline.
    Bench {
        /// Comma-separated configurations such as none,tt-1,tucker-1.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        /// Report path (.csv or .json).
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        /// Config overrides such as defense.rank=16.
        #[arg(value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Decompose one TDF1 tensor and report ranks, error and time.
    Decompose {
        /// Tensor to decompose (TDF1).
        #[arg(long, value_name = "PATH")]
        input: PathBuf,
        /// cp, tucker or tt.
        #[arg(long)]
        method: String,
        /// Target rank; per-mode ranks are capped by the tensor shape.
        #[arg(long)]
        rank: usize,
        /// Write the factors to this file.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
        /// Sweep cap for CP-ALS and HOOI.
        #[arg(long, default_value_t = DecompSettings::DEFAULT_MAX_ITERS)]
        max_iters: usize,
        /// Stop when a sweep changes the error by less than this relative amount.
        #[arg(long, default_value_t = DecompSettings::DEFAULT_TOLERANCE)]
        tolerance: f64,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    if e.is_io() {
        3
    } else if e.is_numerical() {
        2
    } else {
        1
    }
}

/// Defaults, then the config file, then `--seed`, then dotted overrides.
fn load_config(common: &Common, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p).map_err(|e| e.context(p.display().to_string()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg = cfg.with_seed(s);
    }
    cfg.apply_overrides(overrides)
}

fn set_threads(n: usize) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))
}

fn write_json<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("summary serializes");
    match out {
        Some(p) => std::fs::write(p, text + "\n").map_err(|e| Error::from(e).context(p.display().to_string())),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn emit(report: &SweepReport, out: &Path) -> Result<()> {
    let format = ReportFormat::for_path(out)?;
    emit_report(report, format, out).map_err(|e| e.context(out.display().to_string()))?;
    println!("wrote {} rows to {}", report.rows.len(), out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let common = &cli.common;
    let threads = match (&cli.command, common.threads) {
        (_, Some(n)) => Some(n),
        (Command::Bench { .. }, None) => Some(1),
        _ => None,
    };
    if let Some(n) = threads {
        set_threads(n)?;
    }

    match cli.command {
        Command::GenCorpus { out, overrides } => {
            let cfg = load_config(common, &overrides)?;
            let model = ToyClip::new(cfg.model.clone())?;
            let corpus = RetrievalCorpus::generate(&model, &cfg.corpus)?;
            corpus.write_dir(&out)?;
            println!("wrote {} pairs to {}", corpus.len(), out.display());
            Ok(())
        }
        Command::Attack { manifest, out, overrides } => {
            let cfg = load_config(common, &overrides)?;
            let model = ToyClip::new(cfg.model.clone())?;
            let m = CorpusManifest::load(&manifest)?;
            let images = m.read_images(manifest.parent().unwrap_or(Path::new(".")))?;
            let captions: Vec<Vec<usize>> = m.entries.iter().map(|e| m.tokens(e).to_vec()).collect();
            let texts = captions.iter().map(|c| model.encode_text(c)).collect::<Result<Vec<_>>>()?;
            let adv = pgd_attack_batch(&model, &images, &texts, &cfg.attack)?;
            write_image_set(&out, m.seed, captions, &adv)?;

            let clean_emb = model.encode_images(&images, None)?;
            let adv_emb = model.encode_images(&adv, None)?;
            let mut linf: f64 = 0.0;
            for (x, a) in images.iter().zip(&adv) {
                linf = linf.max(perturbation_stats(x, a)?.linf);
            }
            println!(
                "attacked {} images: max linf {linf:.6}, mean similarity {:.4} -> {:.4}",
                adv.len(),
                mean_pair_similarity(&clean_emb, &texts),
                mean_pair_similarity(&adv_emb, &texts)
            );
            Ok(())
        }
        Command::Defend { input, manifest, out, overrides } => {
            let cfg = load_config(common, &overrides)?;
            if let Some(input) = input {
                let out = out.expect("clap requires --out with --input");
                let t = read_tdf1(&input).map_err(|e| e.context(input.display().to_string()))?;
                let filtered = apply_defense(&t, &cfg.defense)?;
                write_tdf1(&out, &filtered).map_err(|e| e.context(out.display().to_string()))?;
                eprintln!("filtered {:?} tensor, moved {:.6e}", t.shape(), filtered.distance(&t)?);
                return Ok(());
            }
            let manifest = manifest.expect("clap requires --input or --manifest");
            let corpus = RetrievalCorpus::read_manifest(&manifest)?;
            let model = ToyClip::new(cfg.model.clone())?;
            let hooks = install_hooks(&model, &cfg.defense)?;
            let texts = corpus.text_embeddings(&model)?;
            let mut emb = Vec::with_capacity(corpus.len());
            for chunk in corpus.images().chunks(cfg.harness.batch_size) {
                emb.extend(model.encode_images(chunk, Some(&hooks))?);
            }
            let n = emb.len();
            let recall = recall_many(&emb, &texts, &[1.min(n), 5.min(n), 10.min(n)], Direction::ImageToText)?;
            #[derive(Serialize)]
            struct Summary {
                images: usize,
                recall_at_1: f64,
                recall_at_5: f64,
                recall_at_10: f64,
                mean_similarity: f64,
                defense: tensor_defense::defense::DefenseConfig,
            }
            let summary = Summary {
                images: n,
                recall_at_1: recall[0],
                recall_at_5: recall[1],
                recall_at_10: recall[2],
                mean_similarity: mean_pair_similarity(&emb, &texts),
                defense: cfg.defense.clone(),
            };
            write_json(&summary, out.as_deref())
        }
        Command::Sweep { axis, values, out, rerun: from, overrides } => {
            let report = if let Some(path) = from {
                let text =
                    std::fs::read_to_string(&path).map_err(|e| Error::from(e).context(path.display().to_string()))?;
                rerun(&SweepReport::from_json(&text)?)?
            } else {
                let axis: Axis = axis.expect("clap requires --axis").parse()?;
                let mut cfg = load_config(common, &overrides)?;
                axis.pin_layers(&mut cfg);
                let values = if values.is_empty() { axis.default_values(cfg.model.depth) } else { values };
                run_sweep(axis, &values, &cfg)?
            };
            emit(&report, &out)
        }
        Command::Bench { values, out, overrides } => {
            let cfg = load_config(common, &overrides)?;
            let specs = if values.is_empty() {
                BenchSpec::defaults()
            } else {
                values.iter().map(|v| v.parse()).collect::<Result<Vec<BenchSpec>>>()?
            };
            let report = run_bench(&specs, &cfg)?;
            for r in &report.rows {
                println!("{:<10} {:>9.2} ms/batch {:>6.2}x", r.value, r.ms_per_batch, r.overhead);
            }
            emit(&report, &out)
        }
        Command::Decompose { input, method, rank, out, max_iters, tolerance } => {
            let method: Method = method.parse()?;
            let seed = load_config(common, &[])?.defense.seed;
            let settings = DecompSettings { method, rank, max_iters, tolerance, seed };
            let t = read_tdf1(&input).map_err(|e| e.context(input.display().to_string()))?;
            let start = Instant::now();
            let (factors, trace) = decompose_traced(&t, &settings)?;
            let seconds = start.elapsed().as_secs_f64();
            if let Some(p) = &out {
                write_factors(p, &factors).map_err(|e| e.context(p.display().to_string()))?;
            }
            #[derive(Serialize)]
            struct Summary {
                method: Method,
                shape: Vec<usize>,
                ranks: Vec<usize>,
                relative_error: f64,
                sweeps: usize,
                converged: bool,
                seconds: f64,
            }
            write_json(
                &Summary {
                    method,
                    shape: t.shape().to_vec(),
                    ranks: factors.ranks(),
                    relative_error: trace.relative_error(),
                    sweeps: trace.sweeps,
                    converged: trace.converged,
                    seconds,
                },
                None,
            )
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_root_cause() {
        let io = Error::from(std::io::Error::new(std::io::ErrorKind::NotFound, "gone"));
        assert_eq!(exit_code(&io.context("reading x")), 3);
        assert_eq!(exit_code(&Error::Format("bad magic".into())), 3);
        assert_eq!(exit_code(&Error::NumericalFailure("nan".into()).context("row 1")), 2);
        assert_eq!(exit_code(&Error::Config("alpha".into())), 1);
        assert_eq!(exit_code(&Error::InvalidArgument("rank".into())), 1);
    }
}
