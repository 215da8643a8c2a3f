use std::fmt;
use std::str::FromStr;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use super::report::{ReportKind, ReportMetadata, SweepReport, SweepRow};
use super::{mean_pair_similarity, recall_many, Direction, RetrievalCorpus};
use crate::attack::pgd_attack_batch;
use crate::config::ExperimentConfig;
use crate::decomp::Method;
use crate::defense::{install_hooks, DefenseConfig, HookRegistry};
use crate::error::{Error, Result};
use crate::model::{LayerId, ToyClip};
use crate::tensor::DenseTensor;

/// Parameter varied by a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Alpha,
    Rank,
    Method,
    Layer,
    MultiLayer,
}

impl Axis {
    pub const ALL: [Axis; 5] = [Axis::Alpha, Axis::Rank, Axis::Method, Axis::Layer, Axis::MultiLayer];

    /// Values swept when none are given.
    pub fn default_values(self, depth: usize) -> Vec<String> {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect();
        match self {
            Axis::Alpha => s(&["0.1", "0.2", "0.3", "0.5", "0.7", "0.8", "0.9"]),
            Axis::Rank => s(&["4", "8", "16", "32", "64"]),
            Axis::Method => s(&["cp", "tucker", "tt"]),
            Axis::Layer => {
                let mut v: Vec<String> = (0..depth).map(|i| LayerId::Norm2(i).to_string()).collect();
                v.push(LayerId::FinalNorm.to_string());
                v
            }
            Axis::MultiLayer => (1..=depth.min(5)).map(|k| k.to_string()).collect(),
        }
    }

    /// Adjusts a config whose defense layers are still the default to the
    /// layers this axis is conventionally swept on: the method comparison
    /// runs on the last five block norm layers. Other axes keep `final_norm`.
    pub fn pin_layers(self, cfg: &mut ExperimentConfig) {
        if self == Axis::Method && cfg.defense.target_layers == DefenseConfig::default().target_layers {
            let depth = cfg.model.depth;
            cfg.defense.target_layers = LayerId::last_block_norms(depth, depth.min(5));
        }
    }

    /// `base` with this axis set to `value`. Multi-layer values are either a
    /// count `k` (the last `k` block norm layers) or layer names joined by `+`.
    pub fn apply(self, base: &DefenseConfig, value: &str, depth: usize) -> Result<DefenseConfig> {
        let bad = |what: &str| Error::config(format!("invalid {what} value `{value}` for axis {self}"));
        let mut cfg = base.clone();
        match self {
            Axis::Alpha => cfg.alpha = value.parse().map_err(|_| bad("alpha"))?,
            Axis::Rank => cfg.rank = value.parse().map_err(|_| bad("rank"))?,
            Axis::Method => cfg.method = value.parse()?,
            Axis::Layer => cfg.target_layers = vec![value.parse()?],
            Axis::MultiLayer => {
                cfg.target_layers = match value.parse::<usize>() {
                    Ok(k) if (1..=depth).contains(&k) => LayerId::last_block_norms(depth, k),
                    Ok(_) => return Err(bad("layer count")),
                    Err(_) => value.split('+').map(str::parse).collect::<Result<_>>()?,
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::Alpha => "alpha",
            Axis::Rank => "rank",
            Axis::Method => "method",
            Axis::Layer => "layer",
            Axis::MultiLayer => "multilayer",
        })
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "alpha" => Ok(Axis::Alpha),
            "rank" => Ok(Axis::Rank),
            "method" => Ok(Axis::Method),
            "layer" => Ok(Axis::Layer),
            "multilayer" => Ok(Axis::MultiLayer),
            _ => Err(Error::invalid(format!("unknown axis `{s}` (alpha, rank, method, layer, multilayer)"))),
        }
    }
}

/// Recall@{1,5,10} and mean same-pair similarity of one embedding set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub recall: [f64; 3],
    pub mean_sim: f64,
}

/// Everything a sweep row shares: model, corpus, and the adversarial images,
/// which are crafted once against the undefended model.
pub struct Evaluation {
    pub config: ExperimentConfig,
    pub model: ToyClip,
    pub corpus: RetrievalCorpus,
    pub texts: Vec<Vec<f64>>,
    pub adversarial: Vec<DenseTensor>,
    pub clean: Metrics,
    pub attacked: Metrics,
    /// Undefended milliseconds per batch over the adversarial images.
    pub baseline_ms: f64,
}

impl Evaluation {
    pub fn prepare(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let model = ToyClip::new(config.model.clone())?;
        let corpus = RetrievalCorpus::generate(&model, &config.corpus)?;
        let texts = corpus.text_embeddings(&model)?;
        let images = corpus.images();
        let adversarial = pgd_attack_batch(&model, &images, &texts, &config.attack)?;
        let mut ev = Self {
            config: config.clone(),
            model,
            corpus,
            texts,
            adversarial,
            clean: Metrics { recall: [0.0; 3], mean_sim: 0.0 },
            attacked: Metrics { recall: [0.0; 3], mean_sim: 0.0 },
            baseline_ms: 0.0,
        };
        let (clean, _) = ev.embed(&images, None)?;
        ev.clean = ev.metrics(&clean)?;
        let (adv, ms) = ev.embed(&ev.adversarial, None)?;
        ev.attacked = ev.metrics(&adv)?;
        ev.baseline_ms = ms;
        Ok(ev)
    }

    /// Embeds `images` in batches of `harness.batch_size`; returns the
    /// embeddings and the mean milliseconds per batch.
    pub fn embed(&self, images: &[DenseTensor], hooks: Option<&HookRegistry>) -> Result<(Vec<Vec<f64>>, f64)> {
        let bs = self.config.harness.batch_size;
        let mut out = Vec::with_capacity(images.len());
        let start = Instant::now();
        for chunk in images.chunks(bs) {
            out.extend(self.model.encode_images(chunk, hooks)?);
        }
        let batches = images.len().div_ceil(bs).max(1);
        Ok((out, start.elapsed().as_secs_f64() * 1e3 / batches as f64))
    }

    pub fn metrics(&self, embeddings: &[Vec<f64>]) -> Result<Metrics> {
        let n = embeddings.len();
        let ks = [1.min(n), 5.min(n), 10.min(n)];
        let r = recall_many(embeddings, &self.texts, &ks, Direction::ImageToText)?;
        Ok(Metrics { recall: [r[0], r[1], r[2]], mean_sim: mean_pair_similarity(embeddings, &self.texts) })
    }

    /// Metrics of the adversarial images under `defense`, with timing.
    pub fn defended(&self, defense: &DefenseConfig) -> Result<(Metrics, f64)> {
        let hooks = install_hooks(&self.model, defense)?;
        let (emb, ms) = self.embed(&self.adversarial, Some(&hooks))?;
        Ok((self.metrics(&emb)?, ms))
    }

    fn row(&self, axis: &str, value: &str, defense: Option<&DefenseConfig>, def: Metrics, ms: f64) -> SweepRow {
        let bs = self.config.harness.batch_size as f64;
        let (method, rank, alpha, layers) = match defense {
            Some(d) => (
                d.method.to_string(),
                d.rank,
                d.alpha,
                d.target_layers.iter().map(ToString::to_string).collect::<Vec<_>>().join("+"),
            ),
            None => ("none".to_string(), 0, 1.0, String::new()),
        };
        SweepRow {
            axis: axis.to_string(),
            value: value.to_string(),
            method,
            rank,
            alpha,
            layers,
            clean_r1: self.clean.recall[0],
            clean_r5: self.clean.recall[1],
            clean_r10: self.clean.recall[2],
            adv_r1: self.attacked.recall[0],
            adv_r5: self.attacked.recall[1],
            adv_r10: self.attacked.recall[2],
            def_r1: def.recall[0],
            def_r5: def.recall[1],
            def_r10: def.recall[2],
            mean_sim_clean: self.clean.mean_sim,
            mean_sim_adv: self.attacked.mean_sim,
            mean_sim_def: def.mean_sim,
            ms_per_batch: ms,
            images_per_s: if ms > 0.0 { bs * 1e3 / ms } else { 0.0 },
            overhead: if self.baseline_ms > 0.0 { ms / self.baseline_ms } else { 1.0 },
        }
    }

    fn metadata(&self, kind: ReportKind, axis: &str, values: &[String]) -> ReportMetadata {
        ReportMetadata {
            kind,
            axis: axis.to_string(),
            values: values.to_vec(),
            seeds: self.config.seeds(),
            config: self.config.clone(),
            timestamp: report_timestamp(),
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}

/// Seconds since the epoch, or `SOURCE_DATE_EPOCH` when set so that
/// repeated runs can produce byte-identical JSON.
fn report_timestamp() -> u64 {
    std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or_else(|| SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0))
}

/// One report row per value of `axis`, with everything else held at
/// `config.defense`.
pub fn run_sweep(axis: Axis, values: &[String], config: &ExperimentConfig) -> Result<SweepReport> {
    let ev = Evaluation::prepare(config)?;
    sweep_with(&ev, axis, values)
}

/// [`run_sweep`] over an already prepared evaluation.
pub fn sweep_with(ev: &Evaluation, axis: Axis, values: &[String]) -> Result<SweepReport> {
    if values.is_empty() {
        return Err(Error::config(format!("axis {axis} needs at least one value")));
    }
    let depth = ev.config.model.depth;
    let mut rows = Vec::with_capacity(values.len());
    for v in values {
        let ctx = |e: Error| e.context(format!("sweep row {axis}={v}"));
        let defense = axis.apply(&ev.config.defense, v, depth).map_err(ctx)?;
        let (m, ms) = ev.defended(&defense).map_err(ctx)?;
        rows.push(ev.row(&axis.to_string(), v, Some(&defense), m, ms));
    }
    Ok(SweepReport { metadata: ev.metadata(ReportKind::Sweep, &axis.to_string(), values), rows })
}

/// A benchmark configuration: a method on the last `layers` block norm
/// layers, or the undefended baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchSpec {
    pub method: Option<Method>,
    pub layers: usize,
}

impl BenchSpec {
    pub fn defaults() -> Vec<BenchSpec> {
        let d = |m, k| BenchSpec { method: Some(m), layers: k };
        vec![
            BenchSpec { method: None, layers: 0 },
            d(Method::Cp, 1),
            d(Method::Tucker, 1),
            d(Method::Tt, 1),
            d(Method::Cp, 2),
            d(Method::Tt, 2),
            d(Method::Tt, 5),
        ]
    }
}

impl fmt::Display for BenchSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.method {
            None => f.write_str("none"),
            Some(m) => write!(f, "{m}-{}", self.layers),
        }
    }
}

impl FromStr for BenchSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("none") {
            return Ok(BenchSpec { method: None, layers: 0 });
        }
        let bad = || Error::invalid(format!("bench configuration `{s}` is not `none` or METHOD-LAYERS"));
        let (m, k) = s.rsplit_once('-').ok_or_else(bad)?;
        let layers: usize = k.parse().map_err(|_| bad())?;
        if layers == 0 {
            return Err(bad());
        }
        Ok(BenchSpec { method: Some(m.parse()?), layers })
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Median milliseconds per batch for each entry of `configs` (no hooks means
/// undefended). Configurations are timed round-robin, one batch each per
/// round, so drift in machine speed hits them all alike. Batches cycle
/// through the clean corpus images.
fn time_batches(ev: &Evaluation, configs: &[Option<HookRegistry>]) -> Result<Vec<f64>> {
    let h = &ev.config.harness;
    let images: Vec<&DenseTensor> = ev.corpus.pairs.iter().map(|p| &p.image).collect();
    let n = images.len();
    let batch = |j: usize| -> Vec<DenseTensor> {
        (0..h.batch_size).map(|i| images[(j * h.batch_size + i) % n].clone()).collect()
    };
    for j in 0..h.warmup_batches {
        for hooks in configs {
            ev.model.encode_images(&batch(j), hooks.as_ref())?;
        }
    }
    let mut times = vec![Vec::with_capacity(h.bench_batches); configs.len()];
    for j in 0..h.bench_batches {
        let b = batch(h.warmup_batches + j);
        for (hooks, t) in configs.iter().zip(&mut times) {
            let start = Instant::now();
            ev.model.encode_images(&b, hooks.as_ref())?;
            t.push(start.elapsed().as_secs_f64() * 1e3);
        }
    }
    Ok(times.into_iter().map(median).collect())
}

/// Times each configuration at rank `harness.bench_rank` and alpha
/// `harness.bench_alpha`. Overhead is relative to the undefended median
/// measured in the same call.
pub fn run_bench(specs: &[BenchSpec], config: &ExperimentConfig) -> Result<SweepReport> {
    let ev = Evaluation::prepare(config)?;
    bench_with(&ev, specs)
}

pub fn bench_with(ev: &Evaluation, specs: &[BenchSpec]) -> Result<SweepReport> {
    if specs.is_empty() {
        return Err(Error::config("bench needs at least one configuration"));
    }
    let depth = ev.config.model.depth;
    let defenses = specs
        .iter()
        .map(|spec| {
            let ctx = |e: Error| e.context(format!("bench row {spec}"));
            let Some(method) = spec.method else { return Ok(None) };
            if spec.layers > depth {
                return Err(ctx(Error::config(format!("{} layers requested, model has {depth} blocks", spec.layers))));
            }
            let defense = DefenseConfig {
                method,
                rank: ev.config.harness.bench_rank,
                alpha: ev.config.harness.bench_alpha,
                target_layers: LayerId::last_block_norms(depth, spec.layers),
                ..ev.config.defense.clone()
            };
            let hooks = install_hooks(&ev.model, &defense).map_err(ctx)?;
            Ok(Some((defense, hooks)))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut configs = vec![None];
    configs.extend(defenses.iter().flatten().map(|(_, hooks)| Some(hooks.clone())));
    let times = time_batches(ev, &configs)?;
    let baseline = times[0];
    let mut timed = times[1..].iter();

    let mut rows = Vec::with_capacity(specs.len());
    for (spec, defense) in specs.iter().zip(&defenses) {
        let row = match defense {
            None => {
                let mut r = ev.row("bench", &spec.to_string(), None, ev.attacked, baseline);
                r.overhead = 1.0;
                r
            }
            Some((defense, _)) => {
                let ms = *timed.next().expect("one timing per defended spec");
                let (m, _) = ev.defended(defense).map_err(|e| e.context(format!("bench row {spec}")))?;
                let mut r = ev.row("bench", &spec.to_string(), Some(defense), m, ms);
                r.overhead = ms / baseline;
                r
            }
        };
        rows.push(row);
    }
    let values: Vec<String> = specs.iter().map(ToString::to_string).collect();
    Ok(SweepReport { metadata: ev.metadata(ReportKind::Bench, "", &values), rows })
}

/// Regenerates a report from its metadata alone.
pub fn rerun(report: &SweepReport) -> Result<SweepReport> {
    let md = &report.metadata;
    match md.kind {
        ReportKind::Sweep => run_sweep(md.axis.parse()?, &md.values, &md.config),
        ReportKind::Bench => {
            let specs = md.values.iter().map(|v| v.parse()).collect::<Result<Vec<BenchSpec>>>()?;
            run_bench(&specs, &md.config)
        }
    }
}
