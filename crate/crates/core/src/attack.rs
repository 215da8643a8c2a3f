//! L-infinity PGD against an [`ImageEncoder`].
//!
//! Each iterate moves every pixel by `step_size` in the sign direction of the
//! gradient of `-cos(f_I(x), t)`, then projects onto the epsilon ball around
//! the clean image, then clamps to the pixel range. Ascent on the negative
//! cosine drives image-text similarity down.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{loss_and_grad, ImageEncoder, Loss};
use crate::seeds;
use crate::tensor::DenseTensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub step_size: f64,
    pub steps: usize,
    pub clamp_min: f64,
    pub clamp_max: f64,
    pub seed: u64,
    /// Start from a uniform point in the epsilon ball instead of the image.
    pub random_start: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: 8.0 / 255.0,
            step_size: 6.0 / 255.0,
            steps: 10,
            clamp_min: 0.0,
            clamp_max: 1.0,
            seed: 0,
            random_start: false,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        // Zero budget is allowed and returns the input unchanged.
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::config(format!("epsilon must be finite and >= 0, got {}", self.epsilon)));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::config(format!("step_size must be > 0, got {}", self.step_size)));
        }
        if self.steps == 0 {
            return Err(Error::config("steps must be >= 1"));
        }
        if self.clamp_min.is_nan() || self.clamp_max.is_nan() || self.clamp_min >= self.clamp_max {
            return Err(Error::config(format!("clamp range [{}, {}] is empty", self.clamp_min, self.clamp_max)));
        }
        Ok(())
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Bounds of the epsilon ball around `o`, pulled inward by an ulp where
/// rounding would otherwise leave `|bound - o| > epsilon`.
fn ball(o: f64, eps: f64) -> (f64, f64) {
    let (mut lo, mut hi) = (o - eps, o + eps);
    while o - lo > eps {
        lo = lo.next_up();
    }
    while hi - o > eps {
        hi = hi.next_down();
    }
    (lo, hi)
}

fn project_and_clamp(adv: &mut [f64], x: &[f64], cfg: &AttackConfig) {
    for (a, &o) in adv.iter_mut().zip(x) {
        let (lo, hi) = ball(o, cfg.epsilon);
        *a = a.clamp(lo, hi).clamp(cfg.clamp_min, cfg.clamp_max);
    }
}

/// Runs PGD and returns the adversarial image.
pub fn pgd_attack<E: ImageEncoder + ?Sized>(
    model: &E,
    x: &DenseTensor,
    text_embedding: &[f64],
    cfg: &AttackConfig,
) -> Result<DenseTensor> {
    pgd_attack_observed(model, x, text_embedding, cfg, |_, _| {})
}

/// [`pgd_attack`] that hands every iterate (after projection and clamping)
/// to `observe` together with its 1-based step index.
pub fn pgd_attack_observed<E, F>(
    model: &E,
    x: &DenseTensor,
    text_embedding: &[f64],
    cfg: &AttackConfig,
    mut observe: F,
) -> Result<DenseTensor>
where
    E: ImageEncoder + ?Sized,
    F: FnMut(usize, &DenseTensor),
{
    cfg.validate()?;
    if x.data().iter().any(|&v| !(cfg.clamp_min..=cfg.clamp_max).contains(&v)) {
        return Err(Error::invalid("clean image has pixels outside the clamp range"));
    }
    let mut adv = x.clone();
    if cfg.random_start && cfg.epsilon > 0.0 {
        let mut rng = seeds::rng(cfg.seed, &[seeds::tag("random_start")]);
        for a in adv.data_mut() {
            *a += rng.gen_range(-cfg.epsilon..=cfg.epsilon);
        }
        project_and_clamp(adv.data_mut(), x.data(), cfg);
    }
    for step in 1..=cfg.steps {
        let (_, grad) = loss_and_grad(model, &adv, text_embedding, Loss::NegativeCosine)?;
        for (a, g) in adv.data_mut().iter_mut().zip(grad.data()) {
            *a += cfg.step_size * sign(*g);
        }
        project_and_clamp(adv.data_mut(), x.data(), cfg);
        debug_assert!(adv
            .data()
            .iter()
            .zip(x.data())
            .all(|(a, o)| (a - o).abs() <= cfg.epsilon && (cfg.clamp_min..=cfg.clamp_max).contains(a)));
        observe(step, &adv);
    }
    Ok(adv)
}

/// Attacks image `i` against `texts[i]`. Image `i` uses seed
/// `derive(cfg.seed, [i])` for its random start.
pub fn pgd_attack_batch<E: ImageEncoder + ?Sized>(
    model: &E,
    images: &[DenseTensor],
    texts: &[Vec<f64>],
    cfg: &AttackConfig,
) -> Result<Vec<DenseTensor>> {
    if images.len() != texts.len() {
        return Err(Error::invalid(format!("{} images but {} text embeddings", images.len(), texts.len())));
    }
    let one = |i: usize| {
        let c = AttackConfig { seed: seeds::derive(cfg.seed, &[i as u64]), ..cfg.clone() };
        pgd_attack(model, &images[i], &texts[i], &c)
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..images.len()).into_par_iter().map(one).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..images.len()).map(one).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationStats {
    pub linf: f64,
    pub l2: f64,
    /// Fraction of pixels with a nonzero change.
    pub changed_fraction: f64,
}

pub fn perturbation_stats(x: &DenseTensor, x_adv: &DenseTensor) -> Result<PerturbationStats> {
    let d = x_adv.sub(x)?;
    let n = d.len().max(1) as f64;
    Ok(PerturbationStats {
        linf: d.data().iter().fold(0.0, |m, v| m.max(v.abs())),
        l2: d.frobenius_norm(),
        changed_fraction: d.data().iter().filter(|v| **v != 0.0).count() as f64 / n,
    })
}

/// One line of a bulk-attack manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Path of the clean TDF1 image, relative to the manifest.
    pub image: String,
    pub caption_id: usize,
}
