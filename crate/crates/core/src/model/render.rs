//! Synthetic paired data: seeded token captions and a smooth map from a
//! caption to a grayscale image.
//!
//! Every vocabulary token owns a fixed smooth pattern made of a few
//! Gaussian blobs and one low-frequency plane wave. A caption renders to
//! `0.5 + 0.45 * tanh(sum of its token patterns)` plus small seeded pixel
//! noise, clamped to `[0, 1]`. The image therefore depends on the caption's
//! token multiset, which is what the bag-of-tokens text encoder sees.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::seeds;
use crate::tensor::DenseTensor;

const BLOBS_PER_TOKEN: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct Renderer {
    image_size: usize,
    patterns: Vec<Vec<f64>>,
}

impl Renderer {
    pub fn new(image_size: usize, vocab_size: usize, seed: u64) -> Self {
        let s = image_size as f64;
        let patterns = (0..vocab_size)
            .map(|tok| {
                let mut rng = seeds::rng(seed, &[seeds::tag("render"), tok as u64]);
                let blobs: Vec<(f64, f64, f64, f64)> = (0..BLOBS_PER_TOKEN)
                    .map(|_| {
                        let cy = rng.gen_range(0.1..0.9) * s;
                        let cx = rng.gen_range(0.1..0.9) * s;
                        let width = rng.gen_range(0.08..0.22) * s;
                        let amp = rng.gen_range(0.4..1.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                        (cy, cx, width, amp)
                    })
                    .collect();
                let fy = rng.gen_range(-2.0..2.0);
                let fx = rng.gen_range(-2.0..2.0);
                let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                let wave_amp = rng.gen_range(0.1..0.3);
                let mut p = Vec::with_capacity(image_size * image_size);
                for i in 0..image_size {
                    for j in 0..image_size {
                        let (y, x) = (i as f64 + 0.5, j as f64 + 0.5);
                        let mut v: f64 = blobs
                            .iter()
                            .map(|&(cy, cx, w, a)| {
                                let d2 = (y - cy).powi(2) + (x - cx).powi(2);
                                a * (-d2 / (2.0 * w * w)).exp()
                            })
                            .sum();
                        v += wave_amp * (std::f64::consts::TAU * (fy * y + fx * x) / s + phase).sin();
                        p.push(v);
                    }
                }
                p
            })
            .collect();
        Self { image_size, patterns }
    }

    pub fn vocab_size(&self) -> usize {
        self.patterns.len()
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    /// Renders `tokens`; `noise` is the half-width of the uniform pixel noise
    /// drawn from `noise_seed`.
    pub fn render(&self, tokens: &[usize], noise: f64, noise_seed: u64) -> Result<DenseTensor> {
        let n = self.image_size * self.image_size;
        let mut acc = vec![0.0; n];
        for &t in tokens {
            let p = self
                .patterns
                .get(t)
                .ok_or_else(|| Error::invalid(format!("token {t} outside vocabulary of {}", self.patterns.len())))?;
            for (a, v) in acc.iter_mut().zip(p) {
                *a += v;
            }
        }
        let mut rng = seeds::rng(noise_seed, &[seeds::tag("pixel-noise")]);
        let data = acc
            .into_iter()
            .map(|a| {
                let e = if noise > 0.0 { rng.gen_range(-noise..noise) } else { 0.0 };
                (0.5 + 0.45 * a.tanh() + e).clamp(0.0, 1.0)
            })
            .collect();
        DenseTensor::new(vec![self.image_size, self.image_size], data)
    }
}

/// Draws `count` captions of `len` distinct tokens each, with pairwise
/// distinct token sets.
pub fn generate_captions(count: usize, len: usize, vocab_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if len == 0 || len > vocab_size {
        return Err(Error::invalid(format!("caption length {len} with vocabulary {vocab_size}")));
    }
    let mut rng = seeds::rng(seed, &[seeds::tag("captions")]);
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while out.len() < count {
        attempts += 1;
        if attempts > count * 1000 + 1000 {
            return Err(Error::invalid(format!(
                "cannot draw {count} distinct captions of length {len} from {vocab_size} tokens"
            )));
        }
        let mut toks = sample(&mut rng, vocab_size, len).into_vec();
        let mut key = toks.clone();
        key.sort_unstable();
        if seen.insert(key) {
            toks.shrink_to_fit();
            out.push(toks);
        }
    }
    Ok(out)
}
