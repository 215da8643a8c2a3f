//! Activation filtering at intercepted layers.
//!
//! A bound layer's output `T` is replaced by
//! `alpha * T + (1 - alpha) * T_hat`, where `T_hat` is the low-rank
//! reconstruction of `T`. `alpha` weights the original activation, so
//! `alpha = 1` disables the defense and smaller values filter harder.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::decomp::{low_rank_approximation, DecompSettings, Method};
use crate::error::{Error, Result};
use crate::model::{Hookable, LayerId};
use crate::tensor::DenseTensor;

/// Transformation applied to an intercepted activation.
pub trait ActivationHook: Send + Sync {
    fn apply(&self, layer: LayerId, activation: &DenseTensor) -> Result<DenseTensor>;
}

/// Hooks keyed by layer. The encoder visits bound layers in forward order.
#[derive(Clone, Default)]
pub struct HookRegistry {
    bindings: BTreeMap<LayerId, Arc<dyn ActivationHook>>,
}

impl fmt::Debug for HookRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HookRegistry").field("layers", &self.layers()).finish()
    }
}

impl HookRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Binds `hook` to `layer`; a layer takes at most one binding.
    pub fn bind(&mut self, layer: LayerId, hook: Arc<dyn ActivationHook>) -> Result<()> {
        if self.bindings.contains_key(&layer) {
            return Err(Error::config(format!("layer {layer} already has a hook")));
        }
        self.bindings.insert(layer, hook);
        Ok(())
    }

    pub fn remove(&mut self, layer: LayerId) -> bool {
        self.bindings.remove(&layer).is_some()
    }

    pub fn clear(&mut self) {
        self.bindings.clear();
    }

    pub fn get(&self, layer: LayerId) -> Option<&dyn ActivationHook> {
        self.bindings.get(&layer).map(|h| h.as_ref())
    }

    pub fn layers(&self) -> Vec<LayerId> {
        self.bindings.keys().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.bindings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bindings.is_empty()
    }
}

/// Defense settings. Parses from a flat JSON object with keys `method`,
/// `rank`, `alpha`, `layers`, `max_iters`, `tolerance`, `seed`,
/// `per_sample`, `fail_open`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DefenseConfig {
    pub method: Method,
    pub rank: usize,
    /// Weight on the original activation.
    pub alpha: f64,
    #[serde(rename = "layers")]
    pub target_layers: Vec<LayerId>,
    pub max_iters: usize,
    pub tolerance: f64,
    pub seed: u64,
    /// Decompose each `(tokens, width)` slice separately instead of the
    /// whole `(batch, tokens, width)` tensor.
    pub per_sample: bool,
    /// Pass activations through unchanged when a decomposition fails.
    pub fail_open: bool,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        Self {
            method: Method::Tt,
            rank: 32,
            alpha: 0.2,
            target_layers: vec![LayerId::FinalNorm],
            max_iters: DecompSettings::DEFAULT_MAX_ITERS,
            tolerance: DecompSettings::DEFAULT_TOLERANCE,
            seed: 0,
            per_sample: false,
            fail_open: false,
        }
    }
}

impl DefenseConfig {
    pub fn new(method: Method, rank: usize, alpha: f64, layers: Vec<LayerId>) -> Self {
        Self { method, rank, alpha, target_layers: layers, ..Self::default() }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::config(format!("defense config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn decomp_settings(&self) -> DecompSettings {
        DecompSettings {
            method: self.method,
            rank: self.rank,
            max_iters: self.max_iters,
            tolerance: self.tolerance,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if self.target_layers.is_empty() {
            return Err(Error::config("defense needs at least one target layer"));
        }
        let mut seen = self.target_layers.clone();
        seen.sort();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config("duplicate target layer"));
        }
        self.decomp_settings().validate().map_err(|e| Error::config(e.to_string()))
    }
}

/// Low-rank reconstruction used by the defense, honoring `per_sample`.
pub fn defense_reconstruction(t: &DenseTensor, cfg: &DefenseConfig) -> Result<DenseTensor> {
    let settings = cfg.decomp_settings();
    if cfg.per_sample && t.order() >= 3 {
        let parts =
            (0..t.shape()[0]).map(|i| low_rank_approximation(&t.slice0(i)?, &settings)).collect::<Result<Vec<_>>>()?;
        DenseTensor::stack(&parts)
    } else {
        low_rank_approximation(t, &settings)
    }
}

/// `alpha * original + (1 - alpha) * reconstruction`.
pub fn blend(original: &DenseTensor, reconstruction: &DenseTensor, alpha: f64) -> Result<DenseTensor> {
    original.axpby(alpha, reconstruction, 1.0 - alpha)
}

pub fn apply_defense(t: &DenseTensor, cfg: &DefenseConfig) -> Result<DenseTensor> {
    if cfg.alpha == 1.0 {
        return Ok(t.clone());
    }
    if t.order() < 2 {
        return Err(Error::invalid(format!("defended activations need order >= 2, got {:?}", t.shape())));
    }
    match defense_reconstruction(t, cfg) {
        Ok(rec) => blend(t, &rec, cfg.alpha),
        Err(_) if cfg.fail_open => Ok(t.clone()),
        Err(e) => Err(e),
    }
}

struct DefenseHook {
    config: Arc<DefenseConfig>,
}

impl ActivationHook for DefenseHook {
    fn apply(&self, _layer: LayerId, activation: &DenseTensor) -> Result<DenseTensor> {
        apply_defense(activation, &self.config)
    }
}

/// Builds a registry routing every target layer through [`apply_defense`].
pub fn install_hooks<M: Hookable + ?Sized>(model: &M, cfg: &DefenseConfig) -> Result<HookRegistry> {
    cfg.validate()?;
    let catalog = model.layer_catalog();
    if let Some(bad) = cfg.target_layers.iter().find(|l| !catalog.contains(l)) {
        let valid: Vec<String> = catalog.iter().map(ToString::to_string).collect();
        return Err(Error::config(format!("unknown layer {bad}; valid layers: {}", valid.join(", "))));
    }
    let shared = Arc::new(cfg.clone());
    let mut reg = HookRegistry::new();
    for &layer in &cfg.target_layers {
        reg.bind(layer, Arc::new(DefenseHook { config: shared.clone() }))?;
    }
    Ok(reg)
}
