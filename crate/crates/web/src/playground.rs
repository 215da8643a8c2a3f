//! Target-independent state behind the browser demo.

use tensor_defense::attack::{pgd_attack_batch, pgd_attack_observed, AttackConfig};
use tensor_defense::config::ExperimentConfig;
use tensor_defense::decomp::{decompose_traced, DecompSettings, Method};
use tensor_defense::defense::{blend, install_hooks, DefenseConfig};
use tensor_defense::harness::{mean_pair_similarity, recall_many, Direction, RetrievalCorpus};
use tensor_defense::model::{similarity, ImageEncoder, LayerId, ToyClip};
use tensor_defense::tensor::DenseTensor;
use tensor_defense::{Error, Result};

/// A small encoder, a handful of caption/image pairs, and their attacked
/// counterparts.
#[derive(Debug, Clone)]
pub struct Playground {
    model: ToyClip,
    attack: AttackConfig,
    defense_seed: u64,
    tokens: Vec<Vec<usize>>,
    clean: Vec<DenseTensor>,
    adversarial: Vec<DenseTensor>,
    texts: Vec<Vec<f64>>,
}

/// Low-rank fit of the whole image stack, blended back with the originals.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFit {
    /// `(pairs, size, size)`.
    pub blended: DenseTensor,
    pub relative_error: f64,
    pub ranks: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackTrace {
    pub adversarial: DenseTensor,
    /// Perturbation mapped from `[-eps, eps]` to `[0, 1]`.
    pub magnified: DenseTensor,
    /// Image-caption similarity before the attack and after each step.
    pub similarity: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Retrieval {
    pub mean_sim: f64,
    pub recall_at_1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DefenseView {
    pub clean: Retrieval,
    pub attacked: Retrieval,
    pub defended_clean: Retrieval,
    pub defended_attacked: Retrieval,
}

impl Playground {
    /// Builds a `depth`-block encoder and attacks `pairs` corpus images.
    pub fn new(seed: u64, depth: usize, pairs: usize) -> Result<Self> {
        let mut cfg = ExperimentConfig::default().with_seed(seed);
        cfg.model.depth = depth;
        cfg.model.calibration_captions = 128;
        cfg.corpus.pairs = pairs;
        cfg.validate()?;
        let model = ToyClip::new(cfg.model.clone())?;
        let corpus = RetrievalCorpus::generate(&model, &cfg.corpus)?;
        let texts = corpus.text_embeddings(&model)?;
        let clean = corpus.images();
        let adversarial = pgd_attack_batch(&model, &clean, &texts, &cfg.attack)?;
        Ok(Self {
            tokens: corpus.pairs.into_iter().map(|p| p.tokens).collect(),
            model,
            attack: cfg.attack,
            defense_seed: cfg.defense.seed,
            clean,
            adversarial,
            texts,
        })
    }

    pub fn len(&self) -> usize {
        self.clean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clean.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.model.config().image_size
    }

    pub fn epsilon(&self) -> f64 {
        self.attack.epsilon
    }

    pub fn caption(&self, index: usize) -> Result<&[usize]> {
        self.check(index)?;
        Ok(&self.tokens[index])
    }

    pub fn clean_image(&self, index: usize) -> Result<&DenseTensor> {
        self.check(index)?;
        Ok(&self.clean[index])
    }

    pub fn adversarial_image(&self, index: usize) -> Result<&DenseTensor> {
        self.check(index)?;
        Ok(&self.adversarial[index])
    }

    fn check(&self, index: usize) -> Result<()> {
        if index >= self.len() {
            return Err(Error::InvalidArgument(format!("image {index} out of range 0..{}", self.len())));
        }
        Ok(())
    }

    /// Decomposes the clean image stack at `rank` and returns
    /// `alpha * X + (1 - alpha) * X_hat`.
    pub fn image_fit(&self, method: Method, rank: usize, alpha: f64) -> Result<ImageFit> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::InvalidArgument(format!("alpha must lie in [0, 1], got {alpha}")));
        }
        let stack = DenseTensor::stack(&self.clean)?;
        let settings = DecompSettings::new(method, rank).with_seed(self.defense_seed);
        let (factors, trace) = decompose_traced(&stack, &settings)?;
        let approx = factors.reconstruct()?;
        Ok(ImageFit {
            blended: blend(&stack, &approx, alpha)?,
            relative_error: trace.relative_error(),
            ranks: factors.ranks(),
        })
    }

    /// Re-runs the attack on one image for `steps` steps, recording the
    /// similarity to its caption along the way.
    pub fn attack_trace(&self, index: usize, steps: usize) -> Result<AttackTrace> {
        self.check(index)?;
        let (x, text) = (&self.clean[index], &self.texts[index]);
        let cfg = AttackConfig { steps, ..self.attack.clone() };
        let mut sims = vec![similarity(&self.model.embed_image(x)?, text)];
        let mut failure = None;
        let adversarial =
            pgd_attack_observed(&self.model, x, text, &cfg, |_, adv| match self.model.embed_image(adv) {
                Ok(e) => sims.push(similarity(&e, text)),
                Err(e) => failure = failure.take().or(Some(e)),
            })?;
        if let Some(e) = failure {
            return Err(e);
        }
        let eps = cfg.epsilon.max(f64::MIN_POSITIVE);
        let magnified = adversarial.sub(x)?.map(|d| (0.5 + d / (2.0 * eps)).clamp(0.0, 1.0));
        Ok(AttackTrace { adversarial, magnified, similarity: sims })
    }

    /// Retrieval over the playground pairs with and without the defense at
    /// the final norm layer.
    pub fn defense_view(&self, method: Method, rank: usize, alpha: f64) -> Result<DefenseView> {
        let cfg = DefenseConfig {
            seed: self.defense_seed,
            ..DefenseConfig::new(method, rank, alpha, vec![LayerId::FinalNorm])
        };
        let hooks = install_hooks(&self.model, &cfg)?;
        let score = |images: &[DenseTensor], defended: bool| -> Result<Retrieval> {
            let emb = self.model.encode_images(images, defended.then_some(&hooks))?;
            Ok(Retrieval {
                mean_sim: mean_pair_similarity(&emb, &self.texts),
                recall_at_1: recall_many(&emb, &self.texts, &[1], Direction::ImageToText)?[0],
            })
        };
        Ok(DefenseView {
            clean: score(&self.clean, false)?,
            attacked: score(&self.adversarial, false)?,
            defended_clean: score(&self.clean, true)?,
            defended_attacked: score(&self.adversarial, true)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn out_of_range_index_is_rejected() {
        let p = Playground::new(1, 1, 3).unwrap();
        assert!(p.clean_image(3).is_err());
        assert!(p.attack_trace(7, 1).is_err());
        assert_eq!(p.caption(0).unwrap().len(), 4);
    }

    #[test]
    fn bad_alpha_is_rejected() {
        let p = Playground::new(1, 1, 3).unwrap();
        assert!(p.image_fit(Method::Tt, 2, 1.5).is_err());
        assert!(p.defense_view(Method::Tt, 2, -0.1).is_err());
    }
}
