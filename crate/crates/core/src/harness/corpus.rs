use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attack::ManifestEntry;
use crate::error::{Error, Result};
use crate::model::{generate_captions, ToyClip};
use crate::seeds;
use crate::tensor::{read_tdf1, write_tdf1, DenseTensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub pairs: usize,
    /// Half-width of the uniform pixel noise added to each render.
    pub noise: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self { pairs: 200, noise: 0.05, seed: 0 }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pairs == 0 {
            return Err(Error::config("corpus needs at least one pair"));
        }
        if !(0.0..=0.5).contains(&self.noise) {
            return Err(Error::config(format!("corpus noise must lie in [0, 0.5], got {}", self.noise)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusPair {
    pub id: usize,
    pub image: DenseTensor,
    pub tokens: Vec<usize>,
}

/// Seeded image/caption pairs rendered by the model's renderer.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalCorpus {
    pub pairs: Vec<CorpusPair>,
    pub seed: u64,
}

impl RetrievalCorpus {
    pub fn generate(model: &ToyClip, cfg: &CorpusConfig) -> Result<Self> {
        cfg.validate()?;
        let mc = model.config();
        let caps = generate_captions(
            cfg.pairs,
            mc.caption_len,
            mc.vocab_size,
            seeds::derive(cfg.seed, &[seeds::tag("corpus-captions")]),
        )?;
        let pairs = caps
            .into_iter()
            .enumerate()
            .map(|(id, tokens)| {
                let ns = seeds::derive(cfg.seed, &[seeds::tag("corpus-noise"), id as u64]);
                let image = model.renderer().render(&tokens, cfg.noise, ns)?;
                Ok(CorpusPair { id, image, tokens })
            })
            .collect::<Result<_>>()?;
        Ok(Self { pairs, seed: cfg.seed })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn images(&self) -> Vec<DenseTensor> {
        self.pairs.iter().map(|p| p.image.clone()).collect()
    }

    pub fn text_embeddings(&self, model: &ToyClip) -> Result<Vec<Vec<f64>>> {
        self.pairs.iter().map(|p| model.encode_text(&p.tokens)).collect()
    }
}

/// On-disk description of a set of images and the captions they pair with.
/// Image paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub seed: u64,
    pub captions: Vec<Vec<usize>>,
    pub entries: Vec<ManifestEntry>,
}

impl CorpusManifest {
    pub const FILE_NAME: &'static str = "manifest.json";

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::from(e).context(path.display().to_string()))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if let Some(e) = m.entries.iter().find(|e| e.caption_id >= m.captions.len()) {
            return Err(Error::Format(format!("{}: caption_id {} out of range", path.display(), e.caption_id)));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text).map_err(|e| Error::from(e).context(path.display().to_string()))
    }

    /// Reads every image the manifest points at, resolving paths against `dir`.
    pub fn read_images(&self, dir: &Path) -> Result<Vec<DenseTensor>> {
        self.entries
            .iter()
            .map(|e| {
                let p = dir.join(&e.image);
                read_tdf1(&p).map_err(|err| err.context(p.display().to_string()))
            })
            .collect()
    }

    pub fn tokens(&self, entry: &ManifestEntry) -> &[usize] {
        &self.captions[entry.caption_id]
    }
}

/// Writes `images` as `images/NNNN.tdf` under `dir` plus a manifest pairing
/// image `i` with caption `i`.
pub fn write_image_set(
    dir: &Path,
    seed: u64,
    captions: Vec<Vec<usize>>,
    images: &[DenseTensor],
) -> Result<CorpusManifest> {
    if captions.len() != images.len() {
        return Err(Error::invalid(format!("{} captions for {} images", captions.len(), images.len())));
    }
    let img_dir = dir.join("images");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::from(e).context(img_dir.display().to_string()))?;
    let mut entries = Vec::with_capacity(images.len());
    for (i, img) in images.iter().enumerate() {
        let rel = format!("images/{i:04}.tdf");
        let p = dir.join(&rel);
        write_tdf1(&p, img).map_err(|e| e.context(p.display().to_string()))?;
        entries.push(ManifestEntry { image: rel, caption_id: i });
    }
    let manifest = CorpusManifest { seed, captions, entries };
    manifest.save(&dir.join(CorpusManifest::FILE_NAME))?;
    Ok(manifest)
}

impl RetrievalCorpus {
    pub fn write_dir(&self, dir: &Path) -> Result<CorpusManifest> {
        let captions = self.pairs.iter().map(|p| p.tokens.clone()).collect();
        write_image_set(dir, self.seed, captions, &self.images())
    }

    /// Loads a corpus written by [`Self::write_dir`] or any manifest.
    pub fn read_manifest(path: &Path) -> Result<Self> {
        let m = CorpusManifest::load(path)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        let images = m.read_images(dir)?;
        let pairs = m
            .entries
            .iter()
            .zip(images)
            .enumerate()
            .map(|(id, (e, image))| CorpusPair { id, image, tokens: m.tokens(e).to_vec() })
            .collect();
        Ok(Self { pairs, seed: m.seed })
    }
}
