//! A small deterministic image/text encoder pair with a joint embedding
//! space, exact input gradients, and named interception points.
//!
//! Image side: grayscale `image_size x image_size` input, non-overlapping
//! patches, a class token, `depth` pre-norm transformer blocks, a final
//! layer norm over all tokens, and a projection of the class token. Text
//! side: mean of token embeddings followed by a projection. All weights are
//! random from `seed` except the text projection, which is fitted by ridge
//! regression so that captions land near the embeddings of their renders.

mod layers;
mod render;

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::defense::{ActivationHook, HookRegistry};
use crate::error::{Error, Result};
use crate::seeds;
use crate::tensor::{solve_spd, DenseTensor, Matrix};
use layers::{
    affine, affine_backward_input, attention, attention_backward, gelu, gelu_grad, layer_norm, layer_norm_backward,
    AttentionCache, LayerNormCache,
};

pub use render::{generate_captions, Renderer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyEncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    /// Patch filters are drawn from separable cosines with this many
    /// frequencies per axis; 0 draws unconstrained dense filters.
    pub patch_frequencies: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub mlp_hidden: usize,
    pub vocab_size: usize,
    pub caption_len: usize,
    /// Captions rendered to fit the text projection.
    pub calibration_captions: usize,
    pub seed: u64,
}

impl Default for ToyEncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            patch_frequencies: 3,
            width: 64,
            depth: 6,
            heads: 4,
            embed_dim: 32,
            mlp_hidden: 128,
            vocab_size: 32,
            caption_len: 4,
            calibration_captions: 256,
            seed: 0,
        }
    }
}

impl ToyEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!("image_size {} not divisible by patch_size {}", self.image_size, self.patch_size));
        }
        if self.heads == 0 || self.width == 0 || !self.width.is_multiple_of(self.heads) {
            return bad(format!("width {} not divisible by heads {}", self.width, self.heads));
        }
        if self.patch_frequencies > self.patch_size {
            return bad(format!("patch_frequencies {} exceeds patch_size {}", self.patch_frequencies, self.patch_size));
        }
        if self.depth == 0 {
            return bad("depth must be at least 1".into());
        }
        if self.embed_dim == 0 || self.mlp_hidden == 0 {
            return bad("embed_dim and mlp_hidden must be positive".into());
        }
        if self.caption_len == 0 || self.caption_len > self.vocab_size {
            return bad(format!("caption_len {} with vocab_size {}", self.caption_len, self.vocab_size));
        }
        if self.calibration_captions == 0 {
            return bad("calibration_captions must be positive".into());
        }
        Ok(())
    }

    pub fn patches(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }

    pub fn tokens(&self) -> usize {
        self.patches() + 1
    }

    pub fn image_shape(&self) -> Vec<usize> {
        vec![self.image_size, self.image_size]
    }
}

/// Interception points of the image encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerId {
    /// Attention output projection of block `i`, before the residual add.
    AttnOut(usize),
    /// Second layer norm of block `i` (input of the MLP).
    Norm2(usize),
    /// MLP output of block `i`, before the residual add.
    MlpOut(usize),
    /// Final layer norm, applied to every token.
    FinalNorm,
}

impl LayerId {
    fn position(&self) -> (usize, usize) {
        match *self {
            LayerId::AttnOut(i) => (i, 0),
            LayerId::Norm2(i) => (i, 1),
            LayerId::MlpOut(i) => (i, 2),
            LayerId::FinalNorm => (usize::MAX, 0),
        }
    }

    /// Second norm layers of the last `k` blocks of a `depth`-block encoder.
    pub fn last_block_norms(depth: usize, k: usize) -> Vec<LayerId> {
        (depth.saturating_sub(k)..depth).map(LayerId::Norm2).collect()
    }
}

impl Ord for LayerId {
    fn cmp(&self, other: &Self) -> Ordering {
        self.position().cmp(&other.position())
    }
}

impl PartialOrd for LayerId {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerId::AttnOut(i) => write!(f, "block{i}.attn_out"),
            LayerId::Norm2(i) => write!(f, "block{i}.norm2"),
            LayerId::MlpOut(i) => write!(f, "block{i}.mlp_out"),
            LayerId::FinalNorm => f.write_str("final_norm"),
        }
    }
}

impl FromStr for LayerId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "final_norm" {
            return Ok(LayerId::FinalNorm);
        }
        let bad = || Error::config(format!("unrecognized layer identifier {s:?}"));
        let rest = s.strip_prefix("block").ok_or_else(bad)?;
        let (idx, kind) = rest.split_once('.').ok_or_else(bad)?;
        let i: usize = idx.parse().map_err(|_| bad())?;
        match kind {
            "norm2" => Ok(LayerId::Norm2(i)),
            "attn_out" => Ok(LayerId::AttnOut(i)),
            "mlp_out" => Ok(LayerId::MlpOut(i)),
            _ => Err(bad()),
        }
    }
}

impl Serialize for LayerId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LayerId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// An encoder whose named layers can be intercepted.
pub trait Hookable {
    fn layer_catalog(&self) -> Vec<LayerId>;
}

/// Image-side interface needed by the attack.
pub trait ImageEncoder: Sync {
    fn image_shape(&self) -> Vec<usize>;

    /// Unnormalized embedding together with its pullback, mapping the
    /// gradient with respect to the embedding to the gradient with respect
    /// to the image.
    #[allow(clippy::type_complexity)]
    fn embed_with_pullback<'a>(
        &'a self,
        x: &DenseTensor,
    ) -> Result<(Vec<f64>, Box<dyn FnOnce(&[f64]) -> Result<DenseTensor> + 'a>)>;

    fn embed_image(&self, x: &DenseTensor) -> Result<Vec<f64>> {
        let (z, _) = self.embed_with_pullback(x)?;
        normalize(z)
    }
}

/// Differentiable objectives with respect to the input image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Loss {
    /// `-cos(f_I(x), t)`.
    NegativeCosine,
}

/// Loss value and its exact gradient with respect to `x`.
pub fn loss_and_grad<E: ImageEncoder + ?Sized>(
    model: &E,
    x: &DenseTensor,
    text_embedding: &[f64],
    loss: Loss,
) -> Result<(f64, DenseTensor)> {
    let Loss::NegativeCosine = loss;
    let (z, pullback) = model.embed_with_pullback(x)?;
    if z.len() != text_embedding.len() {
        return Err(Error::invalid(format!(
            "embedding length {} vs text embedding length {}",
            z.len(),
            text_embedding.len()
        )));
    }
    let zn = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(zn.is_finite()) {
        return Err(Error::numerical("non-finite image embedding"));
    }
    if zn == 0.0 {
        return Err(Error::numerical("zero image embedding has no direction"));
    }
    let e: Vec<f64> = z.iter().map(|v| v / zn).collect();
    let cos: f64 = e.iter().zip(text_embedding).map(|(a, b)| a * b).sum();
    // d(-cos)/dz = -(t - cos * e) / |z|
    let dz: Vec<f64> = text_embedding.iter().zip(&e).map(|(t, ei)| -(t - cos * ei) / zn).collect();
    let g = pullback(&dz)?;
    if !g.is_finite() {
        return Err(Error::numerical("non-finite input gradient"));
    }
    Ok((-cos, g))
}

/// `dL/dx` for `L` = `loss(x, text)`.
pub fn grad_wrt_image<E: ImageEncoder + ?Sized>(
    model: &E,
    x: &DenseTensor,
    text_embedding: &[f64],
    loss: Loss,
) -> Result<DenseTensor> {
    loss_and_grad(model, x, text_embedding, loss).map(|(_, g)| g)
}

pub fn normalize(mut v: Vec<f64>) -> Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !n.is_finite() || n == 0.0 {
        return Err(Error::numerical("cannot normalize a zero or non-finite vector"));
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(v)
}

/// Cosine similarity of two unit vectors (their dot product).
pub fn similarity(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    ln1_g: Vec<f64>,
    ln1_b: Vec<f64>,
    wq: Matrix,
    wk: Matrix,
    wv: Matrix,
    wo: Matrix,
    bo: Vec<f64>,
    ln2_g: Vec<f64>,
    ln2_b: Vec<f64>,
    w1: Matrix,
    b1: Vec<f64>,
    w2: Matrix,
    b2: Vec<f64>,
}

struct BlockCache {
    ln1: LayerNormCache,
    attn: AttentionCache,
    ln2: LayerNormCache,
    pre_act: Matrix,
}

struct ForwardCache {
    blocks: Vec<BlockCache>,
    lnf: LayerNormCache,
}

/// The toy vision-language encoder pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyClip {
    config: ToyEncoderConfig,
    patch_w: Matrix,
    patch_b: Vec<f64>,
    cls: Vec<f64>,
    pos: Matrix,
    blocks: Vec<Block>,
    lnf_g: Vec<f64>,
    lnf_b: Vec<f64>,
    img_proj: Matrix,
    tok_emb: Matrix,
    text_proj: Matrix,
    renderer: Renderer,
}

/// `p*p x k*k` matrix whose columns are separable 2-D cosines with
/// frequencies `0..k` along each axis of a `p x p` patch.
fn cosine_basis(p: usize, k: usize) -> Matrix {
    let pi = std::f64::consts::PI;
    let scale = 8.0 / p as f64;
    Matrix::from_fn(p * p, k * k, |q, b| {
        let (y, x) = ((q / p) as f64 + 0.5, (q % p) as f64 + 0.5);
        let (fy, fx) = ((b / k) as f64, (b % k) as f64);
        scale * (pi * fy * y / p as f64).cos() * (pi * fx * x / p as f64).cos()
    })
}

struct WeightRng(rand_chacha::ChaCha8Rng);

impl WeightRng {
    /// Uniform entries with standard deviation `std`.
    fn matrix(&mut self, rows: usize, cols: usize, std: f64) -> Matrix {
        let a = std * 3f64.sqrt();
        Matrix::from_fn(rows, cols, |_, _| self.0.gen_range(-a..a))
    }

    fn vector(&mut self, n: usize, center: f64, spread: f64) -> Vec<f64> {
        (0..n).map(|_| center + self.0.gen_range(-spread..spread)).collect()
    }
}

impl ToyClip {
    pub fn new(config: ToyEncoderConfig) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut rng = WeightRng(seeds::rng(c.seed, &[seeds::tag("weights")]));
        let (w, h, p2) = (c.width, c.mlp_hidden, c.patch_size * c.patch_size);
        let inv = |n: usize| 1.0 / (n as f64).sqrt();
        let residual_scale = 1.0 / (2.0 * c.depth as f64).sqrt();

        let patch_w = match c.patch_frequencies {
            0 => rng.matrix(p2, w, 4.0 * inv(p2)),
            k => cosine_basis(c.patch_size, k).matmul(&rng.matrix(k * k, w, 4.0 * inv(k * k)))?,
        };
        let patch_b = rng.vector(w, 0.0, 0.1);
        let cls = rng.vector(w, 0.0, 1.0);
        let pos = rng.matrix(c.tokens(), w, 0.3);
        let blocks = (0..c.depth)
            .map(|_| Block {
                ln1_g: rng.vector(w, 1.0, 0.1),
                ln1_b: rng.vector(w, 0.0, 0.05),
                wq: rng.matrix(w, w, inv(w)),
                wk: rng.matrix(w, w, inv(w)),
                wv: rng.matrix(w, w, inv(w)),
                wo: rng.matrix(w, w, inv(w) * residual_scale * 2.0),
                bo: rng.vector(w, 0.0, 0.02),
                ln2_g: rng.vector(w, 1.0, 0.1),
                ln2_b: rng.vector(w, 0.0, 0.05),
                w1: rng.matrix(w, h, inv(w)),
                b1: rng.vector(h, 0.0, 0.1),
                w2: rng.matrix(h, w, inv(h) * residual_scale * 2.0),
                b2: rng.vector(w, 0.0, 0.02),
            })
            .collect();
        let lnf_g = rng.vector(w, 1.0, 0.1);
        let lnf_b = rng.vector(w, 0.0, 0.05);
        let img_proj = rng.matrix(w, c.embed_dim, inv(w));
        let tok_emb = rng.matrix(c.vocab_size, w, 1.0);
        let renderer = Renderer::new(c.image_size, c.vocab_size, seeds::derive(c.seed, &[seeds::tag("renderer")]));

        let mut model = Self {
            config,
            patch_w,
            patch_b,
            cls,
            pos,
            blocks,
            lnf_g,
            lnf_b,
            img_proj,
            tok_emb,
            text_proj: Matrix::zeros(w, 1),
            renderer,
        };
        model.text_proj = model.fit_text_projection()?;
        Ok(model)
    }

    pub fn config(&self) -> &ToyEncoderConfig {
        &self.config
    }

    pub fn renderer(&self) -> &Renderer {
        &self.renderer
    }

    fn calibration_images(&self) -> Result<(Vec<Vec<usize>>, Vec<DenseTensor>)> {
        let c = &self.config;
        let caps = generate_captions(
            c.calibration_captions,
            c.caption_len,
            c.vocab_size,
            seeds::derive(c.seed, &[seeds::tag("calibration")]),
        )?;
        let images = caps.iter().map(|t| self.renderer.render(t, 0.0, 0)).collect::<Result<_>>()?;
        Ok((caps, images))
    }

    /// Ridge regression from bag-of-token features to the normalized image
    /// embeddings of noise-free renders.
    fn fit_text_projection(&self) -> Result<Matrix> {
        let c = &self.config;
        let (caps, images) = self.calibration_images()?;
        let targets = self.encode_images(&images, None)?;
        let w = c.width;
        let feats: Vec<Vec<f64>> = caps.iter().map(|t| self.bag(t)).collect();
        let n = caps.len();
        let b = Matrix::from_fn(n, w, |i, j| feats[i][j]);
        let y = Matrix::from_fn(n, c.embed_dim, |i, j| targets[i][j]);
        let mut gram = b.t_matmul(&b)?;
        let ridge = 1e-3 * (0..w).map(|i| gram.get(i, i)).sum::<f64>() / w as f64;
        for i in 0..w {
            let v = gram.get(i, i);
            gram.set(i, i, v + ridge);
        }
        let rhs = b.t_matmul(&y)?.transpose();
        Ok(solve_spd(&gram, &rhs)?.transpose())
    }

    fn bag(&self, tokens: &[usize]) -> Vec<f64> {
        let w = self.config.width;
        let mut acc = vec![0.0; w];
        for &t in tokens {
            for (a, v) in acc.iter_mut().zip(self.tok_emb.row(t)) {
                *a += v;
            }
        }
        acc.iter_mut().for_each(|a| *a /= tokens.len() as f64);
        acc
    }

    pub fn encode_text(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        if tokens.is_empty() {
            return Err(Error::invalid("empty token sequence"));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::invalid(format!("token {t} outside vocabulary of {}", self.config.vocab_size)));
        }
        let bag = Matrix::new(1, self.config.width, self.bag(tokens))?;
        normalize(bag.matmul(&self.text_proj)?.into_data())
    }

    fn check_image(&self, x: &DenseTensor) -> Result<()> {
        if x.shape() != self.config.image_shape().as_slice() {
            return Err(Error::invalid(format!(
                "image shape {:?}, model expects {:?}",
                x.shape(),
                self.config.image_shape()
            )));
        }
        Ok(())
    }

    /// `patches x patch_size^2` matrix of centered pixels.
    fn patchify(&self, x: &DenseTensor) -> Matrix {
        let (s, p) = (self.config.image_size, self.config.patch_size);
        let g = s / p;
        let d = x.data();
        Matrix::from_fn(g * g, p * p, |k, q| {
            let (py, px) = (k / g, k % g);
            let (dy, dx) = (q / p, q % p);
            d[(py * p + dy) * s + px * p + dx] - 0.5
        })
    }

    fn embed_tokens(&self, x: &DenseTensor) -> Matrix {
        let patches = affine(&self.patchify(x), &self.patch_w, &self.patch_b);
        let w = self.config.width;
        Matrix::from_fn(self.config.tokens(), w, |t, j| {
            let base = if t == 0 { self.cls[j] } else { patches.get(t - 1, j) };
            base + self.pos.get(t, j)
        })
    }

    fn attention_sublayer(&self, b: &Block, x: &Matrix) -> (Matrix, LayerNormCache, AttentionCache) {
        let (h1, ln1) = layer_norm(x, &b.ln1_g, &b.ln1_b);
        let q = h1.matmul(&b.wq).expect("wq");
        let k = h1.matmul(&b.wk).expect("wk");
        let v = h1.matmul(&b.wv).expect("wv");
        let (cat, cache) = attention(q, k, v, self.config.heads);
        (affine(&cat, &b.wo, &b.bo), ln1, cache)
    }

    fn mlp(&self, b: &Block, h2: &Matrix) -> (Matrix, Matrix) {
        let pre = affine(h2, &b.w1, &b.b1);
        let act = pre.map_elements(gelu);
        (affine(&act, &b.w2, &b.b2), pre)
    }

    /// Batched forward pass. Hooked layers see the whole
    /// `(batch, tokens, width)` activation tensor.
    pub fn encode_images(&self, images: &[DenseTensor], hooks: Option<&HookRegistry>) -> Result<Vec<Vec<f64>>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        for x in images {
            self.check_image(x)?;
        }
        let hooks = hooks.filter(|h| !h.is_empty());
        let mut xs: Vec<Matrix> = images.iter().map(|x| self.embed_tokens(x)).collect();
        for (i, b) in self.blocks.iter().enumerate() {
            let mut attn: Vec<Matrix> = xs.iter().map(|x| self.attention_sublayer(b, x).0).collect();
            intercept(hooks, LayerId::AttnOut(i), &mut attn)?;
            for (x, a) in xs.iter_mut().zip(&attn) {
                x.add_assign(a);
            }
            let mut h2: Vec<Matrix> = xs.iter().map(|x| layer_norm(x, &b.ln2_g, &b.ln2_b).0).collect();
            intercept(hooks, LayerId::Norm2(i), &mut h2)?;
            let mut m: Vec<Matrix> = h2.iter().map(|h| self.mlp(b, h).0).collect();
            intercept(hooks, LayerId::MlpOut(i), &mut m)?;
            for (x, mi) in xs.iter_mut().zip(&m) {
                x.add_assign(mi);
            }
        }
        let mut f: Vec<Matrix> = xs.iter().map(|x| layer_norm(x, &self.lnf_g, &self.lnf_b).0).collect();
        intercept(hooks, LayerId::FinalNorm, &mut f)?;
        f.iter()
            .map(|fm| {
                let cls = Matrix::new(1, self.config.width, fm.row(0).to_vec())?;
                normalize(cls.matmul(&self.img_proj)?.into_data())
            })
            .collect()
    }

    pub fn encode_image(&self, x: &DenseTensor, hooks: Option<&HookRegistry>) -> Result<Vec<f64>> {
        Ok(self.encode_images(std::slice::from_ref(x), hooks)?.remove(0))
    }

    /// Runs a forward pass and returns the `(batch, tokens, width)` tensor
    /// seen at `layer`, after any hooks in `hooks` bound to earlier layers.
    pub fn capture_activations(
        &self,
        images: &[DenseTensor],
        layer: LayerId,
        hooks: Option<&HookRegistry>,
    ) -> Result<DenseTensor> {
        if !self.layer_catalog().contains(&layer) {
            return Err(Error::config(format!("unknown layer {layer}")));
        }
        let slot = Arc::new(Recorder::default());
        let mut reg = hooks.cloned().unwrap_or_default();
        reg.remove(layer);
        reg.bind(layer, slot.clone())?;
        self.encode_images(images, Some(&reg))?;
        let got = slot.0.lock().expect("recorder poisoned").take();
        got.ok_or_else(|| Error::invalid("layer was not reached"))
    }

    fn forward_cached(&self, x: &DenseTensor) -> Result<(Vec<f64>, ForwardCache)> {
        self.check_image(x)?;
        let mut h = self.embed_tokens(x);
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (a, ln1, attn) = self.attention_sublayer(b, &h);
            h.add_assign(&a);
            let (h2, ln2) = layer_norm(&h, &b.ln2_g, &b.ln2_b);
            let (m, pre_act) = self.mlp(b, &h2);
            h.add_assign(&m);
            caches.push(BlockCache { ln1, attn, ln2, pre_act });
        }
        let (f, lnf) = layer_norm(&h, &self.lnf_g, &self.lnf_b);
        let z = Matrix::new(1, self.config.width, f.row(0).to_vec())?.matmul(&self.img_proj)?.into_data();
        Ok((z, ForwardCache { blocks: caches, lnf }))
    }

    fn backward(&self, cache: &ForwardCache, dz: &[f64]) -> Result<DenseTensor> {
        let c = &self.config;
        let (t, w) = (c.tokens(), c.width);
        let dz = Matrix::new(1, c.embed_dim, dz.to_vec())?;
        let dcls = affine_backward_input(&dz, &self.img_proj);
        let mut df = Matrix::zeros(t, w);
        df.data_mut()[..w].copy_from_slice(dcls.data());
        let mut dh = layer_norm_backward(&df, &self.lnf_g, &cache.lnf);

        for (b, bc) in self.blocks.iter().zip(&cache.blocks).rev() {
            // MLP branch.
            let dact = affine_backward_input(&dh, &b.w2);
            let dpre = Matrix::from_fn(t, c.mlp_hidden, |i, j| dact.get(i, j) * gelu_grad(bc.pre_act.get(i, j)));
            let dh2 = affine_backward_input(&dpre, &b.w1);
            dh.add_assign(&layer_norm_backward(&dh2, &b.ln2_g, &bc.ln2));
            // Attention branch.
            let dcat = affine_backward_input(&dh, &b.wo);
            let (dq, dk, dv) = attention_backward(&dcat, &bc.attn, c.heads);
            let mut dh1 = affine_backward_input(&dq, &b.wq);
            dh1.add_assign(&affine_backward_input(&dk, &b.wk));
            dh1.add_assign(&affine_backward_input(&dv, &b.wv));
            dh.add_assign(&layer_norm_backward(&dh1, &b.ln1_g, &bc.ln1));
        }

        let dpatch_tokens = Matrix::from_fn(c.patches(), w, |k, j| dh.get(k + 1, j));
        let dpatch = affine_backward_input(&dpatch_tokens, &self.patch_w);
        let (s, p) = (c.image_size, c.patch_size);
        let g = s / p;
        let mut grad = vec![0.0; s * s];
        for k in 0..g * g {
            let (py, px) = (k / g, k % g);
            for q in 0..p * p {
                let (dy, dx) = (q / p, q % p);
                grad[(py * p + dy) * s + px * p + dx] = dpatch.get(k, q);
            }
        }
        DenseTensor::new(vec![s, s], grad)
    }

    /// All parameters as tensors, in a fixed order.
    fn parameters(&self) -> Vec<DenseTensor> {
        let v = |x: &Vec<f64>| DenseTensor::new(vec![x.len()], x.clone()).expect("non-empty");
        let m = |x: &Matrix| x.clone().into_tensor();
        let mut out = vec![m(&self.patch_w), v(&self.patch_b), v(&self.cls), m(&self.pos)];
        for b in &self.blocks {
            out.extend([
                v(&b.ln1_g),
                v(&b.ln1_b),
                m(&b.wq),
                m(&b.wk),
                m(&b.wv),
                m(&b.wo),
                v(&b.bo),
                v(&b.ln2_g),
                v(&b.ln2_b),
                m(&b.w1),
                v(&b.b1),
                m(&b.w2),
                v(&b.b2),
            ]);
        }
        out.extend([v(&self.lnf_g), v(&self.lnf_b), m(&self.img_proj), m(&self.tok_emb), m(&self.text_proj)]);
        out
    }

    /// Writes every parameter as consecutive TDF1 frames.
    pub fn write_weights<W: std::io::Write>(&self, w: &mut W) -> Result<()> {
        for p in self.parameters() {
            crate::tensor::write_tdf1_to(w, &p)?;
        }
        Ok(())
    }

    /// Reads frames written by [`ToyClip::write_weights`] for a model built
    /// from `config`, replacing its weights.
    pub fn read_weights<R: std::io::Read>(config: ToyEncoderConfig, r: &mut R) -> Result<Self> {
        let mut model = Self::new(config)?;
        let expected = model.parameters();
        let mut got = Vec::with_capacity(expected.len());
        for e in &expected {
            let t = crate::tensor::read_tdf1_from(r)?;
            if t.shape() != e.shape() {
                return Err(Error::Format(format!("weight shape {:?}, expected {:?}", t.shape(), e.shape())));
            }
            got.push(t);
        }
        let mut it = got.into_iter();
        let mut vecn = || it.next().expect("counted").into_data();
        let c = model.config.clone();
        let mat = |d: Vec<f64>, r: usize, k: usize| Matrix::new(r, k, d);
        let (w, h, p2) = (c.width, c.mlp_hidden, c.patch_size * c.patch_size);
        model.patch_w = mat(vecn(), p2, w)?;
        model.patch_b = vecn();
        model.cls = vecn();
        model.pos = mat(vecn(), c.tokens(), w)?;
        for b in model.blocks.iter_mut() {
            b.ln1_g = vecn();
            b.ln1_b = vecn();
            b.wq = mat(vecn(), w, w)?;
            b.wk = mat(vecn(), w, w)?;
            b.wv = mat(vecn(), w, w)?;
            b.wo = mat(vecn(), w, w)?;
            b.bo = vecn();
            b.ln2_g = vecn();
            b.ln2_b = vecn();
            b.w1 = mat(vecn(), w, h)?;
            b.b1 = vecn();
            b.w2 = mat(vecn(), h, w)?;
            b.b2 = vecn();
        }
        model.lnf_g = vecn();
        model.lnf_b = vecn();
        model.img_proj = mat(vecn(), w, c.embed_dim)?;
        model.tok_emb = mat(vecn(), c.vocab_size, w)?;
        model.text_proj = mat(vecn(), w, c.embed_dim)?;
        Ok(model)
    }
}

impl Hookable for ToyClip {
    fn layer_catalog(&self) -> Vec<LayerId> {
        let mut out = Vec::with_capacity(3 * self.config.depth + 1);
        for i in 0..self.config.depth {
            out.extend([LayerId::AttnOut(i), LayerId::Norm2(i), LayerId::MlpOut(i)]);
        }
        out.push(LayerId::FinalNorm);
        out
    }
}

impl ImageEncoder for ToyClip {
    fn image_shape(&self) -> Vec<usize> {
        self.config.image_shape()
    }

    fn embed_with_pullback<'a>(
        &'a self,
        x: &DenseTensor,
    ) -> Result<(Vec<f64>, Box<dyn FnOnce(&[f64]) -> Result<DenseTensor> + 'a>)> {
        let (z, cache) = self.forward_cached(x)?;
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical("non-finite activations in forward pass"));
        }
        Ok((z, Box::new(move |dz: &[f64]| self.backward(&cache, dz))))
    }
}

/// Routes a layer's per-sample activations through its bound hook, if any.
fn intercept(hooks: Option<&HookRegistry>, layer: LayerId, acts: &mut [Matrix]) -> Result<()> {
    let Some(hook) = hooks.and_then(|h| h.get(layer)) else {
        return Ok(());
    };
    let parts: Vec<DenseTensor> = acts.iter().map(|m| m.clone().into_tensor()).collect();
    let batch = DenseTensor::stack(&parts)?;
    let out = hook.apply(layer, &batch).map_err(|e| Error::Layer { layer: layer.to_string(), source: Box::new(e) })?;
    if out.shape() != batch.shape() {
        return Err(Error::Layer {
            layer: layer.to_string(),
            source: Box::new(Error::invalid(format!("hook changed shape {:?} -> {:?}", batch.shape(), out.shape()))),
        });
    }
    let (rows, cols) = (acts[0].rows(), acts[0].cols());
    for (i, m) in acts.iter_mut().enumerate() {
        *m = Matrix::new(rows, cols, out.slice0(i)?.into_data())?;
    }
    Ok(())
}

#[derive(Default)]
struct Recorder(Mutex<Option<DenseTensor>>);

impl ActivationHook for Recorder {
    fn apply(&self, _layer: LayerId, activation: &DenseTensor) -> Result<DenseTensor> {
        *self.0.lock().expect("recorder poisoned") = Some(activation.clone());
        Ok(activation.clone())
    }
}
