//! Embedding layers: patch embedder for images, projected embedding-matrix
//! lookup for text, and the stage-1 distillation heads.

use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tape, Tensor};

/// Raw image in HWC row-major layout with values in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub channels: usize,
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn new(h: usize, w: usize, channels: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != h * w * channels {
            return Err(Error::ShapeMismatch {
                op: "image",
                lhs: vec![h, w, channels],
                rhs: vec![pixels.len()],
            });
        }
        Ok(Image {
            h,
            w,
            channels,
            pixels,
        })
    }

    pub fn pixel(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.w + x) * self.channels + c]
    }
}

/// Splits an image into k x k patches (raster order) and flattens each to
/// a `(k*k*channels)` row, normalizing pixels to `(x - 0.5) / 0.5`.
pub fn patch_rows<E: Element>(image: &Image, k: usize) -> Result<Tensor<E>> {
    if k == 0 || image.h % k != 0 || image.w % k != 0 {
        return Err(Error::IndivisiblePatch {
            h: image.h,
            w: image.w,
            k,
        });
    }
    let (ph, pw) = (image.h / k, image.w / k);
    let width = k * k * image.channels;
    let mut data = Vec::with_capacity(ph * pw * width);
    for py in 0..ph {
        for px in 0..pw {
            for dy in 0..k {
                for dx in 0..k {
                    for c in 0..image.channels {
                        let v = image.pixel(py * k + dy, px * k + dx, c) as f64;
                        data.push(E::of((v - 0.5) / 0.5));
                    }
                }
            }
        }
    }
    Tensor::from_vec(vec![ph * pw, width], data)
}

/// Linear patch embedding plus a learnable positional table over raster
/// patch indices.
pub struct PatchEmbedder<E: Element> {
    pub patch: usize,
    pub channels: usize,
    pub weight: Tensor<E>,
    pub bias: Tensor<E>,
    pub pos_table: Tensor<E>,
}

impl<E: Element> PatchEmbedder<E> {
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let in_dim = cfg.patch * cfg.patch * cfg.channels;
        PatchEmbedder {
            patch: cfg.patch,
            channels: cfg.channels,
            weight: Tensor::randn([in_dim, cfg.d_pre], 0.02, rng).with_grad(),
            bias: Tensor::zeros([cfg.d_pre]).with_grad(),
            pos_table: Tensor::randn([cfg.max_patches(), cfg.d_pre], 0.02, rng).with_grad(),
        }
    }

    /// Number of tokens an `h x w` image produces.
    pub fn token_count(&self, image: &Image) -> Result<usize> {
        if image.h % self.patch != 0 || image.w % self.patch != 0 {
            return Err(Error::IndivisiblePatch {
                h: image.h,
                w: image.w,
                k: self.patch,
            });
        }
        Ok((image.h / self.patch) * (image.w / self.patch))
    }

    /// Row i is `linear(patch_i) + pos_table[i]`, raster order.
    pub fn embed(&self, image: &Image, tape: &Tape<E>) -> Result<Tensor<E>> {
        let hw = self.token_count(image)?;
        let rows = patch_rows::<E>(image, self.patch)?;
        let pos_len = self.pos_table.shape()[0];
        if hw > pos_len {
            return Err(Error::IndexOutOfRange {
                op: "pos_table",
                index: hw,
                len: pos_len,
            });
        }
        let idx: Vec<usize> = (0..hw).collect();
        let pos = self.pos_table.index_rows(&idx, tape)?;
        rows.matmul(&self.weight, tape)?
            .add_bcast(&self.bias, tape)?
            .add(&pos, tape)
    }

    pub fn parameters(&self, prefix: &str) -> Vec<(String, Tensor<E>)> {
        vec![
            (format!("{prefix}.weight"), self.weight.clone()),
            (format!("{prefix}.bias"), self.bias.clone()),
            (format!("{prefix}.pos_table"), self.pos_table.clone()),
        ]
    }
}

/// Embedding-matrix lookup followed by a linear projection into the
/// shared latent space. The matrix itself stands in for a pre-trained
/// LLM's embeddings: frozen in stage 1, trainable in stage 2.
pub struct TextEmbedder<E: Element> {
    pub embedding: Tensor<E>,
    pub proj_weight: Tensor<E>,
    pub proj_bias: Tensor<E>,
}

impl<E: Element> TextEmbedder<E> {
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        // Rows get ~unit norm so the identity-mapping target and the
        // current-token logits are well scaled from the start.
        let row_std = 1.0 / (cfg.llm_dim as f64).sqrt();
        let embedding = Tensor::randn([cfg.vocab, cfg.llm_dim], row_std, rng);
        embedding.set_requires_grad(false);
        TextEmbedder {
            embedding,
            proj_weight: Tensor::randn([cfg.llm_dim, cfg.d_pre], 0.02, rng).with_grad(),
            proj_bias: Tensor::zeros([cfg.d_pre]).with_grad(),
        }
    }

    pub fn vocab(&self) -> usize {
        self.embedding.shape()[0]
    }

    /// Raw embedding rows `W[id]`, before projection. Also the stage-1
    /// text distillation target.
    pub fn lookup(&self, ids: &[usize], tape: &Tape<E>) -> Result<Tensor<E>> {
        self.embedding.index_rows(ids, tape)
    }

    /// Row i is `projector(W[id_i])`.
    pub fn embed(&self, ids: &[usize], tape: &Tape<E>) -> Result<Tensor<E>> {
        self.lookup(ids, tape)?
            .matmul(&self.proj_weight, tape)?
            .add_bcast(&self.proj_bias, tape)
    }

    pub fn parameters(&self, prefix: &str) -> Vec<(String, Tensor<E>)> {
        vec![
            (format!("{prefix}.embedding"), self.embedding.clone()),
            (format!("{prefix}.proj_weight"), self.proj_weight.clone()),
            (format!("{prefix}.proj_bias"), self.proj_bias.clone()),
        ]
    }
}

/// Stage-1 projection heads and the learnable softmax temperature, stored
/// as a log-scale parameter so tau stays positive. Dropped after stage 1.
pub struct StageOneHeads<E: Element> {
    pub vision_weight: Tensor<E>,
    pub vision_bias: Tensor<E>,
    pub text_weight: Tensor<E>,
    pub text_bias: Tensor<E>,
    pub log_tau: Tensor<E>,
}

/// Clamp range for tau after each optimizer step.
pub const TAU_MIN: f64 = 1e-3;
pub const TAU_MAX: f64 = 100.0;
/// CLIP-style init: logit scale 1/0.07.
pub const TAU_INIT: f64 = 0.07;

impl<E: Element> StageOneHeads<E> {
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        StageOneHeads {
            vision_weight: Tensor::randn([cfg.d_pre, cfg.teacher_dim], 0.05, rng).with_grad(),
            vision_bias: Tensor::zeros([cfg.teacher_dim]).with_grad(),
            text_weight: Tensor::randn([cfg.d_pre, cfg.llm_dim], 0.05, rng).with_grad(),
            text_bias: Tensor::zeros([cfg.llm_dim]).with_grad(),
            log_tau: Tensor::from_vec([1], vec![E::of(TAU_INIT.ln())])
                .expect("scalar")
                .with_grad(),
        }
    }

    pub fn tau(&self) -> f64 {
        self.log_tau.item().to64().exp()
    }

    /// Re-clamps tau into `[TAU_MIN, TAU_MAX]`; called after each update.
    pub fn clamp_tau(&self) {
        self.log_tau.with_data_mut(|d| {
            let v = d[0].to64().clamp(TAU_MIN.ln(), TAU_MAX.ln());
            d[0] = E::of(v);
        });
    }

    /// Projects decoder hidden states through the vision and text heads.
    pub fn apply(
        &self,
        h_v: &Tensor<E>,
        h_t: &Tensor<E>,
        tape: &Tape<E>,
    ) -> Result<(Tensor<E>, Tensor<E>)> {
        let hv = h_v
            .matmul(&self.vision_weight, tape)?
            .add_bcast(&self.vision_bias, tape)?;
        let ht = h_t
            .matmul(&self.text_weight, tape)?
            .add_bcast(&self.text_bias, tape)?;
        Ok((hv, ht))
    }

    pub fn parameters(&self, prefix: &str) -> Vec<(String, Tensor<E>)> {
        vec![
            (format!("{prefix}.vision_weight"), self.vision_weight.clone()),
            (format!("{prefix}.vision_bias"), self.vision_bias.clone()),
            (format!("{prefix}.text_weight"), self.text_weight.clone()),
            (format!("{prefix}.text_bias"), self.text_bias.clone()),
            (format!("{prefix}.log_tau"), self.log_tau.clone()),
        ]
    }
}
