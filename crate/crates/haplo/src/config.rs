//! Model and run configuration, loadable from TOML with CLI overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

/// Width/depth/patch/vocab hyperparameters for both decoders and heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Patch side in pixels (k).
    pub patch: usize,
    /// Pre-decoder width (d).
    pub d_pre: usize,
    /// Post-decoder width (d'). Equal to `llm_dim`: the output head is
    /// weight-tied to the embedding matrix.
    pub d_post: usize,
    /// Embedding-matrix width (l).
    pub llm_dim: usize,
    pub depth_pre: usize,
    pub depth_post: usize,
    pub heads: usize,
    /// Vocabulary size (C).
    pub vocab: usize,
    pub max_seq: usize,
    pub rope_base: f64,
    pub use_rope: bool,
    /// MLP hidden width as a multiple of the block width.
    pub mlp_ratio: usize,
    /// Positional table covers `max_patches_side^2` patch slots.
    pub max_patches_side: usize,
    pub channels: usize,
    pub teacher_dim: usize,
    pub teacher_depth: usize,
    pub norm_eps: f64,
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    /// Desk-scale defaults: 28x28 images, 7-pixel patches, tiny decoders.
    pub fn toy() -> Self {
        ModelConfig {
            patch: 7,
            d_pre: 64,
            d_post: 96,
            llm_dim: 96,
            depth_pre: 2,
            depth_post: 2,
            heads: 4,
            vocab: 512,
            max_seq: 160,
            rope_base: 10000.0,
            use_rope: true,
            mlp_ratio: 4,
            max_patches_side: 4,
            channels: 3,
            teacher_dim: 48,
            teacher_depth: 1,
            norm_eps: 1e-5,
            precision: Precision::F32,
        }
    }

    /// Geometry of the reference large-scale configuration (CLIP-ViT-L
    /// pre-decoder, Llama-class post-decoder). A preset only; not a test
    /// target.
    pub fn paper() -> Self {
        ModelConfig {
            patch: 14,
            d_pre: 1024,
            d_post: 4096,
            llm_dim: 4096,
            depth_pre: 24,
            depth_post: 32,
            heads: 16,
            vocab: 32000,
            max_seq: 6144,
            rope_base: 10000.0,
            use_rope: true,
            mlp_ratio: 4,
            max_patches_side: 48,
            channels: 3,
            teacher_dim: 1024,
            teacher_depth: 24,
            norm_eps: 1e-5,
            precision: Precision::F32,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_pre / self.heads
    }

    pub fn post_head_dim(&self) -> usize {
        self.d_post / self.heads
    }

    pub fn max_patches(&self) -> usize {
        self.max_patches_side * self.max_patches_side
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.d_pre % self.heads != 0 || self.d_post % self.heads != 0 {
            return fail(format!(
                "widths d_pre={} d_post={} must divide into {} heads",
                self.d_pre, self.d_post, self.heads
            ));
        }
        if self.use_rope && (self.head_dim() % 2 != 0 || self.post_head_dim() % 2 != 0) {
            return fail("rotary embedding needs an even head dim".into());
        }
        if self.d_post != self.llm_dim {
            return fail(format!(
                "d_post={} must equal llm_dim={}: the output head is tied to the embedding matrix",
                self.d_post, self.llm_dim
            ));
        }
        if self.patch == 0 || self.vocab == 0 || self.heads == 0 {
            return fail("patch, vocab and heads must be nonzero".into());
        }
        Ok(())
    }
}

/// Optimizer/schedule settings for one training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch: usize,
    pub clip_norm: f64,
    /// Fraction of batch slots built as interleaved aux/main pairs.
    pub interleave_ratio: f64,
    /// Alternative reading of stage 1 (train the post-decoder too).
    /// Default false: stage 1 touches only the pre-decoder path.
    pub train_post_decoder: bool,
    /// Weight on the vision distillation term in the stage-1 total.
    pub vision_weight: f64,
    pub log_every: usize,
    pub ckpt_every: usize,
}

impl StageConfig {
    pub fn toy_stage1() -> Self {
        StageConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 1e-4,
            warmup_steps: 100,
            total_steps: 2000,
            batch: 4,
            clip_norm: 1.0,
            interleave_ratio: 0.5,
            train_post_decoder: false,
            vision_weight: 1.0,
            log_every: 50,
            ckpt_every: 0,
        }
    }

    pub fn toy_stage2() -> Self {
        StageConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.98,
            weight_decay: 0.0,
            warmup_steps: 100,
            total_steps: 4000,
            batch: 4,
            clip_norm: 1.0,
            interleave_ratio: 0.0,
            train_post_decoder: true,
            vision_weight: 1.0,
            log_every: 50,
            ckpt_every: 0,
        }
    }

    /// Learning rates from the reference large-scale recipe.
    pub fn paper_stage1() -> Self {
        StageConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 1e-4,
            warmup_steps: 2000,
            total_steps: 40_000,
            batch: 256,
            clip_norm: 1.0,
            ..Self::toy_stage1()
        }
    }

    pub fn paper_stage2() -> Self {
        StageConfig {
            lr: 2e-5,
            beta1: 0.9,
            beta2: 0.98,
            weight_decay: 0.0,
            warmup_steps: 2000,
            total_steps: 30_000,
            batch: 128,
            clip_norm: 1.0,
            ..Self::toy_stage2()
        }
    }
}

impl Default for StageConfig {
    fn default() -> Self {
        Self::toy_stage1()
    }
}

/// Synthetic colored-grid dataset settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Grid side g (g x g cells).
    pub grid: usize,
    /// Number of colors drawn from the palette.
    pub colors: usize,
    pub n_train: usize,
    pub n_heldout: usize,
    /// Cell side in patches; cell pixels = cell_patches * model.patch.
    pub cell_patches: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            grid: 4,
            colors: 6,
            n_train: 4096,
            n_heldout: 256,
            cell_patches: 1,
        }
    }
}

/// Full run configuration: model + both stages + data + seed.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: String,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
}

impl RunConfig {
    pub fn toy() -> Self {
        RunConfig {
            seed: 42,
            out_dir: "runs/toy".into(),
            model: ModelConfig::toy(),
            data: DataConfig::default(),
            stage1: StageConfig::toy_stage1(),
            stage2: StageConfig::toy_stage2(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.model.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Applies a dotted-path override like `stage1.lr=2e-4` or `seed=7`.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (path, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        let mut doc: toml::Value = toml::Value::try_from(&*self)
            .map_err(|e| Error::Config(format!("config to toml: {e}")))?;
        let parts: Vec<&str> = path.trim().split('.').collect();
        let (last, init) = parts.split_last().expect("split produced a part");
        let mut slot = &mut doc;
        for part in init {
            slot = slot
                .as_table_mut()
                .and_then(|t| t.get_mut(*part))
                .ok_or_else(|| Error::Config(format!("unknown config key {path:?}")))?;
        }
        let entry = slot
            .as_table_mut()
            .and_then(|t| t.get_mut(*last))
            .ok_or_else(|| Error::Config(format!("unknown config key {path:?}")))?;
        let raw = raw.trim();
        *entry = match entry {
            toml::Value::String(_) => toml::Value::String(raw.to_string()),
            toml::Value::Boolean(_) => toml::Value::Boolean(
                raw.parse()
                    .map_err(|_| Error::Config(format!("{path}: expected bool")))?,
            ),
            toml::Value::Integer(_) => toml::Value::Integer(
                raw.parse()
                    .map_err(|_| Error::Config(format!("{path}: expected integer")))?,
            ),
            toml::Value::Float(_) => toml::Value::Float(
                raw.parse()
                    .map_err(|_| Error::Config(format!("{path}: expected float")))?,
            ),
            _ => return Err(Error::Config(format!("{path}: unsupported override type"))),
        };
        *self = doc
            .try_into()
            .map_err(|e| Error::Config(format!("override {assignment:?}: {e}")))?;
        self.model.validate()
    }
}
