//! The two decoder stacks and their connector.
//!
//! The pre-decoder (ViT-family blocks: pre-norm LayerNorm, biased
//! attention projections, GELU MLP) fuses the mixed multimodal sequence.
//! The post-decoder (Llama-family blocks: RMSNorm, unbiased projections,
//! gated SiLU MLP) consumes the connected hidden states and produces
//! next-token logits through an output head tied to the embedding matrix.
//!
//! Attention supports two executions: a dense masked path (differentiable)
//! and a block-descriptor fast path that skips fully masked tiles
//! (forward-only, used for inference and prefill). Both honor the same
//! mixed mask; equality is enforced by tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::embed::{patch_rows, Image, PatchEmbedder, StageOneHeads, TextEmbedder};
use crate::error::{Error, Result};
use crate::seq::{MaskBlock, MultiModalSequence, SegmentSpec};
use crate::tensor::{Element, Tape, Tensor};

/// One input segment with payload.
#[derive(Clone, Debug)]
pub enum SegmentInput {
    Text(Vec<usize>),
    Image(Image),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Stage1,
    Stage2,
}

/// Plain affine map `x @ W (+ b)`.
pub struct Linear<E: Element> {
    pub weight: Tensor<E>,
    pub bias: Option<Tensor<E>>,
}

impl<E: Element> Linear<E> {
    pub fn init(d_in: usize, d_out: usize, bias: bool, std: f64, rng: &mut impl Rng) -> Self {
        Linear {
            weight: Tensor::randn([d_in, d_out], std, rng).with_grad(),
            bias: bias.then(|| Tensor::zeros([d_out]).with_grad()),
        }
    }

    /// Square identity-initialized map (used by the connector when the
    /// decoder widths agree, so stage 2 starts exactly aligned).
    pub fn identity(n: usize, bias: bool) -> Self {
        let mut eye = vec![E::zero(); n * n];
        for i in 0..n {
            eye[i * n + i] = E::one();
        }
        Linear {
            weight: Tensor::from_vec([n, n], eye).expect("eye").with_grad(),
            bias: bias.then(|| Tensor::zeros([n]).with_grad()),
        }
    }

    pub fn forward(&self, x: &Tensor<E>, tape: &Tape<E>) -> Result<Tensor<E>> {
        let y = x.matmul(&self.weight, tape)?;
        match &self.bias {
            Some(b) => y.add_bcast(b, tape),
            None => Ok(y),
        }
    }

    pub fn parameters(&self, prefix: &str) -> Vec<(String, Tensor<E>)> {
        let mut out = vec![(format!("{prefix}.weight"), self.weight.clone())];
        if let Some(b) = &self.bias {
            out.push((format!("{prefix}.bias"), b.clone()));
        }
        out
    }
}

/// Per-layer key/value store for incremental decoding. Keys are stored
/// after rotary embedding. Layout: `[pos][head][dh]`.
pub struct KvCache<E: Element> {
    k: Vec<E>,
    v: Vec<E>,
    heads: usize,
    dh: usize,
    len: usize,
}

impl<E: Element> KvCache<E> {
    pub fn new(heads: usize, dh: usize) -> Self {
        KvCache {
            k: Vec::new(),
            v: Vec::new(),
            heads,
            dh,
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn push_row(&mut self, k_row: &[E], v_row: &[E]) {
        debug_assert_eq!(k_row.len(), self.heads * self.dh);
        self.k.extend_from_slice(k_row);
        self.v.extend_from_slice(v_row);
        self.len += 1;
    }

    fn k_at(&self, pos: usize, head: usize) -> &[E] {
        let off = (pos * self.heads + head) * self.dh;
        &self.k[off..off + self.dh]
    }

    fn v_at(&self, pos: usize, head: usize) -> &[E] {
        let off = (pos * self.heads + head) * self.dh;
        &self.v[off..off + self.dh]
    }
}

/// How attention executes against the mask.
pub enum MaskExec<'a, E: Element> {
    /// Additive `[L, L]` bias; differentiable.
    Dense(&'a Tensor<E>),
    /// Block descriptors; forward-only, skips masked tiles.
    Blocks(&'a [MaskBlock]),
}

/// Multi-head self-attention with rotary position embedding.
pub struct MhAttention<E: Element> {
    pub wq: Linear<E>,
    pub wk: Linear<E>,
    pub wv: Linear<E>,
    pub wo: Linear<E>,
    pub heads: usize,
    pub use_rope: bool,
    pub rope_base: f64,
}

impl<E: Element> MhAttention<E> {
    pub fn init(
        width: usize,
        heads: usize,
        bias: bool,
        use_rope: bool,
        rope_base: f64,
        rng: &mut impl Rng,
    ) -> Self {
        MhAttention {
            wq: Linear::init(width, width, bias, 0.02, rng),
            wk: Linear::init(width, width, bias, 0.02, rng),
            wv: Linear::init(width, width, bias, 0.02, rng),
            wo: Linear::init(width, width, bias, 0.02, rng),
            heads,
            use_rope,
            rope_base,
        }
    }

    fn width(&self) -> usize {
        self.wq.weight.shape()[0]
    }

    /// Projects `x` to per-head q/k/v `[h, L, dh]` with RoPE applied to q
    /// and k.
    fn qkv(
        &self,
        x: &Tensor<E>,
        rope_pos: &[usize],
        tape: &Tape<E>,
    ) -> Result<(Tensor<E>, Tensor<E>, Tensor<E>)> {
        let l = x.shape()[0];
        let d = self.width();
        let dh = d / self.heads;
        let split = |t: Tensor<E>| -> Result<Tensor<E>> {
            t.reshape([l, self.heads, dh], tape)?
                .permute(&[1, 0, 2], tape)
        };
        let mut q = split(self.wq.forward(x, tape)?)?;
        let mut k = split(self.wk.forward(x, tape)?)?;
        let v = split(self.wv.forward(x, tape)?)?;
        if self.use_rope {
            q = q.rope(rope_pos, self.rope_base, tape)?;
            k = k.rope(rope_pos, self.rope_base, tape)?;
        }
        Ok((q, k, v))
    }

    fn fill_cache(&self, k: &Tensor<E>, v: &Tensor<E>, cache: &mut KvCache<E>) {
        let (h, l, dh) = (k.shape()[0], k.shape()[1], k.shape()[2]);
        let (kd, vd) = (k.data(), v.data());
        let mut k_row = vec![E::zero(); h * dh];
        let mut v_row = vec![E::zero(); h * dh];
        for pos in 0..l {
            for head in 0..h {
                let src = (head * l + pos) * dh;
                k_row[head * dh..(head + 1) * dh].copy_from_slice(&kd[src..src + dh]);
                v_row[head * dh..(head + 1) * dh].copy_from_slice(&vd[src..src + dh]);
            }
            cache.push_row(&k_row, &v_row);
        }
    }

    /// Full-sequence attention. `capture`, when given, receives the
    /// post-softmax attention probabilities averaged over heads (`L*L`
    /// row-major). `cache`, when given, is filled with this pass's k/v.
    pub fn forward(
        &self,
        x: &Tensor<E>,
        mask: &MaskExec<'_, E>,
        rope_pos: &[usize],
        tape: &Tape<E>,
        capture: Option<&mut Vec<f64>>,
        cache: Option<&mut KvCache<E>>,
    ) -> Result<Tensor<E>> {
        let l = x.shape()[0];
        let d = self.width();
        let dh = d / self.heads;
        let (q, k, v) = self.qkv(x, rope_pos, tape)?;
        if let Some(c) = cache {
            self.fill_cache(&k, &v, c);
        }
        let scale = E::of(1.0 / (dh as f64).sqrt());
        match mask {
            MaskExec::Dense(bias) => {
                let kt = k.permute(&[0, 2, 1], tape)?;
                let scores = q.matmul(&kt, tape)?.scale(scale, tape);
                let scores = scores.add_bcast(bias, tape)?;
                let probs = scores.softmax(2, tape)?;
                if let Some(buf) = capture {
                    *buf = mean_heads(&probs.data(), self.heads, l);
                }
                let ctx = probs.matmul(&v, tape)?;
                let merged = ctx.permute(&[1, 0, 2], tape)?.reshape([l, d], tape)?;
                self.wo.forward(&merged, tape)
            }
            MaskExec::Blocks(blocks) => {
                if tape.is_enabled() {
                    return Err(Error::state(
                        "block-descriptor attention is forward-only; use the dense mask when recording gradients",
                    ));
                }
                let (qd, kd, vd) = (q.data(), k.data(), v.data());
                let mut probs_sum = capture.as_ref().map(|_| vec![0.0f64; l * l]);
                let mut merged = vec![E::zero(); l * d];
                for block in blocks.iter() {
                    for i in block.row_start..block.row_end {
                        let cols = block.cols_for_row(i);
                        for h in 0..self.heads {
                            let q_off = (h * l + i) * dh;
                            let q_row = &qd[q_off..q_off + dh];
                            let mut scores: Vec<E> = cols
                                .clone()
                                .map(|j| {
                                    let k_off = (h * l + j) * dh;
                                    let k_row = &kd[k_off..k_off + dh];
                                    let mut acc = E::zero();
                                    for t in 0..dh {
                                        acc = acc + q_row[t] * k_row[t];
                                    }
                                    acc * scale
                                })
                                .collect();
                            let mx = scores.iter().copied().fold(E::neg_infinity(), E::max);
                            let mut sum = E::zero();
                            for s in scores.iter_mut() {
                                *s = (*s - mx).exp();
                                sum = sum + *s;
                            }
                            let out_off = i * d + h * dh;
                            for (jj, j) in cols.clone().enumerate() {
                                let p = scores[jj] / sum;
                                if let Some(ps) = probs_sum.as_mut() {
                                    ps[i * l + j] += p.to64();
                                }
                                let v_off = (h * l + j) * dh;
                                for t in 0..dh {
                                    merged[out_off + t] = merged[out_off + t] + p * vd[v_off + t];
                                }
                            }
                        }
                    }
                }
                drop(qd);
                drop(kd);
                drop(vd);
                if let (Some(buf), Some(ps)) = (capture, probs_sum) {
                    *buf = ps.iter().map(|p| p / self.heads as f64).collect();
                }
                let merged = Tensor::from_vec(vec![l, d], merged)?;
                self.wo.forward(&merged, tape)
            }
        }
    }

    /// Single-token decode step at absolute position `pos`. The new token
    /// is text, so it attends to the whole cache. Appends its k/v.
    pub fn step(&self, x: &Tensor<E>, cache: &mut KvCache<E>, pos: usize) -> Result<Tensor<E>> {
        let tape = Tape::disabled();
        let d = self.width();
        let dh = d / self.heads;
        let (q, k, v) = self.qkv(x, &[pos], &tape)?;
        {
            let (kd, vd) = (k.data(), v.data());
            cache.push_row(&kd, &vd);
        }
        let scale = E::of(1.0 / (dh as f64).sqrt());
        let qd = q.data();
        let mut merged = vec![E::zero(); d];
        for h in 0..self.heads {
            let q_row = &qd[h * dh..(h + 1) * dh];
            let mut scores: Vec<E> = (0..cache.len())
                .map(|j| {
                    let k_row = cache.k_at(j, h);
                    let mut acc = E::zero();
                    for t in 0..dh {
                        acc = acc + q_row[t] * k_row[t];
                    }
                    acc * scale
                })
                .collect();
            let mx = scores.iter().copied().fold(E::neg_infinity(), E::max);
            let mut sum = E::zero();
            for s in scores.iter_mut() {
                *s = (*s - mx).exp();
                sum = sum + *s;
            }
            for (j, s) in scores.iter().enumerate() {
                let p = *s / sum;
                let v_row = cache.v_at(j, h);
                for t in 0..dh {
                    merged[h * dh + t] = merged[h * dh + t] + p * v_row[t];
                }
            }
        }
        drop(qd);
        let merged = Tensor::from_vec(vec![1, d], merged)?;
        self.wo.forward(&merged, &tape)
    }

    pub fn parameters(&self, prefix: &str) -> Vec<(String, Tensor<E>)> {
        let mut out = self.wq.parameters(&format!("{prefix}.wq"));
        out.extend(self.wk.parameters(&format!("{prefix}.wk")));
        out.extend(self.wv.parameters(&format!("{prefix}.wv")));
        out.extend(self.wo.parameters(&format!("{prefix}.wo")));
        out
    }
}

fn mean_heads<E: Element>(probs: &[E], heads: usize, l: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; l * l];
    for h in 0..heads {
        for i in 0..l * l {
            out[i] += probs[h * l * l + i].to64();
        }
    }
    for v in out.iter_mut() {
        *v /= heads as f64;
    }
    out
}

/// Pre-decoder block: pre-norm LayerNorm, biased attention, GELU MLP.
pub struct PreBlock<E: Element> {
    pub ln1_gain: Tensor<E>,
    pub ln1_bias: Tensor<E>,
    pub ln2_gain: Tensor<E>,
    pub ln2_bias: Tensor<E>,
    pub attn: MhAttention<E>,
    pub fc1: Linear<E>,
    pub fc2: Linear<E>,
    pub eps: f64,
}

impl<E: Element> PreBlock<E> {
    pub fn init(
        width: usize,
        heads: usize,
        mlp_ratio: usize,
        use_rope: bool,
        rope_base: f64,
        eps: f64,
        rng: &mut impl Rng,
    ) -> Self {
        PreBlock {
            ln1_gain: Tensor::full([width], E::one()).with_grad(),
            ln1_bias: Tensor::zeros([width]).with_grad(),
            ln2_gain: Tensor::full([width], E::one()).with_grad(),
            ln2_bias: Tensor::zeros([width]).with_grad(),
            attn: MhAttention::init(width, heads, true, use_rope, rope_base, rng),
            fc1: Linear::init(width, width * mlp_ratio, true, 0.02, rng),
            fc2: Linear::init(width * mlp_ratio, width, true, 0.02, rng),
            eps,
        }
    }

    pub fn forward(
        &self,
        x: &Tensor<E>,
        mask: &MaskExec<'_, E>,
        rope_pos: &[usize],
        tape: &Tape<E>,
        capture: Option<&mut Vec<f64>>,
        cache: Option<&mut KvCache<E>>,
    ) -> Result<Tensor<E>> {
        let h = x.layer_norm(&self.ln1_gain, &self.ln1_bias, self.eps, tape)?;
        let a = self.attn.forward(&h, mask, rope_pos, tape, capture, cache)?;
        let x = x.add(&a, tape)?;
        let h = x.layer_norm(&self.ln2_gain, &self.ln2_bias, self.eps, tape)?;
        let m = self
            .fc2
            .forward(&self.fc1.forward(&h, tape)?.gelu(tape), tape)?;
        x.add(&m, tape)
    }

    pub fn step(&self, x: &Tensor<E>, cache: &mut KvCache<E>, pos: usize) -> Result<Tensor<E>> {
        let tape = Tape::disabled();
        let h = x.layer_norm(&self.ln1_gain, &self.ln1_bias, self.eps, &tape)?;
        let a = self.attn.step(&h, cache, pos)?;
        let x = x.add(&a, &tape)?;
        let h = x.layer_norm(&self.ln2_gain, &self.ln2_bias, self.eps, &tape)?;
        let m = self
            .fc2
            .forward(&self.fc1.forward(&h, &tape)?.gelu(&tape), &tape)?;
        x.add(&m, &tape)
    }

    pub fn parameters(&self, prefix: &str) -> Vec<(String, Tensor<E>)> {
        let mut out = vec![
            (format!("{prefix}.ln1_gain"), self.ln1_gain.clone()),
            (format!("{prefix}.ln1_bias"), self.ln1_bias.clone()),
            (format!("{prefix}.ln2_gain"), self.ln2_gain.clone()),
            (format!("{prefix}.ln2_bias"), self.ln2_bias.clone()),
        ];
        out.extend(self.attn.parameters(&format!("{prefix}.attn")));
        out.extend(self.fc1.parameters(&format!("{prefix}.fc1")));
        out.extend(self.fc2.parameters(&format!("{prefix}.fc2")));
        out
    }
}

/// Post-decoder block: RMSNorm, unbiased attention, gated SiLU MLP.
pub struct PostBlock<E: Element> {
    pub rms1_gain: Tensor<E>,
    pub rms2_gain: Tensor<E>,
    pub attn: MhAttention<E>,
    pub gate: Linear<E>,
    pub up: Linear<E>,
    pub down: Linear<E>,
    pub eps: f64,
}

impl<E: Element> PostBlock<E> {
    pub fn init(
        width: usize,
        heads: usize,
        mlp_ratio: usize,
        use_rope: bool,
        rope_base: f64,
        eps: f64,
        rng: &mut impl Rng,
    ) -> Self {
        PostBlock {
            rms1_gain: Tensor::full([width], E::one()).with_grad(),
            rms2_gain: Tensor::full([width], E::one()).with_grad(),
            attn: MhAttention::init(width, heads, false, use_rope, rope_base, rng),
            gate: Linear::init(width, width * mlp_ratio, false, 0.02, rng),
            up: Linear::init(width, width * mlp_ratio, false, 0.02, rng),
            down: Linear::init(width * mlp_ratio, width, false, 0.02, rng),
            eps,
        }
    }

    fn mlp(&self, x: &Tensor<E>, tape: &Tape<E>) -> Result<Tensor<E>> {
        let g = self.gate.forward(x, tape)?.silu(tape);
        let u = self.up.forward(x, tape)?;
        self.down.forward(&g.mul(&u, tape)?, tape)
    }

    pub fn forward(
        &self,
        x: &Tensor<E>,
        mask: &MaskExec<'_, E>,
        rope_pos: &[usize],
        tape: &Tape<E>,
        capture: Option<&mut Vec<f64>>,
        cache: Option<&mut KvCache<E>>,
    ) -> Result<Tensor<E>> {
        let h = x.rms_norm(&self.rms1_gain, self.eps, tape)?;
        let a = self.attn.forward(&h, mask, rope_pos, tape, capture, cache)?;
        let x = x.add(&a, tape)?;
        let h = x.rms_norm(&self.rms2_gain, self.eps, tape)?;
        let m = self.mlp(&h, tape)?;
        x.add(&m, tape)
    }

    pub fn step(&self, x: &Tensor<E>, cache: &mut KvCache<E>, pos: usize) -> Result<Tensor<E>> {
        let tape = Tape::disabled();
        let h = x.rms_norm(&self.rms1_gain, self.eps, &tape)?;
        let a = self.attn.step(&h, cache, pos)?;
        let x = x.add(&a, &tape)?;
        let h = x.rms_norm(&self.rms2_gain, self.eps, &tape)?;
        let m = self.mlp(&h, &tape)?;
        x.add(&m, &tape)
    }

    pub fn parameters(&self, prefix: &str) -> Vec<(String, Tensor<E>)> {
        let mut out = vec![
            (format!("{prefix}.rms1_gain"), self.rms1_gain.clone()),
            (format!("{prefix}.rms2_gain"), self.rms2_gain.clone()),
        ];
        out.extend(self.attn.parameters(&format!("{prefix}.attn")));
        out.extend(self.gate.parameters(&format!("{prefix}.gate")));
        out.extend(self.up.parameters(&format!("{prefix}.up")));
        out.extend(self.down.parameters(&format!("{prefix}.down")));
        out
    }
}

/// Frozen stand-in vision teacher: a small ViT (patch linear + learnable
/// positions + bidirectional pre-norm blocks + final LayerNorm) whose
/// outputs define the stage-1 vision distillation targets.
pub struct VisionTeacher<E: Element> {
    pub patch: usize,
    pub weight: Tensor<E>,
    pub bias: Tensor<E>,
    pub pos_table: Tensor<E>,
    pub blocks: Vec<PreBlock<E>>,
    pub ln_f_gain: Tensor<E>,
    pub ln_f_bias: Tensor<E>,
    pub eps: f64,
    pub dim: usize,
}

impl<E: Element> VisionTeacher<E> {
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let in_dim = cfg.patch * cfg.patch * cfg.channels;
        let dim = cfg.teacher_dim;
        let heads = if dim % cfg.heads == 0 { cfg.heads } else { 1 };
        let blocks = (0..cfg.teacher_depth)
            .map(|_| {
                PreBlock::init(
                    dim,
                    heads,
                    cfg.mlp_ratio,
                    false,
                    cfg.rope_base,
                    cfg.norm_eps,
                    rng,
                )
            })
            .collect::<Vec<_>>();
        let teacher = VisionTeacher {
            patch: cfg.patch,
            weight: Tensor::randn([in_dim, dim], 0.05, rng),
            bias: Tensor::zeros([dim]),
            pos_table: Tensor::randn([cfg.max_patches(), dim], 0.05, rng),
            blocks,
            ln_f_gain: Tensor::full([dim], E::one()),
            ln_f_bias: Tensor::zeros([dim]),
            eps: cfg.norm_eps,
            dim,
        };
        for (_, p) in teacher.parameters() {
            p.set_requires_grad(false);
        }
        teacher
    }

    /// Teacher features for one image: `[hw, teacher_dim]`, no gradient.
    pub fn features(&self, image: &Image) -> Result<Tensor<E>> {
        let tape = Tape::disabled();
        let rows = patch_rows::<E>(image, self.patch)?;
        let hw = rows.shape()[0];
        let idx: Vec<usize> = (0..hw).collect();
        let pos = self.pos_table.index_rows(&idx, &tape)?;
        let mut h = rows
            .matmul(&self.weight, &tape)?
            .add_bcast(&self.bias, &tape)?
            .add(&pos, &tape)?;
        let full = [MaskBlock {
            row_start: 0,
            row_end: hw,
            col_end: hw,
            causal_within: false,
        }];
        let positions: Vec<usize> = (0..hw).collect();
        for block in &self.blocks {
            h = block.forward(&h, &MaskExec::Blocks(&full), &positions, &tape, None, None)?;
        }
        h.layer_norm(&self.ln_f_gain, &self.ln_f_bias, self.eps, &tape)
    }

    pub fn parameters(&self) -> Vec<(String, Tensor<E>)> {
        let mut out = vec![
            ("teacher.weight".to_string(), self.weight.clone()),
            ("teacher.bias".to_string(), self.bias.clone()),
            ("teacher.pos_table".to_string(), self.pos_table.clone()),
            ("teacher.ln_f_gain".to_string(), self.ln_f_gain.clone()),
            ("teacher.ln_f_bias".to_string(), self.ln_f_bias.clone()),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(b.parameters(&format!("teacher.block{i}")));
        }
        out
    }
}

/// Attention maps captured during one forward pass, averaged over heads.
/// Layer indices run through the pre-decoder stack first, then the
/// post-decoder stack.
#[derive(Default)]
pub struct AttnCapture {
    pub pre: Vec<Vec<f64>>,
    pub post: Vec<Vec<f64>>,
    pub len: usize,
}

impl AttnCapture {
    pub fn num_layers(&self) -> usize {
        self.pre.len() + self.post.len()
    }

    fn layer(&self, idx: usize) -> Result<&Vec<f64>> {
        if self.pre.is_empty() && self.post.is_empty() {
            return Err(Error::state(
                "attention capture not enabled for this forward pass",
            ));
        }
        self.pre
            .get(idx)
            .or_else(|| self.post.get(idx.wrapping_sub(self.pre.len())))
            .ok_or(Error::IndexOutOfRange {
                op: "attention_map",
                index: idx,
                len: self.num_layers(),
            })
    }

    /// Softmax rows for the requested query/key positions at one layer.
    pub fn map(
        &self,
        layer: usize,
        query_positions: &[usize],
        key_positions: &[usize],
    ) -> Result<Vec<Vec<f64>>> {
        let probs = self.layer(layer)?;
        let l = self.len;
        for &p in query_positions.iter().chain(key_positions) {
            if p >= l {
                return Err(Error::IndexOutOfRange {
                    op: "attention_map",
                    index: p,
                    len: l,
                });
            }
        }
        Ok(query_positions
            .iter()
            .map(|&q| key_positions.iter().map(|&k| probs[q * l + k]).collect())
            .collect())
    }
}

/// Per-pass options: execution path, capture, caches.
#[derive(Default)]
pub struct PassOpts<E: Element> {
    /// Use the block-descriptor attention path (forward-only).
    pub fast_path: bool,
    /// Collect per-layer attention maps.
    pub capture: Option<AttnCapture>,
    /// Fill these caches during the pass (prefill).
    pub pre_caches: Option<Vec<KvCache<E>>>,
    pub post_caches: Option<Vec<KvCache<E>>>,
}

impl<E: Element> PassOpts<E> {
    pub fn training() -> Self {
        PassOpts::default()
    }

    pub fn inference() -> Self {
        PassOpts {
            fast_path: true,
            ..PassOpts::default()
        }
    }

    pub fn with_capture(mut self) -> Self {
        self.capture = Some(AttnCapture::default());
        self
    }
}

/// The full early-fusion model.
pub struct HaploModel<E: Element> {
    pub cfg: ModelConfig,
    pub stage: Stage,
    pub patch_embed: PatchEmbedder<E>,
    pub text_embed: TextEmbedder<E>,
    pub pre_blocks: Vec<PreBlock<E>>,
    pub connector: Linear<E>,
    pub post_blocks: Vec<PostBlock<E>>,
    pub heads: Option<StageOneHeads<E>>,
}

impl<E: Element> HaploModel<E> {
    /// Fresh stage-1 model, deterministically initialized from `seed`.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let patch_embed = PatchEmbedder::init(cfg, &mut rng);
        let text_embed = TextEmbedder::init(cfg, &mut rng);
        let pre_blocks = (0..cfg.depth_pre)
            .map(|_| {
                PreBlock::init(
                    cfg.d_pre,
                    cfg.heads,
                    cfg.mlp_ratio,
                    cfg.use_rope,
                    cfg.rope_base,
                    cfg.norm_eps,
                    &mut rng,
                )
            })
            .collect();
        let connector = if cfg.d_pre == cfg.d_post {
            Linear::identity(cfg.d_pre, true)
        } else {
            Linear::init(cfg.d_pre, cfg.d_post, true, 0.02, &mut rng)
        };
        let post_blocks = (0..cfg.depth_post)
            .map(|_| {
                PostBlock::init(
                    cfg.d_post,
                    cfg.heads,
                    cfg.mlp_ratio,
                    cfg.use_rope,
                    cfg.rope_base,
                    cfg.norm_eps,
                    &mut rng,
                )
            })
            .collect();
        let heads = Some(StageOneHeads::init(cfg, &mut rng));
        Ok(HaploModel {
            cfg: cfg.clone(),
            stage: Stage::Stage1,
            patch_embed,
            text_embed,
            pre_blocks,
            connector,
            post_blocks,
            heads,
        })
    }

    /// Drops the stage-1 heads and unfreezes the embedding matrix.
    pub fn enter_stage2(&mut self) {
        self.heads = None;
        self.stage = Stage::Stage2;
        self.text_embed.embedding.set_requires_grad(true);
    }

    /// Builds the sequence layout and the embedded `Z_m` rows.
    pub fn embed_sequence(
        &self,
        inputs: &[SegmentInput],
        tape: &Tape<E>,
    ) -> Result<(MultiModalSequence, Tensor<E>)> {
        if inputs.is_empty() {
            return Err(Error::EmptySequence);
        }
        let mut specs = Vec::with_capacity(inputs.len());
        for inp in inputs {
            specs.push(match inp {
                SegmentInput::Text(ids) => SegmentSpec::text(ids.len()),
                SegmentInput::Image(img) => SegmentSpec::image(self.patch_embed.token_count(img)?),
            });
        }
        let seq = MultiModalSequence::assemble(&specs)?;
        if seq.len() > self.cfg.max_seq {
            return Err(Error::PromptTooLong {
                prompt: seq.len(),
                max: self.cfg.max_seq,
            });
        }
        let mut parts = Vec::with_capacity(inputs.len());
        for inp in inputs {
            match inp {
                SegmentInput::Text(ids) => {
                    if ids.is_empty() {
                        continue;
                    }
                    parts.push(self.text_embed.embed(ids, tape)?);
                }
                SegmentInput::Image(img) => parts.push(self.patch_embed.embed(img, tape)?),
            }
        }
        let refs: Vec<&Tensor<E>> = parts.iter().collect();
        let z = Tensor::concat_rows(&refs, tape)?;
        Ok((seq, z))
    }

    /// Runs the pre-decoder over `Z_m`, yielding `H_m`.
    pub fn pre_decode(
        &self,
        z: &Tensor<E>,
        seq: &MultiModalSequence,
        tape: &Tape<E>,
        opts: &mut PassOpts<E>,
    ) -> Result<Tensor<E>> {
        if z.shape()[0] != seq.len() {
            return Err(Error::ShapeMismatch {
                op: "pre_decode",
                lhs: z.shape().to_vec(),
                rhs: vec![seq.len()],
            });
        }
        let rope_pos = seq.rope_indices();
        let blocks = seq.mask_blocks();
        let bias = (!opts.fast_path).then(|| seq.build_mask().bias_tensor::<E>());
        let mut h = z.clone();
        if let Some(c) = opts.capture.as_mut() {
            c.len = seq.len();
        }
        for (i, block) in self.pre_blocks.iter().enumerate() {
            let mask = match &bias {
                Some(b) => MaskExec::Dense(b),
                None => MaskExec::Blocks(&blocks),
            };
            let mut cap_buf = Vec::new();
            let capture = opts.capture.as_ref().map(|_| &mut cap_buf);
            let cache = opts.pre_caches.as_mut().map(|caches| &mut caches[i]);
            h = block.forward(&h, &mask, &rope_pos, tape, capture, cache)?;
            if let Some(c) = opts.capture.as_mut() {
                c.pre.push(cap_buf);
            }
        }
        Ok(h)
    }

    /// Runs connector-mapped hidden states through the post-decoder and
    /// the tied output head, yielding `[L, C]` logits.
    pub fn post_decode(
        &self,
        h_connected: &Tensor<E>,
        seq: &MultiModalSequence,
        tape: &Tape<E>,
        opts: &mut PassOpts<E>,
    ) -> Result<Tensor<E>> {
        let rope_pos = seq.rope_indices();
        let blocks = seq.mask_blocks();
        let bias = (!opts.fast_path).then(|| seq.build_mask().bias_tensor::<E>());
        let mut h = h_connected.clone();
        for (i, block) in self.post_blocks.iter().enumerate() {
            let mask = match &bias {
                Some(b) => MaskExec::Dense(b),
                None => MaskExec::Blocks(&blocks),
            };
            let mut cap_buf = Vec::new();
            let capture = opts.capture.as_ref().map(|_| &mut cap_buf);
            let cache = opts.post_caches.as_mut().map(|caches| &mut caches[i]);
            h = block.forward(&h, &mask, &rope_pos, tape, capture, cache)?;
            if let Some(c) = opts.capture.as_mut() {
                c.post.push(cap_buf);
            }
        }
        self.logits_head(&h, tape)
    }

    /// Tied output head: `h @ W^T` against the embedding matrix.
    pub fn logits_head(&self, h: &Tensor<E>, tape: &Tape<E>) -> Result<Tensor<E>> {
        let wt = self.text_embed.embedding.transpose(tape)?;
        h.matmul(&wt, tape)
    }

    /// Full pipeline: embeddings, pre-decoder, connector, post-decoder.
    pub fn forward_logits(
        &self,
        inputs: &[SegmentInput],
        tape: &Tape<E>,
        opts: &mut PassOpts<E>,
    ) -> Result<(MultiModalSequence, Tensor<E>)> {
        let (seq, z) = self.embed_sequence(inputs, tape)?;
        let h_m = self.pre_decode(&z, &seq, tape, opts)?;
        let connected = self.connector.forward(&h_m, tape)?;
        let logits = self.post_decode(&connected, &seq, tape, opts)?;
        Ok((seq, logits))
    }

    /// Stage-1 forward: pre-decoder only, hidden states split by modality
    /// and projected through the heads.
    pub fn forward_stage1(
        &self,
        inputs: &[SegmentInput],
        tape: &Tape<E>,
        opts: &mut PassOpts<E>,
    ) -> Result<Stage1Forward<E>> {
        let heads = self
            .heads
            .as_ref()
            .ok_or_else(|| Error::state("stage-1 heads are absent; model is in stage-2 mode"))?;
        let (seq, z) = self.embed_sequence(inputs, tape)?;
        let h_m = self.pre_decode(&z, &seq, tape, opts)?;
        let (vpos, tpos) = (seq.image_positions(), seq.text_positions());
        let h_v = h_m.index_rows(&vpos, tape)?;
        let h_t = h_m.index_rows(&tpos, tape)?;
        let (hv_hat, ht_hat) = heads.apply(&h_v, &h_t, tape)?;
        Ok(Stage1Forward {
            seq,
            h_v,
            h_t,
            hv_hat,
            ht_hat,
        })
    }

    /// Splits a hidden-state matrix into vision and text rows by the
    /// recorded positions.
    pub fn split_by_modality(
        &self,
        h_m: &Tensor<E>,
        seq: &MultiModalSequence,
        tape: &Tape<E>,
    ) -> Result<(Tensor<E>, Tensor<E>)> {
        let h_v = h_m.index_rows(&seq.image_positions(), tape)?;
        let h_t = h_m.index_rows(&seq.text_positions(), tape)?;
        Ok((h_v, h_t))
    }

    pub fn fresh_caches(&self) -> (Vec<KvCache<E>>, Vec<KvCache<E>>) {
        let pre = (0..self.cfg.depth_pre)
            .map(|_| KvCache::new(self.cfg.heads, self.cfg.head_dim()))
            .collect();
        let post = (0..self.cfg.depth_post)
            .map(|_| KvCache::new(self.cfg.heads, self.cfg.post_head_dim()))
            .collect();
        (pre, post)
    }

    /// Incremental decode of one text token at absolute position `pos`.
    /// Returns the `[1, C]` logits row.
    pub fn step_token(
        &self,
        token: usize,
        pos: usize,
        pre_caches: &mut [KvCache<E>],
        post_caches: &mut [KvCache<E>],
    ) -> Result<Tensor<E>> {
        let tape = Tape::disabled();
        let mut h = self.text_embed.embed(&[token], &tape)?;
        for (block, cache) in self.pre_blocks.iter().zip(pre_caches.iter_mut()) {
            h = block.step(&h, cache, pos)?;
        }
        let mut h = self.connector.forward(&h, &tape)?;
        for (block, cache) in self.post_blocks.iter().zip(post_caches.iter_mut()) {
            h = block.step(&h, cache, pos)?;
        }
        self.logits_head(&h, &tape)
    }

    /// Every parameter, including stage-1 heads when present. The
    /// embedding matrix is always listed (frozen or not).
    pub fn parameters(&self) -> Vec<(String, Tensor<E>)> {
        let mut out = self.patch_embed.parameters("patch_embed");
        out.extend(self.text_embed.parameters("text"));
        for (i, b) in self.pre_blocks.iter().enumerate() {
            out.extend(b.parameters(&format!("pre.block{i}")));
        }
        out.extend(self.connector.parameters("connector"));
        for (i, b) in self.post_blocks.iter().enumerate() {
            out.extend(b.parameters(&format!("post.block{i}")));
        }
        if let Some(h) = &self.heads {
            out.extend(h.parameters("heads"));
        }
        out
    }

    /// The declared trainable set for a stage. Stage 1: patch embedder,
    /// text projector, pre-decoder, heads, tau — the embedding matrix and
    /// (by default) the whole post-decoder path stay out. Stage 2:
    /// everything that remains, embedding matrix included.
    pub fn trainable_parameters(&self, train_post_in_stage1: bool) -> Vec<(String, Tensor<E>)> {
        match self.stage {
            Stage::Stage1 => {
                let mut out = self.patch_embed.parameters("patch_embed");
                out.push((
                    "text.proj_weight".into(),
                    self.text_embed.proj_weight.clone(),
                ));
                out.push(("text.proj_bias".into(), self.text_embed.proj_bias.clone()));
                for (i, b) in self.pre_blocks.iter().enumerate() {
                    out.extend(b.parameters(&format!("pre.block{i}")));
                }
                if train_post_in_stage1 {
                    out.extend(self.connector.parameters("connector"));
                    for (i, b) in self.post_blocks.iter().enumerate() {
                        out.extend(b.parameters(&format!("post.block{i}")));
                    }
                }
                if let Some(h) = &self.heads {
                    out.extend(h.parameters("heads"));
                }
                out
            }
            Stage::Stage2 => {
                let mut out = self.patch_embed.parameters("patch_embed");
                out.extend(self.text_embed.parameters("text"));
                for (i, b) in self.pre_blocks.iter().enumerate() {
                    out.extend(b.parameters(&format!("pre.block{i}")));
                }
                out.extend(self.connector.parameters("connector"));
                for (i, b) in self.post_blocks.iter().enumerate() {
                    out.extend(b.parameters(&format!("post.block{i}")));
                }
                out
            }
        }
    }
}

/// Stage-1 forward products.
pub struct Stage1Forward<E: Element> {
    pub seq: MultiModalSequence,
    pub h_v: Tensor<E>,
    pub h_t: Tensor<E>,
    pub hv_hat: Tensor<E>,
    pub ht_hat: Tensor<E>,
}
