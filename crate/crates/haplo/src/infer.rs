//! Autoregressive generation with KV caches, toy-VQA evaluation,
//! attention-map dumps and the PNG/PGM artifact writers.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::RunConfig;
use crate::data::{Task, ToyDataset, Vocab};
use crate::embed::Image;
use crate::error::{Error, Result};
use crate::model::{AttnCapture, HaploModel, KvCache, PassOpts, SegmentInput};
use crate::seq::Modality;
use crate::tensor::{Element, Tape};

/// Token sampling policy.
#[derive(Clone, Copy, Debug)]
pub enum Sampling {
    Greedy,
    Temperature(f64),
    TopK { k: usize, temperature: f64 },
}

#[derive(Clone, Copy, Debug)]
pub struct GenerateConfig {
    pub sampling: Sampling,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            sampling: Sampling::Greedy,
            max_new_tokens: 16,
            seed: 0,
        }
    }
}

/// Generated continuation: tokens (EOS included when hit) and the
/// stepwise log-probabilities of the chosen tokens.
#[derive(Clone, Debug)]
pub struct Generation {
    pub tokens: Vec<usize>,
    pub logprobs: Vec<f64>,
}

/// One autoregressive decoding session over an immutable model. The
/// cache length always equals the processed prefix length.
pub struct DecodeSession<'a, E: Element> {
    model: &'a HaploModel<E>,
    pre_caches: Vec<KvCache<E>>,
    post_caches: Vec<KvCache<E>>,
    len: usize,
    last_logits: Option<Vec<E>>,
}

impl<'a, E: Element> DecodeSession<'a, E> {
    pub fn new(model: &'a HaploModel<E>) -> Self {
        let (pre_caches, post_caches) = model.fresh_caches();
        DecodeSession {
            model,
            pre_caches,
            post_caches,
            len: 0,
            last_logits: None,
        }
    }

    pub fn prefix_len(&self) -> usize {
        self.len
    }

    pub fn cache_len(&self) -> usize {
        self.pre_caches.first().map(|c| c.len()).unwrap_or(0)
    }

    /// Processes the prompt in one pass (block-descriptor attention),
    /// filling every layer cache and the last-position logits.
    pub fn prefill(&mut self, inputs: &[SegmentInput]) -> Result<()> {
        let tape = Tape::disabled();
        let mut opts = PassOpts {
            fast_path: true,
            capture: None,
            pre_caches: Some(std::mem::take(&mut self.pre_caches)),
            post_caches: Some(std::mem::take(&mut self.post_caches)),
        };
        let (seq, logits) = self.model.forward_logits(inputs, &tape, &mut opts)?;
        self.pre_caches = opts.pre_caches.take().expect("caches back");
        self.post_caches = opts.post_caches.take().expect("caches back");
        self.len = seq.len();
        let c = logits.shape()[1];
        let data = logits.data();
        self.last_logits = Some(data[(seq.len() - 1) * c..].to_vec());
        Ok(())
    }

    /// Feeds one text token incrementally; returns nothing, the logits
    /// become the session's last logits.
    pub fn push_token(&mut self, token: usize) -> Result<()> {
        if self.len >= self.model.cfg.max_seq {
            return Err(Error::PromptTooLong {
                prompt: self.len + 1,
                max: self.model.cfg.max_seq,
            });
        }
        let logits = self.model.step_token(
            token,
            self.len,
            &mut self.pre_caches,
            &mut self.post_caches,
        )?;
        self.len += 1;
        self.last_logits = Some(logits.to_vec());
        Ok(())
    }

    pub fn last_logits(&self) -> Option<&[E]> {
        self.last_logits.as_deref()
    }
}

fn softmax_probs(logits: &[f64], temperature: f64) -> Vec<f64> {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| ((l - mx) / temperature).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

fn log_softmax_at(logits: &[f64], idx: usize) -> f64 {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse: f64 = mx + logits.iter().map(|&l| (l - mx).exp()).sum::<f64>().ln();
    logits[idx] - lse
}

fn pick_token(logits: &[f64], sampling: Sampling, rng: &mut ChaCha8Rng) -> usize {
    match sampling {
        Sampling::Greedy => {
            let mut best = 0;
            for (i, &v) in logits.iter().enumerate() {
                if v > logits[best] {
                    best = i;
                }
            }
            best
        }
        Sampling::Temperature(t) => {
            if t <= 1e-9 {
                return pick_token(logits, Sampling::Greedy, rng);
            }
            let probs = softmax_probs(logits, t);
            let mut u: f64 = rng.random();
            for (i, &p) in probs.iter().enumerate() {
                u -= p;
                if u <= 0.0 {
                    return i;
                }
            }
            probs.len() - 1
        }
        Sampling::TopK { k, temperature } => {
            let mut idx: Vec<usize> = (0..logits.len()).collect();
            idx.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap());
            idx.truncate(k.max(1));
            let restricted: Vec<f64> = idx.iter().map(|&i| logits[i]).collect();
            let j = pick_token(&restricted, Sampling::Temperature(temperature), rng);
            idx[j]
        }
    }
}

/// Samples a continuation for the prompt until EOS or the token budget.
/// Only text tokens are ever produced; greedy decoding is deterministic.
pub fn generate<E: Element>(
    model: &HaploModel<E>,
    vocab: &Vocab,
    prompt: &[SegmentInput],
    cfg: &GenerateConfig,
) -> Result<Generation> {
    let mut session = DecodeSession::new(model);
    session.prefill(prompt)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut tokens = Vec::new();
    let mut logprobs = Vec::new();
    for _ in 0..cfg.max_new_tokens {
        let logits: Vec<f64> = session
            .last_logits()
            .expect("prefill ran")
            .iter()
            .map(|v| v.to64())
            .collect();
        let next = pick_token(&logits, cfg.sampling, &mut rng);
        logprobs.push(log_softmax_at(&logits, next));
        tokens.push(next);
        if next == vocab.eos() {
            break;
        }
        session.push_token(next)?;
    }
    Ok(Generation { tokens, logprobs })
}

/// Teacher-forced log-likelihood of `continuation` after `prompt`,
/// computed in one full forward pass (no cache).
pub fn teacher_forced_logprob<E: Element>(
    model: &HaploModel<E>,
    prompt: &[SegmentInput],
    continuation: &[usize],
) -> Result<f64> {
    let tape = Tape::disabled();
    let mut inputs = prompt.to_vec();
    inputs.push(SegmentInput::Text(continuation.to_vec()));
    let mut opts = PassOpts::inference();
    let (seq, logits) = model.forward_logits(&inputs, &tape, &mut opts)?;
    let prefix = seq.len() - continuation.len();
    let c = logits.shape()[1];
    let data = logits.data();
    let mut total = 0.0;
    for (j, &tok) in continuation.iter().enumerate() {
        let row = prefix + j - 1;
        let logits_row: Vec<f64> = data[row * c..(row + 1) * c]
            .iter()
            .map(|v| v.to64())
            .collect();
        total += log_softmax_at(&logits_row, tok);
    }
    Ok(total)
}

/// Exact-match evaluation over held-out main samples.
#[derive(Clone, Debug, Serialize)]
pub struct TaskStats {
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub n: usize,
    pub overall_accuracy: f64,
    pub per_task: BTreeMap<String, TaskStats>,
    /// "true_color->predicted_first_token" counts for color questions.
    pub color_confusion: BTreeMap<String, usize>,
    /// "true_cell->predicted_cell" counts for where questions.
    pub position_confusion: BTreeMap<String, usize>,
    pub mean_answer_len: f64,
}

fn task_name(t: Task) -> &'static str {
    match t {
        Task::ColorAt => "color_at",
        Task::WhereIs => "where_is",
        Task::RowColors => "row_colors",
    }
}

pub fn eval_toy_vqa<E: Element>(
    model: &HaploModel<E>,
    ds: &ToyDataset,
    cfg: &RunConfig,
    include_aux: bool,
) -> Result<EvalReport> {
    let cell_px = cfg.model.patch * cfg.data.cell_patches;
    let vocab = &ds.vocab;
    let mut per_task: BTreeMap<String, TaskStats> = BTreeMap::new();
    let mut color_confusion = BTreeMap::new();
    let mut position_confusion = BTreeMap::new();
    let (mut correct_total, mut n_total, mut len_sum) = (0usize, 0usize, 0usize);

    for s in &ds.heldout {
        if !include_aux && s.task == Task::RowColors {
            continue;
        }
        let img = s.render(cell_px, cfg.model.channels);
        let prompt = vec![
            SegmentInput::Image(img),
            SegmentInput::Text(s.question.clone()),
        ];
        let gen = generate(
            model,
            vocab,
            &prompt,
            &GenerateConfig {
                sampling: Sampling::Greedy,
                max_new_tokens: s.answer.len() + 4,
                seed: 0,
            },
        )?;
        let hit = gen.tokens == s.answer;
        let stats = per_task.entry(task_name(s.task).into()).or_insert(TaskStats {
            n: 0,
            correct: 0,
            accuracy: 0.0,
        });
        stats.n += 1;
        stats.correct += hit as usize;
        correct_total += hit as usize;
        n_total += 1;
        len_sum += gen.tokens.len();

        match s.task {
            Task::ColorAt => {
                let truth = vocab.word(s.answer[0]).to_string();
                let pred = gen
                    .tokens
                    .first()
                    .map(|&t| vocab.word(t).to_string())
                    .unwrap_or_else(|| "<none>".into());
                *color_confusion.entry(format!("{truth}->{pred}")).or_insert(0) += 1;
            }
            Task::WhereIs => {
                let truth = vocab.decode(&s.answer[..s.answer.len() - 1]);
                let pred = if gen.tokens.len() >= 2 {
                    vocab.decode(&gen.tokens[..gen.tokens.len().saturating_sub(1)])
                } else {
                    "<none>".into()
                };
                *position_confusion
                    .entry(format!("[{truth}]->[{pred}]"))
                    .or_insert(0) += 1;
            }
            Task::RowColors => {}
        }
    }
    for stats in per_task.values_mut() {
        stats.accuracy = stats.correct as f64 / stats.n.max(1) as f64;
    }
    Ok(EvalReport {
        n: n_total,
        overall_accuracy: correct_total as f64 / n_total.max(1) as f64,
        per_task,
        color_confusion,
        position_confusion,
        mean_answer_len: len_sum as f64 / n_total.max(1) as f64,
    })
}

/// Attention of prompt words over the image patch grid at one layer.
pub struct AttentionDump {
    /// Row per word, column per patch.
    pub rows: Vec<Vec<f64>>,
    pub words: Vec<String>,
    pub patch_grid: (usize, usize),
    pub word_positions: Vec<usize>,
    pub image_positions: Vec<usize>,
}

/// Runs the prompt with capture enabled and extracts word -> patch
/// attention at `layer` (index into pre stack then post stack).
pub fn dump_attention<E: Element>(
    model: &HaploModel<E>,
    vocab: &Vocab,
    image: &Image,
    prompt_text: &str,
    layer: usize,
    words: &[String],
) -> Result<AttentionDump> {
    let ids = vocab.encode(prompt_text)?;
    let prompt_words: Vec<String> = prompt_text.split_whitespace().map(String::from).collect();
    let mut word_positions = Vec::with_capacity(words.len());
    let hw = model.patch_embed.token_count(image)?;
    for w in words {
        let idx = prompt_words
            .iter()
            .position(|p| p == w)
            .ok_or_else(|| Error::WordNotFound {
                word: w.clone(),
                prompt_tokens: prompt_words.clone(),
            })?;
        word_positions.push(hw + idx);
    }
    let inputs = vec![
        SegmentInput::Image(image.clone()),
        SegmentInput::Text(ids),
    ];
    let tape = Tape::disabled();
    let mut opts = PassOpts::inference().with_capture();
    let (seq, _) = model.forward_logits(&inputs, &tape, &mut opts)?;
    let capture: AttnCapture = opts.capture.take().expect("capture ran");
    let image_positions: Vec<usize> = (0..seq.len())
        .filter(|&p| seq.modality_of(p) == Modality::Image)
        .collect();
    let rows = capture.map(layer, &word_positions, &image_positions)?;
    let side = (image.h / model.patch_embed.patch, image.w / model.patch_embed.patch);
    Ok(AttentionDump {
        rows,
        words: words.to_vec(),
        patch_grid: side,
        word_positions,
        image_positions,
    })
}

/// Binary PGM (P5) heatmap, one byte per pixel, values min-max normalized,
/// each patch upscaled to a `scale` x `scale` tile.
pub fn write_pgm(path: &Path, values: &[f64], w: usize, h: usize, scale: usize) -> Result<()> {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let span = (hi - lo).max(1e-12);
    let (out_w, out_h) = (w * scale, h * scale);
    let mut bytes = Vec::with_capacity(out_w * out_h);
    for y in 0..out_h {
        for x in 0..out_w {
            let v = values[(y / scale) * w + x / scale];
            bytes.push((255.0 * (v - lo) / span).round() as u8);
        }
    }
    let mut file = Vec::new();
    file.extend_from_slice(format!("P5\n{out_w} {out_h}\n255\n").as_bytes());
    file.extend_from_slice(&bytes);
    std::fs::write(path, file)?;
    Ok(())
}

/// Loads an RGB(A)/gray PNG as an `Image` with values in [0,1].
pub fn read_png(path: &Path) -> Result<Image> {
    let decoder = png::Decoder::new(std::io::BufReader::new(std::fs::File::open(path)?));
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::PngDecode(e.to_string()))?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::PngDecode(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = info.color_type.samples();
    let mut pixels = Vec::with_capacity(w * h * 3);
    for i in 0..w * h {
        for c in 0..3 {
            let v = match channels {
                1 | 2 => buf[i * channels],
                _ => buf[i * channels + c.min(channels - 1)],
            };
            pixels.push(v as f32 / 255.0);
        }
    }
    Image::new(h, w, 3, pixels)
}

/// Writes an `Image` (values in [0,1]) as an 8-bit RGB PNG.
pub fn write_png(path: &Path, image: &Image) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut enc = png::Encoder::new(
        std::io::BufWriter::new(file),
        image.w as u32,
        image.h as u32,
    );
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc
        .write_header()
        .map_err(|e| Error::PngDecode(e.to_string()))?;
    let mut data = Vec::with_capacity(image.w * image.h * 3);
    for y in 0..image.h {
        for x in 0..image.w {
            for c in 0..3 {
                let v = image.pixel(y, x, c.min(image.channels - 1));
                data.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    writer
        .write_image_data(&data)
        .map_err(|e| Error::PngDecode(e.to_string()))?;
    Ok(())
}
