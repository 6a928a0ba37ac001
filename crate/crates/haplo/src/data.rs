//! Synthetic colored-grid VQA data: vocabulary, rendering, question
//! generation, train/held-out splits and aux/main interleaving.
//!
//! Each sample shows a g x g grid of colored cells and asks either
//! "color at row R col C" (answer: the color word) or "where is COLOR"
//! (answer: "row R col C", asked only when that color is unique in the
//! grid). Auxiliary samples are caption-like ("colors in row R") and play
//! the role of the interleaved side data in pre-training.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{DataConfig, ModelConfig};
use crate::embed::Image;
use crate::error::{Error, Result};
use crate::model::SegmentInput;

/// Color palette: name and RGB in [0,1].
pub const PALETTE: [(&str, [f32; 3]); 8] = [
    ("red", [0.9, 0.1, 0.1]),
    ("green", [0.1, 0.8, 0.15]),
    ("blue", [0.15, 0.2, 0.9]),
    ("yellow", [0.9, 0.85, 0.1]),
    ("cyan", [0.1, 0.8, 0.85]),
    ("magenta", [0.85, 0.1, 0.8]),
    ("orange", [0.95, 0.55, 0.1]),
    ("gray", [0.5, 0.5, 0.5]),
];

pub const PAD_TOKEN: &str = "<pad>";
pub const EOS_TOKEN: &str = "<eos>";

/// Fixed toy vocabulary with whitespace tokenization. Token ids are
/// stable: specials first, then the word list in declaration order; the
/// remaining ids up to the configured size are unused fillers.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Vocab {
    words: Vec<String>,
    size: usize,
}

impl Vocab {
    pub fn build(size: usize) -> Result<Self> {
        let mut words: Vec<String> = vec![PAD_TOKEN.into(), EOS_TOKEN.into()];
        for w in [
            "what", "color", "is", "at", "row", "col", "where", "the", "colors", "in", "?",
        ] {
            words.push(w.into());
        }
        for (name, _) in PALETTE {
            words.push(name.into());
        }
        for digit in 0..10 {
            words.push(digit.to_string());
        }
        if words.len() > size {
            return Err(Error::VocabTooSmall {
                needed: words.len(),
                have: size,
            });
        }
        Ok(Vocab { words, size })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn eos(&self) -> usize {
        1
    }

    pub fn id(&self, word: &str) -> Result<usize> {
        self.words
            .iter()
            .position(|w| w == word)
            .ok_or_else(|| Error::Config(format!("word {word:?} not in vocabulary")))
    }

    pub fn word(&self, id: usize) -> &str {
        if id < self.words.len() {
            &self.words[id]
        } else {
            "<unk>"
        }
    }

    /// Whitespace tokenizer.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.word(i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Main,
    Auxiliary,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Task {
    ColorAt,
    WhereIs,
    RowColors,
}

/// One sample: a grid image, a tokenized question and its answer. The
/// answer is uniquely determined by image + question.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ToySample {
    /// Cell colors, row-major, palette indices.
    pub cells: Vec<usize>,
    pub grid: usize,
    pub question: Vec<usize>,
    /// Answer tokens, EOS-terminated.
    pub answer: Vec<usize>,
    pub role: Role,
    pub task: Task,
    /// Cell the question is about (row-major index).
    pub target_cell: usize,
}

impl ToySample {
    /// Renders the grid to pixels: each cell is `cell_px` square.
    pub fn render(&self, cell_px: usize, channels: usize) -> Image {
        render_grid(&self.cells, self.grid, cell_px, channels)
    }
}

pub fn render_grid(cells: &[usize], grid: usize, cell_px: usize, channels: usize) -> Image {
    let side = grid * cell_px;
    let mut pixels = vec![0.0f32; side * side * channels];
    for (idx, &color) in cells.iter().enumerate() {
        let (cy, cx) = (idx / grid, idx % grid);
        let rgb = PALETTE[color].1;
        for dy in 0..cell_px {
            for dx in 0..cell_px {
                let y = cy * cell_px + dy;
                let x = cx * cell_px + dx;
                for c in 0..channels {
                    pixels[(y * side + x) * channels + c] = rgb[c % 3];
                }
            }
        }
    }
    Image::new(side, side, channels, pixels).expect("grid render")
}

/// Deterministic dataset with disjoint train/held-out grids.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ToyDataset {
    pub vocab: Vocab,
    pub train: Vec<ToySample>,
    pub heldout: Vec<ToySample>,
    pub grid: usize,
    pub colors: usize,
}

impl ToyDataset {
    pub fn cell_pixels(&self, model: &ModelConfig, data: &DataConfig) -> usize {
        model.patch * data.cell_patches
    }
}

fn grid_key(cells: &[usize]) -> u64 {
    // FNV-1a over the cell colors; grids hashing equal are identical here
    let mut h = 0xcbf29ce484222325u64;
    for &c in cells {
        h ^= c as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Generates `n_train + n_heldout` samples. Deterministic for a fixed
/// seed; color/position targets cycle round-robin for balance; held-out
/// grids never appear in training.
pub fn synth_dataset(seed: u64, cfg: &DataConfig, vocab_size: usize) -> Result<ToyDataset> {
    if cfg.grid < 2 {
        return Err(Error::Config("grid side must be >= 2".into()));
    }
    if cfg.colors < 2 || cfg.colors > PALETTE.len() {
        return Err(Error::Config(format!(
            "colors must be in 2..={}",
            PALETTE.len()
        )));
    }
    if cfg.grid > 10 {
        return Err(Error::Config("grid side must be <= 10 (digit vocab)".into()));
    }
    let vocab = Vocab::build(vocab_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_da7a);
    let mut seen = BTreeSet::new();
    let total = cfg.n_train + cfg.n_heldout;
    let mut samples = Vec::with_capacity(total);
    let ncells = cfg.grid * cfg.grid;

    for i in 0..total {
        // round-robin over target cell, color and task for balance
        let target_cell = i % ncells;
        let target_color = (i / ncells) % cfg.colors;
        let task = match i % 10 {
            0 | 1 | 2 | 3 => Task::ColorAt,
            4 | 5 | 6 | 7 => Task::WhereIs,
            _ => Task::RowColors,
        };

        // sample a fresh grid; for WhereIs force the target color unique
        let cells = loop {
            let mut cells: Vec<usize> =
                (0..ncells).map(|_| rng.random_range(0..cfg.colors)).collect();
            cells[target_cell] = target_color;
            if task == Task::WhereIs {
                let alt: Vec<usize> =
                    (0..cfg.colors).filter(|&c| c != target_color).collect();
                for (j, cell) in cells.iter_mut().enumerate() {
                    if j != target_cell && *cell == target_color {
                        *cell = alt[rng.random_range(0..alt.len())];
                    }
                }
            }
            if seen.insert(grid_key(&cells)) {
                break cells;
            }
        };

        let (row, col) = (target_cell / cfg.grid, target_cell % cfg.grid);
        let color_word = PALETTE[target_color].0;
        let (question, mut answer) = match task {
            Task::ColorAt => (
                format!("color at row {row} col {col} ?"),
                vocab.encode(&format!("{color_word}"))?,
            ),
            Task::WhereIs => (
                format!("where is {color_word} ?"),
                vocab.encode(&format!("row {row} col {col}"))?,
            ),
            Task::RowColors => {
                let words: Vec<&str> = (0..cfg.grid)
                    .map(|c| PALETTE[cells[row * cfg.grid + c]].0)
                    .collect();
                (
                    format!("colors in row {row} ?"),
                    vocab.encode(&words.join(" "))?,
                )
            }
        };
        answer.push(vocab.eos());
        samples.push(ToySample {
            cells,
            grid: cfg.grid,
            question: vocab.encode(&question)?,
            answer,
            role: if task == Task::RowColors {
                Role::Auxiliary
            } else {
                Role::Main
            },
            task,
            target_cell,
        });
    }

    samples.shuffle(&mut rng);
    let heldout = samples.split_off(cfg.n_train);
    Ok(ToyDataset {
        vocab,
        train: samples,
        heldout,
        grid: cfg.grid,
        colors: cfg.colors,
    })
}

/// Content hash of a dataset (determinism checks).
pub fn dataset_hash(ds: &ToyDataset) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    let mut mix = |v: u64| {
        h ^= v;
        h = h.wrapping_mul(0x100000001b3);
    };
    for s in ds.train.iter().chain(&ds.heldout) {
        mix(grid_key(&s.cells));
        for &t in s.question.iter().chain(&s.answer) {
            mix(t as u64);
        }
        mix(s.target_cell as u64);
    }
    h
}

/// A training sequence: segments plus the flat token stream and the
/// answer-span mask aligned to sequence positions.
pub struct BuiltSequence {
    pub inputs: Vec<SegmentInput>,
    /// Token id per position; image positions carry 0 (never read).
    pub tokens: Vec<usize>,
    /// True at positions whose *next* token is an answer token.
    pub predict_mask: Vec<bool>,
    /// True at text positions (loss routing for stage 1).
    pub text_mask: Vec<bool>,
    pub images: Vec<Image>,
}

/// Lays out `image, question, answer` (per sample, in order) and marks
/// answer prediction slots. `patch` is the model patch size (image token
/// granularity); `cell_px` the rendered cell side.
pub fn build_sequence(
    samples: &[&ToySample],
    cell_px: usize,
    patch: usize,
    channels: usize,
) -> BuiltSequence {
    let mut inputs = Vec::new();
    let mut tokens = Vec::new();
    let mut predict = Vec::new();
    let mut text_mask = Vec::new();
    let mut images = Vec::new();
    for s in samples {
        let img = s.render(cell_px, channels);
        let n_img_tokens = (img.h / patch) * (img.w / patch);
        images.push(img.clone());
        inputs.push(SegmentInput::Image(img));
        // image positions: no tokens, no predictions
        for _ in 0..n_img_tokens {
            tokens.push(0);
            predict.push(false);
            text_mask.push(false);
        }
        let text: Vec<usize> = s
            .question
            .iter()
            .chain(s.answer.iter())
            .copied()
            .collect();
        let q_len = s.question.len();
        for (j, &t) in text.iter().enumerate() {
            tokens.push(t);
            // predict slots: the position *before* each answer token
            predict.push(j + 1 >= q_len && j + 1 < text.len());
            text_mask.push(true);
        }
        inputs.push(SegmentInput::Text(text));
    }
    BuiltSequence {
        inputs,
        tokens,
        predict_mask: predict,
        text_mask,
        images,
    }
}

/// Picks batch sequences per the interleaving scheme: with probability
/// `interleave_ratio`, an auxiliary sample is glued to a main sample in a
/// random order (`<aux, main>` or `<main, aux>`); otherwise main-only.
pub fn compose_batch<'a>(
    train: &'a [ToySample],
    batch: usize,
    interleave_ratio: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<&'a ToySample>> {
    let mains: Vec<&ToySample> = train.iter().filter(|s| s.role == Role::Main).collect();
    let auxs: Vec<&ToySample> = train.iter().filter(|s| s.role == Role::Auxiliary).collect();
    let mut out = Vec::with_capacity(batch);
    for _ in 0..batch {
        let main = mains[rng.random_range(0..mains.len())];
        if !auxs.is_empty() && rng.random::<f64>() < interleave_ratio {
            let aux = auxs[rng.random_range(0..auxs.len())];
            if rng.random::<bool>() {
                out.push(vec![aux, main]);
            } else {
                out.push(vec![main, aux]);
            }
        } else {
            out.push(vec![main]);
        }
    }
    out
}
