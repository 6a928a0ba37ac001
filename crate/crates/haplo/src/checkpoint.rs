//! Checkpoint container: a JSON manifest followed by named raw
//! little-endian float32 parameter blobs, all in one file.
//!
//! Layout:
//!
//! ```text
//! bytes 0..4    magic "HPLC"
//! bytes 4..8    format version (u32 LE, currently 1)
//! bytes 8..16   manifest length M (u64 LE)
//! bytes 16..16+M  manifest JSON (stage, step, config, vocab, blob index)
//! then, for each blob in manifest order: numel * 4 bytes of f32 LE data
//! ```
//!
//! Stage-1 checkpoints carry the distillation heads and the frozen
//! teacher; the stage-1 -> stage-2 transition drops both, and every other
//! parameter survives bit-exactly (f32 storage).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::model::{HaploModel, Stage, VisionTeacher};
use crate::tensor::{Element, Tensor};

const MAGIC: &[u8; 4] = b"HPLC";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize, Clone, Debug)]
struct BlobEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize, Clone, Debug)]
pub struct Manifest {
    pub stage: String,
    pub step: usize,
    pub config: RunConfig,
    pub vocab: Vocab,
    blobs: Vec<BlobEntry>,
}

impl Manifest {
    pub fn stage(&self) -> Result<Stage> {
        match self.stage.as_str() {
            "stage1" => Ok(Stage::Stage1),
            "stage2" => Ok(Stage::Stage2),
            other => Err(Error::Checkpoint(format!("unknown stage tag {other:?}"))),
        }
    }
}

fn write_blob<E: Element>(w: &mut impl Write, t: &Tensor<E>) -> Result<()> {
    let data = t.data();
    let mut buf = Vec::with_capacity(data.len() * 4);
    for v in data.iter() {
        buf.extend_from_slice(&(v.to64() as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Serializes model (+ optional teacher) parameters with run metadata.
pub fn save<E: Element>(
    path: &Path,
    model: &HaploModel<E>,
    teacher: Option<&VisionTeacher<E>>,
    config: &RunConfig,
    vocab: &Vocab,
    step: usize,
) -> Result<()> {
    let mut named = model.parameters();
    if let Some(t) = teacher {
        named.extend(t.parameters());
    }
    let manifest = Manifest {
        stage: match model.stage {
            Stage::Stage1 => "stage1".into(),
            Stage::Stage2 => "stage2".into(),
        },
        step,
        config: config.clone(),
        vocab: vocab.clone(),
        blobs: named
            .iter()
            .map(|(name, t)| BlobEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let manifest_json = serde_json::to_vec(&manifest)?;
    w.write_all(&(manifest_json.len() as u64).to_le_bytes())?;
    w.write_all(&manifest_json)?;
    for (_, t) in &named {
        write_blob(&mut w, t)?;
    }
    w.flush()?;
    Ok(())
}

/// Raw parsed checkpoint: manifest plus name -> (shape, data).
pub struct RawCheckpoint {
    pub manifest: Manifest,
    blobs: Vec<(String, Vec<usize>, Vec<f32>)>,
}

impl RawCheckpoint {
    pub fn blob(&self, name: &str) -> Option<(&[usize], &[f32])> {
        self.blobs
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, s, d)| (s.as_slice(), d.as_slice()))
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.blobs.iter().any(|(n, _, _)| n.starts_with(prefix))
    }
}

pub fn read_raw(path: &Path) -> Result<RawCheckpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: bad magic {magic:?}",
            path.display()
        )));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let mut len8 = [0u8; 8];
    r.read_exact(&mut len8)?;
    let mlen = u64::from_le_bytes(len8) as usize;
    let mut mbuf = vec![0u8; mlen];
    r.read_exact(&mut mbuf)?;
    let manifest: Manifest = serde_json::from_slice(&mbuf)?;

    let mut blobs = Vec::with_capacity(manifest.blobs.len());
    for entry in &manifest.blobs {
        let numel: usize = entry.shape.iter().product();
        let mut raw = vec![0u8; numel * 4];
        r.read_exact(&mut raw)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        blobs.push((entry.name.clone(), entry.shape.clone(), data));
    }
    Ok(RawCheckpoint { manifest, blobs })
}

fn fill_params<E: Element>(
    raw: &RawCheckpoint,
    named: &[(String, Tensor<E>)],
    what: &str,
) -> Result<()> {
    for (name, t) in named {
        let (shape, data) = raw.blob(name).ok_or_else(|| {
            Error::Checkpoint(format!("{what}: missing parameter blob {name:?}"))
        })?;
        if shape != t.shape() {
            return Err(Error::Checkpoint(format!(
                "{what}: blob {name:?} shape {shape:?} != expected {:?}",
                t.shape()
            )));
        }
        t.with_data_mut(|dst| {
            for (d, &s) in dst.iter_mut().zip(data) {
                *d = E::of(s as f64);
            }
        });
    }
    Ok(())
}

/// Rebuilds a model (and the teacher, when present in the file) from a
/// checkpoint.
pub fn load<E: Element>(
    path: &Path,
) -> Result<(Manifest, HaploModel<E>, Option<VisionTeacher<E>>)> {
    let raw = read_raw(path)?;
    let stage = raw.manifest.stage()?;
    let cfg = raw.manifest.config.clone();
    let mut model = HaploModel::<E>::new(&cfg.model, cfg.seed)?;
    if stage == Stage::Stage2 {
        model.enter_stage2();
    }
    fill_params(&raw, &model.parameters(), "model")?;

    let teacher = if raw.has_prefix("teacher.") {
        let t = teacher_for_config(&cfg);
        fill_params(&raw, &t.parameters(), "teacher")?;
        Some(t)
    } else {
        None
    };
    Ok((raw.manifest, model, teacher))
}

/// The teacher is derived from the run seed so any process can rebuild it
/// identically.
pub fn teacher_seed(seed: u64) -> u64 {
    seed ^ 0x7eac_4e55_0000_0001
}

pub fn teacher_for_config<E: Element>(cfg: &RunConfig) -> VisionTeacher<E> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(teacher_seed(cfg.seed));
    VisionTeacher::init(&cfg.model, &mut rng)
}
