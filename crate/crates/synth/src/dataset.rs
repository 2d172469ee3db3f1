//! Dataset generation with per-sample rng streams, and the on-disk format:
//! `manifest.json` plus `samples.bin` (per sample: image bytes `[3, H, W]`
//! then mask bytes `[H, W]`, one byte per value, at the manifest offsets).

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, SynthError};
use crate::expression::{emit_expression, Dialect, Expression};
use crate::render::render;
use crate::resolver::resolve;
use crate::scene::{generate_scene, SceneSpec, SynthConfig};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SAMPLES_FILE: &str = "samples.bin";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    fn tag(self) -> &'static [u8] {
        match self {
            Split::Train => b"train",
            Split::Val => b"val",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub synth: SynthConfig,
    pub dialect: Dialect,
    pub seed: u64,
    pub train: usize,
    pub val: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            dialect: Dialect::Spatial,
            seed: 0,
            train: 2000,
            val: 500,
        }
    }
}

impl DatasetConfig {
    /// Hex sha256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(json))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub split: Split,
    pub index: usize,
    /// Dataset seed; together with split and index it fixes the sample's rng stream.
    pub seed: u64,
    pub dialect: Dialect,
    pub scene: SceneSpec,
    pub referent: usize,
    pub expression: Expression,
    /// `[3, H, W]` channel-major bytes.
    #[serde(skip)]
    pub image: Vec<u8>,
    /// `[H, W]`, 1 inside the referent.
    #[serde(skip)]
    pub mask: Vec<u8>,
}

impl SampleRecord {
    /// Image scaled to [0, 1].
    pub fn image_f64(&self) -> Vec<f64> {
        self.image.iter().map(|&v| v as f64 / 255.0).collect()
    }

    pub fn mask_f64(&self) -> Vec<f64> {
        self.mask.iter().map(|&v| v as f64).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub train: Vec<SampleRecord>,
    pub val: Vec<SampleRecord>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[SampleRecord] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Independent stream for one sample, so generation order never matters.
pub fn sample_rng(seed: u64, dialect: Dialect, split: Split, index: usize) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(dialect.as_str().as_bytes());
    h.update(split.tag());
    h.update((index as u64).to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

pub fn generate_sample(cfg: &DatasetConfig, split: Split, index: usize) -> Result<SampleRecord> {
    let mut rng = sample_rng(cfg.seed, cfg.dialect, split, index);
    let margin = cfg.synth.spatial_margin;
    for _ in 0..cfg.synth.max_attempts {
        let scene = generate_scene(&mut rng, &cfg.synth)?;
        let referent = rng.random_range(0..scene.objects.len());
        let Some(expression) = emit_expression(&scene, referent, cfg.dialect, margin, &mut rng)
        else {
            continue;
        };
        if resolve(&scene, &expression.text, margin)? != [referent] {
            continue;
        }
        let (image, mask) = render(&scene, referent, cfg.synth.image_size);
        return Ok(SampleRecord {
            split,
            index,
            seed: cfg.seed,
            dialect: cfg.dialect,
            scene,
            referent,
            expression,
            image,
            mask,
        });
    }
    Err(SynthError::Unsatisfiable {
        attempts: cfg.synth.max_attempts,
        detail: format!(
            "no scene with an unambiguous {} expression for {:?} sample {index}",
            cfg.dialect.as_str(),
            split
        ),
    })
}

pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    cfg.synth.validate()?;
    let gen = |split, n| {
        (0..n)
            .map(|i| generate_sample(cfg, split, i))
            .collect::<Result<Vec<_>>>()
    };
    Ok(Dataset {
        config: cfg.clone(),
        train: gen(Split::Train, cfg.train)?,
        val: gen(Split::Val, cfg.val)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub offset: u64,
    pub image_len: u64,
    pub mask_len: u64,
    #[serde(flatten)]
    pub record: SampleRecord,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub config_hash: String,
    pub config: DatasetConfig,
    pub seed: u64,
    pub train_size: usize,
    pub val_size: usize,
    pub samples_len: u64,
    /// Hex sha256 of `samples.bin`.
    pub samples_sha256: String,
    pub samples: Vec<SampleEntry>,
}

pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<DatasetManifest> {
    fs::create_dir_all(dir)?;
    let mut blob = Vec::new();
    let mut samples = Vec::with_capacity(ds.train.len() + ds.val.len());
    for rec in ds.train.iter().chain(&ds.val) {
        let offset = blob.len() as u64;
        blob.extend_from_slice(&rec.image);
        blob.extend_from_slice(&rec.mask);
        samples.push(SampleEntry {
            offset,
            image_len: rec.image.len() as u64,
            mask_len: rec.mask.len() as u64,
            record: rec.clone(),
        });
    }
    let manifest = DatasetManifest {
        version: FORMAT_VERSION,
        config_hash: ds.config.hash(),
        config: ds.config.clone(),
        seed: ds.config.seed,
        train_size: ds.train.len(),
        val_size: ds.val.len(),
        samples_len: blob.len() as u64,
        samples_sha256: hex(&Sha256::digest(&blob)),
        samples,
    };
    fs::write(dir.join(SAMPLES_FILE), &blob)?;
    fs::write(
        dir.join(MANIFEST_FILE),
        serde_json::to_vec_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let text = fs::read(dir.join(MANIFEST_FILE))?;
    let value: serde_json::Value = serde_json::from_slice(&text)?;
    let found = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if found != FORMAT_VERSION {
        return Err(SynthError::Version {
            found,
            expected: FORMAT_VERSION,
        });
    }
    Ok(serde_json::from_value(value)?)
}

/// Loads and verifies a dataset. With `expected` set, a dataset generated
/// from a different config is refused.
pub fn read_dataset(dir: &Path, expected: Option<&DatasetConfig>) -> Result<Dataset> {
    let m = read_manifest(dir)?;
    if m.config.hash() != m.config_hash {
        return Err(SynthError::Integrity(format!(
            "manifest config hash {} does not match its config ({})",
            m.config_hash,
            m.config.hash()
        )));
    }
    if let Some(cfg) = expected {
        if cfg.hash() != m.config_hash {
            return Err(SynthError::Integrity(format!(
                "dataset was generated from config {} but {} was requested",
                m.config_hash,
                cfg.hash()
            )));
        }
    }
    let blob = fs::read(dir.join(SAMPLES_FILE))?;
    let sum = hex(&Sha256::digest(&blob));
    if blob.len() as u64 != m.samples_len || sum != m.samples_sha256 {
        return Err(SynthError::Integrity(format!(
            "samples checksum failure: {} bytes with sha256 {sum}, manifest expects {} bytes with {}",
            blob.len(),
            m.samples_len,
            m.samples_sha256
        )));
    }
    if m.samples.len() != m.train_size + m.val_size {
        return Err(SynthError::Integrity(
            "sample count disagrees with split sizes".into(),
        ));
    }
    let mut train = Vec::with_capacity(m.train_size);
    let mut val = Vec::with_capacity(m.val_size);
    for e in m.samples {
        let start = e.offset as usize;
        let mid = start + e.image_len as usize;
        let end = mid + e.mask_len as usize;
        if end > blob.len() {
            return Err(SynthError::Integrity(format!(
                "sample at offset {start} runs past the end"
            )));
        }
        let mut rec = e.record;
        rec.image = blob[start..mid].to_vec();
        rec.mask = blob[mid..end].to_vec();
        match rec.split {
            Split::Train => train.push(rec),
            Split::Val => val.push(rec),
        }
    }
    Ok(Dataset {
        config: m.config,
        train,
        val,
    })
}
