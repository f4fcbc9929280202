//! Versioned JSON artifact files and the pipeline manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Versioned<T> {
    format_version: u32,
    #[serde(flatten)]
    body: T,
}

/// Pretty JSON object with a leading `format_version` field.
pub fn to_versioned_json<T: Serialize>(body: &T) -> Result<String> {
    let v = Versioned {
        format_version: FORMAT_VERSION,
        body,
    };
    Ok(serde_json::to_string_pretty(&v)? + "\n")
}

pub fn from_versioned_json<T: DeserializeOwned>(text: &str) -> Result<T> {
    let v: Versioned<T> = serde_json::from_str(text)?;
    if v.format_version != FORMAT_VERSION {
        return Err(Error::InvalidInput(format!(
            "unsupported format_version {} (expected {FORMAT_VERSION})",
            v.format_version
        )));
    }
    Ok(v.body)
}

pub fn save_versioned<T: Serialize>(body: &T, path: &Path) -> Result<()> {
    fs::write(path, to_versioned_json(body)?)?;
    Ok(())
}

pub fn load_versioned<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::InvalidInput(format!("cannot read {}: {e}", path.display())))?;
    from_versioned_json(&text)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub corpus: u64,
    pub init: u64,
    pub train: u64,
    pub latency: u64,
    pub search: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            corpus: 1,
            init: 2,
            train: 3,
            latency: 4,
            search: 5,
        }
    }
}

/// Every file the pipeline stages read or write, relative paths resolved
/// against the manifest's own directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineManifest {
    pub space: PathBuf,
    pub corpus_dir: PathBuf,
    pub bank: PathBuf,
    pub latency_dataset: PathBuf,
    pub predictor: PathBuf,
    pub library: PathBuf,
    pub logs_dir: PathBuf,
    pub hardware: String,
    pub seeds: Seeds,
    pub vocab_size: usize,
    pub train_pairs: usize,
    pub train_steps: usize,
    pub batch_size: usize,
    pub latency_samples: usize,
    pub constraints: Vec<f64>,
    pub population_size: usize,
    pub n_iterations: usize,
}

impl PipelineManifest {
    /// A manifest for a small run with all files under `dir`.
    pub fn desk(dir: &Path) -> Self {
        Self {
            space: dir.join("space.json"),
            corpus_dir: dir.join("corpus"),
            bank: dir.join("bank.ckpt"),
            latency_dataset: dir.join("latency.jsonl"),
            predictor: dir.join("predictor.json"),
            library: dir.join("library.json"),
            logs_dir: dir.join("logs"),
            hardware: "sim-gpu".into(),
            seeds: Seeds::default(),
            vocab_size: 64,
            train_pairs: 2000,
            train_steps: 400,
            batch_size: 32,
            latency_samples: 200,
            constraints: vec![500.0, 700.0, 900.0, 1100.0, 1300.0, 1500.0],
            population_size: 20,
            n_iterations: 6,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut m: Self = load_versioned(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut m.space,
            &mut m.corpus_dir,
            &mut m.bank,
            &mut m.latency_dataset,
            &mut m.predictor,
            &mut m.library,
            &mut m.logs_dir,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_versioned(self, path)
    }
}
