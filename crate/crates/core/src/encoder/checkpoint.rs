use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ClassifierHead, LabelTable, TinyConfig, TinyEncoder, Vocab};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct EncoderFile {
    version: u32,
    backend: String,
    config: TinyConfig,
    vocab: Vocab,
    params: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct HeadFile {
    version: u32,
    dim: usize,
    labels: LabelTable,
    params: Vec<f64>,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string(value)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn check_version(found: u32) -> Result<()> {
    if found != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {found} (expected {CHECKPOINT_VERSION})"
        )));
    }
    Ok(())
}

fn to_scalars<S: Scalar>(values: Vec<f64>) -> Vec<S> {
    values.into_iter().map(S::lit).collect()
}

/// Writes vocabulary, hyperparameters and parameters as one JSON document.
/// Values are stored as `f64`, so `f32` and `f64` encoders reload bit-exact.
pub fn save_encoder<S: Scalar>(path: impl AsRef<Path>, encoder: &TinyEncoder<S>) -> Result<()> {
    let file = EncoderFile {
        version: CHECKPOINT_VERSION,
        backend: "tiny".into(),
        config: encoder.config().clone(),
        vocab: encoder.vocab().clone(),
        params: encoder.params().iter().map(|p| p.as_f64()).collect(),
    };
    write_json(path.as_ref(), &file)
}

pub fn load_encoder<S: Scalar>(path: impl AsRef<Path>) -> Result<TinyEncoder<S>> {
    let file: EncoderFile = read_json(path.as_ref())?;
    check_version(file.version)?;
    if file.backend != "tiny" {
        return Err(Error::Checkpoint(format!("unknown backend `{}`", file.backend)));
    }
    TinyEncoder::from_parts(file.config, file.vocab, to_scalars(file.params))
}

pub fn save_head<S: Scalar>(path: impl AsRef<Path>, head: &ClassifierHead<S>) -> Result<()> {
    let file = HeadFile {
        version: CHECKPOINT_VERSION,
        dim: head.dim(),
        labels: head.labels().clone(),
        params: head.params().iter().map(|p| p.as_f64()).collect(),
    };
    write_json(path.as_ref(), &file)
}

pub fn load_head<S: Scalar>(path: impl AsRef<Path>) -> Result<ClassifierHead<S>> {
    let file: HeadFile = read_json(path.as_ref())?;
    check_version(file.version)?;
    ClassifierHead::from_parts(file.labels, file.dim, to_scalars(file.params))
}

impl<S: Scalar> ClassifierHead<S> {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_head(path, self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        load_head(path)
    }
}
