//! Checkpoint directories: `manifest.json` plus one little-endian blob,
//! `tensors.bin`, holding parameters and both AdamW moments.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::numerics::{Scalar, Tensor};
use crate::trainer::{RngState, TrainConfig, TrainState, Trainer};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const BLOB: &str = "tensors.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub step: usize,
    pub rng: RngState,
    pub tensors: Vec<TensorEntry>,
}

impl Manifest {
    pub fn parameter_count(&self) -> usize {
        self.tensors
            .iter()
            .filter(|t| !t.name.starts_with("adam_"))
            .map(|t| t.shape.iter().product::<usize>())
            .sum()
    }
}

fn sections<T: Scalar>(t: &Trainer<T>) -> Vec<(String, &Tensor<T>)> {
    let mut out = t.params.named();
    for (prefix, p) in [("adam_m.", &t.state.m), ("adam_v.", &t.state.v)] {
        out.extend(
            p.named()
                .into_iter()
                .map(|(n, x)| (format!("{prefix}{n}"), x)),
        );
    }
    out
}

/// Write `trainer` into `dir`. The blob and manifest are written to
/// temporary names first, so an interrupted save leaves the previous
/// checkpoint readable.
pub fn save<T: Scalar>(dir: &Path, trainer: &Trainer<T>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    for (name, t) in sections(trainer) {
        let offset = blob.len() as u64;
        t.data().iter().for_each(|&x| x.write_le(&mut blob));
        tensors.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            dtype: T::DTYPE.to_string(),
            offset,
            bytes: blob.len() as u64 - offset,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        model: trainer.model.clone(),
        train: trainer.cfg.clone(),
        step: trainer.state.step,
        rng: trainer.state.rng,
        tensors,
    };
    let tmp_blob = dir.join(format!("{BLOB}.tmp"));
    let tmp_manifest = dir.join(format!("{MANIFEST}.tmp"));
    fs::write(&tmp_blob, &blob)?;
    fs::write(
        &tmp_manifest,
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    fs::rename(tmp_blob, dir.join(BLOB))?;
    fs::rename(tmp_manifest, dir.join(MANIFEST))?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(dir.join(MANIFEST)).map_err(|e| {
        Error::Checkpoint(format!("cannot read {}: {e}", dir.join(MANIFEST).display()))
    })?;
    let m: Manifest = serde_json::from_str(&text)?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {} is not supported (expected {FORMAT_VERSION})",
            m.format_version
        )));
    }
    Ok(m)
}

/// Entries must cover the blob back to back, starting at 0.
fn check_tiling(m: &Manifest, blob_len: u64, width: usize) -> Result<()> {
    let mut at = 0u64;
    for t in &m.tensors {
        let want = (t.shape.iter().product::<usize>() * width) as u64;
        if t.bytes != want {
            return Err(Error::Checkpoint(format!(
                "{}: {} bytes for shape {:?}",
                t.name, t.bytes, t.shape
            )));
        }
        if t.offset != at {
            return Err(Error::Checkpoint(format!(
                "{}: offset {} where {} was expected",
                t.name, t.offset, at
            )));
        }
        at += t.bytes;
    }
    if at != blob_len {
        return Err(Error::Checkpoint(format!(
            "manifest covers {at} bytes, blob has {blob_len}"
        )));
    }
    Ok(())
}

pub fn load<T: Scalar>(dir: &Path) -> Result<Trainer<T>> {
    let m = read_manifest(dir)?;
    if let Some(t) = m.tensors.iter().find(|t| t.dtype != T::DTYPE) {
        return Err(Error::Checkpoint(format!(
            "{} stored as {}, requested {}",
            t.name,
            t.dtype,
            T::DTYPE
        )));
    }
    m.model.validate()?;
    let blob = fs::read(dir.join(BLOB))?;
    check_tiling(&m, blob.len() as u64, T::BYTES)?;
    let mut named: Vec<(String, Tensor<T>)> = m
        .tensors
        .iter()
        .map(|e| {
            let raw = &blob[e.offset as usize..(e.offset + e.bytes) as usize];
            let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
            Ok((e.name.clone(), Tensor::new(e.shape.clone(), data)?))
        })
        .collect::<Result<_>>()?;
    let template = ModelParams::<T>::init(&m.model, 0)?.zeros_like();
    let n = template.named().len();
    if named.len() != 3 * n {
        return Err(Error::Checkpoint(format!(
            "{} tensors, expected {}",
            named.len(),
            3 * n
        )));
    }
    let strip =
        |part: Vec<(String, Tensor<T>)>, prefix: &str| -> Result<Vec<(String, Tensor<T>)>> {
            part.into_iter()
                .map(|(name, t)| match name.strip_prefix(prefix) {
                    Some(rest) => Ok((rest.to_string(), t)),
                    None => Err(Error::Checkpoint(format!(
                        "expected {prefix}* tensor, found {name}"
                    ))),
                })
                .collect()
        };
    let v_part = named.split_off(2 * n);
    let m_part = named.split_off(n);
    let params = ModelParams::from_named(&template, named)?;
    let moments_m = ModelParams::from_named(&template, strip(m_part, "adam_m.")?)?;
    let moments_v = ModelParams::from_named(&template, strip(v_part, "adam_v.")?)?;
    Ok(Trainer {
        model: m.model,
        cfg: m.train,
        params,
        state: TrainState {
            step: m.step,
            m: moments_m,
            v: moments_v,
            rng: m.rng,
        },
    })
}

/// Parameters only, for evaluation and generation.
pub fn load_params<T: Scalar>(dir: &Path) -> Result<(ModelConfig, ModelParams<T>)> {
    let t = load::<T>(dir)?;
    Ok((t.model, t.params))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trainer() -> Trainer<f32> {
        let model = ModelConfig {
            d: 8,
            layers: 2,
            split: 4,
            top_k: 1,
            seq_len: 16,
            vocab: 17,
            vocab_multiple: 1,
            ..ModelConfig::default()
        };
        let mut t = Trainer::new(model, TrainConfig::default()).unwrap();
        t.state.step = 7;
        t.state.rng.cursor = 99;
        t.state.m.embedding.data_mut()[3] = 0.25;
        t.state.v.layers[1].u.data_mut()[5] = f32::MIN_POSITIVE;
        t
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let t = trainer();
        save(dir.path(), &t).unwrap();
        let back = load::<f32>(dir.path()).unwrap();
        assert_eq!(back.params, t.params);
        assert_eq!(back.state, t.state);
        assert_eq!(back.model, t.model);
        let first = fs::read(dir.path().join(BLOB)).unwrap();
        let manifest = fs::read(dir.path().join(MANIFEST)).unwrap();
        save(dir.path(), &back).unwrap();
        assert_eq!(fs::read(dir.path().join(BLOB)).unwrap(), first);
        assert_eq!(fs::read(dir.path().join(MANIFEST)).unwrap(), manifest);
    }

    #[test]
    fn census_matches_init() {
        let dir = tempfile::tempdir().unwrap();
        let t = trainer();
        save(dir.path(), &t).unwrap();
        let m = read_manifest(dir.path()).unwrap();
        assert_eq!(m.parameter_count(), t.params.parameter_count());
        assert_eq!(m.tensors.len(), 3 * t.params.named().len());
    }

    #[test]
    fn truncated_blob_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &trainer()).unwrap();
        let path = dir.path().join(BLOB);
        let mut blob = fs::read(&path).unwrap();
        blob.truncate(blob.len() - 4);
        fs::write(&path, blob).unwrap();
        let err = load::<f32>(dir.path()).unwrap_err();
        assert!(err.to_string().contains("blob has"), "{err}");
    }

    #[test]
    fn version_and_dtype_are_checked() {
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &trainer()).unwrap();
        assert!(load::<f64>(dir.path()).is_err());
        let path = dir.path().join(MANIFEST);
        let text = fs::read_to_string(&path)
            .unwrap()
            .replace("\"format_version\": 1", "\"format_version\": 9");
        fs::write(&path, text).unwrap();
        assert!(load::<f32>(dir.path())
            .unwrap_err()
            .to_string()
            .contains("version"));
    }

    #[test]
    fn overlapping_offsets_are_refused() {
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &trainer()).unwrap();
        let mut m = read_manifest(dir.path()).unwrap();
        m.tensors[2].offset -= 4;
        fs::write(
            dir.path().join(MANIFEST),
            serde_json::to_string(&m).unwrap(),
        )
        .unwrap();
        assert!(load::<f32>(dir.path())
            .unwrap_err()
            .to_string()
            .contains("offset"));
    }
}
