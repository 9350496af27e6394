//! Checkpoint format: a directory holding `manifest.json` (config,
//! vocabulary hash, parameter name/shape/offset table) and `params.bin`,
//! a single little-endian f32 dump of every parameter in manifest order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{build_model, ModelConfig, ParameterSet};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into params.bin in f32 units.
    pub offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub config: ModelConfig,
    pub vocab_hash: String,
    pub params: Vec<ParamEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn vocab_hash(vocab: &Vocabulary) -> Result<String> {
    Ok(sha256_hex(vocab.to_json()?.as_bytes()))
}

pub fn save_checkpoint(
    dir: &Path,
    params: &ParameterSet,
    cfg: &ModelConfig,
    vocab: &Vocabulary,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut entries = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    let mut offset = 0usize;
    params.visit(&mut |name, t| {
        entries.push(ParamEntry { name, shape: t.shape().to_vec(), offset });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        offset += t.len();
    });
    let manifest =
        CheckpointManifest { config: cfg.clone(), vocab_hash: vocab_hash(vocab)?, params: entries };
    let manifest_path = dir.join(MANIFEST_FILE);
    std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    let bin_path = dir.join(PARAMS_FILE);
    let mut f =
        std::fs::File::create(&bin_path).map_err(|e| Error::io(bin_path.display().to_string(), e))?;
    f.write_all(&blob).map_err(|e| Error::io(bin_path.display().to_string(), e))
}

/// Load a checkpoint, verifying the vocabulary hash and every shape.
pub fn load_checkpoint(dir: &Path, vocab: &Vocabulary) -> Result<(ModelConfig, ParameterSet)> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&manifest_path)
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    if manifest.vocab_hash != vocab_hash(vocab)? {
        return Err(Error::Artifact(
            "vocabulary hash mismatch: checkpoint was trained on a different vocabulary".into(),
        ));
    }
    manifest.config.validate()?;

    let bin_path = dir.join(PARAMS_FILE);
    let mut bytes = Vec::new();
    std::fs::File::open(&bin_path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(bin_path.display().to_string(), e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Artifact("params.bin length is not a multiple of 4".into()));
    }
    let values: Vec<f32> =
        bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();

    // materialize a skeleton with the right structure, then overwrite
    let mut params = build_model(&manifest.config, vocab, None, 0)?;
    let by_name: std::collections::BTreeMap<&str, &ParamEntry> =
        manifest.params.iter().map(|e| (e.name.as_str(), e)).collect();
    let mut seen = 0usize;
    let mut failure: Option<Error> = None;
    params.visit_mut(&mut |name, t| {
        if failure.is_some() {
            return;
        }
        let entry = match by_name.get(name.as_str()) {
            Some(e) => e,
            None => {
                failure = Some(Error::Artifact(format!("checkpoint is missing {name}")));
                return;
            }
        };
        if entry.shape != t.shape() {
            failure = Some(Error::Artifact(format!(
                "shape mismatch for {name}: {:?} vs {:?}",
                entry.shape,
                t.shape()
            )));
            return;
        }
        let end = entry.offset + t.len();
        if end > values.len() {
            failure = Some(Error::Artifact(format!("params.bin too short for {name}")));
            return;
        }
        t.data_mut().copy_from_slice(&values[entry.offset..end]);
        seen += 1;
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if seen != manifest.params.len() {
        return Err(Error::Artifact(format!(
            "checkpoint has {} parameters, model expects {}",
            manifest.params.len(),
            seen
        )));
    }
    Ok((manifest.config, params))
}

/// Round-trip equality helper for tests and manifest verification.
pub fn params_equal(a: &ParameterSet, b: &ParameterSet) -> bool {
    let mut flat_a: Vec<(String, Tensor)> = Vec::new();
    a.visit(&mut |n, t| flat_a.push((n, t.clone())));
    let mut flat_b: Vec<(String, Tensor)> = Vec::new();
    b.visit(&mut |n, t| flat_b.push((n, t.clone())));
    flat_a == flat_b
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::TaskKind;
    use crate::model::Variant;
    use crate::synthetic::{generate_synthetic, SyntheticConfig};

    fn setup(variant: Variant) -> (Vocabulary, ModelConfig, ParameterSet) {
        let corpus = generate_synthetic(&SyntheticConfig {
            n_conversations: 3,
            turns_per_conversation: 3,
            task_kind: TaskKind::classification(),
            seed: 7,
        })
        .unwrap();
        let manifest = crate::synthetic::default_partition_manifest(&corpus);
        let corpus = crate::corpus::split_partitions(corpus, &manifest).unwrap();
        let vocab = Vocabulary::build(&corpus).unwrap();
        let cfg = crate::model::test_support::tiny_cfg(variant, 2, 3);
        let params = build_model(&cfg, &vocab, None, 99).unwrap();
        (vocab, cfg, params)
    }

    #[test]
    fn round_trip_rock() {
        let (vocab, cfg, params) = setup(Variant::Rock);
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &params, &cfg, &vocab).unwrap();
        let (cfg2, params2) = load_checkpoint(dir.path(), &vocab).unwrap();
        assert_eq!(cfg, cfg2);
        assert!(params_equal(&params, &params2));
    }

    #[test]
    fn round_trip_flat() {
        let (vocab, cfg, params) = setup(Variant::Flat);
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &params, &cfg, &vocab).unwrap();
        let (_, params2) = load_checkpoint(dir.path(), &vocab).unwrap();
        assert!(params_equal(&params, &params2));
    }

    #[test]
    fn vocab_mismatch_is_rejected() {
        let (vocab, cfg, params) = setup(Variant::Flat);
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &params, &cfg, &vocab).unwrap();

        let other = generate_synthetic(&SyntheticConfig {
            n_conversations: 2,
            turns_per_conversation: 2,
            task_kind: TaskKind::classification(),
            seed: 1234,
        })
        .unwrap();
        let manifest = crate::synthetic::default_partition_manifest(&other);
        let other = crate::corpus::split_partitions(other, &manifest).unwrap();
        let other_vocab = Vocabulary::build(&other).unwrap();
        assert!(load_checkpoint(dir.path(), &other_vocab).is_err());
    }

    #[test]
    fn save_is_deterministic() {
        let (vocab, cfg, params) = setup(Variant::Rock);
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        save_checkpoint(d1.path(), &params, &cfg, &vocab).unwrap();
        save_checkpoint(d2.path(), &params, &cfg, &vocab).unwrap();
        let b1 = std::fs::read(d1.path().join(PARAMS_FILE)).unwrap();
        let b2 = std::fs::read(d2.path().join(PARAMS_FILE)).unwrap();
        assert_eq!(b1, b2);
        let m1 = std::fs::read(d1.path().join(MANIFEST_FILE)).unwrap();
        let m2 = std::fs::read(d2.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(m1, m2);
    }
}
