//! Pretrained word-embedding loader (whitespace-separated text format:
//! one token per line followed by its vector) and embedding-matrix
//! initialization for a vocabulary.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::Rng;

use crate::autodiff::{uniform_fill, Tensor};
use crate::corpus::Vocabulary;
use crate::error::{Error, Result};

/// Parse a pretrained embedding file. Lines whose vector length does
/// not match `dim` are rejected.
pub fn load_embedding_file(path: &Path, dim: usize) -> Result<BTreeMap<String, Vec<f32>>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut map = BTreeMap::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let token = parts
            .next()
            .ok_or_else(|| Error::Corpus(format!("embedding line {} empty", lineno + 1)))?;
        let vec: Vec<f32> = parts
            .map(|p| {
                p.parse::<f32>().map_err(|e| {
                    Error::Corpus(format!("embedding line {}: bad float {:?}: {}", lineno + 1, p, e))
                })
            })
            .collect::<Result<_>>()?;
        if vec.len() != dim {
            return Err(Error::Corpus(format!(
                "embedding line {}: expected {} dims, got {}",
                lineno + 1,
                dim,
                vec.len()
            )));
        }
        map.insert(token.to_string(), vec);
    }
    Ok(map)
}

/// Build the vocab x dim embedding matrix. Row 0 (padding) is zero;
/// tokens absent from the pretrained map draw uniform(-0.1, 0.1).
pub fn init_embedding_matrix<R: Rng>(
    vocab: &Vocabulary,
    dim: usize,
    pretrained: Option<&BTreeMap<String, Vec<f32>>>,
    rng: &mut R,
) -> Result<Tensor> {
    let v = vocab.len();
    let mut data = vec![0.0f32; v * dim];
    for id in 1..v {
        let token = vocab.token(id as u32).expect("dense vocab ids");
        let row = &mut data[id * dim..(id + 1) * dim];
        match pretrained.and_then(|m| m.get(token)) {
            Some(vec) => row.copy_from_slice(vec),
            None => row.copy_from_slice(&uniform_fill(dim, -0.1, 0.1, rng)),
        }
    }
    Tensor::new(vec![v, dim], data)
}
