//! Model files: `ESPEC1\n`, a u64 little-endian header length, a JSON
//! header `{config, tensors: [{name, shape}]}`, then every tensor as raw
//! little-endian f32 in manifest order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{manifest, LayerWeights, ModelConfig, WeightStore};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 7] = b"ESPEC1\n";

/// Header size cap; a corrupted length should not trigger a huge allocation.
const MAX_HEADER: u64 = 64 << 20;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

pub fn write_model<W: Write>(mut out: W, model: &WeightStore) -> Result<()> {
    let header = Header {
        config: model.config.clone(),
        tensors: manifest(&model.config)
            .into_iter()
            .map(|(name, shape)| TensorEntry { name, shape })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    out.write_all(MAGIC)?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    for tensor in model.tensors() {
        for v in tensor {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

fn read_f32s<R: Read>(input: &mut R, count: usize) -> Result<Vec<f32>> {
    let mut bytes = vec![0u8; count * 4];
    input.read_exact(&mut bytes).map_err(|e| Error::Format(format!("truncated tensor data: {e}")))?;
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

pub fn read_model<R: Read>(mut input: R) -> Result<WeightStore> {
    let mut magic = [0u8; 7];
    input.read_exact(&mut magic).map_err(|_| Error::Format("missing magic".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let mut len = [0u8; 8];
    input.read_exact(&mut len).map_err(|_| Error::Format("missing header length".into()))?;
    let len = u64::from_le_bytes(len);
    if len > MAX_HEADER {
        return Err(Error::Format(format!("header length {len} is implausible")));
    }
    let mut json = vec![0u8; len as usize];
    input.read_exact(&mut json).map_err(|_| Error::Format("truncated header".into()))?;
    let header: Header =
        serde_json::from_slice(&json).map_err(|e| Error::Format(format!("header: {e}")))?;
    let config = header.config;
    config.validate()?;
    let expected = manifest(&config);
    if expected.len() != header.tensors.len()
        || expected.iter().zip(&header.tensors).any(|((n, s), t)| *n != t.name || *s != t.shape)
    {
        return Err(Error::Format("tensor manifest does not match the config".into()));
    }

    let (d, m) = (config.d_model, config.d_mlp);
    let mut matrix = |rows: usize, cols: usize| -> Result<Matrix> {
        Matrix::from_vec(rows, cols, read_f32s(&mut input, rows * cols)?)
    };
    let embedding = matrix(config.vocab_size, d)?;
    let mut layers = Vec::with_capacity(config.n_layers);
    for _ in 0..config.n_layers {
        layers.push(LayerWeights {
            wq: matrix(d, d)?,
            wk: matrix(d, d)?,
            wv: matrix(d, d)?,
            wo: matrix(d, d)?,
            w_gate: matrix(d, m)?,
            w_up: matrix(d, m)?,
            w_down: matrix(m, d)?,
            attn_norm: matrix(1, d)?.into_vec(),
            mlp_norm: matrix(1, d)?.into_vec(),
        });
    }
    let final_norm = matrix(1, d)?.into_vec();
    let model = WeightStore { config, embedding, final_norm, layers };
    if !model.is_finite() {
        return Err(Error::NonFinite("model weights"));
    }
    Ok(model)
}

pub fn save_model(path: impl AsRef<Path>, model: &WeightStore) -> Result<()> {
    write_model(BufWriter::new(File::create(path)?), model)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<WeightStore> {
    read_model(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;

    #[test]
    fn round_trip_is_exact() {
        let m = init_model(&ModelConfig::toy(3, 4)).unwrap();
        let mut buf = Vec::new();
        write_model(&mut buf, &m).unwrap();
        assert_eq!(&buf[..7], MAGIC);
        assert_eq!(read_model(&buf[..]).unwrap(), m);
    }

    #[test]
    fn corrupt_files_rejected() {
        let m = init_model(&ModelConfig::toy(2, 4)).unwrap();
        let mut buf = Vec::new();
        write_model(&mut buf, &m).unwrap();
        assert!(matches!(read_model(&buf[..buf.len() - 1]), Err(Error::Format(_))));
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_model(&bad[..]), Err(Error::Format(_))));
    }
}
