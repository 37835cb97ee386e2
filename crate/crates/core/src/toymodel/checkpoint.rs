// SPDX-License-Identifier: MIT OR Apache-2.0

//! Single-file checkpoints.
//!
//! Layout: one version byte, a little-endian `u64` header length, a JSON
//! header `{config, vocab, aliases, params: [{name, rows, cols}]}`, then the
//! parameter blocks as row-major little-endian `f64`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::model::Model;
use super::tensor::Mat;
use super::vocab::Vocabulary;
use crate::error::{Result, XcError};

pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab: Vocabulary,
    #[serde(default)]
    aliases: BTreeMap<u32, u32>,
    params: Vec<ParamMeta>,
}

pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let header = Header {
        config: model.config().clone(),
        vocab: model.vocab().clone(),
        aliases: model.aliases().clone(),
        params: model
            .param_names()
            .iter()
            .zip(model.params())
            .map(|(name, p)| ParamMeta {
                name: name.clone(),
                rows: p.rows,
                cols: p.cols,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let n_values: usize = model.params().iter().map(|p| p.data.len()).sum();
    let mut out = Vec::with_capacity(9 + json.len() + 8 * n_values);
    out.push(CHECKPOINT_VERSION);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in model.params() {
        for v in &p.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let (&version, rest) = bytes
        .split_first()
        .ok_or_else(|| XcError::Version("empty checkpoint".into()))?;
    if version != CHECKPOINT_VERSION {
        return Err(XcError::Version(format!(
            "checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let truncated = || XcError::Config("truncated checkpoint".into());
    let len_bytes: [u8; 8] = rest.get(..8).ok_or_else(truncated)?.try_into().expect("8 bytes");
    let len = u64::from_le_bytes(len_bytes) as usize;
    let json = rest.get(8..8 + len).ok_or_else(truncated)?;
    let header: Header = serde_json::from_slice(json)?;
    let mut body = &rest[8 + len..];
    let mut named = Vec::with_capacity(header.params.len());
    for meta in header.params {
        let n = meta.rows * meta.cols;
        let block = body.get(..8 * n).ok_or_else(truncated)?;
        let data = block
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        body = &body[8 * n..];
        named.push((meta.name, Mat::from_vec(meta.rows, meta.cols, data)));
    }
    if !body.is_empty() {
        return Err(XcError::Config(format!("{} trailing bytes in checkpoint", body.len())));
    }
    Model::from_parts(header.config, header.vocab, named, header.aliases)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    let bytes = to_bytes(model)?;
    let mut f = std::fs::File::create(path).map_err(|e| XcError::io(path, e))?;
    f.write_all(&bytes).map_err(|e| XcError::io(path, e))
}

pub fn load(path: &Path) -> Result<Model> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| XcError::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::Arch;

    #[test]
    fn round_trip_is_exact() {
        let vocab = Vocabulary::from_texts(["x y z"]);
        let mut model = Model::init(ModelConfig::new(Arch::EncoderDecoder, 2, 4, 6, 2, 11), vocab).unwrap();
        model.set_aliases(BTreeMap::from([(7, 5)])).unwrap();
        let bytes = to_bytes(&model).unwrap();
        assert_eq!(bytes[0], CHECKPOINT_VERSION);
        assert_eq!(from_bytes(&bytes).unwrap(), model);

        let mut bad = bytes.clone();
        bad[0] = 9;
        assert!(matches!(from_bytes(&bad), Err(XcError::Version(_))));
        assert!(from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }
}
