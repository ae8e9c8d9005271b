//! Binary parameter container.
//!
//! Layout: `b"EGRW"`, format version (`u32` LE), header length (`u64` LE),
//! a JSON header carrying the model config and the name, shape and byte
//! offset of every block, then the blocks as row-major `f64` LE values.
//! Extra blocks (optimizer moments) may follow the parameters; the header's
//! free-form `extra` record describes them.

use std::collections::HashMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{EgrConfig, ModelParams, Params};
use crate::featurize::GraphConfig;

pub const MAGIC: &[u8; 4] = b"EGRW";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum WeightsError {
    #[error("unsupported weights format: {0}")]
    Version(String),
    #[error("weights stream truncated: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("block {block} has shape {found:?}, expected {expected:?}")]
    Shape {
        block: String,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("weights are missing block {0}")]
    MissingBlock(String),
    #[error("malformed weights header: {0}")]
    Header(String),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlockMeta {
    name: String,
    shape: [usize; 2],
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: EgrConfig,
    blocks: Vec<BlockMeta>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    extra: Option<serde_json::Value>,
}

/// Decoded container contents, blocks in stored order.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub config: EgrConfig,
    pub blocks: Vec<(String, Array2<f64>)>,
    pub extra: Option<serde_json::Value>,
}

pub fn write_container(
    config: &EgrConfig,
    blocks: &[(String, &Array2<f64>)],
    extra: Option<&serde_json::Value>,
) -> Vec<u8> {
    let mut offset = 0;
    let metas = blocks
        .iter()
        .map(|(name, a)| {
            let meta = BlockMeta {
                name: name.clone(),
                shape: [a.nrows(), a.ncols()],
                offset,
            };
            offset += a.len() * 8;
            meta
        })
        .collect();
    let header = Header {
        config: config.clone(),
        blocks: metas,
        extra: extra.cloned(),
    };
    let text = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + text.len() + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(&text);
    for (_, a) in blocks {
        for v in a.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn take(bytes: &[u8], at: usize, len: usize) -> Result<&[u8], WeightsError> {
    let end = at.checked_add(len).ok_or(WeightsError::Truncated {
        needed: usize::MAX,
        available: bytes.len(),
    })?;
    bytes.get(at..end).ok_or(WeightsError::Truncated {
        needed: end,
        available: bytes.len(),
    })
}

pub fn read_container(bytes: &[u8]) -> Result<Container, WeightsError> {
    let magic = take(bytes, 0, 4)?;
    if magic != MAGIC {
        return Err(WeightsError::Version(format!("bad magic {magic:?}")));
    }
    let version = u32::from_le_bytes(take(bytes, 4, 4)?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(WeightsError::Version(format!(
            "format version {version}, this build reads {FORMAT_VERSION}"
        )));
    }
    let header_len = u64::from_le_bytes(take(bytes, 8, 8)?.try_into().expect("8 bytes"));
    let header_len = usize::try_from(header_len)
        .map_err(|_| WeightsError::Header("header length overflows".into()))?;
    let header: Header = serde_json::from_slice(take(bytes, 16, header_len)?)
        .map_err(|e| WeightsError::Header(e.to_string()))?;
    header
        .config
        .validate()
        .map_err(|e| WeightsError::Header(e.to_string()))?;

    let data_start = 16 + header_len;
    let mut blocks = Vec::with_capacity(header.blocks.len());
    for meta in header.blocks {
        let [rows, cols] = meta.shape;
        let count = rows
            .checked_mul(cols)
            .ok_or_else(|| WeightsError::Header(format!("block {} is too large", meta.name)))?;
        let raw = take(bytes, data_start + meta.offset, count * 8)?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let array = Array2::from_shape_vec((rows, cols), values).expect("length checked");
        blocks.push((meta.name, array));
    }
    Ok(Container {
        config: header.config,
        blocks,
        extra: header.extra,
    })
}

/// Assembles parameters for `config` from named blocks, checking shapes.
pub fn params_from_blocks(
    config: &EgrConfig,
    blocks: &[(String, Array2<f64>)],
) -> Result<Params, WeightsError> {
    let by_name: HashMap<&str, &Array2<f64>> =
        blocks.iter().map(|(n, a)| (n.as_str(), a)).collect();
    let shapes = ModelParams::shapes(config);
    let mut failure = None;
    let params = shapes.map_named(|name, &expected| match by_name.get(name) {
        Some(a) if a.dim() == expected => (*a).clone(),
        Some(a) => {
            failure.get_or_insert(WeightsError::Shape {
                block: name.to_string(),
                expected,
                found: a.dim(),
            });
            Array2::zeros(expected)
        }
        None => {
            failure.get_or_insert(WeightsError::MissingBlock(name.to_string()));
            Array2::zeros(expected)
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(params),
    }
}

pub fn save_weights(params: &Params, config: &EgrConfig) -> Vec<u8> {
    let blocks: Vec<(String, &Array2<f64>)> = params.named();
    write_container(config, &blocks, None)
}

pub fn load_weights(bytes: &[u8]) -> Result<(Params, EgrConfig), WeightsError> {
    let container = read_container(bytes)?;
    let params = params_from_blocks(&container.config, &container.blocks)?;
    Ok((params, container.config))
}

/// Weights together with the graph settings they were trained on, stored
/// under `graph` in the header's `extra` record.
pub fn save_model(params: &Params, config: &EgrConfig, graph: &GraphConfig) -> Vec<u8> {
    let record = serde_json::json!({ "graph": graph });
    write_container(config, &params.named(), Some(&record))
}

/// Loads weights and, when recorded, the graph settings they expect.
pub fn load_model(bytes: &[u8]) -> Result<(Params, EgrConfig, Option<GraphConfig>), WeightsError> {
    let container = read_container(bytes)?;
    let params = params_from_blocks(&container.config, &container.blocks)?;
    let graph = match container.extra.as_ref().and_then(|e| e.get("graph")) {
        Some(v) => Some(
            serde_json::from_value(v.clone()).map_err(|e| WeightsError::Header(e.to_string()))?,
        ),
        None => None,
    };
    Ok((params, container.config, graph))
}
