//! Binary checkpoint format.
//!
//! ```text
//! MFX1 key=value key=value ...\n
//! <name> <rank> <dim0> .. <dimN>\n<little-endian f32 payload>
//! ...
//! ```
//!
//! Tensors appear sorted by name. Model config fields are always present in
//! the header; callers may add more metadata (training step, seed, ...).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::config::ModelConfig;
use super::params::{Parameters, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &str = "MFX1";

const CONFIG_KEYS: [&str; 9] = [
    "layers",
    "hidden_dim",
    "heads",
    "vocab",
    "height",
    "width",
    "num_classes",
    "dropout",
    "mlp_ratio",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: Parameters<f32>,
    /// Metadata beyond the model config.
    pub metadata: BTreeMap<String, String>,
    /// Non-model tensors stored alongside the weights (optimizer moments).
    pub extra: BTreeMap<String, Tensor<f32>>,
}

impl Checkpoint {
    pub fn new(params: Parameters<f32>) -> Self {
        Self {
            params,
            metadata: BTreeMap::new(),
            extra: BTreeMap::new(),
        }
    }

    pub fn meta<T: std::str::FromStr>(&self, key: &str) -> Option<T> {
        self.metadata.get(key).and_then(|v| v.parse().ok())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let cfg = &self.params.config;
        let mut header: BTreeMap<String, String> = self.metadata.clone();
        let config_values = [
            cfg.layers.to_string(),
            cfg.hidden_dim.to_string(),
            cfg.heads.to_string(),
            cfg.vocab.to_string(),
            cfg.height.to_string(),
            cfg.width.to_string(),
            cfg.num_classes.to_string(),
            cfg.dropout.to_string(),
            cfg.mlp_ratio.to_string(),
        ];
        for (k, v) in CONFIG_KEYS.iter().zip(config_values) {
            header.insert((*k).to_string(), v);
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC.as_bytes());
        for (k, v) in &header {
            let bad = |s: &str| s.is_empty() || s.contains(|c: char| c.is_whitespace() || c == '=');
            if bad(k) || bad(v) {
                return Err(Error::invalid(format!("metadata `{k}={v}` is not a bare token")));
            }
            out.extend_from_slice(format!(" {k}={v}").as_bytes());
        }
        out.push(b'\n');

        let mut tensors: Vec<(String, &Tensor<f32>)> = self.params.tensors();
        for (name, t) in &self.extra {
            if tensors.iter().any(|(n, _)| n == name) {
                return Err(Error::invalid(format!("extra tensor {name} shadows a parameter")));
            }
            tensors.push((name.clone(), t));
        }
        tensors.sort_by(|a, b| a.0.cmp(&b.0));
        for (name, t) in tensors {
            let dims: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
            out.extend_from_slice(format!("{name} {} {}\n", t.shape.len(), dims.join(" ")).as_bytes());
            for &x in &t.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let header = read_line(bytes, &mut pos)?;
        let mut fields = header.split(' ');
        if fields.next() != Some(MAGIC) {
            return Err(Error::parse(0, "missing MFX1 magic"));
        }
        let mut metadata = BTreeMap::new();
        for field in fields {
            let (k, v) = field
                .split_once('=')
                .ok_or_else(|| Error::parse(0, format!("header field `{field}` is not key=value")))?;
            metadata.insert(k.to_string(), v.to_string());
        }
        let get = |key: &str| -> Result<&String> {
            metadata
                .get(key)
                .ok_or_else(|| Error::parse(0, format!("header lacks `{key}`")))
        };
        let num = |key: &str| -> Result<usize> {
            get(key)?
                .parse()
                .map_err(|_| Error::parse(0, format!("header `{key}` is not an integer")))
        };
        let config = ModelConfig {
            layers: num("layers")?,
            hidden_dim: num("hidden_dim")?,
            heads: num("heads")?,
            vocab: num("vocab")? as u32,
            height: num("height")?,
            width: num("width")?,
            num_classes: num("num_classes")?,
            dropout: get("dropout")?
                .parse()
                .map_err(|_| Error::parse(0, "header `dropout` is not a number"))?,
            mlp_ratio: num("mlp_ratio")?,
        };
        config.validate()?;

        let mut tensors: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
        while pos < bytes.len() {
            let line_start = pos;
            let line = read_line(bytes, &mut pos)?;
            let parts: Vec<&str> = line.split(' ').collect();
            let bad = || Error::parse(line_start, format!("malformed tensor header `{line}`"));
            if parts.len() < 2 {
                return Err(bad());
            }
            let rank: usize = parts[1].parse().map_err(|_| bad())?;
            if parts.len() != 2 + rank {
                return Err(bad());
            }
            let shape: Vec<usize> = parts[2..]
                .iter()
                .map(|d| d.parse().map_err(|_| bad()))
                .collect::<Result<_>>()?;
            let count: usize = shape.iter().product();
            let end = pos + count * 4;
            if end > bytes.len() {
                return Err(Error::parse(
                    pos,
                    format!("tensor {} truncated: need {} bytes", parts[0], count * 4),
                ));
            }
            let data = bytes[pos..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            pos = end;
            tensors.insert(parts[0].to_string(), Tensor { shape, data });
        }

        let mut params = Parameters::<f32>::zeros(&config);
        for (name, slot) in params.tensors_mut() {
            let t = tensors
                .remove(&name)
                .ok_or_else(|| Error::parse(pos, format!("checkpoint lacks tensor {name}")))?;
            if t.shape != slot.shape {
                return Err(Error::parse(
                    pos,
                    format!("tensor {name} has shape {:?}, expected {:?}", t.shape, slot.shape),
                ));
            }
            *slot = t;
        }
        for k in CONFIG_KEYS {
            metadata.remove(k);
        }
        Ok(Self {
            params,
            metadata,
            extra: tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

fn read_line<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str> {
    let start = *pos;
    let len = bytes[start..]
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::parse(start, "unterminated header line"))?;
    let line = std::str::from_utf8(&bytes[start..start + len])
        .map_err(|_| Error::parse(start, "header line is not UTF-8"))?;
    *pos = start + len + 1;
    Ok(line)
}
