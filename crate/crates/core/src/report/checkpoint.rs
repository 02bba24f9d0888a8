//! Binary checkpoints.
//!
//! Layout: the 8 magic bytes `SSRCKPT1`, a little-endian `u32` header
//! length, a JSON header, then every tensor as little-endian `f32` in header
//! order. The header lists each tensor's shape and byte range and carries a
//! SHA-256 of the payload.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, FormatError, Result};
use crate::nn::{BatchNormParams, LayerParams, Network, NetworkSpec};
use crate::tensor::{FilterBank, Matrix};

pub const MAGIC: &[u8; 8] = b"SSRCKPT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingState {
    /// Pipeline stage that produced the weights (`baseline`, `solved`, ...).
    pub stage: String,
    pub epochs: usize,
    pub seed: u64,
    #[serde(default)]
    pub notes: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub layer: String,
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
    pub bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub spec: NetworkSpec,
    pub filter_counts: String,
    pub tensors: Vec<TensorEntry>,
    pub state: TrainingState,
    pub payload_sha256: String,
}

fn layer_tensors(p: &LayerParams) -> Vec<(&'static str, Vec<usize>, &[f32])> {
    match p {
        LayerParams::None => vec![],
        LayerParams::Conv { weight, bias } => {
            let (o, i, k) = (weight.out_channels(), weight.in_channels(), weight.kernel());
            vec![("weight", vec![o, i, k, k], weight.matrix().data()), ("bias", vec![o], bias)]
        }
        LayerParams::Fc { weight, bias } => vec![
            ("weight", vec![weight.rows(), weight.cols()], weight.data()),
            ("bias", vec![bias.len()], bias),
        ],
        LayerParams::BatchNorm(bn) => {
            let c = vec![bn.gamma.len()];
            vec![
                ("gamma", c.clone(), &bn.gamma),
                ("beta", c.clone(), &bn.beta),
                ("running_mean", c.clone(), &bn.running_mean),
                ("running_var", c, &bn.running_var),
            ]
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Hex SHA-256 of arbitrary bytes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// Serializes a network into checkpoint bytes.
pub fn encode(net: &Network, state: &TrainingState) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    for (layer, p) in net.spec().layers.iter().zip(net.params()) {
        for (name, shape, data) in layer_tensors(p) {
            let offset = payload.len();
            for v in data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            tensors.push(TensorEntry {
                layer: layer.name.clone(),
                name: name.to_string(),
                shape,
                offset,
                bytes: payload.len() - offset,
            });
        }
    }
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        spec: net.spec().clone(),
        filter_counts: net.spec().filter_counts(),
        tensors,
        state: state.clone(),
        payload_sha256: sha256_hex(&payload),
    };
    let json = serde_json::to_vec(&header).map_err(|e| FormatError::Header(e.to_string()))?;
    let mut out = Vec::with_capacity(12 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn save_checkpoint(net: &Network, state: &TrainingState, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode(net, state)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

fn parse_header(bytes: &[u8]) -> Result<(CheckpointHeader, usize)> {
    if bytes.len() < 8 {
        return Err(FormatError::Truncated("file shorter than the magic".into()).into());
    }
    if &bytes[..8] != MAGIC {
        return Err(FormatError::BadMagic {
            expected: String::from_utf8_lossy(MAGIC).into_owned(),
            found: String::from_utf8_lossy(&bytes[..8]).into_owned(),
        }
        .into());
    }
    let len_bytes: [u8; 4] = bytes
        .get(8..12)
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| FormatError::Truncated("missing header length".into()))?;
    let len = u32::from_le_bytes(len_bytes) as usize;
    let json = bytes
        .get(12..12 + len)
        .ok_or_else(|| FormatError::Truncated(format!("header declares {len} bytes")))?;
    // Check the version before the full schema so that future layouts are
    // reported as version mismatches rather than malformed headers.
    let raw: serde_json::Value = serde_json::from_slice(json).map_err(|e| FormatError::Header(e.to_string()))?;
    let version = raw.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if version != FORMAT_VERSION {
        return Err(FormatError::VersionMismatch {
            expected: FORMAT_VERSION,
            found: version,
        }
        .into());
    }
    let header: CheckpointHeader = serde_json::from_value(raw).map_err(|e| FormatError::Header(e.to_string()))?;
    Ok((header, 12 + len))
}

/// Reads only the magic, length and header.
pub fn read_header(path: impl AsRef<Path>) -> Result<CheckpointHeader> {
    let mut f = fs::File::open(path)?;
    let mut prefix = [0u8; 12];
    let got = read_up_to(&mut f, &mut prefix)?;
    let len = if got == 12 {
        u32::from_le_bytes(prefix[8..12].try_into().expect("4 bytes")) as usize
    } else {
        0
    };
    let mut buf = prefix[..got].to_vec();
    if got == 12 {
        let mut json = vec![0u8; len];
        let n = read_up_to(&mut f, &mut json)?;
        buf.extend_from_slice(&json[..n]);
    }
    Ok(parse_header(&buf)?.0)
}

fn read_up_to(f: &mut fs::File, buf: &mut [u8]) -> Result<usize> {
    let mut n = 0;
    while n < buf.len() {
        match f.read(&mut buf[n..])? {
            0 => break,
            k => n += k,
        }
    }
    Ok(n)
}

/// Parses checkpoint bytes back into a network.
pub fn decode(bytes: &[u8]) -> Result<(Network, CheckpointHeader)> {
    let (header, start) = parse_header(bytes)?;
    let payload = &bytes[start..];
    let mut expect = 0;
    for t in &header.tensors {
        if t.offset != expect || t.bytes != 4 * t.shape.iter().product::<usize>() {
            return Err(FormatError::Header(format!("tensor {}.{} does not tile the payload", t.layer, t.name)).into());
        }
        expect += t.bytes;
    }
    if payload.len() < expect {
        return Err(FormatError::Truncated(format!(
            "payload has {} bytes, header declares {expect}",
            payload.len()
        ))
        .into());
    }
    if payload.len() > expect {
        return Err(FormatError::Header(format!(
            "{} trailing bytes after the declared payload",
            payload.len() - expect
        ))
        .into());
    }
    let found = sha256_hex(payload);
    if found != header.payload_sha256 {
        return Err(FormatError::Checksum {
            expected: header.payload_sha256.clone(),
            found,
        }
        .into());
    }
    let floats = |t: &TensorEntry| -> Vec<f32> {
        payload[t.offset..t.offset + t.bytes]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect()
    };
    let mismatch = |msg: String| Error::from(FormatError::ShapeMismatch(msg));
    let mut by_layer: BTreeMap<(&str, &str), &TensorEntry> = BTreeMap::new();
    for t in &header.tensors {
        by_layer.insert((t.layer.as_str(), t.name.as_str()), t);
    }
    let template: Network = Network::init(header.spec.clone(), 0).map_err(|e| mismatch(e.to_string()))?;
    let mut params = Vec::with_capacity(header.spec.layers.len());
    for (layer, p) in header.spec.layers.iter().zip(template.params()) {
        let get = |name: &str, want: &[usize]| -> Result<Vec<f32>> {
            let t = by_layer
                .get(&(layer.name.as_str(), name))
                .ok_or_else(|| mismatch(format!("missing tensor {}.{name}", layer.name)))?;
            if t.shape != want {
                return Err(mismatch(format!(
                    "{}.{name}: stored {:?}, network needs {want:?}",
                    layer.name, t.shape
                )));
            }
            Ok(floats(t))
        };
        params.push(match p {
            LayerParams::None => LayerParams::None,
            LayerParams::Conv { weight, .. } => {
                let (o, i, k) = (weight.out_channels(), weight.in_channels(), weight.kernel());
                let w = Matrix::from_vec(o, i * k * k, get("weight", &[o, i, k, k])?)?;
                LayerParams::Conv {
                    weight: FilterBank::from_matrix(i, k, w)?,
                    bias: get("bias", &[o])?,
                }
            }
            LayerParams::Fc { weight, .. } => {
                let (o, i) = weight.shape();
                LayerParams::Fc {
                    weight: Matrix::from_vec(o, i, get("weight", &[o, i])?)?,
                    bias: get("bias", &[o])?,
                }
            }
            LayerParams::BatchNorm(bn) => {
                let c = [bn.gamma.len()];
                LayerParams::BatchNorm(BatchNormParams {
                    gamma: get("gamma", &c)?,
                    beta: get("beta", &c)?,
                    running_mean: get("running_mean", &c)?,
                    running_var: get("running_var", &c)?,
                })
            }
        });
    }
    let net = Network::from_parts(header.spec.clone(), params).map_err(|e| mismatch(e.to_string()))?;
    Ok((net, header))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Network, CheckpointHeader)> {
    decode(&fs::read(path)?)
}
