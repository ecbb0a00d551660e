//! Checkpoint container: `TVLTCKP1`, u64 LE manifest length, JSON manifest,
//! then concatenated TVT blobs addressed by offset with SHA-256 checksums.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{model_specs, task_head_specs, HeadKind, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::{tvt, AdamHyper, AdamState, DType, ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"TVLTCKP1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamStore<f32>,
    pub head: Option<HeadKind>,
    pub global_step: u64,
    pub optimizer: Option<AdamState<f32>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    offset: u64,
    length: u64,
    checksum: String,
    shape: Vec<usize>,
    dtype: DType,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct OptimizerMeta {
    hyper: AdamHyper,
    step: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: ModelConfig,
    head: Option<HeadKind>,
    global_step: u64,
    optimizer: Option<OptimizerMeta>,
    tensors: Vec<TensorEntry>,
}

const M_PREFIX: &str = "optim.m.";
const V_PREFIX: &str = "optim.v.";

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Serializes to bytes; tensor order is the store's name order so output is
/// deterministic.
pub fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut blobs: Vec<(String, Vec<u8>, Vec<usize>)> = Vec::new();
    for (name, t) in ckpt.params.iter() {
        blobs.push((name.to_string(), tvt::encode(t)?, t.shape().to_vec()));
    }
    if let Some(opt) = &ckpt.optimizer {
        for (prefix, moments) in [(M_PREFIX, &opt.m), (V_PREFIX, &opt.v)] {
            for (name, buf) in moments {
                let t = Tensor::new(vec![buf.len()], buf.clone())?;
                blobs.push((format!("{prefix}{name}"), tvt::encode(&t)?, vec![buf.len()]));
            }
        }
    }
    let mut offset = 0u64;
    let tensors = blobs
        .iter()
        .map(|(name, bytes, shape)| {
            let e = TensorEntry {
                name: name.clone(),
                offset,
                length: bytes.len() as u64,
                checksum: sha256_hex(bytes),
                shape: shape.clone(),
                dtype: DType::F32,
            };
            offset += bytes.len() as u64;
            e
        })
        .collect();
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: ckpt.config.clone(),
        head: ckpt.head,
        global_step: ckpt.global_step,
        optimizer: ckpt.optimizer.as_ref().map(|o| OptimizerMeta {
            hyper: o.hyper,
            step: o.step,
        }),
        tensors,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, bytes, _) in blobs {
        out.extend_from_slice(&bytes);
    }
    Ok(out)
}

fn first_difference(expected: &serde_json::Value, found: &serde_json::Value, path: &str) -> Option<(String, String, String)> {
    use serde_json::Value;
    match (expected, found) {
        (Value::Object(a), Value::Object(b)) => {
            let keys: std::collections::BTreeSet<&String> = a.keys().chain(b.keys()).collect();
            keys.into_iter().find_map(|k| {
                let sub = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match (a.get(k), b.get(k)) {
                    (Some(x), Some(y)) => first_difference(x, y, &sub),
                    (x, y) => Some((sub, fmt_opt(x), fmt_opt(y))),
                }
            })
        }
        _ if expected != found => Some((path.to_string(), expected.to_string(), found.to_string())),
        _ => None,
    }
}

fn fmt_opt(v: Option<&serde_json::Value>) -> String {
    v.map_or_else(|| "<absent>".into(), |v| v.to_string())
}

/// Parses bytes produced by [`encode`]. With `expected`, any config field
/// that differs is reported as a version error naming the field.
pub fn decode(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<Checkpoint> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body_start = 16usize
        .checked_add(mlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Integrity("manifest length exceeds file".into()))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[16..body_start])?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Version {
            field: "format_version".into(),
            expected: FORMAT_VERSION.to_string(),
            found: manifest.format_version.to_string(),
        });
    }
    if let Some(exp) = expected {
        let a = serde_json::to_value(exp)?;
        let b = serde_json::to_value(&manifest.config)?;
        if let Some((field, expected, found)) = first_difference(&a, &b, "") {
            return Err(Error::Version { field, expected, found });
        }
    }
    let blobs = &bytes[body_start..];
    let mut params = ParamStore::new();
    let mut m = BTreeMap::new();
    let mut v = BTreeMap::new();
    for e in &manifest.tensors {
        let start = e.offset as usize;
        let end = start
            .checked_add(e.length as usize)
            .filter(|&end| end <= blobs.len())
            .ok_or_else(|| Error::Integrity(format!("tensor `{}` extends past end of file", e.name)))?;
        let blob = &blobs[start..end];
        if sha256_hex(blob) != e.checksum {
            return Err(Error::Integrity(format!("checksum mismatch for tensor `{}`", e.name)));
        }
        let t: Tensor<f32> = tvt::decode(blob)?;
        if t.shape() != e.shape.as_slice() {
            return Err(Error::Integrity(format!("tensor `{}` shape disagrees with manifest", e.name)));
        }
        if let Some(name) = e.name.strip_prefix(M_PREFIX) {
            m.insert(name.to_string(), t.into_data());
        } else if let Some(name) = e.name.strip_prefix(V_PREFIX) {
            v.insert(name.to_string(), t.into_data());
        } else {
            params.insert(e.name.clone(), t)?;
        }
    }
    let mut required = model_specs(&manifest.config);
    if let Some(h) = &manifest.head {
        required.extend(task_head_specs(manifest.config.d_enc, h));
    }
    if let Some(missing) = required.iter().find(|s| !params.contains(&s.name)) {
        return Err(Error::Integrity(format!("missing tensor `{}`", missing.name)));
    }
    let optimizer = manifest.optimizer.map(|o| AdamState {
        hyper: o.hyper,
        step: o.step,
        m,
        v,
    });
    Ok(Checkpoint {
        config: manifest.config,
        params,
        head: manifest.head,
        global_step: manifest.global_step,
        optimizer,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, encode(ckpt)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    decode(&bytes, expected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    fn sample() -> Checkpoint {
        let config = ModelConfig::desk();
        let params = init_params::<f32>(&config, 3).unwrap();
        let mut opt = AdamState::<f32>::new(AdamHyper::default());
        opt.step = 4;
        opt.m.insert("embed.cls".into(), vec![0.25; 64]);
        opt.v.insert("embed.cls".into(), vec![0.5; 64]);
        Checkpoint {
            config,
            params,
            head: None,
            global_step: 17,
            optimizer: Some(opt),
        }
    }

    #[test]
    fn roundtrip_is_exact() {
        let c = sample();
        let bytes = encode(&c).unwrap();
        assert_eq!(decode(&bytes, Some(&c.config)).unwrap(), c);
        assert_eq!(encode(&decode(&bytes, None).unwrap()).unwrap(), bytes);
    }

    #[test]
    fn corrupted_blob_is_an_integrity_error() {
        let mut bytes = encode(&sample()).unwrap();
        let n = bytes.len();
        bytes[n - 3] ^= 0x40;
        assert!(matches!(decode(&bytes, None), Err(Error::Integrity(_))));
    }

    #[test]
    fn width_mismatch_names_the_field() {
        let bytes = encode(&sample()).unwrap();
        let other = ModelConfig { d_enc: 32, ..ModelConfig::desk() };
        match decode(&bytes, Some(&other)) {
            Err(Error::Version { field, .. }) => assert_eq!(field, "d_enc"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_tensor_is_an_integrity_error() {
        let mut c = sample();
        c.params.remove("decoder.mask");
        let bytes = encode(&c).unwrap();
        match decode(&bytes, None) {
            Err(Error::Integrity(msg)) => assert!(msg.contains("decoder.mask")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        assert!(matches!(decode(b"NOTACKPT........", None), Err(Error::Format(_))));
    }
}
