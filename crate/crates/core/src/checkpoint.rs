//! `RRT1` checkpoints: magic, little-endian `u32` manifest length, a JSON
//! manifest, then a raw little-endian tensor payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Normalization;
use crate::error::{Error, Result};
use crate::network::{Model, NetworkConfig};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;
use crate::training::{OptimState, TrainMeta, TrainState};

pub const MAGIC: &[u8; 4] = b"RRT1";
pub const FORMAT_VERSION: u32 = 1;
const PREFIX: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    Param,
    Buffer,
    OptimM,
    OptimV,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub name: String,
    pub kind: EntryKind,
    pub shape: Vec<usize>,
    pub dtype: DType,
    /// Byte offset within the payload.
    pub offset: u64,
    pub nbytes: u64,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub network: NetworkConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainMeta>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalization: Option<Normalization>,
    /// Free-form run information, such as the originating config.
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub extra: serde_json::Value,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub meta: CheckpointMeta,
    pub entries: Vec<Entry>,
}

pub struct Checkpoint<T: Scalar> {
    pub model: Model<T>,
    pub state: Option<TrainState<T>>,
    pub meta: CheckpointMeta,
}

fn push_tensor<T: Scalar>(
    entries: &mut Vec<Entry>,
    payload: &mut Vec<u8>,
    name: &str,
    kind: EntryKind,
    t: &Tensor<T>,
    trainable: bool,
) {
    let offset = payload.len() as u64;
    for v in t.data() {
        v.write_le(payload);
    }
    entries.push(Entry {
        name: name.to_string(),
        kind,
        shape: t.shape().to_vec(),
        dtype: T::DTYPE,
        offset,
        nbytes: payload.len() as u64 - offset,
        trainable,
    });
}

pub fn encode<T: Scalar>(mut meta: CheckpointMeta, model: &Model<T>, state: Option<&TrainState<T>>) -> Result<Vec<u8>> {
    meta.network = model.config().clone();
    meta.train = state.map(TrainState::meta);
    let mut entries = Vec::new();
    let mut payload = Vec::new();
    for p in model.store.params() {
        push_tensor(&mut entries, &mut payload, &p.name, EntryKind::Param, &p.value, p.requires_grad);
    }
    for b in model.store.buffers() {
        push_tensor(&mut entries, &mut payload, &b.name, EntryKind::Buffer, &b.value, !b.frozen);
    }
    if let Some(s) = state {
        for (i, p) in model.store.params().iter().enumerate() {
            if let Some(Some(m)) = s.optim.m.get(i) {
                push_tensor(&mut entries, &mut payload, &p.name, EntryKind::OptimM, m, false);
            }
            if let Some(Some(v)) = s.optim.v.get(i) {
                push_tensor(&mut entries, &mut payload, &p.name, EntryKind::OptimV, v, false);
            }
        }
    }
    let manifest = serde_json::to_vec(&Manifest {
        version: FORMAT_VERSION,
        meta,
        entries,
    })?;
    let mut out = Vec::with_capacity(PREFIX + manifest.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    out.extend_from_slice(&manifest);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Writes through a temporary sibling so readers never see a partial file.
pub fn save<T: Scalar>(path: &Path, meta: CheckpointMeta, model: &Model<T>, state: Option<&TrainState<T>>) -> Result<()> {
    let bytes = encode(meta, model, state)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_manifest(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    if bytes.len() < PREFIX {
        return Err(Error::format(bytes.len() as u64, "truncated checkpoint header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::format(0, "bad magic, expected RRT1"));
    }
    let len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let end = PREFIX
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::format(4, format!("manifest length {len} exceeds file size {}", bytes.len())))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[PREFIX..end])
        .map_err(|e| Error::format(PREFIX as u64, format!("manifest: {e}")))?;
    if manifest.version != FORMAT_VERSION {
        return Err(Error::format(
            PREFIX as u64,
            format!("checkpoint format version {} is not supported", manifest.version),
        ));
    }
    Ok((manifest, &bytes[end..]))
}

fn read_tensor<T: Scalar>(e: &Entry, payload: &[u8], payload_base: u64) -> Result<Tensor<T>> {
    let numel: usize = e.shape.iter().product();
    let want = (numel * e.dtype.size()) as u64;
    let end = e.offset.checked_add(e.nbytes);
    if e.nbytes != want || end.is_none_or(|end| end > payload.len() as u64) {
        return Err(Error::format(
            payload_base + e.offset,
            format!("entry {} declares {} bytes for shape {:?}", e.name, e.nbytes, e.shape),
        ));
    }
    let raw = &payload[e.offset as usize..(e.offset + e.nbytes) as usize];
    let data: Vec<T> = match e.dtype {
        DType::F32 => raw.chunks_exact(4).map(|c| T::of(f32::read_le(c) as f64)).collect(),
        DType::F64 => raw.chunks_exact(8).map(|c| T::of(f64::read_le(c))).collect(),
    };
    Tensor::new(e.shape.clone(), data)
}

/// Rebuilds the model from the stored configuration and overwrites every
/// tensor; values are converted when the stored precision differs.
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let (manifest, payload) = read_manifest(bytes)?;
    let base = (bytes.len() - payload.len()) as u64;
    let mut model = Model::<T>::build(&manifest.meta.network, 0)?;
    let n_params = model.store.params().len();
    let mut optim = OptimState {
        m: vec![None; n_params],
        v: vec![None; n_params],
        t: 0,
    };
    let (mut params_seen, mut buffers_seen) = (0, 0);
    for e in &manifest.entries {
        let t = read_tensor::<T>(e, payload, base)?;
        let bad = |what: &str| Error::format(base + e.offset, format!("{what} {} does not match the network", e.name));
        match e.kind {
            EntryKind::Param | EntryKind::OptimM | EntryKind::OptimV => {
                let id = model.store.find_param(&e.name).ok_or_else(|| bad("parameter"))?;
                if model.store.param(id).value.shape() != t.shape() {
                    return Err(bad("shape of"));
                }
                match e.kind {
                    EntryKind::Param => {
                        let p = model.store.param_mut(id);
                        p.value = t;
                        p.requires_grad = e.trainable;
                        params_seen += 1;
                    }
                    EntryKind::OptimM => optim.m[id.0] = Some(t),
                    _ => optim.v[id.0] = Some(t),
                }
            }
            EntryKind::Buffer => {
                let id = model.store.find_buffer(&e.name).ok_or_else(|| bad("buffer"))?;
                let b = model.store.buffer_mut(id);
                if b.value.shape() != t.shape() {
                    return Err(bad("shape of"));
                }
                b.value = t;
                b.frozen = !e.trainable;
                buffers_seen += 1;
            }
        }
    }
    if params_seen != n_params || buffers_seen != model.store.buffers().len() {
        return Err(Error::format(
            base,
            format!("checkpoint holds {params_seen} parameters and {buffers_seen} buffers; network needs {n_params} and {}", model.store.buffers().len()),
        ));
    }
    let state = manifest.meta.train.clone().map(|m| TrainState::from_meta(m, optim));
    Ok(Checkpoint {
        model,
        state,
        meta: manifest.meta,
    })
}

pub fn load<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{ShortKind, Shortened};

    fn small() -> Model<f64> {
        let mut s = Shortened::new("1-1-2", ShortKind::Reset);
        s.width = 2;
        Model::build_shortened(&s, 3).unwrap()
    }

    fn meta(m: &Model<f64>) -> CheckpointMeta {
        CheckpointMeta {
            network: m.config().clone(),
            train: None,
            normalization: None,
            extra: serde_json::Value::Null,
        }
    }

    #[test]
    fn round_trip_is_bit_exact_and_casts() {
        let m = small();
        let bytes = encode(meta(&m), &m, None).unwrap();
        let back = decode::<f64>(&bytes).unwrap();
        assert_eq!(back.model.store.checksum(|_| true), m.store.checksum(|_| true));
        let narrow = decode::<f32>(&bytes).unwrap();
        assert_eq!(narrow.model.num_params(), m.num_params());
    }

    #[test]
    fn corruption_is_a_format_error() {
        let m = small();
        let mut bytes = encode(meta(&m), &m, None).unwrap();
        assert!(matches!(decode::<f64>(&bytes[..bytes.len() - 1]), Err(Error::Format { .. })));
        bytes[0] = b'X';
        assert!(matches!(decode::<f64>(&bytes), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(decode::<f64>(b"RRT1"), Err(Error::Format { .. })));
    }
}
