//! Binary checkpoint container.
//!
//! ```text
//! bytes 0..8     magic "RSEPCKPT"
//! bytes 8..12    format version, u32 little-endian
//! bytes 12..20   header length H, u64 little-endian
//! bytes 20..20+H JSON header
//! rest           payload of f64 little-endian values
//! ```
//!
//! The header names the variant, model geometry, step counter, RNG position,
//! every canonical parameter with its shape and optimizer step count, the
//! sharing map (alias, canonical) and the batch-norm layers. The payload
//! holds the four optimizer hyperparameters (learning rate, β1, β2, ε),
//! then for each parameter in header order its values, first moments and
//! second moments, then for each batch-norm layer its running means and
//! variances. The header also carries the payload length and SHA-256.
//!
//! Loading rebuilds the variant's parameter table and rejects any name,
//! shape or alias that differs from it.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use reflectsep_core::networks::{ModelConfig, ModelVariant, SeparatorModel};
use reflectsep_core::optim::{Adam, AdamConfig, Moments};
use reflectsep_core::rng::{RandomState, RngSnapshot};
use reflectsep_core::tensor::Tensor;
use reflectsep_core::training::TrainState;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"RSEPCKPT";
pub const FORMAT_VERSION: u32 = 1;
const PREFIX: usize = 20;

#[derive(Serialize, Deserialize)]
struct Header {
    variant: String,
    width_divisor: usize,
    image_size: usize,
    step: u64,
    rng: RngHeader,
    params: Vec<ParamHeader>,
    aliases: Vec<(String, String)>,
    batch_norm: Vec<BnHeader>,
    payload_bytes: u64,
    payload_sha256: String,
}

#[derive(Serialize, Deserialize)]
struct RngHeader {
    seed: String,
    stream: u64,
    word_pos: String,
}

#[derive(Serialize, Deserialize)]
struct ParamHeader {
    name: String,
    shape: Vec<usize>,
    adam_step: u64,
}

#[derive(Serialize, Deserialize)]
struct BnHeader {
    name: String,
    channels: usize,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Option<Vec<u8>> {
    if !s.len().is_multiple_of(2) {
        return None;
    }
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(s.get(i..i + 2)?, 16).ok())
        .collect()
}

fn push(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes the full training state.
pub fn encode(state: &TrainState) -> Vec<u8> {
    let model = &state.model;
    let store = model.params();
    let adam = state.optimizer.config();
    let mut payload = Vec::new();
    push(
        &mut payload,
        &[adam.learning_rate, adam.beta1, adam.beta2, adam.eps],
    );
    let mut params = Vec::new();
    for id in store.ids() {
        let value = store.get(id);
        let moments = state.optimizer.moments(id);
        params.push(ParamHeader {
            name: store.name(id).to_string(),
            shape: value.shape().to_vec(),
            adam_step: moments.t,
        });
        push(&mut payload, value.data());
        push(&mut payload, &moments.m);
        push(&mut payload, &moments.v);
    }
    let mut batch_norm = Vec::new();
    for bn in model.bn_stats() {
        batch_norm.push(BnHeader {
            name: bn.name.clone(),
            channels: bn.mean.len(),
        });
        push(&mut payload, &bn.mean);
        push(&mut payload, &bn.var);
    }
    let snap = state.rng.snapshot();
    let config = model.config();
    let header = Header {
        variant: config.variant.name().to_string(),
        width_divisor: config.width_divisor,
        image_size: config.image_size,
        step: state.step,
        rng: RngHeader {
            seed: hex(&snap.seed),
            stream: snap.stream,
            word_pos: snap.word_pos.to_string(),
        },
        params,
        aliases: store.aliases().to_vec(),
        batch_norm,
        payload_bytes: payload.len() as u64,
        payload_sha256: hex(&Sha256::digest(&payload)),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(PREFIX + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out
}

struct Reader<'a> {
    values: std::slice::ChunksExact<'a, u8>,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Vec<f64> {
        (&mut self.values)
            .take(n)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect()
    }
}

/// Parses and validates a checkpoint; `path` only labels errors.
pub fn decode(bytes: &[u8], path: &Path) -> Result<TrainState> {
    if bytes.len() < PREFIX || &bytes[..8] != MAGIC {
        return Err(Error::corrupt(path, "missing checkpoint magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion {
            path: path.to_path_buf(),
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let header_end = usize::try_from(header_len)
        .ok()
        .and_then(|n| n.checked_add(PREFIX))
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| Error::corrupt(path, "header length exceeds file"))?;
    let header: Header = serde_json::from_slice(&bytes[PREFIX..header_end])
        .map_err(|e| Error::corrupt(path, format!("header: {e}")))?;

    let variant: ModelVariant = header
        .variant
        .parse()
        .map_err(|_| Error::corrupt(path, "unknown variant"))?;
    let config = ModelConfig::reduced(variant, header.width_divisor, header.image_size);
    let mut model = SeparatorModel::new(config, &mut RandomState::new(0))
        .map_err(|e| Error::corrupt(path, format!("model geometry: {e}")))?;

    let expected = model.param_table();
    if expected.len() != header.params.len() {
        return Err(Error::corrupt(
            path,
            "parameter count differs from the variant",
        ));
    }
    for ((name, shape), p) in expected.iter().zip(&header.params) {
        if *name != p.name {
            return Err(Error::corrupt(
                path,
                format!("unexpected parameter {}", p.name),
            ));
        }
        if *shape != p.shape {
            return Err(Error::CheckpointShape {
                path: path.to_path_buf(),
                name: p.name.clone(),
                expected: shape.clone(),
                found: p.shape.clone(),
            });
        }
    }
    if model.params().aliases() != header.aliases.as_slice() {
        return Err(Error::corrupt(path, "sharing map differs from the variant"));
    }
    if model.bn_stats().len() != header.batch_norm.len() {
        return Err(Error::corrupt(
            path,
            "batch-norm layer count differs from the variant",
        ));
    }
    for (bn, h) in model.bn_stats().iter().zip(&header.batch_norm) {
        if bn.name != h.name {
            return Err(Error::corrupt(
                path,
                format!("unexpected batch-norm layer {}", h.name),
            ));
        }
        if bn.mean.len() != h.channels {
            return Err(Error::CheckpointShape {
                path: path.to_path_buf(),
                name: h.name.clone(),
                expected: vec![bn.mean.len()],
                found: vec![h.channels],
            });
        }
    }

    let payload = &bytes[header_end..];
    if payload.len() as u64 != header.payload_bytes {
        return Err(Error::corrupt(
            path,
            format!(
                "payload is {} bytes, header says {}",
                payload.len(),
                header.payload_bytes
            ),
        ));
    }
    let scalars: usize = 4
        + expected
            .iter()
            .map(|(_, s)| 3 * s.iter().product::<usize>())
            .sum::<usize>()
        + model
            .bn_stats()
            .iter()
            .map(|b| 2 * b.mean.len())
            .sum::<usize>();
    if payload.len() != 8 * scalars {
        return Err(Error::corrupt(
            path,
            "payload size does not match the parameter table",
        ));
    }
    if hex(&Sha256::digest(payload)) != header.payload_sha256 {
        return Err(Error::corrupt(path, "payload checksum mismatch"));
    }
    if let Some(i) = payload
        .chunks_exact(8)
        .position(|c| !f64::from_le_bytes(c.try_into().expect("8 bytes")).is_finite())
    {
        return Err(Error::corrupt(
            path,
            format!("non-finite value at payload index {i}"),
        ));
    }

    let seed: [u8; 32] = unhex(&header.rng.seed)
        .and_then(|v| v.try_into().ok())
        .ok_or_else(|| Error::corrupt(path, "rng seed"))?;
    let word_pos: u128 = header
        .rng
        .word_pos
        .parse()
        .map_err(|_| Error::corrupt(path, "rng position"))?;
    let rng = RandomState::restore(&RngSnapshot {
        seed,
        stream: header.rng.stream,
        word_pos,
    });

    let mut reader = Reader {
        values: payload.chunks_exact(8),
    };
    let hyper = reader.take(4);
    let adam_config = AdamConfig {
        learning_rate: hyper[0],
        beta1: hyper[1],
        beta2: hyper[2],
        eps: hyper[3],
    };
    let mut moments = Vec::with_capacity(expected.len());
    let ids: Vec<_> = model.params().ids().collect();
    for ((id, (_, shape)), p) in ids.iter().zip(&expected).zip(&header.params) {
        let n = shape.iter().product();
        model
            .params_mut()
            .set(*id, Tensor::new(shape, reader.take(n))?)?;
        moments.push(Moments {
            m: reader.take(n),
            v: reader.take(n),
            t: p.adam_step,
        });
    }
    for bn in model.bn_stats_mut() {
        let c = bn.mean.len();
        bn.mean = reader.take(c);
        bn.var = reader.take(c);
    }
    let mut optimizer = Adam::new(adam_config, model.params());
    for (id, m) in ids.into_iter().zip(moments) {
        optimizer.set_moments(id, m)?;
    }
    Ok(TrainState {
        model,
        optimizer,
        step: header.step,
        rng,
    })
}

fn temp_path(path: &Path) -> PathBuf {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!(".{name}.tmp"))
}

/// Writes to a sibling temporary file, then renames over `path`.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let tmp = temp_path(path);
    let write = || -> std::io::Result<()> {
        let mut file = fs::File::create(&tmp)?;
        file.write_all(&encode(state))?;
        file.sync_all()
    };
    write().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
