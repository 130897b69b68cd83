//! Binary checkpoints of a full training state.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header, then every tensor as little-endian `f64` in header order.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::Config;
use crate::data::BatchCursor;
use crate::error::Result;
use crate::model::{FrozenModel, Params};
use crate::normalization::{SpectralSet, SpectralState};
use crate::tensor::Tensor;
use crate::trainer::{wrapped_networks, Adam, AdamConfig, Moment, Monitor, Progress, TrainState};

pub const MAGIC: &[u8; 8] = b"PGAECKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (this build reads {FORMAT_VERSION})")]
    UnsupportedVersion { found: u32 },
    #[error("checkpoint truncated")]
    Truncated,
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint config mismatch at `{key}`: expected {expected}, found {found}")]
    ConfigMismatch { key: String, expected: String, found: String },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct RngState {
    seed: [u8; 32],
    stream: u64,
    word_pos: u128,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct AdamHeader {
    config: AdamConfig,
    steps: BTreeMap<String, u64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    config: Config,
    config_hash: String,
    progress: Progress,
    rng: RngState,
    cursor: BatchCursor,
    monitor: Monitor,
    encoder_adam: AdamHeader,
    decoder_adam: AdamHeader,
    tensors: Vec<TensorEntry>,
}

fn adam_tensors(prefix: &str, adam: &Adam, params: &Params, out: &mut Vec<(String, Tensor)>) -> Result<()> {
    for (name, m) in &adam.moments {
        let shape = params
            .get(name)
            .ok_or_else(|| CheckpointError::Corrupt(format!("moment for unknown parameter `{name}`")))?
            .shape()
            .to_vec();
        out.push((format!("{prefix}/m/{name}"), Tensor::new(&shape, m.m.clone())?));
        out.push((format!("{prefix}/v/{name}"), Tensor::new(&shape, m.v.clone())?));
    }
    Ok(())
}

/// Serializes `state` into the checkpoint byte format.
pub fn to_bytes(state: &TrainState) -> Result<Vec<u8>> {
    let mut tensors: Vec<(String, Tensor)> = Vec::new();
    for (prefix, params) in [
        ("encoder", &state.encoder_params),
        ("decoder", &state.decoder_params),
        ("ema", &state.ema_params),
    ] {
        for (name, t) in params {
            tensors.push((format!("{prefix}/{name}"), t.clone()));
        }
    }
    adam_tensors("encoder_adam", &state.encoder_opt, &state.encoder_params, &mut tensors)?;
    adam_tensors("decoder_adam", &state.decoder_opt, &state.decoder_params, &mut tensors)?;
    for (prefix, set) in [
        ("encoder_sn", &state.encoder_spectral),
        ("decoder_sn", &state.decoder_spectral),
    ] {
        for (name, s) in set {
            tensors.push((format!("{prefix}/{name}"), Tensor::new(&[s.u.len()], s.u.clone())?));
        }
    }

    let steps = |a: &Adam| AdamHeader {
        config: a.config,
        steps: a.moments.iter().map(|(k, m)| (k.clone(), m.t)).collect(),
    };
    let header = Header {
        config: state.config.clone(),
        config_hash: state.config.hash(),
        progress: state.progress,
        rng: RngState {
            seed: state.rng.get_seed(),
            stream: state.rng.get_stream(),
            word_pos: state.rng.get_word_pos(),
        },
        cursor: state.cursor,
        monitor: state.monitor.clone(),
        encoder_adam: steps(&state.encoder_opt),
        decoder_adam: steps(&state.decoder_opt),
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let body: usize = tensors.iter().map(|(_, t)| t.numel() * 8).sum();
    let mut out = Vec::with_capacity(8 + 4 + 8 + json.len() + body);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in &tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn take<'a>(bytes: &mut &'a [u8], n: usize) -> std::result::Result<&'a [u8], CheckpointError> {
    if bytes.len() < n {
        return Err(CheckpointError::Truncated);
    }
    let (head, tail) = bytes.split_at(n);
    *bytes = tail;
    Ok(head)
}

fn restore_params(
    prefix: &str,
    expected: &Params,
    tensors: &mut BTreeMap<String, Tensor>,
) -> std::result::Result<Params, CheckpointError> {
    let mut out = Params::new();
    for (name, t) in expected {
        let key = format!("{prefix}/{name}");
        let got = tensors
            .remove(&key)
            .ok_or_else(|| CheckpointError::Corrupt(format!("missing tensor `{key}`")))?;
        if got.shape() != t.shape() {
            return Err(CheckpointError::Corrupt(format!(
                "tensor `{key}` has shape {:?}, expected {:?}",
                got.shape(),
                t.shape()
            )));
        }
        out.insert(name.clone(), got);
    }
    Ok(out)
}

fn restore_adam(
    prefix: &str,
    header: &AdamHeader,
    tensors: &mut BTreeMap<String, Tensor>,
) -> std::result::Result<Adam, CheckpointError> {
    let mut adam = Adam::new(header.config);
    for (name, &t) in &header.steps {
        let mut get = |kind: &str| {
            let key = format!("{prefix}/{kind}/{name}");
            tensors
                .remove(&key)
                .map(Tensor::into_data)
                .ok_or_else(|| CheckpointError::Corrupt(format!("missing tensor `{key}`")))
        };
        let m = get("m")?;
        let v = get("v")?;
        adam.moments.insert(name.clone(), Moment { t, m, v });
    }
    Ok(adam)
}

fn restore_spectral(
    prefix: &str,
    expected: &SpectralSet,
    tensors: &mut BTreeMap<String, Tensor>,
) -> std::result::Result<SpectralSet, CheckpointError> {
    let mut out = SpectralSet::new();
    for (name, s) in expected {
        let key = format!("{prefix}/{name}");
        let u = tensors
            .remove(&key)
            .ok_or_else(|| CheckpointError::Corrupt(format!("missing tensor `{key}`")))?
            .into_data();
        if u.len() != s.u.len() {
            return Err(CheckpointError::Corrupt(format!("spectral state `{key}` has the wrong length")));
        }
        out.insert(name.clone(), SpectralState { u });
    }
    Ok(out)
}

/// Parses checkpoint bytes back into a training state.
pub fn from_bytes(mut bytes: &[u8]) -> Result<TrainState> {
    if take(&mut bytes, 8)? != MAGIC {
        return Err(CheckpointError::BadMagic.into());
    }
    let version = u32::from_le_bytes(take(&mut bytes, 4)?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion { found: version }.into());
    }
    let len = u64::from_le_bytes(take(&mut bytes, 8)?.try_into().expect("8 bytes"));
    let header: Header = serde_json::from_slice(take(&mut bytes, len as usize)?)
        .map_err(|e| CheckpointError::Corrupt(format!("header: {e}")))?;
    if header.config.hash() != header.config_hash {
        return Err(CheckpointError::Corrupt("config hash does not match the stored config".into()).into());
    }

    let mut tensors = BTreeMap::new();
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let raw = take(&mut bytes, n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.insert(entry.name.clone(), Tensor::new(&entry.shape, data)?);
    }
    if !bytes.is_empty() {
        return Err(CheckpointError::Corrupt(format!("{} trailing bytes", bytes.len())).into());
    }

    let config = header.config;
    let (encoder, decoder) = wrapped_networks(&config)
        .map_err(|e| CheckpointError::Corrupt(format!("stored config does not build: {e}")))?;
    // Shapes and names to expect come from a throwaway initialization.
    let mut scratch = ChaCha8Rng::seed_from_u64(0);
    let enc_shape = encoder.init_params(&mut scratch);
    let dec_shape = decoder.init_params(&mut scratch);
    let enc_sn = encoder.init_spectral(&enc_shape, 0, &mut scratch);
    let dec_sn = decoder.init_spectral(&dec_shape, 0, &mut scratch);

    let encoder_params = restore_params("encoder", &enc_shape, &mut tensors)?;
    let decoder_params = restore_params("decoder", &dec_shape, &mut tensors)?;
    let ema_params = restore_params("ema", &dec_shape, &mut tensors)?;
    let encoder_opt = restore_adam("encoder_adam", &header.encoder_adam, &mut tensors)?;
    let decoder_opt = restore_adam("decoder_adam", &header.decoder_adam, &mut tensors)?;
    let encoder_spectral = restore_spectral("encoder_sn", &enc_sn, &mut tensors)?;
    let decoder_spectral = restore_spectral("decoder_sn", &dec_sn, &mut tensors)?;
    if let Some(extra) = tensors.keys().next() {
        return Err(CheckpointError::Corrupt(format!("unexpected tensor `{extra}`")).into());
    }

    let mut rng = ChaCha8Rng::from_seed(header.rng.seed);
    rng.set_stream(header.rng.stream);
    rng.set_word_pos(header.rng.word_pos);
    Ok(TrainState {
        config,
        encoder,
        decoder,
        encoder_params,
        decoder_params,
        ema_params,
        encoder_spectral,
        decoder_spectral,
        encoder_opt,
        decoder_opt,
        progress: header.progress,
        rng,
        cursor: header.cursor,
        monitor: header.monitor,
    })
}

/// Writes atomically: a sibling temp file is renamed over `path`.
pub fn save(state: &TrainState, path: &Path) -> Result<()> {
    let bytes = to_bytes(state)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, &bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<TrainState> {
    from_bytes(&std::fs::read(path)?)
}

/// Loads and refuses a checkpoint whose model or normalization settings
/// differ from `expected`.
pub fn load_compatible(path: &Path, expected: &Config) -> Result<TrainState> {
    let state = load(path)?;
    check_compatible(&state.config, expected)?;
    Ok(state)
}

pub fn check_compatible(found: &Config, expected: &Config) -> Result<()> {
    let ours = expected.flatten();
    let theirs = found.flatten();
    for (key, want) in &ours {
        if !(key.starts_with("model.") || key.starts_with("norm.")) {
            continue;
        }
        let got = theirs.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str()).unwrap_or("<absent>");
        if got != want {
            return Err(CheckpointError::ConfigMismatch {
                key: key.clone(),
                expected: want.clone(),
                found: got.to_string(),
            }
            .into());
        }
    }
    Ok(())
}

/// Loads the inference snapshot (EMA decoder) and the stored config.
pub fn load_frozen(path: &Path) -> Result<(FrozenModel, Config)> {
    let state = load(path)?;
    Ok((state.snapshot(), state.config))
}

/// Short content hash of a checkpoint file, for output naming.
pub fn file_hash(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let digest = Sha256::digest(std::fs::read(path)?);
    Ok(digest.iter().take(6).map(|b| format!("{b:02x}")).collect())
}
