//! Binary checkpoint: magic, format version, JSON header (manifest and
//! metadata), little-endian `f32` payload, SHA-256 of everything before it.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{train_config_from_pairs, train_config_pairs};
use crate::error::{Error, Result};
use crate::models::{DiscriminatorParams, ParamStore};
use crate::models::GeneratorParams;
use crate::tensor::Tensor;
use crate::training::{AdamSlot, AdamState, ReplayBuffer, TrainState};

pub const MAGIC: &[u8; 8] = b"GGANCKPT";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the payload.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RngState {
    seed: String,
    stream: u64,
    word_pos: String,
}

impl RngState {
    fn of(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::Checkpoint("malformed random stream state".into());
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct OptimizerMeta {
    name: String,
    beta1: f64,
    beta2: f64,
    eps: f64,
    steps: u64,
    /// `(parameter, update count)` for every parameter with moments.
    slots: Vec<(String, u64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    iteration: u64,
    new_style: Option<usize>,
    config: Vec<(String, String)>,
    rng: RngState,
    buffer_rng: RngState,
    buffer_capacity: usize,
    buffer_labels: Vec<usize>,
    optimizers: Vec<OptimizerMeta>,
    entries: Vec<ManifestEntry>,
}

struct PayloadWriter {
    entries: Vec<ManifestEntry>,
    bytes: Vec<u8>,
}

impl PayloadWriter {
    fn push(&mut self, name: String, t: &Tensor<f32>) {
        self.entries.push(ManifestEntry {
            name,
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
            offset: self.bytes.len() as u64,
        });
        for v in t.data() {
            self.bytes.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn push_store(&mut self, prefix: &str, store: &ParamStore) {
        for (_, name, t) in store.iter() {
            self.push(format!("{prefix}/{name}"), t);
        }
    }

    fn push_optimizer(&mut self, name: &str, opt: &AdamState, store: &ParamStore) -> OptimizerMeta {
        let mut slots = Vec::new();
        for (id, slot) in opt.slots() {
            let pname = store.name(id);
            let shape = store.get(id).shape().to_vec();
            let as_tensor = |v: &[f32]| Tensor::new(&shape, v.to_vec()).expect("moments mirror their parameter");
            self.push(format!("adam/{name}/{pname}/m"), &as_tensor(&slot.m));
            self.push(format!("adam/{name}/{pname}/v"), &as_tensor(&slot.v));
            slots.push((pname.to_string(), slot.t));
        }
        OptimizerMeta { name: name.into(), beta1: opt.beta1, beta2: opt.beta2, eps: opt.eps, steps: opt.steps, slots }
    }
}

/// Serialize the full training state.
pub fn encode_checkpoint(state: &TrainState) -> Vec<u8> {
    let mut w = PayloadWriter { entries: Vec::new(), bytes: Vec::new() };
    w.push_store("generator", state.generator.store());
    w.push_store("discriminator", state.discriminator.store());
    let optimizers = vec![
        w.push_optimizer("d", &state.opt_d, state.discriminator.store()),
        w.push_optimizer("g", &state.opt_g, state.generator.store()),
        w.push_optimizer("ae", &state.opt_ae, state.generator.store()),
    ];
    for (i, (img, _)) in state.buffer.slots().iter().enumerate() {
        w.push(format!("buffer/{i}"), img);
    }
    let header = Header {
        version: FORMAT_VERSION,
        iteration: state.iteration,
        new_style: state.new_style,
        config: train_config_pairs(&state.config),
        rng: RngState::of(&state.rng),
        buffer_rng: RngState::of(state.buffer.rng()),
        buffer_capacity: state.buffer.capacity(),
        buffer_labels: state.buffer.slots().iter().map(|s| s.1).collect(),
        optimizers,
        entries: w.entries,
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(20 + header.len() + w.bytes.len() + DIGEST_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&w.bytes);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

/// Write atomically (temporary file, then rename).
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(state);
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        e => e,
    })
}

struct Payload<'a> {
    entries: &'a [ManifestEntry],
    bytes: &'a [u8],
}

impl Payload<'_> {
    fn get(&self, name: &str) -> Result<Tensor<f32>> {
        let e = self
            .entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing entry {name}")))?;
        if e.dtype != "f32" {
            return Err(Error::Checkpoint(format!("entry {name} has dtype {}", e.dtype)));
        }
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let raw = start
            .checked_add(4 * n)
            .and_then(|end| self.bytes.get(start..end))
            .ok_or_else(|| Error::Checkpoint(format!("entry {name} runs past the payload")))?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        Tensor::new(&e.shape, data).map_err(|_| Error::Checkpoint(format!("entry {name} has an empty shape")))
    }

    fn fill_store(&self, prefix: &str, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = format!("{prefix}/{}", store.name(id));
            let t = self.get(&name)?;
            if t.shape() != store.get(id).shape() {
                return Err(Error::Checkpoint(format!(
                    "entry {name} has shape {:?}, the model expects {:?}",
                    t.shape(),
                    store.get(id).shape()
                )));
            }
            *store.get_mut(id) = t;
        }
        Ok(())
    }

    fn optimizer(&self, meta: &OptimizerMeta, store: &ParamStore) -> Result<AdamState> {
        let mut opt = AdamState::new(meta.beta1, meta.beta2, meta.eps);
        opt.steps = meta.steps;
        for (pname, t) in &meta.slots {
            let id = store
                .find(pname)
                .ok_or_else(|| Error::Checkpoint(format!("optimizer state for unknown parameter {pname}")))?;
            let m = self.get(&format!("adam/{}/{pname}/m", meta.name))?.into_data();
            let v = self.get(&format!("adam/{}/{pname}/v", meta.name))?.into_data();
            if m.len() != store.get(id).len() || v.len() != m.len() {
                return Err(Error::Checkpoint(format!("optimizer state for {pname} does not match its parameter")));
            }
            opt.set_slot(id, AdamSlot { m, v, t: *t });
        }
        Ok(opt)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<TrainState> {
    let fixed = MAGIC.len() + 12;
    if bytes.len() < fixed + DIGEST_LEN || !bytes.starts_with(MAGIC) {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version} (expected {FORMAT_VERSION})")));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checkpoint("checksum mismatch, file is corrupted".into()));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let header_bytes = body
        .get(fixed..fixed.saturating_add(header_len))
        .ok_or_else(|| Error::Checkpoint("header runs past the file".into()))?;
    let header: Header =
        serde_json::from_slice(header_bytes).map_err(|e| Error::Checkpoint(format!("malformed header: {e}")))?;
    let payload = Payload { entries: &header.entries, bytes: &body[fixed + header_len..] };

    let config = train_config_from_pairs(&header.config)?;
    let mut scratch = ChaCha8Rng::seed_from_u64(0);
    let mut generator = GeneratorParams::new(config.generator_config(), &mut scratch)?;
    let mut discriminator = DiscriminatorParams::new(config.discriminator_config(), &mut scratch)?;
    payload.fill_store("generator", generator.store_mut())?;
    payload.fill_store("discriminator", discriminator.store_mut())?;
    let opt = |name: &str, store: &ParamStore| -> Result<AdamState> {
        let meta = header
            .optimizers
            .iter()
            .find(|o| o.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing optimizer {name}")))?;
        payload.optimizer(meta, store)
    };
    let opt_d = opt("d", discriminator.store())?;
    let opt_g = opt("g", generator.store())?;
    let opt_ae = opt("ae", generator.store())?;
    let slots = header
        .buffer_labels
        .iter()
        .enumerate()
        .map(|(i, &c)| Ok((payload.get(&format!("buffer/{i}"))?, c)))
        .collect::<Result<Vec<_>>>()?;
    if slots.len() > header.buffer_capacity {
        return Err(Error::Checkpoint("replay buffer holds more images than its capacity".into()));
    }
    Ok(TrainState {
        config,
        generator,
        discriminator,
        opt_d,
        opt_g,
        opt_ae,
        buffer: ReplayBuffer::restore(header.buffer_capacity, slots, header.buffer_rng.restore()?),
        rng: header.rng.restore()?,
        iteration: header.iteration,
        new_style: header.new_style,
    })
}

/// Refuse a checkpoint whose branch count differs from what the caller
/// was configured for.
pub fn check_styles(state: &TrainState, expected: usize) -> Result<()> {
    if state.styles() != expected {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} style branches, the configuration expects {expected}",
            state.styles()
        )));
    }
    Ok(())
}
