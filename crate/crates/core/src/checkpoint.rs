//! Single-file checkpoint container.
//!
//! ```text
//! RETARGET-CKPT v1\n
//! u64 little-endian header length
//! JSON header: kind, config, metadata, tensor directory, blob digest
//! f64 little-endian blobs in directory order
//! ```

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::discriminator::{init_discriminator, Discriminator};
use crate::error::{Error, Result};
use crate::generator::{init_generator, Generator, GeneratorConfig};
use crate::nn::ParamStore;
use crate::optim::Adam;
use crate::trainer::{TrainConfig, TrainState};

pub const MAGIC: &str = "RETARGET-CKPT";
pub const FORMAT_VERSION: &str = "v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub len: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub step: u64,
    pub epoch: u64,
    pub seed: u64,
    pub generator_params: usize,
    pub discriminator_params: Option<usize>,
    pub adam_steps_generator: Option<u64>,
    pub adam_steps_discriminator: Option<u64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    format_version: String,
    /// `"train"` for a full state, `"generator"` for inference only.
    kind: String,
    generator: GeneratorConfig,
    train: Option<TrainConfig>,
    metadata: Metadata,
    tensors: Vec<TensorEntry>,
    blob_sha256: String,
}

/// Contents of a checkpoint; optimizer and discriminator state are absent
/// for generator-only files.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub generator: Generator,
    pub discriminator: Option<Discriminator>,
    pub opt_generator: Option<Adam>,
    pub opt_discriminator: Option<Adam>,
    pub train: Option<TrainConfig>,
    pub metadata: Metadata,
}

impl Checkpoint {
    pub fn inference_only(&self) -> bool {
        self.discriminator.is_none() || self.train.is_none()
    }

    pub fn into_train_state(self) -> Result<TrainState> {
        if self.inference_only() {
            return Err(Error::Checkpoint("checkpoint is inference-only (no discriminator or optimizer state)".into()));
        }
        Ok(TrainState {
            generator: self.generator,
            discriminator: self.discriminator.expect("checked"),
            opt_generator: self.opt_generator.expect("checked"),
            opt_discriminator: self.opt_discriminator.expect("checked"),
            config: self.train.expect("checked"),
            step: self.metadata.step,
            epoch: self.metadata.epoch,
        })
    }
}

fn push_store(prefix: &str, store: &ParamStore, out: &mut Vec<(String, Vec<usize>, Vec<f64>)>) {
    for (name, shape, data) in store.named_arrays() {
        out.push((format!("{prefix}/{name}"), shape, data));
    }
}

fn push_adam(prefix: &str, store: &ParamStore, adam: &Adam, out: &mut Vec<(String, Vec<usize>, Vec<f64>)>) {
    for (i, id) in store.ids().enumerate() {
        let shape = store.tensors()[i].shape().to_vec();
        out.push((format!("{prefix}/m/{}", store.name(id)), shape.clone(), adam.m[i].clone()));
        out.push((format!("{prefix}/v/{}", store.name(id)), shape, adam.v[i].clone()));
    }
}

fn write_atomic(path: &Path, header: &mut Header, arrays: &[(String, Vec<usize>, Vec<f64>)]) -> Result<()> {
    let mut blob = Vec::new();
    header.tensors.clear();
    for (name, shape, data) in arrays {
        header.tensors.push(TensorEntry {
            name: name.clone(),
            shape: shape.clone(),
            offset: blob.len() as u64,
            len: data.len() as u64,
        });
        for v in data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    header.blob_sha256 = hex(&Sha256::digest(&blob));
    let json = serde_json::to_vec(header).map_err(|e| Error::Checkpoint(format!("header encoding failed: {e}")))?;

    let tmp = temp_path(path);
    let io = |source| Error::Io { module: "trainer", path: tmp.clone(), source };
    let mut file = fs::File::create(&tmp).map_err(io)?;
    file.write_all(format!("{MAGIC} {FORMAT_VERSION}\n").as_bytes()).map_err(io)?;
    file.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
    file.write_all(&json).map_err(io)?;
    file.write_all(&blob).map_err(io)?;
    file.sync_all().map_err(io)?;
    drop(file);
    fs::rename(&tmp, path).map_err(Error::io("trainer", path))
}

fn temp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(format!(".tmp-{}", std::process::id()));
    path.with_file_name(name)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes the full training state.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let mut arrays = Vec::new();
    push_store("generator", &state.generator.params, &mut arrays);
    push_store("discriminator", &state.discriminator.params, &mut arrays);
    push_adam("opt_generator", &state.generator.params, &state.opt_generator, &mut arrays);
    push_adam("opt_discriminator", &state.discriminator.params, &state.opt_discriminator, &mut arrays);
    let mut header = Header {
        format_version: FORMAT_VERSION.into(),
        kind: "train".into(),
        generator: state.generator.config,
        train: Some(state.config.clone()),
        metadata: Metadata {
            step: state.step,
            epoch: state.epoch,
            seed: state.config.seed,
            generator_params: state.generator.param_count(),
            discriminator_params: Some(state.discriminator.params.param_count()),
            adam_steps_generator: Some(state.opt_generator.t),
            adam_steps_discriminator: Some(state.opt_discriminator.t),
        },
        tensors: Vec::new(),
        blob_sha256: String::new(),
    };
    write_atomic(path, &mut header, &arrays)
}

/// Writes only the generator, for inference.
pub fn save_generator(generator: &Generator, metadata: Metadata, path: &Path) -> Result<()> {
    let mut arrays = Vec::new();
    push_store("generator", &generator.params, &mut arrays);
    let mut header = Header {
        format_version: FORMAT_VERSION.into(),
        kind: "generator".into(),
        generator: generator.config,
        train: None,
        metadata: Metadata { discriminator_params: None, adam_steps_discriminator: None, adam_steps_generator: None, ..metadata },
        tensors: Vec::new(),
        blob_sha256: String::new(),
    };
    write_atomic(path, &mut header, &arrays)
}

fn corrupt(path: &Path, what: impl std::fmt::Display) -> Error {
    Error::Checkpoint(format!("{} is not a valid {MAGIC} {FORMAT_VERSION} file: {what}", path.display()))
}

fn take_namespace(
    arrays: &mut HashMap<String, (Vec<usize>, Vec<f64>)>,
    prefix: &str,
) -> HashMap<String, (Vec<usize>, Vec<f64>)> {
    let keys: Vec<String> = arrays.keys().filter(|k| k.starts_with(&format!("{prefix}/"))).cloned().collect();
    keys.into_iter()
        .map(|k| {
            let v = arrays.remove(&k).expect("key listed");
            (k[prefix.len() + 1..].to_string(), v)
        })
        .collect()
}

fn load_adam(
    arrays: &mut HashMap<String, (Vec<usize>, Vec<f64>)>,
    prefix: &str,
    store: &ParamStore,
    lr: f64,
    t: u64,
) -> Result<Adam> {
    let mut adam = Adam::new(store, lr);
    adam.t = t;
    let mut ns = take_namespace(arrays, prefix);
    for (i, id) in store.ids().enumerate() {
        for (moment, target) in [("m", &mut adam.m[i]), ("v", &mut adam.v[i])] {
            let key = format!("{moment}/{}", store.name(id));
            let (shape, data) = ns.remove(&key).ok_or_else(|| Error::Checkpoint(format!("missing {prefix}/{key}")))?;
            if shape.as_slice() != store.tensors()[i].shape() {
                return Err(Error::Checkpoint(format!("shape mismatch for {prefix}/{key}")));
            }
            *target = data;
        }
    }
    if let Some(extra) = ns.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected tensor {prefix}/{extra}")));
    }
    Ok(adam)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(Error::io("trainer", path))?;
    let newline = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| corrupt(path, "missing format line"))?;
    let line = String::from_utf8_lossy(&bytes[..newline]).to_string();
    let mut parts = line.split(' ');
    if parts.next() != Some(MAGIC) {
        return Err(corrupt(path, format!("unknown magic in format line '{line}'")));
    }
    let version = parts.next().unwrap_or("");
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported checkpoint format version '{version}' (this build reads {FORMAT_VERSION})",
            path.display()
        )));
    }
    let rest = &bytes[newline + 1..];
    if rest.len() < 8 {
        return Err(corrupt(path, "truncated header length"));
    }
    let header_len = u64::from_le_bytes(rest[..8].try_into().expect("8 bytes")) as usize;
    let body = &rest[8..];
    if body.len() < header_len {
        return Err(corrupt(path, "truncated header"));
    }
    let header: Header = serde_json::from_slice(&body[..header_len]).map_err(|e| corrupt(path, format!("bad header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(corrupt(path, format!("header declares version '{}'", header.format_version)));
    }
    let blob = &body[header_len..];
    if hex(&Sha256::digest(blob)) != header.blob_sha256 {
        return Err(corrupt(path, "tensor data checksum mismatch"));
    }
    let mut arrays = HashMap::new();
    for e in &header.tensors {
        let (start, len) = (e.offset as usize, e.len as usize);
        if e.shape.iter().product::<usize>() != len || start + 8 * len > blob.len() || start % 8 != 0 {
            return Err(corrupt(path, format!("bad directory entry for {}", e.name)));
        }
        let data = blob[start..start + 8 * len].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        if arrays.insert(e.name.clone(), (e.shape.clone(), data)).is_some() {
            return Err(corrupt(path, format!("duplicate tensor {}", e.name)));
        }
    }

    let mut generator = init_generator(header.generator, 0)?;
    generator.params.load_arrays(&take_namespace(&mut arrays, "generator"))?;
    let meta = header.metadata;
    let (discriminator, opt_generator, opt_discriminator) = match (&header.kind[..], &header.train) {
        ("generator", _) => (None, None, None),
        ("train", Some(cfg)) => {
            let mut disc = init_discriminator(cfg.discriminator, 0)?;
            disc.params.load_arrays(&take_namespace(&mut arrays, "discriminator"))?;
            let og = load_adam(&mut arrays, "opt_generator", &generator.params, cfg.lr_generator, meta.adam_steps_generator.unwrap_or(0))?;
            let od = load_adam(&mut arrays, "opt_discriminator", &disc.params, cfg.lr_discriminator, meta.adam_steps_discriminator.unwrap_or(0))?;
            (Some(disc), Some(og), Some(od))
        }
        (kind, _) => return Err(corrupt(path, format!("unknown checkpoint kind '{kind}'"))),
    };
    if let Some(extra) = arrays.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected tensor {extra} in {}", path.display())));
    }
    Ok(Checkpoint {
        generator,
        discriminator,
        opt_generator,
        opt_discriminator,
        train: if header.kind == "train" { header.train } else { None },
        metadata: meta,
    })
}
