//! Checkpoint files: `<path>` holds a JSON header with architecture specs,
//! `<path>.params.bin` the concatenated little-endian `f32` parameters.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::discriminator::{Discriminator, DiscriminatorSpec};
use super::generator::{Generator, GeneratorSpec};
use super::params::ParamSet;
use super::segmentor::{Segmentor, SegmentorSpec};
use super::tensor::Tensor;
use crate::data::{le_bytes_to_f32, read_json, read_payload, write_atomic, write_json};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ArchSpec {
    Segmentor(SegmentorSpec),
    Generator(GeneratorSpec),
    Discriminator(DiscriminatorSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the blob, in `f32` elements.
    pub offset: usize,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkEntry {
    pub role: String,
    pub arch: ArchSpec,
    pub tensors: Vec<TensorEntry>,
}

/// Training position recorded alongside the weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub word_pos: u128,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub kind: String,
    pub step: u64,
    pub rng: RngState,
    #[serde(default)]
    pub metadata: serde_json::Value,
    pub networks: Vec<NetworkEntry>,
}

/// Location and summary of a saved checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRef {
    pub path: PathBuf,
    pub kind: String,
    pub step: u64,
    pub rng: RngState,
}

pub struct NamedNet<'a> {
    pub role: &'a str,
    pub arch: ArchSpec,
    pub params: &'a ParamSet,
}

pub fn blob_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".params.bin");
    PathBuf::from(s)
}

pub fn save_checkpoint(
    path: &Path,
    kind: &str,
    step: u64,
    rng: RngState,
    metadata: serde_json::Value,
    nets: &[NamedNet<'_>],
) -> Result<CheckpointRef> {
    let mut blob = Vec::new();
    let mut offset = 0;
    let mut networks = Vec::with_capacity(nets.len());
    for net in nets {
        let p = net.params;
        let tensors = p
            .names
            .iter()
            .zip(&p.values)
            .zip(&p.trainable)
            .map(|((name, v), &trainable)| {
                let e = TensorEntry {
                    name: name.clone(),
                    shape: v.shape().to_vec(),
                    offset,
                    trainable,
                };
                offset += v.len();
                e
            })
            .collect();
        blob.extend_from_slice(&p.blob());
        networks.push(NetworkEntry {
            role: net.role.to_string(),
            arch: net.arch.clone(),
            tensors,
        });
    }
    let header = CheckpointHeader {
        format_version: CHECKPOINT_VERSION,
        kind: kind.to_string(),
        step,
        rng,
        metadata,
        networks,
    };
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    // Blob first so a readable header always points at a complete payload.
    write_atomic(&blob_path(path), &blob)?;
    write_json(path, &header)?;
    Ok(CheckpointRef {
        path: path.to_path_buf(),
        kind: header.kind,
        step,
        rng,
    })
}

pub struct LoadedCheckpoint {
    pub header: CheckpointHeader,
    params: Vec<ParamSet>,
}

impl LoadedCheckpoint {
    pub fn reference(&self, path: &Path) -> CheckpointRef {
        CheckpointRef {
            path: path.to_path_buf(),
            kind: self.header.kind.clone(),
            step: self.header.step,
            rng: self.header.rng,
        }
    }

    fn find(&self, role: &str) -> Result<(&ArchSpec, &ParamSet)> {
        self.header
            .networks
            .iter()
            .zip(&self.params)
            .find(|(n, _)| n.role == role)
            .map(|(n, p)| (&n.arch, p))
            .ok_or_else(|| Error::InvalidArgument(format!("checkpoint has no network '{role}'")))
    }

    pub fn segmentor(&self, role: &str) -> Result<Segmentor> {
        match self.find(role)? {
            (ArchSpec::Segmentor(spec), p) => {
                let mut net = Segmentor::new(spec.clone(), 0)?;
                net.params.load_from(p.clone())?;
                Ok(net)
            }
            _ => Err(Error::InvalidArgument(format!("'{role}' is not a segmentor"))),
        }
    }

    pub fn generator(&self, role: &str) -> Result<Generator> {
        match self.find(role)? {
            (ArchSpec::Generator(spec), p) => {
                let mut net = Generator::new(spec.clone(), 0)?;
                net.params.load_from(p.clone())?;
                Ok(net)
            }
            _ => Err(Error::InvalidArgument(format!("'{role}' is not a generator"))),
        }
    }

    pub fn discriminator(&self, role: &str) -> Result<Discriminator> {
        match self.find(role)? {
            (ArchSpec::Discriminator(spec), p) => {
                let mut net = Discriminator::new(spec.clone(), 0)?;
                net.params.load_from(p.clone())?;
                Ok(net)
            }
            _ => Err(Error::InvalidArgument(format!("'{role}' is not a discriminator"))),
        }
    }
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let header: CheckpointHeader = read_json(path)?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(Error::FormatVersion {
            found: header.format_version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let total: usize = header
        .networks
        .iter()
        .flat_map(|n| &n.tensors)
        .map(|t| t.shape.iter().product::<usize>())
        .sum();
    let bp = blob_path(path);
    let floats = le_bytes_to_f32(&read_payload(&bp, total * 4)?);
    let mut params = Vec::with_capacity(header.networks.len());
    for net in &header.networks {
        let mut set = ParamSet {
            names: Vec::new(),
            values: Vec::new(),
            trainable: Vec::new(),
        };
        for t in &net.tensors {
            let n: usize = t.shape.iter().product();
            let end = t.offset + n;
            if end > floats.len() {
                return Err(Error::SizeMismatch {
                    path: bp.clone(),
                    expected: end * 4,
                    found: floats.len() * 4,
                });
            }
            set.names.push(t.name.clone());
            set.values.push(Tensor::new(t.shape.clone(), floats[t.offset..end].to_vec()));
            set.trainable.push(t.trainable);
        }
        params.push(set);
    }
    Ok(LoadedCheckpoint { header, params })
}
