//! Tensor container and training checkpoints.
//!
//! Layout: 8-byte magic `VQLTCKPT`, manifest length as u64 little-endian,
//! UTF-8 JSON manifest, then the raw little-endian f32 data of every tensor
//! back to back. Offsets in the manifest are relative to the data section.

use std::io::Write;
use std::path::Path;

use crate::grad::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Stage;
use crate::pipeline::config::Config;

pub const MAGIC: &[u8; 8] = b"VQLTCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub nbytes: u64,
    pub crc32: u32,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    meta: serde_json::Value,
}

/// Named f32 tensors plus free-form JSON metadata.
#[derive(Clone, Debug, Default)]
pub struct Container {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

fn bad(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Checkpoint(format!("{}: {msg}", path.display()))
}

impl Container {
    pub fn tensor(&self, name: &str) -> Option<Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t.clone())
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.tensors.push((name.into(), t));
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut data = Vec::new();
        for (name, t) in &self.tensors {
            let start = data.len();
            for v in t.data() {
                data.extend_from_slice(&v.to_le_bytes());
            }
            entries.push(TensorEntry {
                name: name.clone(),
                dtype: "float32".into(),
                shape: t.shape().to_vec(),
                offset: start as u64,
                nbytes: (data.len() - start) as u64,
                crc32: crc32fast::hash(&data[start..]),
            });
        }
        let manifest = serde_json::to_vec(&Manifest {
            format_version: FORMAT_VERSION,
            tensors: entries,
            meta: self.meta.clone(),
        })
        .expect("manifest serializes");
        let mut out = Vec::with_capacity(16 + manifest.len() + data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&data);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad(path, "not a checkpoint container (bad magic)"));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let data_start = 16usize
            .checked_add(mlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad(path, "truncated manifest"))?;
        let manifest: Manifest =
            serde_json::from_slice(&bytes[16..data_start]).map_err(|e| bad(path, format!("manifest: {e}")))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(bad(
                path,
                format!("format_version {} (expected {FORMAT_VERSION})", manifest.format_version),
            ));
        }
        let data = &bytes[data_start..];
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in &manifest.tensors {
            if e.dtype != "float32" {
                return Err(bad(path, format!("{}: dtype {}", e.name, e.dtype)));
            }
            let numel: usize = e.shape.iter().product();
            if e.nbytes != 4 * numel as u64 {
                return Err(bad(
                    path,
                    format!("{}: {} bytes for shape {:?}", e.name, e.nbytes, e.shape),
                ));
            }
            let (lo, hi) = (e.offset as usize, (e.offset + e.nbytes) as usize);
            if hi > data.len() || lo > hi {
                return Err(bad(path, format!("{}: truncated data", e.name)));
            }
            let raw = &data[lo..hi];
            if crc32fast::hash(raw) != e.crc32 {
                return Err(bad(path, format!("{}: checksum mismatch", e.name)));
            }
            let vals = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push((e.name.clone(), Tensor::from_vec(e.shape.clone(), vals)));
        }
        Ok(Self {
            meta: manifest.meta,
            tensors,
        })
    }

    /// Write through a temporary file in the same directory, then rename.
    pub fn write(&self, path: &Path) -> Result<()> {
        let dir = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = std::path::PathBuf::from(tmp);
        {
            let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
            f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        }
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => bad(path, "no such file"),
            _ => Error::io(path, e),
        })?;
        Self::from_bytes(&bytes, path)
    }
}

/// ChaCha8 position: 32-byte seed, stream, and word position.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &rand_chacha::ChaCha8Rng) -> Self {
        let seed: String = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        Self {
            seed,
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<rand_chacha::ChaCha8Rng> {
        use rand::SeedableRng;
        let err = || Error::Checkpoint(format!("invalid rng state {self:?}"));
        if self.seed.len() != 64 {
            return Err(err());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| err())?;
        }
        let mut rng = rand_chacha::ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| err())?);
        Ok(rng)
    }
}

/// Adam state keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct OptimizerState {
    pub step: u64,
    pub moments: Vec<(String, Tensor<f32>, Tensor<f32>)>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    kind: String,
    stage: Stage,
    iteration: u64,
    config: Config,
    rng: RngState,
    codebook_usage: Vec<u64>,
    optimizer_steps: Vec<(String, u64)>,
    #[serde(default)]
    sampler: SamplerState,
}

const KIND: &str = "vqlight-checkpoint";

/// Position in the shuffled training order.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerState {
    pub order: Vec<usize>,
    pub cursor: usize,
}

/// Everything needed to resume training or run inference.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub stage: Stage,
    pub iteration: u64,
    pub config: Config,
    pub rng: RngState,
    pub codebook_usage: Vec<u64>,
    pub sampler: SamplerState,
    pub params: Vec<(String, Tensor<f32>)>,
    pub optimizers: Vec<(String, OptimizerState)>,
}

impl Checkpoint {
    pub fn to_container(&self) -> Container {
        let meta = CheckpointMeta {
            kind: KIND.into(),
            stage: self.stage,
            iteration: self.iteration,
            config: self.config.clone(),
            rng: self.rng.clone(),
            codebook_usage: self.codebook_usage.clone(),
            optimizer_steps: self.optimizers.iter().map(|(n, o)| (n.clone(), o.step)).collect(),
            sampler: self.sampler.clone(),
        };
        let mut c = Container {
            meta: serde_json::to_value(meta).expect("meta serializes"),
            tensors: self.params.clone(),
        };
        for (opt, state) in &self.optimizers {
            for (name, m, v) in &state.moments {
                c.push(format!("optim.{opt}.m.{name}"), m.clone());
                c.push(format!("optim.{opt}.v.{name}"), v.clone());
            }
        }
        c
    }

    pub fn from_container(c: Container, path: &Path) -> Result<Self> {
        let meta: CheckpointMeta =
            serde_json::from_value(c.meta.clone()).map_err(|e| bad(path, format!("metadata: {e}")))?;
        if meta.kind != KIND {
            return Err(bad(path, format!("kind {:?}", meta.kind)));
        }
        meta.config.validate()?;
        let mut params = Vec::new();
        let mut optimizers: Vec<(String, OptimizerState)> = meta
            .optimizer_steps
            .iter()
            .map(|(n, s)| {
                (
                    n.clone(),
                    OptimizerState {
                        step: *s,
                        moments: Vec::new(),
                    },
                )
            })
            .collect();
        let mut pending_m: Vec<(String, String, Tensor<f32>)> = Vec::new();
        for (name, t) in c.tensors {
            let Some(rest) = name.strip_prefix("optim.") else {
                params.push((name, t));
                continue;
            };
            let (opt, rest) = rest
                .split_once('.')
                .ok_or_else(|| bad(path, format!("tensor {name}")))?;
            if let Some(p) = rest.strip_prefix("m.") {
                pending_m.push((opt.to_string(), p.to_string(), t));
            } else if let Some(p) = rest.strip_prefix("v.") {
                let i = pending_m
                    .iter()
                    .position(|(o, q, _)| o == opt && q == p)
                    .ok_or_else(|| bad(path, format!("{name} without first moment")))?;
                let (_, _, m) = pending_m.swap_remove(i);
                let slot = optimizers
                    .iter_mut()
                    .find(|(n, _)| n == opt)
                    .ok_or_else(|| bad(path, format!("{name}: unknown optimizer")))?;
                slot.1.moments.push((p.to_string(), m, t));
            } else {
                return Err(bad(path, format!("tensor {name}")));
            }
        }
        if let Some((_, p, _)) = pending_m.first() {
            return Err(bad(path, format!("{p} has no second moment")));
        }
        Ok(Self {
            stage: meta.stage,
            iteration: meta.iteration,
            config: meta.config,
            rng: meta.rng,
            codebook_usage: meta.codebook_usage,
            sampler: meta.sampler,
            params,
            optimizers,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(Container::read(path)?, path)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<f32>> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}
