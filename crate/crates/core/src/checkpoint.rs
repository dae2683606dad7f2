//! Versioned checkpoints: a text manifest followed by a little-endian blob.
//!
//! ```text
//! afnet-checkpoint 1
//! step 120
//! epoch 3
//! rng <seed> <counter>
//! tensor model.stem.conv.weight f32 16,3,3,3 0 1728
//! tensor optim.stem.conv.weight f32 16,3,3,3 1728 1728
//! end
//! <blob>
//! ```
//!
//! Offsets and lengths are in bytes from the start of the blob.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::Module;
use crate::rng::RngState;
use crate::tensor::{DType, Element, Tensor};
use crate::training::Trainer;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "afnet-checkpoint";

/// Resumable training state besides the model tensors.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingState {
    pub step: u64,
    pub epoch: usize,
    pub rng_seed: u64,
    pub rng_counter: u64,
}

#[derive(Clone, Debug)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub state: TrainingState,
    pub tensors: Vec<TensorEntry>,
}

fn entry<T: Element>(name: String, shape: &[usize], data: &[T]) -> TensorEntry {
    let mut bytes = Vec::with_capacity(data.len() * T::DTYPE.size());
    for &v in data {
        v.write_le(&mut bytes);
    }
    TensorEntry { name, dtype: T::DTYPE, shape: shape.to_vec(), bytes }
}

impl Checkpoint {
    pub fn from_trainer<T: Element>(trainer: &Trainer<T>) -> Self {
        let mut tensors = Vec::new();
        for (name, t, _) in trainer.model.named_tensors() {
            tensors.push(entry(format!("model.{name}"), t.shape(), &t.data()));
        }
        let shapes: BTreeMap<String, Vec<usize>> = trainer.model.parameters().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
        for (name, v) in &trainer.optimizer.velocity {
            let shape = shapes.get(name).cloned().unwrap_or_else(|| vec![v.len()]);
            tensors.push(entry(format!("optim.{name}"), &shape, v));
        }
        Checkpoint {
            state: TrainingState {
                step: trainer.step,
                epoch: trainer.epoch,
                rng_seed: trainer.rng.seed(),
                rng_counter: trainer.rng.counter(),
            },
            tensors,
        }
    }

    fn get(&self, name: &str) -> Option<&TensorEntry> {
        self.tensors.iter().find(|e| e.name == name)
    }

    fn decode<T: Element>(e: &TensorEntry, shape: &[usize]) -> Result<Vec<T>> {
        if e.dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!("{}: stored as {}, expected {}", e.name, e.dtype.name(), T::DTYPE.name())));
        }
        if e.shape != shape {
            return Err(Error::Checkpoint(format!("{}: stored shape {:?}, model has {:?}", e.name, e.shape, shape)));
        }
        Ok(e.bytes.chunks(T::DTYPE.size()).map(T::read_le).collect())
    }

    /// Writes every model tensor; all must be present with matching shapes.
    pub fn restore_model<T: Element, M: Module<T>>(&self, model: &M) -> Result<()> {
        for (name, t, _) in model.named_tensors() {
            let key = format!("model.{name}");
            let e = self.get(&key).ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))?;
            t.set_data(&Self::decode::<T>(e, t.shape())?)?;
        }
        Ok(())
    }

    /// Restores model, optimizer, counters and the random stream.
    pub fn restore_trainer<T: Element>(&self, trainer: &mut Trainer<T>) -> Result<()> {
        self.restore_model(&trainer.model)?;
        let params: BTreeMap<String, Tensor<T>> = trainer.model.parameters().into_iter().collect();
        trainer.optimizer.velocity.clear();
        for e in self.tensors.iter().filter(|e| e.name.starts_with("optim.")) {
            let name = &e.name["optim.".len()..];
            let p = params.get(name).ok_or_else(|| Error::Checkpoint(format!("momentum for unknown parameter {name}")))?;
            trainer.optimizer.velocity.insert(name.to_string(), Self::decode::<T>(e, p.shape())?);
        }
        trainer.step = self.state.step;
        trainer.epoch = self.state.epoch;
        trainer.rng = RngState::from_parts(self.state.rng_seed, self.state.rng_counter);
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let s = &self.state;
        let mut head = format!(
            "{MAGIC} {FORMAT_VERSION}\nstep {}\nepoch {}\nrng {} {}\n",
            s.step, s.epoch, s.rng_seed, s.rng_counter
        );
        let mut offset = 0;
        for e in &self.tensors {
            let dims: Vec<String> = e.shape.iter().map(|d| d.to_string()).collect();
            head.push_str(&format!("tensor {} {} {} {} {}\n", e.name, e.dtype.name(), dims.join(","), offset, e.bytes.len()));
            offset += e.bytes.len();
        }
        head.push_str("end\n");
        let mut out = head.into_bytes();
        for e in &self.tensors {
            out.extend_from_slice(&e.bytes);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |d: String| Error::Checkpoint(d);
        let end = bytes
            .windows(5)
            .position(|w| w == b"\nend\n")
            .ok_or_else(|| bad("manifest terminator not found".into()))?;
        let head = std::str::from_utf8(&bytes[..end]).map_err(|_| bad("manifest is not UTF-8".into()))?;
        let blob = &bytes[end + 5..];
        let mut lines = head.lines();
        let mut fields = |key: &str| -> Result<Vec<String>> {
            let line = lines.next().ok_or_else(|| bad(format!("missing {key} line")))?;
            let mut parts = line.split(' ');
            if parts.next() != Some(key) {
                return Err(bad(format!("expected {key} line, got {line:?}")));
            }
            Ok(parts.map(str::to_string).collect())
        };
        let version = fields(MAGIC)?;
        if version.first().map(String::as_str) != Some(&FORMAT_VERSION.to_string()) {
            return Err(bad(format!("unsupported checkpoint version {version:?}, this build reads {FORMAT_VERSION}")));
        }
        let num = |v: &[String], i: usize| -> Result<u64> {
            v.get(i).and_then(|s| s.parse().ok()).ok_or_else(|| bad(format!("bad number in {v:?}")))
        };
        let step = num(&fields("step")?, 0)?;
        let epoch = num(&fields("epoch")?, 0)? as usize;
        let rng = fields("rng")?;
        let state = TrainingState { step, epoch, rng_seed: num(&rng, 0)?, rng_counter: num(&rng, 1)? };
        let mut tensors = Vec::new();
        for line in lines {
            let p: Vec<&str> = line.split(' ').collect();
            if p.len() != 6 || p[0] != "tensor" {
                return Err(bad(format!("malformed manifest line {line:?}")));
            }
            let dtype = DType::parse(p[2]).ok_or_else(|| bad(format!("unknown dtype {}", p[2])))?;
            let shape = p[3].split(',').map(|d| d.parse::<usize>()).collect::<std::result::Result<Vec<_>, _>>().map_err(|_| bad(format!("bad shape {}", p[3])))?;
            let (off, len): (usize, usize) = (p[4].parse().map_err(|_| bad(line.into()))?, p[5].parse().map_err(|_| bad(line.into()))?);
            if len != shape.iter().product::<usize>() * dtype.size() || off + len > blob.len() {
                return Err(bad(format!("tensor {} has an inconsistent extent", p[1])));
            }
            tensors.push(TensorEntry { name: p[1].to_string(), dtype, shape, bytes: blob[off..off + len].to_vec() });
        }
        Ok(Checkpoint { state, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
