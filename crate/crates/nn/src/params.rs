use std::collections::HashMap;
use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{NnError, Result};
use crate::graph::Gradients;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub trainable: bool,
}

/// Named trainable tensors. Insertion order is the canonical order used by
/// checkpoints and the optimizer.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(NnError::InvalidArgument {
                op: "param",
                reason: format!("duplicate parameter name `{name}`"),
            });
        }
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            grad: Tensor::zeros(value.shape()),
            value,
            trainable: true,
        });
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Adds the parameter gradients of one backward sweep.
    pub fn accumulate(&mut self, grads: &Gradients<T>) {
        for (id, g) in grads.params() {
            let p = &mut self.params[id.0];
            for (d, s) in p.grad.data_mut().iter_mut().zip(g.data()) {
                *d = *d + *s;
            }
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                    trainable: p.trainable,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Writes all parameter values as 32-bit little-endian floats.
    ///
    /// Layout: magic `CRFCKPT1`, u32 count, then per parameter: u32 name
    /// length, UTF-8 name, u32 rank, rank × u32 dims, values.
    pub fn write_checkpoint<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for p in &self.params {
            out.write_all(&(p.name.len() as u32).to_le_bytes())?;
            out.write_all(p.name.as_bytes())?;
            out.write_all(&(p.value.shape().len() as u32).to_le_bytes())?;
            for &d in p.value.shape() {
                out.write_all(&(d as u32).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(p.value.len() * 4);
            for v in p.value.data() {
                buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
            out.write_all(&buf)?;
        }
        Ok(())
    }

    /// Loads values by name. Every parameter of `self` must be present with
    /// the same shape; extra entries in the file are an error.
    pub fn read_checkpoint<R: Read>(&mut self, input: R) -> Result<()> {
        let entries = read_checkpoint_entries(input)?;
        if entries.len() != self.params.len() {
            return Err(NnError::Checkpoint(format!(
                "checkpoint holds {} parameters, network has {}",
                entries.len(),
                self.params.len()
            )));
        }
        for (name, shape, values) in entries {
            let id = self
                .id(&name)
                .ok_or_else(|| NnError::Checkpoint(format!("unknown parameter `{name}`")))?;
            let p = &mut self.params[id.0];
            if p.value.shape() != shape.as_slice() {
                return Err(NnError::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, checkpoint has {shape:?}",
                    p.value.shape()
                )));
            }
            for (d, v) in p.value.data_mut().iter_mut().zip(values) {
                *d = T::of(v as f64);
            }
        }
        Ok(())
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"CRFCKPT1";

pub type CheckpointEntry = (String, Vec<usize>, Vec<f32>);

pub fn read_checkpoint_entries<R: Read>(mut input: R) -> Result<Vec<CheckpointEntry>> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(NnError::Checkpoint("bad magic".into()));
    }
    let count = read_u32(&mut input)? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(&mut input)? as usize;
        let mut name = vec![0u8; len];
        input.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| NnError::Checkpoint("parameter name is not UTF-8".into()))?;
        let rank = read_u32(&mut input)? as usize;
        if rank > crate::tensor::MAX_RANK {
            return Err(NnError::Checkpoint(format!("parameter `{name}` has rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| read_u32(&mut input).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 4];
        input.read_exact(&mut raw)?;
        let values = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        entries.push((name, shape, values));
    }
    Ok(entries)
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// He-normal initialisation: N(0, 2 / fan_in).
pub fn he_normal<T: Real, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("positive std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::of(dist.sample(rng))).collect();
    Tensor::from_vec(shape, data).expect("shape matches")
}
