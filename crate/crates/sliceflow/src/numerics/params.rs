//! Named learnable arrays with paired gradient buffers, plus the binary
//! checkpoint container ("IFCK") used by every network in the toolkit.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numerics::tape::{Grads, Tape, Var};
use crate::numerics::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"IFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Ordered map of parameter name -> (value, grad). Iteration follows
/// insertion order so optimizer state lines up across runs.
#[derive(Debug, Clone)]
pub struct ParamStore {
    names: Vec<String>,
    index: HashMap<String, usize>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
    pub rng_seed: u64,
}

impl ParamStore {
    pub fn new(rng_seed: u64) -> Self {
        ParamStore {
            names: Vec::new(),
            index: HashMap::new(),
            values: Vec::new(),
            grads: Vec::new(),
            rng_seed,
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        debug_assert!(!self.index.contains_key(name), "duplicate entry {name}");
        let grad = Tensor::zeros(value.shape());
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.values.push(value);
        self.grads.push(grad);
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn value(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.values[i])
    }

    pub fn value_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = *self.index.get(name)?;
        Some(&mut self.values[i])
    }

    pub fn value_at(&self, i: usize) -> &Tensor {
        &self.values[i]
    }

    pub fn value_at_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.values[i]
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.grads[i])
    }

    pub fn grad_at(&self, i: usize) -> &Tensor {
        &self.grads[i]
    }

    pub fn grad_at_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.grads[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor, &Tensor)> {
        (0..self.names.len()).map(|i| (self.names[i].as_str(), &self.values[i], &self.grads[i]))
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    /// Euclidean norm of every gradient buffer, by entry.
    pub fn grad_norms(&self) -> Vec<(String, f32)> {
        self.names
            .iter()
            .zip(&self.grads)
            .map(|(n, g)| {
                let s: f64 = g.data().iter().map(|&v| (v as f64) * (v as f64)).sum();
                (n.clone(), s.sqrt() as f32)
            })
            .collect()
    }

    // ----- tape glue ----------------------------------------------------

    /// Register every entry as a leaf on `tape`, in insertion order.
    pub fn leaves(&self, tape: &mut Tape) -> Vec<Var> {
        self.values.iter().map(|v| tape.leaf(v.clone())).collect()
    }

    /// Accumulate tape gradients (scaled) back into the grad buffers.
    /// `leaves` must come from [`ParamStore::leaves`] on the same tape.
    pub fn accumulate_grads(&mut self, tape: &Tape, leaves: &[Var], grads: &Grads, scale: f32) {
        debug_assert_eq!(leaves.len(), self.values.len());
        for (i, &leaf) in leaves.iter().enumerate() {
            if let Some(g) = grads.get_ref(leaf) {
                let _ = tape; // leaves fix the shape; nothing else needed
                for (dst, src) in self.grads[i].data_mut().iter_mut().zip(g.data()) {
                    *dst += src * scale;
                }
            }
        }
    }

    // ----- initialization ----------------------------------------------

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.rng_seed)
    }

    // ----- checkpoint container -----------------------------------------

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
        w.write_u32::<LittleEndian>(CHECKPOINT_VERSION).map_err(io)?;
        for (name, value, _) in self.iter() {
            w.write_u32::<LittleEndian>(name.len() as u32).map_err(io)?;
            w.write_all(name.as_bytes()).map_err(io)?;
            w.write_u32::<LittleEndian>(value.shape().len() as u32)
                .map_err(io)?;
            for &d in value.shape() {
                w.write_u32::<LittleEndian>(d as u32).map_err(io)?;
            }
            for &v in value.data() {
                w.write_f32::<LittleEndian>(v).map_err(io)?;
            }
        }
        w.flush().map_err(io)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::CheckpointFormat(format!(
                "bad magic {:?} in {}",
                magic,
                path.display()
            )));
        }
        let version = r
            .read_u32::<LittleEndian>()
            .map_err(|e| Error::io(path, e))?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointFormat(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let mut store = ParamStore::new(0);
        loop {
            let name_len = match r.read_u32::<LittleEndian>() {
                Ok(n) => n as usize,
                Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
                Err(e) => return Err(Error::io(path, e)),
            };
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes).map_err(|e| Error::io(path, e))?;
            let name = String::from_utf8(name_bytes)
                .map_err(|e| Error::CheckpointFormat(format!("entry name not UTF-8: {e}")))?;
            let rank = r
                .read_u32::<LittleEndian>()
                .map_err(|e| Error::io(path, e))? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.read_u32::<LittleEndian>().map_err(|e| Error::io(path, e))? as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = vec![0.0f32; n];
            r.read_f32_into::<LittleEndian>(&mut data)
                .map_err(|e| Error::io(path, e))?;
            let tensor = Tensor::new(shape, data)
                .map_err(|e| Error::CheckpointFormat(format!("entry {name}: {e}")))?;
            store.insert(&name, tensor);
        }
        Ok(store)
    }

    /// Load a checkpoint and verify it matches this store's entry shapes.
    pub fn load_matching(&self, path: &Path) -> Result<Self> {
        let loaded = Self::load(path)?;
        for (name, value, _) in self.iter() {
            match loaded.value(name) {
                Some(v) if v.shape() == value.shape() => {}
                Some(v) => {
                    return Err(Error::CheckpointShape {
                        name: name.to_string(),
                        found: v.shape().to_vec(),
                        expected: value.shape().to_vec(),
                    })
                }
                None => {
                    return Err(Error::CheckpointFormat(format!(
                        "checkpoint is missing entry {name}"
                    )))
                }
            }
        }
        Ok(loaded)
    }
}

/// A store registered on a tape: every entry has a leaf `Var`, addressable
/// by name.
pub struct BoundParams<'a> {
    store: &'a ParamStore,
    vars: Vec<Var>,
}

impl<'a> BoundParams<'a> {
    pub fn bind(store: &'a ParamStore, tape: &mut Tape) -> Self {
        let vars = store.leaves(tape);
        BoundParams { store, vars }
    }

    pub fn var(&self, name: &str) -> Var {
        let i = self
            .store
            .position(name)
            .unwrap_or_else(|| panic!("no parameter entry named {name}"));
        self.vars[i]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }
}

/// He-normal tensor: std = gain * sqrt(2 / fan_in), bias entries use zeros.
pub fn he_normal(shape: &[usize], fan_in: usize, gain: f32, rng: &mut ChaCha8Rng) -> Tensor {
    let std = gain * (2.0 / fan_in as f32).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n)
        .map(|_| {
            let z: f32 = rng.sample(StandardNormal);
            z * std
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}
