use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{AdError, Result};
use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

static NEXT_SET_ID: AtomicU64 = AtomicU64::new(1);

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
struct Entry<T> {
    name: String,
    value: Tensor<T>,
    grad: Vec<T>,
    trainable: bool,
}

/// Named trainable tensors (plus non-trainable buffers such as batch-norm
/// running statistics) with gradient accumulators.
#[derive(Debug)]
pub struct ParamSet<T: Real> {
    id: u64,
    label: String,
    entries: Vec<Entry<T>>,
    index: HashMap<String, usize>,
    frozen: bool,
    accumulated: Vec<u64>,
}

impl<T: Real> Clone for ParamSet<T> {
    fn clone(&self) -> Self {
        Self {
            id: NEXT_SET_ID.fetch_add(1, Ordering::Relaxed),
            label: self.label.clone(),
            entries: self.entries.clone(),
            index: self.index.clone(),
            frozen: self.frozen,
            accumulated: Vec::new(),
        }
    }
}

/// Graph handles for every entry of a [`ParamSet`], created once per graph.
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new(label: impl Into<String>) -> Self {
        Self {
            id: NEXT_SET_ID.fetch_add(1, Ordering::Relaxed),
            label: label.into(),
            entries: Vec::new(),
            index: HashMap::new(),
            frozen: false,
            accumulated: Vec::new(),
        }
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    fn insert(&mut self, name: &str, value: Tensor<T>, trainable: bool) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(AdError::DuplicateParam(name.to_string()));
        }
        let grad = vec![T::zero(); value.len()];
        self.entries.push(Entry {
            name: name.to_string(),
            value,
            grad,
            trainable,
        });
        self.index.insert(name.to_string(), self.entries.len() - 1);
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn add(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        self.insert(name, value, true)
    }

    /// Non-trainable state stored alongside the parameters.
    pub fn add_buffer(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        self.insert(name, value, false)
    }

    pub fn id_of(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| AdError::UnknownParam(name.to_string()))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &[T] {
        &self.entries[id.0].grad
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    /// A frozen set binds as constants: no gradient reaches it.
    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn bind(&self, g: &mut Graph<T>) -> Binding {
        let vars = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| {
                g.param_leaf(e.value.clone(), self.id, i, e.trainable && !self.frozen)
            })
            .collect();
        Binding { vars }
    }

    /// Add the gradients a finished backward pass left on this set's
    /// bindings. Each graph may be accumulated at most once.
    pub fn accumulate(&mut self, g: &Graph<T>) -> Result<()> {
        if self.accumulated.contains(&g.id()) {
            return Err(AdError::DoubleAccumulation(self.label.clone()));
        }
        self.accumulated.push(g.id());
        for (set, index, grad) in g.param_nodes() {
            if set == self.id {
                for (d, &s) in self.entries[index].grad.iter_mut().zip(grad) {
                    *d += s;
                }
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad.iter_mut().for_each(|g| *g = T::zero());
        }
        self.accumulated.clear();
    }

    pub(crate) fn entries_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>, &mut Vec<T>, bool)> {
        self.entries
            .iter_mut()
            .map(|e| (e.name.as_str(), &mut e.value, &mut e.grad, e.trainable))
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.len()).sum()
    }

    /// `‖Θ‖²` over trainable entries.
    pub fn sq_norm(&self) -> T {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.sq_norm())
            .sum()
    }

    pub fn grad_sq_norm(&self) -> T {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .flat_map(|e| e.grad.iter())
            .map(|&g| g * g)
            .sum()
    }

    pub fn scale_grads(&mut self, s: T) {
        for e in &mut self.entries {
            e.grad.iter_mut().for_each(|g| *g *= s);
        }
    }

    /// Bitwise equality of all values (used to verify freezing).
    pub fn values_equal(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.name == b.name && a.value == b.value)
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        let mut out = ParamSet::new(self.label.clone());
        for e in &self.entries {
            out.insert(&e.name, e.value.cast(), e.trainable).expect("names unique");
        }
        out.frozen = self.frozen;
        out
    }

    /// Write `manifest.json` and `params.f32` into `dir`.
    pub fn save(&self, dir: &Path, meta: serde_json::Value) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut offset = 0;
        let mut params = Vec::with_capacity(self.entries.len());
        let mut bytes = Vec::new();
        for e in &self.entries {
            params.push(ParamRecord {
                name: e.name.clone(),
                shape: e.value.shape().to_vec(),
                trainable: e.trainable,
                offset,
            });
            offset += e.value.len();
            for v in e.value.data() {
                bytes.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
            }
        }
        let manifest = CheckpointManifest {
            format_version: CHECKPOINT_VERSION,
            label: self.label.clone(),
            total: offset,
            params,
            meta,
        };
        fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        fs::write(dir.join("params.f32"), bytes)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<(Self, serde_json::Value)> {
        let manifest: CheckpointManifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
        if manifest.format_version != CHECKPOINT_VERSION {
            return Err(AdError::Format(format!(
                "unsupported checkpoint version {}",
                manifest.format_version
            )));
        }
        let bytes = fs::read(dir.join("params.f32"))?;
        if bytes.len() != manifest.total * 4 {
            return Err(AdError::Format(format!(
                "params.f32 holds {} bytes, manifest expects {}",
                bytes.len(),
                manifest.total * 4
            )));
        }
        let mut set = ParamSet::new(manifest.label);
        for p in &manifest.params {
            let n: usize = p.shape.iter().product();
            if p.offset + n > manifest.total {
                return Err(AdError::Format(format!("parameter `{}` exceeds params.f32", p.name)));
            }
            let data = bytes[p.offset * 4..(p.offset + n) * 4]
                .chunks_exact(4)
                .map(|c| T::from_f32(f32::from_le_bytes([c[0], c[1], c[2], c[3]])).unwrap())
                .collect();
            set.insert(&p.name, Tensor::new(&p.shape, data), p.trainable)?;
        }
        Ok((set, manifest.meta))
    }
}

#[derive(Serialize, Deserialize)]
struct ParamRecord {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    format_version: u32,
    label: String,
    total: usize,
    params: Vec<ParamRecord>,
    #[serde(default)]
    meta: serde_json::Value,
}
