//! Named parameter storage, initialization, and the per-forward binding of
//! stored tensors into a computation graph.

use std::collections::HashMap;

use echodepth_tensor::{BatchNormMode, Graph, RunningStats, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Optimized by gradient descent.
    Weight,
    /// State carried between forward passes (normalization statistics).
    Buffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub kind: ParamKind,
    /// Frozen weights are bound as constants and never updated.
    pub frozen: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn insert(&mut self, name: String, value: Tensor, kind: ParamKind) -> ParamId {
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param {
            name,
            value,
            kind,
            frozen: false,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.params[id.0].frozen = frozen;
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Number of scalar weights (buffers excluded).
    pub fn weight_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind == ParamKind::Weight)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Replaces stored values by name. Every stored name must be present with
    /// a matching shape and no extra names are allowed.
    pub fn load(&mut self, values: Vec<(String, Tensor)>) -> Result<()> {
        let mut seen = vec![false; self.params.len()];
        for (name, t) in values {
            let i = *self
                .index
                .get(&name)
                .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
            if self.params[i].value.shape() != t.shape() {
                return Err(Error::Config(format!(
                    "parameter {name}: shape {:?} does not match {:?}",
                    t.shape(),
                    self.params[i].value.shape()
                )));
            }
            if seen[i] {
                return Err(Error::Config(format!("duplicate parameter {name}")));
            }
            seen[i] = true;
            self.params[i].value = t;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Config(format!("missing parameter {}", self.params[i].name)));
        }
        Ok(())
    }
}

/// Scoped constructor for parameters, drawing weights from one seeded stream.
pub struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Builder {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn scope<'b>(&'b mut self, name: &str) -> Builder<'b> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Builder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    /// Uniform in `±1/sqrt(fan_in)`.
    pub fn weight(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let t = Tensor::uniform(shape, bound, self.rng);
        self.store.insert(self.full_name(name), t, ParamKind::Weight)
    }

    pub fn constant(&mut self, name: &str, value: Tensor) -> ParamId {
        self.store.insert(self.full_name(name), value, ParamKind::Weight)
    }

    pub fn buffer(&mut self, name: &str, value: Tensor) -> ParamId {
        self.store.insert(self.full_name(name), value, ParamKind::Buffer)
    }
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// One forward pass: a fresh graph plus lazily bound parameters. The store
/// is only read here, so evaluation can share it across threads.
pub struct Ctx<'a> {
    pub g: Graph,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    training: bool,
    stat_updates: Vec<(ParamId, ParamId, RunningStats)>,
}

impl<'a> Ctx<'a> {
    pub fn new(store: &'a ParamStore, training: bool) -> Self {
        Ctx {
            g: Graph::new(),
            store,
            bound: vec![None; store.len()],
            training,
            stat_updates: Vec::new(),
        }
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Graph node for a stored weight. Gradients are tracked in training
    /// mode unless the weight is frozen.
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let param = self.store.get(id);
        let v = if self.training && !param.frozen && param.kind == ParamKind::Weight {
            self.g.param(param.value.clone())
        } else {
            self.g.input(param.value.clone())
        };
        self.bound[id.0] = Some(v);
        v
    }

    pub fn batch_norm(&mut self, x: Var, gamma: ParamId, beta: Option<ParamId>, mean: ParamId, var: ParamId) -> Result<Var> {
        let mut stats = RunningStats {
            mean: self.store.value(mean).data().to_vec(),
            var: self.store.value(var).data().to_vec(),
        };
        let gv = self.p(gamma);
        let bv = match beta {
            Some(b) => self.p(b),
            None => self.g.input(Tensor::zeros(&[stats.mean.len()])),
        };
        let mode = BatchNormMode {
            training: self.training,
            ..BatchNormMode::default()
        };
        let y = self.g.batch_norm(x, gv, bv, &mut stats, mode)?;
        if self.training {
            self.stat_updates.push((mean, var, stats));
        }
        Ok(y)
    }

    /// Gradients of every bound trainable weight, after `g.backward`.
    pub fn gradients(&mut self) -> Vec<(ParamId, Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.bound.iter().enumerate() {
            if let Some(v) = *b {
                if self.g.requires_grad(v) {
                    let grad = self
                        .g
                        .take_grad(v)
                        .unwrap_or_else(|| Tensor::zeros(self.g.shape(v)));
                    out.push((ParamId(i), grad));
                }
            }
        }
        out
    }

    /// Running-statistic updates recorded during a training forward pass.
    pub fn take_stat_updates(&mut self) -> Vec<(ParamId, ParamId, RunningStats)> {
        std::mem::take(&mut self.stat_updates)
    }
}

/// Writes recorded running statistics into the store.
pub fn apply_stat_updates(store: &mut ParamStore, updates: Vec<(ParamId, ParamId, RunningStats)>) -> Result<()> {
    for (mean, var, stats) in updates {
        let c = stats.mean.len();
        *store.value_mut(mean) = Tensor::new(&[c], stats.mean)?;
        *store.value_mut(var) = Tensor::new(&[c], stats.var)?;
    }
    Ok(())
}
