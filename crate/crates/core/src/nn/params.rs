use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{BatchStats, Gradients, Shape, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    value: Tensor,
    trainable: bool,
}

/// Named parameter and buffer storage. Trainable entries receive gradients;
/// buffers (running statistics) are only persisted.
#[derive(Clone, Debug)]
pub struct ParamStore {
    seed: u64,
    entries: Vec<Entry>,
    by_name: HashMap<String, ParamId>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            seed,
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    /// Generator for one named parameter. Streams depend only on the seed
    /// and the name, so the same layer gets the same initial weights no
    /// matter which other modules are enabled.
    fn rng_for(&self, name: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ fnv1a(name.as_bytes()))
    }

    pub fn insert(&mut self, name: &str, value: Tensor, trainable: bool) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::config(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.entries.len());
        self.entries.push(Entry {
            name: name.to_owned(),
            value,
            trainable,
        });
        self.by_name.insert(name.to_owned(), id);
        Ok(id)
    }

    /// Conv kernel `(c_out, c_in, k, k)` drawn from `U(-b, b)`, `b = sqrt(1/fan_in)`.
    pub fn conv_weight(&mut self, name: &str, c_out: usize, c_in: usize, k: usize) -> Result<ParamId> {
        let shape = Shape::new(c_out, c_in, k, k);
        let bound = (1.0 / (c_in * k * k) as f64).sqrt();
        let mut rng = self.rng_for(name);
        let data = (0..shape.numel())
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        self.insert(name, Tensor::from_vec(shape, data)?, true)
    }

    pub fn channel_vector(&mut self, name: &str, c: usize, value: f64, trainable: bool) -> Result<ParamId> {
        self.insert(name, Tensor::full(Shape::new(1, c, 1, 1), value), trainable)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.is_trainable(id))
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.shape().numel())
            .sum()
    }

    /// Replace the value of `name`, keeping its shape.
    pub fn assign(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        let current = self.get(id).shape();
        if current != value.shape() {
            return Err(Error::shape("assign", current, value.shape()));
        }
        *self.get_mut(id) = value;
        Ok(())
    }

    pub fn apply_stat_updates(&mut self, updates: &[StatUpdate]) {
        for u in updates {
            let m = u.momentum;
            for (r, b) in self.entries[u.running_mean.0].value.data_mut().iter_mut().zip(&u.stats.mean) {
                *r = (1.0 - m) * *r + m * b;
            }
            for (r, b) in self.entries[u.running_var.0].value.data_mut().iter_mut().zip(&u.stats.var) {
                *r = (1.0 - m) * *r + m * b;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Pending running-statistics update from one training-mode normalization.
#[derive(Clone, Debug)]
pub struct StatUpdate {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub stats: BatchStats,
}

/// One forward pass: a fresh tape plus read access to the parameters.
pub struct Forward<'a> {
    pub tape: Tape,
    params: &'a ParamStore,
    mode: Mode,
    track_params: bool,
    stat_updates: Vec<StatUpdate>,
}

impl<'a> Forward<'a> {
    /// Parameters are differentiable leaves in training mode only.
    pub fn new(params: &'a ParamStore, mode: Mode) -> Self {
        Self::with_tracking(params, mode, mode == Mode::Train)
    }

    pub fn with_tracking(params: &'a ParamStore, mode: Mode, track_params: bool) -> Self {
        Forward {
            tape: Tape::new(),
            params,
            mode,
            track_params,
            stat_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn params(&self) -> &'a ParamStore {
        self.params
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let params = self.params;
        let track = self.track_params && params.is_trainable(id);
        self.tape.keyed_leaf(id.0, track, || params.get(id).clone())
    }

    pub(crate) fn record_stats(&mut self, update: StatUpdate) {
        self.stat_updates.push(update);
    }

    pub fn take_stat_updates(&mut self) -> Vec<StatUpdate> {
        std::mem::take(&mut self.stat_updates)
    }

    /// Gradients of every trainable parameter touched by this pass.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(ParamId, Tensor)> {
        self.tape
            .keyed_leaves()
            .filter(|&(_, v)| self.tape.requires_grad(v))
            .map(|(k, v)| (ParamId(k), grads.wrt(v)))
            .collect()
    }
}
