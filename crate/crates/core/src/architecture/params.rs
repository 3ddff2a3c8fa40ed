use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Gradients, NamedTensor, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    name: String,
    value: Tensor,
    trainable: bool,
}

/// Named parameters and running buffers in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.push(name.into(), value, true)
    }

    /// Non-trainable state such as batch-norm running statistics.
    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.push(name.into(), value, false)
    }

    fn push(&mut self, name: String, value: Tensor, trainable: bool) -> ParamId {
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(Entry { name, value, trainable });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) {
        let entry = &mut self.entries[id.0];
        assert_eq!(entry.value.shape(), value.shape(), "shape of {}", entry.name);
        entry.value = value;
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.is_trainable(id))
    }

    pub fn num_trainable_values(&self) -> usize {
        self.trainable_ids().map(|id| self.get(id).numel()).sum()
    }

    pub fn to_named(&self) -> Vec<NamedTensor> {
        self.entries
            .iter()
            .map(|e| NamedTensor::new(e.name.clone(), e.value.clone()))
            .collect()
    }

    /// Overwrites every entry from `tensors`, which must cover them all by name and shape.
    pub fn load_named(&mut self, tensors: &[NamedTensor]) -> Result<()> {
        for entry in &mut self.entries {
            let found = tensors
                .iter()
                .find(|t| t.name == entry.name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor '{}'", entry.name)))?;
            if found.tensor.shape() != entry.value.shape() {
                return Err(Error::Format(format!(
                    "tensor '{}' has shape {:?}, model expects {:?}",
                    entry.name,
                    found.tensor.shape(),
                    entry.value.shape()
                )));
            }
            entry.value = found.tensor.clone();
        }
        Ok(())
    }
}

/// Uniform `(-a, a)` with `a = 1/sqrt(fan_in)`.
pub fn init_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    Tensor::uniform(shape, 1.0 / (fan_in as f64).sqrt(), rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward pass: binds stored parameters to tape leaves on first use and
/// collects running-statistic updates.
pub struct ForwardCtx<'a> {
    pub tape: &'a mut Tape,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    mode: Mode,
    buffer_updates: Vec<(ParamId, Tensor)>,
}

impl<'a> ForwardCtx<'a> {
    pub fn new(tape: &'a mut Tape, store: &'a ParamStore, mode: Mode) -> Self {
        Self {
            tape,
            store,
            bound: vec![None; store.len()],
            mode,
            buffer_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(var) = self.bound[id.0] {
            return var;
        }
        let var = if self.store.is_trainable(id) {
            self.tape.param(self.store.get(id).clone(), self.store.name(id))
        } else {
            self.tape.constant(self.store.get(id).clone())
        };
        self.bound[id.0] = Some(var);
        var
    }

    pub(crate) fn update_buffer(&mut self, id: ParamId, value: Tensor) {
        self.buffer_updates.push((id, value));
    }

    /// Hands back the parameter bindings and pending buffer updates.
    pub fn finish(self) -> Bindings {
        Bindings {
            bound: self.bound,
            buffer_updates: self.buffer_updates,
        }
    }
}

pub struct Bindings {
    bound: Vec<Option<Var>>,
    buffer_updates: Vec<(ParamId, Tensor)>,
}

impl Bindings {
    pub fn var(&self, id: ParamId) -> Option<Var> {
        self.bound[id.0]
    }

    /// Gradient per trainable parameter; unused parameters get zeros.
    pub fn param_grads(&self, store: &ParamStore, grads: &Gradients) -> Vec<(ParamId, Tensor)> {
        store
            .trainable_ids()
            .map(|id| {
                let g = self
                    .var(id)
                    .and_then(|v| grads.get(v).cloned())
                    .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()));
                (id, g)
            })
            .collect()
    }

    pub fn apply_buffer_updates(&mut self, store: &mut ParamStore) {
        for (id, value) in self.buffer_updates.drain(..) {
            store.set(id, value);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_respects_bound_and_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = init_uniform(&[16, 25], 25, &mut rng);
        assert!(t.data().iter().all(|v| v.abs() < 0.2));
        let mut rng2 = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(t, init_uniform(&[16, 25], 25, &mut rng2));
    }

    #[test]
    fn load_checks_names_and_shapes() {
        let mut store = ParamStore::new();
        store.add("a", Tensor::zeros(&[2]));
        store.add_buffer("b", Tensor::zeros(&[3]));
        let mut other = store.clone();
        other.set(ParamId(0), Tensor::ones(&[2]));
        store.load_named(&other.to_named()).unwrap();
        assert_eq!(store.get(ParamId(0)).data(), &[1.0, 1.0]);

        let wrong = vec![NamedTensor::new("a", Tensor::zeros(&[5])), NamedTensor::new("b", Tensor::zeros(&[3]))];
        assert!(store.load_named(&wrong).is_err());
        assert!(store.load_named(&wrong[1..]).is_err());
    }

    #[test]
    fn buffers_bind_as_constants() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::ones(&[2]));
        let b = store.add_buffer("b", Tensor::ones(&[2]));
        let mut tape = Tape::new();
        let mut ctx = ForwardCtx::new(&mut tape, &store, Mode::Train);
        let vp = ctx.param(p);
        let vb = ctx.param(b);
        assert_eq!(ctx.param(p), vp);
        assert!(ctx.tape.requires_grad(vp));
        assert!(!ctx.tape.requires_grad(vb));
        assert_eq!(store.trainable_ids().count(), 1);
    }
}
