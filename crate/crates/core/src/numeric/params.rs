//! Named parameter storage with parallel gradient and optimizer-state slots.

use std::collections::BTreeMap;

use rand::Rng;

use super::{NumericError, Result, Tensor2};

/// Opaque handle to a registered parameter; cheap to copy and index with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Per-parameter optimizer state.
#[derive(Debug, Clone)]
pub enum OptState {
    Empty,
    Sgd { velocity: Tensor2 },
    Adam { m: Tensor2, v: Tensor2, t: u64 },
}

#[derive(Debug, Clone)]
pub struct ParameterSet {
    names: Vec<String>,
    values: Vec<Tensor2>,
    grads: Vec<Tensor2>,
    grad_set: Vec<bool>,
    states: Vec<OptState>,
    index: BTreeMap<String, usize>,
}

impl Default for ParameterSet {
    fn default() -> Self {
        Self::new()
    }
}

impl ParameterSet {
    pub fn new() -> Self {
        ParameterSet {
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            grad_set: Vec::new(),
            states: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    /// Register a parameter; names must be unique.
    pub fn register(&mut self, name: &str, value: Tensor2) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(NumericError::DuplicateParam(name.to_string()));
        }
        let id = self.values.len();
        self.names.push(name.to_string());
        let (r, c) = value.shape();
        self.grads.push(Tensor2::zeros(r, c));
        self.values.push(value);
        self.grad_set.push(false);
        self.states.push(OptState::Empty);
        self.index.insert(name.to_string(), id);
        Ok(ParamId(id))
    }

    /// Register with values drawn uniformly from `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn register_uniform<R: Rng>(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        fan_in: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let mut t = Tensor2::zeros(rows, cols);
        for v in t.data_mut() {
            *v = rng.random_range(-bound..=bound);
        }
        self.register(name, t)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn value(&self, id: ParamId) -> &Tensor2 {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor2 {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor2 {
        &self.grads[id.0]
    }

    /// Mutable gradient access; marks the gradient as populated.
    #[inline]
    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor2 {
        self.grad_set[id.0] = true;
        &mut self.grads[id.0]
    }

    pub fn grad_is_set(&self, id: ParamId) -> bool {
        self.grad_set[id.0]
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
        self.grad_set.fill(false);
    }

    pub fn scale_grads(&mut self, s: f64) {
        for g in &mut self.grads {
            g.scale(s);
        }
    }

    pub(crate) fn state_mut(&mut self, id: ParamId) -> &mut OptState {
        &mut self.states[id.0]
    }

    pub fn state(&self, id: ParamId) -> &OptState {
        &self.states[id.0]
    }

    pub fn set_state(&mut self, id: ParamId, state: OptState) {
        self.states[id.0] = state;
    }

    /// All ids, ordered by parameter name.
    pub fn ids_by_name(&self) -> Vec<ParamId> {
        self.index.values().map(|&i| ParamId(i)).collect()
    }

    /// Total number of scalar values across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|t| t.data().len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(Tensor2::is_finite)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    #[test]
    fn duplicate_names_rejected() {
        let mut ps = ParameterSet::new();
        ps.register("w", Tensor2::zeros(2, 2)).unwrap();
        assert!(matches!(
            ps.register("w", Tensor2::zeros(2, 2)),
            Err(NumericError::DuplicateParam(_))
        ));
    }

    #[test]
    fn grad_flag_tracks_population() {
        let mut ps = ParameterSet::new();
        let id = ps.register("w", Tensor2::zeros(2, 2)).unwrap();
        assert!(!ps.grad_is_set(id));
        ps.grad_mut(id).set(0, 0, 1.0);
        assert!(ps.grad_is_set(id));
        ps.zero_grads();
        assert!(!ps.grad_is_set(id));
        assert_eq!(ps.grad(id).get(0, 0), 0.0);
    }

    #[test]
    fn uniform_init_respects_fan_in_bound() {
        let mut ps = ParameterSet::new();
        let mut rng = substream(3, "init");
        let id = ps.register_uniform("w", 8, 16, 16, &mut rng).unwrap();
        let bound = 0.25;
        assert!(ps.value(id).data().iter().all(|v| v.abs() <= bound));
        assert!(ps.value(id).data().iter().any(|v| v.abs() > 1e-4));
    }

    #[test]
    fn ids_by_name_is_sorted() {
        let mut ps = ParameterSet::new();
        ps.register("b", Tensor2::zeros(1, 1)).unwrap();
        ps.register("a", Tensor2::zeros(1, 1)).unwrap();
        let names: Vec<&str> = ps.ids_by_name().iter().map(|&i| ps.name(i)).collect();
        assert_eq!(names, vec!["a", "b"]);
    }
}
