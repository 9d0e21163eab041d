use std::collections::HashMap;

/// Shape and training metadata of one named parameter array.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    /// Whether decoupled weight decay applies (false for biases and layer norms).
    pub decay: bool,
}

impl ParamInfo {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Named parameter arrays in declaration order, each with a same-shape gradient slot.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterStore {
    infos: Vec<ParamInfo>,
    values: Vec<Vec<f64>>,
    grads: Vec<Vec<f64>>,
    index: HashMap<String, usize>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a parameter. Panics on a duplicate name or a value/shape mismatch.
    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>, decay: bool) -> usize {
        let name = name.into();
        let info = ParamInfo { name: name.clone(), shape, decay };
        assert_eq!(info.numel(), values.len(), "shape/value mismatch for {name}");
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let slot = self.infos.len();
        self.index.insert(name, slot);
        self.grads.push(vec![0.0; values.len()]);
        self.values.push(values);
        self.infos.push(info);
        slot
    }

    pub fn len(&self) -> usize {
        self.infos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.infos.is_empty()
    }

    /// Total scalar parameter count.
    pub fn num_parameters(&self) -> usize {
        self.values.iter().map(Vec::len).sum()
    }

    pub fn slot(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn info(&self, slot: usize) -> &ParamInfo {
        &self.infos[slot]
    }

    pub fn infos(&self) -> &[ParamInfo] {
        &self.infos
    }

    pub fn value(&self, slot: usize) -> &[f64] {
        &self.values[slot]
    }

    pub fn value_mut(&mut self, slot: usize) -> &mut [f64] {
        &mut self.values[slot]
    }

    pub fn grad(&self, slot: usize) -> &[f64] {
        &self.grads[slot]
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.slot(name).map(|s| self.value(s))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let slot = self.slot(name)?;
        Some(self.value_mut(slot))
    }

    pub fn grad_by_name(&self, name: &str) -> Option<&[f64]> {
        self.slot(name).map(|s| self.grad(s))
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// Values read-only alongside mutable gradients.
    pub fn split_mut(&mut self) -> (&[Vec<f64>], &mut [Vec<f64>]) {
        (&self.values, &mut self.grads)
    }

    /// Mutable values alongside read-only gradients (optimizer updates).
    pub fn values_and_grads_mut(&mut self) -> (&[ParamInfo], &mut [Vec<f64>], &[Vec<f64>]) {
        (&self.infos, &mut self.values, &self.grads)
    }

    /// Name of the first parameter whose gradient contains NaN or infinity.
    pub fn first_non_finite_grad(&self) -> Option<&str> {
        self.grads
            .iter()
            .position(|g| g.iter().any(|x| !x.is_finite()))
            .map(|slot| self.infos[slot].name.as_str())
    }

    pub fn first_non_finite_value(&self) -> Option<&str> {
        self.values
            .iter()
            .position(|g| g.iter().any(|x| !x.is_finite()))
            .map(|slot| self.infos[slot].name.as_str())
    }

    /// Bitwise equality of all values.
    pub fn values_bitwise_eq(&self, other: &ParameterStore) -> bool {
        self.infos == other.infos
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()))
    }

    pub(crate) fn take_grads(&mut self) -> Vec<Vec<f64>> {
        std::mem::take(&mut self.grads)
    }

    pub(crate) fn restore_grads(&mut self, grads: Vec<Vec<f64>>) {
        self.grads = grads;
    }

    pub(crate) fn copy_values_from(&mut self, other: &ParameterStore) {
        assert_eq!(self.infos, other.infos, "parameter layouts differ");
        for (dst, src) in self.values.iter_mut().zip(&other.values) {
            dst.copy_from_slice(src);
        }
    }
}
