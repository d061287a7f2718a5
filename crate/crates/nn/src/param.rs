use std::collections::HashMap;

use crate::error::NnError;

pub type ParamId = usize;

/// What a parameter is for. Names follow the Keras weight naming so that
/// exported checkpoints map one-to-one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamRole {
    Kernel,
    DepthwiseKernel,
    Bias,
    Gamma,
    Beta,
    MovingMean,
    MovingVariance,
}

impl ParamRole {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamRole::Kernel => "kernel",
            ParamRole::DepthwiseKernel => "depthwise_kernel",
            ParamRole::Bias => "bias",
            ParamRole::Gamma => "gamma",
            ParamRole::Beta => "beta",
            ParamRole::MovingMean => "moving_mean",
            ParamRole::MovingVariance => "moving_variance",
        }
    }

    /// Normalisation statistics are never updated by the optimizer.
    pub fn is_statistic(self) -> bool {
        matches!(self, ParamRole::MovingMean | ParamRole::MovingVariance)
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    /// `<layer>/<role>`, e.g. `conv1_conv/kernel`.
    pub name: String,
    pub layer: String,
    pub role: ParamRole,
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    pub trainable: bool,
}

impl Param {
    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        layer: &str,
        role: ParamRole,
        shape: Vec<usize>,
        value: Vec<f32>,
    ) -> Result<ParamId, NnError> {
        let name = format!("{layer}/{}", role.as_str());
        if self.by_name.contains_key(&name) {
            return Err(NnError::Graph(format!("duplicate parameter `{name}`")));
        }
        if shape.iter().product::<usize>() != value.len() {
            return Err(NnError::Shape(format!("parameter `{name}` has wrong length")));
        }
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            layer: layer.to_string(),
            role,
            shape,
            value,
            trainable: !role.is_statistic(),
        });
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn value(&self, id: ParamId) -> &[f32] {
        &self.params[id].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    /// Freeze or unfreeze every non-statistic parameter.
    pub fn set_trainable(&mut self, trainable: bool) {
        for p in &mut self.params {
            p.trainable = trainable && !p.role.is_statistic();
        }
    }

    pub fn total_count(&self) -> usize {
        self.params.iter().map(Param::len).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(Param::len).sum()
    }

    /// Overwrite a parameter value by name, checking the shape.
    pub fn assign(&mut self, name: &str, shape: &[usize], value: &[f32]) -> Result<(), NnError> {
        let id = self
            .find(name)
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))?;
        let p = &mut self.params[id];
        if p.shape != shape {
            return Err(NnError::Shape(format!(
                "parameter `{name}`: expected shape {:?}, got {:?}",
                p.shape, shape
            )));
        }
        p.value.copy_from_slice(value);
        Ok(())
    }
}

/// Gradient accumulators, one slot per trainable parameter.
#[derive(Clone, Debug)]
pub struct Grads {
    slots: Vec<Option<Vec<f32>>>,
}

impl Grads {
    pub fn for_store(store: &ParamStore) -> Self {
        Self {
            slots: store
                .iter()
                .map(|p| p.trainable.then(|| vec![0.0; p.len()]))
                .collect(),
        }
    }

    pub fn slot_mut(&mut self, id: ParamId) -> Option<&mut Vec<f32>> {
        self.slots.get_mut(id).and_then(Option::as_mut)
    }

    pub fn slot(&self, id: ParamId) -> Option<&[f32]> {
        self.slots.get(id).and_then(|s| s.as_deref())
    }

    /// Temporarily move a slot out (so two slots can be borrowed at once).
    pub fn take(&mut self, id: ParamId) -> Option<Vec<f32>> {
        self.slots.get_mut(id).and_then(Option::take)
    }

    pub fn put(&mut self, id: ParamId, slot: Option<Vec<f32>>) {
        if slot.is_some() {
            self.slots[id] = slot;
        }
    }

    pub fn zero(&mut self) {
        for s in self.slots.iter_mut().flatten() {
            s.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn scale(&mut self, factor: f32) {
        for s in self.slots.iter_mut().flatten() {
            s.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.slots
            .iter()
            .flatten()
            .all(|s| s.iter().all(|v| v.is_finite()))
    }
}
