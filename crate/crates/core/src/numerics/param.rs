use serde::{Deserialize, Serialize};

use crate::numerics::tensor::Tensor;

/// Value plus accumulated gradient. Frozen parameters are never touched by
/// an optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
}

impl Parameter {
    pub fn new(value: Tensor, trainable: bool) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            value,
            grad,
            trainable,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a parameter is for; drives freezing, quantisation and accounting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Embedding,
    AttentionBase,
    FeedForwardBase,
    Head,
    Bias,
    Norm,
    Router,
    Expert,
    FeedForwardLora,
    Other,
}

impl Component {
    /// Weight matrices that stage 1 quantises.
    pub fn is_quantisable(self) -> bool {
        matches!(
            self,
            Component::Embedding | Component::AttentionBase | Component::FeedForwardBase | Component::Head
        )
    }

    pub fn is_adapter(self) -> bool {
        matches!(self, Component::Router | Component::Expert | Component::FeedForwardLora)
    }
}

#[derive(Clone, Debug)]
struct Slot {
    name: String,
    component: Component,
    param: Parameter,
}

/// Arena of named parameters. Removing a parameter leaves a hole so that
/// existing ids stay valid.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    slots: Vec<Option<Slot>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, component: Component, value: Tensor, trainable: bool) -> ParamId {
        self.slots.push(Some(Slot {
            name: name.into(),
            component,
            param: Parameter::new(value, trainable),
        }));
        ParamId(self.slots.len() - 1)
    }

    fn slot(&self, id: ParamId) -> &Slot {
        self.slots[id.0].as_ref().expect("parameter was removed")
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.slot(id).param
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.slots[id.0].as_mut().expect("parameter was removed").param
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.get(id).value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.slot(id).name
    }

    pub fn component(&self, id: ParamId) -> Component {
        self.slot(id).component
    }

    pub fn contains(&self, id: ParamId) -> bool {
        self.slots.get(id.0).is_some_and(|s| s.is_some())
    }

    pub fn remove(&mut self, id: ParamId) -> Option<Parameter> {
        self.slots.get_mut(id.0).and_then(|s| s.take()).map(|s| s.param)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.ids().find(|&id| self.name(id) == name)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.slots
            .iter()
            .enumerate()
            .filter(|(_, s)| s.is_some())
            .map(|(i, _)| ParamId(i))
    }

    pub fn len(&self) -> usize {
        self.ids().count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn zero_grads(&mut self) {
        for slot in self.slots.iter_mut().flatten() {
            slot.param.zero_grad();
        }
    }

    /// Sets `trainable` on every parameter from its component.
    pub fn set_trainable_by(&mut self, pred: impl Fn(Component) -> bool) {
        for slot in self.slots.iter_mut().flatten() {
            slot.param.trainable = pred(slot.component);
        }
    }

    pub fn freeze_all(&mut self) {
        self.set_trainable_by(|_| false);
    }
}
