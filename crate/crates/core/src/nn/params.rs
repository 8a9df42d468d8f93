//! Named parameter storage with gradients and optimizer state.

use crate::data::container::{Entry, WeightContainer};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::DenseTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    /// Trained, decayed.
    Weight,
    /// Mixture weight: trained, not decayed, kept in `[0, 1]`.
    Alpha,
    /// Running statistics: saved, not trained.
    Buffer,
}

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: DenseTensor<T>,
    pub grad: Vec<T>,
    pub velocity: Vec<T>,
    pub role: ParamRole,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    slots: Vec<Option<Param<T>>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { slots: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: DenseTensor<T>, role: ParamRole) -> Result<ParamId> {
        let name = name.into();
        if self.find(&name).is_some() {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let len = value.len();
        self.slots.push(Some(Param {
            name,
            value,
            grad: vec![T::zero(); len],
            velocity: vec![T::zero(); len],
            role,
        }));
        Ok(ParamId(self.slots.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        self.slots[id.0].as_ref().expect("parameter was removed")
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        self.slots[id.0].as_mut().expect("parameter was removed")
    }

    pub fn value(&self, id: ParamId) -> &DenseTensor<T> {
        &self.get(id).value
    }

    pub fn contains(&self, id: ParamId) -> bool {
        self.slots.get(id.0).is_some_and(Option::is_some)
    }

    pub fn remove(&mut self, id: ParamId) -> Option<Param<T>> {
        self.slots.get_mut(id.0).and_then(Option::take)
    }

    pub fn rename(&mut self, id: ParamId, name: impl Into<String>) -> Result<()> {
        let name = name.into();
        if let Some(other) = self.find(&name) {
            if other != id {
                return Err(Error::Config(format!("duplicate parameter name `{name}`")));
            }
        }
        self.get_mut(id).name = name;
        Ok(())
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.iter().find(|(_, p)| p.name == name).map(|(id, _)| id)
    }

    /// Live parameters in creation order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, p)| p.as_ref().map(|p| (ParamId(i), p)))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param<T>)> {
        self.slots
            .iter_mut()
            .enumerate()
            .filter_map(|(i, p)| p.as_mut().map(|p| (ParamId(i), p)))
    }

    /// Number of trainable scalars, mixture weights excluded.
    pub fn weight_count(&self) -> usize {
        self.iter()
            .filter(|(_, p)| p.role == ParamRole::Weight)
            .map(|(_, p)| p.value.len())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in self.iter_mut() {
            p.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    pub fn reset_momentum(&mut self) {
        for (_, p) in self.iter_mut() {
            p.velocity.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn to_container(&self) -> WeightContainer {
        let mut c = WeightContainer::new();
        for (_, p) in self.iter() {
            c.push(Entry::from_tensor(&p.name, &p.value))
                .expect("store names are unique");
        }
        c
    }

    /// Overwrites every parameter from same-named container entries.
    pub fn load_container(&mut self, container: &WeightContainer) -> Result<()> {
        for (_, p) in self.iter_mut() {
            let t: DenseTensor<T> = container.tensor(&p.name)?;
            if t.dims() != p.value.dims() {
                return Err(Error::layer(
                    p.name.clone(),
                    format!("checkpoint dims {:?}, model dims {:?}", t.dims(), p.value.dims()),
                ));
            }
            p.value = t;
        }
        Ok(())
    }
}
