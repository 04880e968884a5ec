use std::fmt;

use crate::error::{Error, Result};
use crate::nn::tensor::{Real, Tensor};

/// Which sub-network owns a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Group {
    /// Acoustic encoder.
    Ae,
    /// Visual encoder.
    Ve,
    /// Scene classifier.
    Sc,
    /// Auxiliary heads used only while pre-training an encoder.
    Aux,
}

impl Group {
    pub fn tag(self) -> u8 {
        match self {
            Group::Ae => 0,
            Group::Ve => 1,
            Group::Sc => 2,
            Group::Aux => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Group::Ae),
            1 => Some(Group::Ve),
            2 => Some(Group::Sc),
            3 => Some(Group::Aux),
            _ => None,
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Group::Ae => "AE",
            Group::Ve => "VE",
            Group::Sc => "SC",
            Group::Aux => "AUX",
        })
    }
}

/// Index of an entry inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub group: Group,
    /// Excluded from optimizer updates and from gradient accumulation.
    pub frozen: bool,
    /// Non-trainable state such as batch-norm running statistics.
    pub buffer: bool,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Real> Param<T> {
    pub fn trainable(&self) -> bool {
        !self.frozen && !self.buffer
    }
}

/// Named, shaped parameters with paired gradient buffers.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    entries: Vec<Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, group: Group, value: Tensor<T>) -> ParamId {
        self.insert(name.into(), group, value, false)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, group: Group, value: Tensor<T>) -> ParamId {
        self.insert(name.into(), group, value, true)
    }

    fn insert(&mut self, name: String, group: Group, value: Tensor<T>, buffer: bool) -> ParamId {
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        let grad = Tensor::zeros(value.dims());
        self.entries.push(Param {
            name,
            group,
            frozen: false,
            buffer,
            value,
            grad,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Param<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [Param<T>] {
        &mut self.entries
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    /// Add `delta` into the gradient of `id`. Frozen parameters and buffers
    /// never receive gradient.
    pub fn accumulate(&mut self, id: ParamId, delta: &[T]) -> Result<()> {
        let p = &mut self.entries[id.0];
        if !p.trainable() {
            return Ok(());
        }
        if p.grad.len() != delta.len() {
            return Err(Error::state(format!(
                "gradient for {} has {} elements, expected {}",
                p.name,
                delta.len(),
                p.grad.len()
            )));
        }
        for (g, &d) in p.grad.data_mut().iter_mut().zip(delta) {
            *g += d;
        }
        Ok(())
    }

    pub fn set_frozen(&mut self, group: Group, frozen: bool) {
        for p in self.entries.iter_mut().filter(|p| p.group == group) {
            p.frozen = frozen;
        }
    }

    pub fn is_group_frozen(&self, group: Group) -> bool {
        self.entries
            .iter()
            .filter(|p| p.group == group && !p.buffer)
            .all(|p| p.frozen)
    }

    pub fn groups(&self) -> Vec<Group> {
        let mut out: Vec<Group> = Vec::new();
        for p in &self.entries {
            if !out.contains(&p.group) {
                out.push(p.group);
            }
        }
        out
    }

    pub fn trainable_groups(&self) -> Vec<Group> {
        self.groups()
            .into_iter()
            .filter(|&g| self.entries.iter().any(|p| p.group == g && p.trainable()))
            .collect()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.entries {
            p.grad.fill(T::zero());
        }
    }

    /// Copy every entry of `group` from `src`, matching by name.
    pub fn copy_group_from(&mut self, src: &ParamStore<T>, group: Group) -> Result<()> {
        for p in self.entries.iter_mut().filter(|p| p.group == group) {
            let id = src
                .find(&p.name)
                .ok_or_else(|| Error::state(format!("source store lacks {}", p.name)))?;
            let s = src.get(id);
            p.value.expect_dims(s.value.dims())?;
            p.value = s.value.clone();
        }
        Ok(())
    }

    /// Take values and frozen flags from `src`, which must hold exactly the
    /// same names and shapes.
    pub fn assign_from(&mut self, src: &ParamStore<T>) -> Result<()> {
        if src.len() != self.len() {
            return Err(Error::state(format!("store has {} entries, source {}", self.len(), src.len())));
        }
        for p in &mut self.entries {
            let id = src
                .find(&p.name)
                .ok_or_else(|| Error::state(format!("source store lacks {}", p.name)))?;
            let s = src.get(id);
            p.value.expect_dims(s.value.dims())?;
            if s.buffer != p.buffer || s.group != p.group {
                return Err(Error::state(format!("{} differs in kind or group", p.name)));
            }
            p.value = s.value.clone();
            p.frozen = s.frozen;
        }
        Ok(())
    }

    /// Little-endian bytes of every value in `group`, for bitwise comparisons.
    pub fn group_bytes(&self, group: Group) -> Vec<u8> {
        let mut out = Vec::new();
        for p in self.entries.iter().filter(|p| p.group == group) {
            for &v in p.value.data() {
                v.write_le(&mut out);
            }
        }
        out
    }

    pub fn param_count(&self, group: Group) -> usize {
        self.entries
            .iter()
            .filter(|p| p.group == group && !p.buffer)
            .map(|p| p.value.len())
            .sum()
    }

    /// Precision conversion of the whole store.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    group: p.group,
                    frozen: p.frozen,
                    buffer: p.buffer,
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                })
                .collect(),
        }
    }

    pub(crate) fn push_raw(&mut self, p: Param<T>) {
        self.entries.push(p);
    }

    pub fn remove_group(&mut self, group: Group) {
        self.entries.retain(|p| p.group != group);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_entries_ignore_gradients() {
        let mut ps = ParamStore::<f64>::new();
        let a = ps.add("a", Group::Ae, Tensor::zeros(&[2]));
        let v = ps.add("v", Group::Ve, Tensor::zeros(&[2]));
        ps.set_frozen(Group::Ve, true);
        ps.accumulate(a, &[1.0, 2.0]).unwrap();
        ps.accumulate(v, &[1.0, 2.0]).unwrap();
        assert_eq!(ps.get(a).grad.data(), &[1.0, 2.0]);
        assert_eq!(ps.get(v).grad.data(), &[0.0, 0.0]);
        assert_eq!(ps.trainable_groups(), vec![Group::Ae]);
    }

    #[test]
    fn gradient_length_mismatch_is_invalid_state() {
        let mut ps = ParamStore::<f32>::new();
        let a = ps.add("a", Group::Sc, Tensor::zeros(&[3]));
        assert!(matches!(
            ps.accumulate(a, &[1.0]),
            Err(Error::InvalidState(_))
        ));
    }
}
