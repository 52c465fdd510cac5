use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Result, VawiError};
use crate::tensor::Tensor;

/// Parameter groups. The discriminant is the group id stored in checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// The task language model.
    Plm = 0,
    /// The frozen visually-aligned encoder.
    Vlp = 1,
    /// Reformulation layer and the learned VH-word extractor.
    Ref = 2,
    /// Task head.
    Head = 3,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [ParamGroup::Plm, ParamGroup::Vlp, ParamGroup::Ref, ParamGroup::Head];

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Option<Self> {
        ParamGroup::ALL.get(id as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Plm => "plm",
            ParamGroup::Vlp => "vlp",
            ParamGroup::Ref => "ref",
            ParamGroup::Head => "head",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: Tensor,
}

/// Every model tensor, each in exactly one group, with a trainable flag per
/// group. Insertion order is preserved and is the checkpoint order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterPartition {
    params: Vec<NamedTensor>,
    index: HashMap<String, usize>,
    trainable: BTreeMap<ParamGroup, bool>,
}

impl ParameterPartition {
    pub fn new() -> Self {
        let mut p = ParameterPartition::default();
        for g in ParamGroup::ALL {
            p.trainable.insert(g, true);
        }
        p
    }

    pub fn insert(&mut self, name: impl Into<String>, group: ParamGroup, tensor: Tensor) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(VawiError::Contract(format!("parameter {name:?} registered twice")));
        }
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(NamedTensor { name, group, tensor });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.id(name)
            .map(|i| &self.params[i].tensor)
            .ok_or_else(|| VawiError::Contract(format!("unknown parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let i = self
            .id(name)
            .ok_or_else(|| VawiError::Contract(format!("unknown parameter {name:?}")))?;
        Ok(&mut self.params[i].tensor)
    }

    pub fn entries(&self) -> &[NamedTensor] {
        &self.params
    }

    pub fn entries_mut(&mut self) -> &mut [NamedTensor] {
        &mut self.params
    }

    pub fn is_trainable(&self, group: ParamGroup) -> bool {
        self.trainable.get(&group).copied().unwrap_or(true)
    }

    pub fn set_trainable(&mut self, group: ParamGroup, trainable: bool) {
        self.trainable.insert(group, trainable);
    }

    pub fn in_group(&self, group: ParamGroup) -> impl Iterator<Item = &NamedTensor> {
        self.params.iter().filter(move |p| p.group == group)
    }

    /// Indices of tensors whose group is trainable.
    pub fn trainable_ids(&self) -> Vec<usize> {
        (0..self.params.len())
            .filter(|&i| self.is_trainable(self.params[i].group))
            .collect()
    }

    /// Total element count of a group.
    pub fn group_size(&self, group: ParamGroup) -> usize {
        self.in_group(group).map(|p| p.tensor.len()).sum()
    }

    /// L2 distance between this partition's group tensors and `other`'s.
    pub fn group_distance(&self, other: &ParameterPartition, group: ParamGroup) -> f64 {
        self.in_group(group)
            .filter_map(|p| other.get(&p.name).ok().map(|q| (p, q)))
            .map(|(p, q)| {
                p.tensor
                    .data()
                    .iter()
                    .zip(q.data())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Records every tensor as a leaf on `tape`; trainable groups are tracked.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t, '_> {
        let vars = self
            .params
            .iter()
            .map(|p| tape.leaf(p.tensor.clone(), self.is_trainable(p.group)))
            .collect();
        Bound { vars, partition: self }
    }

    /// Like [`bind`](Self::bind), but the tensors at the given ids are
    /// replaced by caller-provided handles and every other tensor is bound
    /// untracked.
    pub fn bind_with<'t>(&self, tape: &'t Tape, overrides: &[(usize, Var<'t>)]) -> Bound<'t, '_> {
        let mut vars: Vec<Var<'t>> = self.params.iter().map(|p| tape.leaf(p.tensor.clone(), false)).collect();
        for &(id, v) in overrides {
            vars[id] = v;
        }
        Bound { vars, partition: self }
    }
}

/// A partition's tensors recorded on one tape.
pub struct Bound<'t, 'p> {
    vars: Vec<Var<'t>>,
    partition: &'p ParameterPartition,
}

impl<'t> Bound<'t, '_> {
    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        self.partition
            .id(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| VawiError::Contract(format!("unknown parameter {name:?}")))
    }

    pub fn var(&self, id: usize) -> Var<'t> {
        self.vars[id]
    }

    /// Gradient of every tensor (zeros for untracked or unreached ones).
    pub fn grads(&self) -> Vec<Tensor> {
        self.vars.iter().map(Var::grad_or_zeros).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ParameterPartition::new();
        p.insert("a", ParamGroup::Plm, Tensor::scalar(1.0)).unwrap();
        assert!(p.insert("a", ParamGroup::Ref, Tensor::scalar(1.0)).is_err());
    }

    #[test]
    fn frozen_group_binds_untracked() {
        let mut p = ParameterPartition::new();
        p.insert("x", ParamGroup::Plm, Tensor::scalar(2.0)).unwrap();
        p.insert("y", ParamGroup::Vlp, Tensor::scalar(3.0)).unwrap();
        p.set_trainable(ParamGroup::Vlp, false);
        let tape = Tape::new();
        let b = p.bind(&tape);
        let out = b.get("x").unwrap().mul(&b.get("y").unwrap()).unwrap();
        tape.backward(out).unwrap();
        let g = b.grads();
        assert_eq!(g[0].item(), 3.0);
        assert_eq!(g[1].item(), 0.0);
        assert_eq!(p.trainable_ids(), vec![0]);
    }

    #[test]
    fn group_ids_round_trip() {
        for g in ParamGroup::ALL {
            assert_eq!(ParamGroup::from_id(g.id()), Some(g));
        }
        assert_eq!(ParamGroup::from_id(9), None);
    }
}
