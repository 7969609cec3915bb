use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

static NEXT_STAMP: AtomicU64 = AtomicU64::new(1);

fn fresh_stamp() -> u64 {
    NEXT_STAMP.fetch_add(1, Ordering::Relaxed)
}

/// Which module a tensor belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Bsm,
    Adm,
}

impl Partition {
    pub fn tag(self) -> u8 {
        match self {
            Partition::Bsm => 0,
            Partition::Adm => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Partition::Bsm),
            1 => Ok(Partition::Adm),
            other => Err(Error::Partition(format!("unknown partition tag {other}"))),
        }
    }
}

/// Selects the tensors a regularizer or optimizer step applies to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Bsm,
    Adm,
    All,
}

impl Scope {
    pub fn contains(self, p: Partition) -> bool {
        match self {
            Scope::All => true,
            Scope::Bsm => p == Partition::Bsm,
            Scope::Adm => p == Partition::Adm,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub partition: Partition,
    pub data: Vec<f32>,
}

impl ParamTensor {
    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Named parameter tensors in a fixed order.
///
/// Every mutation through `&mut` accessors refreshes the stamp, which
/// forward tapes record so that a tape can't be replayed against parameters
/// that changed after it was made.
#[derive(Clone, Debug)]
pub struct ParamSet {
    tensors: Vec<ParamTensor>,
    index: HashMap<String, usize>,
    stamp: u64,
}

impl PartialEq for ParamSet {
    fn eq(&self, other: &Self) -> bool {
        self.tensors == other.tensors
    }
}

impl ParamSet {
    pub fn new(tensors: Vec<ParamTensor>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tensors.len());
        for (i, t) in tensors.iter().enumerate() {
            let numel: usize = t.shape.iter().product();
            if numel != t.data.len() {
                return Err(Error::Structure(format!(
                    "tensor `{}` has shape {:?} but {} values",
                    t.name,
                    t.shape,
                    t.data.len()
                )));
            }
            if index.insert(t.name.clone(), i).is_some() {
                return Err(Error::Structure(format!("duplicate tensor name `{}`", t.name)));
            }
        }
        Ok(Self {
            tensors,
            index,
            stamp: fresh_stamp(),
        })
    }

    pub fn stamp(&self) -> u64 {
        self.stamp
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(ParamTensor::numel).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamTensor> {
        self.tensors.iter()
    }

    pub fn tensors(&self) -> &[ParamTensor] {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&ParamTensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn tensor(&self, i: usize) -> &ParamTensor {
        &self.tensors[i]
    }

    pub fn data_mut(&mut self, i: usize) -> &mut [f32] {
        self.stamp = fresh_stamp();
        &mut self.tensors[i].data
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamTensor> {
        let i = *self.index.get(name)?;
        self.stamp = fresh_stamp();
        Some(&mut self.tensors[i])
    }

    /// Tensors in `scope`, deep-copied, in the same order.
    pub fn subset(&self, scope: Scope) -> ParamSet {
        let tensors = self
            .tensors
            .iter()
            .filter(|t| scope.contains(t.partition))
            .cloned()
            .collect();
        ParamSet::new(tensors).expect("subset of a valid set")
    }

    /// Overwrites every tensor of `subset` into `self` by name.
    pub fn assign(&mut self, subset: &ParamSet) -> Result<()> {
        for t in &subset.tensors {
            let i = self.position(&t.name).ok_or_else(|| {
                Error::Structure(format!("tensor `{}` not present", t.name))
            })?;
            if self.tensors[i].shape != t.shape || self.tensors[i].partition != t.partition {
                return Err(Error::Structure(format!(
                    "tensor `{}` differs in shape or partition",
                    t.name
                )));
            }
        }
        for t in &subset.tensors {
            let i = self.index[&t.name];
            self.tensors[i].data.copy_from_slice(&t.data);
        }
        self.stamp = fresh_stamp();
        Ok(())
    }

    /// True when both sets have the same names, shapes and partitions in order.
    pub fn same_structure(&self, other: &ParamSet) -> bool {
        self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| {
                a.name == b.name && a.shape == b.shape && a.partition == b.partition
            })
    }

    /// Bitwise equality of the tensors in `scope`.
    pub fn bit_equal(&self, other: &ParamSet, scope: Scope) -> bool {
        let pick = |s: &ParamSet| -> Vec<(String, Vec<u32>)> {
            s.tensors
                .iter()
                .filter(|t| scope.contains(t.partition))
                .map(|t| (t.name.clone(), t.data.iter().map(|v| v.to_bits()).collect()))
                .collect()
        };
        pick(self) == pick(other)
    }
}

/// Splits a parameter set by partition tag into `(bsm, adm)`.
pub fn partition(params: &ParamSet) -> (ParamSet, ParamSet) {
    (params.subset(Scope::Bsm), params.subset(Scope::Adm))
}

/// Gradient tensors aligned one-to-one with a [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradSet {
    pub names: Vec<String>,
    pub shapes: Vec<Vec<usize>>,
    pub partitions: Vec<Partition>,
    pub data: Vec<Vec<f64>>,
}

impl GradSet {
    pub fn zeros_like(params: &ParamSet) -> Self {
        Self {
            names: params.iter().map(|t| t.name.clone()).collect(),
            shapes: params.iter().map(|t| t.shape.clone()).collect(),
            partitions: params.iter().map(|t| t.partition).collect(),
            data: params.iter().map(|t| vec![0.0; t.numel()]).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.data[i].as_slice())
    }

    pub fn add_assign(&mut self, other: &GradSet) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in &mut self.data {
            for v in t.iter_mut() {
                *v *= factor;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().flatten().all(|v| v.is_finite())
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().flatten().all(|&v| v == 0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> ParamSet {
        ParamSet::new(vec![
            ParamTensor {
                name: "a".into(),
                shape: vec![2],
                partition: Partition::Bsm,
                data: vec![1.0, 2.0],
            },
            ParamTensor {
                name: "b".into(),
                shape: vec![1, 3],
                partition: Partition::Adm,
                data: vec![0.0; 3],
            },
        ])
        .unwrap()
    }

    #[test]
    fn partition_is_disjoint_and_covering() {
        let p = toy();
        let (bsm, adm) = partition(&p);
        let mut names: Vec<_> = bsm.iter().chain(adm.iter()).map(|t| t.name.clone()).collect();
        names.sort();
        assert_eq!(names, vec!["a", "b"]);
        assert!(bsm.iter().all(|t| t.partition == Partition::Bsm));
        assert!(adm.iter().all(|t| t.partition == Partition::Adm));
    }

    #[test]
    fn rejects_duplicates_and_bad_shapes() {
        let mut t = toy().tensors().to_vec();
        t[1].name = "a".into();
        assert!(ParamSet::new(t).is_err());
        let mut t = toy().tensors().to_vec();
        t[0].shape = vec![3];
        assert!(ParamSet::new(t).is_err());
    }

    #[test]
    fn mutation_refreshes_stamp() {
        let mut p = toy();
        let s = p.stamp();
        p.data_mut(0)[0] = 5.0;
        assert_ne!(s, p.stamp());
        assert!(Partition::from_tag(7).is_err());
    }
}
