//! First-order optimizers over a [`ParamSet`], with per-partition learning
//! rates. A partition whose rate is zero is skipped entirely, so its tensors
//! stay bit-identical and its moment state is untouched.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netcore::{GradSet, ParamSet, Partition};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Learning rate for each partition.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearningRates {
    pub bsm: f64,
    pub adm: f64,
}

impl LearningRates {
    pub fn for_partition(&self, p: Partition) -> f64 {
        match p {
            Partition::Bsm => self.bsm,
            Partition::Adm => self.adm,
        }
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Optimizer with its moment state. Cloning snapshots the state, which the
/// session undo history relies on.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    kind: OptimizerKind,
    /// Step counts per tensor; Adam bias correction is per tensor because a
    /// partition may sit out some steps.
    steps: Vec<u64>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            steps: Vec::new(),
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &GradSet, lr: LearningRates) -> Result<()> {
        if grads.data.len() != params.len()
            || params
                .iter()
                .zip(&grads.names)
                .any(|(t, n)| &t.name != n)
        {
            return Err(Error::Structure("gradients do not match parameters".into()));
        }
        if !grads.is_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }
        if self.steps.is_empty() {
            self.steps = vec![0; params.len()];
            if self.kind == OptimizerKind::Adam {
                self.m = params.iter().map(|t| vec![0.0; t.numel()]).collect();
                self.v = self.m.clone();
            }
        } else if self.steps.len() != params.len() {
            return Err(Error::Structure("optimizer state belongs to another model".into()));
        }
        for i in 0..params.len() {
            let rate = lr.for_partition(params.tensor(i).partition);
            if rate == 0.0 {
                continue;
            }
            self.steps[i] += 1;
            let g = &grads.data[i];
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, &gi) in params.data_mut(i).iter_mut().zip(g) {
                        *w = (f64::from(*w) - rate * gi) as f32;
                    }
                }
                OptimizerKind::Adam => {
                    let t = self.steps[i] as i32;
                    let c1 = 1.0 - BETA1.powi(t);
                    let c2 = 1.0 - BETA2.powi(t);
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for (k, w) in params.data_mut(i).iter_mut().enumerate() {
                        m[k] = BETA1 * m[k] + (1.0 - BETA1) * g[k];
                        v[k] = BETA2 * v[k] + (1.0 - BETA2) * g[k] * g[k];
                        let update = rate * (m[k] / c1) / ((v[k] / c2).sqrt() + ADAM_EPS);
                        *w = (f64::from(*w) - update) as f32;
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::ParamTensor;

    fn set() -> ParamSet {
        ParamSet::new(vec![
            ParamTensor {
                name: "b".into(),
                shape: vec![2],
                partition: Partition::Bsm,
                data: vec![1.0, -1.0],
            },
            ParamTensor {
                name: "a".into(),
                shape: vec![1],
                partition: Partition::Adm,
                data: vec![3.0],
            },
        ])
        .unwrap()
    }

    #[test]
    fn sgd_step_and_frozen_partition() {
        let mut p = set();
        let mut g = GradSet::zeros_like(&p);
        g.data[0] = vec![1.0, 1.0];
        g.data[1] = vec![2.0];
        let mut opt = Optimizer::new(OptimizerKind::Sgd);
        opt.step(&mut p, &g, LearningRates { bsm: 0.0, adm: 0.5 }).unwrap();
        assert_eq!(p.tensor(0).data, vec![1.0, -1.0]);
        assert_eq!(p.tensor(1).data, vec![2.0]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = set();
        let mut g = GradSet::zeros_like(&p);
        g.data[0] = vec![5.0, -0.01];
        let mut opt = Optimizer::new(OptimizerKind::Adam);
        opt.step(&mut p, &g, LearningRates { bsm: 0.1, adm: 0.1 }).unwrap();
        assert!((p.tensor(0).data[0] - 0.9).abs() < 1e-6);
        assert!((p.tensor(0).data[1] + 0.9).abs() < 1e-6);
        // zero gradient leaves the value exactly in place
        assert_eq!(p.tensor(1).data, vec![3.0]);
    }

    #[test]
    fn non_finite_gradient_is_rejected_without_change() {
        let mut p = set();
        let before = p.clone();
        let mut g = GradSet::zeros_like(&p);
        g.data[1] = vec![f64::NAN];
        let mut opt = Optimizer::new(OptimizerKind::Sgd);
        assert!(opt.step(&mut p, &g, LearningRates { bsm: 1.0, adm: 1.0 }).is_err());
        assert!(p.bit_equal(&before, crate::netcore::Scope::All));
    }
}
