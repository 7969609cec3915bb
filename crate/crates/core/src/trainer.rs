//! Offline two-phase training. Phase 1 fits the BSM alone against ground
//! truth; phase 2 freezes it and fits the ADM.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::{next_robot_click, render_disks, sample_training_clicks, Click, DISK_RADIUS};
use crate::losses::{normalized_focal_loss_with_grad, training_loss_with_grad, LossConfig};
use crate::netcore::{GradSet, Network, ParamSet, Partition, Scope};
use crate::optim::{LearningRates, Optimizer, OptimizerKind};
use crate::raster::Sample;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_bsm: f64,
    pub lr_adm: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Chance that a sample gets one extra robot click computed from the
    /// current model's prediction.
    pub iterative_prob: f64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 8,
            lr_bsm: 1e-3,
            lr_adm: 5e-4,
            optimizer: OptimizerKind::Sgd,
            seed: 0,
            iterative_prob: 0.3,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("epochs and batch size must be >= 1".into()));
        }
        if !(self.lr_bsm > 0.0 && self.lr_adm > 0.0) {
            return Err(Error::InvalidArgument("learning rates must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.iterative_prob) {
            return Err(Error::InvalidArgument("iterative_prob must lie in [0, 1]".into()));
        }
        self.loss.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub phase: Partition,
    pub epoch: usize,
    pub mean_loss: f64,
    pub wall_secs: f64,
}

impl std::fmt::Display for EpochLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let phase = match self.phase {
            Partition::Bsm => "bsm",
            Partition::Adm => "adm",
        };
        write!(
            f,
            "phase={phase} epoch={} mean_loss={:.6} wall_secs={:.2}",
            self.epoch, self.mean_loss, self.wall_secs
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ParamSet,
    pub log: Vec<EpochLog>,
}

/// Clicks for one training sample: a random draw, plus with some probability
/// a corrective click from the current prediction.
fn training_clicks(
    sample: &Sample,
    seed: u64,
    iterative: bool,
    predict: impl Fn(&[Click]) -> Result<crate::raster::Mask>,
) -> Result<Vec<Click>> {
    let mut clicks = sample_training_clicks(&sample.mask, seed)?;
    if iterative {
        let pred = predict(&clicks)?;
        if pred != sample.mask {
            let next = next_robot_click(&pred, &sample.mask, clicks.len() as u32 + 1)?;
            clicks.push(next);
        }
    }
    Ok(clicks)
}

fn non_finite(phase: &str, epoch: usize, batch: usize, what: &str) -> Error {
    Error::NonFinite(format!(
        "training diverged in phase {phase}, epoch {epoch}, batch {batch}: {what}"
    ))
}

/// Runs `epochs` passes over `dataset`; `sample_grad` returns the loss of one
/// sample and accumulates its gradient.
fn run_phase(
    phase: Partition,
    dataset: &[Sample],
    cfg: &TrainConfig,
    params: &mut ParamSet,
    mut sample_grad: impl FnMut(&Sample, &ParamSet, &mut ChaCha8Rng, &mut GradSet) -> Result<f64>,
) -> Result<Vec<EpochLog>> {
    let name = match phase {
        Partition::Bsm => "bsm",
        Partition::Adm => "adm",
    };
    let lr = match phase {
        Partition::Bsm => LearningRates { bsm: cfg.lr_bsm, adm: 0.0 },
        Partition::Adm => LearningRates { bsm: 0.0, adm: cfg.lr_adm },
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(phase.tag() as u64 + 1);
    let mut opt = Optimizer::new(cfg.optimizer);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut grads = GradSet::zeros_like(params);
            for &i in batch {
                let loss = sample_grad(&dataset[i], params, &mut rng, &mut grads)?;
                if !loss.is_finite() {
                    return Err(non_finite(name, epoch, b, &format!("loss {loss}")));
                }
                total += loss;
            }
            grads.scale(1.0 / batch.len() as f64);
            if !grads.is_finite() {
                return Err(non_finite(name, epoch, b, "gradient"));
            }
            opt.step(params, &grads, lr)?;
        }
        let entry = EpochLog {
            phase,
            epoch,
            mean_loss: total / dataset.len() as f64,
            wall_secs: start.elapsed().as_secs_f64(),
        };
        log::info!("{entry}");
        log.push(entry);
    }
    Ok(log)
}

/// Phase 1. Starts from `net.init_params(cfg.seed)`; ADM tensors are left at
/// their initial values.
pub fn train_bsm(net: &Network, dataset: &[Sample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let mut params = net.init_params(cfg.seed);
    let log = run_phase(Partition::Bsm, dataset, cfg, &mut params, |s, params, rng, grads| {
        let seed = rng.random::<u64>();
        let iterative = rng.random_bool(cfg.iterative_prob);
        let (h, w) = (s.image.height(), s.image.width());
        let clicks = training_clicks(s, seed, iterative, |clicks| {
            let g = render_disks(clicks, h, w, DISK_RADIUS)?;
            Ok(net.bsm_forward(&s.image, &g, params)?.0.binarize(0.5))
        })?;
        let g = render_disks(&clicks, h, w, DISK_RADIUS)?;
        let (coarse, tape) = net.bsm_forward(&s.image, &g, params)?;
        let (loss, dp) = normalized_focal_loss_with_grad(&coarse, &s.mask, cfg.loss.gamma)?;
        grads.add_assign(&net.backward(&tape, params, &dp)?.grads);
        Ok(loss)
    })?;
    Ok(TrainOutcome { params, log })
}

/// Phase 2. BSM tensors of `params` are frozen; only ADM tensors change.
pub fn train_adm(
    net: &Network,
    dataset: &[Sample],
    params: &ParamSet,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    net.check_params(params)?;
    let mut params = params.clone();
    let frozen = params.subset(Scope::Bsm);
    let log = run_phase(Partition::Adm, dataset, cfg, &mut params, |s, params, rng, grads| {
        let seed = rng.random::<u64>();
        let iterative = rng.random_bool(cfg.iterative_prob);
        let (h, w) = (s.image.height(), s.image.width());
        let clicks = training_clicks(s, seed, iterative, |clicks| {
            let g = render_disks(clicks, h, w, DISK_RADIUS)?;
            let (coarse, _) = net.bsm_forward(&s.image, &g, params)?;
            Ok(net.adm_forward(&s.image, &g, &coarse, params)?.0.binarize(0.5))
        })?;
        let g = render_disks(&clicks, h, w, DISK_RADIUS)?;
        let (coarse, _) = net.bsm_forward(&s.image, &g, params)?;
        let (refined, tape) = net.adm_forward(&s.image, &g, &coarse, params)?;
        let (loss, dp) = training_loss_with_grad(&refined, &s.mask, &coarse, &cfg.loss)?;
        grads.add_assign(&net.backward(&tape, params, &dp)?.grads);
        Ok(loss)
    })?;
    debug_assert!(params.subset(Scope::Bsm).bit_equal(&frozen, Scope::All));
    Ok(TrainOutcome { params, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::ModelConfig;
    use crate::raster::{generate_dataset, DomainSpec};

    fn tiny_setup() -> (Network, Vec<Sample>, TrainConfig) {
        let net = Network::new(ModelConfig::tiny()).unwrap();
        let data = generate_dataset(&DomainSpec::source(3).with_size(16, 16), 6).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            seed: 5,
            ..TrainConfig::default()
        };
        (net, data, cfg)
    }

    #[test]
    fn empty_dataset_and_bad_config_are_rejected() {
        let (net, _, cfg) = tiny_setup();
        assert!(train_bsm(&net, &[], &cfg).is_err());
        let bad = TrainConfig { epochs: 0, ..cfg };
        let (_, data, _) = tiny_setup();
        assert!(train_bsm(&net, &data, &bad).is_err());
    }

    #[test]
    fn phases_respect_partition_and_are_deterministic() {
        let (net, data, cfg) = tiny_setup();
        let a = train_bsm(&net, &data, &cfg).unwrap();
        let b = train_bsm(&net, &data, &cfg).unwrap();
        assert!(a.params.bit_equal(&b.params, Scope::All));
        assert_eq!(a.log.len(), 2);
        let init = net.init_params(cfg.seed);
        assert!(a.params.bit_equal(&init, Scope::Adm));
        assert!(!a.params.bit_equal(&init, Scope::Bsm));

        let c = train_adm(&net, &data, &a.params, &cfg).unwrap();
        assert!(c.params.bit_equal(&a.params, Scope::Bsm));
        assert!(!c.params.bit_equal(&a.params, Scope::Adm));
    }

    #[test]
    fn divergence_is_reported() {
        let (net, data, cfg) = tiny_setup();
        let mut params = net.init_params(0);
        let i = params.position("adm.head.bias").unwrap();
        params.data_mut(i)[0] = f32::NAN;
        let err = train_adm(&net, &data, &params, &cfg).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)), "{err:?}");
    }
}
