//! Finite-difference harness shared by the gradient tests and the acceptance
//! target. Instances are 8x8 tensors fed straight into the network, since
//! `RasterImage` enforces a larger minimum size.
#![allow(dead_code)]

use clickforge_core::guidance::{render_disks, Click, GuidanceMaps};
use clickforge_core::losses::{
    anchor_regularizer_with_grad, normalized_focal_loss_with_grad, sparse_click_loss_with_grad,
    LossConfig,
};
use clickforge_core::netcore::tensor::Tensor3;
use clickforge_core::netcore::{GradSet, ModelConfig, Network, ParamSet, Partition, Scope};
use clickforge_core::raster::Mask;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SIDE: usize = 8;
pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    Focal,
    Sparse,
    Anchor,
    Total,
}

pub struct Instance {
    pub net: Network,
    pub params: ParamSet,
    pub input: Tensor3,
    pub guidance: GuidanceMaps,
    pub target: Mask,
    pub anchor: ParamSet,
    pub cfg: LossConfig,
}

pub fn instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = Network::new(ModelConfig::tiny()).unwrap();
    let mut params = net.init_params(seed);
    // Nonzero biases so that no unit sits exactly on a ReLU kink.
    for i in 0..params.len() {
        if params.tensor(i).name.ends_with(".bias") {
            for v in params.data_mut(i) {
                *v = rng.random_range(-0.1..0.1);
            }
        }
    }
    let clicks = vec![
        Click::positive(rng.random_range(0..SIDE), rng.random_range(0..SIDE), 1),
        Click::negative(rng.random_range(0..SIDE), rng.random_range(0..SIDE), 2),
    ];
    let guidance = render_disks(&clicks, SIDE, SIDE, 2).unwrap();
    let mut input = Tensor3::zeros(5, SIDE, SIDE);
    let hw = SIDE * SIDE;
    for v in &mut input.data[..3 * hw] {
        *v = rng.random::<f64>();
    }
    for i in 0..hw {
        input.data[3 * hw + i] = f64::from(guidance.positive.as_slice()[i]);
        input.data[4 * hw + i] = f64::from(guidance.negative.as_slice()[i]);
    }
    let target = Mask::from_fn(SIDE, SIDE, |_, _| rng.random_bool(0.4));
    let mut anchor = params.clone();
    for i in 0..anchor.len() {
        for v in anchor.data_mut(i) {
            *v += rng.random_range(-0.05f32..0.05);
        }
    }
    Instance {
        net,
        params,
        input,
        guidance,
        target,
        anchor,
        cfg: LossConfig::default(),
    }
}

/// Loss of `obj` on the refined map and its gradient with respect to every
/// tensor, chaining through the coarse map into the BSM. The dense term's
/// pseudo-label is `pseudo`, held fixed.
pub fn evaluate(inst: &Instance, params: &ParamSet, obj: Objective, pseudo: &Mask) -> (f64, GradSet) {
    let net = &inst.net;
    let (coarse, bsm_tape) = net.bsm_forward_tensor(inst.input.clone(), params).unwrap();
    let (refined, adm_tape) = net.adm_forward_tensor(&inst.input, &coarse, params).unwrap();
    let c = &inst.cfg;
    let zeros = vec![0.0; SIDE * SIDE];
    let (value, dp, anchor_grad) = match obj {
        Objective::Focal => {
            let (v, g) = normalized_focal_loss_with_grad(&refined, &inst.target, c.gamma).unwrap();
            (v, g, None)
        }
        Objective::Sparse => {
            let (v, g) = sparse_click_loss_with_grad(&refined, &inst.guidance).unwrap();
            (v, g, None)
        }
        Objective::Anchor => {
            let (v, g) = anchor_regularizer_with_grad(params, &inst.anchor, Scope::All).unwrap();
            (v, zeros, Some(g))
        }
        Objective::Total => {
            let (ls, gs) = sparse_click_loss_with_grad(&refined, &inst.guidance).unwrap();
            let (ld, gd) = normalized_focal_loss_with_grad(&refined, pseudo, c.gamma).unwrap();
            let (lr, mut ga) =
                anchor_regularizer_with_grad(params, &inst.anchor, Scope::All).unwrap();
            ga.scale(c.lambda_anchor);
            let dp = gs
                .iter()
                .zip(&gd)
                .map(|(a, b)| c.lambda_sparse * a + c.lambda_dense * b)
                .collect();
            let v = c.lambda_sparse * ls + c.lambda_dense * ld + c.lambda_anchor * lr;
            (v, dp, Some(ga))
        }
    };
    let back = net.backward_with(&adm_tape, params, &dp, true).unwrap();
    let mut grads = back.grads;
    let coarse_grad = back.coarse_grad.unwrap();
    grads.add_assign(&net.backward(&bsm_tape, params, &coarse_grad).unwrap().grads);
    if let Some(g) = anchor_grad {
        grads.add_assign(&g);
    }
    (value, grads)
}

pub fn pseudo_label(inst: &Instance) -> Mask {
    let (coarse, _) = inst.net.bsm_forward_tensor(inst.input.clone(), &inst.params).unwrap();
    let (refined, _) = inst.net.adm_forward_tensor(&inst.input, &coarse, &inst.params).unwrap();
    refined.binarize(0.5)
}

fn patterns(inst: &Instance, params: &ParamSet) -> Vec<u32> {
    let net = &inst.net;
    let (coarse, bsm) = net.bsm_forward_tensor(inst.input.clone(), params).unwrap();
    let (_, adm) = net.adm_forward_tensor(&inst.input, &coarse, params).unwrap();
    let mut p = net.activation_pattern(&bsm);
    p.extend(net.activation_pattern(&adm));
    p
}

/// Central difference at one stored element, divided by the perturbation
/// actually realized in f32. `None` when the two evaluations fall on
/// different linear pieces of the network (a ReLU or max-pool switch), where
/// the difference quotient does not estimate the derivative.
pub fn central_difference(inst: &Instance, obj: Objective, pseudo: &Mask, t: usize, k: usize, h: f64) -> Option<f64> {
    let base = inst.params.tensor(t).data[k];
    let mut plus = inst.params.clone();
    plus.data_mut(t)[k] = (f64::from(base) + h) as f32;
    let mut minus = inst.params.clone();
    minus.data_mut(t)[k] = (f64::from(base) - h) as f32;
    if patterns(inst, &plus) != patterns(inst, &minus) {
        return None;
    }
    let realized = f64::from(plus.tensor(t).data[k]) - f64::from(minus.tensor(t).data[k]);
    let fp = evaluate(inst, &plus, obj, pseudo).0;
    let fm = evaluate(inst, &minus, obj, pseudo).0;
    Some((fp - fm) / realized)
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

#[derive(Debug)]
pub struct Check {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub error: f64,
}

/// Compares analytic and numeric gradients at `per_partition` random
/// elements of each partition with a non-negligible analytic gradient.
/// Elements whose difference straddles a kink are redrawn and counted in
/// the second return value.
pub fn check_instance(seed: u64, obj: Objective, per_partition: usize) -> (Vec<Check>, usize) {
    let inst = instance(seed);
    let pseudo = pseudo_label(&inst);
    let (_, grads) = evaluate(&inst, &inst.params, obj, &pseudo);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5);
    let mut out = Vec::new();
    let mut straddled = 0;
    for part in [Partition::Adm, Partition::Bsm] {
        let candidates: Vec<(usize, usize)> = (0..inst.params.len())
            .filter(|&t| inst.params.tensor(t).partition == part)
            .flat_map(|t| (0..inst.params.tensor(t).numel()).map(move |k| (t, k)))
            .filter(|&(t, k)| grads.data[t][k].abs() > 1e-7)
            .collect();
        let want = per_partition.min(candidates.len());
        let mut done = 0;
        let mut attempts = 0;
        while done < want {
            attempts += 1;
            assert!(attempts <= 20 * want, "seed {seed}: too many kinks in {part:?}");
            let (t, k) = candidates[rng.random_range(0..candidates.len())];
            let Some(numeric) = central_difference(&inst, obj, &pseudo, t, k, STEP) else {
                straddled += 1;
                continue;
            };
            let analytic = grads.data[t][k];
            out.push(Check {
                tensor: inst.params.tensor(t).name.clone(),
                index: k,
                analytic,
                numeric,
                error: relative_error(analytic, numeric),
            });
            done += 1;
        }
    }
    (out, straddled)
}
