//! Objective functions. Every loss that depends on a probability map has a
//! `*_with_grad` form returning `dL/dp` per pixel alongside the value.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::GuidanceMaps;
use crate::netcore::{GradSet, ParamSet, Scope};
use crate::raster::{Mask, ProbMap, PROB_EPS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Focal exponent.
    pub gamma: f64,
    pub eps: f64,
    /// Weight of the sparse click loss.
    pub lambda_sparse: f64,
    /// Weight of the dense pseudo-label loss.
    pub lambda_dense: f64,
    /// Weight of the anchor regularizer.
    pub lambda_anchor: f64,
    pub gt_weight: f64,
    pub coarse_weight: f64,
    /// The dense loss is active once a session has at least this many clicks.
    pub dense_activation_clicks: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            eps: PROB_EPS,
            lambda_sparse: 1.0,
            lambda_dense: 10.0,
            lambda_anchor: 5e-3,
            gt_weight: 1.0,
            coarse_weight: 0.4,
            dense_activation_clicks: 4,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) {
            return Err(Error::InvalidArgument("gamma must be >= 0".into()));
        }
        if !(self.eps > 0.0 && self.eps < 0.5) {
            return Err(Error::InvalidArgument("eps must lie in (0, 0.5)".into()));
        }
        let weights = [
            self.lambda_sparse,
            self.lambda_dense,
            self.lambda_anchor,
            self.gt_weight,
            self.coarse_weight,
        ];
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::InvalidArgument("loss weights must be >= 0".into()));
        }
        Ok(())
    }
}

fn check_dims(p: &ProbMap, h: usize, w: usize, what: &str) -> Result<()> {
    if p.height() != h || p.width() != w {
        return Err(Error::Dimension(format!(
            "probability map {}x{} vs {what} {h}x{w}",
            p.height(),
            p.width()
        )));
    }
    Ok(())
}

/// Focal loss normalized by the total focal weight:
/// `sum (1-pt)^g * -ln(pt) / sum (1-pt)^g` with `pt = p` on foreground and
/// `1 - p` on background.
pub fn normalized_focal_loss(p: &ProbMap, y: &Mask, gamma: f64) -> Result<f64> {
    normalized_focal_loss_with_grad(p, y, gamma).map(|(v, _)| v)
}

pub fn normalized_focal_loss_with_grad(
    p: &ProbMap,
    y: &Mask,
    gamma: f64,
) -> Result<(f64, Vec<f64>)> {
    check_dims(p, y.height(), y.width(), "target")?;
    let n = p.as_slice().len();
    let mut weight = Vec::with_capacity(n);
    let mut nll = Vec::with_capacity(n);
    let (mut num, mut den) = (0.0, 0.0);
    for (&pv, &yv) in p.as_slice().iter().zip(y.as_slice()) {
        let pt = if yv == 1 { pv } else { 1.0 - pv };
        let w = (1.0 - pt).powf(gamma);
        let l = -pt.ln();
        num += w * l;
        den += w;
        weight.push(w);
        nll.push(l);
    }
    if den == 0.0 {
        return Ok((0.0, vec![0.0; n]));
    }
    let loss = num / den;
    let grad = p
        .as_slice()
        .iter()
        .zip(y.as_slice())
        .enumerate()
        .map(|(i, (&pv, &yv))| {
            let pt = if yv == 1 { pv } else { 1.0 - pv };
            // d/dpt of w = -g (1-pt)^(g-1); zero when g == 0
            let dw = if gamma == 0.0 {
                0.0
            } else {
                -gamma * (1.0 - pt).powf(gamma - 1.0)
            };
            let dnum = dw * nll[i] - weight[i] / pt;
            let dpt = (dnum - loss * dw) / den;
            if yv == 1 {
                dpt
            } else {
                -dpt
            }
        })
        .collect();
    Ok((loss, grad))
}

/// `sum((1-p) c_f)^2 / |c_f| + sum(p c_b)^2 / |c_b|`; a term whose disk map is
/// empty contributes 0.
pub fn sparse_click_loss(p: &ProbMap, g: &GuidanceMaps) -> Result<f64> {
    sparse_click_loss_with_grad(p, g).map(|(v, _)| v)
}

pub fn sparse_click_loss_with_grad(p: &ProbMap, g: &GuidanceMaps) -> Result<(f64, Vec<f64>)> {
    check_dims(p, g.height(), g.width(), "guidance")?;
    let nf = g.positive.count() as f64;
    let nb = g.negative.count() as f64;
    let mut grad = vec![0.0; p.as_slice().len()];
    let (mut lf, mut lb) = (0.0, 0.0);
    for (i, &pv) in p.as_slice().iter().enumerate() {
        if g.positive.as_slice()[i] == 1 {
            lf += (1.0 - pv) * (1.0 - pv);
            grad[i] -= 2.0 * (1.0 - pv) / nf;
        }
        if g.negative.as_slice()[i] == 1 {
            lb += pv * pv;
            grad[i] += 2.0 * pv / nb;
        }
    }
    let mut loss = 0.0;
    if nf > 0.0 {
        loss += lf / nf;
    }
    if nb > 0.0 {
        loss += lb / nb;
    }
    Ok((loss, grad))
}

/// Scoped tensor pairs of `theta` and the matching tensors of `anchor`.
fn scoped_pairs<'a>(
    theta: &'a ParamSet,
    anchor: &'a ParamSet,
    scope: Scope,
) -> Result<Vec<(usize, &'a [f32], &'a [f32])>> {
    let mut out = Vec::new();
    for (i, t) in theta.iter().enumerate() {
        if !scope.contains(t.partition) {
            continue;
        }
        let a = anchor.get(&t.name).ok_or_else(|| {
            Error::Structure(format!("anchor lacks tensor `{}`", t.name))
        })?;
        if a.shape != t.shape || a.partition != t.partition {
            return Err(Error::Structure(format!(
                "anchor tensor `{}` differs in shape or partition",
                t.name
            )));
        }
        out.push((i, t.data.as_slice(), a.data.as_slice()));
    }
    Ok(out)
}

/// Mean squared difference between `theta` and `anchor` over the tensors of
/// `theta` in `scope`. `anchor` may hold only the scoped tensors.
pub fn anchor_regularizer(theta: &ParamSet, anchor: &ParamSet, scope: Scope) -> Result<f64> {
    let pairs = scoped_pairs(theta, anchor, scope)?;
    let count: usize = pairs.iter().map(|(_, t, _)| t.len()).sum();
    if count == 0 {
        return Ok(0.0);
    }
    let sum: f64 = pairs
        .iter()
        .flat_map(|(_, t, a)| t.iter().zip(a.iter()))
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum();
    Ok(sum / count as f64)
}

/// Value and gradient with respect to `theta` (zero outside `scope`).
pub fn anchor_regularizer_with_grad(
    theta: &ParamSet,
    anchor: &ParamSet,
    scope: Scope,
) -> Result<(f64, GradSet)> {
    let value = anchor_regularizer(theta, anchor, scope)?;
    let pairs = scoped_pairs(theta, anchor, scope)?;
    let count: usize = pairs.iter().map(|(_, t, _)| t.len()).sum();
    let mut grads = GradSet::zeros_like(theta);
    if count > 0 {
        let k = 2.0 / count as f64;
        for (i, t, a) in pairs {
            for ((g, &x), &y) in grads.data[i].iter_mut().zip(t).zip(a) {
                *g = k * (f64::from(x) - f64::from(y));
            }
        }
    }
    Ok((value, grads))
}

pub fn total_adaptation_loss(sparse: f64, dense: f64, anchor: f64, cfg: &LossConfig) -> Result<f64> {
    if !(sparse.is_finite() && dense.is_finite() && anchor.is_finite()) {
        return Err(Error::NonFinite(format!(
            "loss components sparse={sparse} dense={dense} anchor={anchor}"
        )));
    }
    Ok(cfg.lambda_sparse * sparse + cfg.lambda_dense * dense + cfg.lambda_anchor * anchor)
}

/// `gt_weight * NFL(p, gt) + coarse_weight * NFL(p, coarse > 0.5)`.
pub fn training_loss(p_adm: &ProbMap, gt: &Mask, coarse: &ProbMap, cfg: &LossConfig) -> Result<f64> {
    training_loss_with_grad(p_adm, gt, coarse, cfg).map(|(v, _)| v)
}

pub fn training_loss_with_grad(
    p_adm: &ProbMap,
    gt: &Mask,
    coarse: &ProbMap,
    cfg: &LossConfig,
) -> Result<(f64, Vec<f64>)> {
    check_dims(coarse, gt.height(), gt.width(), "ground truth")?;
    let (lg, gg) = normalized_focal_loss_with_grad(p_adm, gt, cfg.gamma)?;
    let mut value = cfg.gt_weight * lg;
    let mut grad: Vec<f64> = gg.iter().map(|g| cfg.gt_weight * g).collect();
    if cfg.coarse_weight != 0.0 {
        let (lc, gc) = normalized_focal_loss_with_grad(p_adm, &coarse.binarize(0.5), cfg.gamma)?;
        value += cfg.coarse_weight * lc;
        for (a, b) in grad.iter_mut().zip(gc) {
            *a += cfg.coarse_weight * b;
        }
    }
    Ok((value, grad))
}
