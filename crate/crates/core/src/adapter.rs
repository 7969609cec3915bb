//! Test-time continual adaptation.
//!
//! A [`Session`] owns a working copy of the parameters for one image. Each
//! click re-runs the model and, unless the mode is `Off`, takes a few
//! gradient steps on the click-driven objective before returning the refined
//! map. Ending the session hands back the adapted parameters, which become
//! the live parameters and the anchor source for the next session.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::{render_disks, Click, GuidanceMaps, DISK_RADIUS};
use crate::losses::{
    anchor_regularizer_with_grad, normalized_focal_loss_with_grad, sparse_click_loss_with_grad,
    total_adaptation_loss, LossConfig,
};
use crate::netcore::tensor::Tensor3;
use crate::netcore::{ForwardTape, GradSet, Network, ParamSet, Scope};
use crate::optim::{LearningRates, Optimizer, OptimizerKind};
use crate::raster::{Mask, ProbMap, RasterImage};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdaptMode {
    Off,
    /// ADM only.
    Local,
    /// ADM plus BSM at its own (much smaller) rate.
    Global,
}

impl std::str::FromStr for AdaptMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(Self::Off),
            "local" => Ok(Self::Local),
            "global" => Ok(Self::Global),
            other => Err(Error::InvalidArgument(format!(
                "unknown mode `{other}` (expected off, local or global)"
            ))),
        }
    }
}

impl std::fmt::Display for AdaptMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Off => "off",
            Self::Local => "local",
            Self::Global => "global",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    pub mode: AdaptMode,
    pub lr_adm: f64,
    pub lr_bsm: f64,
    pub steps_per_click: usize,
    pub loss: LossConfig,
    pub optimizer: OptimizerKind,
    /// With the ADM bypassed the coarse map is the output, and adaptation
    /// (if on) updates the BSM at `lr_adm`.
    pub use_adm: bool,
    /// Parameter snapshots kept for undo.
    pub undo_depth: usize,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            mode: AdaptMode::Local,
            lr_adm: 1e-4,
            lr_bsm: 1e-6,
            steps_per_click: 3,
            loss: LossConfig::default(),
            optimizer: OptimizerKind::Sgd,
            use_adm: true,
            undo_depth: 50,
        }
    }
}

impl AdaptConfig {
    pub fn with_mode(mut self, mode: AdaptMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps_per_click == 0 {
            return Err(Error::InvalidArgument("steps_per_click must be >= 1".into()));
        }
        if !(self.lr_adm >= 0.0 && self.lr_bsm >= 0.0) {
            return Err(Error::InvalidArgument("learning rates must be >= 0".into()));
        }
        if self.mode == AdaptMode::Global
            && self.use_adm
            && (self.lr_bsm - 0.01 * self.lr_adm).abs() > 1e-12 * self.lr_adm.max(1e-300)
        {
            log::warn!(
                "global mode with lr_bsm={} instead of 1% of lr_adm={}",
                self.lr_bsm,
                self.lr_adm
            );
        }
        self.loss.validate()
    }

    /// Tensors updated by adaptation, or `None` when adaptation is off.
    pub fn scope(&self) -> Option<Scope> {
        match (self.mode, self.use_adm) {
            (AdaptMode::Off, _) => None,
            (_, false) => Some(Scope::Bsm),
            (AdaptMode::Local, true) => Some(Scope::Adm),
            (AdaptMode::Global, true) => Some(Scope::All),
        }
    }

    fn rates(&self) -> LearningRates {
        match (self.mode, self.use_adm) {
            (AdaptMode::Off, _) => LearningRates { bsm: 0.0, adm: 0.0 },
            (_, false) => LearningRates { bsm: self.lr_adm, adm: 0.0 },
            (AdaptMode::Local, true) => LearningRates { bsm: 0.0, adm: self.lr_adm },
            (AdaptMode::Global, true) => LearningRates {
                bsm: self.lr_bsm,
                adm: self.lr_adm,
            },
        }
    }
}

/// Loss components of one adaptation step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub session: String,
    pub ordinal: u32,
    pub step: usize,
    pub sparse: f64,
    pub dense: f64,
    pub anchor: f64,
    pub total: f64,
}

impl std::fmt::Display for StepRecord {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "session={} ordinal={} step={} ls={:.6e} ld={:.6e} lr={:.6e} lt={:.6e}",
            self.session, self.ordinal, self.step, self.sparse, self.dense, self.anchor, self.total
        )
    }
}

/// Coarse and refined maps for a click set, without adaptation.
pub fn predict(
    net: &Network,
    params: &ParamSet,
    image: &RasterImage,
    clicks: &[Click],
    use_adm: bool,
) -> Result<(ProbMap, ProbMap)> {
    let g = render_disks(clicks, image.height(), image.width(), DISK_RADIUS)?;
    let input = Network::bsm_input(image, &g)?;
    let (coarse, _) = net.bsm_forward_tensor(input.clone(), params)?;
    let refined = if use_adm {
        net.adm_forward_tensor(&input, &coarse, params)?.0
    } else {
        coarse.clone()
    };
    Ok((coarse, refined))
}

struct Forward {
    coarse: ProbMap,
    /// Recorded only when the BSM is being adapted.
    bsm_tape: Option<ForwardTape>,
    refined: ProbMap,
    adm_tape: Option<ForwardTape>,
}

struct UndoEntry {
    scoped: Option<ParamSet>,
    optimizer: Optimizer,
    coarse: Option<ProbMap>,
    refined: Option<ProbMap>,
    steps_logged: usize,
}

/// One image being annotated.
pub struct Session {
    id: String,
    image: RasterImage,
    cfg: AdaptConfig,
    params: ParamSet,
    anchor: Option<ParamSet>,
    optimizer: Optimizer,
    clicks: Vec<Click>,
    guidance: GuidanceMaps,
    input: Tensor3,
    coarse: Option<ProbMap>,
    refined: Option<ProbMap>,
    log: Vec<StepRecord>,
    history: VecDeque<UndoEntry>,
    /// Coarse map for the current clicks while BSM tensors are not adapting.
    coarse_cache: Option<ProbMap>,
}

impl Session {
    /// Starts a session on a private copy of `params`. Outside mode `Off` the
    /// adaptation scope is snapshotted as the anchor.
    pub fn begin(
        id: impl Into<String>,
        net: &Network,
        image: RasterImage,
        params: &ParamSet,
        cfg: AdaptConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        net.check_params(params)?;
        let guidance = GuidanceMaps::empty(image.height(), image.width());
        let input = Network::bsm_input(&image, &guidance)?;
        let anchor = cfg.scope().map(|s| params.subset(s));
        Ok(Self {
            id: id.into(),
            image,
            optimizer: Optimizer::new(cfg.optimizer),
            cfg,
            params: params.clone(),
            anchor,
            clicks: Vec::new(),
            guidance,
            input,
            coarse: None,
            refined: None,
            log: Vec::new(),
            history: VecDeque::new(),
            coarse_cache: None,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn config(&self) -> &AdaptConfig {
        &self.cfg
    }

    pub fn image(&self) -> &RasterImage {
        &self.image
    }

    pub fn clicks(&self) -> &[Click] {
        &self.clicks
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn anchor(&self) -> Option<&ParamSet> {
        self.anchor.as_ref()
    }

    pub fn coarse(&self) -> Option<&ProbMap> {
        self.coarse.as_ref()
    }

    pub fn refined(&self) -> Option<&ProbMap> {
        self.refined.as_ref()
    }

    pub fn step_log(&self) -> &[StepRecord] {
        &self.log
    }

    /// Current binary mask; empty before the first click.
    pub fn mask(&self) -> Mask {
        match &self.refined {
            Some(p) => p.binarize(0.5),
            None => Mask::zeros(self.image.height(), self.image.width()),
        }
    }

    pub fn can_undo(&self) -> bool {
        !self.history.is_empty()
    }

    fn forward(&mut self, net: &Network) -> Result<Forward> {
        let (coarse, bsm_tape) = if self.cfg.rates().bsm > 0.0 {
            let (c, t) = net.bsm_forward_tensor(self.input.clone(), &self.params)?;
            (c, Some(t))
        } else {
            match &self.coarse_cache {
                Some(c) => (c.clone(), None),
                None => {
                    let (c, _) = net.bsm_forward_tensor(self.input.clone(), &self.params)?;
                    self.coarse_cache = Some(c.clone());
                    (c, None)
                }
            }
        };
        let (refined, adm_tape) = if self.cfg.use_adm {
            let (r, t) = net.adm_forward_tensor(&self.input, &coarse, &self.params)?;
            (r, Some(t))
        } else {
            (coarse.clone(), None)
        };
        Ok(Forward {
            coarse,
            bsm_tape,
            refined,
            adm_tape,
        })
    }

    /// Applies `click`, adapts, and returns the refined map.
    pub fn process_click(&mut self, net: &Network, click: Click) -> Result<ProbMap> {
        let expected = self.clicks.len() as u32 + 1;
        if click.ordinal != expected {
            return Err(Error::Ordinal {
                expected,
                got: click.ordinal,
            });
        }
        click.check_bounds(self.image.height(), self.image.width())?;

        let entry = UndoEntry {
            scoped: self.cfg.scope().map(|s| self.params.subset(s)),
            optimizer: self.optimizer.clone(),
            coarse: self.coarse.clone(),
            refined: self.refined.clone(),
            steps_logged: self.log.len(),
        };
        self.clicks.push(click);
        let result = self.apply_clicks(net);
        if let Err(e) = result {
            self.clicks.pop();
            self.restore(entry)?;
            return Err(e);
        }
        self.history.push_back(entry);
        while self.history.len() > self.cfg.undo_depth {
            self.history.pop_front();
        }
        Ok(self.refined.clone().expect("set by apply_clicks"))
    }

    fn apply_clicks(&mut self, net: &Network) -> Result<()> {
        self.guidance = render_disks(
            &self.clicks,
            self.image.height(),
            self.image.width(),
            DISK_RADIUS,
        )?;
        self.input = Network::bsm_input(&self.image, &self.guidance)?;
        self.coarse_cache = None;
        if self.cfg.scope().is_some() {
            for _ in 0..self.cfg.steps_per_click {
                self.adaptation_step(net)?;
            }
        }
        let fwd = self.forward(net)?;
        self.coarse = Some(fwd.coarse);
        self.refined = Some(fwd.refined);
        Ok(())
    }

    fn restore(&mut self, entry: UndoEntry) -> Result<()> {
        if let Some(scoped) = &entry.scoped {
            self.params.assign(scoped)?;
        }
        self.optimizer = entry.optimizer;
        self.coarse = entry.coarse;
        self.refined = entry.refined;
        self.log.truncate(entry.steps_logged);
        self.guidance = render_disks(
            &self.clicks,
            self.image.height(),
            self.image.width(),
            DISK_RADIUS,
        )?;
        self.input = Network::bsm_input(&self.image, &self.guidance)?;
        self.coarse_cache = None;
        Ok(())
    }

    /// Removes the last click and restores the parameters, optimizer state
    /// and maps from before it.
    pub fn undo(&mut self) -> Result<Mask> {
        if self.clicks.is_empty() {
            return Err(Error::Session("nothing to undo".into()));
        }
        let entry = self.history.pop_back().ok_or_else(|| {
            Error::Session(format!(
                "undo history exhausted (depth {})",
                self.cfg.undo_depth
            ))
        })?;
        self.clicks.pop();
        self.restore(entry)?;
        Ok(self.mask())
    }

    /// One gradient step on the total adaptation loss at the current click
    /// set. On a non-finite loss or update the parameters are left as they
    /// were before the step.
    pub fn adaptation_step(&mut self, net: &Network) -> Result<StepRecord> {
        if self.clicks.is_empty() {
            return Err(Error::Session("adaptation needs at least one click".into()));
        }
        let scope = self
            .cfg
            .scope()
            .ok_or_else(|| Error::Session("adaptation is off".into()))?;
        let fwd = self.forward(net)?;
        let anchor = self.anchor.as_ref().expect("anchor exists whenever scope does");
        let lc = &self.cfg.loss;

        let (sparse, gs) = sparse_click_loss_with_grad(&fwd.refined, &self.guidance)?;
        let (dense, gd) = if self.clicks.len() >= lc.dense_activation_clicks {
            let pseudo = fwd.refined.binarize(0.5);
            normalized_focal_loss_with_grad(&fwd.refined, &pseudo, lc.gamma)?
        } else {
            (0.0, vec![0.0; gs.len()])
        };
        let (anchor_loss, ga) = anchor_regularizer_with_grad(&self.params, anchor, scope)?;
        let total = total_adaptation_loss(sparse, dense, anchor_loss, lc)?;
        let record = StepRecord {
            session: self.id.clone(),
            ordinal: self.clicks.len() as u32,
            step: self.log.iter().filter(|r| r.ordinal == self.clicks.len() as u32).count() + 1,
            sparse,
            dense,
            anchor: anchor_loss,
            total,
        };
        if !total.is_finite() {
            return Err(Error::NonFinite(format!("adaptation loss: {record}")));
        }

        let grad_p: Vec<f64> = gs
            .iter()
            .zip(&gd)
            .map(|(a, b)| lc.lambda_sparse * a + lc.lambda_dense * b)
            .collect();
        let mut grads = GradSet::zeros_like(&self.params);
        let rates = self.cfg.rates();
        let grad_coarse = match &fwd.adm_tape {
            Some(tape) => {
                let back = net.backward_with(tape, &self.params, &grad_p, rates.bsm > 0.0)?;
                grads.add_assign(&back.grads);
                back.coarse_grad
            }
            None => Some(grad_p),
        };
        if rates.bsm > 0.0 {
            let gc = grad_coarse.expect("coarse gradient requested");
            let tape = fwd.bsm_tape.as_ref().expect("recorded while the BSM adapts");
            grads.add_assign(&net.backward(tape, &self.params, &gc)?.grads);
        }
        let mut ga = ga;
        ga.scale(lc.lambda_anchor);
        grads.add_assign(&ga);

        let before = self.params.subset(scope);
        let outcome = self.optimizer.step(&mut self.params, &grads, rates);
        let finite = self
            .params
            .iter()
            .filter(|t| scope.contains(t.partition))
            .all(|t| t.data.iter().all(|v| v.is_finite()));
        if outcome.is_err() || !finite {
            self.params.assign(&before)?;
            outcome?;
            return Err(Error::NonFinite(format!("parameter update at {record}")));
        }
        log::debug!("{record}");
        self.log.push(record.clone());
        Ok(record)
    }

    /// Final mask and the session's parameters.
    pub fn end(self) -> Result<(Mask, ParamSet)> {
        if self.clicks.is_empty() {
            return Err(Error::Session("session ended without any click".into()));
        }
        Ok((self.mask(), self.params))
    }
}
