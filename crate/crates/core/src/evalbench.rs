//! Robot-clicker evaluation: NoC, mIoU@k curves, forgetting decay and the
//! ADM × adaptation ablation.

use serde::{Deserialize, Serialize};

use crate::adapter::{AdaptConfig, AdaptMode, Session};
use crate::error::{Error, Result};
use crate::guidance::{connected_components, next_robot_click, Click, Polarity};
use crate::netcore::{Network, ParamSet};
use crate::raster::{iou, Mask, RasterImage, Sample};

pub const DEFAULT_TARGETS: [f64; 2] = [0.85, 0.90];
pub const DEFAULT_CAP: usize = 20;

/// Anything that turns a growing click list into masks, one image at a time.
pub trait Segmenter {
    /// `gt` is only for reference models such as [`OracleSegmenter`]; real
    /// models must ignore it.
    fn begin(&mut self, image: &RasterImage, gt: &Mask) -> Result<()>;
    fn click(&mut self, click: Click) -> Result<Mask>;
    fn end(&mut self) -> Result<()>;
}

/// The network driven through adaptation sessions. Parameters carry over
/// from one image to the next when the mode adapts.
pub struct ModelSegmenter<'a> {
    net: &'a Network,
    params: ParamSet,
    cfg: AdaptConfig,
    session: Option<Session>,
    counter: usize,
}

impl<'a> ModelSegmenter<'a> {
    pub fn new(net: &'a Network, params: ParamSet, cfg: AdaptConfig) -> Result<Self> {
        cfg.validate()?;
        net.check_params(&params)?;
        Ok(Self {
            net,
            params,
            cfg,
            session: None,
            counter: 0,
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn into_params(self) -> ParamSet {
        self.params
    }
}

impl Segmenter for ModelSegmenter<'_> {
    fn begin(&mut self, image: &RasterImage, _gt: &Mask) -> Result<()> {
        self.counter += 1;
        let id = format!("eval-{:05}", self.counter);
        self.session = Some(Session::begin(
            id,
            self.net,
            image.clone(),
            &self.params,
            self.cfg.clone(),
        )?);
        Ok(())
    }

    fn click(&mut self, click: Click) -> Result<Mask> {
        let s = self
            .session
            .as_mut()
            .ok_or_else(|| Error::Session("no active session".into()))?;
        Ok(s.process_click(self.net, click)?.binarize(0.5))
    }

    fn end(&mut self) -> Result<()> {
        let s = self
            .session
            .take()
            .ok_or_else(|| Error::Session("no active session".into()))?;
        let (_, params) = s.end()?;
        if self.cfg.mode != AdaptMode::Off {
            self.params = params;
        }
        Ok(())
    }
}

/// Emits the ground truth from the first click on.
#[derive(Default)]
pub struct OracleSegmenter {
    gt: Option<Mask>,
}

impl Segmenter for OracleSegmenter {
    fn begin(&mut self, _image: &RasterImage, gt: &Mask) -> Result<()> {
        self.gt = Some(gt.clone());
        Ok(())
    }

    fn click(&mut self, _click: Click) -> Result<Mask> {
        self.gt.clone().ok_or_else(|| Error::Session("no active session".into()))
    }

    fn end(&mut self) -> Result<()> {
        self.gt = None;
        Ok(())
    }
}

/// Never predicts any foreground.
#[derive(Default)]
pub struct EmptySegmenter {
    shape: (usize, usize),
}

impl Segmenter for EmptySegmenter {
    fn begin(&mut self, image: &RasterImage, _gt: &Mask) -> Result<()> {
        self.shape = (image.height(), image.width());
        Ok(())
    }

    fn click(&mut self, _click: Click) -> Result<Mask> {
        Ok(Mask::zeros(self.shape.0, self.shape.1))
    }

    fn end(&mut self) -> Result<()> {
        Ok(())
    }
}

/// Predicts the ground-truth components that contain a positive click.
#[derive(Default)]
pub struct CorrectiveOracle {
    gt: Option<Mask>,
    labels: Vec<u32>,
    chosen: Vec<u32>,
}

impl Segmenter for CorrectiveOracle {
    fn begin(&mut self, _image: &RasterImage, gt: &Mask) -> Result<()> {
        self.labels = connected_components(gt).0;
        self.gt = Some(gt.clone());
        self.chosen.clear();
        Ok(())
    }

    fn click(&mut self, click: Click) -> Result<Mask> {
        let gt = self.gt.as_ref().ok_or_else(|| Error::Session("no active session".into()))?;
        let label = self.labels[click.row * gt.width() + click.col];
        if click.polarity == Polarity::Positive && label != 0 && !self.chosen.contains(&label) {
            self.chosen.push(label);
        }
        let chosen = &self.chosen;
        let labels = &self.labels;
        Ok(Mask::from_fn(gt.height(), gt.width(), |r, c| {
            let l = labels[r * gt.width() + c];
            l != 0 && chosen.contains(&l)
        }))
    }

    fn end(&mut self) -> Result<()> {
        self.gt = None;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageResult {
    pub name: String,
    /// Clicks needed per target; `cap` when never reached.
    pub clicks: Vec<usize>,
    /// IoU after each click actually made.
    pub ious: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NocReport {
    pub targets: Vec<f64>,
    pub cap: usize,
    pub mean_noc: Vec<f64>,
    pub images: Vec<ImageResult>,
}

impl NocReport {
    pub fn mean_for(&self, target: f64) -> Option<f64> {
        self.targets
            .iter()
            .position(|t| (t - target).abs() < 1e-12)
            .map(|i| self.mean_noc[i])
    }
}

fn check_targets(targets: &[f64], cap: usize) -> Result<()> {
    if targets.is_empty() || targets.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
        return Err(Error::InvalidArgument("targets must lie in (0, 1]".into()));
    }
    if cap == 0 {
        return Err(Error::InvalidArgument("click cap must be >= 1".into()));
    }
    Ok(())
}

/// Robot-clicks one image. Stops once IoU reaches `stop_at`, when the mask is
/// perfect, or at `cap` clicks.
fn run_image(
    seg: &mut dyn Segmenter,
    sample: &Sample,
    cap: usize,
    stop_at: f64,
) -> Result<Vec<f64>> {
    if sample.mask.is_empty() {
        return Err(Error::EmptyMask(format!(
            "evaluation image `{}` has no foreground",
            sample.name
        )));
    }
    seg.begin(&sample.image, &sample.mask)?;
    let mut pred = Mask::zeros(sample.mask.height(), sample.mask.width());
    let mut ious = Vec::with_capacity(cap);
    for k in 1..=cap {
        if pred == sample.mask {
            break;
        }
        let click = next_robot_click(&pred, &sample.mask, k as u32)?;
        pred = seg.click(click)?;
        let v = iou(&pred, &sample.mask)?;
        ious.push(v);
        if v >= stop_at {
            break;
        }
    }
    seg.end()?;
    Ok(ious)
}

/// Number of clicks to reach each target, per image in dataset order.
pub fn noc_eval(
    seg: &mut dyn Segmenter,
    dataset: &[Sample],
    targets: &[f64],
    cap: usize,
) -> Result<NocReport> {
    check_targets(targets, cap)?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("evaluation set is empty".into()));
    }
    let stop_at = targets.iter().copied().fold(f64::MIN, f64::max);
    let mut images = Vec::with_capacity(dataset.len());
    for sample in dataset {
        let ious = run_image(seg, sample, cap, stop_at)?;
        let clicks = targets
            .iter()
            .map(|&t| ious.iter().position(|&v| v >= t).map_or(cap, |k| k + 1))
            .collect();
        images.push(ImageResult {
            name: sample.name.clone(),
            clicks,
            ious,
        });
    }
    let mean_noc = (0..targets.len())
        .map(|i| images.iter().map(|r| r.clicks[i] as f64).sum::<f64>() / images.len() as f64)
        .collect();
    Ok(NocReport {
        targets: targets.to_vec(),
        cap,
        mean_noc,
        images,
    })
}

/// Mean IoU after exactly k clicks for k = 1..=k_max. An image whose mask
/// becomes perfect keeps IoU 1 for the remaining entries.
pub fn miou_curve(seg: &mut dyn Segmenter, dataset: &[Sample], k_max: usize) -> Result<Vec<f64>> {
    if dataset.is_empty() || k_max == 0 {
        return Err(Error::InvalidArgument("need a nonempty set and k_max >= 1".into()));
    }
    let mut sums = vec![0.0; k_max];
    for sample in dataset {
        let ious = run_image(seg, sample, k_max, f64::INFINITY)?;
        let last = *ious.last().expect("at least one click");
        for (k, s) in sums.iter_mut().enumerate() {
            *s += ious.get(k).copied().unwrap_or(last);
        }
    }
    Ok(sums.into_iter().map(|s| s / dataset.len() as f64).collect())
}

/// CSV with header `k,miou`.
pub fn curve_csv(curve: &[f64]) -> String {
    let mut out = String::from("k,miou\n");
    for (k, v) in curve.iter().enumerate() {
        out.push_str(&format!("{},{v:.6}\n", k + 1));
    }
    out
}

/// Relative change in percent, `100 (post - base) / base`.
pub fn decay(base: f64, post: f64) -> Result<f64> {
    if !(base > 0.0) || !post.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "decay needs a positive baseline (got base={base}, post={post})"
        )));
    }
    Ok(100.0 * (post - base) / base)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayReport {
    pub targets: Vec<f64>,
    pub mode: AdaptMode,
    /// Pristine parameters, adaptation off.
    pub baseline: Vec<f64>,
    /// Adapted parameters, adaptation off.
    pub post: Vec<f64>,
    pub decay: Vec<f64>,
    /// Pristine parameters with adaptation in `mode` during evaluation.
    pub baseline_adapting: Option<Vec<f64>>,
    /// Adapted parameters with adaptation in `mode` during evaluation.
    pub post_adapting: Option<Vec<f64>>,
    pub decay_adapting: Option<Vec<f64>>,
    /// Mean NoC over the adaptation set while the parameters evolved.
    pub adapt_noc: Vec<f64>,
}

/// Baseline on `eval_set`, adaptation over `adapt_set`, then re-evaluation
/// of `eval_set` from the evolved parameters. With `deployed`, both eval
/// runs are repeated with adaptation in `cfg.mode`. Returns the report and
/// the evolved parameters.
#[allow(clippy::too_many_arguments)]
pub fn forgetting_protocol(
    net: &Network,
    params: &ParamSet,
    adapt_set: &[Sample],
    eval_set: &[Sample],
    cfg: &AdaptConfig,
    targets: &[f64],
    cap: usize,
    deployed: bool,
) -> Result<(DecayReport, ParamSet)> {
    let off = cfg.clone().with_mode(AdaptMode::Off);
    let run = |p: &ParamSet, c: &AdaptConfig, data: &[Sample]| -> Result<(NocReport, ParamSet)> {
        let mut seg = ModelSegmenter::new(net, p.clone(), c.clone())?;
        let report = noc_eval(&mut seg, data, targets, cap)?;
        Ok((report, seg.into_params()))
    };
    let (base, _) = run(params, &off, eval_set)?;
    let (adapt, evolved) = run(params, cfg, adapt_set)?;
    let (post, _) = run(&evolved, &off, eval_set)?;
    let (base_adapting, post_adapting) = if deployed {
        (Some(run(params, cfg, eval_set)?.0), Some(run(&evolved, cfg, eval_set)?.0))
    } else {
        (None, None)
    };
    let decays = |a: &NocReport, b: &NocReport| -> Result<Vec<f64>> {
        a.mean_noc
            .iter()
            .zip(&b.mean_noc)
            .map(|(&x, &y)| decay(x, y))
            .collect()
    };
    let report = DecayReport {
        targets: targets.to_vec(),
        mode: cfg.mode,
        decay: decays(&base, &post)?,
        decay_adapting: match (&base_adapting, &post_adapting) {
            (Some(a), Some(b)) => Some(decays(a, b)?),
            _ => None,
        },
        baseline: base.mean_noc,
        post: post.mean_noc,
        baseline_adapting: base_adapting.map(|r| r.mean_noc),
        post_adapting: post_adapting.map(|r| r.mean_noc),
        adapt_noc: adapt.mean_noc,
    };
    Ok((report, evolved))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub adm: bool,
    pub optim: bool,
    pub mean_noc: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub targets: Vec<f64>,
    pub mode: AdaptMode,
    pub cells: Vec<AblationCell>,
}

impl AblationReport {
    pub fn cell(&self, adm: bool, optim: bool) -> &AblationCell {
        self.cells
            .iter()
            .find(|c| c.adm == adm && c.optim == optim)
            .expect("all four cells present")
    }
}

/// Four evaluations from the same starting parameters. "Optim on" uses
/// `cfg.mode` (local when that is off); "ADM off" outputs the coarse map.
pub fn ablation_grid(
    net: &Network,
    params: &ParamSet,
    dataset: &[Sample],
    cfg: &AdaptConfig,
    targets: &[f64],
    cap: usize,
) -> Result<AblationReport> {
    let on_mode = match cfg.mode {
        AdaptMode::Off => AdaptMode::Local,
        m => m,
    };
    let mut cells = Vec::with_capacity(4);
    for adm in [true, false] {
        for optim in [true, false] {
            let c = AdaptConfig {
                mode: if optim { on_mode } else { AdaptMode::Off },
                use_adm: adm,
                ..cfg.clone()
            };
            let mut seg = ModelSegmenter::new(net, params.clone(), c)?;
            let r = noc_eval(&mut seg, dataset, targets, cap)?;
            cells.push(AblationCell {
                adm,
                optim,
                mean_noc: r.mean_noc,
            });
        }
    }
    Ok(AblationReport {
        targets: targets.to_vec(),
        mode: on_mode,
        cells,
    })
}
