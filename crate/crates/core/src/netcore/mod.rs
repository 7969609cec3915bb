//! The segmentation network: an encoder-decoder basic segmentation module
//! (BSM) producing a coarse mask, and an adaptation module (ADM) of three
//! atrous blocks plus a plain convolution that refines it.
//!
//! Both modules are small op graphs evaluated in f64. A forward pass returns
//! a [`ForwardTape`] holding every intermediate activation; [`Network::backward`]
//! replays it in reverse to produce parameter gradients.

mod checkpoint;
mod params;
pub mod tensor;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use params::{partition, GradSet, ParamSet, ParamTensor, Partition, Scope};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::GuidanceMaps;
use crate::raster::{ProbMap, RasterImage, PROB_EPS};
use tensor::Tensor3;

/// RGB plus positive and negative disk maps.
pub const BSM_INPUT_CHANNELS: usize = 5;
/// BSM input plus the coarse mask.
pub const ADM_INPUT_CHANNELS: usize = 6;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Number of 2x downsampling stages in the BSM.
    pub bsm_depth: usize,
    /// Channels at full resolution.
    pub bsm_base_width: usize,
    /// Extra channels per level below full resolution.
    pub bsm_width_step: usize,
    /// Channels of the three atrous blocks.
    pub adm_widths: [usize; 3],
    pub adm_dilations: [usize; 3],
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            bsm_depth: 4,
            bsm_base_width: 16,
            bsm_width_step: 8,
            adm_widths: [16, 16, 16],
            adm_dilations: [2, 4, 8],
        }
    }
}

impl ModelConfig {
    /// A small configuration for tests on 8x8 inputs.
    pub fn tiny() -> Self {
        Self {
            bsm_depth: 2,
            bsm_base_width: 4,
            bsm_width_step: 2,
            adm_widths: [4, 4, 4],
            adm_dilations: [1, 2, 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bsm_depth == 0 {
            return Err(Error::InvalidArgument("BSM depth must be >= 1".into()));
        }
        if self.bsm_base_width < 4 || self.adm_widths.iter().any(|&w| w < 4) {
            return Err(Error::InvalidArgument("channel widths must be >= 4".into()));
        }
        let d = self.adm_dilations;
        if d[0] == 0 || !(d[0] < d[1] && d[1] < d[2]) {
            return Err(Error::InvalidArgument(format!(
                "ADM dilation rates must be positive and strictly increasing, got {d:?}"
            )));
        }
        Ok(())
    }

    fn bsm_width(&self, level: usize) -> usize {
        self.bsm_base_width + self.bsm_width_step * level
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Conv {
        src: usize,
        weight: usize,
        bias: usize,
        out: usize,
        kernel: usize,
        dilation: usize,
        relu: bool,
    },
    MaxPool {
        src: usize,
    },
    Upsample {
        src: usize,
    },
    Concat {
        a: usize,
        b: usize,
    },
    /// `src + gain * logit(coarse)`, the coarse mask being the last input
    /// channel.
    CoarseSkip {
        src: usize,
        gain: usize,
    },
}

/// Parameter layout entry.
#[derive(Clone, Debug)]
struct Slot {
    name: String,
    shape: Vec<usize>,
    partition: Partition,
    /// Init bound is `sqrt(gain / fan_in)`; zero for biases.
    gain: f64,
    fan_in: usize,
    /// Constant initial value, overriding the uniform draw.
    fill: Option<f32>,
}

/// An op list whose last node is a one-channel logit map.
#[derive(Clone, Debug)]
struct Graph {
    ops: Vec<Op>,
    input_channels: usize,
}

struct Builder<'a> {
    ops: Vec<Op>,
    slots: &'a mut Vec<Slot>,
    partition: Partition,
}

impl Builder<'_> {
    fn push(&mut self, op: Op) -> usize {
        self.ops.push(op);
        self.ops.len() - 1
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        name: &str,
        src: usize,
        in_ch: usize,
        out: usize,
        kernel: usize,
        dilation: usize,
        relu: bool,
    ) -> usize {
        let fan_in = in_ch * kernel * kernel;
        let gain = if relu { 6.0 } else { 3.0 };
        self.slots.push(Slot {
            name: format!("{name}.weight"),
            shape: vec![out, in_ch, kernel, kernel],
            partition: self.partition,
            gain,
            fan_in,
            fill: None,
        });
        let weight = self.slots.len() - 1;
        self.slots.push(Slot {
            name: format!("{name}.bias"),
            shape: vec![out],
            partition: self.partition,
            gain: 0.0,
            fan_in,
            fill: None,
        });
        let bias = self.slots.len() - 1;
        self.push(Op::Conv {
            src,
            weight,
            bias,
            out,
            kernel,
            dilation,
            relu,
        })
    }
}

fn build_bsm(cfg: &ModelConfig, slots: &mut Vec<Slot>) -> Graph {
    let mut b = Builder {
        ops: Vec::new(),
        slots,
        partition: Partition::Bsm,
    };
    let input = b.push(Op::Input);
    let mut skips = Vec::new();
    let mut cur = input;
    let mut ch = BSM_INPUT_CHANNELS;
    for level in 0..cfg.bsm_depth {
        let w = cfg.bsm_width(level);
        cur = b.conv(&format!("bsm.enc{level}"), cur, ch, w, 3, 1, true);
        skips.push((cur, w));
        ch = w;
        cur = b.push(Op::MaxPool { src: cur });
    }
    let w = cfg.bsm_width(cfg.bsm_depth);
    cur = b.conv("bsm.bottleneck0", cur, ch, w, 3, 1, true);
    cur = b.conv("bsm.bottleneck1", cur, w, w, 3, 1, true);
    ch = w;
    for level in (0..cfg.bsm_depth).rev() {
        let (skip, skip_ch) = skips[level];
        let up = b.push(Op::Upsample { src: cur });
        let cat = b.push(Op::Concat { a: up, b: skip });
        cur = b.conv(&format!("bsm.dec{level}"), cat, ch + skip_ch, skip_ch, 3, 1, true);
        ch = skip_ch;
    }
    b.conv("bsm.head", cur, ch, 1, 1, 1, false);
    Graph {
        ops: b.ops,
        input_channels: BSM_INPUT_CHANNELS,
    }
}

fn build_adm(cfg: &ModelConfig, slots: &mut Vec<Slot>) -> Graph {
    let mut b = Builder {
        ops: Vec::new(),
        slots,
        partition: Partition::Adm,
    };
    let mut cur = b.push(Op::Input);
    let mut ch = ADM_INPUT_CHANNELS;
    for k in 0..3 {
        let w = cfg.adm_widths[k];
        cur = b.conv(
            &format!("adm.atrous{k}.dilated"),
            cur,
            ch,
            w,
            3,
            cfg.adm_dilations[k],
            true,
        );
        cur = b.conv(&format!("adm.atrous{k}.mix"), cur, w, w, 1, 1, false);
        ch = w;
    }
    let head = b.conv("adm.head", cur, ch, 1, 3, 1, false);
    b.slots.push(Slot {
        name: "adm.skip.gain".into(),
        shape: vec![1],
        partition: Partition::Adm,
        gain: 0.0,
        fan_in: 1,
        fill: Some(1.0),
    });
    let gain = b.slots.len() - 1;
    b.push(Op::CoarseSkip { src: head, gain });
    Graph {
        ops: b.ops,
        input_channels: ADM_INPUT_CHANNELS,
    }
}

/// Recorded activations of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTape {
    module: Partition,
    stamp: u64,
    values: Vec<Tensor3>,
    argmax: Vec<Option<Vec<u32>>>,
}

impl ForwardTape {
    pub fn module(&self) -> Partition {
        self.module
    }

    /// Output logits of the pass.
    pub fn logits(&self) -> &[f64] {
        &self.values.last().expect("graph has an output").data
    }
}

/// Result of a backward pass.
#[derive(Clone, Debug)]
pub struct Backward {
    pub grads: GradSet,
    /// Gradient with respect to the coarse-mask input channel (ADM tapes,
    /// when requested).
    pub coarse_grad: Option<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct Network {
    config: ModelConfig,
    slots: Vec<Slot>,
    bsm: Graph,
    adm: Graph,
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Network {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut slots = Vec::new();
        let bsm = build_bsm(&config, &mut slots);
        let adm = build_adm(&config, &mut slots);
        Ok(Self {
            config,
            slots,
            bsm,
            adm,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Fan-in scaled uniform weights and zero biases, reproducible from `seed`.
    pub fn init_params(&self, seed: u64) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = self
            .slots
            .iter()
            .map(|s| {
                let n: usize = s.shape.iter().product();
                let bound = (s.gain / s.fan_in as f64).sqrt();
                let data = if let Some(v) = s.fill {
                    vec![v; n]
                } else if s.gain == 0.0 {
                    vec![0.0; n]
                } else {
                    (0..n)
                        .map(|_| rng.random_range(-bound..bound) as f32)
                        .collect()
                };
                ParamTensor {
                    name: s.name.clone(),
                    shape: s.shape.clone(),
                    partition: s.partition,
                    data,
                }
            })
            .collect();
        ParamSet::new(tensors).expect("layout names are unique")
    }

    /// Verifies that `params` has exactly this network's layout.
    pub fn check_params(&self, params: &ParamSet) -> Result<()> {
        for (i, s) in self.slots.iter().enumerate() {
            let t = params.get(&s.name).ok_or_else(|| {
                Error::Structure(format!("missing tensor `{}`", s.name))
            })?;
            if t.shape != s.shape {
                return Err(Error::ShapeMismatch {
                    name: s.name.clone(),
                    expected: s.shape.clone(),
                    found: t.shape.clone(),
                });
            }
            if t.partition != s.partition {
                return Err(Error::Partition(format!(
                    "tensor `{}` tagged {:?}, expected {:?}",
                    s.name, t.partition, s.partition
                )));
            }
            if params.position(&s.name) != Some(i) {
                return Err(Error::Structure(format!("tensor `{}` out of order", s.name)));
            }
        }
        if params.len() != self.slots.len() {
            return Err(Error::Structure(format!(
                "expected {} tensors, found {}",
                self.slots.len(),
                params.len()
            )));
        }
        Ok(())
    }

    /// The five-channel BSM input: RGB, positive disks, negative disks.
    pub fn bsm_input(image: &RasterImage, guidance: &GuidanceMaps) -> Result<Tensor3> {
        let (h, w) = (image.height(), image.width());
        if guidance.height() != h || guidance.width() != w {
            return Err(Error::Dimension(format!(
                "guidance {}x{} vs image {h}x{w}",
                guidance.height(),
                guidance.width()
            )));
        }
        let mut t = Tensor3::zeros(BSM_INPUT_CHANNELS, h, w);
        let hw = h * w;
        for r in 0..h {
            for c in 0..w {
                let i = r * w + c;
                for ch in 0..3 {
                    t.data[ch * hw + i] = image.value(r, c, ch);
                }
                t.data[3 * hw + i] = f64::from(guidance.positive.as_slice()[i]);
                t.data[4 * hw + i] = f64::from(guidance.negative.as_slice()[i]);
            }
        }
        Ok(t)
    }

    pub fn bsm_forward(
        &self,
        image: &RasterImage,
        guidance: &GuidanceMaps,
        params: &ParamSet,
    ) -> Result<(ProbMap, ForwardTape)> {
        self.bsm_forward_tensor(Self::bsm_input(image, guidance)?, params)
    }

    pub fn bsm_forward_tensor(
        &self,
        input: Tensor3,
        params: &ParamSet,
    ) -> Result<(ProbMap, ForwardTape)> {
        let factor = 1 << self.config.bsm_depth;
        if input.height % factor != 0 || input.width % factor != 0 {
            return Err(Error::Dimension(format!(
                "BSM input {}x{} must be divisible by {factor}",
                input.height, input.width
            )));
        }
        self.run(&self.bsm, Partition::Bsm, input, params)
    }

    pub fn adm_forward(
        &self,
        image: &RasterImage,
        guidance: &GuidanceMaps,
        coarse: &ProbMap,
        params: &ParamSet,
    ) -> Result<(ProbMap, ForwardTape)> {
        self.adm_forward_tensor(&Self::bsm_input(image, guidance)?, coarse, params)
    }

    /// ADM pass over a precomputed BSM input and a coarse mask.
    pub fn adm_forward_tensor(
        &self,
        bsm_input: &Tensor3,
        coarse: &ProbMap,
        params: &ParamSet,
    ) -> Result<(ProbMap, ForwardTape)> {
        if bsm_input.channels != BSM_INPUT_CHANNELS
            || coarse.height() != bsm_input.height
            || coarse.width() != bsm_input.width
        {
            return Err(Error::Dimension(format!(
                "ADM input {}x{}x{} with coarse {}x{}",
                bsm_input.channels,
                bsm_input.height,
                bsm_input.width,
                coarse.height(),
                coarse.width()
            )));
        }
        let coarse_t = Tensor3::from_vec(
            1,
            coarse.height(),
            coarse.width(),
            coarse.as_slice().to_vec(),
        );
        let input = tensor::concat(bsm_input, &coarse_t);
        self.run(&self.adm, Partition::Adm, input, params)
    }

    fn weights(&self, params: &ParamSet, graph: &Graph) -> Result<Vec<Option<Vec<f64>>>> {
        let mut out = vec![None; self.slots.len()];
        for op in &graph.ops {
            let used: &[usize] = match op {
                Op::Conv { weight, bias, .. } => &[*weight, *bias],
                Op::CoarseSkip { gain, .. } => std::slice::from_ref(gain),
                _ => &[],
            };
            {
                for &idx in used {
                    let slot = &self.slots[idx];
                    let t = params.get(&slot.name).ok_or_else(|| {
                        Error::Structure(format!("missing tensor `{}`", slot.name))
                    })?;
                    if t.shape != slot.shape {
                        return Err(Error::ShapeMismatch {
                            name: slot.name.clone(),
                            expected: slot.shape.clone(),
                            found: t.shape.clone(),
                        });
                    }
                    out[idx] = Some(t.data.iter().map(|&v| f64::from(v)).collect());
                }
            }
        }
        Ok(out)
    }

    fn run(
        &self,
        graph: &Graph,
        module: Partition,
        input: Tensor3,
        params: &ParamSet,
    ) -> Result<(ProbMap, ForwardTape)> {
        if input.channels != graph.input_channels {
            return Err(Error::Dimension(format!(
                "expected {} input channels, got {}",
                graph.input_channels, input.channels
            )));
        }
        let weights = self.weights(params, graph)?;
        let (h, w) = (input.height, input.width);
        let mut values: Vec<Tensor3> = Vec::with_capacity(graph.ops.len());
        let mut argmax = vec![None; graph.ops.len()];
        for (i, op) in graph.ops.iter().enumerate() {
            let v = match *op {
                Op::Input => input.clone(),
                Op::Conv {
                    src,
                    weight,
                    bias,
                    out,
                    kernel,
                    dilation,
                    relu,
                } => {
                    let mut y = tensor::conv2d(
                        &values[src],
                        weights[weight].as_deref().expect("loaded"),
                        weights[bias].as_deref().expect("loaded"),
                        out,
                        kernel,
                        dilation,
                    );
                    if relu {
                        tensor::relu_in_place(&mut y);
                    }
                    y
                }
                Op::MaxPool { src } => {
                    let (y, arg) = tensor::max_pool2(&values[src]);
                    argmax[i] = Some(arg);
                    y
                }
                Op::Upsample { src } => tensor::upsample2(&values[src]),
                Op::Concat { a, b } => tensor::concat(&values[a], &values[b]),
                Op::CoarseSkip { src, gain } => {
                    let k = weights[gain].as_deref().expect("loaded")[0];
                    let coarse = values[0].channel(ADM_INPUT_CHANNELS - 1);
                    let mut y = values[src].clone();
                    for (v, &c) in y.data.iter_mut().zip(coarse) {
                        *v += k * logit(c);
                    }
                    y
                }
            };
            values.push(v);
        }
        let logits = &values.last().expect("nonempty graph").data;
        let probs = ProbMap::new(h, w, logits.iter().map(|&z| sigmoid(z)).collect())?;
        Ok((
            probs,
            ForwardTape {
                module,
                stamp: params.stamp(),
                values,
                argmax,
            },
        ))
    }

    /// The linear piece each ReLU unit and max-pool window was on during the
    /// pass. Two passes with equal patterns lie on the same smooth piece.
    pub fn activation_pattern(&self, tape: &ForwardTape) -> Vec<u32> {
        let graph = match tape.module {
            Partition::Bsm => &self.bsm,
            Partition::Adm => &self.adm,
        };
        let mut out = Vec::new();
        for (i, op) in graph.ops.iter().enumerate() {
            match op {
                Op::Conv { relu: true, .. } => {
                    out.extend(tape.values[i].data.iter().map(|&v| u32::from(v > 0.0)))
                }
                Op::MaxPool { .. } => out.extend(tape.argmax[i].iter().flatten()),
                _ => {}
            }
        }
        out
    }

    /// Parameter gradients given `dL/dp` for every output pixel. Tensors of
    /// the other module get zero gradients.
    pub fn backward(
        &self,
        tape: &ForwardTape,
        params: &ParamSet,
        grad_prob: &[f64],
    ) -> Result<Backward> {
        self.backward_with(tape, params, grad_prob, false)
    }

    /// As [`Network::backward`]; with `want_coarse_grad` an ADM tape also
    /// yields the gradient with respect to its coarse-mask input, which is
    /// what chains a refined-output loss back into the BSM.
    pub fn backward_with(
        &self,
        tape: &ForwardTape,
        params: &ParamSet,
        grad_prob: &[f64],
        want_coarse_grad: bool,
    ) -> Result<Backward> {
        if tape.stamp != params.stamp() {
            return Err(Error::StaleTape {
                tape: tape.stamp,
                params: params.stamp(),
            });
        }
        let graph = match tape.module {
            Partition::Bsm => &self.bsm,
            Partition::Adm => &self.adm,
        };
        if tape.values.len() != graph.ops.len() {
            return Err(Error::StaleTape {
                tape: tape.stamp,
                params: params.stamp(),
            });
        }
        let out = tape.values.last().expect("nonempty graph");
        if grad_prob.len() != out.data.len() {
            return Err(Error::Dimension(format!(
                "upstream gradient has {} values, output has {}",
                grad_prob.len(),
                out.data.len()
            )));
        }
        let weights = self.weights(params, graph)?;
        let mut grads = GradSet::zeros_like(params);
        let slot_pos: Vec<usize> = self
            .slots
            .iter()
            .map(|s| params.position(&s.name).expect("checked by weights()"))
            .collect();

        // dL/dz = dL/dp * sigma'(z), zero where the probability is clamped
        let dlogit: Vec<f64> = out
            .data
            .iter()
            .zip(grad_prob)
            .map(|(&z, &g)| {
                let s = sigmoid(z);
                if s <= PROB_EPS || s >= 1.0 - PROB_EPS {
                    0.0
                } else {
                    g * s * (1.0 - s)
                }
            })
            .collect();

        let n = graph.ops.len();
        let mut node_grad: Vec<Option<Tensor3>> = vec![None; n];
        node_grad[n - 1] = Some(Tensor3::from_vec(1, out.height, out.width, dlogit));
        let accumulate = |slot: &mut Option<Tensor3>, g: Tensor3| match slot {
            Some(existing) => {
                for (a, b) in existing.data.iter_mut().zip(&g.data) {
                    *a += b;
                }
            }
            None => *slot = Some(g),
        };
        for i in (0..n).rev() {
            let Some(mut g) = node_grad[i].take() else {
                continue;
            };
            match graph.ops[i] {
                Op::Input => {
                    node_grad[i] = Some(g);
                }
                Op::Conv {
                    src,
                    weight,
                    bias,
                    kernel,
                    dilation,
                    relu,
                    ..
                } => {
                    if relu {
                        tensor::relu_backward_in_place(&tape.values[i], &mut g);
                    }
                    let need_input = src != 0 || want_coarse_grad;
                    let (gw, gb) = {
                        let (wi, bi) = (slot_pos[weight], slot_pos[bias]);
                        let mut gw = std::mem::take(&mut grads.data[wi]);
                        let mut gb = std::mem::take(&mut grads.data[bi]);
                        let dx = tensor::conv2d_backward(
                            &tape.values[src],
                            weights[weight].as_deref().expect("loaded"),
                            &g,
                            kernel,
                            dilation,
                            &mut gw,
                            &mut gb,
                            need_input,
                        );
                        if let Some(dx) = dx {
                            accumulate(&mut node_grad[src], dx);
                        }
                        (gw, gb)
                    };
                    grads.data[slot_pos[weight]] = gw;
                    grads.data[slot_pos[bias]] = gb;
                }
                Op::MaxPool { src } => {
                    let x = &tape.values[src];
                    let arg = tape.argmax[i].as_ref().expect("pool records argmax");
                    let dx = tensor::max_pool2_backward(&g, arg, (x.channels, x.height, x.width));
                    accumulate(&mut node_grad[src], dx);
                }
                Op::Upsample { src } => {
                    accumulate(&mut node_grad[src], tensor::upsample2_backward(&g));
                }
                Op::Concat { a, b } => {
                    let (ga, gb) = tensor::split(&g, tape.values[a].channels);
                    accumulate(&mut node_grad[a], ga);
                    accumulate(&mut node_grad[b], gb);
                }
                Op::CoarseSkip { src, gain } => {
                    let k = weights[gain].as_deref().expect("loaded")[0];
                    let input = &tape.values[0];
                    let coarse = input.channel(ADM_INPUT_CHANNELS - 1);
                    grads.data[slot_pos[gain]][0] +=
                        g.data.iter().zip(coarse).map(|(gi, &c)| gi * logit(c)).sum::<f64>();
                    if want_coarse_grad {
                        let mut dx = Tensor3::zeros(input.channels, input.height, input.width);
                        let hw = input.height * input.width;
                        let start = (ADM_INPUT_CHANNELS - 1) * hw;
                        for (j, (gi, &c)) in g.data.iter().zip(coarse).enumerate() {
                            dx.data[start + j] = gi * k / (c * (1.0 - c));
                        }
                        accumulate(&mut node_grad[0], dx);
                    }
                    accumulate(&mut node_grad[src], g);
                }
            }
        }
        let coarse_grad = if want_coarse_grad && tape.module == Partition::Adm {
            node_grad[0]
                .as_ref()
                .map(|g| g.channel(ADM_INPUT_CHANNELS - 1).to_vec())
        } else {
            None
        };
        Ok(Backward { grads, coarse_grad })
    }
}
