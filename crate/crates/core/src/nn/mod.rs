//! Small convolutional networks with manual backprop: a U-Net with batch
//! norm, a plain conv stack, and the identity map.
//!
//! A network is a straight-line program over activation registers. Register
//! 0 holds the (padded) input and op `i` writes register `i + 1`, so the
//! backward pass is a reverse sweep over the op list.

pub mod checkpoint;
pub mod ops;

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, ImageShape};
use crate::scalar::Real;
use ops::BnStats;

pub use checkpoint::{load_checkpoint, save_checkpoint};

fn yes() -> bool {
    true
}

/// Architecture descriptor; also stored in checkpoints.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Architecture {
    Identity {
        channels: usize,
    },
    /// `layers` convolutions; all but the last are followed by norm + ReLU.
    ConvNet {
        channels: usize,
        width: usize,
        layers: usize,
        #[serde(default = "yes")]
        batch_norm: bool,
        #[serde(default)]
        residual: bool,
    },
    /// `depth` down/up levels. Has `4 * depth + 2` batch-norm layers.
    UNet {
        channels: usize,
        base_width: usize,
        depth: usize,
        #[serde(default = "yes")]
        residual: bool,
    },
}

impl Architecture {
    pub fn channels(&self) -> usize {
        match *self {
            Architecture::Identity { channels }
            | Architecture::ConvNet { channels, .. }
            | Architecture::UNet { channels, .. } => channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        if c == 0 {
            return Err(Error::config("network.channels", "must be positive"));
        }
        match *self {
            Architecture::Identity { .. } => Ok(()),
            Architecture::ConvNet { width, layers, .. } => {
                if width == 0 {
                    return Err(Error::config("network.width", "must be positive"));
                }
                if layers < 2 {
                    return Err(Error::config("network.layers", "need at least 2 layers"));
                }
                Ok(())
            }
            Architecture::UNet { base_width, depth, .. } => {
                if base_width == 0 {
                    return Err(Error::config("network.base_width", "must be positive"));
                }
                if depth == 0 || depth > 8 {
                    return Err(Error::config("network.depth", "must be in 1..=8"));
                }
                Ok(())
            }
        }
    }

    /// Side length the input is padded to a multiple of.
    pub fn size_multiple(&self) -> usize {
        match *self {
            Architecture::UNet { depth, .. } => 1 << depth,
            _ => 1,
        }
    }

    /// Trainable parameter count, without building the network.
    pub fn param_count(&self) -> usize {
        match *self {
            Architecture::Identity { .. } => 0,
            Architecture::ConvNet {
                channels: c,
                width: w,
                layers,
                batch_norm,
                ..
            } => {
                let bn = if batch_norm { 2 * w } else { 0 };
                let hidden_bias = if batch_norm { 0 } else { w };
                let first = 9 * c * w + hidden_bias + bn;
                let mid = (layers - 2) * (9 * w * w + hidden_bias + bn);
                first + mid + 9 * w * c + c
            }
            Architecture::UNet {
                channels: c,
                base_width: b,
                depth,
                ..
            } => {
                let wid = |l: usize| b << l;
                let block = |cin: usize, w: usize| 9 * cin * w + 9 * w * w + 4 * w;
                let mut n = 0;
                for l in 0..depth {
                    n += block(if l == 0 { c } else { wid(l - 1) }, wid(l));
                    n += block(wid(l + 1) + wid(l), wid(l));
                }
                n + block(wid(depth - 1), wid(depth)) + wid(0) * c + c
            }
        }
    }

    /// Number of scale/shift parameters in the normalization layers.
    pub fn bn_param_count(&self) -> usize {
        match *self {
            Architecture::Identity { .. } => 0,
            Architecture::ConvNet {
                width,
                layers,
                batch_norm,
                ..
            } => {
                if batch_norm {
                    2 * width * (layers - 1)
                } else {
                    0
                }
            }
            Architecture::UNet { base_width, depth, .. } => {
                let enc_dec: usize = (0..depth).map(|l| 4 * (base_width << l)).sum();
                2 * (enc_dec + 2 * (base_width << depth))
            }
        }
    }

    pub fn bn_layer_count(&self) -> usize {
        match *self {
            Architecture::Identity { .. } => 0,
            Architecture::ConvNet { layers, batch_norm, .. } => {
                if batch_norm {
                    layers - 1
                } else {
                    0
                }
            }
            Architecture::UNet { depth, .. } => 4 * depth + 2,
        }
    }

    /// Depth-5 U-Net whose size is closest to ~3.45e7 parameters.
    pub fn reference_unet(channels: usize) -> Self {
        let target = 3.45e7;
        (1..=128)
            .map(|b| Architecture::UNet {
                channels,
                base_width: b,
                depth: 5,
                residual: true,
            })
            .min_by(|a, b| {
                let da = (a.param_count() as f64 - target).abs();
                let db = (b.param_count() as f64 - target).abs();
                da.total_cmp(&db)
            })
            .expect("non-empty range")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamKind {
    ConvWeight,
    ConvBias,
    BnWeight,
    BnBias,
    RunningMean,
    RunningVar,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    #[serde(skip)]
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Named tensors packed into one flat buffer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorMap<T> {
    pub specs: Vec<TensorSpec>,
    pub data: Vec<T>,
}

impl<T: Real> TensorMap<T> {
    fn push(&mut self, name: String, shape: Vec<usize>, kind: ParamKind, values: Vec<T>) -> usize {
        let offset = self.data.len();
        let spec = TensorSpec {
            name,
            shape,
            kind,
            offset,
        };
        debug_assert_eq!(spec.len(), values.len());
        self.data.extend(values);
        self.specs.push(spec);
        self.specs.len() - 1
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn tensor(&self, idx: usize) -> &[T] {
        &self.data[self.specs[idx].range()]
    }

    pub fn tensor_mut(&mut self, idx: usize) -> &mut [T] {
        let r = self.specs[idx].range();
        &mut self.data[r]
    }

    pub fn get(&self, name: &str) -> Option<&[T]> {
        self.specs.iter().position(|s| s.name == name).map(|i| self.tensor(i))
    }
}

/// `θ₁ (v − μ) / σ + θ₂` with explicit statistics.
pub fn bn_forward<T: Real>(v: &[T], theta1: T, theta2: T, mu: T, sigma: T) -> Result<Vec<T>> {
    if !(sigma > T::zero()) {
        return Err(Error::Numeric(format!(
            "normalization scale must be positive, got {sigma}"
        )));
    }
    Ok(v.iter().map(|&x| theta1 * (x - mu) / sigma + theta2).collect())
}

/// Which parameters an optimizer may touch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParameterSelector {
    #[default]
    Full,
    BnOnly,
}

impl ParameterSelector {
    /// Flat index ranges of the selected parameters.
    pub fn ranges<T: Real>(&self, params: &TensorMap<T>) -> Result<Vec<Range<usize>>> {
        let ranges: Vec<_> = params
            .specs
            .iter()
            .filter(|s| match self {
                ParameterSelector::Full => true,
                ParameterSelector::BnOnly => matches!(s.kind, ParamKind::BnWeight | ParamKind::BnBias),
            })
            .map(|s| s.range())
            .collect();
        if ranges.is_empty() && *self == ParameterSelector::BnOnly {
            return Err(Error::config(
                "parameters",
                "network has no normalization layers to adapt",
            ));
        }
        Ok(ranges)
    }

    pub fn names<T: Real>(&self, params: &TensorMap<T>) -> Result<Vec<String>> {
        let sel = self.ranges(params)?;
        Ok(params
            .specs
            .iter()
            .filter(|s| sel.contains(&s.range()))
            .map(|s| s.name.clone())
            .collect())
    }

    pub fn trainable_count<T: Real>(&self, params: &TensorMap<T>) -> Result<usize> {
        Ok(self.ranges(params)?.iter().map(|r| r.len()).sum())
    }
}

/// How batch-norm layers normalize.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormMode {
    /// Statistics of the current input.
    #[default]
    Batch,
    /// Stored running statistics.
    Running,
}

#[derive(Clone, Debug)]
struct ConvLayer {
    cout: usize,
    k: usize,
    weight: usize,
    bias: Option<usize>,
}

#[derive(Clone, Debug)]
struct BnLayer {
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

#[derive(Clone, Copy, Debug)]
enum Op {
    Conv { layer: usize, src: usize },
    Bn { layer: usize, src: usize },
    Relu { src: usize },
    Pool { src: usize },
    Up { src: usize },
    Concat { a: usize, b: usize },
    Add { a: usize, b: usize },
}

#[derive(Clone, Debug)]
enum Aux<T> {
    None,
    Pool(Vec<u32>),
    Bn(BnStats<T>),
}

/// Activations saved by [`Network::forward_trace`].
#[derive(Clone, Debug)]
pub struct Trace<T> {
    regs: Vec<Image<T>>,
    aux: Vec<Aux<T>>,
    input_hw: (usize, usize),
}

struct Builder<'r, T, R: ?Sized> {
    params: TensorMap<T>,
    buffers: TensorMap<T>,
    convs: Vec<ConvLayer>,
    bns: Vec<BnLayer>,
    ops: Vec<Op>,
    rng: &'r mut R,
}

impl<T: Real, R: Rng + ?Sized> Builder<'_, T, R> {
    fn op(&mut self, op: Op) -> usize {
        self.ops.push(op);
        self.ops.len()
    }

    /// Kaiming-uniform weights; `last` uses the plain `1/sqrt(fan_in)` bound.
    fn conv(&mut self, name: &str, src: usize, cin: usize, cout: usize, k: usize, bias: bool, last: bool) -> usize {
        let fan_in = (cin * k * k) as f64;
        let bound = if last {
            1.0 / fan_in.sqrt()
        } else {
            (6.0 / fan_in).sqrt()
        };
        let w: Vec<T> = (0..cout * cin * k * k)
            .map(|_| T::lit(self.rng.random_range(-bound..bound)))
            .collect();
        let weight = self.params.push(
            format!("{name}.weight"),
            vec![cout, cin, k, k],
            ParamKind::ConvWeight,
            w,
        );
        let bias = bias.then(|| {
            let bb = 1.0 / fan_in.sqrt();
            let b: Vec<T> = (0..cout).map(|_| T::lit(self.rng.random_range(-bb..bb))).collect();
            self.params
                .push(format!("{name}.bias"), vec![cout], ParamKind::ConvBias, b)
        });
        self.convs.push(ConvLayer { cout, k, weight, bias });
        let layer = self.convs.len() - 1;
        self.op(Op::Conv { layer, src })
    }

    fn bn(&mut self, name: &str, src: usize, c: usize) -> usize {
        let gamma = self.params.push(
            format!("{name}.weight"),
            vec![c],
            ParamKind::BnWeight,
            vec![T::one(); c],
        );
        let beta = self
            .params
            .push(format!("{name}.bias"), vec![c], ParamKind::BnBias, vec![T::zero(); c]);
        let mean = self.buffers.push(
            format!("{name}.running_mean"),
            vec![c],
            ParamKind::RunningMean,
            vec![T::zero(); c],
        );
        let var = self.buffers.push(
            format!("{name}.running_var"),
            vec![c],
            ParamKind::RunningVar,
            vec![T::one(); c],
        );
        self.bns.push(BnLayer { gamma, beta, mean, var });
        let layer = self.bns.len() - 1;
        self.op(Op::Bn { layer, src })
    }

    /// conv → (bn) → relu
    fn unit(&mut self, name: &str, src: usize, cin: usize, cout: usize, norm: bool) -> usize {
        let r = self.conv(&format!("{name}.conv"), src, cin, cout, 3, !norm, false);
        let r = if norm {
            self.bn(&format!("{name}.bn"), r, cout)
        } else {
            r
        };
        self.op(Op::Relu { src: r })
    }

    fn double(&mut self, name: &str, src: usize, cin: usize, cout: usize) -> usize {
        let r = self.unit(&format!("{name}.0"), src, cin, cout, true);
        self.unit(&format!("{name}.1"), r, cout, cout, true)
    }
}

/// A network instance: architecture, parameters, running statistics and
/// the compiled op list.
#[derive(Clone, Debug)]
pub struct Network<T> {
    arch: Architecture,
    params: TensorMap<T>,
    buffers: TensorMap<T>,
    convs: Vec<ConvLayer>,
    bns: Vec<BnLayer>,
    ops: Vec<Op>,
    pub norm_mode: NormMode,
}

impl<T: Real> Network<T> {
    pub fn new<R: Rng + ?Sized>(arch: &Architecture, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let mut b = Builder {
            params: TensorMap::default(),
            buffers: TensorMap::default(),
            convs: Vec::new(),
            bns: Vec::new(),
            ops: Vec::new(),
            rng,
        };
        match *arch {
            Architecture::Identity { .. } => {}
            Architecture::ConvNet {
                channels,
                width,
                layers,
                batch_norm,
                residual,
            } => {
                let mut r = b.unit("layer0", 0, channels, width, batch_norm);
                for l in 1..layers - 1 {
                    r = b.unit(&format!("layer{l}"), r, width, width, batch_norm);
                }
                r = b.conv("out", r, width, channels, 3, true, true);
                if residual {
                    b.op(Op::Add { a: 0, b: r });
                }
            }
            Architecture::UNet {
                channels,
                base_width,
                depth,
                residual,
            } => {
                let wid = |l: usize| base_width << l;
                let mut skips = Vec::with_capacity(depth);
                let mut r = 0;
                let mut cin = channels;
                for l in 0..depth {
                    r = b.double(&format!("down{l}"), r, cin, wid(l));
                    skips.push(r);
                    r = b.op(Op::Pool { src: r });
                    cin = wid(l);
                }
                r = b.double("bottom", r, cin, wid(depth));
                for l in (0..depth).rev() {
                    let u = b.op(Op::Up { src: r });
                    let cat = b.op(Op::Concat { a: u, b: skips[l] });
                    r = b.double(&format!("up{l}"), cat, wid(l + 1) + wid(l), wid(l));
                }
                r = b.conv("out", r, wid(0), channels, 1, true, true);
                if residual {
                    b.op(Op::Add { a: 0, b: r });
                }
            }
        }
        Ok(Self {
            arch: arch.clone(),
            params: b.params,
            buffers: b.buffers,
            convs: b.convs,
            bns: b.bns,
            ops: b.ops,
            norm_mode: NormMode::Batch,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &TensorMap<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut TensorMap<T> {
        &mut self.params
    }

    pub fn buffers(&self) -> &TensorMap<T> {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut TensorMap<T> {
        &mut self.buffers
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn bn_layer_count(&self) -> usize {
        self.bns.len()
    }

    pub fn forward(&self, x: &Image<T>) -> Result<Image<T>> {
        Ok(self.forward_trace(x)?.0)
    }

    pub fn forward_trace(&self, x: &Image<T>) -> Result<(Image<T>, Trace<T>)> {
        if x.channels() != self.arch.channels() {
            return Err(Error::shape(format!(
                "network expects {} channels, got {}",
                self.arch.channels(),
                x.channels()
            )));
        }
        let (h, w) = (x.height(), x.width());
        let m = self.arch.size_multiple();
        let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
        let mut regs = Vec::with_capacity(self.ops.len() + 1);
        let mut aux = Vec::with_capacity(self.ops.len());
        regs.push(ops::pad_to(x, ph, pw));
        for op in &self.ops {
            let (out, a) = match *op {
                Op::Conv { layer, src } => {
                    let c = &self.convs[layer];
                    let bias = c.bias.map(|b| self.params.tensor(b));
                    (
                        ops::conv_forward(&regs[src], self.params.tensor(c.weight), bias, c.cout, c.k),
                        Aux::None,
                    )
                }
                Op::Bn { layer, src } => {
                    let l = &self.bns[layer];
                    let running = match self.norm_mode {
                        NormMode::Batch => None,
                        NormMode::Running => Some((self.buffers.tensor(l.mean), self.buffers.tensor(l.var))),
                    };
                    let (y, st) = ops::bn_forward(
                        &regs[src],
                        self.params.tensor(l.gamma),
                        self.params.tensor(l.beta),
                        running,
                    );
                    (y, Aux::Bn(st))
                }
                Op::Relu { src } => (ops::relu_forward(&regs[src]), Aux::None),
                Op::Pool { src } => {
                    let (y, arg) = ops::maxpool_forward(&regs[src]);
                    (y, Aux::Pool(arg))
                }
                Op::Up { src } => (ops::upsample_forward(&regs[src]), Aux::None),
                Op::Concat { a, b } => (ops::concat(&regs[a], &regs[b]), Aux::None),
                Op::Add { a, b } => (regs[a].add(&regs[b]), Aux::None),
            };
            regs.push(out);
            aux.push(a);
        }
        let out = ops::crop_to(regs.last().expect("input register"), h, w);
        Ok((
            out,
            Trace {
                regs,
                aux,
                input_hw: (h, w),
            },
        ))
    }

    /// Accumulates parameter gradients into `grads` and returns the gradient
    /// with respect to the network input.
    pub fn backward(&self, trace: &Trace<T>, grad_out: &Image<T>, grads: &mut [T]) -> Image<T> {
        assert_eq!(grads.len(), self.params.len(), "gradient buffer size");
        let last = trace.regs.len() - 1;
        let top = &trace.regs[last];
        let mut g: Vec<Option<Image<T>>> = vec![None; trace.regs.len()];
        g[last] = Some(ops::pad_to(grad_out, top.height(), top.width()));
        fn acc<T: Real>(slot: &mut Option<Image<T>>, v: Image<T>) {
            match slot {
                Some(s) => s.axpy(T::one(), &v),
                None => *slot = Some(v),
            }
        }
        for (i, op) in self.ops.iter().enumerate().rev() {
            let Some(dy) = g[i + 1].take() else { continue };
            match *op {
                Op::Conv { layer, src } => {
                    let c = &self.convs[layer];
                    let wr = self.params.specs[c.weight].range();
                    let (dw_part, rest) = split_two(grads, wr.clone(), c.bias.map(|b| self.params.specs[b].range()));
                    let dx =
                        ops::conv_backward(&trace.regs[src], &self.params.data[wr], c.cout, c.k, &dy, dw_part, rest);
                    acc(&mut g[src], dx);
                }
                Op::Bn { layer, src } => {
                    let l = &self.bns[layer];
                    let Aux::Bn(st) = &trace.aux[i] else {
                        unreachable!("bn aux")
                    };
                    let gr = self.params.specs[l.gamma].range();
                    let br = self.params.specs[l.beta].range();
                    let (dg, db) = split_two(grads, gr.clone(), Some(br));
                    let dx = ops::bn_backward(&trace.regs[src], &self.params.data[gr], st, &dy, dg, db.expect("beta"));
                    acc(&mut g[src], dx);
                }
                Op::Relu { src } => acc(&mut g[src], ops::relu_backward(&trace.regs[i + 1], &dy)),
                Op::Pool { src } => {
                    let Aux::Pool(arg) = &trace.aux[i] else {
                        unreachable!("pool aux")
                    };
                    acc(&mut g[src], ops::maxpool_backward(trace.regs[src].shape(), arg, &dy));
                }
                Op::Up { src } => acc(&mut g[src], ops::upsample_backward(&dy)),
                Op::Concat { a, b } => {
                    let (da, db) = ops::split(&dy, trace.regs[a].channels());
                    acc(&mut g[a], da);
                    acc(&mut g[b], db);
                }
                Op::Add { a, b } => {
                    acc(&mut g[a], dy.clone());
                    acc(&mut g[b], dy);
                }
            }
        }
        let (h, w) = trace.input_hw;
        let dx = g[0].take().unwrap_or_else(|| Image::zeros(trace.regs[0].shape()));
        ops::crop_to(&dx, h, w)
    }

    /// Folds the batch statistics of a traced pass into the running
    /// estimates (momentum 0.1).
    pub fn update_running_stats(&mut self, trace: &Trace<T>) {
        let m = T::lit(ops::BN_MOMENTUM);
        for (op, aux) in self.ops.iter().zip(&trace.aux) {
            if let (Op::Bn { layer, .. }, Aux::Bn(st)) = (op, aux) {
                if !st.batch {
                    continue;
                }
                let l = &self.bns[*layer];
                for (r, &s) in self.buffers.tensor_mut(l.mean).iter_mut().zip(&st.mean) {
                    *r = (T::one() - m) * *r + m * s;
                }
                for (r, &s) in self.buffers.tensor_mut(l.var).iter_mut().zip(&st.var_unbiased) {
                    *r = (T::one() - m) * *r + m * s;
                }
            }
        }
    }

    /// Shape check helper for callers that build inputs.
    pub fn input_shape(&self, height: usize, width: usize) -> ImageShape {
        ImageShape::new(self.arch.channels(), height, width)
    }
}

/// Borrows two disjoint sub-ranges of `grads` mutably.
fn split_two<T>(grads: &mut [T], a: Range<usize>, b: Option<Range<usize>>) -> (&mut [T], Option<&mut [T]>) {
    match b {
        None => (&mut grads[a], None),
        Some(b) if a.end <= b.start => {
            let (lo, hi) = grads.split_at_mut(b.start);
            (&mut lo[a], Some(&mut hi[..b.end - b.start]))
        }
        Some(b) => {
            assert!(b.end <= a.start, "overlapping parameter ranges");
            let (lo, hi) = grads.split_at_mut(a.start);
            (&mut hi[..a.end - a.start], Some(&mut lo[b]))
        }
    }
}
