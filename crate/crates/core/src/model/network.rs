//! A small sequential network with explicit forward caches and hand-written
//! backward passes. Every batch-norm layer carries two independent branches
//! (clean and adversarial) selected per forward call.

use ndarray::{Array1, Array2, ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub type Tensor = ArrayD<f64>;

const BN_MOMENTUM: f64 = 0.1;
const BN_EPS: f64 = 1e-5;

/// Which batch-norm branch a forward pass routes through.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BnMode {
    Clean,
    Adv,
}

/// Batch-norm behaviour for one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnPass {
    /// Batch statistics; running statistics advance.
    Train,
    /// Batch statistics; running statistics untouched.
    TrainNoStats,
    /// Running statistics.
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Whether weight decay applies (conv/linear weights only).
    pub decay: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Buffer {
    pub name: String,
    pub value: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct BnBranch {
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

#[derive(Debug, Clone, PartialEq)]
enum Layer {
    Conv {
        weight: usize,
        stride: usize,
        pad: usize,
    },
    DualBn {
        clean: BnBranch,
        adv: BnBranch,
    },
    Relu,
    GlobalAvgPool,
    Linear {
        weight: usize,
        bias: Option<usize>,
    },
    Residual {
        body: Vec<Layer>,
        shortcut: Vec<Layer>,
    },
}

#[derive(Debug, Clone)]
enum Cache {
    Conv {
        cols: Array2<f64>,
        in_shape: [usize; 4],
        out_hw: (usize, usize),
    },
    Bn {
        xhat: Tensor,
        inv_std: Array1<f64>,
        gamma: usize,
        beta: usize,
        batch_stats: bool,
    },
    Relu {
        out: Tensor,
    },
    Gap {
        in_shape: [usize; 4],
    },
    Linear {
        input: Array2<f64>,
    },
    Residual {
        body: Vec<Cache>,
        shortcut: Vec<Cache>,
    },
}

/// Forward caches needed to run the backward pass.
#[derive(Debug, Clone)]
pub struct Tape(Vec<Cache>);

/// A pending running-statistics write produced by a training forward.
#[derive(Debug, Clone)]
pub struct StatUpdate {
    buffer: usize,
    value: Tensor,
}

/// Running-statistics writes for a backbone and head pair.
#[derive(Debug, Clone, Default)]
pub struct PendingStats {
    pub(crate) backbone: Vec<StatUpdate>,
    pub(crate) head: Vec<StatUpdate>,
}

/// Parameter gradients, index-aligned with `Network::params`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads(pub Vec<Tensor>);

impl Grads {
    pub fn zeros_like(net: &Network) -> Self {
        Grads(net.params.iter().map(|p| Tensor::zeros(p.value.raw_dim())).collect())
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.0 {
            g.mapv_inplace(|v| v * s);
        }
    }
}

/// Accumulates layer definitions together with their parameters.
pub struct NetworkBuilder<'r, R: Rng> {
    params: Vec<Param>,
    buffers: Vec<Buffer>,
    rng: &'r mut R,
}

impl<'r, R: Rng> NetworkBuilder<'r, R> {
    pub fn new(rng: &'r mut R) -> Self {
        Self {
            params: Vec::new(),
            buffers: Vec::new(),
            rng,
        }
    }

    fn param(&mut self, name: String, value: Tensor, decay: bool) -> usize {
        self.params.push(Param { name, value, decay });
        self.params.len() - 1
    }

    fn buffer(&mut self, name: String, value: Tensor) -> usize {
        self.buffers.push(Buffer { name, value });
        self.buffers.len() - 1
    }

    fn kaiming(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).unwrap();
        let rng = &mut *self.rng;
        Tensor::from_shape_fn(IxDyn(shape), |_| normal.sample(rng))
    }

    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> LayerDef {
        let w = self.kaiming(&[cout, cin, k, k], cin * k * k);
        let weight = self.param(format!("{name}.weight"), w, true);
        LayerDef(Layer::Conv { weight, stride, pad })
    }

    pub fn dual_bn(&mut self, name: &str, ch: usize) -> LayerDef {
        let branch = |b: &mut Self, tag: &str| BnBranch {
            gamma: b.param(format!("{name}.{tag}.gamma"), Tensor::ones(IxDyn(&[ch])), false),
            beta: b.param(format!("{name}.{tag}.beta"), Tensor::zeros(IxDyn(&[ch])), false),
            mean: b.buffer(format!("{name}.{tag}.running_mean"), Tensor::zeros(IxDyn(&[ch]))),
            var: b.buffer(format!("{name}.{tag}.running_var"), Tensor::ones(IxDyn(&[ch]))),
        };
        let clean = branch(self, "clean");
        let adv = branch(self, "adv");
        LayerDef(Layer::DualBn { clean, adv })
    }

    pub fn linear(&mut self, name: &str, fin: usize, fout: usize, bias: bool) -> LayerDef {
        let w = self.kaiming(&[fout, fin], fin);
        let weight = self.param(format!("{name}.weight"), w, true);
        let bias = bias.then(|| self.param(format!("{name}.bias"), Tensor::zeros(IxDyn(&[fout])), false));
        LayerDef(Layer::Linear { weight, bias })
    }

    pub fn relu(&self) -> LayerDef {
        LayerDef(Layer::Relu)
    }

    pub fn global_avg_pool(&self) -> LayerDef {
        LayerDef(Layer::GlobalAvgPool)
    }

    /// `body(x) + shortcut(x)`; an empty shortcut is the identity.
    pub fn residual(&self, body: Vec<LayerDef>, shortcut: Vec<LayerDef>) -> LayerDef {
        LayerDef(Layer::Residual {
            body: body.into_iter().map(|l| l.0).collect(),
            shortcut: shortcut.into_iter().map(|l| l.0).collect(),
        })
    }

    pub fn finish(self, layers: Vec<LayerDef>) -> Network {
        Network {
            params: self.params,
            buffers: self.buffers,
            layers: layers.into_iter().map(|l| l.0).collect(),
        }
    }
}

/// Opaque layer handle produced by [`NetworkBuilder`].
#[derive(Debug, Clone)]
pub struct LayerDef(Layer);

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub params: Vec<Param>,
    pub buffers: Vec<Buffer>,
    layers: Vec<Layer>,
}

impl Network {
    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// True when both networks have the same layer graph and parameter shapes.
    pub fn same_architecture(&self, other: &Network) -> bool {
        self.layers == other.layers
            && self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.value.shape() == b.value.shape())
            && self.buffers.len() == other.buffers.len()
            && self
                .buffers
                .iter()
                .zip(&other.buffers)
                .all(|(a, b)| a.name == b.name && a.value.shape() == b.value.shape())
    }

    /// Runs the network. Running-statistics updates are returned, not applied.
    pub fn run(&self, x: &Tensor, bn: BnMode, pass: BnPass, keep_tape: bool) -> (Tensor, Option<Tape>, Vec<StatUpdate>) {
        let mut stats = Vec::new();
        let mut caches = Vec::new();
        let out = self.run_layers(&self.layers, x.clone(), bn, pass, keep_tape.then_some(&mut caches), &mut stats);
        (out, keep_tape.then_some(Tape(caches)), stats)
    }

    pub fn apply_stats(&mut self, stats: Vec<StatUpdate>) {
        for s in stats {
            self.buffers[s.buffer].value = s.value;
        }
    }

    /// Training forward: batch statistics, running statistics advance.
    pub fn forward_train(&mut self, x: &Tensor, bn: BnMode) -> (Tensor, Tape) {
        let (out, tape, stats) = self.run(x, bn, BnPass::Train, true);
        self.apply_stats(stats);
        (out, tape.expect("tape requested"))
    }

    pub fn forward_eval(&self, x: &Tensor, bn: BnMode) -> Tensor {
        self.run(x, bn, BnPass::Eval, false).0
    }

    fn run_layers(
        &self,
        layers: &[Layer],
        mut x: Tensor,
        bn: BnMode,
        pass: BnPass,
        mut caches: Option<&mut Vec<Cache>>,
        stats: &mut Vec<StatUpdate>,
    ) -> Tensor {
        for layer in layers {
            let (out, cache) = self.run_layer(layer, x, bn, pass, caches.is_some(), stats);
            if let (Some(c), Some(cache)) = (caches.as_deref_mut(), cache) {
                c.push(cache);
            }
            x = out;
        }
        x
    }

    fn run_layer(
        &self,
        layer: &Layer,
        x: Tensor,
        bn: BnMode,
        pass: BnPass,
        keep: bool,
        stats: &mut Vec<StatUpdate>,
    ) -> (Tensor, Option<Cache>) {
        match layer {
            Layer::Conv { weight, stride, pad } => {
                let w = &self.params[*weight].value;
                let (out, cols, in_shape, out_hw) = conv_forward(&x, w, *stride, *pad);
                (out, keep.then_some(Cache::Conv { cols, in_shape, out_hw }))
            }
            Layer::DualBn { clean, adv } => {
                let br = match bn {
                    BnMode::Clean => clean,
                    BnMode::Adv => adv,
                };
                self.bn_forward(br, x, pass, keep, stats)
            }
            Layer::Relu => {
                let out = x.mapv_into(|v| v.max(0.0));
                let cache = keep.then(|| Cache::Relu { out: out.clone() });
                (out, cache)
            }
            Layer::GlobalAvgPool => {
                let s = x.shape();
                let in_shape = [s[0], s[1], s[2], s[3]];
                let hw = s[2] * s[3];
                let src = x.as_slice().expect("contiguous");
                let out = Tensor::from_shape_fn(IxDyn(&[s[0], s[1]]), |idx| {
                    let base = (idx[0] * in_shape[1] + idx[1]) * hw;
                    src[base..base + hw].iter().sum::<f64>() / hw as f64
                });
                (out, keep.then_some(Cache::Gap { in_shape }))
            }
            Layer::Linear { weight, bias } => {
                let input = into2(x);
                let w = view2(&self.params[*weight].value);
                let mut out = input.dot(&w.t());
                if let Some(b) = bias {
                    let b = self.params[*b].value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
                    out += &b;
                }
                (out.into_dyn(), keep.then_some(Cache::Linear { input }))
            }
            Layer::Residual { body, shortcut } => {
                let mut cb = Vec::new();
                let mut cs = Vec::new();
                let b = self.run_layers(body, x.clone(), bn, pass, keep.then_some(&mut cb), stats);
                let s = if shortcut.is_empty() {
                    x
                } else {
                    self.run_layers(shortcut, x, bn, pass, keep.then_some(&mut cs), stats)
                };
                (b + s, keep.then_some(Cache::Residual { body: cb, shortcut: cs }))
            }
        }
    }

    fn bn_forward(
        &self,
        br: &BnBranch,
        x: Tensor,
        pass: BnPass,
        keep: bool,
        stats: &mut Vec<StatUpdate>,
    ) -> (Tensor, Option<Cache>) {
        let shape = x.shape().to_vec();
        let (n, c) = (shape[0], shape[1]);
        let s: usize = shape[2..].iter().product();
        let m = (n * s) as f64;
        let gamma = self.params[br.gamma].value.as_slice().unwrap();
        let beta = self.params[br.beta].value.as_slice().unwrap();
        let src = x.as_slice().expect("contiguous");
        let batch_stats = pass != BnPass::Eval;
        let (mean, var) = if batch_stats {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for i in 0..n {
                for ch in 0..c {
                    let base = (i * c + ch) * s;
                    mean[ch] += src[base..base + s].iter().sum::<f64>();
                }
            }
            mean.iter_mut().for_each(|v| *v /= m);
            for i in 0..n {
                for ch in 0..c {
                    let base = (i * c + ch) * s;
                    var[ch] += src[base..base + s].iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
                }
            }
            var.iter_mut().for_each(|v| *v /= m);
            if pass == BnPass::Train {
                let rm = self.buffers[br.mean].value.as_slice().unwrap();
                let rv = self.buffers[br.var].value.as_slice().unwrap();
                let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
                let new_mean: Vec<f64> = rm.iter().zip(&mean).map(|(r, b)| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * b).collect();
                let new_var: Vec<f64> = rv
                    .iter()
                    .zip(&var)
                    .map(|(r, b)| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * b * unbias)
                    .collect();
                stats.push(StatUpdate { buffer: br.mean, value: Tensor::from_shape_vec(IxDyn(&[c]), new_mean).unwrap() });
                stats.push(StatUpdate { buffer: br.var, value: Tensor::from_shape_vec(IxDyn(&[c]), new_var).unwrap() });
            }
            (mean, var)
        } else {
            (
                self.buffers[br.mean].value.as_slice().unwrap().to_vec(),
                self.buffers[br.var].value.as_slice().unwrap().to_vec(),
            )
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; src.len()];
        let mut out = vec![0.0; src.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * s;
                for k in base..base + s {
                    let h = (src[k] - mean[ch]) * inv_std[ch];
                    xhat[k] = h;
                    out[k] = gamma[ch] * h + beta[ch];
                }
            }
        }
        let out = Tensor::from_shape_vec(IxDyn(&shape), out).unwrap();
        let cache = keep.then(|| Cache::Bn {
            xhat: Tensor::from_shape_vec(IxDyn(&shape), xhat).unwrap(),
            inv_std: Array1::from(inv_std),
            gamma: br.gamma,
            beta: br.beta,
            batch_stats,
        });
        (out, cache)
    }

    /// Backpropagates `grad` through the recorded forward. Parameter gradients
    /// are added into `grads` when given; the input gradient is returned when
    /// `need_input` is set.
    pub fn backward(&self, tape: &Tape, grad: Tensor, mut grads: Option<&mut Grads>, need_input: bool) -> Option<Tensor> {
        self.backward_layers(&self.layers, &tape.0, grad, grads.as_deref_mut(), need_input)
    }

    fn backward_layers(
        &self,
        layers: &[Layer],
        caches: &[Cache],
        mut grad: Tensor,
        mut grads: Option<&mut Grads>,
        need_input: bool,
    ) -> Option<Tensor> {
        for (i, (layer, cache)) in layers.iter().zip(caches).enumerate().rev() {
            let need = need_input || i > 0;
            match self.backward_layer(layer, cache, grad, grads.as_deref_mut(), need) {
                Some(g) => grad = g,
                None => return None,
            }
        }
        Some(grad)
    }

    fn backward_layer(
        &self,
        layer: &Layer,
        cache: &Cache,
        grad: Tensor,
        grads: Option<&mut Grads>,
        need_input: bool,
    ) -> Option<Tensor> {
        match (layer, cache) {
            (Layer::Conv { weight, stride, pad }, Cache::Conv { cols, in_shape, out_hw }) => {
                let w = &self.params[*weight].value;
                let (dw, dx) = conv_backward(&grad, cols, w, *in_shape, *out_hw, *stride, *pad, need_input);
                if let Some(g) = grads {
                    g.0[*weight] += &dw;
                }
                dx
            }
            (Layer::DualBn { .. }, Cache::Bn { xhat, inv_std, gamma, beta, batch_stats }) => {
                let shape = grad.shape().to_vec();
                let (n, c) = (shape[0], shape[1]);
                let s: usize = shape[2..].iter().product();
                let m = (n * s) as f64;
                let dy = grad.as_slice().unwrap();
                let xh = xhat.as_slice().unwrap();
                let gam = self.params[*gamma].value.as_slice().unwrap();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * s;
                        for k in base..base + s {
                            dgamma[ch] += dy[k] * xh[k];
                            dbeta[ch] += dy[k];
                        }
                    }
                }
                if let Some(g) = grads {
                    for (d, v) in g.0[*gamma].as_slice_mut().unwrap().iter_mut().zip(&dgamma) {
                        *d += v;
                    }
                    for (d, v) in g.0[*beta].as_slice_mut().unwrap().iter_mut().zip(&dbeta) {
                        *d += v;
                    }
                }
                if !need_input {
                    return None;
                }
                let mut dx = vec![0.0; dy.len()];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * s;
                        let gi = gam[ch] * inv_std[ch];
                        if *batch_stats {
                            // dxhat sums equal gamma·dbeta and gamma·dgamma
                            let a = dbeta[ch] / m;
                            let b = dgamma[ch] / m;
                            for k in base..base + s {
                                dx[k] = gi * (dy[k] - a - xh[k] * b);
                            }
                        } else {
                            for k in base..base + s {
                                dx[k] = gi * dy[k];
                            }
                        }
                    }
                }
                Some(Tensor::from_shape_vec(IxDyn(&shape), dx).unwrap())
            }
            (Layer::Relu, Cache::Relu { out }) => {
                let mut g = grad;
                g.zip_mut_with(out, |gv, &o| {
                    if o <= 0.0 {
                        *gv = 0.0
                    }
                });
                Some(g)
            }
            (Layer::GlobalAvgPool, Cache::Gap { in_shape }) => {
                if !need_input {
                    return None;
                }
                let hw = in_shape[2] * in_shape[3];
                let g = grad.as_slice().unwrap();
                let mut dx = vec![0.0; in_shape.iter().product()];
                for (j, gv) in g.iter().enumerate() {
                    let v = gv / hw as f64;
                    dx[j * hw..(j + 1) * hw].iter_mut().for_each(|d| *d = v);
                }
                Some(Tensor::from_shape_vec(IxDyn(in_shape), dx).unwrap())
            }
            (Layer::Linear { weight, bias }, Cache::Linear { input }) => {
                let g = into2(grad);
                if let Some(gr) = grads {
                    let dw = g.t().dot(input);
                    gr.0[*weight] += &dw.into_dyn();
                    if let Some(b) = bias {
                        gr.0[*b] += &g.sum_axis(ndarray::Axis(0)).into_dyn();
                    }
                }
                need_input.then(|| g.dot(&view2(&self.params[*weight].value)).into_dyn())
            }
            (Layer::Residual { body, shortcut }, Cache::Residual { body: cb, shortcut: cs }) => {
                let mut grads = grads;
                let gb = self.backward_layers(body, cb, grad.clone(), grads.as_deref_mut(), need_input);
                let gs = if shortcut.is_empty() {
                    Some(grad)
                } else {
                    self.backward_layers(shortcut, cs, grad, grads, need_input)
                };
                match (gb, gs) {
                    (Some(a), Some(b)) => Some(a + b),
                    _ => None,
                }
            }
            _ => unreachable!("tape does not match layer graph"),
        }
    }
}

fn into2(x: Tensor) -> Array2<f64> {
    x.into_dimensionality().expect("rank-2 activation")
}

fn view2(x: &Tensor) -> ndarray::ArrayView2<'_, f64> {
    x.view().into_dimensionality().expect("rank-2 weight")
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

#[allow(clippy::type_complexity)]
fn conv_forward(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> (Tensor, Array2<f64>, [usize; 4], (usize, usize)) {
    let s = x.shape();
    let (n, c, h, wd) = (s[0], s[1], s[2], s[3]);
    let ws = w.shape();
    let (oc, k) = (ws[0], ws[2]);
    assert_eq!(ws[1], c, "conv input channels");
    let (oh, ow) = (conv_out(h, k, stride, pad), conv_out(wd, k, stride, pad));
    let ckk = c * k * k;
    let src = x.as_slice().expect("contiguous");
    let mut cols = vec![0.0; n * oh * ow * ckk];
    for i in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((i * oh + oy) * ow + ox) * ckk;
                for ch in 0..c {
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let sbase = ((i * c + ch) * h + iy as usize) * wd;
                        let cbase = row + (ch * k + ky) * k;
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < wd as isize {
                                cols[cbase + kx] = src[sbase + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    let cols = Array2::from_shape_vec((n * oh * ow, ckk), cols).unwrap();
    let w2 = w.view().into_shape_with_order((oc, ckk)).unwrap();
    let y = cols.dot(&w2.t());
    let ys = y.as_slice().unwrap();
    let mut out = vec![0.0; n * oc * oh * ow];
    let plane = oh * ow;
    for i in 0..n {
        for p in 0..plane {
            let r = (i * plane + p) * oc;
            for o in 0..oc {
                out[(i * oc + o) * plane + p] = ys[r + o];
            }
        }
    }
    (
        Tensor::from_shape_vec(IxDyn(&[n, oc, oh, ow]), out).unwrap(),
        cols,
        [n, c, h, wd],
        (oh, ow),
    )
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    grad: &Tensor,
    cols: &Array2<f64>,
    w: &Tensor,
    in_shape: [usize; 4],
    (oh, ow): (usize, usize),
    stride: usize,
    pad: usize,
    need_input: bool,
) -> (Tensor, Option<Tensor>) {
    let [n, c, h, wd] = in_shape;
    let ws = w.shape();
    let (oc, k) = (ws[0], ws[2]);
    let ckk = c * k * k;
    let plane = oh * ow;
    let gsrc = grad.as_standard_layout();
    let gsrc = gsrc.as_slice().unwrap();
    let mut g2 = vec![0.0; n * plane * oc];
    for i in 0..n {
        for o in 0..oc {
            let b = (i * oc + o) * plane;
            for p in 0..plane {
                g2[(i * plane + p) * oc + o] = gsrc[b + p];
            }
        }
    }
    let g2 = Array2::from_shape_vec((n * plane, oc), g2).unwrap();
    let dw = g2.t().dot(cols).into_shape_with_order(IxDyn(ws)).unwrap();
    if !need_input {
        return (dw, None);
    }
    let w2 = w.view().into_shape_with_order((oc, ckk)).unwrap();
    let dcols = g2.dot(&w2);
    let dc = dcols.as_slice().unwrap();
    let mut dx = vec![0.0; n * c * h * wd];
    for i in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((i * oh + oy) * ow + ox) * ckk;
                for ch in 0..c {
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dbase = ((i * c + ch) * h + iy as usize) * wd;
                        let cbase = row + (ch * k + ky) * k;
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < wd as isize {
                                dx[dbase + ix as usize] += dc[cbase + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    (dw, Some(Tensor::from_shape_vec(IxDyn(&[n, c, h, wd]), dx).unwrap()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::from_seed;

    fn small_net(rng: &mut crate::seed::SeededRng) -> Network {
        let mut b = NetworkBuilder::new(rng);
        let layers = vec![
            b.conv("c0", 2, 3, 3, 2, 1),
            b.dual_bn("bn0", 3),
            b.relu(),
            {
                let body = vec![b.conv("r.c", 3, 3, 3, 1, 1), b.dual_bn("r.bn", 3)];
                b.residual(body, vec![])
            },
            b.relu(),
            b.global_avg_pool(),
            b.linear("fc", 3, 4, true),
            b.dual_bn("bn1", 4),
        ];
        b.finish(layers)
    }

    fn input(seed: u64, shape: &[usize]) -> Tensor {
        let mut rng = from_seed(seed);
        Tensor::from_shape_fn(IxDyn(shape), |_| rng.random::<f64>())
    }

    fn objective(out: &Tensor, weights: &Tensor) -> f64 {
        (out * weights).sum()
    }

    #[test]
    fn parameter_and_input_gradients_match_finite_differences() {
        let mut rng = from_seed(3);
        let net = small_net(&mut rng);
        let x = input(4, &[3, 2, 6, 6]);
        for (bn, pass) in [(BnMode::Clean, BnPass::TrainNoStats), (BnMode::Adv, BnPass::Eval)] {
            let (out, tape, _) = net.run(&x, bn, pass, true);
            let wts = input(5, out.shape());
            let mut grads = Grads::zeros_like(&net);
            let dx = net.backward(&tape.unwrap(), wts.clone(), Some(&mut grads), true).unwrap();
            let h = 1e-6;
            for (pi, p) in net.params.iter().enumerate() {
                for j in 0..p.value.len() {
                    let mut plus = net.clone();
                    plus.params[pi].value.as_slice_mut().unwrap()[j] += h;
                    let mut minus = net.clone();
                    minus.params[pi].value.as_slice_mut().unwrap()[j] -= h;
                    let fd = (objective(&plus.run(&x, bn, pass, false).0, &wts)
                        - objective(&minus.run(&x, bn, pass, false).0, &wts))
                        / (2.0 * h);
                    let an = grads.0[pi].as_slice().unwrap()[j];
                    assert!((fd - an).abs() <= 1e-5 * (1.0 + fd.abs()), "{} [{j}] fd {fd} an {an}", p.name);
                }
            }
            for j in (0..x.len()).step_by(7) {
                let mut xp = x.clone();
                xp.as_slice_mut().unwrap()[j] += h;
                let mut xm = x.clone();
                xm.as_slice_mut().unwrap()[j] -= h;
                let fd = (objective(&net.run(&xp, bn, pass, false).0, &wts)
                    - objective(&net.run(&xm, bn, pass, false).0, &wts))
                    / (2.0 * h);
                let an = dx.as_slice().unwrap()[j];
                assert!((fd - an).abs() <= 1e-5 * (1.0 + fd.abs()), "x[{j}] fd {fd} an {an}");
            }
        }
    }

    #[test]
    fn training_forward_touches_only_selected_branch() {
        let mut rng = from_seed(1);
        let mut net = small_net(&mut rng);
        let before = net.buffers.clone();
        net.forward_train(&input(2, &[4, 2, 6, 6]), BnMode::Clean);
        for (a, b) in before.iter().zip(&net.buffers) {
            if a.name.contains(".adv.") {
                assert_eq!(a, b);
            } else {
                assert_ne!(a.value, b.value, "{}", a.name);
            }
        }
    }

    #[test]
    fn no_stats_pass_leaves_buffers() {
        let mut rng = from_seed(1);
        let net = small_net(&mut rng);
        let (_, _, stats) = net.run(&input(2, &[4, 2, 6, 6]), BnMode::Adv, BnPass::TrainNoStats, false);
        assert!(stats.is_empty());
    }
}
