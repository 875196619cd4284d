//! Forward evaluation of convolutional branches, the fully connected head
//! and the four architecture families.
//!
//! Convolutions use zero padding so every feature map keeps the input
//! resolution. Inside a convolution the summation order is fixed: input
//! channel outermost, then the two filter taps, then the bias. Zero weights
//! are skipped, which leaves every sum bit-identical to the dense loop.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::files;
use crate::grid::{nn_rotation_map, pad_width, rot90, zero_pad, ImageGrid, RotationMap};

#[inline]
pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// `T_beta z = max(-beta, min(beta, z))`.
pub fn truncate(beta: f64, z: f64) -> f64 {
    z.clamp(-beta, beta)
}

/// Plug-in rule: class 1 iff the estimated probability is at least 1/2.
pub fn plug_in_classify(eta_value: f64) -> u8 {
    u8::from(eta_value >= 0.5)
}

/// Dense row-major tensor with an explicit shape header.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let t = Self { shape: shape.to_vec(), data };
        t.check()?;
        Ok(t)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn check(&self) -> Result<()> {
        let n: usize = self.shape.iter().product();
        if n != self.data.len() {
            return config(format!("tensor shape {:?} holds {} values, found {}", self.shape, n, self.data.len()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Fully connected networks
// ---------------------------------------------------------------------------

/// Affine map followed (for hidden layers) by ReLU. `weights` has shape
/// `[outputs, inputs]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weights: Tensor,
    pub bias: Tensor,
}

impl DenseLayer {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self { weights: Tensor::zeros(&[outputs, inputs]), bias: Tensor::zeros(&[outputs]) }
    }

    pub fn inputs(&self) -> usize {
        self.weights.shape[1]
    }

    pub fn outputs(&self) -> usize {
        self.weights.shape[0]
    }

    #[inline]
    pub fn w(&self, out: usize, inp: usize) -> f64 {
        self.weights.data[out * self.inputs() + inp]
    }

    #[inline]
    pub fn w_mut(&mut self, out: usize, inp: usize) -> &mut f64 {
        let n = self.inputs();
        &mut self.weights.data[out * n + inp]
    }

    fn affine(&self, v: &[f64], out: &mut Vec<f64>) {
        out.clear();
        let n = self.inputs();
        for o in 0..self.outputs() {
            let row = &self.weights.data[o * n..(o + 1) * n];
            let mut acc = 0.0;
            for (w, x) in row.iter().zip(v) {
                acc += w * x;
            }
            out.push(acc + self.bias.data[o]);
        }
    }

    fn check(&self) -> Result<()> {
        self.weights.check()?;
        self.bias.check()?;
        if self.weights.shape.len() != 2 || self.bias.shape != [self.outputs()] {
            return config("dense layer shape mismatch");
        }
        Ok(())
    }
}

/// Standard ReLU network with `L_net` hidden layers and a scalar affine
/// output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedForwardNet {
    pub input_dim: usize,
    pub hidden: Vec<DenseLayer>,
    pub output: DenseLayer,
}

/// Hidden activations of one FFN evaluation.
#[derive(Clone, Debug)]
pub struct FfnTrace {
    /// `acts[0]` is the input, `acts[r]` the output of hidden layer `r`.
    pub acts: Vec<Vec<f64>>,
    pub output: f64,
}

impl FeedForwardNet {
    /// All-zero network with the given hidden widths.
    pub fn zeros(input_dim: usize, widths: &[usize]) -> Self {
        let mut hidden = Vec::with_capacity(widths.len());
        let mut prev = input_dim;
        for &w in widths {
            hidden.push(DenseLayer::zeros(prev, w));
            prev = w;
        }
        Self { input_dim, hidden, output: DenseLayer::zeros(prev, 1) }
    }

    /// `L_net` hidden layers of uniform width `r_net`.
    pub fn uniform(input_dim: usize, depth: usize, width: usize) -> Self {
        Self::zeros(input_dim, &vec![width; depth])
    }

    /// `sum_i w_i v_i + w_0`.
    pub fn affine(weights: &[f64], bias: f64) -> Self {
        let mut net = Self::zeros(weights.len(), &[]);
        net.output.weights.data.copy_from_slice(weights);
        net.output.bias.data[0] = bias;
        net
    }

    pub fn depth(&self) -> usize {
        self.hidden.len()
    }

    /// Largest hidden width, 0 without hidden layers.
    pub fn width(&self) -> usize {
        self.hidden.iter().map(DenseLayer::outputs).max().unwrap_or(0)
    }

    pub fn check(&self) -> Result<()> {
        let mut prev = self.input_dim;
        for layer in self.hidden.iter().chain(std::iter::once(&self.output)) {
            layer.check()?;
            if layer.inputs() != prev {
                return config(format!("dense layer expects {} inputs, previous layer has {prev}", layer.inputs()));
            }
            prev = layer.outputs();
        }
        if self.output.outputs() != 1 {
            return config("network output must be scalar");
        }
        Ok(())
    }

    pub fn forward(&self, v: &[f64]) -> Result<f64> {
        Ok(self.trace(v)?.output)
    }

    pub fn trace(&self, v: &[f64]) -> Result<FfnTrace> {
        if v.len() != self.input_dim {
            return config(format!("network expects {} inputs, got {}", self.input_dim, v.len()));
        }
        let mut acts = Vec::with_capacity(self.hidden.len() + 1);
        acts.push(v.to_vec());
        let mut buf = Vec::new();
        for layer in &self.hidden {
            layer.affine(acts.last().unwrap(), &mut buf);
            acts.push(buf.iter().map(|&z| relu(z)).collect());
        }
        self.output.affine(acts.last().unwrap(), &mut buf);
        Ok(FfnTrace { acts, output: buf[0] })
    }

    /// Accumulates parameter gradients for `d output = dout` into `grad` and
    /// returns the derivative with respect to the input.
    pub fn backward(&self, trace: &FfnTrace, dout: f64, grad: &mut FeedForwardNet) -> Vec<f64> {
        let last = trace.acts.last().unwrap();
        let mut delta: Vec<f64> = (0..self.output.inputs()).map(|i| dout * self.output.w(0, i)).collect();
        for (i, a) in last.iter().enumerate() {
            *grad.output.w_mut(0, i) += dout * a;
        }
        grad.output.bias.data[0] += dout;
        for r in (0..self.hidden.len()).rev() {
            let layer = &self.hidden[r];
            let out = &trace.acts[r + 1];
            let inp = &trace.acts[r];
            let mut dinp = vec![0.0; layer.inputs()];
            for o in 0..layer.outputs() {
                if out[o] <= 0.0 {
                    continue;
                }
                let d = delta[o];
                grad.hidden[r].bias.data[o] += d;
                for i in 0..layer.inputs() {
                    *grad.hidden[r].w_mut(o, i) += d * inp[i];
                    dinp[i] += d * layer.w(o, i);
                }
            }
            delta = dinp;
        }
        delta
    }

    fn visit_params<'a>(&'a self, out: &mut Vec<&'a Tensor>) {
        for l in self.hidden.iter().chain(std::iter::once(&self.output)) {
            out.push(&l.weights);
            out.push(&l.bias);
        }
    }

    fn visit_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        for l in self.hidden.iter_mut().chain(std::iter::once(&mut self.output)) {
            out.push(&mut l.weights);
            out.push(&mut l.bias);
        }
    }
}

// ---------------------------------------------------------------------------
// Convolutional branches
// ---------------------------------------------------------------------------

/// Channel-major stack of `lambda x lambda` maps.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMaps {
    pub lambda: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureMaps {
    pub fn zeros(lambda: usize, channels: usize) -> Self {
        Self { lambda, channels, data: vec![0.0; lambda * lambda * channels] }
    }

    pub fn from_image(x: &ImageGrid) -> Self {
        Self { lambda: x.lambda(), channels: 1, data: x.values().to_vec() }
    }

    #[inline]
    pub fn get(&self, s: usize, i: usize, j: usize) -> f64 {
        self.data[(s * self.lambda + i) * self.lambda + j]
    }

    /// Value at a signed position; zero outside the grid.
    #[inline]
    pub fn get_padded(&self, s: usize, i: isize, j: isize) -> f64 {
        let l = self.lambda as isize;
        if i < 0 || j < 0 || i >= l || j >= l {
            0.0
        } else {
            self.data[(s * self.lambda + i as usize) * self.lambda + j as usize]
        }
    }

    pub fn channel(&self, s: usize) -> &[f64] {
        let n = self.lambda * self.lambda;
        &self.data[s * n..(s + 1) * n]
    }
}

/// One convolutional layer; `weights` has shape `[M, M, k_in, k_out]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub weights: Tensor,
    pub bias: Tensor,
}

impl ConvLayer {
    pub fn zeros(filter: usize, in_channels: usize, out_channels: usize) -> Self {
        Self {
            weights: Tensor::zeros(&[filter, filter, in_channels, out_channels]),
            bias: Tensor::zeros(&[out_channels]),
        }
    }

    pub fn filter(&self) -> usize {
        self.weights.shape[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape[2]
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape[3]
    }

    /// Offset of the centre tap: tap `t` (0-based) reads position `p + t - centre`.
    pub fn centre(&self) -> usize {
        self.filter().div_ceil(2) - 1
    }

    #[inline]
    fn index(&self, t1: usize, t2: usize, s1: usize, s2: usize) -> usize {
        let (m, ci, co) = (self.filter(), self.in_channels(), self.out_channels());
        ((t1 * m + t2) * ci + s1) * co + s2
    }

    #[inline]
    pub fn w(&self, t1: usize, t2: usize, s1: usize, s2: usize) -> f64 {
        self.weights.data[self.index(t1, t2, s1, s2)]
    }

    #[inline]
    pub fn w_mut(&mut self, t1: usize, t2: usize, s1: usize, s2: usize) -> &mut f64 {
        let k = self.index(t1, t2, s1, s2);
        &mut self.weights.data[k]
    }

    fn check(&self) -> Result<()> {
        self.weights.check()?;
        self.bias.check()?;
        if self.weights.shape.len() != 4
            || self.weights.shape[0] != self.weights.shape[1]
            || self.filter() == 0
            || self.bias.shape != [self.out_channels()]
        {
            return config(format!("malformed conv layer with shape {:?}", self.weights.shape));
        }
        Ok(())
    }
}

/// Valid output range along one axis for a tap displacement `d`.
#[inline]
pub(crate) fn tap_range(lambda: usize, d: isize) -> (usize, usize) {
    let l = lambda as isize;
    let lo = (-d).max(0).min(l);
    let hi = (l - d).min(l).max(lo);
    (lo as usize, hi as usize)
}

/// `o_(i,j),s2 = relu(sum_s1 sum_taps w * o_prev + bias)` with zero padding.
pub fn conv_layer_forward(input: &FeatureMaps, layer: &ConvLayer) -> Result<FeatureMaps> {
    if input.channels != layer.in_channels() {
        return config(format!(
            "layer expects {} input channels, got {}",
            layer.in_channels(),
            input.channels
        ));
    }
    let l = input.lambda;
    let m = layer.filter();
    let c = layer.centre() as isize;
    let mut out = FeatureMaps::zeros(l, layer.out_channels());
    let n = l * l;
    for s2 in 0..layer.out_channels() {
        let acc = &mut out.data[s2 * n..(s2 + 1) * n];
        for s1 in 0..layer.in_channels() {
            let src = input.channel(s1);
            for t1 in 0..m {
                let di = t1 as isize - c;
                let (i0, i1) = tap_range(l, di);
                for t2 in 0..m {
                    let w = layer.w(t1, t2, s1, s2);
                    if w == 0.0 {
                        continue;
                    }
                    let dj = t2 as isize - c;
                    let (j0, j1) = tap_range(l, dj);
                    if j0 == j1 {
                        continue;
                    }
                    for i in i0..i1 {
                        let row = (i as isize + di) as usize * l;
                        let dst = &mut acc[i * l + j0..i * l + j1];
                        let s = &src[(row as isize + j0 as isize + dj) as usize..(row as isize + j1 as isize + dj) as usize];
                        for (a, v) in dst.iter_mut().zip(s) {
                            *a += w * v;
                        }
                    }
                }
            }
        }
        let b = layer.bias.data[s2];
        for a in acc.iter_mut() {
            *a = relu(*a + b);
        }
    }
    Ok(out)
}

/// A single convolutional branch: `L` layers, linear read-out and a global
/// max over the interior positions `{1+B..lambda-B}^2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvNet {
    pub layers: Vec<ConvLayer>,
    pub output_weights: Tensor,
    pub bound: usize,
}

/// Everything a backward pass needs from one branch evaluation.
#[derive(Clone, Debug)]
pub struct BranchTrace {
    /// `maps[0]` is the input, `maps[r]` the output of layer `r`.
    pub maps: Vec<FeatureMaps>,
    /// Row-major position of the winning interior score.
    pub argmax: (usize, usize),
    pub output: f64,
}

impl ConvNet {
    /// All-zero branch with channel counts `k_1..k_L` and filter sizes `M_1..M_L`.
    pub fn zeros(channels: &[usize], filters: &[usize], bound: usize) -> Result<Self> {
        if channels.len() != filters.len() {
            return config("channel and filter lists differ in length");
        }
        let mut prev = 1;
        let layers = channels
            .iter()
            .zip(filters)
            .map(|(&k, &m)| {
                let layer = ConvLayer::zeros(m, prev, k);
                prev = k;
                layer
            })
            .collect();
        Ok(Self { layers, output_weights: Tensor::zeros(&[prev]), bound })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn channels(&self) -> Vec<usize> {
        self.layers.iter().map(ConvLayer::out_channels).collect()
    }

    pub fn filters(&self) -> Vec<usize> {
        self.layers.iter().map(ConvLayer::filter).collect()
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map_or(1, ConvLayer::out_channels)
    }

    pub fn check(&self) -> Result<()> {
        let mut prev = 1;
        for (r, layer) in self.layers.iter().enumerate() {
            layer.check()?;
            if layer.in_channels() != prev {
                return config(format!("layer {} expects {} channels, previous has {prev}", r + 1, layer.in_channels()));
            }
            prev = layer.out_channels();
        }
        self.output_weights.check()?;
        if self.output_weights.shape != [prev] {
            return config(format!("output weights {:?} for {prev} channels", self.output_weights.shape));
        }
        Ok(())
    }

    pub fn check_bound(&self, lambda: usize) -> Result<()> {
        if lambda == 0 || self.bound > (lambda - 1) / 2 {
            return config(format!("output bound {} too large for resolution {lambda}", self.bound));
        }
        Ok(())
    }

    /// Input plus the output of every layer.
    pub fn feature_maps(&self, x: &ImageGrid) -> Result<Vec<FeatureMaps>> {
        let mut maps = Vec::with_capacity(self.layers.len() + 1);
        maps.push(FeatureMaps::from_image(x));
        for layer in &self.layers {
            let next = conv_layer_forward(maps.last().unwrap(), layer)?;
            maps.push(next);
        }
        Ok(maps)
    }

    /// Read-out `sum_s w_s o^(L)_s` at every position.
    pub fn score_map(&self, last: &FeatureMaps) -> Vec<f64> {
        let n = last.lambda * last.lambda;
        let mut score = vec![0.0; n];
        for s in 0..last.channels {
            let w = self.output_weights.data[s];
            for (a, v) in score.iter_mut().zip(last.channel(s)) {
                *a += w * v;
            }
        }
        score
    }

    pub fn trace(&self, x: &ImageGrid) -> Result<BranchTrace> {
        self.check_bound(x.lambda())?;
        let maps = self.feature_maps(x)?;
        let l = x.lambda();
        let score = self.score_map(maps.last().unwrap());
        let (lo, hi) = (self.bound, l - self.bound);
        let mut best = (f64::NEG_INFINITY, (lo, lo));
        for i in lo..hi {
            for j in lo..hi {
                let v = score[i * l + j];
                if v > best.0 {
                    best = (v, (i, j));
                }
            }
        }
        Ok(BranchTrace { maps, argmax: best.1, output: best.0 })
    }

    pub fn forward(&self, x: &ImageGrid) -> Result<f64> {
        Ok(self.trace(x)?.output)
    }

    fn visit_params<'a>(&'a self, out: &mut Vec<&'a Tensor>) {
        for l in &self.layers {
            out.push(&l.weights);
            out.push(&l.bias);
        }
        out.push(&self.output_weights);
    }

    fn visit_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        for l in &mut self.layers {
            out.push(&mut l.weights);
            out.push(&mut l.bias);
        }
        out.push(&mut self.output_weights);
    }
}

// ---------------------------------------------------------------------------
// Architectures
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Family {
    /// `t` branches combined by a fully connected head.
    F1,
    /// Maximum over `t` branches.
    F2,
    /// Maximum of an `F2` network over the four 90 degree rotations.
    F3,
    /// Maximum of one branch over `t` nearest-neighbour rotations.
    F4,
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "F1" => Ok(Family::F1),
            "F2" => Ok(Family::F2),
            "F3" => Ok(Family::F3),
            "F4" => Ok(Family::F4),
            _ => config(format!("unknown family {s:?}")),
        }
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

/// A complete classifier network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub family: Family,
    /// Resolution of the images the network is applied to.
    pub input_lambda: usize,
    /// Number of rotation angles (F4 only, 0 otherwise).
    pub rotations: usize,
    pub branches: Vec<ConvNet>,
    pub head: Option<FeedForwardNet>,
}

/// Evaluation record of one architecture forward pass.
#[derive(Clone, Debug)]
pub struct ArchTrace {
    /// `branches[v][b]`: branch `b` applied to view `v`.
    pub branches: Vec<Vec<BranchTrace>>,
    pub head: Option<FfnTrace>,
    /// Winning `(view, branch)` for the max-combined families.
    pub winner: Option<(usize, usize)>,
    pub output: f64,
}

/// Envelope tag of weight files.
pub const WEIGHTS_FORMAT: &str = "rotcnn-weights";

impl Architecture {
    pub fn save(&self, path: &Path) -> Result<()> {
        files::write_json(path, WEIGHTS_FORMAT, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let arch: Self = files::read_json(path, WEIGHTS_FORMAT)?;
        arch.check()?;
        Ok(arch)
    }

    /// Resolution seen by the branches.
    pub fn branch_lambda(&self) -> usize {
        match self.family {
            Family::F4 => self.input_lambda + 2 * pad_width(self.input_lambda),
            _ => self.input_lambda,
        }
    }

    /// F4 rotation angles `2 pi i / t`.
    pub fn angles(&self) -> Vec<f64> {
        (0..self.rotations)
            .map(|i| 2.0 * std::f64::consts::PI * i as f64 / self.rotations as f64)
            .collect()
    }

    pub fn check(&self) -> Result<()> {
        if self.branches.is_empty() {
            return config("architecture without branches");
        }
        for b in &self.branches {
            b.check()?;
            b.check_bound(self.branch_lambda())?;
        }
        match (self.family, &self.head) {
            (Family::F1, Some(head)) => {
                head.check()?;
                if head.input_dim != self.branches.len() {
                    return config(format!("head takes {} inputs for {} branches", head.input_dim, self.branches.len()));
                }
            }
            (Family::F1, None) => return config("F1 requires a head network"),
            (_, Some(_)) => return config(format!("{} has no head network", self.family)),
            _ => {}
        }
        match self.family {
            Family::F4 if self.branches.len() != 1 || self.rotations == 0 => {
                config("F4 uses exactly one branch and at least one rotation")
            }
            Family::F4 => Ok(()),
            _ if self.rotations != 0 => config("rotations are only used by F4"),
            _ => Ok(()),
        }
    }

    /// Precomputes whatever the views of this architecture need.
    pub fn view_maker(&self) -> ViewMaker {
        let maps = if self.family == Family::F4 {
            let lp = self.branch_lambda();
            self.angles().into_iter().map(|a| nn_rotation_map(a, lp)).collect()
        } else {
            Vec::new()
        };
        ViewMaker { family: self.family, input_lambda: self.input_lambda, maps }
    }

    pub fn forward(&self, x: &ImageGrid) -> Result<f64> {
        let views = self.view_maker().views(x)?;
        self.forward_views(&views)
    }

    pub fn forward_views(&self, views: &[ImageGrid]) -> Result<f64> {
        Ok(self.trace_views(views)?.output)
    }

    pub fn trace_views(&self, views: &[ImageGrid]) -> Result<ArchTrace> {
        let branches: Vec<Vec<BranchTrace>> = views
            .iter()
            .map(|v| self.branches.iter().map(|b| b.trace(v)).collect::<Result<Vec<_>>>())
            .collect::<Result<_>>()?;
        if let Some(head) = &self.head {
            let inputs: Vec<f64> = branches[0].iter().map(|t| t.output).collect();
            let trace = head.trace(&inputs)?;
            let output = trace.output;
            return Ok(ArchTrace { branches, head: Some(trace), winner: None, output });
        }
        let mut best = (f64::NEG_INFINITY, (0, 0));
        for (v, row) in branches.iter().enumerate() {
            for (b, t) in row.iter().enumerate() {
                if t.output > best.0 {
                    best = (t.output, (v, b));
                }
            }
        }
        Ok(ArchTrace { branches, head: None, winner: Some(best.1), output: best.0 })
    }

    /// All parameter tensors in a fixed order: branches, then the head.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for b in &self.branches {
            b.visit_params(&mut out);
        }
        if let Some(h) = &self.head {
            h.visit_params(&mut out);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for b in &mut self.branches {
            b.visit_params_mut(&mut out);
        }
        if let Some(h) = &mut self.head {
            h.visit_params_mut(&mut out);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|t| t.data.iter().copied()).collect()
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return config(format!("{} parameters for an architecture with {}", flat.len(), self.param_count()));
        }
        let mut k = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.data.copy_from_slice(&flat[k..k + n]);
            k += n;
        }
        Ok(())
    }

    /// Same shapes, all parameters zero.
    pub fn zeroed(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
        z
    }
}

/// Builds the branch inputs ("views") of an image for one architecture.
#[derive(Clone, Debug)]
pub struct ViewMaker {
    family: Family,
    input_lambda: usize,
    maps: Vec<RotationMap>,
}

impl ViewMaker {
    pub fn views(&self, x: &ImageGrid) -> Result<Vec<ImageGrid>> {
        if x.lambda() != self.input_lambda {
            return config(format!(
                "architecture expects resolution {}, image has {}",
                self.input_lambda,
                x.lambda()
            ));
        }
        Ok(match self.family {
            Family::F1 | Family::F2 => vec![x.clone()],
            Family::F3 => {
                let mut v = vec![x.clone()];
                for k in 1..4 {
                    let next = rot90(&v[k - 1]);
                    v.push(next);
                }
                v
            }
            Family::F4 => {
                let padded = zero_pad(x, pad_width(self.input_lambda));
                self.maps.iter().map(|m| m.apply(&padded)).collect::<Result<_>>()?
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::rot90;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_fill(t: &mut Tensor, rng: &mut ChaCha8Rng) {
        t.data.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
    }

    /// Six nested loops straight from the convolution formula, 1-based.
    fn naive_conv(input: &FeatureMaps, layer: &ConvLayer) -> FeatureMaps {
        let l = input.lambda as isize;
        let m = layer.filter();
        let half = m.div_ceil(2) as isize;
        let mut out = FeatureMaps::zeros(input.lambda, layer.out_channels());
        for s2 in 0..layer.out_channels() {
            for i in 1..=l {
                for j in 1..=l {
                    let mut acc = 0.0;
                    for s1 in 0..layer.in_channels() {
                        for t1 in 1..=m as isize {
                            for t2 in 1..=m as isize {
                                let (a, b) = (i + t1 - half, j + t2 - half);
                                if a >= 1 && a <= l && b >= 1 && b <= l {
                                    acc += layer.w(t1 as usize - 1, t2 as usize - 1, s1, s2)
                                        * input.get(s1, (a - 1) as usize, (b - 1) as usize);
                                }
                            }
                        }
                    }
                    out.data[(s2 * input.lambda + (i - 1) as usize) * input.lambda + (j - 1) as usize] =
                        relu(acc + layer.bias.data[s2]);
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let l = rng.gen_range(1..=8);
            let m = rng.gen_range(1..=5);
            let ci = rng.gen_range(1..=3);
            let co = rng.gen_range(1..=3);
            let mut layer = ConvLayer::zeros(m, ci, co);
            random_fill(&mut layer.weights, &mut rng);
            random_fill(&mut layer.bias, &mut rng);
            let mut input = FeatureMaps::zeros(l, ci);
            input.data.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
            let fast = conv_layer_forward(&input, &layer).unwrap();
            assert_eq!(fast, naive_conv(&input, &layer));
            assert_eq!(fast.lambda, l);
            assert!(fast.data.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn identity_filter() {
        let mut layer = ConvLayer::zeros(1, 1, 1);
        layer.weights.data[0] = 1.0;
        let x = ImageGrid::from_fn(5, |i, j| (i * 5 + j) as f64 / 25.0);
        let out = conv_layer_forward(&FeatureMaps::from_image(&x), &layer).unwrap();
        assert_eq!(out.data, x.values());
    }

    #[test]
    fn corner_sums_only_in_range_taps() {
        let mut layer = ConvLayer::zeros(3, 1, 1);
        layer.weights.data.iter_mut().for_each(|w| *w = 1.0);
        let x = ImageGrid::filled(4, 1.0);
        let out = conv_layer_forward(&FeatureMaps::from_image(&x), &layer).unwrap();
        assert_eq!(out.get(0, 0, 0), 4.0);
        assert_eq!(out.get(0, 0, 1), 6.0);
        assert_eq!(out.get(0, 1, 1), 9.0);
        assert_eq!(out.get(0, 3, 3), 4.0);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let layer = ConvLayer::zeros(3, 2, 1);
        let x = FeatureMaps::zeros(4, 1);
        assert!(matches!(conv_layer_forward(&x, &layer), Err(Error::Config(_))));
    }

    fn identity_branch(bound: usize) -> ConvNet {
        let mut net = ConvNet::zeros(&[1], &[1], bound).unwrap();
        net.layers[0].weights.data[0] = 1.0;
        net.output_weights.data[0] = 1.0;
        net
    }

    #[test]
    fn branch_output_bound() {
        let x = ImageGrid::from_fn(3, |i, j| [0.1, 0.9, 0.3, 0.2, 0.5, 0.8, 0.7, 0.4, 0.6][i * 3 + j]);
        assert_eq!(identity_branch(0).forward(&x).unwrap(), 0.9);
        assert_eq!(identity_branch(1).forward(&x).unwrap(), 0.5);
        assert!(matches!(identity_branch(2).forward(&x), Err(Error::Config(_))));
    }

    #[test]
    fn ffn_basics() {
        let net = FeedForwardNet::affine(&[2.0, -1.0], 0.5);
        assert_eq!(net.forward(&[3.0, 1.0]).unwrap(), 5.5);
        let zero = FeedForwardNet::uniform(3, 2, 4);
        assert_eq!(zero.forward(&[1.0, 2.0, 3.0]).unwrap(), 0.0);
        let mut biased = zero.clone();
        biased.output.bias.data[0] = -0.25;
        assert_eq!(biased.forward(&[1.0, 2.0, 3.0]).unwrap(), -0.25);
        assert!(matches!(net.forward(&[1.0]), Err(Error::Config(_))));
    }

    #[test]
    fn truncation_and_plug_in() {
        assert_eq!(truncate(2.0, 3.0), 2.0);
        assert_eq!(truncate(2.0, -5.0), -2.0);
        assert_eq!(truncate(2.0, 1.0), 1.0);
        assert_eq!(plug_in_classify(0.6), 1);
        assert_eq!(plug_in_classify(0.5), 1);
        assert_eq!(plug_in_classify(0.49), 0);
    }

    fn random_branch(rng: &mut ChaCha8Rng, bound: usize) -> ConvNet {
        let mut net = ConvNet::zeros(&[2, 2], &[3, 3], bound).unwrap();
        for t in net.visit_all_mut() {
            random_fill(t, rng);
        }
        net
    }

    impl ConvNet {
        fn visit_all_mut(&mut self) -> Vec<&mut Tensor> {
            let mut v = Vec::new();
            self.visit_params_mut(&mut v);
            v
        }
    }

    #[test]
    fn f2_single_branch_and_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b: Vec<ConvNet> = (0..3).map(|_| random_branch(&mut rng, 1)).collect();
        let x = ImageGrid::from_fn(6, |_, _| rng.gen());
        let single = Architecture { family: Family::F2, input_lambda: 6, rotations: 0, branches: vec![b[0].clone()], head: None };
        assert_eq!(single.forward(&x).unwrap(), b[0].forward(&x).unwrap());
        let a = Architecture { family: Family::F2, input_lambda: 6, rotations: 0, branches: b.clone(), head: None };
        let mut rev = b;
        rev.reverse();
        let r = Architecture { branches: rev, ..a.clone() };
        assert_eq!(a.forward(&x).unwrap(), r.forward(&x).unwrap());
    }

    #[test]
    fn f3_is_invariant_under_quarter_turns() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let arch = Architecture {
            family: Family::F3,
            input_lambda: 7,
            rotations: 0,
            branches: (0..2).map(|_| random_branch(&mut rng, 1)).collect(),
            head: None,
        };
        for _ in 0..20 {
            let x = ImageGrid::from_fn(7, |_, _| rng.gen());
            assert_eq!(arch.forward(&x).unwrap(), arch.forward(&rot90(&x)).unwrap());
        }
    }

    #[test]
    fn f4_resolution_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let arch = Architecture {
            family: Family::F4,
            input_lambda: 8,
            rotations: 4,
            branches: vec![random_branch(&mut rng, 1)],
            head: None,
        };
        arch.check().unwrap();
        assert_eq!(arch.branch_lambda(), 12);
        let x = ImageGrid::from_fn(8, |_, _| rng.gen());
        let views = arch.view_maker().views(&x).unwrap();
        assert_eq!(views.len(), 4);
        assert_eq!(views[0], zero_pad(&x, 2));
        assert!(matches!(arch.forward(&ImageGrid::zeros(9)), Err(Error::Config(_))));
    }

    #[test]
    fn params_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut head = FeedForwardNet::uniform(2, 1, 6);
        head.hidden[0].weights.data[0] = 0.5;
        let mut arch = Architecture {
            family: Family::F1,
            input_lambda: 5,
            rotations: 0,
            branches: (0..2).map(|_| random_branch(&mut rng, 0)).collect(),
            head: Some(head),
        };
        let p = arch.params();
        assert_eq!(p.len(), arch.param_count());
        let doubled: Vec<f64> = p.iter().map(|v| 2.0 * v).collect();
        arch.set_params(&doubled).unwrap();
        assert_eq!(arch.params(), doubled);
    }
}
