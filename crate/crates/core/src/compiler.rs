//! Weight construction: an exact ReLU max network, embedding of a fully
//! connected network into consecutive convolutional layers, and compilation
//! of a discretized hierarchical model into a CNN that computes it.
//!
//! Channel layout of a compiled branch of level `l` (0-based channels):
//! `0..4^(l-k)` hold the node values of the current level, the block after
//! `4^(l-k-1)` holds copies of the previous level while it is consumed, and
//! channels from `5 * 4^(l-1)` on are scratch lanes for the node networks.
//! During the first stage channel `4^l` carries the input image.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cnn::{Architecture, ConvNet, DenseLayer, Family, FeedForwardNet};
use crate::error::{config, Result};
use crate::exec::{rng_for, Exec};
use crate::grid::ImageGrid;
use crate::hmax::{offset_radius, BoundRule, GFunc, HmaxSpec, NetSchedule};

/// Network with `ceil(log2 t)` hidden layers computing `max(x_1..x_t)`.
///
/// Pairs are merged by `relu(b - a) + relu(a) - relu(-a)`. For odd counts the
/// two halves share their middle input so both subtrees have equal depth.
pub fn build_max_network(t: usize) -> Result<FeedForwardNet> {
    if t == 0 {
        return config("max network needs at least one input");
    }
    Ok(max_over(t, &(0..t).collect::<Vec<_>>()))
}

/// Max over the inputs listed in `idx`, as a network on `t` inputs.
fn max_over(t: usize, idx: &[usize]) -> FeedForwardNet {
    let n = idx.len();
    if n == 1 {
        let mut w = vec![0.0; t];
        w[idx[0]] = 1.0;
        return FeedForwardNet::affine(&w, 0.0);
    }
    let left = max_over(t, &idx[..n.div_ceil(2)]);
    let right = max_over(t, &idx[n / 2..]);
    let mut hidden = Vec::with_capacity(left.depth() + 1);
    for (a, b) in left.hidden.iter().zip(&right.hidden) {
        hidden.push(block_diagonal(a, b, hidden.is_empty()));
    }
    // Final merge reads the two sub-network outputs, which are affine in the
    // last hidden layer (or in the input when the halves are single inputs).
    let prev = hidden.last().map_or(t, DenseLayer::outputs);
    let (la, lb) = (&left.output, &right.output);
    let split = la.inputs();
    let shared = hidden.is_empty();
    let mut merge = DenseLayer::zeros(prev, 3);
    for i in 0..la.inputs() {
        let (wa, wb) = (la.w(0, i), if shared { lb.w(0, i) } else { 0.0 });
        *merge.w_mut(0, i) += wb - wa;
        *merge.w_mut(1, i) += wa;
        *merge.w_mut(2, i) -= wa;
    }
    if !shared {
        for i in 0..lb.inputs() {
            *merge.w_mut(0, split + i) += lb.w(0, i);
        }
    }
    let (ba, bb) = (la.bias.data[0], lb.bias.data[0]);
    merge.bias.data.copy_from_slice(&[bb - ba, ba, -ba]);
    hidden.push(merge);
    let mut net = FeedForwardNet { input_dim: t, hidden, output: DenseLayer::zeros(3, 1) };
    net.output.weights.data.copy_from_slice(&[1.0, 1.0, -1.0]);
    net
}

/// Stacks two layers side by side; the first layer of both reads the shared input.
fn block_diagonal(a: &DenseLayer, b: &DenseLayer, first: bool) -> DenseLayer {
    let inputs = if first { a.inputs() } else { a.inputs() + b.inputs() };
    let mut out = DenseLayer::zeros(inputs, a.outputs() + b.outputs());
    for o in 0..a.outputs() {
        for i in 0..a.inputs() {
            *out.w_mut(o, i) = a.w(o, i);
        }
        out.bias.data[o] = a.bias.data[o];
    }
    let shift = if first { 0 } else { a.inputs() };
    for o in 0..b.outputs() {
        for i in 0..b.inputs() {
            *out.w_mut(a.outputs() + o, shift + i) = b.w(o, i);
        }
        out.bias.data[a.outputs() + o] = b.bias.data[o];
    }
    out
}

/// A network input read from feature map channel `channel` at offset `(di, dj)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Tap {
    pub di: i64,
    pub dj: i64,
    pub channel: usize,
}

/// Writes `g` into layers `r0 .. r0 + depth(g)` (0-based) of `net` so that
/// channel `target` of the output of the last of these layers holds
/// `relu(g(taps))` at every position. Hidden activations use the channels
/// from `scratch` on.
pub fn embed_ffn(net: &mut ConvNet, r0: usize, g: &FeedForwardNet, taps: &[Tap], target: usize, scratch: usize) -> Result<()> {
    g.check()?;
    if taps.len() != g.input_dim {
        return config(format!("{} taps for a network with {} inputs", taps.len(), g.input_dim));
    }
    let depth = g.depth();
    if r0 + depth >= net.layers.len() {
        return config(format!("embedding needs layers {}..={}, network has {}", r0 + 1, r0 + depth + 1, net.layers.len()));
    }
    let first = &net.layers[r0];
    let (m, c) = (first.filter() as i64, first.centre() as i64);
    for tap in taps {
        if tap.di < -c || tap.di > m - 1 - c || tap.dj < -c || tap.dj > m - 1 - c {
            return config(format!("tap ({}, {}) beyond the reach of a {m}x{m} filter", tap.di, tap.dj));
        }
        if tap.channel >= first.in_channels() {
            return config(format!("tap channel {} not present before layer {}", tap.channel, r0 + 1));
        }
    }
    let layers: Vec<&DenseLayer> = g.hidden.iter().chain(std::iter::once(&g.output)).collect();
    for (q, dense) in layers.iter().enumerate() {
        let r = r0 + q;
        let conv = &net.layers[r];
        let dst = |o: usize| if q == depth { target } else { scratch + o };
        if dst(dense.outputs() - 1) >= conv.out_channels() {
            return config(format!("layer {} lacks channel {}", r + 1, dst(dense.outputs() - 1)));
        }
        if q > 0 && scratch + dense.inputs() > conv.in_channels() {
            return config(format!("layer {} lacks scratch inputs", r + 1));
        }
        for o in 0..dense.outputs() {
            let s2 = dst(o);
            if conv.weights.data.iter().skip(s2).step_by(conv.out_channels()).any(|&w| w != 0.0) || conv.bias.data[s2] != 0.0 {
                return config(format!("channel {s2} of layer {} is already in use", r + 1));
            }
        }
        let conv = &mut net.layers[r];
        let cc = conv.centre();
        for o in 0..dense.outputs() {
            let s2 = dst(o);
            for i in 0..dense.inputs() {
                let w = dense.w(o, i);
                if q == 0 {
                    let tap = taps[i];
                    let (t1, t2) = ((cc as i64 + tap.di) as usize, (cc as i64 + tap.dj) as usize);
                    *conv.w_mut(t1, t2, tap.channel, s2) += w;
                } else {
                    *conv.w_mut(cc, cc, scratch + i, s2) = w;
                }
            }
            conv.bias.data[s2] = dense.bias.data[o];
        }
    }
    Ok(())
}

/// Identity centre tap from `from` to `to` in layer `r` (exact on nonnegative values).
fn carry(net: &mut ConvNet, r: usize, from: usize, to: usize) {
    let layer = &mut net.layers[r];
    let c = layer.centre();
    *layer.w_mut(c, c, from, to) = 1.0;
}

/// Network `g` with `relu(g(v)) = gfunc(v)` on the inputs the model feeds it
/// (pixel values in `[0, 1]` at the leaves, nonnegative node values above).
pub fn g_network(g: &GFunc, arity: usize) -> Result<FeedForwardNet> {
    g.check(arity)?;
    Ok(match g {
        GFunc::Identity => FeedForwardNet::affine(&[1.0], 0.0),
        GFunc::Max4 => build_max_network(arity)?,
        GFunc::Min4 => {
            let mut net = build_max_network(arity)?;
            for w in &mut net.hidden.first_mut().unwrap_or(&mut net.output).weights.data {
                *w = -*w;
            }
            for w in net.output.weights.data.iter_mut().chain(&mut net.output.bias.data) {
                *w = -*w;
            }
            net
        }
        GFunc::Mean4 => FeedForwardNet::affine(&vec![1.0 / arity as f64; arity], 0.0),
        GFunc::AffineClamp { weights, bias } => {
            // clamp(z, 0, 1) = relu(z) - relu(z - 1)
            let mut net = FeedForwardNet::zeros(arity, &[2]);
            for (i, &w) in weights.iter().enumerate() {
                *net.hidden[0].w_mut(0, i) = w;
                *net.hidden[0].w_mut(1, i) = w;
            }
            net.hidden[0].bias.data.copy_from_slice(&[*bias, bias - 1.0]);
            net.output.weights.data.copy_from_slice(&[1.0, -1.0]);
            net
        }
        GFunc::Network { net } => net.clone(),
        GFunc::ProductClamped => return config("product functions have no exact network form"),
    })
}

/// Deepens `net` to `depth` hidden layers without changing `relu(net(v))`:
/// each extra layer holds `relu(out)` and passes it on with weight one.
pub fn pad_depth(net: &FeedForwardNet, depth: usize) -> FeedForwardNet {
    let mut net = net.clone();
    while net.depth() < depth {
        let out = std::mem::replace(&mut net.output, DenseLayer::zeros(1, 1));
        net.hidden.push(out);
        net.output.weights.data[0] = 1.0;
    }
    net
}

/// Node networks of every branch as `[branch][k][s]`, padded to a common depth.
fn node_networks(spec: &HmaxSpec) -> Result<Vec<Vec<Vec<FeedForwardNet>>>> {
    let raw = spec
        .g_funcs
        .iter()
        .map(|branch| {
            branch
                .iter()
                .enumerate()
                .map(|(k, gs)| gs.iter().map(|g| g_network(g, if k == 0 { 1 } else { 4 })).collect::<Result<Vec<_>>>())
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let depth = raw.iter().flatten().flatten().map(FeedForwardNet::depth).max().unwrap_or(0);
    Ok(raw
        .into_iter()
        .map(|b| b.into_iter().map(|lv| lv.iter().map(|n| pad_depth(n, depth)).collect()).collect())
        .collect())
}

/// The schedule a compiled version of `spec` uses: node networks of depth
/// `L_g` and width `r` give `(4^(l+1) - 1)/3 * (L_g + 1)` layers with
/// `5 * 4^(l-1) + r` channels.
pub fn lemma4_schedule(spec: &HmaxSpec) -> Result<NetSchedule> {
    spec.check()?;
    let nets = node_networks(spec)?;
    let all = || nets.iter().flatten().flatten();
    let depth = all().map(FeedForwardNet::depth).max().unwrap_or(0);
    let width = all().map(FeedForwardNet::width).max().unwrap_or(0);
    NetSchedule::build(spec.level, depth, spec.order, width, BoundRule::Theorem)
}

/// How the compiled branches are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Head {
    /// Family F1 with the exact max network as head.
    MaxNetwork,
    /// Family F2.
    Max,
}

fn check_schedule(spec: &HmaxSpec, schedule: &NetSchedule) -> Result<()> {
    let want = lemma4_schedule(spec)?;
    let mut violated = Vec::new();
    if schedule.level != want.level {
        violated.push(format!("level {} != {}", schedule.level, want.level));
    }
    if schedule.layers != want.layers || schedule.depth_unit != want.depth_unit {
        violated.push(format!("L = {} but (4^(l+1)-1)/3*(L_g+1) = {}", schedule.layers, want.layers));
    }
    if schedule.branches != spec.order {
        violated.push(format!("t = {} but order d = {}", schedule.branches, spec.order));
    }
    if schedule.bound != want.bound {
        violated.push(format!("B = {} but 2^(l-1)+l-1 = {}", schedule.bound, want.bound));
    }
    if schedule.filters != want.filters {
        violated.push("filter sizes differ from the block schedule".to_string());
    }
    if schedule.channels.len() != want.layers || schedule.channels.iter().any(|&k| k < want.channels[0]) {
        violated.push(format!("k_r must be at least 5*4^(l-1)+r_net = {}", want.channels[0]));
    }
    if violated.is_empty() {
        Ok(())
    } else {
        config(format!("schedule does not fit the model: {}", violated.join("; ")))
    }
}

/// Builds a CNN whose output equals `spec.eval_discretized` on every image
/// with values in `[0, 1]`.
pub fn compile_hmax(spec: &HmaxSpec, schedule: &NetSchedule, head: Head) -> Result<Architecture> {
    check_schedule(spec, schedule)?;
    let nets = node_networks(spec)?;
    let branches = (0..spec.order)
        .map(|i| compile_branch(spec, schedule, i, &nets[i]))
        .collect::<Result<Vec<_>>>()?;
    let (family, head) = match head {
        Head::MaxNetwork => (Family::F1, Some(build_max_network(spec.order)?)),
        Head::Max => (Family::F2, None),
    };
    let arch = Architecture { family, input_lambda: spec.lambda, rotations: 0, branches, head };
    arch.check()?;
    Ok(arch)
}

fn compile_branch(spec: &HmaxSpec, schedule: &NetSchedule, i: usize, nets: &[Vec<FeedForwardNet>]) -> Result<ConvNet> {
    let l = spec.level;
    let unit = schedule.depth_unit + 1;
    let scratch = 5 * (1usize << (2 * (l - 1)));
    let mut net = ConvNet::zeros(&schedule.channels, &schedule.filters, schedule.bound)?;
    net.output_weights.data[0] = 1.0;

    // Leaves: read the image through the carried input channel.
    let count = 1usize << (2 * l);
    let input = count;
    let end0 = count * unit;
    for r in 0..(count - 1) * unit {
        carry(&mut net, r, if r == 0 { 0 } else { input }, input);
    }
    for s in 0..count {
        let r0 = s * unit;
        let src = if s == 0 { 0 } else { input };
        embed_ffn(&mut net, r0, &nets[0][s], &[Tap { di: 0, dj: 0, channel: src }], s, scratch)?;
        for r in r0 + unit..end0 {
            carry(&mut net, r, s, s);
        }
    }

    // Stage k + 1 combines level k into level k + 1.
    let mut start = end0;
    for k in 0..l {
        let n = 1usize << (2 * (l - k - 1));
        let end = start + n * unit;
        let copies = n;
        for r in start..end {
            for m in 0..4 * n {
                carry(&mut net, r, if r == start { m } else { copies + m }, copies + m);
            }
        }
        for s in 0..n {
            let r0 = start + s * unit;
            let taps: Vec<Tap> = (0..4)
                .map(|j| {
                    let child = 4 * s + j;
                    let o = spec.offsets[i][k][child];
                    Tap { di: o.0, dj: o.1, channel: if s == 0 { child } else { copies + child } }
                })
                .collect();
            embed_ffn(&mut net, r0, &nets[k + 1][s], &taps, s, scratch)?;
            for r in r0 + unit..end {
                carry(&mut net, r, s, s);
            }
        }
        start = end;
    }
    debug_assert!(offset_radius(0) == 1);
    Ok(net)
}

/// Outcome of comparing a compiled network with its model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompilationReport {
    pub samples: usize,
    pub max_deviation: f64,
    pub layers_used: usize,
    pub layers_budget: usize,
    pub max_channels_used: usize,
    pub channel_budget: usize,
}

impl CompilationReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_deviation <= tol && self.layers_used == self.layers_budget && self.max_channels_used <= self.channel_budget
    }
}

/// Largest `|arch(x) - spec(x)|` over `n_samples` uniform random images.
pub fn verify_compilation(spec: &HmaxSpec, arch: &Architecture, n_samples: usize, seed: u64, exec: Exec) -> Result<CompilationReport> {
    if n_samples == 0 {
        return config("verification needs at least one sample");
    }
    if arch.input_lambda != spec.lambda {
        return config(format!("network resolution {} differs from model resolution {}", arch.input_lambda, spec.lambda));
    }
    let devs = exec.try_map(n_samples, |k| -> Result<f64> {
        let mut rng = rng_for(seed, &[k as u64]);
        let x = ImageGrid::from_fn(spec.lambda, |_, _| rng.gen());
        Ok((arch.forward(&x)? - spec.eval_discretized(&x)?).abs())
    })?;
    let max_deviation = devs.into_iter().fold(0.0, |a: f64, d| if d.is_nan() || d > a { d } else { a });
    let budget = lemma4_schedule(spec)?;
    Ok(CompilationReport {
        samples: n_samples,
        max_deviation,
        layers_used: arch.branches.iter().map(ConvNet::depth).max().unwrap_or(0),
        layers_budget: budget.layers,
        max_channels_used: arch.branches.iter().flat_map(|b| b.channels()).max().unwrap_or(0),
        channel_budget: budget.channels[0],
    })
}
