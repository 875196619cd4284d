//! Least-squares training: manual backpropagation through the
//! architectures, Adam, and a finite-difference gradient check.
//!
//! At max and ReLU kinks the subgradient follows the first maximiser in the
//! fixed evaluation order and treats a zero pre-activation as inactive.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cnn::{tap_range, ArchTrace, Architecture, BranchTrace, ConvNet, FeatureMaps, FeedForwardNet};
use crate::error::{config, domain, Error, Result};
use crate::exec::{rng_for, Exec};
use crate::grid::ImageGrid;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitScheme {
    /// Uniform on `[-sqrt(6/(fan_in+fan_out)), +sqrt(...)]`, zero biases.
    #[default]
    GlorotUniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub init: InitScheme,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 32,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            init: InitScheme::GlorotUniform,
        }
    }
}

impl TrainConfig {
    pub fn check(&self) -> Result<()> {
        let in_unit = |b: f64| b > 0.0 && b < 1.0;
        if self.batch_size == 0 || !in_unit(self.beta1) || !in_unit(self.beta2) || self.learning_rate <= 0.0 || self.epsilon <= 0.0 {
            return config("need batch size >= 1, decays in (0,1) and positive step size and epsilon");
        }
        Ok(())
    }
}

/// Derivatives of the loss, stored in a network of the trained shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub arch: Architecture,
}

impl Gradients {
    pub fn flatten(&self) -> Vec<f64> {
        self.arch.params()
    }
}

fn check_batch(len: usize, labels: &[u8]) -> Result<()> {
    if len == 0 {
        return domain("empty batch");
    }
    if len != labels.len() {
        return config(format!("{len} inputs but {} labels", labels.len()));
    }
    if labels.iter().any(|&y| y > 1) {
        return domain("labels must be 0 or 1");
    }
    Ok(())
}

/// Branch inputs of every image.
pub fn make_views(arch: &Architecture, images: &[ImageGrid], exec: Exec) -> Result<Vec<Vec<ImageGrid>>> {
    let maker = arch.view_maker();
    exec.try_map(images.len(), |i| maker.views(&images[i]))
}

/// `(1/m) sum (y_i - f(x_i))^2`.
pub fn loss(arch: &Architecture, images: &[ImageGrid], labels: &[u8]) -> Result<f64> {
    check_batch(images.len(), labels)?;
    let views = make_views(arch, images, Exec::Sequential)?;
    loss_views(arch, &views, labels, Exec::Sequential)
}

pub fn loss_views(arch: &Architecture, views: &[Vec<ImageGrid>], labels: &[u8], exec: Exec) -> Result<f64> {
    check_batch(views.len(), labels)?;
    let outs = exec.try_map(views.len(), |i| arch.forward_views(&views[i]))?;
    Ok(squared_error(&outs, labels) / views.len() as f64)
}

fn squared_error(outs: &[f64], labels: &[u8]) -> f64 {
    outs.iter().zip(labels).map(|(f, &y)| (f64::from(y) - f).powi(2)).sum()
}

/// Loss and its gradient on a batch.
pub fn backward(arch: &Architecture, images: &[ImageGrid], labels: &[u8]) -> Result<(f64, Gradients)> {
    check_batch(images.len(), labels)?;
    let views = make_views(arch, images, Exec::Sequential)?;
    backward_views(arch, &views, labels, Exec::Sequential)
}

pub fn backward_views(arch: &Architecture, views: &[Vec<ImageGrid>], labels: &[u8], exec: Exec) -> Result<(f64, Gradients)> {
    check_batch(views.len(), labels)?;
    let m = views.len() as f64;
    let parts = exec.try_map(views.len(), |i| -> Result<(f64, Vec<f64>)> {
        let trace = arch.trace_views(&views[i])?;
        let y = f64::from(labels[i]);
        let mut grad = arch.zeroed();
        arch_backward(arch, &trace, -2.0 * (y - trace.output) / m, &mut grad);
        Ok(((y - trace.output).powi(2), grad.params()))
    })?;
    let mut total = vec![0.0; arch.param_count()];
    let mut sq = 0.0;
    for (e, g) in parts {
        sq += e;
        for (t, v) in total.iter_mut().zip(g) {
            *t += v;
        }
    }
    let mut grad = arch.zeroed();
    grad.set_params(&total)?;
    Ok((sq / m, Gradients { arch: grad }))
}

fn arch_backward(arch: &Architecture, trace: &ArchTrace, dout: f64, grad: &mut Architecture) {
    match (&arch.head, &trace.head, &mut grad.head) {
        (Some(head), Some(ht), Some(gh)) => {
            let d = head.backward(ht, dout, gh);
            for (b, net) in arch.branches.iter().enumerate() {
                branch_backward(net, &trace.branches[0][b], d[b], &mut grad.branches[b]);
            }
        }
        _ => {
            if let Some((v, b)) = trace.winner {
                branch_backward(&arch.branches[b], &trace.branches[v][b], dout, &mut grad.branches[b]);
            }
        }
    }
}

/// Bounding box `(i0, i1, j0, j1)` (half open) of the nonzero entries.
fn support(d: &FeatureMaps) -> Option<(usize, usize, usize, usize)> {
    let l = d.lambda;
    let mut bb: Option<(usize, usize, usize, usize)> = None;
    for (k, &v) in d.data.iter().enumerate() {
        if v != 0.0 {
            let (i, j) = ((k / l) % l, k % l);
            bb = Some(match bb {
                None => (i, i + 1, j, j + 1),
                Some((a, b, c, e)) => (a.min(i), b.max(i + 1), c.min(j), e.max(j + 1)),
            });
        }
    }
    bb
}

fn branch_backward(net: &ConvNet, trace: &BranchTrace, dout: f64, grad: &mut ConvNet) {
    if dout == 0.0 {
        return;
    }
    let depth = net.layers.len();
    let last = &trace.maps[depth];
    let lam = last.lambda;
    let n = lam * lam;
    let (pi, pj) = trace.argmax;
    let mut delta = FeatureMaps::zeros(lam, last.channels);
    for s in 0..last.channels {
        grad.output_weights.data[s] += dout * last.get(s, pi, pj);
        delta.data[s * n + pi * lam + pj] = dout * net.output_weights.data[s];
    }
    for r in (0..depth).rev() {
        let layer = &net.layers[r];
        let out = &trace.maps[r + 1];
        let inp = &trace.maps[r];
        for (d, o) in delta.data.iter_mut().zip(&out.data) {
            if *o <= 0.0 {
                *d = 0.0;
            }
        }
        let Some((bi0, bi1, bj0, bj1)) = support(&delta) else {
            return;
        };
        let g = &mut grad.layers[r];
        let mut dinp = (r > 0).then(|| FeatureMaps::zeros(lam, inp.channels));
        let m = layer.filter();
        let c = layer.centre() as isize;
        for s2 in 0..layer.out_channels() {
            let d2 = &delta.data[s2 * n..(s2 + 1) * n];
            g.bias.data[s2] += d2.iter().sum::<f64>();
            for s1 in 0..layer.in_channels() {
                let src = inp.channel(s1);
                for t1 in 0..m {
                    let di = t1 as isize - c;
                    let (i0, i1) = tap_range(lam, di);
                    let (i0, i1) = (i0.max(bi0), i1.min(bi1));
                    for t2 in 0..m {
                        let dj = t2 as isize - c;
                        let (j0, j1) = tap_range(lam, dj);
                        let (j0, j1) = (j0.max(bj0), j1.min(bj1));
                        if i0 >= i1 || j0 >= j1 {
                            continue;
                        }
                        let w = layer.w(t1, t2, s1, s2);
                        let mut acc = 0.0;
                        for i in i0..i1 {
                            let row = (i as isize + di) as usize * lam;
                            for j in j0..j1 {
                                let dv = d2[i * lam + j];
                                if dv == 0.0 {
                                    continue;
                                }
                                let q = row + (j as isize + dj) as usize;
                                acc += dv * src[q];
                                if let Some(di_map) = dinp.as_mut() {
                                    di_map.data[s1 * n + q] += w * dv;
                                }
                            }
                        }
                        *g.w_mut(t1, t2, s1, s2) += acc;
                    }
                }
            }
        }
        match dinp {
            Some(d) => delta = d,
            None => return,
        }
    }
}

/// Adam moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], step: 0 }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, cfg: &TrainConfig) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return config("parameter, gradient and state sizes differ");
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for k in 0..params.len() {
        let g = grads[k];
        state.m[k] = cfg.beta1 * state.m[k] + (1.0 - cfg.beta1) * g;
        state.v[k] = cfg.beta2 * state.v[k] + (1.0 - cfg.beta2) * g * g;
        let mhat = state.m[k] / c1;
        let vhat = state.v[k] / c2;
        params[k] -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.epsilon);
    }
    Ok(())
}

fn glorot(data: &mut [f64], fan_in: usize, fan_out: usize, rng: &mut impl Rng) {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    data.iter_mut().for_each(|w| *w = rng.gen_range(-a..=a));
}

fn init_ffn(net: &mut FeedForwardNet, rng: &mut impl Rng) {
    for l in net.hidden.iter_mut().chain(std::iter::once(&mut net.output)) {
        let (i, o) = (l.inputs(), l.outputs());
        glorot(&mut l.weights.data, i, o, rng);
        l.bias.data.iter_mut().for_each(|b| *b = 0.0);
    }
}

/// Fresh random weights with the shapes of `template`.
pub fn initialize(template: &Architecture, scheme: InitScheme, seed: u64) -> Architecture {
    let InitScheme::GlorotUniform = scheme;
    let mut rng = rng_for(seed, &[0]);
    let mut arch = template.clone();
    for b in &mut arch.branches {
        for l in &mut b.layers {
            let m2 = l.filter() * l.filter();
            let (ci, co) = (l.in_channels(), l.out_channels());
            glorot(&mut l.weights.data, m2 * ci, m2 * co, &mut rng);
            l.bias.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let k = b.output_weights.len();
        glorot(&mut b.output_weights.data, k, 1, &mut rng);
    }
    if let Some(h) = &mut arch.head {
        init_ffn(h, &mut rng);
    }
    arch
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub loss: f64,
    pub wall_ms: u128,
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub arch: Architecture,
    /// Mean training loss of every epoch, measured before each update.
    pub log: Vec<LogRow>,
}

impl FitResult {
    pub fn losses(&self) -> Vec<f64> {
        self.log.iter().map(|r| r.loss).collect()
    }
}

pub fn fit(template: &Architecture, images: &[ImageGrid], labels: &[u8], cfg: &TrainConfig, exec: Exec) -> Result<FitResult> {
    check_batch(images.len(), labels)?;
    let views = make_views(template, images, exec)?;
    fit_views(template, &views, labels, cfg, exec)
}

/// Trains from a fresh initialisation on precomputed branch inputs.
pub fn fit_views(template: &Architecture, views: &[Vec<ImageGrid>], labels: &[u8], cfg: &TrainConfig, exec: Exec) -> Result<FitResult> {
    cfg.check()?;
    template.check()?;
    check_batch(views.len(), labels)?;
    let mut arch = initialize(template, cfg.init, cfg.seed);
    let mut params = arch.params();
    let mut state = AdamState::new(params.len());
    let mut order: Vec<usize> = (0..views.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let start = Instant::now();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng_for(cfg.seed, &[1, epoch as u64]));
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let bv: Vec<Vec<ImageGrid>> = chunk.iter().map(|&i| views[i].clone()).collect();
            let bl: Vec<u8> = chunk.iter().map(|&i| labels[i]).collect();
            let (l, g) = backward_views(&arch, &bv, &bl, exec)?;
            if !l.is_finite() {
                return Err(Error::Diverged { epoch, loss: l });
            }
            total += l * chunk.len() as f64;
            adam_step(&mut params, &g.flatten(), &mut state, cfg)?;
            if params.iter().any(|p| !p.is_finite()) {
                return Err(Error::Diverged { epoch, loss: f64::NAN });
            }
            arch.set_params(&params)?;
        }
        log.push(LogRow { epoch, loss: total / views.len() as f64, wall_ms: start.elapsed().as_millis() });
    }
    Ok(FitResult { arch, log })
}

/// Writes the training log as `epoch,loss,wall_ms` CSV.
pub fn write_log(path: &Path, log: &[LogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in log {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Which max/ReLU branches every evaluation on the batch takes.
fn signature(arch: &Architecture, views: &[Vec<ImageGrid>]) -> Result<Vec<u64>> {
    let mut sig = Vec::new();
    for v in views {
        let t = arch.trace_views(v)?;
        if let Some((a, b)) = t.winner {
            sig.extend([a as u64, b as u64]);
        }
        if let Some(h) = &t.head {
            for act in &h.acts[1..] {
                sig.extend(act.iter().map(|&a| u64::from(a > 0.0)));
            }
        }
        for row in &t.branches {
            for bt in row {
                sig.extend([bt.argmax.0 as u64, bt.argmax.1 as u64]);
                for map in &bt.maps[1..] {
                    sig.extend(map.data.iter().map(|&a| u64::from(a > 0.0)));
                }
            }
        }
    }
    Ok(sig)
}

#[derive(Clone, Debug, Default)]
pub struct GradCheck {
    pub checked: usize,
    /// Parameters whose perturbation moves a max or ReLU kink.
    pub skipped: usize,
    pub worst_rel_err: f64,
    /// `(parameter index, analytic, finite difference)`.
    pub failures: Vec<(usize, f64, f64)>,
}

/// Compares `backward` with central differences of step `h` for every
/// parameter whose `+-h` perturbation leaves all activation patterns intact.
pub fn gradient_check(arch: &Architecture, images: &[ImageGrid], labels: &[u8], h: f64, rel_tol: f64, abs_floor: f64) -> Result<GradCheck> {
    check_batch(images.len(), labels)?;
    let views = make_views(arch, images, Exec::Sequential)?;
    let (_, g) = backward_views(arch, &views, labels, Exec::Sequential)?;
    let grad = g.flatten();
    let base = arch.params();
    let sig0 = signature(arch, &views)?;
    let mut probe = arch.clone();
    let mut report = GradCheck::default();
    for k in 0..base.len() {
        let mut eval = |delta: f64| -> Result<(f64, bool)> {
            let mut p = base.clone();
            p[k] += delta;
            probe.set_params(&p)?;
            let l = loss_views(&probe, &views, labels, Exec::Sequential)?;
            Ok((l, signature(&probe, &views)? == sig0))
        };
        let (lp, same_p) = eval(h)?;
        let (lm, same_m) = eval(-h)?;
        if !(same_p && same_m) {
            report.skipped += 1;
            continue;
        }
        let fd = (lp - lm) / (2.0 * h);
        let err = (fd - grad[k]).abs();
        let rel = if err <= abs_floor { 0.0 } else { err / fd.abs().max(grad[k].abs()) };
        report.checked += 1;
        report.worst_rel_err = report.worst_rel_err.max(rel);
        if rel > rel_tol {
            report.failures.push((k, grad[k], fd));
        }
    }
    Ok(report)
}
