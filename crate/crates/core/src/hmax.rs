//! Hierarchical max-pooling models: the discretized grid model evaluated
//! exactly, a grid approximation of the continuous rotationally symmetric
//! model, the grid-point construction for rotated subparts, and the network
//! size schedule.
//!
//! Offsets are stored in pixel units: the offset `(a, b)` stands for
//! `(a/lambda, b/lambda)`.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cnn::{relu, FeedForwardNet};
use crate::error::{config, domain, Result};
use crate::files;
use crate::grid::{rotate_point, ImageGrid};

pub const SPEC_FORMAT: &str = "rotcnn-hmax-spec";

/// Radius `ceil(2^(k-1)) + k - 1` of the index set `I^(k)`.
pub fn index_radius(k: usize) -> i64 {
    if k == 0 {
        0
    } else {
        (1i64 << (k - 1)) + k as i64 - 1
    }
}

/// Largest admissible offset component `floor(2^(k-1)) + 1` at level `k`.
pub fn offset_radius(k: usize) -> i64 {
    if k == 0 {
        1
    } else {
        (1i64 << (k - 1)) + 1
    }
}

/// Smallest resolution `2^l + 2l - 1` a level-`l` model fits into.
pub fn min_lambda(level: usize) -> usize {
    (1usize << level) + 2 * level - 1
}

/// The square `I^(k)` in row-major order, in units of `1/lambda`.
pub fn eval_index_set(k: usize, lambda: usize) -> Vec<(f64, f64)> {
    let r = index_radius(k);
    let l = lambda as f64;
    let mut out = Vec::with_capacity(((2 * r + 1) * (2 * r + 1)) as usize);
    for a in -r..=r {
        for b in -r..=r {
            out.push((a as f64 / l, b as f64 / l));
        }
    }
    out
}

/// Node functions of a hierarchical model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum GFunc {
    /// Single argument passed through (leaf functions only).
    Identity,
    Max4,
    Mean4,
    Min4,
    /// Product of the arguments clamped to `[0, 1]`.
    ProductClamped,
    /// `clamp(w . v + b, 0, 1)`.
    AffineClamp { weights: Vec<f64>, bias: f64 },
    /// `relu(net(v))`.
    Network { net: FeedForwardNet },
}

impl GFunc {
    pub fn check(&self, arity: usize) -> Result<()> {
        match self {
            GFunc::Identity if arity != 1 => config("identity takes a single argument"),
            GFunc::AffineClamp { weights, .. } if weights.len() != arity => {
                config(format!("affine function with {} weights used with {arity} arguments", weights.len()))
            }
            GFunc::Network { net } => {
                net.check()?;
                if net.input_dim != arity {
                    return config(format!("network with {} inputs used with {arity} arguments", net.input_dim));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn eval(&self, v: &[f64]) -> Result<f64> {
        Ok(match self {
            GFunc::Identity => v[0],
            GFunc::Max4 => v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            GFunc::Mean4 => v.iter().sum::<f64>() / v.len() as f64,
            GFunc::Min4 => v.iter().copied().fold(f64::INFINITY, f64::min),
            GFunc::ProductClamped => v.iter().product::<f64>().clamp(0.0, 1.0),
            GFunc::AffineClamp { weights, bias } => {
                let mut acc = 0.0;
                for (w, x) in weights.iter().zip(v) {
                    acc += w * x;
                }
                (acc + bias).clamp(0.0, 1.0)
            }
            GFunc::Network { net } => relu(net.forward(v)?),
        })
    }
}

/// A discretized hierarchical max-pooling model of level `l` and order `d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HmaxSpec {
    pub level: usize,
    pub order: usize,
    pub lambda: usize,
    /// `offsets[i][k][s]` for branch `i`, `k < level`, `s < 4^(level-k)`.
    pub offsets: Vec<Vec<Vec<(i64, i64)>>>,
    /// `g_funcs[i][k][s]` for `k <= level`; level 0 functions take one argument.
    pub g_funcs: Vec<Vec<Vec<GFunc>>>,
}

fn nodes(level: usize, k: usize) -> usize {
    1 << (2 * (level - k))
}

impl HmaxSpec {
    /// Same function set on every branch.
    pub fn new(lambda: usize, offsets: Vec<Vec<Vec<(i64, i64)>>>, g_funcs: Vec<Vec<GFunc>>) -> Result<Self> {
        let level = g_funcs.len().saturating_sub(1);
        let spec = Self {
            level,
            order: offsets.len(),
            lambda,
            g_funcs: vec![g_funcs; offsets.len()],
            offsets,
        };
        spec.check()?;
        Ok(spec)
    }

    pub fn check(&self) -> Result<()> {
        let l = self.level;
        if l == 0 || self.order == 0 {
            return config("level and order must be at least 1");
        }
        if self.lambda < min_lambda(l) {
            return config(format!(
                "resolution {} is below 2^l + 2l - 1 = {} for level {l}",
                self.lambda,
                min_lambda(l)
            ));
        }
        if self.offsets.len() != self.order || self.g_funcs.len() != self.order {
            return config("offsets and functions must be given for every branch");
        }
        for i in 0..self.order {
            if self.offsets[i].len() != l || self.g_funcs[i].len() != l + 1 {
                return config(format!("branch {} has the wrong number of levels", i + 1));
            }
            for k in 0..=l {
                if self.g_funcs[i][k].len() != nodes(l, k) {
                    return config(format!("branch {} level {k} needs {} functions", i + 1, nodes(l, k)));
                }
                for g in &self.g_funcs[i][k] {
                    g.check(if k == 0 { 1 } else { 4 })?;
                }
                if k == l {
                    continue;
                }
                if self.offsets[i][k].len() != nodes(l, k) {
                    return config(format!("branch {} level {k} needs {} offsets", i + 1, nodes(l, k)));
                }
                let r = offset_radius(k);
                if let Some(o) = self.offsets[i][k].iter().find(|o| o.0.abs() > r || o.1.abs() > r) {
                    return config(format!("offset {o:?} at level {k} exceeds radius {r}"));
                }
            }
        }
        Ok(())
    }

    /// Evaluates node `(k, s)` of branch `i` centred at `(ci, cj)`.
    fn node(&self, i: usize, k: usize, s: usize, c: (i64, i64), read: &dyn Fn(i64, i64) -> Result<f64>) -> Result<f64> {
        if k == 0 {
            return self.g_funcs[i][0][s].eval(&[read(c.0, c.1)?]);
        }
        let mut args = [0.0; 4];
        for (j, a) in args.iter_mut().enumerate() {
            let child = 4 * s + j;
            let o = self.offsets[i][k - 1][child];
            *a = self.node(i, k - 1, child, (c.0 + o.0, c.1 + o.1), read)?;
        }
        self.g_funcs[i][k][s].eval(&args)
    }

    /// `f^(i)` on a patch indexed by `I^(l)` (row-major, side `2 R_l + 1`).
    pub fn eval_hierarchical(&self, branch: usize, patch: &[f64]) -> Result<f64> {
        let r = index_radius(self.level);
        let side = 2 * r + 1;
        if patch.len() as i64 != side * side {
            return config(format!("patch must hold {} values", side * side));
        }
        if branch >= self.order {
            return config(format!("branch {branch} out of range"));
        }
        let read = |a: i64, b: i64| -> Result<f64> {
            if a.abs() > r || b.abs() > r {
                return domain(format!("offset ({a}, {b}) escapes the index set"));
            }
            Ok(patch[((a + r) * side + b + r) as usize])
        };
        self.node(branch, self.level, 0, (0, 0), &read)
    }

    /// `max` over interior anchors and branches.
    pub fn eval_discretized(&self, x: &ImageGrid) -> Result<f64> {
        self.check()?;
        if x.lambda() != self.lambda {
            return config(format!("model expects resolution {}, image has {}", self.lambda, x.lambda()));
        }
        let r = index_radius(self.level);
        let lam = self.lambda as i64;
        let mut best = f64::NEG_INFINITY;
        for ui in r..lam - r {
            for uj in r..lam - r {
                let read = |a: i64, b: i64| -> Result<f64> {
                    if a.abs() > r || b.abs() > r {
                        return domain(format!("offset ({a}, {b}) escapes the index set"));
                    }
                    Ok(x.get((ui + a) as usize, (uj + b) as usize))
                };
                for i in 0..self.order {
                    best = best.max(self.node(i, self.level, 0, (0, 0), &read)?);
                }
            }
        }
        Ok(best)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        files::write_json(path, SPEC_FORMAT, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let spec: Self = files::read_json(path, SPEC_FORMAT)?;
        spec.check()?;
        Ok(spec)
    }
}

/// Corner vector `h^(j)` for child `j` in `0..4`: (-,-), (+,-), (-,+), (+,+).
fn corner(j: usize, h: f64) -> (f64, f64) {
    let a = if j.is_multiple_of(2) { -h } else { h };
    let b = if j < 2 { -h } else { h };
    (a, b)
}

/// Grid offsets for a subpart of width `h` rotated by `alpha`: subpart
/// centres are rounded to the nearest point of `I^(l)` in the maximum norm
/// (ties to the smaller row-major index) and differenced parent to child.
pub fn lemma2_grid_points(level: usize, lambda: usize, alpha: f64, h: f64) -> Result<Vec<Vec<(i64, i64)>>> {
    let l = level;
    if l == 0 {
        return config("level must be at least 1");
    }
    let h_max = (1u64 << l) as f64 / (2f64.sqrt() * lambda as f64);
    if !(h > 0.0 && h <= h_max * (1.0 + 1e-12)) {
        return config(format!("width {h} outside (0, {h_max}]"));
    }
    let lam = lambda as f64;
    let r = index_radius(l);
    let round = |z: (f64, f64)| -> (i64, i64) {
        let mut best = (f64::INFINITY, (0, 0));
        for a in -r..=r {
            for b in -r..=r {
                let d = (a as f64 - z.0).abs().max((b as f64 - z.1).abs());
                if d < best.0 - 1e-9 {
                    best = (d, (a, b));
                }
            }
        }
        best.1
    };
    // Centres in pixel units, level by level from the top.
    let mut z: Vec<Vec<(f64, f64)>> = vec![Vec::new(); l + 1];
    z[l] = vec![(0.0, 0.0)];
    for k in (1..=l).rev() {
        let hk = h / 2f64.powi(l as i32 - k as i32 + 2) * lam;
        let mut next = Vec::with_capacity(4 * z[k].len());
        for &c in &z[k] {
            for j in 0..4 {
                let d = rotate_point(alpha, corner(j, hk));
                next.push((c.0 + d.0, c.1 + d.1));
            }
        }
        z[k - 1] = next;
    }
    let zbar: Vec<Vec<(i64, i64)>> = z.iter().map(|lv| lv.iter().map(|&c| round(c)).collect()).collect();
    Ok((0..l)
        .map(|k| {
            zbar[k]
                .iter()
                .enumerate()
                .map(|(s, c)| {
                    let p = zbar[k + 1][s / 4];
                    (c.0 - p.0, c.1 - p.1)
                })
                .collect()
        })
        .collect())
}

/// Centres `(i - 1/2) 2 pi / d` of the `d` angle intervals.
pub fn branch_angles(order: usize) -> Vec<f64> {
    (0..order).map(|i| (i as f64 + 0.5) * 2.0 * PI / order as f64).collect()
}

/// Model with one branch per angle interval, offsets from `lemma2_grid_points`.
pub fn rotated_spec(lambda: usize, h: f64, order: usize, g_funcs: Vec<Vec<GFunc>>) -> Result<HmaxSpec> {
    let level = g_funcs.len().saturating_sub(1);
    let offsets = branch_angles(order)
        .into_iter()
        .map(|a| lemma2_grid_points(level, lambda, a, h))
        .collect::<Result<Vec<_>>>()?;
    HmaxSpec::new(lambda, offsets, g_funcs)
}

/// Continuous rotationally symmetric model of width `h`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinuousModelSpec {
    pub level: usize,
    pub width: f64,
    pub border: f64,
    /// `g_funcs[k-1][s]` for `k = 1..=level`.
    pub g_funcs: Vec<Vec<GFunc>>,
    /// Base functions applied to the gray value at each leaf centre.
    pub f0_funcs: Vec<GFunc>,
}

impl ContinuousModelSpec {
    /// Uses the border `(2^l + 2l - 1) / (2 lambda)`.
    pub fn new(lambda: usize, width: f64, g_funcs: Vec<Vec<GFunc>>, f0_funcs: Vec<GFunc>) -> Result<Self> {
        let level = g_funcs.len();
        let spec = Self {
            level,
            width,
            border: min_lambda(level) as f64 / (2.0 * lambda as f64),
            g_funcs,
            f0_funcs,
        };
        spec.check()?;
        Ok(spec)
    }

    pub fn check(&self) -> Result<()> {
        let l = self.level;
        if l == 0 || self.g_funcs.len() != l || self.f0_funcs.len() != nodes(l, 0) {
            return config("continuous model function lists do not match its level");
        }
        if !(self.width > 0.0 && self.width / 2f64.sqrt() <= self.border + 1e-15 && self.border <= 0.5) {
            return config(format!("need h/sqrt(2) <= b <= 1/2, got h = {}, b = {}", self.width, self.border));
        }
        for (k, gs) in self.g_funcs.iter().enumerate() {
            if gs.len() != nodes(l, k + 1) {
                return config(format!("level {} needs {} functions", k + 1, nodes(l, k + 1)));
            }
            for g in gs {
                g.check(4)?;
            }
        }
        for g in &self.f0_funcs {
            g.check(1)?;
        }
        Ok(())
    }

    fn node(&self, k: usize, s: usize, c: (f64, f64), alpha: f64, phi: &dyn Fn(f64, f64) -> f64) -> Result<f64> {
        if k == 0 {
            return self.f0_funcs[s].eval(&[phi(c.0, c.1)]);
        }
        let hk = self.width / 2f64.powi(self.level as i32 - k as i32 + 2);
        let mut args = [0.0; 4];
        for (j, a) in args.iter_mut().enumerate() {
            let d = rotate_point(alpha, corner(j, hk));
            *a = self.node(k - 1, 4 * s + j, (c.0 + d.0, c.1 + d.1), alpha, phi)?;
        }
        self.g_funcs[k - 1][s].eval(&args)
    }
}

/// Candidate centres: `{0}` for one step, otherwise an evenly spaced grid
/// including both ends, so grids with `(n-1) | (m-1)` are nested.
fn centre_grid(extent: f64, steps: usize) -> Vec<f64> {
    if steps == 1 {
        return vec![0.0];
    }
    (0..steps)
        .map(|i| -extent + 2.0 * extent * i as f64 / (steps - 1) as f64)
        .collect()
}

/// Lower-bound approximation of the supremum over centres and angles, using
/// a `v_steps x v_steps` centre grid and `a_steps` angles `2 pi i / a_steps`.
pub fn eval_continuous_approx(
    spec: &ContinuousModelSpec,
    phi: &dyn Fn(f64, f64) -> f64,
    v_steps: usize,
    a_steps: usize,
) -> Result<f64> {
    if v_steps == 0 || a_steps == 0 {
        return config("need at least one centre and one angle");
    }
    let grid = centre_grid(0.5 - spec.border, v_steps);
    let centres: Vec<(f64, f64)> = grid.iter().flat_map(|&a| grid.iter().map(move |&b| (a, b))).collect();
    let angles: Vec<f64> = (0..a_steps).map(|a| 2.0 * PI * a as f64 / a_steps as f64).collect();
    eval_continuous_candidates(spec, phi, &centres, &angles)
}

/// Maximum of the model over explicit candidate centres and angles.
pub fn eval_continuous_candidates(
    spec: &ContinuousModelSpec,
    phi: &dyn Fn(f64, f64) -> f64,
    centres: &[(f64, f64)],
    angles: &[f64],
) -> Result<f64> {
    spec.check()?;
    let mut best = f64::NEG_INFINITY;
    for &alpha in angles {
        for &c in centres {
            best = best.max(spec.node(spec.level, 0, c, alpha, phi)?);
        }
    }
    Ok(best)
}

/// Choice of the output bound.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoundRule {
    /// `2^(l-1) + l - 1`, the bound of the approximation result.
    Theorem,
    /// `2^(l-1) - (l - 1)`, the bound used in the experiments.
    Experiment,
}

impl BoundRule {
    pub fn bound(self, level: usize) -> usize {
        let p = 1usize << (level - 1);
        match self {
            BoundRule::Theorem => p + level - 1,
            BoundRule::Experiment => p - (level - 1),
        }
    }
}

/// Sizes of a network that approximates a level-`l` model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetSchedule {
    pub level: usize,
    /// Depth unit `L_n` of each node network.
    pub depth_unit: usize,
    /// Total number of convolutional layers `L`.
    pub layers: usize,
    /// Number of branches `t`.
    pub branches: usize,
    pub bound: usize,
    pub head_depth: usize,
    pub head_width: usize,
    /// `k_r` for `r = 1..=L`.
    pub channels: Vec<usize>,
    /// `M_r` for `r = 1..=L`.
    pub filters: Vec<usize>,
}

fn ceil_log2(t: usize) -> usize {
    let mut d = 0;
    while (1usize << d) < t {
        d += 1;
    }
    d
}

impl NetSchedule {
    /// Layer counts and filter blocks for `level`, node depth `depth_unit`,
    /// `branches` parallel nets and `extra_channels` scratch lanes.
    pub fn build(level: usize, depth_unit: usize, branches: usize, extra_channels: usize, rule: BoundRule) -> Result<Self> {
        if level == 0 || branches == 0 {
            return config("level and branch count must be at least 1");
        }
        let l = level;
        let unit = depth_unit + 1;
        let layers = ((1usize << (2 * (l + 1))) - 1) / 3 * unit;
        let mut filters = Vec::with_capacity(layers);
        for k in 0..=l {
            let m = if k > 1 { (1usize << (k - 1)) + 3 } else { 3 };
            filters.extend(std::iter::repeat_n(m, nodes(l, k) * unit));
        }
        let k_r = 5 * (1usize << (2 * (l - 1))) + extra_channels;
        Ok(Self {
            level,
            depth_unit,
            layers,
            branches,
            bound: rule.bound(l),
            head_depth: ceil_log2(branches),
            head_width: 3 * branches,
            channels: vec![k_r; layers],
            filters,
        })
    }

    /// First layer (0-based) of the filter block of stage `k`.
    pub fn block_start(&self, k: usize) -> usize {
        (0..k).map(|i| nodes(self.level, i) * (self.depth_unit + 1)).sum()
    }
}

/// Network sizes of the approximation result for `n` samples, scaling factor
/// `c > 1`, depth constant `c1`, channel surplus `c2` and smoothness `p`.
pub fn theorem1_schedule(level: usize, n: usize, c: f64, c1: f64, c2: usize, p: f64) -> Result<NetSchedule> {
    if n < 2 || c <= 1.0 || level == 0 || c1 <= 0.0 || p <= 0.0 {
        return config("need n >= 2, c > 1, l >= 1, c1 > 0 and p > 0");
    }
    let depth_unit = (c1 * (n as f64).powf(2.0 / (2.0 * p + 4.0))).ceil() as usize;
    let t = (2f64.powf(level as f64 - 0.5) * PI / (c - 1.0)).ceil() as usize;
    NetSchedule::build(level, depth_unit, t, c2, BoundRule::Theorem)
}
