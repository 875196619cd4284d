//! Rotated-squares scenes, their rasterization, the binary dataset
//! container and the MNIST-rot text loader.
//!
//! Scene coordinates live on `C_1 = [-1/2, 1/2]^2` with the first component
//! along pixel rows, matching [`crate::grid::pixel_to_coord`].

use std::f64::consts::PI;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::exec::{rng_for, Exec};
use crate::grid::{rotate_point, ImageGrid};

/// Per-object removal probability; three independent draws give label 1
/// with probability exactly one half.
pub fn removal_probability() -> f64 {
    1.0 - 0.5f64.powf(1.0 / 3.0)
}

pub const MAX_OVERLAP: f64 = 0.05;
pub const OBJECT_RETRIES: usize = 1000;
pub const SCENE_RETRIES: usize = 100;
pub const DEFAULT_SUPERSAMPLING: usize = 8;

type Pt = (f64, f64);
type Quad = [Pt; 4];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ObjectKind {
    FullSquare,
    SquareMissingQuarter,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub kind: ObjectKind,
    /// Area of the full square, before any quarter is removed.
    pub area: f64,
    pub angle: f64,
    pub gray: f64,
    pub center: Pt,
    /// Removed quarter `1..=4` in the order (-,-), (+,-), (-,+), (+,+)
    /// of the unrotated square.
    pub missing_quarter: Option<u8>,
}

impl SceneObject {
    pub fn side(&self) -> f64 {
        self.area.sqrt()
    }

    /// The present quarters as counter-clockwise convex quads.
    pub fn quads(&self) -> Vec<Quad> {
        let q = self.side() / 4.0;
        (0..4u8)
            .filter(|&k| self.missing_quarter != Some(k + 1))
            .map(|k| {
                let cx = if k % 2 == 0 { -q } else { q };
                let cy = if k < 2 { -q } else { q };
                let corners = [(-q, -q), (q, -q), (q, q), (-q, q)];
                corners.map(|(a, b)| {
                    let r = rotate_point(self.angle, (cx + a, cy + b));
                    (self.center.0 + r.0, self.center.1 + r.1)
                })
            })
            .collect()
    }

    /// Area actually covered by the object.
    pub fn covered_area(&self) -> f64 {
        self.quads().iter().map(|q| polygon_area(q)).sum()
    }

    pub fn inside_unit_square(&self) -> bool {
        self.quads().iter().flatten().all(|p| p.0.abs() <= 0.5 && p.1.abs() <= 0.5)
    }

    pub fn contains(&self, p: Pt) -> bool {
        self.quads().iter().any(|q| in_convex(q, p))
    }
}

/// Signed shoelace area (positive for counter-clockwise order), absolute value returned.
pub fn polygon_area(poly: &[Pt]) -> f64 {
    let n = poly.len();
    let mut s = 0.0;
    for k in 0..n {
        let (a, b) = (poly[k], poly[(k + 1) % n]);
        s += a.0 * b.1 - b.0 * a.1;
    }
    (s / 2.0).abs()
}

fn cross(o: Pt, a: Pt, b: Pt) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

fn in_convex(q: &Quad, p: Pt) -> bool {
    (0..4).all(|k| cross(q[k], q[(k + 1) % 4], p) >= 0.0)
}

/// Sutherland-Hodgman clip of `subject` against the convex
/// counter-clockwise polygon `clip`.
pub fn clip_polygon(subject: &[Pt], clip: &[Pt]) -> Vec<Pt> {
    let mut out = subject.to_vec();
    for k in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[k], clip[(k + 1) % clip.len()]);
        let input = std::mem::take(&mut out);
        for m in 0..input.len() {
            let cur = input[m];
            let prev = input[(m + input.len() - 1) % input.len()];
            let (dc, dp) = (cross(a, b, cur), cross(a, b, prev));
            if dc >= 0.0 {
                if dp < 0.0 {
                    out.push(intersect(prev, cur, dp, dc));
                }
                out.push(cur);
            } else if dp >= 0.0 {
                out.push(intersect(prev, cur, dp, dc));
            }
        }
    }
    out
}

fn intersect(p: Pt, q: Pt, dp: f64, dq: f64) -> Pt {
    let t = dp / (dp - dq);
    (p.0 + t * (q.0 - p.0), p.1 + t * (q.1 - p.1))
}

/// `area(a ∩ b) / area(a)`, summing clip areas over all quarter pairs.
pub fn overlap_fraction(a: &SceneObject, b: &SceneObject) -> f64 {
    let (qa, qb) = (a.quads(), b.quads());
    let mut inter = 0.0;
    for p in &qa {
        for q in &qb {
            inter += polygon_area(&clip_polygon(p, q));
        }
    }
    inter / a.covered_area()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
    pub label: u8,
}

fn place_object(rng: &mut impl Rng, gray: f64, missing: bool, earlier: &[SceneObject]) -> Option<SceneObject> {
    let (kind, hi) = if missing { (ObjectKind::SquareMissingQuarter, 0.06) } else { (ObjectKind::FullSquare, 0.08) };
    let area = rng.gen_range(0.02..=hi);
    let angle = rng.gen_range(0.0..2.0 * PI);
    let missing_quarter = missing.then(|| rng.gen_range(1..=4u8));
    for _ in 0..OBJECT_RETRIES {
        let center = (rng.gen_range(-0.5..=0.5), rng.gen_range(-0.5..=0.5));
        let obj = SceneObject { kind, area, angle, gray, center, missing_quarter };
        if obj.inside_unit_square() && earlier.iter().all(|e| overlap_fraction(e, &obj) <= MAX_OVERLAP) {
            return Some(obj);
        }
    }
    None
}

/// Three objects placed one after another; a failed placement restarts the scene.
pub fn sample_scene(rng: &mut impl Rng) -> Result<Scene> {
    let p = removal_probability();
    'scene: for _ in 0..SCENE_RETRIES {
        let missing: Vec<bool> = (0..3).map(|_| rng.gen_bool(p)).collect();
        let mut grays = [0.0, 1.0 / 3.0, 2.0 / 3.0];
        grays.shuffle(rng);
        let mut objects: Vec<SceneObject> = Vec::with_capacity(3);
        for k in 0..3 {
            match place_object(rng, grays[k], missing[k], &objects) {
                Some(o) => objects.push(o),
                None => continue 'scene,
            }
        }
        let label = u8::from(missing.iter().any(|&m| m));
        return Ok(Scene { objects, label });
    }
    Err(Error::Sampling(SCENE_RETRIES))
}

/// Mean over `ss x ss` subsamples per pixel; later objects are drawn on top
/// of earlier ones and the background is 1.
pub fn rasterize(scene: &Scene, lambda: usize, ss: usize) -> Result<ImageGrid> {
    if ss == 0 || lambda == 0 {
        return config("resolution and supersampling must be positive");
    }
    let quads: Vec<Vec<Quad>> = scene.objects.iter().map(SceneObject::quads).collect();
    let boxes: Vec<(f64, f64, f64, f64)> = quads
        .iter()
        .map(|qs| {
            qs.iter().flatten().fold((f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY), |b, p| {
                (b.0.min(p.0), b.1.max(p.0), b.2.min(p.1), b.3.max(p.1))
            })
        })
        .collect();
    let l = lambda as f64;
    let total = (ss * ss) as f64;
    let mut counts = vec![0usize; scene.objects.len() + 1];
    Ok(ImageGrid::from_fn(lambda, |i, j| {
        counts.iter_mut().for_each(|c| *c = 0);
        for a in 0..ss {
            let u = (i as f64 + (a as f64 + 0.5) / ss as f64) / l - 0.5;
            for b in 0..ss {
                let v = (j as f64 + (b as f64 + 0.5) / ss as f64) / l - 0.5;
                let mut top = 0;
                for (k, qs) in quads.iter().enumerate() {
                    let bb = boxes[k];
                    if u >= bb.0 && u <= bb.1 && v >= bb.2 && v <= bb.3 && qs.iter().any(|q| in_convex(q, (u, v))) {
                        top = k + 1;
                    }
                }
                counts[top] += 1;
            }
        }
        let mut acc = counts[0] as f64;
        for (k, o) in scene.objects.iter().enumerate() {
            acc += counts[k + 1] as f64 * o.gray;
        }
        acc / total
    }))
}

/// Labelled images of a common resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub lambda: usize,
    pub images: Vec<ImageGrid>,
    pub labels: Vec<u8>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Subset in the given index order.
    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            lambda: self.lambda,
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub const MAGIC: &'static [u8; 4] = b"RSD1";

    /// `RSD1`, `lambda: u32`, `n: u32`, then per item `lambda^2` f32 pixels
    /// (row-major, little endian) and a `u8` label.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let lam = u32::try_from(self.lambda).map_err(|_| Error::Format("resolution too large".into()))?;
        let n = u32::try_from(self.len()).map_err(|_| Error::Format("too many images".into()))?;
        let mut out = Vec::with_capacity(12 + self.len() * (4 * self.lambda * self.lambda + 1));
        out.extend_from_slice(Self::MAGIC);
        out.extend_from_slice(&lam.to_le_bytes());
        out.extend_from_slice(&n.to_le_bytes());
        for (x, &y) in self.images.iter().zip(&self.labels) {
            if x.lambda() != self.lambda {
                return config("image resolution differs from the dataset resolution");
            }
            for &v in x.values() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
            out.push(y);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(m.to_string());
        if bytes.len() < 12 || &bytes[..4] != Self::MAGIC {
            return Err(bad("missing RSD1 header"));
        }
        let word = |k: usize| u32::from_le_bytes(bytes[k..k + 4].try_into().unwrap()) as usize;
        let (lambda, n) = (word(4), word(8));
        let rec = 4 * lambda * lambda + 1;
        if bytes.len() != 12 + n * rec {
            return Err(bad("dataset length does not match its header"));
        }
        let mut images = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for k in 0..n {
            let body = &bytes[12 + k * rec..12 + (k + 1) * rec];
            let values = body[..rec - 1]
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
                .collect();
            images.push(ImageGrid::new(lambda, values)?);
            labels.push(body[rec - 1]);
        }
        Ok(Self { lambda, images, labels })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Rounds every value to single precision so the container round trip is exact.
fn quantize(mut x: ImageGrid) -> ImageGrid {
    x.values_mut().iter_mut().for_each(|v| *v = f64::from(*v as f32));
    x
}

/// `n` scenes rendered at resolution `lambda`; item `k` draws from its own
/// stream derived from `(seed, k)`.
pub fn generate_dataset(n: usize, lambda: usize, seed: u64, exec: Exec) -> Result<Dataset> {
    generate_dataset_ss(n, lambda, seed, DEFAULT_SUPERSAMPLING, exec)
}

pub fn generate_dataset_ss(n: usize, lambda: usize, seed: u64, ss: usize, exec: Exec) -> Result<Dataset> {
    if n == 0 {
        return config("dataset must contain at least one image");
    }
    let items = exec.try_map(n, |k| -> Result<(ImageGrid, u8)> {
        let mut rng = rng_for(seed, &[k as u64]);
        let scene = sample_scene(&mut rng)?;
        Ok((quantize(rasterize(&scene, lambda, ss)?), scene.label))
    })?;
    let (images, labels) = items.into_iter().unzip();
    Ok(Dataset { lambda, images, labels })
}

/// Rows of 784 gray values and a label; rows of the two kept classes are
/// returned with the first class as 0 and the second as 1, together with
/// the number of dropped rows.
pub fn load_mnist_rot(path: &Path, keep: (u8, u8), transpose: bool) -> Result<(Dataset, usize)> {
    parse_mnist_rot(BufReader::new(fs::File::open(path)?), keep, transpose)
}

pub fn parse_mnist_rot(reader: impl BufRead, keep: (u8, u8), transpose: bool) -> Result<(Dataset, usize)> {
    const LAMBDA: usize = 28;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut dropped = 0;
    for (k, line) in reader.lines().enumerate() {
        let line = line?;
        let perr = |msg: String| Error::Parse { line: k + 1, msg };
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.is_empty() {
            continue;
        }
        if toks.len() != LAMBDA * LAMBDA + 1 {
            return Err(perr(format!("expected {} fields, found {}", LAMBDA * LAMBDA + 1, toks.len())));
        }
        let mut vals = Vec::with_capacity(LAMBDA * LAMBDA);
        for t in &toks[..LAMBDA * LAMBDA] {
            let v: f64 = t.parse().map_err(|_| perr(format!("not a number: {t:?}")))?;
            if !(0.0..=1.0).contains(&v) {
                return Err(perr(format!("gray value {v} outside [0, 1]")));
            }
            vals.push(v);
        }
        let raw: f64 = toks[LAMBDA * LAMBDA].parse().map_err(|_| perr(format!("bad label {:?}", toks[LAMBDA * LAMBDA])))?;
        if raw.fract() != 0.0 || !(0.0..=255.0).contains(&raw) {
            return Err(perr(format!("label {raw} is not a digit class")));
        }
        let class = raw as u8;
        let y = if class == keep.0 {
            0
        } else if class == keep.1 {
            1
        } else {
            dropped += 1;
            continue;
        };
        let mut x = ImageGrid::new(LAMBDA, vals)?;
        if transpose {
            x = x.transpose();
        }
        images.push(quantize(x));
        labels.push(y);
    }
    Ok((Dataset { lambda: LAMBDA, images, labels }, dropped))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn square(center: Pt, side: f64, angle: f64) -> SceneObject {
        SceneObject { kind: ObjectKind::FullSquare, area: side * side, angle, gray: 0.0, center, missing_quarter: None }
    }

    #[test]
    fn label_law_is_exactly_half() {
        let p = removal_probability();
        assert!((1.0 - (1.0 - p).powi(3) - 0.5).abs() <= 1e-15);
    }

    #[test]
    fn overlap_examples() {
        let a = square((0.0, 0.0), 0.2, 0.3);
        assert!((overlap_fraction(&a, &a) - 1.0).abs() <= 1e-12);
        let far = square((0.3, 0.3), 0.1, 1.0);
        assert_eq!(overlap_fraction(&a, &far), 0.0);
        let u = square((0.0, 0.0), 1.0, 0.0);
        let v = square((0.5, 0.0), 1.0, 0.0);
        assert!((overlap_fraction(&u, &v) - 0.5).abs() <= 1e-12);
        let mut notched = square((0.0, 0.0), 0.4, 0.0);
        notched.missing_quarter = Some(4);
        assert!((notched.covered_area() - 0.12).abs() <= 1e-12);
        let corner = square((0.1, 0.1), 0.2, 0.0);
        assert!(overlap_fraction(&notched, &corner).abs() <= 1e-12);
        assert!((overlap_fraction(&corner, &square((0.0, 0.0), 0.4, 0.0)) - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn clip_matches_rectangle_intersection() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let a = square((rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)), rng.gen_range(0.05..0.5), 0.0);
            let b = square((rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)), rng.gen_range(0.05..0.5), 0.0);
            let len = |c1: f64, s1: f64, c2: f64, s2: f64| ((c1 + s1 / 2.0).min(c2 + s2 / 2.0) - (c1 - s1 / 2.0).max(c2 - s2 / 2.0)).max(0.0);
            let want = len(a.center.0, a.side(), b.center.0, b.side()) * len(a.center.1, a.side(), b.center.1, b.side()) / a.area;
            assert!((overlap_fraction(&a, &b) - want).abs() <= 1e-9);
        }
    }

    #[test]
    fn sampled_scenes_satisfy_constraints() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let s = sample_scene(&mut rng).unwrap();
            assert_eq!(s.objects.len(), 3);
            let mut grays: Vec<f64> = s.objects.iter().map(|o| o.gray).collect();
            grays.sort_by(f64::total_cmp);
            assert_eq!(grays, vec![0.0, 1.0 / 3.0, 2.0 / 3.0]);
            assert_eq!(s.label == 1, s.objects.iter().any(|o| o.kind == ObjectKind::SquareMissingQuarter));
            for (k, o) in s.objects.iter().enumerate() {
                assert!(o.inside_unit_square());
                let hi = if o.missing_quarter.is_some() { 0.06 } else { 0.08 };
                assert!(o.area >= 0.02 && o.area <= hi);
                for e in &s.objects[..k] {
                    assert!(overlap_fraction(e, o) <= MAX_OVERLAP);
                }
            }
        }
    }

    #[test]
    fn rasterization_examples() {
        let mut obj = square((0.0, 0.0), 0.5, 0.0);
        obj.gray = 1.0 / 3.0;
        let scene = Scene { objects: vec![obj], label: 0 };
        for ss in [1, 3, 8] {
            let x = rasterize(&scene, 8, ss).unwrap();
            assert_eq!(x.get(0, 0), 1.0);
            assert_eq!(x.get(3, 4), 1.0 / 3.0);
        }
    }

    #[test]
    fn supersampling_error_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let scene = sample_scene(&mut rng).unwrap();
            let coarse = rasterize(&scene, 16, 8).unwrap();
            let fine = rasterize(&scene, 16, 64).unwrap();
            for (a, b) in coarse.values().iter().zip(fine.values()) {
                assert!((a - b).abs() <= 1.0 / 8.0);
            }
        }
    }

    #[test]
    fn generation_is_deterministic_and_balanced() {
        let a = generate_dataset(10, 16, 42, Exec::Parallel).unwrap();
        let b = generate_dataset(10, 16, 42, Exec::Sequential).unwrap();
        assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
        let big = generate_dataset_ss(2000, 4, 7, 1, Exec::Parallel).unwrap();
        let mean = big.labels.iter().map(|&y| f64::from(y)).sum::<f64>() / 2000.0;
        assert!((0.45..=0.55).contains(&mean), "{mean}");
    }

    #[test]
    fn rendered_gray_levels() {
        let d = generate_dataset(3, 32, 9, Exec::Parallel).unwrap();
        for x in &d.images {
            for g in [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0] {
                assert!(x.values().iter().any(|&v| v == f64::from(g as f32)), "missing gray {g}");
            }
            assert!(x.values().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn container_round_trip() {
        let d = generate_dataset(4, 9, 1, Exec::Parallel).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.rsd");
        d.write(&path).unwrap();
        assert_eq!(Dataset::read(&path).unwrap(), d);
        let mut bytes = d.to_bytes().unwrap();
        bytes.pop();
        assert!(matches!(Dataset::from_bytes(&bytes), Err(Error::Format(_))));
    }

    fn row(value: &str, label: &str) -> String {
        let mut s = vec![value; 784].join(" ");
        s.push(' ');
        s.push_str(label);
        s
    }

    #[test]
    fn mnist_rot_parsing() {
        let text = [row("0", "4.0"), row("0.5", "7"), String::new(), row("1", "9")].join("\n");
        let (d, dropped) = parse_mnist_rot(text.as_bytes(), (4, 9), false).unwrap();
        assert_eq!((d.len(), dropped), (2, 1));
        assert_eq!(d.labels, vec![0, 1]);
        assert!(d.images[0].values().iter().all(|&v| v == 0.0));
        assert_eq!(Dataset::from_bytes(&d.to_bytes().unwrap()).unwrap(), d);

        let bad = [row("0", "4"), "0.1 0.2 4".to_string()].join("\n");
        match parse_mnist_rot(bad.as_bytes(), (4, 9), false) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(parse_mnist_rot(row("x", "4").as_bytes(), (4, 9), false).is_err());
        assert!(parse_mnist_rot(row("0", "4.5").as_bytes(), (4, 9), false).is_err());

        let mut vals = vec!["0"; 784];
        vals[1] = "1";
        let line = format!("{} 9", vals.join(" "));
        let (plain, _) = parse_mnist_rot(line.as_bytes(), (4, 9), false).unwrap();
        let (flipped, _) = parse_mnist_rot(line.as_bytes(), (4, 9), true).unwrap();
        assert_eq!(plain.images[0].get(0, 1), 1.0);
        assert_eq!(flipped.images[0].get(1, 0), 1.0);
    }
}
