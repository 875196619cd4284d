//! Square images on the pixel-centre grid of the unit square and the
//! image-space rotation and padding operators used by the architectures.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};

/// A point of the unit square `[-1/2, 1/2]^2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridCoord {
    pub u: (f64, f64),
}

/// Converts 1-based pixel indices into the coordinates of the pixel centre.
pub fn pixel_to_coord(i: usize, j: usize, lambda: usize) -> Result<GridCoord> {
    if lambda == 0 || i == 0 || j == 0 || i > lambda || j > lambda {
        return domain(format!("pixel ({i}, {j}) outside 1..={lambda}"));
    }
    let l = lambda as f64;
    Ok(GridCoord {
        u: (
            (i as f64 - 0.5) / l - 0.5,
            (j as f64 - 0.5) / l - 0.5,
        ),
    })
}

/// `lambda x lambda` gray values, row-major with the first pixel index as row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageGrid {
    lambda: usize,
    values: Vec<f64>,
}

impl ImageGrid {
    pub fn new(lambda: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != lambda * lambda {
            return Err(Error::Config(format!(
                "{} values for a {lambda}x{lambda} grid",
                values.len()
            )));
        }
        Ok(Self { lambda, values })
    }

    pub fn zeros(lambda: usize) -> Self {
        Self::filled(lambda, 0.0)
    }

    pub fn filled(lambda: usize, value: f64) -> Self {
        Self { lambda, values: vec![value; lambda * lambda] }
    }

    pub fn from_fn(lambda: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(lambda * lambda);
        for i in 0..lambda {
            for j in 0..lambda {
                values.push(f(i, j));
            }
        }
        Self { lambda, values }
    }

    pub fn lambda(&self) -> usize {
        self.lambda
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Value at 0-based pixel `(i, j)`.
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.lambda + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.values[i * self.lambda + j] = v;
    }

    /// Value at a signed 0-based pixel, `None` outside the grid.
    #[inline]
    pub fn get_signed(&self, i: isize, j: isize) -> Option<f64> {
        let l = self.lambda as isize;
        if i < 0 || j < 0 || i >= l || j >= l {
            None
        } else {
            Some(self.values[(i * l + j) as usize])
        }
    }

    /// Transposes rows and columns.
    pub fn transpose(&self) -> Self {
        Self::from_fn(self.lambda, |i, j| self.get(j, i))
    }
}

/// Exact 90 degree rotation: `out(i, j) = in(lambda - j + 1, i)` in 1-based
/// pixel indices.
pub fn rot90(x: &ImageGrid) -> ImageGrid {
    let l = x.lambda;
    ImageGrid::from_fn(l, |i, j| x.get(l - 1 - j, i))
}

/// Applies [`rot90`] `quarter_turns` times.
pub fn rot90_n(x: &ImageGrid, quarter_turns: usize) -> ImageGrid {
    let mut out = x.clone();
    for _ in 0..quarter_turns % 4 {
        out = rot90(&out);
    }
    out
}

/// Surrounds the image with `z` rows and columns of zeros on every side.
pub fn zero_pad(x: &ImageGrid, z: usize) -> ImageGrid {
    let l = x.lambda;
    ImageGrid::from_fn(l + 2 * z, |i, j| {
        if i >= z && j >= z && i < z + l && j < z + l {
            x.get(i - z, j - z)
        } else {
            0.0
        }
    })
}

/// Smallest padding such that any rotation of the padded grid still covers
/// the original image: `ceil((sqrt(2) * lambda - lambda) / 2)`.
pub fn pad_width(lambda: usize) -> usize {
    let l = lambda as f64;
    ((std::f64::consts::SQRT_2 * l - l) / 2.0).ceil() as usize
}

/// Rotation of a point about the origin.
#[inline]
pub fn rotate_point(alpha: f64, p: (f64, f64)) -> (f64, f64) {
    let (s, c) = alpha.sin_cos();
    (c * p.0 - s * p.1, s * p.0 + c * p.1)
}

/// A self-map of the grid: `source[v]` is the row-major index of the pixel
/// whose value lands on pixel `v`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RotationMap {
    lambda: usize,
    source: Vec<usize>,
}

impl RotationMap {
    pub fn lambda(&self) -> usize {
        self.lambda
    }

    pub fn source(&self) -> &[usize] {
        &self.source
    }

    /// Pulls values of `x` through the map.
    pub fn apply(&self, x: &ImageGrid) -> Result<ImageGrid> {
        if x.lambda != self.lambda {
            return Err(Error::Config(format!(
                "rotation map for resolution {} applied to {}",
                self.lambda, x.lambda
            )));
        }
        let values = self.source.iter().map(|&s| x.values[s]).collect();
        Ok(ImageGrid { lambda: self.lambda, values })
    }
}

/// Nearest-neighbour rotation map on a `lambda_p x lambda_p` grid.
///
/// Each grid point `v` is sent to the grid point closest (Euclidean) to the
/// rotated point `rot(alpha) v`; ties go to the smallest row-major index.
/// Coordinates are handled in pixel units centred on the image centre, so
/// grid points are exact half-integers.
pub fn nn_rotation_map(alpha: f64, lambda_p: usize) -> RotationMap {
    let n = lambda_p as isize;
    let half = lambda_p as f64 / 2.0;
    let centre = |k: isize| k as f64 + 0.5 - half;
    let mut source = Vec::with_capacity(lambda_p * lambda_p);
    for i in 0..n {
        for j in 0..n {
            let (ri, rj) = rotate_point(alpha, (centre(i), centre(j)));
            // Squared distance is separable, so the nearest grid point is the
            // coordinate-wise nearest, clamped to the grid. Scan its
            // neighbourhood in row-major order to apply the tie rule.
            let ci = ((ri + half - 0.5).round() as isize).clamp(0, n - 1);
            let cj = ((rj + half - 0.5).round() as isize).clamp(0, n - 1);
            let mut best = (f64::INFINITY, 0usize);
            for a in (ci - 1).max(0)..=(ci + 1).min(n - 1) {
                for b in (cj - 1).max(0)..=(cj + 1).min(n - 1) {
                    let d = (centre(a) - ri).powi(2) + (centre(b) - rj).powi(2);
                    // Distances equal up to rounding noise count as ties.
                    if d < best.0 - 1e-9 {
                        best = (d, (a * n + b) as usize);
                    }
                }
            }
            source.push(best.1);
        }
    }
    RotationMap { lambda: lambda_p, source }
}

/// Rotation by an arbitrary angle with nearest-neighbour interpolation.
/// The output has resolution `lambda + 2 * pad_width(lambda)`.
pub fn rotate_image(x: &ImageGrid, alpha: f64) -> ImageGrid {
    let padded = zero_pad(x, pad_width(x.lambda));
    let map = nn_rotation_map(alpha, padded.lambda);
    map.apply(&padded).expect("map built for the padded resolution")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    /// Independent O(n^4) nearest-neighbour search in unit-square coordinates.
    fn brute_force_map(alpha: f64, n: usize) -> Vec<usize> {
        let coords: Vec<(f64, f64)> = (1..=n)
            .flat_map(|i| (1..=n).map(move |j| (i, j)))
            .map(|(i, j)| pixel_to_coord(i, j, n).unwrap().u)
            .collect();
        coords
            .iter()
            .map(|&v| {
                let r = rotate_point(alpha, v);
                let mut best = (f64::INFINITY, 0);
                for (k, u) in coords.iter().enumerate() {
                    let d = ((u.0 - r.0).powi(2) + (u.1 - r.1).powi(2)).sqrt();
                    if d < best.0 - 1e-12 {
                        best = (d, k);
                    }
                }
                best.1
            })
            .collect()
    }

    fn random_image(lambda: usize, seed: u64) -> ImageGrid {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        ImageGrid::from_fn(lambda, |_, _| rng.gen())
    }

    #[test]
    fn pixel_coordinates() {
        assert_eq!(pixel_to_coord(1, 1, 2).unwrap().u, (-0.25, -0.25));
        assert_eq!(pixel_to_coord(2, 2, 2).unwrap().u, (0.25, 0.25));
        assert_eq!(pixel_to_coord(1, 1, 1).unwrap().u, (0.0, 0.0));
        assert!(matches!(pixel_to_coord(0, 1, 2), Err(Error::Domain(_))));
        assert!(matches!(pixel_to_coord(1, 3, 2), Err(Error::Domain(_))));
    }

    #[test]
    fn rot90_index_map() {
        let single = ImageGrid::new(1, vec![0.7]).unwrap();
        assert_eq!(rot90(&single), single);

        let (a, b, c, d) = (1.0, 2.0, 3.0, 4.0);
        let x = ImageGrid::new(2, vec![a, b, c, d]).unwrap();
        let r = rot90(&x);
        assert_eq!(r.get(0, 0), c);
        assert_eq!(r.get(0, 1), a);
        assert_eq!(r.get(1, 0), d);
        assert_eq!(r.get(1, 1), b);
    }

    #[test]
    fn padding() {
        let x = random_image(5, 1);
        assert_eq!(zero_pad(&x, 0), x);
        let p = zero_pad(&ImageGrid::new(1, vec![0.5]).unwrap(), 1);
        assert_eq!(p.values(), &[0.0, 0.0, 0.0, 0.0, 0.5, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(zero_pad(&random_image(28, 2), pad_width(28)).lambda(), 40);
        assert_eq!(pad_width(28), 6);
        assert_eq!(pad_width(32), 7);
        assert_eq!(pad_width(1), 1);
    }

    #[test]
    fn identity_and_half_turn_maps() {
        for n in 1..9 {
            let id = nn_rotation_map(0.0, n);
            assert!(id.source().iter().enumerate().all(|(k, &s)| k == s));
            let half = nn_rotation_map(PI, n);
            let m = n * n;
            assert!(half.source().iter().enumerate().all(|(k, &s)| s == m - 1 - k));
        }
    }

    #[test]
    fn quarter_turn_on_two_by_two_is_a_four_cycle() {
        // Points in row-major order: (-1/4,-1/4), (-1/4,1/4), (1/4,-1/4), (1/4,1/4).
        // rot(pi/2)(a, b) = (-b, a).
        let map = nn_rotation_map(PI / 2.0, 2);
        assert_eq!(map.source(), &[2, 0, 3, 1]);
    }

    #[test]
    fn quarter_turn_matches_rot90_after_padding() {
        for lambda in [3, 4, 7, 8] {
            let x = random_image(lambda, lambda as u64);
            let padded = zero_pad(&x, pad_width(lambda));
            assert_eq!(rotate_image(&x, PI / 2.0), rot90(&padded));
        }
    }

    #[test]
    fn constant_image_rotation() {
        let x = ImageGrid::filled(4, 0.6);
        let r = rotate_image(&x, 0.3);
        assert_eq!(r.lambda(), 6);
        assert!(r.values().iter().all(|&v| v == 0.0 || v == 0.6));
        // The centre of the rotated grid still reads from the original image.
        assert_eq!(r.get(2, 2), 0.6);
        assert_eq!(r.get(3, 3), 0.6);
        assert_eq!(rotate_image(&x, 0.0), zero_pad(&x, 1));
    }

    #[test]
    fn fast_map_matches_brute_force() {
        for n in [2, 3, 5, 8, 11] {
            for k in 0..24 {
                let alpha = 2.0 * PI * k as f64 / 24.0 + 0.013 * k as f64;
                assert_eq!(nn_rotation_map(alpha, n).source(), &brute_force_map(alpha, n)[..]);
            }
        }
    }

    proptest! {
        #[test]
        fn rot90_four_times_is_identity(lambda in 1usize..10, seed in any::<u64>()) {
            let x = random_image(lambda, seed);
            prop_assert_eq!(rot90_n(&x, 4), x);
        }

        #[test]
        fn padding_preserves_nonzero_values(lambda in 1usize..8, z in 0usize..4, seed in any::<u64>()) {
            let x = random_image(lambda, seed);
            let mut a: Vec<f64> = x.values().iter().copied().filter(|v| *v != 0.0).collect();
            let mut b: Vec<f64> = zero_pad(&x, z).values().iter().copied().filter(|v| *v != 0.0).collect();
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            prop_assert_eq!(a, b);
        }

        #[test]
        fn rotation_never_invents_values(lambda in 1usize..10, alpha in 0.0f64..std::f64::consts::TAU, seed in any::<u64>()) {
            let x = random_image(lambda, seed);
            let r = rotate_image(&x, alpha);
            for v in r.values() {
                prop_assert!(*v == 0.0 || x.values().contains(v));
            }
        }
    }
}
