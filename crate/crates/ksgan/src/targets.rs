//! Seeded samplers: the latent distribution, the eight synthetic 2D targets,
//! and the half-normal / standard-normal pair used by the demo command.
//!
//! Every sampler is a pure function of (name, n, rng state). The 2D recipes
//! follow the usual toy-density constructions; they are validated by moment
//! and support checks plus a draw-vs-draw MMD self-consistency floor, not by
//! bit-compatibility with any external code.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;

pub const TARGET_NAMES: [&str; 8] = [
    "swissroll",
    "circles",
    "rings",
    "moons",
    "8gaussians",
    "pinwheel",
    "2spirals",
    "checkerboard",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TargetName {
    #[serde(rename = "swissroll")]
    Swissroll,
    #[serde(rename = "circles")]
    Circles,
    #[serde(rename = "rings")]
    Rings,
    #[serde(rename = "moons")]
    Moons,
    #[serde(rename = "8gaussians")]
    EightGaussians,
    #[serde(rename = "pinwheel")]
    Pinwheel,
    #[serde(rename = "2spirals")]
    TwoSpirals,
    #[serde(rename = "checkerboard")]
    Checkerboard,
}

impl TargetName {
    pub const ALL: [TargetName; 8] = [
        TargetName::Swissroll,
        TargetName::Circles,
        TargetName::Rings,
        TargetName::Moons,
        TargetName::EightGaussians,
        TargetName::Pinwheel,
        TargetName::TwoSpirals,
        TargetName::Checkerboard,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            TargetName::Swissroll => "swissroll",
            TargetName::Circles => "circles",
            TargetName::Rings => "rings",
            TargetName::Moons => "moons",
            TargetName::EightGaussians => "8gaussians",
            TargetName::Pinwheel => "pinwheel",
            TargetName::TwoSpirals => "2spirals",
            TargetName::Checkerboard => "checkerboard",
        }
    }
}

impl fmt::Display for TargetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TargetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TargetName::ALL
            .iter()
            .find(|t| t.as_str() == s)
            .copied()
            .ok_or_else(|| Error::UnknownTarget(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SourceLabel {
    Target(TargetName),
    Latent,
    HalfNormal,
    StdNormal,
    Model,
}

/// A finite batch of points from one distribution.
#[derive(Clone, Debug)]
pub struct SampleSet {
    pub points: Tensor,
    pub label: SourceLabel,
}

impl SampleSet {
    pub fn n(&self) -> usize {
        self.points.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.points.shape()[1]
    }
}

fn require_positive(n: usize, what: &str) -> Result<()> {
    if n == 0 {
        Err(Error::InvalidArgument(format!("{what} requires n >= 1")))
    } else {
        Ok(())
    }
}

/// n i.i.d. standard-normal vectors of the given dimension.
pub fn sample_latent(n: usize, dim: usize, rng: &mut RngState) -> Result<SampleSet> {
    require_positive(n, "sample_latent")?;
    if dim == 0 {
        return Err(Error::InvalidArgument("latent dim must be >= 1".to_string()));
    }
    let data: Vec<f64> = (0..n * dim).map(|_| rng.standard_normal()).collect();
    Ok(SampleSet {
        points: Tensor::new(vec![n, dim], data)?,
        label: SourceLabel::Latent,
    })
}

/// The eight mixture centers after the recipe's 4x scale and 1.414 division.
pub fn eight_gaussian_centers_scaled() -> [[f64; 2]; 8] {
    let r = 1.0 / std::f64::consts::SQRT_2;
    let base = [
        [1.0, 0.0],
        [-1.0, 0.0],
        [0.0, 1.0],
        [0.0, -1.0],
        [r, r],
        [r, -r],
        [-r, r],
        [-r, -r],
    ];
    base.map(|[x, y]| [4.0 * x / 1.414, 4.0 * y / 1.414])
}

pub fn sample_target(name: TargetName, n: usize, rng: &mut RngState) -> Result<SampleSet> {
    require_positive(n, "sample_target")?;
    let mut pts = Vec::with_capacity(2 * n);
    match name {
        TargetName::Swissroll => {
            for _ in 0..n {
                let u = rng.uniform();
                let t = 1.5 * std::f64::consts::PI * (1.0 + 2.0 * u);
                let (n1, n2) = (rng.standard_normal(), rng.standard_normal());
                pts.push((t * t.cos() + n1) / 5.0);
                pts.push((t * t.sin() + n2) / 5.0);
            }
        }
        TargetName::Circles => {
            for i in 0..n {
                let radius = if i % 2 == 0 { 1.0 } else { 0.5 };
                let theta = rng.uniform() * std::f64::consts::TAU;
                let (n1, n2) = (rng.standard_normal(), rng.standard_normal());
                pts.push(3.0 * (radius * theta.cos() + 0.08 * n1));
                pts.push(3.0 * (radius * theta.sin() + 0.08 * n2));
            }
        }
        TargetName::Rings => {
            let radii = [0.25, 0.5, 0.75, 1.0];
            for i in 0..n {
                let radius = radii[i % 4];
                let theta = rng.uniform() * std::f64::consts::TAU;
                let (n1, n2) = (rng.standard_normal(), rng.standard_normal());
                pts.push(3.0 * (radius * theta.cos() + 0.08 * n1));
                pts.push(3.0 * (radius * theta.sin() + 0.08 * n2));
            }
        }
        TargetName::Moons => {
            for i in 0..n {
                let theta = rng.uniform() * std::f64::consts::PI;
                let (raw_x, raw_y) = if i % 2 == 0 {
                    (theta.cos(), theta.sin())
                } else {
                    (1.0 - theta.cos(), 0.5 - theta.sin())
                };
                let (n1, n2) = (rng.standard_normal(), rng.standard_normal());
                pts.push(2.0 * (raw_x + 0.1 * n1) - 1.0);
                pts.push(2.0 * (raw_y + 0.1 * n2) - 0.2);
            }
        }
        TargetName::EightGaussians => {
            let r = 1.0 / std::f64::consts::SQRT_2;
            let centers = [
                [1.0, 0.0],
                [-1.0, 0.0],
                [0.0, 1.0],
                [0.0, -1.0],
                [r, r],
                [r, -r],
                [-r, r],
                [-r, -r],
            ];
            for _ in 0..n {
                let (n1, n2) = (rng.standard_normal(), rng.standard_normal());
                let c = centers[rng.index(8)];
                pts.push((0.5 * n1 + 4.0 * c[0]) / 1.414);
                pts.push((0.5 * n2 + 4.0 * c[1]) / 1.414);
            }
        }
        TargetName::Pinwheel => {
            for _ in 0..n {
                let bx = rng.standard_normal() * 0.3 + 1.0;
                let by = rng.standard_normal() * 0.1;
                let arm = rng.index(5) as f64;
                let angle = std::f64::consts::TAU * arm / 5.0 + 0.25 * bx.exp();
                let (c, s) = (angle.cos(), angle.sin());
                pts.push(2.0 * (bx * c - by * s));
                pts.push(2.0 * (bx * s + by * c));
            }
        }
        TargetName::TwoSpirals => {
            // Base points come in +/- pairs sharing one spiral draw.
            let mut emitted = 0usize;
            while emitted < n {
                let u = rng.uniform();
                let r = u.sqrt() * 540.0 * std::f64::consts::PI / 180.0;
                let dx = -r.cos() * r + rng.uniform() * 0.5;
                let dy = r.sin() * r + rng.uniform() * 0.5;
                for sign in [1.0, -1.0] {
                    if emitted >= n {
                        break;
                    }
                    let (n1, n2) = (rng.standard_normal(), rng.standard_normal());
                    pts.push(sign * dx / 3.0 + 0.1 * n1);
                    pts.push(sign * dy / 3.0 + 0.1 * n2);
                    emitted += 1;
                }
            }
        }
        TargetName::Checkerboard => {
            for _ in 0..n {
                let x1 = rng.uniform() * 4.0 - 2.0;
                let v = rng.uniform();
                let w = if rng.coin() { 1.0 } else { 0.0 };
                let x2 = (v - 2.0 * w) + x1.floor().rem_euclid(2.0);
                pts.push(2.0 * x1);
                pts.push(2.0 * x2);
            }
        }
    }
    Ok(SampleSet {
        points: Tensor::new(vec![n, 2], pts)?,
        label: SourceLabel::Target(name),
    })
}

/// Half-normal samples (|N(0,1)|, chi with one degree of freedom) paired with
/// standard-normal samples; both 1-dimensional.
pub fn analytic_pair_chi_gaussian(n: usize, rng: &mut RngState) -> Result<(SampleSet, SampleSet)> {
    require_positive(n, "analytic_pair_chi_gaussian")?;
    let half: Vec<f64> = (0..n).map(|_| rng.standard_normal().abs()).collect();
    let gauss: Vec<f64> = (0..n).map(|_| rng.standard_normal()).collect();
    Ok((
        SampleSet {
            points: Tensor::new(vec![n, 1], half)?,
            label: SourceLabel::HalfNormal,
        },
        SampleSet {
            points: Tensor::new(vec![n, 1], gauss)?,
            label: SourceLabel::StdNormal,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn latent_moments_are_standard_normal() {
        let mut rng = RngState::seed_from_u64(100);
        let set = sample_latent(100_000, 8, &mut rng).unwrap();
        let n = set.n() as f64;
        for k in 0..8 {
            let col: Vec<f64> = set.points.data().iter().skip(k).step_by(8).copied().collect();
            let mean = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            assert!(mean.abs() < 0.02, "coord {k} mean {mean}");
            assert!((var - 1.0).abs() < 0.03, "coord {k} var {var}");
        }
    }

    #[test]
    fn samplers_are_pure_functions_of_state() {
        for name in TargetName::ALL {
            let a = sample_target(name, 500, &mut RngState::seed_from_u64(7)).unwrap();
            let b = sample_target(name, 500, &mut RngState::seed_from_u64(7)).unwrap();
            assert_eq!(a.points, b.points, "{name}");
        }
        let a = sample_latent(64, 8, &mut RngState::seed_from_u64(3)).unwrap();
        let b = sample_latent(64, 8, &mut RngState::seed_from_u64(3)).unwrap();
        assert_eq!(a.points, b.points);
    }

    #[test]
    fn zero_count_is_rejected() {
        assert!(sample_latent(0, 8, &mut RngState::seed_from_u64(0)).is_err());
        assert!(sample_target(TargetName::Moons, 0, &mut RngState::seed_from_u64(0)).is_err());
    }

    #[test]
    fn unknown_name_lists_valid_targets() {
        let err = TargetName::from_str("blobs").unwrap_err().to_string();
        for name in TARGET_NAMES {
            assert!(err.contains(name), "{err}");
        }
    }

    #[test]
    fn eight_gaussians_clusters_near_centers() {
        let mut rng = RngState::seed_from_u64(11);
        let set = sample_target(TargetName::EightGaussians, 8000, &mut rng).unwrap();
        let centers = eight_gaussian_centers_scaled();
        let mut counts = [0usize; 8];
        let bound = (3.0 * 0.5 + 1.75) / 1.414;
        for p in set.points.rows() {
            let (best, dist) = centers
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    let d = ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)).sqrt();
                    (i, d)
                })
                .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                .unwrap();
            assert!(dist <= bound, "point {p:?} is {dist} from nearest center");
            counts[best] += 1;
        }
        for (i, &c) in counts.iter().enumerate() {
            assert!(c as f64 >= 0.05 * 8000.0, "mode {i} has {c} points");
        }
    }

    #[test]
    fn checkerboard_stays_in_bounds() {
        let mut rng = RngState::seed_from_u64(12);
        let set = sample_target(TargetName::Checkerboard, 20_000, &mut rng).unwrap();
        for p in set.points.rows() {
            assert!(p[0] >= -4.0 && p[0] <= 4.0 && p[1] >= -4.0 && p[1] <= 4.0, "{p:?}");
        }
    }

    #[test]
    fn swissroll_radii_match_recipe_range() {
        let mut rng = RngState::seed_from_u64(13);
        let set = sample_target(TargetName::Swissroll, 20_000, &mut rng).unwrap();
        let mut inside = 0usize;
        for p in set.points.rows() {
            let r = (p[0] * p[0] + p[1] * p[1]).sqrt();
            assert!(r > 0.05 && r < 4.2, "radius {r}");
            if r > 0.5 && r < 3.5 {
                inside += 1;
            }
        }
        assert!(inside as f64 > 0.98 * 20_000.0, "only {inside} in the nominal band");
    }

    #[test]
    fn half_normal_pair_moments() {
        let mut rng = RngState::seed_from_u64(14);
        let (half, gauss) = analytic_pair_chi_gaussian(65536, &mut rng).unwrap();
        assert!(half.points.data().iter().all(|&v| v >= 0.0));
        let mean_h = half.points.data().iter().sum::<f64>() / 65536.0;
        let expected = (2.0 / std::f64::consts::PI).sqrt();
        assert!((mean_h - expected).abs() < 0.02, "half-normal mean {mean_h}");
        let mean_g = gauss.points.data().iter().sum::<f64>() / 65536.0;
        assert!(mean_g.abs() < 0.02, "gaussian mean {mean_g}");
    }
}
