//! Two-dimensional toy datasets observed through additive Gaussian noise.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::rng::SeedStream;

pub const MIN_POINTS: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
pub enum ToyShape {
    /// Uniform on a circle of the given radius.
    Ring { radius: f64 },
    /// The two interleaved half circles, scaled.
    TwoMoons { scale: f64 },
    /// Equal-weight point masses on a centered `k×k` lattice.
    Grid { modes_per_side: usize, spacing: f64 },
}

impl ToyShape {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            ToyShape::Ring { radius } => radius > 0.0 && radius.is_finite(),
            ToyShape::TwoMoons { scale } => scale > 0.0 && scale.is_finite(),
            ToyShape::Grid {
                modes_per_side,
                spacing,
            } => modes_per_side >= 1 && spacing > 0.0 && spacing.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid toy shape {self:?}")))
        }
    }

    /// `n` clean points as rows.
    pub fn sample(&self, n: usize, rng: &mut SeedStream) -> Mat {
        let mut out = Mat::zeros(n, 2);
        for i in 0..n {
            let (x, y) = match *self {
                ToyShape::Ring { radius } => {
                    let th = 2.0 * PI * rng.uniform_open();
                    (radius * th.cos(), radius * th.sin())
                }
                ToyShape::TwoMoons { scale } => {
                    let th = PI * rng.uniform_open();
                    if rng.next_u64() & 1 == 0 {
                        (scale * th.cos(), scale * th.sin())
                    } else {
                        (scale * (1.0 - th.cos()), scale * (0.5 - th.sin()))
                    }
                }
                ToyShape::Grid {
                    modes_per_side: k,
                    spacing,
                } => {
                    let c = (k as f64 - 1.0) / 2.0;
                    let a = rng.index(k) as f64;
                    let b = rng.index(k) as f64;
                    ((a - c) * spacing, (b - c) * spacing)
                }
            };
            out[(i, 0)] = x;
            out[(i, 1)] = y;
        }
        out
    }

    /// Exact mean and covariance of the clean distribution.
    pub fn population_moments(&self) -> (Vec<f64>, Mat) {
        match *self {
            ToyShape::Ring { radius } => (vec![0.0, 0.0], Mat::identity(2).scale(radius * radius / 2.0)),
            ToyShape::TwoMoons { scale } => {
                let s2 = scale * scale;
                let cov = Mat::from_rows(&[
                    vec![0.75 * s2, (0.125 - 1.0 / PI) * s2],
                    vec![(0.125 - 1.0 / PI) * s2, (0.5625 - 1.0 / PI) * s2],
                ])
                .expect("2x2");
                (vec![0.5 * scale, 0.25 * scale], cov)
            }
            ToyShape::Grid {
                modes_per_side: k,
                spacing,
            } => {
                let var = spacing * spacing * ((k * k) as f64 - 1.0) / 12.0;
                (vec![0.0, 0.0], Mat::identity(2).scale(var))
            }
        }
    }
}

/// Noisy observations `y = x + σ_data·ε` together with the clean points
/// they came from. Only `points` is visible to training.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyDataset {
    pub shape: ToyShape,
    pub sigma_data: f64,
    pub clean: Mat,
    pub points: Mat,
}

impl ToyDataset {
    pub fn generate(shape: ToyShape, n: usize, sigma_data: f64, rng: &mut SeedStream) -> Result<Self> {
        shape.validate()?;
        if n < MIN_POINTS {
            return Err(Error::InsufficientData {
                needed: MIN_POINTS,
                got: n,
            });
        }
        if !(sigma_data >= 0.0 && sigma_data.is_finite()) {
            return Err(Error::Config(format!("sigma_data must be >= 0, got {sigma_data}")));
        }
        let clean = shape.sample(n, &mut rng.split(1));
        let mut noise = rng.split(2);
        let mut points = clean.clone();
        for v in points.as_mut_slice() {
            *v += sigma_data * noise.normal();
        }
        Ok(Self {
            shape,
            sigma_data,
            clean,
            points,
        })
    }

    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.rows() == 0
    }
}
