//! Bounded noise schedules `t ↦ σ_t` with `t ~ Unif(0, 1)`, and fixed
//! Gauss–Legendre quadrature for expectations over `t`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeedStream;

pub const DEFAULT_SIGMA_MIN: f64 = 0.02;
pub const DEFAULT_SIGMA_MAX: f64 = 5.0;
pub const DEFAULT_QUAD_POINTS: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleLaw {
    /// `σ_t = σ_min·(σ_max/σ_min)^t`.
    LogLinear,
    /// `σ_t = σ_min + t·(σ_max − σ_min)`.
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSchedule {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub law: ScheduleLaw,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            sigma_min: DEFAULT_SIGMA_MIN,
            sigma_max: DEFAULT_SIGMA_MAX,
            law: ScheduleLaw::LogLinear,
        }
    }
}

impl NoiseSchedule {
    pub fn new(sigma_min: f64, sigma_max: f64, law: ScheduleLaw) -> Result<Self> {
        let s = Self {
            sigma_min,
            sigma_max,
            law,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn log_linear(sigma_min: f64, sigma_max: f64) -> Result<Self> {
        Self::new(sigma_min, sigma_max, ScheduleLaw::LogLinear)
    }

    /// `σ_t ≡ σ₀`.
    pub fn constant(sigma: f64) -> Result<Self> {
        Self::new(sigma, sigma, ScheduleLaw::LogLinear)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0 && self.sigma_min.is_finite()) {
            return Err(Error::Config(format!(
                "sigma_min must be positive and finite, got {}",
                self.sigma_min
            )));
        }
        if !(self.sigma_max >= self.sigma_min && self.sigma_max.is_finite()) {
            return Err(Error::Config(format!(
                "sigma_max must be finite and >= sigma_min, got {}",
                self.sigma_max
            )));
        }
        Ok(())
    }

    pub fn sigma_at(&self, t: f64) -> f64 {
        let s = match self.law {
            ScheduleLaw::LogLinear => self.sigma_min * (self.sigma_max / self.sigma_min).powf(t),
            ScheduleLaw::Linear => self.sigma_min + t * (self.sigma_max - self.sigma_min),
        };
        s.clamp(self.sigma_min, self.sigma_max)
    }

    /// Draws `t ~ Unif(0,1)` and returns `σ_t`.
    pub fn sample_sigma(&self, rng: &mut SeedStream) -> f64 {
        self.sigma_at(rng.uniform_open())
    }

    /// `E_t[f(σ_t)]` by Gauss–Legendre quadrature on (0, 1).
    pub fn expect(&self, quad: &Quadrature, mut f: impl FnMut(f64) -> f64) -> f64 {
        quad.nodes
            .iter()
            .zip(&quad.weights)
            .map(|(t, w)| w * f(self.sigma_at(*t)))
            .sum()
    }

    /// Decreasing geometric grid `σ_max = σ_{T} > … > σ_0 = σ_min` with
    /// `steps` levels, indexed so that `grid[k]` is `σ_k`.
    pub fn geometric_grid(&self, steps: usize) -> Vec<f64> {
        assert!(steps >= 2, "a sampling grid needs at least two levels");
        let ratio = self.sigma_max / self.sigma_min;
        let last = (steps - 1) as f64;
        (0..steps)
            .map(|k| {
                if k == 0 {
                    self.sigma_min
                } else if k == steps - 1 {
                    self.sigma_max
                } else {
                    self.sigma_min * ratio.powf(k as f64 / last)
                }
            })
            .collect()
    }
}

/// Gauss–Legendre nodes and weights mapped to (0, 1).
#[derive(Clone, Debug)]
pub struct Quadrature {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Quadrature {
    pub fn gauss_legendre(n: usize) -> Self {
        assert!(n >= 1);
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let m = n.div_ceil(2);
        for i in 0..m {
            // Tricomi's initial guess, then Newton on P_n.
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre(n, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre(n, x);
            if d != 0.0 {
                dp = d;
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            // Map [-1, 1] to [0, 1]; nodes ascending.
            nodes[i] = 0.5 * (1.0 - x);
            nodes[n - 1 - i] = 0.5 * (1.0 + x);
            weights[i] = 0.5 * w;
            weights[n - 1 - i] = 0.5 * w;
        }
        Self { nodes, weights }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

fn legendre(n: usize, x: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, x);
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    let n = n as f64;
    let d = n * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}
