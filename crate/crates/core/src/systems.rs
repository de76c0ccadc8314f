//! Built-in benchmark systems `x' = f(x) + v`, `v ~ N(0, sigma_v^2 I)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::Dataset;
use crate::kernel::SeKernel;
use crate::linalg::Mat;
use crate::partition::StateBox;
use crate::real::Real;

/// Deterministic part `f` of a benchmark system.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", bound = "T: Real", deny_unknown_fields)]
pub enum Dynamics<T> {
    /// `x1' = x1 - tau x1 + tau/2 sin(x2)`, `x2' = x2 - tau x2 + tau/2 sin(x1)`.
    Sine { tau: T },
    /// `x_d' = gain_d x_d`.
    Linear { gain: Vec<T> },
    /// `f_d(x) = sum_j weights[d][j] k_d(x, centers[j])`, a function with a
    /// known norm in the RKHS of `k_d`.
    SeExpansion {
        centers: Vec<Vec<T>>,
        weights: Vec<Vec<T>>,
        kernels: Vec<SeKernel<T>>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct BenchmarkSystem<T> {
    pub name: String,
    pub dim: usize,
    pub dynamics: Dynamics<T>,
    pub noise_std: T,
}

impl<T: Real> BenchmarkSystem<T> {
    /// The 2-D sine system with `tau = 0.5` and `sigma_v = 3.16`.
    pub fn sine() -> Self {
        BenchmarkSystem {
            name: "sine".into(),
            dim: 2,
            dynamics: Dynamics::Sine { tau: T::lit(0.5) },
            noise_std: T::lit(3.16),
        }
    }

    pub fn linear(gain: Vec<T>, noise_std: T) -> Result<Self> {
        let s = BenchmarkSystem {
            name: "linear".into(),
            dim: gain.len(),
            dynamics: Dynamics::Linear { gain },
            noise_std,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn se_expansion(centers: Vec<Vec<T>>, weights: Vec<Vec<T>>, kernels: Vec<SeKernel<T>>, noise_std: T) -> Result<Self> {
        let s = BenchmarkSystem {
            name: "se_expansion".into(),
            dim: kernels.len(),
            dynamics: Dynamics::SeExpansion {
                centers,
                weights,
                kernels,
            },
            noise_std,
        };
        s.validate()?;
        Ok(s)
    }

    /// Looks up a built-in system by name.
    pub fn builtin(name: &str) -> Result<Self> {
        match name {
            "sine" => Ok(Self::sine()),
            "linear" => Self::linear(vec![T::lit(0.8); 2], T::lit(0.5)),
            "linear1d" => Self::linear(vec![T::lit(0.8)], T::lit(0.5)),
            _ => Err(Error::invalid(format!(
                "unknown system `{name}` (expected sine, linear or linear1d)"
            ))),
        }
    }

    pub fn with_noise(mut self, noise_std: T) -> Self {
        self.noise_std = noise_std;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::invalid("system dimension must be positive"));
        }
        if !(self.noise_std >= T::zero() && self.noise_std.is_finite()) {
            return Err(Error::invalid("noise std must be finite and nonnegative"));
        }
        match &self.dynamics {
            Dynamics::Sine { tau } => {
                if self.dim != 2 || !tau.is_finite() {
                    return Err(Error::invalid("the sine system is 2-D with finite tau"));
                }
            }
            Dynamics::Linear { gain } => {
                if gain.len() != self.dim || gain.iter().any(|g| !g.is_finite()) {
                    return Err(Error::invalid("linear gain needs one finite entry per dimension"));
                }
            }
            Dynamics::SeExpansion {
                centers,
                weights,
                kernels,
            } => {
                let n = self.dim;
                if kernels.len() != n
                    || weights.len() != n
                    || weights.iter().any(|w| w.len() != centers.len())
                    || centers.iter().any(|c| c.len() != n)
                    || kernels.iter().any(|k| k.lengthscales().len() != n)
                {
                    return Err(Error::invalid("kernel expansion shapes do not match the dimension"));
                }
            }
        }
        Ok(())
    }

    /// `f(x)`.
    pub fn drift(&self, x: &[T]) -> Vec<T> {
        match &self.dynamics {
            Dynamics::Sine { tau } => {
                let h = *tau * T::lit(0.5);
                vec![
                    x[0] - *tau * x[0] + h * x[1].sin(),
                    x[1] - *tau * x[1] + h * x[0].sin(),
                ]
            }
            Dynamics::Linear { gain } => x.iter().zip(gain).map(|(&v, &g)| g * v).collect(),
            Dynamics::SeExpansion {
                centers,
                weights,
                kernels,
            } => (0..self.dim)
                .map(|d| {
                    centers
                        .iter()
                        .zip(&weights[d])
                        .map(|(c, &w)| w * kernels[d].eval(x, c))
                        .sum()
                })
                .collect(),
        }
    }

    /// RKHS norm of each `f_d`, when it is known in closed form.
    pub fn rkhs_norms(&self) -> Option<Vec<T>> {
        let Dynamics::SeExpansion {
            centers,
            weights,
            kernels,
        } = &self.dynamics
        else {
            return None;
        };
        Some(
            (0..self.dim)
                .map(|d| {
                    let g = kernels[d].gram(centers);
                    let w = &weights[d];
                    let mut s = T::zero();
                    for i in 0..w.len() {
                        for j in 0..w.len() {
                            s += w[i] * g[(i, j)] * w[j];
                        }
                    }
                    s.max(T::zero()).sqrt()
                })
                .collect(),
        )
    }

    /// One noisy step from `x`.
    pub fn sample_next<R: Rng>(&self, x: &[T], rng: &mut R) -> Vec<T> {
        let mut y = self.drift(x);
        for v in y.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v += self.noise_std * T::lit(z);
        }
        y
    }
}

/// `N` transitions from states drawn uniformly over `domain`.
pub fn simulate<T: Real>(system: &BenchmarkSystem<T>, n: usize, seed: u64, domain: &StateBox<T>) -> Result<Dataset<T>> {
    system.validate()?;
    if n == 0 {
        return Err(Error::invalid("need at least one sample"));
    }
    if domain.dim() != system.dim {
        return Err(Error::invalid(format!(
            "domain is {}-D, system is {}-D",
            domain.dim(),
            system.dim
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let d = system.dim;
    let mut x = Mat::zeros(n, d);
    let mut y = Mat::zeros(n, d);
    for i in 0..n {
        for j in 0..d {
            let u: f64 = rng.random();
            let (lo, hi) = (domain.lower()[j], domain.upper()[j]);
            x[(i, j)] = lo + (hi - lo) * T::lit(u);
        }
        let next = system.sample_next(x.row(i), &mut rng);
        y.row_mut(i).copy_from_slice(&next);
    }
    Dataset::new(x, y, system.noise_std)
}
