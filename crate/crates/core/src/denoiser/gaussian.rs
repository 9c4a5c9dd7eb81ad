use crate::diffusion::{Latent, NoiseSchedule};
use crate::error::{Error, Result};
use crate::tensor::Grid;

use super::{check_cotangent, Denoiser, FeatureMap, Linearization};

/// Exact noise predictor for an isotropic Gaussian data prior `N(mu, sigma0^2 I)`.
///
/// Under that prior the posterior mean is
/// `m_t(z) = (sqrt(a) s^2 z + (1 - a) mu) / (a s^2 + 1 - a)` and the optimal
/// noise prediction is `(z - sqrt(a) m_t(z)) / sqrt(1 - a)`, which simplifies
/// to `sqrt(1 - a) (z - sqrt(a) mu) / (a s^2 + 1 - a)` and stays finite at
/// `t = 0`. Features are `[z; m_t(z)]` stacked along channels.
#[derive(Debug, Clone)]
pub struct GaussianAnalyticDenoiser {
    mu: Grid,
    sigma0: f64,
    schedule: NoiseSchedule,
}

struct Coefficients {
    sqrt_alpha: f64,
    eps_gain: f64,
    mean_gain: f64,
    mean_offset: f64,
}

impl GaussianAnalyticDenoiser {
    pub fn new(mu: Grid, sigma0: f64, schedule: NoiseSchedule) -> Result<Self> {
        if !(sigma0 > 0.0 && sigma0.is_finite()) {
            return Err(Error::InvalidRange(format!("sigma0 must be positive, got {sigma0}")));
        }
        Ok(Self { mu, sigma0, schedule })
    }

    pub fn mu(&self) -> &Grid {
        &self.mu
    }

    pub fn sigma0(&self) -> f64 {
        self.sigma0
    }

    fn coefficients(&self, t: usize) -> Result<Coefficients> {
        let a = self.schedule.alpha(t)?;
        let s2 = self.sigma0 * self.sigma0;
        let denom = a * s2 + 1.0 - a;
        Ok(Coefficients {
            sqrt_alpha: a.sqrt(),
            eps_gain: (1.0 - a).sqrt() / denom,
            mean_gain: a.sqrt() * s2 / denom,
            mean_offset: (1.0 - a) / denom,
        })
    }

    /// Posterior mean `E[z_0 | z_t]`.
    pub fn posterior_mean(&self, z: &Latent) -> Result<Grid> {
        z.grid.ensure_same_shape(&self.mu)?;
        let k = self.coefficients(z.t)?;
        z.grid
            .zip_map(&self.mu, |zv, m| k.mean_gain * zv + k.mean_offset * m)
    }
}

struct GaussianPass {
    eps: Grid,
    features: FeatureMap,
    eps_gain: f64,
    mean_gain: f64,
}

impl Linearization for GaussianPass {
    fn eps(&self) -> &Grid {
        &self.eps
    }

    fn features(&self) -> &FeatureMap {
        &self.features
    }

    fn pullback(&self, cot_eps: Option<&Grid>, cot_features: Option<&Grid>) -> Result<Grid> {
        let shape = self.eps.shape();
        check_cotangent(cot_eps, shape)?;
        check_cotangent(cot_features, self.features.grid.shape())?;
        let mut grad = match cot_eps {
            Some(g) => g.scale(self.eps_gain),
            None => Grid::zeros(shape),
        };
        if let Some(g) = cot_features {
            let plane = shape.len();
            let (direct, mean) = g.data().split_at(plane);
            for ((out, d), m) in grad.data_mut().iter_mut().zip(direct).zip(mean) {
                *out += d + self.mean_gain * m;
            }
        }
        Ok(grad)
    }
}

impl Denoiser for GaussianAnalyticDenoiser {
    fn linearize<'a>(&'a self, z: &Latent) -> Result<Box<dyn Linearization + 'a>> {
        z.grid.ensure_same_shape(&self.mu)?;
        let k = self.coefficients(z.t)?;
        let eps = z
            .grid
            .zip_map(&self.mu, |zv, m| k.eps_gain * (zv - k.sqrt_alpha * m))?;
        let mean = self.posterior_mean(z)?;
        let features = FeatureMap::new(Grid::stack_channels(&[&z.grid, &mean])?)?;
        Ok(Box::new(GaussianPass {
            eps,
            features,
            eps_gain: k.eps_gain,
            mean_gain: k.mean_gain,
        }))
    }
}
