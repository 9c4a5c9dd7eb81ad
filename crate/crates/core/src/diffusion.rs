//! Noise schedule and the deterministic DDIM maps.
//!
//! Timesteps are 1-indexed: `t = 0` is the clean image and `alpha(0) = 1`.

use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::tensor::{Grid, Shape};

/// Default schedule range, see `NoiseSchedule::default`.
pub const DEFAULT_T_MAX: usize = 50;
pub const DEFAULT_BETA_MIN: f64 = 0.002;
pub const DEFAULT_BETA_MAX: f64 = 0.16;

/// Monotonically decreasing cumulative signal rates `alpha_1 > ... > alpha_T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    alphas: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear-β DDPM schedule: `alpha_t = prod_{s<=t} (1 - beta_s)` with
    /// `beta` linearly spaced over `[beta_min, beta_max]`.
    pub fn linear(t_max: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if t_max < 2 {
            return Err(Error::InvalidRange(format!("t_max must be >= 2, got {t_max}")));
        }
        if !(beta_min > 0.0 && beta_min < beta_max && beta_max < 1.0) {
            return Err(Error::InvalidRange(format!(
                "need 0 < beta_min < beta_max < 1, got [{beta_min}, {beta_max}]"
            )));
        }
        let step = (beta_max - beta_min) / (t_max - 1) as f64;
        let mut prod = 1.0;
        let alphas = (0..t_max)
            .map(|i| {
                prod *= 1.0 - (beta_min + step * i as f64);
                prod
            })
            .collect();
        Self::from_alphas(alphas)
    }

    /// Validates an explicit `alpha_1..alpha_T` sequence.
    pub fn from_alphas(alphas: Vec<f64>) -> Result<Self> {
        if alphas.len() < 2 {
            return Err(Error::InvalidRange("schedule needs at least two steps".into()));
        }
        let mut prev = 1.0;
        for (i, &a) in alphas.iter().enumerate() {
            if !(a > 0.0 && a < 1.0) {
                return Err(Error::InvalidRange(format!("alpha_{} = {a} not in (0, 1)", i + 1)));
            }
            if a >= prev {
                return Err(Error::InvalidRange(format!(
                    "alpha_{} = {a} is not below alpha_{i} = {prev}",
                    i + 1
                )));
            }
            prev = a;
        }
        if prev >= 0.05 {
            return Err(Error::InvalidRange(format!(
                "alpha_T = {prev} must be < 0.05 so z_T is close to isotropic noise"
            )));
        }
        Ok(Self { alphas })
    }

    pub fn t_max(&self) -> usize {
        self.alphas.len()
    }

    /// `alpha_t`, with `alpha_0 = 1`.
    pub fn alpha(&self, t: usize) -> Result<f64> {
        match t {
            0 => Ok(1.0),
            t if t <= self.alphas.len() => Ok(self.alphas[t - 1]),
            t => Err(Error::TimestepOutOfRange {
                t,
                max: self.alphas.len(),
            }),
        }
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        self.alpha(t).map(|_| ())
    }

    /// Coefficients `(c_z, c_eps)` of the reverse step
    /// `z_{t-1} = c_z * z_t + c_eps * eps`.
    pub fn denoise_coefficients(&self, t: usize) -> Result<(f64, f64)> {
        if t == 0 {
            return Err(Error::TimestepOutOfRange { t, max: self.t_max() });
        }
        let a_t = self.alpha(t)?;
        let a_prev = self.alpha(t - 1)?;
        let c_z = (a_prev / a_t).sqrt();
        let c_eps = (1.0 - a_prev).sqrt() - (a_prev * (1.0 - a_t) / a_t).sqrt();
        Ok((c_z, c_eps))
    }

    /// Coefficients `(c_z, c_eps)` of the inversion step
    /// `z_t = c_z * z_{t-1} + c_eps * eps`.
    pub fn invert_coefficients(&self, t: usize) -> Result<(f64, f64)> {
        if t == 0 {
            return Err(Error::TimestepOutOfRange { t, max: self.t_max() });
        }
        let a_t = self.alpha(t)?;
        let a_prev = self.alpha(t - 1)?;
        let c_z = (a_t / a_prev).sqrt();
        let c_eps = a_t.sqrt() * ((1.0 / a_t - 1.0).sqrt() - (1.0 / a_prev - 1.0).sqrt());
        Ok((c_z, c_eps))
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(DEFAULT_T_MAX, DEFAULT_BETA_MIN, DEFAULT_BETA_MAX)
            .expect("default schedule is valid")
    }
}

/// A timestep-tagged latent `z_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    pub grid: Grid,
    pub t: usize,
}

impl Latent {
    pub fn new(grid: Grid, t: usize) -> Result<Self> {
        if !grid.is_finite() {
            return Err(Error::NonFinite(format!("latent at t={t}")));
        }
        Ok(Self { grid, t })
    }

    pub fn clean(grid: Grid) -> Result<Self> {
        Self::new(grid, 0)
    }

    pub fn shape(&self) -> Shape {
        self.grid.shape()
    }

    pub fn with_grid(&self, grid: Grid) -> Self {
        Self { grid, t: self.t }
    }
}

/// Cached unedited latents `z_0 .. z_T` from DDIM inversion.
#[derive(Debug, Clone, PartialEq)]
pub struct InversionTrajectory {
    latents: Vec<Latent>,
}

impl InversionTrajectory {
    /// Highest cached timestep `T`.
    pub fn depth(&self) -> usize {
        self.latents.len() - 1
    }

    pub fn len(&self) -> usize {
        self.latents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.is_empty()
    }

    pub fn at(&self, t: usize) -> Result<&Latent> {
        self.latents.get(t).ok_or(Error::TimestepOutOfRange {
            t,
            max: self.depth(),
        })
    }

    pub fn source(&self) -> &Latent {
        &self.latents[0]
    }

    pub fn top(&self) -> &Latent {
        &self.latents[self.depth()]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Latent> {
        self.latents.iter()
    }
}

/// `sqrt(alpha_t) * z0 + sqrt(1 - alpha_t) * eps`, tagged `t`.
pub fn forward_noise(z0: &Latent, t: usize, eps: &Grid, sched: &NoiseSchedule) -> Result<Latent> {
    if z0.t != 0 {
        return Err(Error::InvalidRange(format!(
            "forward noising expects a clean latent, got t={}",
            z0.t
        )));
    }
    let a = sched.alpha(t)?;
    let grid = z0.grid.lincomb(a.sqrt(), eps, (1.0 - a).sqrt())?;
    Latent::new(grid, t)
}

/// One deterministic DDIM reverse step `z_t -> z_{t-1}`.
pub fn ddim_denoise_step(z: &Latent, denoiser: &dyn Denoiser, sched: &NoiseSchedule) -> Result<Latent> {
    if z.t == 0 {
        return Err(Error::TimestepOutOfRange { t: 0, max: sched.t_max() });
    }
    let (c_z, c_eps) = sched.denoise_coefficients(z.t)?;
    let eps = denoiser.predict_eps(z)?;
    Latent::new(z.grid.lincomb(c_z, &eps, c_eps)?, z.t - 1)
}

/// One DDIM inversion step `z_{t-1} -> z_t`, approximating `eps(z_t, t)` by
/// `eps(z_{t-1}, t-1)`.
pub fn ddim_invert_step(z: &Latent, denoiser: &dyn Denoiser, sched: &NoiseSchedule) -> Result<Latent> {
    let t = z.t + 1;
    if t > sched.t_max() {
        return Err(Error::TimestepOutOfRange { t, max: sched.t_max() });
    }
    let (c_z, c_eps) = sched.invert_coefficients(t)?;
    let eps = denoiser.predict_eps(z)?;
    Latent::new(z.grid.lincomb(c_z, &eps, c_eps)?, t)
}

/// Inverts a clean latent to depth `depth`, keeping every intermediate.
pub fn invert_trajectory(
    z0: &Latent,
    depth: usize,
    denoiser: &dyn Denoiser,
    sched: &NoiseSchedule,
) -> Result<InversionTrajectory> {
    if z0.t != 0 {
        return Err(Error::InvalidRange(format!(
            "inversion starts from a clean latent, got t={}",
            z0.t
        )));
    }
    if depth > sched.t_max() {
        return Err(Error::TimestepOutOfRange {
            t: depth,
            max: sched.t_max(),
        });
    }
    let mut latents = Vec::with_capacity(depth + 1);
    latents.push(z0.clone());
    for _ in 0..depth {
        let next = ddim_invert_step(latents.last().expect("non-empty"), denoiser, sched)?;
        latents.push(next);
    }
    Ok(InversionTrajectory { latents })
}

/// Runs DDIM reverse steps until `t = 0`.
pub fn denoise_to_clean(z: &Latent, denoiser: &dyn Denoiser, sched: &NoiseSchedule) -> Result<Latent> {
    let mut cur = z.clone();
    while cur.t > 0 {
        cur = ddim_denoise_step(&cur, denoiser, sched)?;
    }
    Ok(cur)
}
