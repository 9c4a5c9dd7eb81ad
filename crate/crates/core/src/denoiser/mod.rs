//! The noise-prediction network contract.
//!
//! A [`Denoiser`] predicts `eps(z, t)` and exposes an internal feature map
//! `F(z)` interpolated to the latent's spatial size. Both outputs come from a
//! single forward pass; [`Denoiser::linearize`] keeps that pass around so a
//! caller can pull cotangents on `eps` and `F` back to the latent.

pub mod bilinear;
mod conv;
mod gaussian;

pub use conv::{ConvDenoiser, ConvGradients, ConvLayer, ConvTape, DEFAULT_WIDTHS, TIME_EMBED_DIM};
pub use gaussian::GaussianAnalyticDenoiser;

use crate::diffusion::Latent;
use crate::error::{Error, Result};
use crate::tensor::{Grid, Shape};

/// Feature activations `D × H × W`, already at the latent's spatial size.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub grid: Grid,
}

impl FeatureMap {
    pub fn new(grid: Grid) -> Result<Self> {
        if !grid.is_finite() {
            return Err(Error::NonFinite("feature map".into()));
        }
        Ok(Self { grid })
    }

    pub fn depth(&self) -> usize {
        self.grid.channels()
    }

    /// Feature vector at an integer pixel.
    pub fn at(&self, y: usize, x: usize) -> Vec<f64> {
        self.grid.pixel(y, x)
    }

    /// `||F_a - G_b||_1` between a pixel of `self` and a reference vector.
    pub fn l1_to(&self, y: usize, x: usize, reference: &[f64]) -> f64 {
        reference
            .iter()
            .enumerate()
            .map(|(c, r)| (self.grid.get(c, y, x) - r).abs())
            .sum()
    }
}

/// The outputs of one forward pass, with a way to differentiate through it.
pub trait Linearization {
    fn eps(&self) -> &Grid;

    fn features(&self) -> &FeatureMap;

    /// `d(<cot_eps, eps> + <cot_features, F>) / dz`. A `None` cotangent is
    /// treated as zero.
    fn pullback(&self, cot_eps: Option<&Grid>, cot_features: Option<&Grid>) -> Result<Grid>;
}

pub trait Denoiser: Send + Sync {
    /// Runs the network once and records what is needed for [`Linearization::pullback`].
    fn linearize<'a>(&'a self, z: &Latent) -> Result<Box<dyn Linearization + 'a>>;

    fn predict_eps(&self, z: &Latent) -> Result<Grid> {
        Ok(self.linearize(z)?.eps().clone())
    }

    fn extract_features(&self, z: &Latent) -> Result<FeatureMap> {
        Ok(self.linearize(z)?.features().clone())
    }
}

/// Vector-Jacobian product of the denoiser's outputs at `z`.
pub fn vjp(
    denoiser: &dyn Denoiser,
    z: &Latent,
    cot_eps: Option<&Grid>,
    cot_features: Option<&Grid>,
) -> Result<Grid> {
    denoiser.linearize(z)?.pullback(cot_eps, cot_features)
}

pub(crate) fn check_cotangent(cot: Option<&Grid>, expected: Shape) -> Result<()> {
    match cot {
        Some(g) => g.ensure_shape(expected),
        None => Ok(()),
    }
}

/// Simple denoisers for exercising the diffusion algebra.
pub mod testing {
    use super::*;

    struct Fixed {
        eps: Grid,
        features: FeatureMap,
    }

    impl Linearization for Fixed {
        fn eps(&self) -> &Grid {
            &self.eps
        }

        fn features(&self) -> &FeatureMap {
            &self.features
        }

        fn pullback(&self, cot_eps: Option<&Grid>, cot_features: Option<&Grid>) -> Result<Grid> {
            check_cotangent(cot_eps, self.eps.shape())?;
            check_cotangent(cot_features, self.features.grid.shape())?;
            // eps is constant and the features are the latent itself
            Ok(cot_features
                .cloned()
                .unwrap_or_else(|| Grid::zeros(self.eps.shape())))
        }
    }

    /// `eps ≡ c` everywhere, independent of `z` and `t`; features are `z` itself.
    #[derive(Debug, Clone, Copy)]
    pub struct ConstantEps(pub f64);

    impl Denoiser for ConstantEps {
        fn linearize<'a>(&'a self, z: &Latent) -> Result<Box<dyn Linearization + 'a>> {
            Ok(Box::new(Fixed {
                eps: Grid::filled(z.shape(), self.0),
                features: FeatureMap::new(z.grid.clone())?,
            }))
        }
    }

    /// `eps ≡ 0`.
    pub const ZERO_EPS: ConstantEps = ConstantEps(0.0);
}
