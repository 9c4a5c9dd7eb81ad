//! Blob-world scenes and the ε-prediction training loop.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{ConvDenoiser, DEFAULT_WIDTHS};
use crate::diffusion::{forward_noise, Latent, NoiseSchedule};
use crate::error::{Error, Result};
use crate::tensor::{Grid, Shape};

pub const CANVAS: usize = 32;
pub const MAX_BLOBS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    /// `(row, col)` in pixels.
    pub center: (f64, f64),
    /// Standard deviation of the Gaussian bump, in pixels.
    pub radius: f64,
    pub intensity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobScene {
    pub blobs: Vec<Blob>,
    pub height: usize,
    pub width: usize,
}

impl BlobScene {
    pub fn new(blobs: Vec<Blob>, height: usize, width: usize) -> Result<Self> {
        let scene = Self { blobs, height, width };
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<()> {
        if self.blobs.is_empty() || self.blobs.len() > MAX_BLOBS {
            return Err(Error::InvalidConfig(format!(
                "scene needs 1..={MAX_BLOBS} blobs, has {}",
                self.blobs.len()
            )));
        }
        for b in &self.blobs {
            let (cy, cx) = b.center;
            let r = b.radius;
            if r.is_nan() || r <= 0.0 || !(0.2..=1.0).contains(&b.intensity) {
                return Err(Error::InvalidConfig(format!("bad blob {b:?}")));
            }
            if cy < r || cx < r || cy > (self.height - 1) as f64 - r || cx > (self.width - 1) as f64 - r {
                return Err(Error::InvalidConfig(format!(
                    "blob at ({cy}, {cx}) with radius {r} is closer than its radius to the edge"
                )));
            }
        }
        Ok(())
    }

    /// 1–3 blobs with radius in [2.5, 5] and intensity in [0.2, 1].
    pub fn random<R: Rng + ?Sized>(rng: &mut R, height: usize, width: usize) -> Self {
        let n = rng.gen_range(1..=MAX_BLOBS);
        let blobs = (0..n)
            .map(|_| {
                // small canvases shrink the radius range so the blob still fits
                let fit = (height.min(width) - 1) as f64 / 2.0 - 0.5;
                let radius = rng.gen_range(2.5f64.min(fit * 0.5)..5.0f64.min(fit));
                let cy = rng.gen_range(radius..(height - 1) as f64 - radius);
                let cx = rng.gen_range(radius..(width - 1) as f64 - radius);
                let intensity = rng.gen_range(0.2..=1.0);
                Blob {
                    center: (cy, cx),
                    radius,
                    intensity,
                }
            })
            .collect();
        Self { blobs, height, width }
    }
}

/// Sum of isotropic Gaussian bumps clamped to `[0, 1]`, as a clean latent.
pub fn render_scene(scene: &BlobScene) -> Latent {
    let grid = Grid::from_fn(Shape::new(1, scene.height, scene.width), |_, y, x| {
        let v: f64 = scene
            .blobs
            .iter()
            .map(|b| {
                let dy = y as f64 - b.center.0;
                let dx = x as f64 - b.center.1;
                b.intensity * (-(dy * dy + dx * dx) / (2.0 * b.radius * b.radius)).exp()
            })
            .sum();
        v.clamp(0.0, 1.0)
    });
    Latent { grid, t: 0 }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub widths: Vec<usize>,
    pub canvas: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch: 16,
            learning_rate: 0.1,
            seed: 0,
            widths: DEFAULT_WIDTHS.to_vec(),
            canvas: CANVAS,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.learning_rate.is_nan() || self.learning_rate <= 0.0 || self.canvas < 6 {
            return Err(Error::InvalidConfig(format!("bad training config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub denoiser: ConvDenoiser,
    /// Mean squared ε error of each step's batch, before the update.
    pub losses: Vec<f64>,
}

impl TrainOutcome {
    pub fn write_loss_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["step", "loss"])?;
        for (i, l) in self.losses.iter().enumerate() {
            w.write_record([i.to_string(), format!("{l:.9}")])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// One noised training example.
struct Sample {
    noised: Latent,
    eps: Grid,
}

fn draw_sample(rng: &mut ChaCha8Rng, cfg: &TrainConfig, sched: &NoiseSchedule) -> Result<Sample> {
    let scene = BlobScene::random(rng, cfg.canvas, cfg.canvas);
    let z0 = render_scene(&scene);
    let t = rng.gen_range(1..=sched.t_max());
    let eps = Grid::randn(z0.shape(), rng);
    let noised = forward_noise(&z0, t, &eps, sched)?;
    Ok(Sample { noised, eps })
}

/// Minimises `E ||eps - eps_theta(sqrt(a_t) z0 + sqrt(1 - a_t) eps, t)||^2`
/// with plain SGD over random blob scenes, timesteps and noise.
pub fn train_denoiser(cfg: &TrainConfig, sched: &NoiseSchedule) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut net = ConvDenoiser::init(1, &cfg.widths, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_da7a);
    let mut losses = Vec::with_capacity(cfg.steps);
    let pixels = (cfg.canvas * cfg.canvas) as f64;
    for step in 0..cfg.steps {
        let mut grads = net.zero_gradients();
        let mut loss = 0.0;
        for _ in 0..cfg.batch {
            let s = draw_sample(&mut rng, cfg, sched)?;
            let tape = net.forward(&s.noised.grid, s.noised.t)?;
            let resid = tape.eps.lincomb(1.0, &s.eps, -1.0)?;
            loss += resid.data().iter().map(|r| r * r).sum::<f64>();
            let cot = resid.scale(2.0 / (pixels * cfg.batch as f64));
            net.backward(&tape, Some(&cot), None, Some(&mut grads))?;
        }
        let loss = loss / (pixels * cfg.batch as f64);
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::NonFinite(format!("training diverged at step {step}")));
        }
        losses.push(loss);
        net.apply_gradients(&grads, cfg.learning_rate);
    }
    Ok(TrainOutcome {
        denoiser: net,
        losses,
    })
}

/// Mean ε-prediction MSE over `samples` held-out draws.
pub fn eval_eps_mse(
    net: &ConvDenoiser,
    sched: &NoiseSchedule,
    canvas: usize,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    let cfg = TrainConfig {
        canvas,
        ..TrainConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..samples {
        let s = draw_sample(&mut rng, &cfg, sched)?;
        let eps = net.forward(&s.noised.grid, s.noised.t)?.eps;
        total += eps.lincomb(1.0, &s.eps, -1.0)?.data().iter().map(|r| r * r).sum::<f64>()
            / s.eps.len() as f64;
    }
    Ok(total / samples as f64)
}

/// Writes `<out>` and `<out>.loss.csv` beside it.
pub fn save_training(outcome: &TrainOutcome, out: impl AsRef<Path>) -> Result<()> {
    let out = out.as_ref();
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    outcome.denoiser.save(out)?;
    outcome.write_loss_csv(loss_csv_path(out))
}

pub fn loss_csv_path(checkpoint: &Path) -> std::path::PathBuf {
    let mut name = checkpoint.as_os_str().to_owned();
    name.push(".loss.csv");
    name.into()
}
