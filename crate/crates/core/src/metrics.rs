//! Edit-quality metrics and diagnostics.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::bilinear::{sample_patch, PatchSpec};
use crate::denoiser::Denoiser;
use crate::diffusion::{ddim_denoise_step, denoise_to_clean, invert_trajectory, Latent, NoiseSchedule};
use crate::drag::{tracking_heatmap, ControlPair, DragConfig, DragReport, DragState};
use crate::error::{Error, Result};
use crate::tensor::Grid;

/// Patch radii at which DAI is reported.
pub const DAI_GAMMAS: [usize; 4] = [1, 5, 10, 20];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DaiConfig {
    pub gamma: usize,
}

impl DaiConfig {
    pub fn new(gamma: usize) -> Result<Self> {
        if gamma == 0 {
            return Err(Error::InvalidConfig("DAI radius must be at least 1".into()));
        }
        Ok(Self { gamma })
    }
}

fn integer_patch(grid: &Grid, center: (usize, usize), radius: usize) -> Result<Grid> {
    sample_patch(grid, PatchSpec::new((center.0 as f64, center.1 as f64), radius))
}

/// Dragging accuracy: squared L2 distance between the source patch around
/// `p_i` in the original and the patch around `q_i` in the edit, summed over
/// channels, divided by the patch area, averaged over pairs.
pub fn dai(original: &Latent, edited: &Latent, pairs: &[ControlPair], cfg: DaiConfig) -> Result<f64> {
    original.grid.ensure_same_shape(&edited.grid)?;
    if pairs.is_empty() {
        return Err(Error::InvalidConfig("DAI needs at least one control pair".into()));
    }
    let area = ((2 * cfg.gamma + 1) * (2 * cfg.gamma + 1)) as f64;
    let mut total = 0.0;
    for pair in pairs {
        let src = integer_patch(&original.grid, pair.p, cfg.gamma)?;
        let dst = integer_patch(&edited.grid, pair.q, cfg.gamma)?;
        let diff = src.lincomb(1.0, &dst, -1.0)?;
        total += diff.dot(&diff)? / area;
    }
    Ok(total / pairs.len() as f64)
}

/// DAI at every radius in [`DAI_GAMMAS`]; radii whose patches do not fit are `None`.
pub fn dai_sweep(original: &Latent, edited: &Latent, pairs: &[ControlPair]) -> Vec<(usize, Option<f64>)> {
    DAI_GAMMAS
        .iter()
        .map(|&g| (g, dai(original, edited, pairs, DaiConfig { gamma: g }).ok()))
        .collect()
}

/// Mean squared difference.
pub fn fidelity_mse(a: &Latent, b: &Latent) -> Result<f64> {
    let diff = a.grid.lincomb(1.0, &b.grid, -1.0)?;
    Ok(diff.dot(&diff)? / diff.len() as f64)
}

/// Mean absolute change inside and outside the editable region.
pub fn masked_change(original: &Latent, edited: &Latent, mask: &crate::drag::EditMask) -> Result<(f64, f64)> {
    original.grid.ensure_same_shape(&edited.grid)?;
    let s = original.shape();
    let (mut inside, mut n_in, mut outside, mut n_out) = (0.0, 0usize, 0.0, 0usize);
    for c in 0..s.channels {
        for y in 0..s.height {
            for x in 0..s.width {
                let d = (original.grid.get(c, y, x) - edited.grid.get(c, y, x)).abs();
                if mask.is_editable(y, x) {
                    inside += d;
                    n_in += 1;
                } else {
                    outside += d;
                    n_out += 1;
                }
            }
        }
    }
    let mean = |sum: f64, n: usize| if n == 0 { 0.0 } else { sum / n as f64 };
    Ok((mean(inside, n_in), mean(outside, n_out)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseAccumulation {
    pub mse_single: f64,
    pub mse_distributed: f64,
}

/// Perturbs the inverted latent with `n` noise fields of std `sigma`, either
/// all at once at `T` or one per step over the first `n` denoising steps, and
/// compares both reconstructions to `z0`.
pub fn noise_accumulation_experiment(
    z0: &Latent,
    depth: usize,
    n: usize,
    sigma: f64,
    sched: &NoiseSchedule,
    denoiser: &dyn Denoiser,
    seed: u64,
) -> Result<NoiseAccumulation> {
    if n > depth {
        return Err(Error::InvalidConfig(format!("{n} noise fields exceed depth {depth}")));
    }
    let top = invert_trajectory(z0, depth, denoiser, sched)?.top().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noises: Vec<Grid> = (0..n).map(|_| Grid::randn(z0.shape(), &mut rng).scale(sigma)).collect();

    let mut single = top.grid.clone();
    for e in &noises {
        single.axpy(1.0, e)?;
    }
    let single = denoise_to_clean(&top.with_grid(single), denoiser, sched)?;

    let mut z = top;
    for e in &noises {
        let mut g = z.grid.clone();
        g.axpy(1.0, e)?;
        z = ddim_denoise_step(&z.with_grid(g), denoiser, sched)?;
    }
    let distributed = denoise_to_clean(&z, denoiser, sched)?;

    Ok(NoiseAccumulation {
        mse_single: fidelity_mse(&single, z0)?,
        mse_distributed: fidelity_mse(&distributed, z0)?,
    })
}

/// `(k, mean drift over handles)` after each completed drag, starting with `(0, 0)`.
pub fn drift_curve(report: &DragReport) -> Vec<(usize, f64)> {
    std::iter::once((0, 0.0))
        .chain(report.steps.iter().map(|s| {
            let mean = if s.drift.is_empty() {
                0.0
            } else {
                s.drift.iter().sum::<f64>() / s.drift.len() as f64
            };
            (s.k + 1, mean)
        }))
        .collect()
}

/// Population standard deviation.
pub fn std_dev(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

/// Standard deviation of the tracking distances in each handle's search
/// window, averaged over handles. A flat heatmap means tracking has nothing to
/// lock onto.
pub fn heatmap_std(state: &DragState, cfg: &DragConfig, denoiser: &dyn Denoiser) -> Result<f64> {
    if state.pairs.is_empty() {
        return Ok(0.0);
    }
    let features = denoiser.extract_features(&state.z)?;
    let reference = state.reference(state.z.t)?;
    let total: f64 = state
        .pairs
        .iter()
        .zip(&state.handles)
        .map(|(pair, &h)| {
            let heat = tracking_heatmap(&features, &reference.at(pair.p.0, pair.p.1), h, cfg.r2);
            std_dev(&heat.iter().map(|(_, d)| *d).collect::<Vec<_>>())
        })
        .sum();
    Ok(total / state.pairs.len() as f64)
}

/// Per-image rankings of `N_m` methods by humans and by a metric.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankTable {
    human: Vec<Vec<usize>>,
    metric: Vec<Vec<usize>>,
}

impl RankTable {
    pub fn new(human: Vec<Vec<usize>>, metric: Vec<Vec<usize>>) -> Result<Self> {
        if human.len() != metric.len() || human.is_empty() {
            return Err(Error::InvalidConfig("rank tables need the same, nonzero number of rows".into()));
        }
        let methods = human[0].len();
        if methods < 2 {
            return Err(Error::InvalidConfig("need at least two methods to rank".into()));
        }
        for row in human.iter().chain(&metric) {
            let mut sorted = row.clone();
            sorted.sort_unstable();
            if sorted != (1..=methods).collect::<Vec<_>>() {
                return Err(Error::InvalidConfig(format!("row {row:?} is not a permutation of 1..={methods}")));
            }
        }
        Ok(Self { human, metric })
    }

    pub fn images(&self) -> usize {
        self.human.len()
    }

    pub fn methods(&self) -> usize {
        self.human[0].len()
    }

    pub fn human(&self) -> &[Vec<usize>] {
        &self.human
    }

    pub fn metric(&self) -> &[Vec<usize>] {
        &self.metric
    }
}

/// Mean over images of `1 - 6 sum_j (U_ij - R_ij)^2 / (N_m (N_m^2 - 1))`.
pub fn spearman(table: &RankTable) -> f64 {
    let m = table.methods() as f64;
    let per_image: f64 = table
        .human
        .iter()
        .zip(&table.metric)
        .map(|(u, r)| {
            let d2: f64 = u.iter().zip(r).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
            1.0 - 6.0 * d2 / (m * (m * m - 1.0))
        })
        .sum();
    per_image / table.images() as f64
}

/// Ranks (1 = best) of `scores` where higher is better; ties keep input order.
pub fn ranks_descending(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut ranks = vec![0; scores.len()];
    for (rank, i) in order.into_iter().enumerate() {
        ranks[i] = rank + 1;
    }
    ranks
}

/// Where the content originally around `handle` ended up in `edited`: the
/// sub-pixel position (quarter-pixel lattice) within `window` of `near` whose
/// bilinear patch of radius `radius` best matches, in squared error, the
/// source patch at `handle`.
pub fn locate_content(
    original: &Latent,
    edited: &Latent,
    handle: (usize, usize),
    near: (usize, usize),
    radius: usize,
    window: usize,
) -> Result<(f64, f64)> {
    let template = integer_patch(&original.grid, handle, radius)?;
    let s = edited.shape();
    let steps = (window * 4) as i64;
    let mut best: Option<(f64, (f64, f64))> = None;
    for iy in -steps..=steps {
        for ix in -steps..=steps {
            let c = (near.0 as f64 + iy as f64 / 4.0, near.1 as f64 + ix as f64 / 4.0);
            let spec = PatchSpec::new(c, radius);
            if spec.check_bounds(s.height, s.width).is_err() {
                continue;
            }
            let diff = sample_patch(&edited.grid, spec)?.lincomb(1.0, &template, -1.0)?;
            let err = diff.dot(&diff)?;
            let better = match best {
                None => true,
                Some((e, p)) => {
                    err < e || (err == e && (c.0 - near.0 as f64).hypot(c.1 - near.1 as f64) < (p.0 - near.0 as f64).hypot(p.1 - near.1 as f64))
                }
            };
            if better {
                best = Some((err, c));
            }
        }
    }
    best.map(|(_, c)| c)
        .ok_or_else(|| Error::OutOfBounds(format!("no patch of radius {radius} fits near {near:?}")))
}

/// Distance from each target to where its handle's content landed.
pub fn handle_target_distances(
    original: &Latent,
    edited: &Latent,
    pairs: &[ControlPair],
    radius: usize,
    window: usize,
) -> Result<Vec<f64>> {
    pairs
        .iter()
        .map(|pair| {
            let (y, x) = locate_content(original, edited, pair.p, pair.q, radius, window)?;
            Ok((y - pair.q.0 as f64).hypot(x - pair.q.1 as f64))
        })
        .collect()
}

/// Median of a non-empty slice (mean of the middle two for even lengths).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}
