//! Checks shared by the integration tests and the acceptance report.
#![allow(dead_code)]

use std::path::PathBuf;

use dragkit::denoiser::bilinear::{resize, resize_adjoint, sample_patch, sample_patch_adjoint, PatchSpec};
use dragkit::denoiser::{ConvDenoiser, Denoiser, FeatureMap, GaussianAnalyticDenoiser};
use dragkit::diffusion::{Latent, NoiseSchedule};
use dragkit::drag::{
    motion_loss, supervision_center, track_point, ControlPair, DragConfig, DragState, EditMask, LossVariant, Point,
};
use dragkit::tensor::{Grid, Shape};
use dragkit::trainer::{render_scene, Blob, BlobScene};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-3;
pub const FD_REL_TOL: f64 = 1e-4;
pub const FD_PROBES: usize = 100;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

pub fn trained_denoiser() -> ConvDenoiser {
    ConvDenoiser::load(fixture("toy_denoiser.ckpt")).expect("trained checkpoint fixture")
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Worst relative error and probe count for one family of gradients.
#[derive(Debug, Clone)]
pub struct FdSummary {
    pub name: &'static str,
    pub probes: usize,
    /// Candidates skipped because the segment `z ± h v` crosses an L1 kink.
    pub skipped: usize,
    pub worst: f64,
}

impl FdSummary {
    pub fn passed(&self) -> bool {
        self.probes >= FD_PROBES && self.worst <= FD_REL_TOL
    }
}

fn unit_direction(shape: Shape, rng: &mut ChaCha8Rng) -> Grid {
    let v = Grid::randn(shape, rng);
    let n = v.dot(&v).unwrap().sqrt();
    v.scale(1.0 / n)
}

fn central<F: FnMut(&Grid) -> f64>(z: &Grid, v: &Grid, mut f: F) -> f64 {
    let plus = z.lincomb(1.0, v, FD_STEP).unwrap();
    let minus = z.lincomb(1.0, v, -FD_STEP).unwrap();
    (f(&plus) - f(&minus)) / (2.0 * FD_STEP)
}

/// `<c_eps, eps(z)> + <c_F, F(z)>` against its pullback.
fn denoiser_probe(den: &dyn Denoiser, name: &'static str, shape: Shape, feat_depth: usize, seed: u64) -> FdSummary {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..FD_PROBES {
        let t = rng.gen_range(1..=50);
        let z = Grid::randn(shape, &mut rng);
        let c_eps = Grid::randn(shape, &mut rng);
        let c_f = Grid::randn(Shape::new(feat_depth, shape.height, shape.width), &mut rng);
        let v = unit_direction(shape, &mut rng);
        let lat = Latent::new(z.clone(), t).unwrap();
        let g = den.linearize(&lat).unwrap().pullback(Some(&c_eps), Some(&c_f)).unwrap();
        let analytic = g.dot(&v).unwrap();
        let numeric = central(&z, &v, |zz| {
            let lin = den.linearize(&Latent::new(zz.clone(), t).unwrap()).unwrap();
            lin.eps().dot(&c_eps).unwrap() + lin.features().grid.dot(&c_f).unwrap()
        });
        worst = worst.max(rel_err(analytic, numeric));
    }
    FdSummary {
        name,
        probes: FD_PROBES,
        skipped: 0,
        worst,
    }
}

/// Parameter gradients of `<c, eps>` for the convolutional network.
fn conv_param_probe(net: &ConvDenoiser, shape: Shape, seed: u64) -> FdSummary {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..FD_PROBES {
        let t = rng.gen_range(1..=50);
        let z = Grid::randn(shape, &mut rng);
        let c = Grid::randn(shape, &mut rng);
        let mut dir = net.zero_gradients();
        let mut fill = |v: &mut Vec<f64>| v.iter_mut().for_each(|x| *x = rng.gen_range(-1.0..1.0));
        for l in &mut dir.layers {
            fill(&mut l.weight);
            fill(&mut l.bias);
        }
        fill(&mut dir.time_weight);
        fill(&mut dir.time_bias);
        let norm = dir
            .layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(&l.bias))
            .chain(&dir.time_weight)
            .chain(&dir.time_bias)
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        dir.scale(1.0 / norm);

        let tape = net.forward(&z, t).unwrap();
        let mut grads = net.zero_gradients();
        net.backward(&tape, Some(&c), None, Some(&mut grads)).unwrap();
        let analytic: f64 = grads
            .layers
            .iter()
            .zip(&dir.layers)
            .map(|(g, d)| {
                g.weight.iter().zip(&d.weight).map(|(a, b)| a * b).sum::<f64>()
                    + g.bias.iter().zip(&d.bias).map(|(a, b)| a * b).sum::<f64>()
            })
            .sum::<f64>()
            + grads.time_weight.iter().zip(&dir.time_weight).map(|(a, b)| a * b).sum::<f64>()
            + grads.time_bias.iter().zip(&dir.time_bias).map(|(a, b)| a * b).sum::<f64>();
        let eval = |s: f64| {
            let mut n = net.clone();
            // apply_gradients subtracts, so a negative rate moves along `dir`
            n.apply_gradients(&dir, -s);
            n.forward(&z, t).unwrap().eps.dot(&c).unwrap()
        };
        let numeric = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(analytic, numeric));
    }
    FdSummary {
        name: "conv parameters",
        probes: FD_PROBES,
        skipped: 0,
        worst,
    }
}

/// Linear ops: `<adjoint(c), v> == <c, op(v)>` checked through central differences.
fn bilinear_probes(seed: u64) -> Vec<FdSummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = Shape::new(3, 16, 16);
    let (mut w_patch, mut w_resize): (f64, f64) = (0.0, 0.0);
    for _ in 0..FD_PROBES {
        let z = Grid::randn(shape, &mut rng);
        let v = unit_direction(shape, &mut rng);
        let patch = PatchSpec::new((rng.gen_range(3.0..12.0), rng.gen_range(3.0..12.0)), 3);
        let c = Grid::randn(Shape::new(3, patch.side(), patch.side()), &mut rng);
        let mut acc = Grid::zeros(shape);
        sample_patch_adjoint(&c, patch, &mut acc).unwrap();
        let numeric = central(&z, &v, |zz| sample_patch(zz, patch).unwrap().dot(&c).unwrap());
        w_patch = w_patch.max(rel_err(acc.dot(&v).unwrap(), numeric));

        let (h, w) = (rng.gen_range(4..40), rng.gen_range(4..40));
        let c = Grid::randn(Shape::new(3, h, w), &mut rng);
        let adj = resize_adjoint(&c, shape).unwrap();
        let numeric = central(&z, &v, |zz| resize(zz, h, w).dot(&c).unwrap());
        w_resize = w_resize.max(rel_err(adj.dot(&v).unwrap(), numeric));
    }
    vec![
        FdSummary {
            name: "bilinear patch sampling",
            probes: FD_PROBES,
            skipped: 0,
            worst: w_patch,
        },
        FdSummary {
            name: "bilinear resize",
            probes: FD_PROBES,
            skipped: 0,
            worst: w_resize,
        },
    ]
}

/// Reference patches of the non-frozen handles at `state`; the baseline
/// loss takes them from the current latent under stop-gradient, so finite
/// differences must hold them fixed.
fn loss_references(state: &DragState, cfg: &DragConfig, den: &dyn Denoiser, variant: LossVariant) -> Vec<Grid> {
    let t = state.z.t;
    let features = den.extract_features(&state.z).unwrap().grid;
    state
        .pairs
        .iter()
        .enumerate()
        .filter(|(i, _)| !state.frozen[*i])
        .map(|(i, pair)| match variant {
            LossVariant::InformationPreserving => sample_patch(
                &state.reference(t).unwrap().grid,
                PatchSpec::new((pair.p.0 as f64, pair.p.1 as f64), cfg.r1),
            )
            .unwrap(),
            LossVariant::Baseline => {
                let h = state.handles[i];
                sample_patch(&features, PatchSpec::new((h.0 as f64, h.1 as f64), cfg.r1)).unwrap()
            }
        })
        .collect()
}

/// Every L1 residual inside the supervision loss: motion residuals, then
/// mask residuals.
fn loss_residuals(
    state: &DragState,
    cfg: &DragConfig,
    mask: &EditMask,
    den: &dyn Denoiser,
    sched: &NoiseSchedule,
    refs: &[Grid],
) -> (Vec<f64>, Vec<f64>) {
    let t = state.z.t;
    let lin = den.linearize(&state.z).unwrap();
    let features = &lin.features().grid;
    let mut motion = Vec::new();
    let active = state.pairs.iter().enumerate().filter(|(i, _)| !state.frozen[*i]);
    for ((i, pair), reference) in active.zip(refs) {
        let h = state.handles[i];
        let moved = sample_patch(features, PatchSpec::new(supervision_center(h, pair.q, cfg.beta), cfg.r1)).unwrap();
        motion.extend(moved.lincomb(1.0, reference, -1.0).unwrap().into_vec());
    }
    let (cz, ce) = sched.denoise_coefficients(t).unwrap();
    let stepped = state.z.grid.lincomb(cz, lin.eps(), ce).unwrap();
    let unedited = &state.unedited_steps[&t];
    let mut masked = Vec::new();
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if !mask.is_editable(y, x) {
                masked.push(stepped.get(0, y, x) - unedited.get(0, y, x));
            }
        }
    }
    (motion, masked)
}

fn loss_from(parts: &(Vec<f64>, Vec<f64>), lambda: f64) -> f64 {
    parts.0.iter().map(|r| r.abs()).sum::<f64>() + lambda * parts.1.iter().map(|r| r.abs()).sum::<f64>()
}

fn same_signs(a: &[f64], b: &[f64], c: &[f64]) -> bool {
    a.iter()
        .zip(b)
        .zip(c)
        .all(|((x, y), z)| x.signum() == y.signum() && y.signum() == z.signum() && *y != 0.0)
}

/// A 16×16 two-blob scene with two pairs and a rectangular mask.
pub fn small_case(rng: &mut ChaCha8Rng) -> (Latent, Vec<ControlPair>, EditMask) {
    let mut blob = |y: f64, x: f64| Blob {
        center: (y, x),
        radius: rng.gen_range(1.5..2.5),
        intensity: rng.gen_range(0.5..1.0),
    };
    let scene = BlobScene {
        blobs: vec![blob(6.0, 6.0), blob(9.0, 10.0)],
        height: 16,
        width: 16,
    };
    let pairs = vec![ControlPair::new((6, 6), (7, 9)), ControlPair::new((9, 10), (10, 7))];
    (render_scene(&scene), pairs, EditMask::rect(16, 16, (3, 12), (3, 12)))
}

/// Directional derivative checks of both supervision losses on 16×16 latents.
fn loss_probe(den: &dyn Denoiser, variant: LossVariant, seed: u64) -> FdSummary {
    let sched = NoiseSchedule::default();
    let cfg = DragConfig {
        inversion_depth: 20,
        drags: 10,
        ..DragConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (src, pairs, mask) = small_case(&mut rng);
    let base = DragState::start(&src, &pairs, &cfg, den, &sched).unwrap();
    let (mut probes, mut skipped, mut worst) = (0, 0, 0.0f64);
    while probes < FD_PROBES {
        assert!(skipped < 10 * FD_PROBES, "too many probes straddle a kink");
        let mut state = base.clone();
        // an edited latent somewhere along a session, with handles nudged off their origins
        let noise = Grid::randn(state.z.shape(), &mut rng).scale(rng.gen_range(0.0..0.3));
        state.z.grid.axpy(1.0, &noise).unwrap();
        for h in &mut state.handles {
            *h = (
                (h.0 as i64 + rng.gen_range(-1..=1)) as usize,
                (h.1 as i64 + rng.gen_range(-1..=1)) as usize,
            );
        }
        state.frozen = vec![false, rng.gen_bool(0.2)];
        let v = unit_direction(state.z.shape(), &mut rng);
        let at = |g: &Grid| {
            let mut s = state.clone();
            s.z.grid = g.clone();
            s
        };
        let z = state.z.grid.clone();
        let zp = z.lincomb(1.0, &v, FD_STEP).unwrap();
        let zm = z.lincomb(1.0, &v, -FD_STEP).unwrap();
        let refs = loss_references(&state, &cfg, den, variant);
        let parts = |g: &Grid| loss_residuals(&at(g), &cfg, &mask, den, &sched, &refs);
        let (r0, rp, rm) = (parts(&z), parts(&zp), parts(&zm));
        if !same_signs(&rp.0, &r0.0, &rm.0) || !same_signs(&rp.1, &r0.1, &rm.1) {
            skipped += 1;
            continue;
        }
        let eval = motion_loss(&state, &cfg, &mask, den, &sched, variant).unwrap();
        // the loss value itself must agree with the reconstruction
        assert!(rel_err(eval.total(), loss_from(&r0, cfg.lambda)) < 1e-12);
        let analytic = eval.grad.dot(&v).unwrap();
        let numeric = central(&z, &v, |zz| loss_from(&parts(zz), cfg.lambda));
        worst = worst.max(rel_err(analytic, numeric));
        probes += 1;
    }
    FdSummary {
        name: match variant {
            LossVariant::InformationPreserving => "information-preserving loss",
            LossVariant::Baseline => "baseline loss",
        },
        probes,
        skipped,
        worst,
    }
}

/// The whole finite-difference suite on 16×16 latents.
pub fn gradient_suite() -> Vec<FdSummary> {
    let shape = Shape::new(1, 16, 16);
    let trained = trained_denoiser();
    let fresh = ConvDenoiser::init(1, &[8, 12, 8], 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let gauss = GaussianAnalyticDenoiser::new(Grid::randn(shape, &mut rng).scale(0.3), 0.7, NoiseSchedule::default()).unwrap();
    let mut out = vec![
        denoiser_probe(&trained, "conv denoiser (trained)", shape, trained.feature_depth(), 11),
        denoiser_probe(&fresh, "conv denoiser (random init)", shape, fresh.feature_depth(), 12),
        denoiser_probe(&gauss, "gaussian analytic denoiser", shape, 2, 13),
        conv_param_probe(&fresh, shape, 14),
    ];
    out.extend(bilinear_probes(15));
    out.push(loss_probe(&trained, LossVariant::InformationPreserving, 16));
    out.push(loss_probe(&trained, LossVariant::Baseline, 17));
    out
}

/// Exhaustive argmin over the clipped window with the documented tie-break:
/// smallest L1, then smallest Chebyshev distance to `current`, then row-major.
pub fn brute_force_track(features: &FeatureMap, reference: &[f64], current: Point, r2: usize) -> Point {
    let (h, w) = (features.grid.height(), features.grid.width());
    let mut best: Option<(f64, usize, Point)> = None;
    for y in 0..h {
        for x in 0..w {
            let cheb = y.abs_diff(current.0).max(x.abs_diff(current.1));
            if cheb > r2 {
                continue;
            }
            let d = features.l1_to(y, x, reference);
            let better = match best {
                None => true,
                Some((bd, bc, _)) => d < bd || (d == bd && cheb < bc),
            };
            if better {
                best = Some((d, cheb, (y, x)));
            }
        }
    }
    best.expect("window is never empty").2
}

/// Compares `track_point` with the brute force on random integer-valued
/// feature fields (integer values make exact ties common). Returns
/// `(agreements, fields)`.
pub fn tracking_oracle(fields: usize, r2: usize, seed: u64) -> (usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut agree = 0;
    for _ in 0..fields {
        let (h, w) = (rng.gen_range(8..40), rng.gen_range(8..40));
        let d = rng.gen_range(1..5);
        let grid = Grid::from_fn(Shape::new(d, h, w), |_, _, _| rng.gen_range(0..3) as f64);
        let features = FeatureMap::new(grid).unwrap();
        let reference: Vec<f64> = (0..d).map(|_| rng.gen_range(0..3) as f64).collect();
        let current = (rng.gen_range(0..h), rng.gen_range(0..w));
        if track_point(&features, &reference, current, r2) == brute_force_track(&features, &reference, current, r2) {
            agree += 1;
        }
    }
    (agree, fields)
}

/// Worst max-abs error of invert-then-denoise with a constant-eps denoiser
/// over `count` random latents and depths.
pub fn ddim_round_trip(count: usize, seed: u64) -> f64 {
    use dragkit::denoiser::testing::ConstantEps;
    use dragkit::diffusion::{denoise_to_clean, invert_trajectory};
    let sched = NoiseSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let shape = Shape::new(rng.gen_range(1..=3), rng.gen_range(4..24), rng.gen_range(4..24));
        let z0 = Latent::clean(Grid::randn(shape, &mut rng)).unwrap();
        let den = ConstantEps(rng.gen_range(-1.0..1.0));
        let depth = rng.gen_range(1..=sched.t_max());
        let top = invert_trajectory(&z0, depth, &den, &sched).unwrap().top().clone();
        let back = denoise_to_clean(&top, &den, &sched).unwrap();
        worst = worst.max(back.grid.max_abs_diff(&z0.grid).unwrap());
    }
    worst
}

/// One reply body and what `score` should make of it.
pub struct ParseCase {
    pub body: &'static str,
    pub expected: Option<f64>,
}

pub const PARSE_CASES: &[ParseCase] = &[
    ParseCase { body: "7", expected: Some(7.0) },
    ParseCase { body: "8.5", expected: Some(8.5) },
    ParseCase { body: "Score: 6/10. The edit is clean.", expected: Some(6.0) },
    ParseCase { body: r#"{"text": "9 - nearly perfect"}"#, expected: Some(9.0) },
    ParseCase { body: r#"{"response": "I'd give it 4.25"}"#, expected: Some(4.25) },
    ParseCase { body: r#"{"content": "10"}"#, expected: Some(10.0) },
    ParseCase { body: "0", expected: Some(0.0) },
    ParseCase { body: "Rating 42 is too high; 3 then.", expected: Some(3.0) },
    ParseCase { body: "-2 then 5", expected: Some(5.0) },
    ParseCase { body: "no idea", expected: None },
    ParseCase { body: "", expected: None },
    ParseCase { body: "11 and 12", expected: None },
];

/// Runs every parse case through `score` on a mock transport. Returns
/// `(passed, total, mock_calls)`.
pub fn gscore_parse_suite() -> (usize, usize, usize) {
    use dragkit::gscore::{score, GscoreConfig, GscoreRequest, MockTransport, TransportResponse};
    let img = Grid::from_fn(Shape::new(1, 8, 8), |_, y, x| (y * 8 + x) as f64 / 64.0);
    let req = GscoreRequest::from_grids(&img, &img).unwrap();
    let cfg = GscoreConfig {
        max_retries: 0,
        backoff_ms: 0,
        ..GscoreConfig::default()
    };
    let mut passed = 0;
    let mut calls = 0;
    for case in PARSE_CASES {
        let body = case.body.to_owned();
        let mock = MockTransport::from_fn(move |_| Ok(TransportResponse { status: 200, body: body.clone() }));
        let got = score(&req, &cfg, &mock).ok().map(|r| r.score);
        calls += mock.calls();
        if got == case.expected {
            passed += 1;
        }
    }
    (passed, PARSE_CASES.len(), calls)
}
