//! Benchmark cases, the synthetic fixture suite and experiment runners.
//!
//! A manifest is line-delimited JSON, one [`CaseManifest`] per line:
//!
//! ```json
//! {"id":"relocate-00","scene":{"blobs":[{"center":[12.0,11.0],"radius":3.5,"intensity":0.9}],"height":32,"width":32},
//!  "pairs":[{"p":[12,11],"q":[12,19]}],"mask":{"runs":[...]},"overrides":{"lambda":0.1}}
//! ```
//!
//! `scene` is either a blob scene or `{"image": "relative/or/absolute.png"}`;
//! `mask` is either `"all"` or row-major alternating run lengths starting
//! with frozen pixels.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;

use crate::denoiser::Denoiser;
use crate::diffusion::{Latent, NoiseSchedule};
use crate::drag::{distance, run_session, ControlPair, DragConfig, DragReport, EditMask, LossVariant, Schedule};
use crate::error::{Error, Result};
use crate::io::{save_grid, save_png};
use crate::metrics::{self, dai_sweep, drift_curve, fidelity_mse, handle_target_distances, masked_change, median};
use crate::trainer::{render_scene, Blob, BlobScene, CANVAS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SceneSpec {
    Blobs(BlobScene),
    Image { image: PathBuf },
}

#[derive(Debug, Clone, PartialEq)]
pub enum MaskSpec {
    All,
    Runs(Vec<usize>),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum MaskRepr {
    Word(String),
    Runs { runs: Vec<usize> },
}

impl Serialize for MaskSpec {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            MaskSpec::All => MaskRepr::Word("all".into()).serialize(s),
            MaskSpec::Runs(runs) => MaskRepr::Runs { runs: runs.clone() }.serialize(s),
        }
    }
}

impl<'de> Deserialize<'de> for MaskSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match MaskRepr::deserialize(d)? {
            MaskRepr::Word(w) if w == "all" => Ok(MaskSpec::All),
            MaskRepr::Word(w) => Err(serde::de::Error::custom(format!("unknown mask keyword {w:?}"))),
            MaskRepr::Runs { runs } => Ok(MaskSpec::Runs(runs)),
        }
    }
}

impl MaskSpec {
    pub fn from_mask(mask: &EditMask) -> Self {
        if mask.is_all() {
            MaskSpec::All
        } else {
            MaskSpec::Runs(mask.to_runs())
        }
    }

    pub fn to_mask(&self, height: usize, width: usize) -> Result<EditMask> {
        match self {
            MaskSpec::All => Ok(EditMask::all(height, width)),
            MaskSpec::Runs(runs) => EditMask::from_runs(height, width, runs),
        }
    }
}

/// One benchmark case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseManifest {
    pub id: String,
    pub scene: SceneSpec,
    pub pairs: Vec<ControlPair>,
    pub mask: MaskSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overrides: Option<serde_json::Map<String, Value>>,
}

impl CaseManifest {
    /// `base` with this case's overrides applied.
    pub fn config(&self, base: &DragConfig) -> Result<DragConfig> {
        let Some(over) = &self.overrides else {
            return Ok(base.clone());
        };
        let mut v = serde_json::to_value(base)?;
        let obj = v.as_object_mut().expect("config serializes to an object");
        for (k, val) in over {
            obj.insert(k.clone(), val.clone());
        }
        let cfg: DragConfig = serde_json::from_value(v)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// The source image, resolving image paths against `base_dir`.
    pub fn source(&self, base_dir: &Path) -> Result<Latent> {
        match &self.scene {
            SceneSpec::Blobs(scene) => {
                scene.validate()?;
                Ok(render_scene(scene))
            }
            SceneSpec::Image { image } => {
                let path = if image.is_absolute() { image.clone() } else { base_dir.join(image) };
                Latent::clean(crate::io::load_png(path)?)
            }
        }
    }

    /// Checks point margins and mask size against `source` and the case config.
    pub fn validate(&self, source: &Latent, cfg: &DragConfig) -> Result<EditMask> {
        let (h, w) = (source.grid.height(), source.grid.width());
        let margin = cfg.r1 as f64 + cfg.beta;
        if self.pairs.is_empty() {
            return Err(Error::InvalidConfig(format!("case {} has no control pairs", self.id)));
        }
        for pair in &self.pairs {
            for (y, x) in [pair.p, pair.q] {
                let (y, x) = (y as f64, x as f64);
                if y < margin || x < margin || y > (h - 1) as f64 - margin || x > (w - 1) as f64 - margin {
                    return Err(Error::OutOfBounds(format!(
                        "case {}: point ({y}, {x}) is closer than r1+beta={margin} to the edge",
                        self.id
                    )));
                }
            }
            if pair.p == pair.q {
                return Err(Error::InvalidConfig(format!("case {}: handle equals target", self.id)));
            }
        }
        self.mask.to_mask(h, w)
    }
}

pub fn parse_manifest(text: &str) -> Result<Vec<CaseManifest>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Format(format!("manifest line {}: {e}", i + 1))))
        .collect()
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<CaseManifest>> {
    let file = fs::File::open(path)?;
    let mut text = String::new();
    for line in BufReader::new(file).lines() {
        text.push_str(&line?);
        text.push('\n');
    }
    parse_manifest(&text)
}

pub fn manifest_to_string(cases: &[CaseManifest]) -> Result<String> {
    let mut out = String::new();
    for c in cases {
        out.push_str(&serde_json::to_string(c)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_manifest(path: impl AsRef<Path>, cases: &[CaseManifest]) -> Result<()> {
    fs::write(path, manifest_to_string(cases)?)?;
    Ok(())
}

fn blob(center: (f64, f64), radius: f64, intensity: f64) -> Blob {
    Blob {
        center,
        radius,
        intensity,
    }
}

fn rect_around(points: &[(usize, usize)], pad: usize) -> EditMask {
    let min_y = points.iter().map(|p| p.0).min().unwrap_or(0);
    let max_y = points.iter().map(|p| p.0).max().unwrap_or(0);
    let min_x = points.iter().map(|p| p.1).min().unwrap_or(0);
    let max_x = points.iter().map(|p| p.1).max().unwrap_or(0);
    EditMask::rect(
        CANVAS,
        CANVAS,
        (min_y.saturating_sub(pad), (max_y + pad).min(CANVAS - 1)),
        (min_x.saturating_sub(pad), (max_x + pad).min(CANVAS - 1)),
    )
}

fn in_band(p: (f64, f64), lo: f64, hi: f64) -> bool {
    (lo..=hi).contains(&p.0) && (lo..=hi).contains(&p.1)
}

fn round_point(p: (f64, f64)) -> (usize, usize) {
    (p.0.round() as usize, p.1.round() as usize)
}

/// The 20-case synthetic suite: 10 relocations, 5 two-point rotations and 5
/// two-point rescalings on 32×32 blob scenes, every point at least 8 px from
/// the border. Masks are rectangles around all handles and targets.
pub fn fixture_suite() -> Vec<CaseManifest> {
    let mut rng = ChaCha8Rng::seed_from_u64(20_240_410);
    let (lo, hi): (f64, f64) = (8.0, 23.0);
    let mut cases = Vec::with_capacity(20);

    let mut n = 0;
    while n < 10 {
        let p = (rng.gen_range(lo..=hi).round(), rng.gen_range(lo..=hi).round());
        let len = rng.gen_range(5.0..=10.0);
        let ang: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let q = ((p.0 + len * ang.sin()).round(), (p.1 + len * ang.cos()).round());
        if !in_band(q, lo, hi) || distance(round_point(p), round_point(q)) > 10.0 {
            continue;
        }
        let mut blobs = vec![blob(p, rng.gen_range(3.0..4.5), rng.gen_range(0.6..1.0))];
        // an optional distractor well away from the drag path
        if rng.gen_bool(0.5) {
            let d = (rng.gen_range(4.0..27.0), rng.gen_range(4.0..27.0));
            let far = |a: (f64, f64)| (a.0 - d.0).hypot(a.1 - d.1) > 12.0;
            if far(p) && far(q) && far(((p.0 + q.0) / 2.0, (p.1 + q.1) / 2.0)) {
                blobs.push(blob(d, rng.gen_range(2.5..3.5), rng.gen_range(0.3..0.7)));
            }
        }
        let (pp, qq) = (round_point(p), round_point(q));
        cases.push(CaseManifest {
            id: format!("relocate-{n:02}"),
            scene: SceneSpec::Blobs(BlobScene {
                blobs,
                height: CANVAS,
                width: CANVAS,
            }),
            pairs: vec![ControlPair::new(pp, qq)],
            mask: MaskSpec::from_mask(&rect_around(&[pp, qq], 6)),
            overrides: None,
        });
        n += 1;
    }

    let two_point = |kind: &str, count: usize, rng: &mut ChaCha8Rng, cases: &mut Vec<CaseManifest>| {
        let mut n = 0;
        while n < count {
            let c = (rng.gen_range(12.0..=19.0), rng.gen_range(12.0..=19.0));
            let half = rng.gen_range(3.0..=4.5);
            let ang: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            let (s, co) = (ang.sin(), ang.cos());
            let a = (c.0 + half * s, c.1 + half * co);
            let b = (c.0 - half * s, c.1 - half * co);
            let (qa, qb) = if kind == "rotate" {
                let turn: f64 = rng.gen_range(0.5..0.8) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                let (s2, c2) = ((ang + turn).sin(), (ang + turn).cos());
                ((c.0 + half * s2, c.1 + half * c2), (c.0 - half * s2, c.1 - half * c2))
            } else {
                let k = if rng.gen_bool(0.5) { 1.8 } else { 0.45 };
                ((c.0 + k * half * s, c.1 + k * half * co), (c.0 - k * half * s, c.1 - k * half * co))
            };
            let pts = [a, b, qa, qb].map(round_point);
            if ![a, b, qa, qb].iter().all(|&p| in_band(p, lo, hi))
                || pts[0] == pts[2]
                || pts[1] == pts[3]
                || pts[0] == pts[1]
                || pts[2] == pts[3]
            {
                continue;
            }
            let r = rng.gen_range(2.5..3.2);
            let i = rng.gen_range(0.6..0.95);
            cases.push(CaseManifest {
                id: format!("{kind}-{n:02}"),
                scene: SceneSpec::Blobs(BlobScene {
                    blobs: vec![blob(a, r, i), blob(b, r, i * 0.8)],
                    height: CANVAS,
                    width: CANVAS,
                }),
                pairs: vec![ControlPair::new(pts[0], pts[2]), ControlPair::new(pts[1], pts[3])],
                mask: MaskSpec::from_mask(&rect_around(&pts, 6)),
                overrides: None,
            });
            n += 1;
        }
    };
    two_point("rotate", 5, &mut rng, &mut cases);
    two_point("scale", 5, &mut rng, &mut cases);
    cases
}

/// Everything needed to re-execute one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub case: CaseManifest,
    /// Directory image paths are resolved against.
    pub base_dir: PathBuf,
    pub config: DragConfig,
    pub schedule: Schedule,
    pub variant: LossVariant,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    /// DAI at each radius; `None` where the patch does not fit the canvas.
    pub dai: BTreeMap<usize, Option<f64>>,
    /// MSE between the edit and the source.
    pub fidelity_mse: f64,
    pub change_inside_mask: f64,
    pub change_outside_mask: f64,
    /// Mean feature drift of the handles after the last drag.
    pub final_drift: f64,
    /// Median over pairs of the distance from target to where the handle
    /// content landed in the edited image.
    pub handle_target_distance: f64,
    /// Median over pairs of the tracked handle's distance to its target.
    pub tracked_distance: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunOutputs {
    pub edited_tensor: Option<String>,
    pub edited_png: Option<String>,
    pub source_png: Option<String>,
    pub report: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub case_id: String,
    pub spec: RunSpec,
    pub outputs: RunOutputs,
    pub metrics: Option<RunMetrics>,
    pub wall_time_secs: f64,
    pub error: Option<String>,
}

impl RunRecord {
    /// `"{schedule}/{loss}"`, e.g. `gooddrag/ip`.
    pub fn method(&self) -> String {
        method_label(self.spec.schedule, self.spec.variant)
    }
}

pub fn method_label(schedule: Schedule, variant: LossVariant) -> String {
    let s = serde_json::to_value(schedule).expect("enum serializes");
    let v = serde_json::to_value(variant).expect("enum serializes");
    format!("{}/{}", s.as_str().unwrap_or("?"), v.as_str().unwrap_or("?"))
}

/// The result of executing a [`RunSpec`].
#[derive(Debug, Clone)]
pub struct CaseRun {
    pub spec: RunSpec,
    pub source: Latent,
    pub edited: Latent,
    pub report: DragReport,
    pub metrics: RunMetrics,
    pub wall_time_secs: f64,
}

/// Radius of the template used to find where handle content landed.
const LOCATE_RADIUS: usize = 3;
/// Search half-width around the target when locating handle content.
const LOCATE_WINDOW: usize = 4;

pub fn execute(spec: &RunSpec, denoiser: &dyn Denoiser, sched: &NoiseSchedule) -> Result<CaseRun> {
    let started = Instant::now();
    let source = spec.case.source(&spec.base_dir)?;
    let mask = spec.case.validate(&source, &spec.config)?;
    let out = run_session(&source, &spec.case.pairs, &mask, &spec.config, spec.schedule, spec.variant, denoiser, sched)?;
    let pairs = &spec.case.pairs;
    let (inside, outside) = masked_change(&source, &out.edited, &mask)?;
    let located = handle_target_distances(&source, &out.edited, pairs, LOCATE_RADIUS, LOCATE_WINDOW)?;
    let tracked: Vec<f64> = pairs.iter().zip(&out.report.final_handles).map(|(p, &h)| distance(h, p.q)).collect();
    let metrics = RunMetrics {
        dai: dai_sweep(&source, &out.edited, pairs).into_iter().collect(),
        fidelity_mse: fidelity_mse(&source, &out.edited)?,
        change_inside_mask: inside,
        change_outside_mask: outside,
        final_drift: drift_curve(&out.report).last().map(|d| d.1).unwrap_or(0.0),
        handle_target_distance: median(&located),
        tracked_distance: median(&tracked),
    };
    Ok(CaseRun {
        spec: spec.clone(),
        source,
        edited: out.edited,
        report: out.report,
        metrics,
        wall_time_secs: started.elapsed().as_secs_f64(),
    })
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| p.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "panic".into())
}

/// Runs every spec on a pool of `jobs` workers. A failing or panicking case
/// yields an `Err` in its slot and never affects the others.
pub fn execute_all(
    specs: &[RunSpec],
    denoiser: &dyn Denoiser,
    sched: &NoiseSchedule,
    jobs: usize,
) -> Vec<std::result::Result<CaseRun, String>> {
    let run = |spec: &RunSpec| match catch_unwind(AssertUnwindSafe(|| execute(spec, denoiser, sched))) {
        Ok(Ok(r)) => Ok(r),
        Ok(Err(e)) => Err(e.to_string()),
        Err(p) => Err(format!("case panicked: {}", panic_message(p))),
    };
    match rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build() {
        Ok(pool) => pool.install(|| specs.par_iter().map(run).collect()),
        Err(_) => specs.iter().map(run).collect(),
    }
}

fn file_stem(spec: &RunSpec) -> String {
    format!("{}.{}", spec.case.id, method_label(spec.schedule, spec.variant).replace('/', "-"))
}

/// Persists a run (or its failure) under `out` and returns its record.
pub fn write_run(out: &Path, spec: &RunSpec, run: &std::result::Result<CaseRun, String>) -> Result<RunRecord> {
    fs::create_dir_all(out)?;
    let stem = file_stem(spec);
    let record = match run {
        Ok(r) => {
            let tensor = format!("{stem}.edited.aldd");
            let png = format!("{stem}.edited.png");
            let src_png = format!("{}.source.png", spec.case.id);
            let report = format!("{stem}.report.json");
            save_grid(out.join(&tensor), &r.edited.grid)?;
            save_png(out.join(&png), &r.edited.grid)?;
            save_png(out.join(&src_png), &r.source.grid)?;
            fs::write(out.join(&report), serde_json::to_string_pretty(&r.report)?)?;
            RunRecord {
                case_id: spec.case.id.clone(),
                spec: spec.clone(),
                outputs: RunOutputs {
                    edited_tensor: Some(tensor),
                    edited_png: Some(png),
                    source_png: Some(src_png),
                    report: Some(report),
                },
                metrics: Some(r.metrics.clone()),
                wall_time_secs: r.wall_time_secs,
                error: None,
            }
        }
        Err(e) => RunRecord {
            case_id: spec.case.id.clone(),
            spec: spec.clone(),
            outputs: RunOutputs::default(),
            metrics: None,
            wall_time_secs: 0.0,
            error: Some(e.clone()),
        },
    };
    fs::write(out.join(format!("{stem}.record.json")), serde_json::to_string_pretty(&record)?)?;
    Ok(record)
}

pub fn specs_for(
    cases: &[CaseManifest],
    base_dir: &Path,
    base: &DragConfig,
    schedule: Schedule,
    variant: LossVariant,
    seed: u64,
    checkpoint: Option<&Path>,
) -> Result<Vec<RunSpec>> {
    cases
        .iter()
        .map(|case| {
            Ok(RunSpec {
                case: case.clone(),
                base_dir: base_dir.to_path_buf(),
                config: case.config(base)?,
                schedule,
                variant,
                seed,
                checkpoint: checkpoint.map(Path::to_path_buf),
            })
        })
        .collect()
}

/// Runs specs and writes every record; returns the records in input order.
pub fn cmd_drag(
    specs: &[RunSpec],
    denoiser: &dyn Denoiser,
    sched: &NoiseSchedule,
    jobs: usize,
    out: &Path,
) -> Result<Vec<RunRecord>> {
    fs::create_dir_all(out)?;
    let runs = execute_all(specs, denoiser, sched, jobs);
    specs.iter().zip(&runs).map(|(s, r)| write_run(out, s, r)).collect()
}

/// The four arms of the ablation grid.
pub const ABLATION_ARMS: [(Schedule, LossVariant); 4] = [
    (Schedule::GoodDrag, LossVariant::InformationPreserving),
    (Schedule::GoodDrag, LossVariant::Baseline),
    (Schedule::AllAtOnce, LossVariant::InformationPreserving),
    (Schedule::AllAtOnce, LossVariant::Baseline),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub method: String,
    pub cases: usize,
    pub failures: usize,
    pub median_final_drift: f64,
    pub median_handle_target_distance: f64,
    pub median_change_outside_mask: f64,
    pub median_change_inside_mask: f64,
    pub median_dai_1: f64,
    /// Fraction of cases whose handle content ended within 2 px of its target.
    pub within_2px: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub arms: Vec<ArmSummary>,
    /// AlDD keeps content outside the mask better than all-at-once (IP loss).
    pub aldd_preserves_more: bool,
    /// IP loss has lower drift and lands closer than the baseline loss (AlDD).
    pub ip_drifts_less: bool,
    pub ip_lands_closer: bool,
}

impl AblationSummary {
    pub fn arm(&self, schedule: Schedule, variant: LossVariant) -> Option<&ArmSummary> {
        let m = method_label(schedule, variant);
        self.arms.iter().find(|a| a.method == m)
    }
}

pub fn summarize_arm(method: &str, records: &[&RunRecord]) -> ArmSummary {
    let ok: Vec<&RunMetrics> = records.iter().filter_map(|r| r.metrics.as_ref()).collect();
    let col = |f: &dyn Fn(&RunMetrics) -> f64| median(&ok.iter().map(|m| f(m)).collect::<Vec<_>>());
    ArmSummary {
        method: method.to_owned(),
        cases: records.len(),
        failures: records.len() - ok.len(),
        median_final_drift: col(&|m| m.final_drift),
        median_handle_target_distance: col(&|m| m.handle_target_distance),
        median_change_outside_mask: col(&|m| m.change_outside_mask),
        median_change_inside_mask: col(&|m| m.change_inside_mask),
        median_dai_1: col(&|m| m.dai.get(&1).copied().flatten().unwrap_or(f64::NAN)),
        within_2px: if ok.is_empty() {
            0.0
        } else {
            ok.iter().filter(|m| m.handle_target_distance <= 2.0).count() as f64 / ok.len() as f64
        },
    }
}

pub fn summarize_ablation(records: &[RunRecord]) -> AblationSummary {
    let arms: Vec<ArmSummary> = ABLATION_ARMS
        .iter()
        .map(|&(s, v)| {
            let m = method_label(s, v);
            let rs: Vec<&RunRecord> = records.iter().filter(|r| r.method() == m).collect();
            summarize_arm(&m, &rs)
        })
        .collect();
    let find = |s, v| arms.iter().find(|a| a.method == method_label(s, v)).expect("all arms present");
    let good_ip = find(Schedule::GoodDrag, LossVariant::InformationPreserving);
    let good_bl = find(Schedule::GoodDrag, LossVariant::Baseline);
    let flat_ip = find(Schedule::AllAtOnce, LossVariant::InformationPreserving);
    AblationSummary {
        aldd_preserves_more: good_ip.median_change_outside_mask < flat_ip.median_change_outside_mask,
        ip_drifts_less: good_ip.median_final_drift < good_bl.median_final_drift,
        ip_lands_closer: good_ip.median_handle_target_distance < good_bl.median_handle_target_distance,
        arms,
    }
}

/// Runs the 2×2 grid over all cases, writes records, a per-run CSV and a
/// summary JSON under `out`.
#[allow(clippy::too_many_arguments)]
pub fn cmd_ablate(
    cases: &[CaseManifest],
    base_dir: &Path,
    base: &DragConfig,
    seed: u64,
    checkpoint: Option<&Path>,
    denoiser: &dyn Denoiser,
    sched: &NoiseSchedule,
    jobs: usize,
    out: &Path,
) -> Result<(Vec<RunRecord>, AblationSummary)> {
    let mut specs = Vec::with_capacity(cases.len() * 4);
    for &(s, v) in &ABLATION_ARMS {
        specs.extend(specs_for(cases, base_dir, base, s, v, seed, checkpoint)?);
    }
    let records = cmd_drag(&specs, denoiser, sched, jobs, out)?;
    let summary = summarize_ablation(&records);
    write_runs_csv(out.join("ablation_runs.csv"), &records)?;
    fs::write(out.join("ablation_summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok((records, summary))
}

pub fn write_runs_csv(path: impl AsRef<Path>, records: &[RunRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "case_id",
        "method",
        "dai_1",
        "dai_5",
        "dai_10",
        "dai_20",
        "fidelity_mse",
        "change_inside_mask",
        "change_outside_mask",
        "final_drift",
        "handle_target_distance",
        "tracked_distance",
        "wall_time_secs",
        "error",
    ])?;
    let f = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for r in records {
        let m = r.metrics.as_ref();
        let dai = |g: usize| f(m.and_then(|m| m.dai.get(&g).copied().flatten()));
        w.write_record([
            r.case_id.clone(),
            r.method(),
            dai(1),
            dai(5),
            dai(10),
            dai(20),
            f(m.map(|m| m.fidelity_mse)),
            f(m.map(|m| m.change_inside_mask)),
            f(m.map(|m| m.change_outside_mask)),
            f(m.map(|m| m.final_drift)),
            f(m.map(|m| m.handle_target_distance)),
            f(m.map(|m| m.tracked_distance)),
            format!("{:.3}", r.wall_time_secs),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fig5Row {
    pub seed: u64,
    pub mse_single: f64,
    pub mse_distributed: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fig5Config {
    pub seeds: u64,
    pub noise_fields: usize,
    pub sigma: f64,
    pub depth: usize,
    pub first_seed: u64,
}

impl Default for Fig5Config {
    fn default() -> Self {
        Self {
            seeds: 50,
            noise_fields: 10,
            sigma: 0.1,
            depth: 38,
            first_seed: 0,
        }
    }
}

/// The noise-accumulation experiment over a seed sweep; each seed draws its
/// own blob scene and noise fields.
pub fn cmd_fig5(cfg: &Fig5Config, denoiser: &dyn Denoiser, sched: &NoiseSchedule, jobs: usize) -> Result<Vec<Fig5Row>> {
    let run = |seed: u64| -> Result<Fig5Row> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scene = BlobScene::random(&mut rng, CANVAS, CANVAS);
        let z0 = render_scene(&scene);
        let r = metrics::noise_accumulation_experiment(&z0, cfg.depth, cfg.noise_fields, cfg.sigma, sched, denoiser, seed ^ 0xf195)?;
        Ok(Fig5Row {
            seed,
            mse_single: r.mse_single,
            mse_distributed: r.mse_distributed,
        })
    };
    let seeds: Vec<u64> = (cfg.first_seed..cfg.first_seed + cfg.seeds).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    pool.install(|| seeds.par_iter().map(|&s| run(s)).collect())
}

pub fn fig5_win_rate(rows: &[Fig5Row]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    rows.iter().filter(|r| r.mse_distributed < r.mse_single).count() as f64 / rows.len() as f64
}

pub fn write_fig5_csv(path: impl AsRef<Path>, rows: &[Fig5Row]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["seed", "mse_single", "mse_distributed", "distributed_wins"])?;
    for r in rows {
        w.write_record([
            r.seed.to_string(),
            format!("{:.9}", r.mse_single),
            format!("{:.9}", r.mse_distributed),
            u8::from(r.mse_distributed < r.mse_single).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Loads every `*.record.json` directly inside `dir`, sorted by file name.
pub fn load_records(dir: &Path) -> Result<Vec<RunRecord>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_string_lossy().ends_with(".record.json"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| Ok(serde_json::from_str(&fs::read_to_string(p)?)?))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: String,
    pub cases: usize,
    /// Mean DAI per radius over cases where it is defined.
    pub mean_dai: BTreeMap<usize, Option<f64>>,
    pub mean_gscore: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub methods: Vec<MethodRow>,
    /// `(case_id, method) -> score`.
    pub gscores: Vec<(String, String, f64)>,
    pub gscore_failures: Vec<(String, String, String)>,
    /// Spearman correlation of each metric's ranking with the human ranking.
    pub spearman: BTreeMap<String, f64>,
}

/// Per-case rank rows keyed by case id.
pub type HumanRanks = BTreeMap<String, Vec<usize>>;

/// Rates one record; the error string is kept in the report.
pub type ScoreFn<'a> = dyn FnMut(&RunRecord) -> std::result::Result<f64, String> + 'a;

/// Human rankings: a CSV with header `case_id,<method>,<method>,...` and one
/// rank row per case (1 = best).
pub fn read_human_ranks(path: &Path) -> Result<(Vec<String>, HumanRanks)> {
    let mut r = csv::Reader::from_path(path)?;
    let methods: Vec<String> = r.headers()?.iter().skip(1).map(str::to_owned).collect();
    let mut rows = BTreeMap::new();
    for rec in r.records() {
        let rec = rec?;
        let id = rec.get(0).unwrap_or_default().to_owned();
        let ranks = rec
            .iter()
            .skip(1)
            .map(|v| v.trim().parse::<usize>().map_err(|e| Error::Format(format!("rank {v:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        rows.insert(id, ranks);
    }
    Ok((methods, rows))
}

/// Aggregates records into a per-method table. `score` optionally rates one
/// record (GScore); its failures are collected, not fatal.
pub fn evaluate(
    records: &[RunRecord],
    mut score: Option<&mut ScoreFn<'_>>,
    human: Option<(&[String], &HumanRanks)>,
) -> Result<EvaluationReport> {
    let mut report = EvaluationReport::default();
    let mut by_method: BTreeMap<String, Vec<&RunRecord>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.metrics.is_some()) {
        by_method.entry(r.method()).or_default().push(r);
    }
    for (method, rs) in &by_method {
        let mut mean_dai = BTreeMap::new();
        for g in metrics::DAI_GAMMAS {
            let vals: Vec<f64> = rs
                .iter()
                .filter_map(|r| r.metrics.as_ref().and_then(|m| m.dai.get(&g).copied().flatten()))
                .collect();
            mean_dai.insert(g, (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64));
        }
        let mut gs = Vec::new();
        if let Some(f) = score.as_mut() {
            for r in rs {
                match f(r) {
                    Ok(s) => {
                        gs.push(s);
                        report.gscores.push((r.case_id.clone(), method.clone(), s));
                    }
                    Err(e) => report.gscore_failures.push((r.case_id.clone(), method.clone(), e)),
                }
            }
        }
        report.methods.push(MethodRow {
            method: method.clone(),
            cases: rs.len(),
            mean_dai,
            mean_gscore: (!gs.is_empty()).then(|| gs.iter().sum::<f64>() / gs.len() as f64),
        });
    }
    if let Some((methods, ranks)) = human {
        let lookup = |case: &str, method: &str| -> Option<&RunMetrics> {
            records
                .iter()
                .find(|r| r.case_id == case && r.method() == method)
                .and_then(|r| r.metrics.as_ref())
        };
        let mut human_rows = Vec::new();
        let mut dai_rows = Vec::new();
        let mut gscore_rows = Vec::new();
        for (case, u) in ranks {
            let dai: Option<Vec<f64>> = methods
                .iter()
                .map(|m| lookup(case, m).and_then(|x| x.dai.get(&1).copied().flatten()).map(|d| -d))
                .collect();
            let Some(dai) = dai else { continue };
            human_rows.push(u.clone());
            dai_rows.push(metrics::ranks_descending(&dai));
            let g: Option<Vec<f64>> = methods
                .iter()
                .map(|m| report.gscores.iter().find(|(c, mm, _)| c == case && mm == m).map(|x| x.2))
                .collect();
            gscore_rows.push(g.map(|g| metrics::ranks_descending(&g)));
        }
        if !human_rows.is_empty() {
            let table = metrics::RankTable::new(human_rows.clone(), dai_rows)?;
            report.spearman.insert("dai_1".into(), metrics::spearman(&table));
            if let Some(g) = gscore_rows.into_iter().collect::<Option<Vec<_>>>() {
                let table = metrics::RankTable::new(human_rows, g)?;
                report.spearman.insert("gscore".into(), metrics::spearman(&table));
            }
        }
    }
    Ok(report)
}

/// Renders the report as a plain-text table with one row per method.
pub fn format_report(report: &EvaluationReport) -> String {
    let mut s = String::new();
    let _ = write!(s, "{:<24}{:>6}", "method", "cases");
    for g in metrics::DAI_GAMMAS {
        let _ = write!(s, "{:>12}", format!("DAI g={g}"));
    }
    let _ = writeln!(s, "{:>10}", "GScore");
    for m in &report.methods {
        let _ = write!(s, "{:<24}{:>6}", m.method, m.cases);
        for g in metrics::DAI_GAMMAS {
            let v = m.mean_dai.get(&g).copied().flatten();
            let _ = write!(s, "{:>12}", v.map(|v| format!("{v:.5}")).unwrap_or_else(|| "-".into()));
        }
        let _ = writeln!(s, "{:>10}", m.mean_gscore.map(|v| format!("{v:.2}")).unwrap_or_else(|| "-".into()));
    }
    for (k, v) in &report.spearman {
        let _ = writeln!(s, "spearman[{k}] = {v:.4}");
    }
    for (c, m, e) in &report.gscore_failures {
        let _ = writeln!(s, "gscore failed for {c} ({m}): {e}");
    }
    s
}

use std::fmt::Write as _;

/// True when two runs produced bit-identical edits and identical reports.
pub fn outputs_identical(a: &CaseRun, b: &CaseRun) -> bool {
    a.edited.grid.data().iter().zip(b.edited.grid.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        && a.report == b.report
}

/// Flushes a line to stdout; used by the CLI for progress.
pub fn progress(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

/// Scores every successful record with GScore. Sources are re-rendered from
/// the case; edits are read from the tensor files under `dir`.
pub fn gscore_records(
    records: &[RunRecord],
    dir: &Path,
    cfg: &crate::gscore::GscoreConfig,
    transport: &dyn crate::gscore::Transport,
) -> BTreeMap<(String, String), std::result::Result<f64, String>> {
    use crate::gscore::{score_batch, GscoreRequest};
    let mut keys = Vec::new();
    let mut requests = Vec::new();
    let mut out = BTreeMap::new();
    for r in records.iter().filter(|r| r.metrics.is_some()) {
        let key = (r.case_id.clone(), r.method());
        let req = (|| -> std::result::Result<GscoreRequest, String> {
            let tensor = r.outputs.edited_tensor.as_ref().ok_or("record has no edited tensor")?;
            let edited = crate::io::load_grid(dir.join(tensor)).map_err(|e| e.to_string())?;
            let source = r.spec.case.source(&r.spec.base_dir).map_err(|e| e.to_string())?;
            GscoreRequest::from_grids(&source.grid, &edited).map_err(|e| e.to_string())
        })();
        match req {
            Ok(req) => {
                keys.push(key);
                requests.push(req);
            }
            Err(e) => {
                out.insert(key, Err(e));
            }
        }
    }
    for (key, res) in keys.into_iter().zip(score_batch(&requests, cfg, transport)) {
        out.insert(key, res.map(|g| g.score).map_err(|e| e.to_string()));
    }
    out
}
