use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use dragkit::bench::{self, Fig5Config, RunRecord};
use dragkit::denoiser::ConvDenoiser;
use dragkit::diffusion::NoiseSchedule;
use dragkit::drag::{DragConfig, LossVariant, Schedule};
use dragkit::gscore::{GscoreConfig, HttpTransport};
use dragkit::trainer::{eval_eps_mse, save_training, train_denoiser, TrainConfig};

#[derive(Parser)]
#[command(name = "dragkit", version, about = "Drag-based latent editing toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RunArgs {
    /// Case manifest (JSON lines).
    #[arg(long)]
    manifest: PathBuf,
    /// Trained denoiser checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// JSON file with drag hyperparameters; missing keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Recorded in every run for bookkeeping; drag sessions are deterministic.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train the toy convolutional denoiser on procedural blob scenes.
    TrainToy {
        #[arg(long, default_value_t = 5000)]
        steps: usize,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long, default_value_t = 0.1)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the built-in 20-case synthetic manifest.
    Suite {
        #[arg(long)]
        out: PathBuf,
    },
    /// Run drag edits for every case in a manifest.
    Drag {
        #[command(flatten)]
        run: RunArgs,
        /// gooddrag | all-at-once
        #[arg(long, default_value = "gooddrag", value_parser = parse_enum::<Schedule>)]
        mode: Schedule,
        /// ip | baseline
        #[arg(long, default_value = "ip", value_parser = parse_enum::<LossVariant>)]
        loss: LossVariant,
    },
    /// Run the schedule x loss grid and summarize it.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Compare one large perturbation against many small ones.
    Fig5 {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 50)]
        seeds: u64,
        #[arg(long, default_value_t = 10)]
        noise_fields: usize,
        #[arg(long, default_value_t = 0.1)]
        sigma: f64,
        #[arg(long, default_value_t = 38)]
        depth: usize,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tabulate DAI (and optionally GScore) over a directory of drag runs.
    Evaluate {
        /// Directory holding `*.record.json` files.
        #[arg(long)]
        runs: PathBuf,
        /// Score edits with the configured GScore endpoint.
        #[arg(long)]
        gscore: bool,
        #[arg(long)]
        gscore_config: Option<PathBuf>,
        /// CSV of human ranks: `case_id,<method>,...`.
        #[arg(long)]
        human_ranks: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-execute a recorded run and check the outputs are bit-identical.
    Rerun {
        #[arg(long)]
        record: PathBuf,
    },
}

fn parse_enum<T: serde::de::DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_owned())).map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn load_denoiser(path: &Path) -> Result<ConvDenoiser> {
    ConvDenoiser::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn load_config(path: Option<&Path>) -> Result<DragConfig> {
    let cfg: DragConfig = match path {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => DragConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn manifest_dir(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn report_records(records: &[RunRecord]) -> ExitCode {
    let mut failed = 0;
    for r in records {
        match (&r.metrics, &r.error) {
            (Some(m), _) => println!(
                "{:<14} {:<22} dist {:>5.2}px  drift {:.4}  outside {:.5}  {:.1}s",
                r.case_id,
                r.method(),
                m.handle_target_distance,
                m.final_drift,
                m.change_outside_mask,
                r.wall_time_secs
            ),
            (None, e) => {
                failed += 1;
                println!("{:<14} {:<22} FAILED: {}", r.case_id, r.method(), e.as_deref().unwrap_or("?"));
            }
        }
    }
    println!("{} runs, {failed} failed", records.len());
    if failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let sched = NoiseSchedule::default();
    match cli.command {
        Command::TrainToy {
            steps,
            batch,
            lr,
            seed,
            out,
        } => {
            let cfg = TrainConfig {
                steps,
                batch,
                learning_rate: lr,
                seed,
                ..TrainConfig::default()
            };
            let outcome = train_denoiser(&cfg, &sched)?;
            save_training(&outcome, &out)?;
            let held_out = eval_eps_mse(&outcome.denoiser, &sched, cfg.canvas, 256, seed.wrapping_add(1_000_003))?;
            println!(
                "trained {steps} steps: first loss {:.5}, last loss {:.5}, held-out eps mse {held_out:.5}",
                outcome.losses.first().copied().unwrap_or(f64::NAN),
                outcome.losses.last().copied().unwrap_or(f64::NAN),
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Suite { out } => {
            let cases = bench::fixture_suite();
            bench::write_manifest(&out, &cases)?;
            println!("wrote {} cases to {}", cases.len(), out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Drag { run, mode, loss } => {
            let den = load_denoiser(&run.checkpoint)?;
            let cfg = load_config(run.config.as_deref())?;
            let cases = bench::read_manifest(&run.manifest)?;
            let specs = bench::specs_for(
                &cases,
                &manifest_dir(&run.manifest),
                &cfg,
                mode,
                loss,
                run.seed,
                Some(&run.checkpoint),
            )?;
            let records = bench::cmd_drag(&specs, &den, &sched, run.jobs, &run.out)?;
            bench::write_runs_csv(run.out.join("runs.csv"), &records)?;
            Ok(report_records(&records))
        }
        Command::Ablate { run } => {
            let den = load_denoiser(&run.checkpoint)?;
            let cfg = load_config(run.config.as_deref())?;
            let cases = bench::read_manifest(&run.manifest)?;
            let (records, summary) = bench::cmd_ablate(
                &cases,
                &manifest_dir(&run.manifest),
                &cfg,
                run.seed,
                Some(&run.checkpoint),
                &den,
                &sched,
                run.jobs,
                &run.out,
            )?;
            let code = report_records(&records);
            println!(
                "{:<22}{:>8}{:>10}{:>12}{:>12}{:>10}",
                "method", "failed", "drift", "distance", "outside", "<=2px"
            );
            for a in &summary.arms {
                println!(
                    "{:<22}{:>8}{:>10.4}{:>12.3}{:>12.5}{:>10.2}",
                    a.method,
                    a.failures,
                    a.median_final_drift,
                    a.median_handle_target_distance,
                    a.median_change_outside_mask,
                    a.within_2px
                );
            }
            println!(
                "alternating preserves more: {}; ip drifts less: {}; ip lands closer: {}",
                summary.aldd_preserves_more, summary.ip_drifts_less, summary.ip_lands_closer
            );
            Ok(code)
        }
        Command::Fig5 {
            checkpoint,
            seeds,
            noise_fields,
            sigma,
            depth,
            jobs,
            out,
        } => {
            let den = load_denoiser(&checkpoint)?;
            let cfg = Fig5Config {
                seeds,
                noise_fields,
                sigma,
                depth,
                first_seed: 0,
            };
            let rows = bench::cmd_fig5(&cfg, &den, &sched, jobs)?;
            bench::write_fig5_csv(&out, &rows)?;
            println!(
                "{} seeds, distributed perturbation wins {:.1}%",
                rows.len(),
                100.0 * bench::fig5_win_rate(&rows)
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Evaluate {
            runs,
            gscore,
            gscore_config,
            human_ranks,
            out,
        } => {
            if !runs.is_dir() {
                bail!("{} is not a directory", runs.display());
            }
            let records = bench::load_records(&runs)?;
            let scores: Option<BTreeMap<_, _>> = if gscore {
                let cfg = GscoreConfig::load(gscore_config.as_deref())?;
                Some(bench::gscore_records(&records, &runs, &cfg, &HttpTransport))
            } else {
                None
            };
            let mut lookup = |r: &RunRecord| -> std::result::Result<f64, String> {
                scores
                    .as_ref()
                    .and_then(|s| s.get(&(r.case_id.clone(), r.method())).cloned())
                    .unwrap_or_else(|| Err("not scored".into()))
            };
            let human = human_ranks.as_deref().map(bench::read_human_ranks).transpose()?;
            let report = bench::evaluate(
                &records,
                scores.is_some().then_some(&mut lookup as &mut dyn FnMut(&RunRecord) -> _),
                human.as_ref().map(|(m, r)| (m.as_slice(), r)),
            )?;
            print!("{}", bench::format_report(&report));
            if let Some(out) = out {
                fs::write(out, serde_json::to_string_pretty(&report)?)?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Rerun { record } => {
            let rec: RunRecord = serde_json::from_str(&fs::read_to_string(&record)?)?;
            let ck = rec.spec.checkpoint.clone().context("record has no checkpoint path")?;
            let den = load_denoiser(&ck)?;
            let a = bench::execute(&rec.spec, &den, &sched)?;
            let b = bench::execute(&rec.spec, &den, &sched)?;
            let matches_record = rec.metrics.as_ref() == Some(&a.metrics);
            let identical = bench::outputs_identical(&a, &b);
            println!("rerun identical: {identical}; metrics match record: {matches_record}");
            Ok(if identical && matches_record {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
    }
}
