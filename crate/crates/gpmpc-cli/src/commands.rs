//! The three subcommands: `run` executes a batch-to-batch learning
//! experiment and writes all artifacts, `benchmark` runs the PI or
//! full-model reference controller over the same seeds and noise streams,
//! and `replay` re-executes logged controller decisions to verify them
//! bit-for-bit.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use gpmpc::controller::{FullModelPredictor, MpcController};
use gpmpc::learner::{
    self, aggregate_metrics, compute_metrics, AggregateRecord, LearningConfig, MetricRecord,
    PiController, SeedRun,
};
use gpmpc::plant::{PlantConfig, Trajectory};
use gpmpc::statespace::GpStateSpaceModel;
use gpmpc::{Error, Result};

use crate::config::{ExperimentConfig, ObjectiveChoice};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum BenchmarkKind {
    /// The PI seed controller, one batch per seed.
    Pi,
    /// The exact-ODE predictive controller, one batch per seed.
    FullModel,
}

fn batch_csv(dir: &Path, b: usize) -> PathBuf {
    dir.join(format!("batch_{b:02}.csv"))
}

fn model_json(dir: &Path, b: usize) -> PathBuf {
    dir.join(format!("model_batch_{b:02}.json"))
}

fn steps_jsonl(dir: &Path, b: usize) -> PathBuf {
    dir.join(format!("steps_batch_{b:02}.jsonl"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    gpmpc::util::write_atomic(path, &bytes)
}

fn make_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path)
        .map_err(|e| Error::Config(format!("creating {}: {e}", path.display())))
}

/// Everything one completed seed leaves on disk: per-batch trajectory CSVs,
/// the serialized model behind each GP batch, per-step solver logs, and the
/// seed's metric records.
fn write_seed_artifacts(dir: &Path, plant: &PlantConfig, run: &SeedRun) -> Result<()> {
    make_dir(dir)?;
    for (b, traj) in run.trajectories.iter().enumerate() {
        traj.write_csv(&batch_csv(dir, b), &plant.constraints)?;
    }
    for (i, model) in run.models.iter().enumerate() {
        // Compact JSON: the float bits are what matter, not readability.
        gpmpc::util::write_atomic(&model_json(dir, i + 1), &serde_json::to_vec(model)?)?;
    }
    for (i, logs) in run.step_logs.iter().enumerate() {
        let mut text = String::new();
        for log in logs {
            text.push_str(&serde_json::to_string(log)?);
            text.push('\n');
        }
        gpmpc::util::write_atomic(&steps_jsonl(dir, i + 1), text.as_bytes())?;
    }
    write_json(&dir.join("metrics.json"), &run.metrics)
}

/// One row of the run summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedEntry {
    pub seed: u64,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub metrics: Vec<MetricRecord>,
}

/// Top-level metrics artifact of a run or benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub objective: ObjectiveChoice,
    pub chance_constraints: bool,
    pub seeds: Vec<SeedEntry>,
    /// Across-seed percentile bands per batch iteration (successful seeds).
    pub aggregate: Vec<AggregateRecord>,
}

/// Work through the seed list with up to `jobs` workers. Output files are
/// partitioned per seed, so workers never contend on a path; the summary
/// keeps the configured seed order regardless of completion order.
fn run_all_seeds(
    plant: &PlantConfig,
    lc: &LearningConfig,
    out_dir: &Path,
    jobs: usize,
) -> Vec<SeedEntry> {
    let seeds = &lc.seeds;
    let n = seeds.len();
    let jobs = jobs.clamp(1, n);
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<SeedEntry>>> = (0..n).map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let seed = seeds[i];
                log::info!("seed {seed}: starting ({} batches)", lc.n_batch + 1);
                let outcome = learner::run_seed(plant, lc, seed).and_then(|run| {
                    write_seed_artifacts(&out_dir.join(format!("seed_{seed}")), plant, &run)?;
                    Ok(run.metrics)
                });
                let entry = match outcome {
                    Ok(metrics) => SeedEntry {
                        seed,
                        ok: true,
                        error: None,
                        metrics,
                    },
                    Err(e) => {
                        log::error!("seed {seed} failed: {e}");
                        SeedEntry {
                            seed,
                            ok: false,
                            error: Some(e.to_string()),
                            metrics: Vec::new(),
                        }
                    }
                };
                *slots[i].lock().expect("no worker panics while holding a slot") = Some(entry);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| {
            m.into_inner()
                .expect("no worker panics while holding a slot")
                .expect("every slot is filled before the scope ends")
        })
        .collect()
}

fn load_resolved(
    config_path: &Path,
    out_override: Option<&Path>,
    seed_override: Option<u64>,
) -> Result<(ExperimentConfig, PlantConfig)> {
    let mut cfg = ExperimentConfig::load(config_path)?;
    if let Some(out) = out_override {
        cfg.out_dir = out.to_path_buf();
    }
    if let Some(seed) = seed_override {
        cfg.seeds = vec![seed];
    }
    let plant = PlantConfig::load(&cfg.plant_config)?;
    make_dir(&cfg.out_dir)?;
    // Absolute paths in the manifest keep replay independent of the CWD.
    cfg.out_dir = cfg
        .out_dir
        .canonicalize()
        .map_err(|e| Error::Config(format!("resolving {}: {e}", cfg.out_dir.display())))?;
    cfg.plant_config = cfg
        .plant_config
        .canonicalize()
        .map_err(|e| Error::Config(format!("resolving {}: {e}", cfg.plant_config.display())))?;
    Ok((cfg, plant))
}

pub fn cmd_run(
    config_path: &Path,
    out_override: Option<&Path>,
    jobs: usize,
    seed_override: Option<u64>,
) -> Result<()> {
    let (cfg, plant) = load_resolved(config_path, out_override, seed_override)?;
    cfg.save(&cfg.out_dir.join("manifest.toml"))?;
    let lc = cfg.learning_config(&plant);
    let entries = run_all_seeds(&plant, &lc, &cfg.out_dir, jobs);
    let succeeded: Vec<Vec<MetricRecord>> = entries
        .iter()
        .filter(|e| e.ok)
        .map(|e| e.metrics.clone())
        .collect();
    let failed = entries.len() - succeeded.len();
    let metrics = RunMetrics {
        objective: cfg.objective,
        chance_constraints: cfg.chance_constraints,
        seeds: entries,
        aggregate: aggregate_metrics(&succeeded),
    };
    write_json(&cfg.out_dir.join("metrics.json"), &metrics)?;
    for agg in &metrics.aggregate {
        println!(
            "batch {:2}: median RMSE {:.4} °C, median final m_P {:.1} kg, median mean violation {:.5} °C ({} seeds)",
            agg.batch,
            agg.rmse_degc.median,
            agg.final_m_p_kg.median,
            agg.mean_violation_degc.median,
            agg.n_seeds
        );
    }
    if failed > 0 {
        return Err(Error::Config(format!(
            "{failed} of {} seed(s) failed; partial results in {}",
            metrics.seeds.len(),
            cfg.out_dir.display()
        )));
    }
    println!("run complete: artifacts in {}", cfg.out_dir.display());
    Ok(())
}

fn run_benchmark_seed(
    plant: &PlantConfig,
    cfg: &ExperimentConfig,
    which: BenchmarkKind,
    seed: u64,
    out: &Path,
) -> Result<MetricRecord> {
    let dir = out.join(format!("seed_{seed}"));
    make_dir(&dir)?;
    match which {
        BenchmarkKind::Pi => {
            let mut pi = PiController::new(
                plant.constraints.t_set,
                plant.nominal_controls.t_m_in,
                plant.integration.dt_s,
                plant.control_bounds.t_m_in,
            )?;
            // Same stream as the learning run's PI seed batch: the PI
            // benchmark IS that batch, reproduced standalone.
            let mut rng = learner::noise_stream(cfg.master_seed, seed, 0);
            let traj = learner::run_pi_batch(plant, &mut pi, &mut rng)?;
            traj.write_csv(&batch_csv(&dir, 0), &plant.constraints)?;
            Ok(compute_metrics(&traj, &plant.constraints, 0))
        }
        BenchmarkKind::FullModel => {
            let lc = cfg.learning_config(plant);
            let spec = lc.ocp_spec(plant);
            let model = FullModelPredictor::new(plant.params.clone(), &plant.integration);
            // Noise of GP iteration 1, so per-seed comparisons are paired.
            let mut rng = learner::noise_stream(cfg.master_seed, seed, 1);
            let (traj, logs) =
                learner::run_controlled_batch(plant, model, &spec, &lc.solver_opts(), &mut rng)?;
            traj.write_csv(&batch_csv(&dir, 0), &plant.constraints)?;
            let mut text = String::new();
            for log in &logs {
                text.push_str(&serde_json::to_string(log)?);
                text.push('\n');
            }
            gpmpc::util::write_atomic(&steps_jsonl(&dir, 0), text.as_bytes())?;
            Ok(compute_metrics(&traj, &plant.constraints, 0))
        }
    }
}

pub fn cmd_benchmark(
    config_path: &Path,
    which: BenchmarkKind,
    out_override: Option<&Path>,
    seed_override: Option<u64>,
) -> Result<()> {
    let (cfg, plant) = load_resolved(config_path, out_override, seed_override)?;
    let sub = match which {
        BenchmarkKind::Pi => "benchmark_pi",
        BenchmarkKind::FullModel => "benchmark_full_model",
    };
    let out = cfg.out_dir.join(sub);
    make_dir(&out)?;
    let mut entries = Vec::new();
    for &seed in &cfg.seeds {
        let entry = match run_benchmark_seed(&plant, &cfg, which, seed, &out) {
            Ok(m) => {
                println!(
                    "seed {seed}: RMSE {:.4} °C, final m_P {:.1} kg, mean violation {:.5} °C",
                    m.rmse_degc, m.final_m_p_kg, m.mean_violation_degc
                );
                SeedEntry {
                    seed,
                    ok: true,
                    error: None,
                    metrics: vec![m],
                }
            }
            Err(e) => {
                log::error!("seed {seed} failed: {e}");
                SeedEntry {
                    seed,
                    ok: false,
                    error: Some(e.to_string()),
                    metrics: Vec::new(),
                }
            }
        };
        entries.push(entry);
    }
    let succeeded: Vec<Vec<MetricRecord>> = entries
        .iter()
        .filter(|e| e.ok)
        .map(|e| e.metrics.clone())
        .collect();
    let failed = entries.len() - succeeded.len();
    let metrics = RunMetrics {
        objective: cfg.objective,
        chance_constraints: cfg.chance_constraints,
        seeds: entries,
        aggregate: aggregate_metrics(&succeeded),
    };
    write_json(&out.join("metrics.json"), &metrics)?;
    if let Some(agg) = metrics.aggregate.first() {
        println!(
            "{sub}: median RMSE {:.4} °C over {} seed(s)",
            agg.rmse_degc.median, agg.n_seeds
        );
    }
    if failed > 0 {
        return Err(Error::Config(format!(
            "{failed} benchmark seed(s) failed; partial results in {}",
            out.display()
        )));
    }
    Ok(())
}

/// Rebuild each logged batch's controller from the serialized model and the
/// manifest's spec, feed it the logged measurements, and require the exact
/// control bits that were applied. Seeds or batches that never produced
/// artifacts (failed runs) are skipped; a present trajectory without its
/// model is an error.
pub fn cmd_replay(manifest_path: &Path) -> Result<()> {
    let cfg = ExperimentConfig::load(manifest_path)?;
    let plant = PlantConfig::load(&cfg.plant_config)?;
    let lc = cfg.learning_config(&plant);
    let spec = lc.ocp_spec(&plant);
    let opts = lc.solver_opts();
    let mut replayed = 0usize;
    for &seed in &cfg.seeds {
        let dir = cfg.out_dir.join(format!("seed_{seed}"));
        if !dir.is_dir() {
            log::warn!("seed {seed}: no artifacts at {}; skipping", dir.display());
            continue;
        }
        for b in 1..=cfg.n_batch {
            let csv = batch_csv(&dir, b);
            if !csv.exists() {
                break; // the seed stopped early; nothing later exists
            }
            let model_path = model_json(&dir, b);
            let bytes = fs::read(&model_path).map_err(|e| {
                Error::Config(format!("missing model file {}: {e}", model_path.display()))
            })?;
            let model: GpStateSpaceModel = serde_json::from_slice(&bytes)?;
            let traj = Trajectory::read_csv(&csv, plant.integration.dt_s)?;
            let mut ctl = MpcController::new(
                model,
                spec.clone(),
                opts.clone(),
                &plant.nominal_controls.to_vector(),
            )?;
            for (j, logged) in traj.controls.iter().enumerate() {
                let u = ctl.mpc_step(&traj.measurements[j]);
                let logged = logged.to_array();
                if (0..3).any(|k| u[k].to_bits() != logged[k].to_bits()) {
                    return Err(Error::Config(format!(
                        "replay diverged at seed {seed}, batch {b}, step {j}: \
                         recomputed [{}, {}, {}] vs logged [{}, {}, {}]",
                        u[0], u[1], u[2], logged[0], logged[1], logged[2]
                    )));
                }
            }
            replayed += 1;
            log::info!(
                "seed {seed} batch {b}: {} controls verified",
                traj.controls.len()
            );
        }
    }
    println!("replay verified {replayed} batch(es) bit-for-bit");
    Ok(())
}
