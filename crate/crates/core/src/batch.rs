//! Batch experiments: a controller x noise x scenario matrix with paired
//! seeds, written to a fresh output directory.
//!
//! Output files, each starting with a format identifier line (`# name/version`
//! for tables, a `{"format": ...}` record for the episode log):
//!
//! * `config.toml` resolved run and episode configuration.
//! * `episodes.jsonl` one JSON record per episode, either a full log or an
//!   error entry.
//! * `metrics.tsv` one row per (controller, sigma) cell.
//! * `loss.tsv` accepted DMPC iterates with the loss and its increment.
//! * `trajectories.tsv` realized ego trajectory of every episode.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::{aggregate_metrics, normalize_costs, run_episode, ControllerKind, EpisodeConfig, EpisodeLog, MetricsTable};

pub const EPISODES_FORMAT: &str = "ppdmpc-episodes/1";
pub const METRICS_FORMAT: &str = "ppdmpc-metrics/1";
pub const LOSS_FORMAT: &str = "ppdmpc-loss/1";
pub const TRAJECTORY_FORMAT: &str = "ppdmpc-trajectories/1";

pub const METRICS_COLUMNS: [&str; 11] = [
    "controller",
    "sigma_a",
    "episodes",
    "success_rate",
    "collision_rate",
    "timeout_rate",
    "mean_time",
    "total_cost",
    "relative_cost",
    "mean_iterations",
    "convergence_rate",
];
pub const LOSS_COLUMNS: [&str; 8] = ["sigma_a", "controller", "seed", "step", "tag", "p", "loss", "gradient"];
pub const TRAJECTORY_COLUMNS: [&str; 13] =
    ["sigma_a", "controller", "seed", "step", "t", "px", "py", "vx", "theta1", "theta2", "delta", "av", "chosen"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunManifest {
    pub controllers: Vec<ControllerKind>,
    pub sigmas: Vec<f64>,
    pub scenarios: usize,
    pub base_seed: u64,
    /// Configuration file the manifest was read from, if any.
    #[serde(skip)]
    pub config: Option<PathBuf>,
    pub output: PathBuf,
    pub workers: usize,
}

impl Default for RunManifest {
    fn default() -> Self {
        Self {
            controllers: vec![ControllerKind::DcMpc, ControllerKind::PpDmpc],
            sigmas: vec![0.1, 0.5, 1.0],
            scenarios: 20,
            base_seed: 0,
            config: None,
            output: PathBuf::from("runs/latest"),
            workers: 1,
        }
    }
}

impl RunManifest {
    pub fn validate(&self) -> Result<()> {
        if self.scenarios == 0 {
            return Err(Error::Config("scenario count must be at least 1".into()));
        }
        if self.controllers.is_empty() || self.sigmas.is_empty() {
            return Err(Error::Config("need at least one controller and one sigma".into()));
        }
        if let Some(s) = self.sigmas.iter().find(|s| !(**s >= 0.0) || !s.is_finite()) {
            return Err(Error::Config(format!("sigma must be finite and nonnegative, got {s}")));
        }
        if self.workers == 0 {
            return Err(Error::Config("worker count must be at least 1".into()));
        }
        Ok(())
    }

    pub fn seeds(&self) -> impl Iterator<Item = u64> + '_ {
        (0..self.scenarios as u64).map(|i| self.base_seed + i)
    }
}

/// Everything a run needs, as stored in a configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunFile {
    pub run: RunManifest,
    pub episode: EpisodeConfig,
}

impl RunFile {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut f = Self::from_toml(&text)?;
        f.run.config = Some(path.to_path_buf());
        Ok(f)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}

/// One line of `episodes.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EpisodeEntry {
    Log(EpisodeLog),
    Error { seed: u64, controller: ControllerKind, sigma_a: f64, message: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchSummary {
    pub logs: Vec<EpisodeLog>,
    pub failures: Vec<EpisodeEntry>,
    pub metrics: Vec<MetricsTable>,
}

fn ensure_fresh_dir(dir: &Path) -> Result<()> {
    if dir.exists() && fs::read_dir(dir)?.next().is_some() {
        return Err(Error::Config(format!("output directory {} is not empty", dir.display())));
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

/// Run the full matrix. Episode failures are recorded and skipped; only
/// configuration and I/O problems are errors.
pub fn run_batch(manifest: &RunManifest, cfg: &EpisodeConfig) -> Result<BatchSummary> {
    manifest.validate()?;
    cfg.validate()?;
    ensure_fresh_dir(&manifest.output)?;
    let resolved = RunFile { run: manifest.clone(), episode: cfg.clone() };
    fs::write(manifest.output.join("config.toml"), resolved.to_toml()?)?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(manifest.workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;

    let seeds: Vec<u64> = manifest.seeds().collect();
    let entries: Vec<EpisodeEntry> = pool.install(|| {
        let worlds: Vec<_> = seeds.par_iter().map(|&s| (s, cfg.sample(s))).collect();
        let mut jobs = Vec::new();
        for &sigma in &manifest.sigmas {
            for &kind in &manifest.controllers {
                for (seed, world) in &worlds {
                    jobs.push((*seed, world, kind, sigma));
                }
            }
        }
        jobs.into_par_iter()
            .map(|(seed, world, kind, sigma)| {
                let res = world.as_ref().map_err(|e| e.to_string()).and_then(|w| {
                    log::info!("seed {seed} {kind} sigma {sigma}");
                    run_episode(w, kind, sigma, cfg).map_err(|e| e.to_string())
                });
                match res {
                    Ok(log) => EpisodeEntry::Log(log),
                    Err(message) => {
                        log::warn!("seed {seed} {kind} sigma {sigma}: {message}");
                        EpisodeEntry::Error { seed, controller: kind, sigma_a: sigma, message }
                    }
                }
            })
            .collect()
    });

    write_episodes(&manifest.output.join("episodes.jsonl"), &entries)?;
    let (logs, failures): (Vec<_>, Vec<_>) = entries.into_iter().partition(|e| matches!(e, EpisodeEntry::Log(_)));
    let logs: Vec<EpisodeLog> = logs
        .into_iter()
        .filter_map(|e| match e {
            EpisodeEntry::Log(l) => Some(l),
            EpisodeEntry::Error { .. } => None,
        })
        .collect();

    let mut metrics = Vec::new();
    for &sigma in &manifest.sigmas {
        for &kind in &manifest.controllers {
            let cell: Vec<EpisodeLog> =
                logs.iter().filter(|l| l.controller == kind && l.sigma_a == sigma).cloned().collect();
            if !cell.is_empty() {
                metrics.push(aggregate_metrics(&cell)?);
            }
        }
    }
    normalize_costs(&mut metrics);
    write_metrics(&manifest.output.join("metrics.tsv"), &metrics)?;
    emit_plot_data(&logs, &manifest.output)?;
    Ok(BatchSummary { logs, failures, metrics })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

pub fn write_episodes(path: &Path, entries: &[EpisodeEntry]) -> Result<()> {
    let mut f = create(path)?;
    writeln!(f, "{}", serde_json::json!({ "format": EPISODES_FORMAT }))?;
    for e in entries {
        serde_json::to_writer(&mut f, e)?;
        writeln!(f)?;
    }
    f.flush()?;
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

pub fn write_metrics(path: &Path, tables: &[MetricsTable]) -> Result<()> {
    let mut f = create(path)?;
    writeln!(f, "# {METRICS_FORMAT}")?;
    writeln!(f, "{}", METRICS_COLUMNS.join("\t"))?;
    for t in tables {
        let row = [
            t.controller.to_string(),
            t.sigma_a.to_string(),
            t.episodes.to_string(),
            t.success_rate.to_string(),
            t.collision_rate.to_string(),
            t.timeout_rate.to_string(),
            opt(t.mean_time),
            t.total_cost.to_string(),
            t.relative_cost.to_string(),
            opt(t.mean_iterations),
            opt(t.convergence_rate),
        ];
        writeln!(f, "{}", row.join("\t"))?;
    }
    f.flush()?;
    Ok(())
}

/// One accepted DMPC iterate as written to `loss.tsv`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossRow {
    pub sigma_a: f64,
    pub controller: ControllerKind,
    pub seed: u64,
    pub step: u64,
    pub tag: String,
    pub p: usize,
    pub loss: f64,
    /// Change from the previous accepted iterate; absent for the first one.
    pub gradient: Option<f64>,
}

/// Accepted iterates of every coupled planning call, in log order.
pub fn loss_rows(logs: &[EpisodeLog]) -> Vec<LossRow> {
    let mut rows = Vec::new();
    for log in logs {
        for s in &log.steps {
            for c in s.controllers.iter().filter(|c| c.is_coupled()) {
                let mut prev: Option<f64> = None;
                for r in c.trace.iter().filter(|r| r.accepted && r.loss.is_finite()) {
                    rows.push(LossRow {
                        sigma_a: log.sigma_a,
                        controller: log.controller,
                        seed: log.seed,
                        step: s.step,
                        tag: c.tag.to_string(),
                        p: r.p,
                        loss: r.loss,
                        gradient: prev.map(|l| r.loss - l),
                    });
                    prev = Some(r.loss);
                }
            }
        }
    }
    rows
}

/// Write `loss.tsv` and `trajectories.tsv` into `dir`.
pub fn emit_plot_data(logs: &[EpisodeLog], dir: &Path) -> Result<()> {
    let mut f = create(&dir.join("loss.tsv"))?;
    writeln!(f, "# {LOSS_FORMAT}")?;
    writeln!(f, "{}", LOSS_COLUMNS.join("\t"))?;
    for r in loss_rows(logs) {
        writeln!(
            f,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.sigma_a,
            r.controller,
            r.seed,
            r.step,
            r.tag,
            r.p,
            r.loss,
            opt(r.gradient)
        )?;
    }
    f.flush()?;

    let mut f = create(&dir.join("trajectories.tsv"))?;
    writeln!(f, "# {TRAJECTORY_FORMAT}")?;
    writeln!(f, "{}", TRAJECTORY_COLUMNS.join("\t"))?;
    for log in logs {
        for s in &log.steps {
            let x = &s.ego;
            writeln!(
                f,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                log.sigma_a,
                log.controller,
                log.seed,
                s.step,
                s.t,
                x.px,
                x.py,
                x.vx,
                x.theta1,
                x.theta2,
                s.control.delta,
                s.control.av,
                s.chosen
            )?;
        }
    }
    f.flush()?;
    Ok(())
}
