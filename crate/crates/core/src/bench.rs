//! Synthetic-gradient throughput benchmark and scaling report.
//!
//! Each job size runs as its own launched job. Workers time `steps` grouped
//! allreduces after a warmup, three times over; the orchestrator keeps the
//! median run and compares it against the single-rank rate.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::collectives::ReduceOp;
use crate::error::{Error, Result};
use crate::fusion::Runtime;
use crate::launcher::{find_free_base_port, launch, LaunchConfig};
use crate::runtime::{DEFAULT_FUSION_BYTES, ENV_FUSION_BYTES};
use crate::tensor::Tensor;

pub const CSV_HEADER: &str = "n,throughput_samples_per_sec,efficiency,fused";
pub const WARMUP_STEPS: usize = 5;
pub const MIN_TIMED_STEPS: usize = 50;
pub const RUNS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMode {
    On,
    Off,
    Both,
}

impl FusionMode {
    pub fn settings(self) -> &'static [bool] {
        match self {
            FusionMode::On => &[true],
            FusionMode::Off => &[false],
            FusionMode::Both => &[true, false],
        }
    }
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "on" => Ok(FusionMode::On),
            "off" => Ok(FusionMode::Off),
            "both" => Ok(FusionMode::Both),
            other => Err(Error::Usage(format!("--fusion {other:?}; expected on, off or both"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub np_list: Vec<usize>,
    pub tensor_bytes: usize,
    pub num_tensors: usize,
    pub steps: usize,
    pub fusion: FusionMode,
    /// Samples each rank is credited with per step.
    pub batch_per_rank: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            np_list: vec![1, 2, 4],
            tensor_bytes: 1024,
            num_tensors: 100,
            steps: MIN_TIMED_STEPS,
            fusion: FusionMode::Both,
            batch_per_rank: 32,
        }
    }
}

/// What one worker job measured, written by rank 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerReport {
    pub n: usize,
    pub fused: bool,
    pub run_throughputs: Vec<f64>,
    pub collectives_per_step: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerArgs {
    pub tensor_bytes: usize,
    pub num_tensors: usize,
    pub steps: usize,
    pub batch_per_rank: usize,
    pub fused: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingRow {
    pub n: usize,
    pub fused: bool,
    pub throughput: f64,
    pub efficiency: f64,
    pub collectives_per_step: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScalingReport {
    pub rows: Vec<ScalingRow>,
}

/// `throughput(N) / (N · throughput(1))`.
pub fn efficiency(throughput_n: f64, n: usize, throughput_1: f64) -> f64 {
    throughput_n / (n as f64 * throughput_1)
}

pub fn median(values: &[f64]) -> Option<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    match v.len() {
        0 => None,
        len if len % 2 == 1 => Some(v[len / 2]),
        len => Some((v[len / 2 - 1] + v[len / 2]) / 2.0),
    }
}

impl ScalingReport {
    /// Builds rows from per-job measurements. Each fusion setting is compared
    /// against its own single-rank job, which must be present.
    pub fn from_measurements(measured: &[WorkerReport]) -> Result<Self> {
        let mut rows = Vec::new();
        for fused in [true, false] {
            let mut group: Vec<_> = measured.iter().filter(|m| m.fused == fused).collect();
            if group.is_empty() {
                continue;
            }
            group.sort_by_key(|m| m.n);
            let base = group
                .iter()
                .find(|m| m.n == 1)
                .and_then(|m| median(&m.run_throughputs))
                .ok_or_else(|| Error::Usage("scaling report needs a single-rank measurement".into()))?;
            for m in group {
                let throughput = median(&m.run_throughputs)
                    .ok_or_else(|| Error::Usage(format!("no runs recorded for n={}", m.n)))?;
                rows.push(ScalingRow {
                    n: m.n,
                    fused,
                    throughput,
                    efficiency: if m.n == 1 { 1.0 } else { efficiency(throughput, m.n, base) },
                    collectives_per_step: m.collectives_per_step,
                });
            }
        }
        Ok(ScalingReport { rows })
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{CSV_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{:.3},{:.6},{}", r.n, r.throughput, r.efficiency, r.fused);
        }
        out
    }

    pub fn table(&self) -> String {
        let mut out = format!(
            "{:>4}  {:>7}  {:>22}  {:>10}  {:>16}\n",
            "n", "fusion", "throughput (samples/s)", "efficiency", "collectives/step"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:>4}  {:>7}  {:>22.1}  {:>9.1}%  {:>16.1}",
                r.n,
                if r.fused { "on" } else { "off" },
                r.throughput,
                r.efficiency * 100.0,
                r.collectives_per_step
            );
        }
        for r in self.rows.iter().filter(|r| r.fused) {
            if let Some(u) = self.rows.iter().find(|u| !u.fused && u.n == r.n) {
                let _ = writeln!(out, "n={}: fused/unfused throughput {:.2}x", r.n, r.throughput / u.throughput);
            }
        }
        out
    }
}

/// Body of one benchmark rank. Returns the report on every rank; only rank 0's
/// timings are meaningful to the caller.
pub fn run_worker(rt: &Runtime, args: &WorkerArgs) -> Result<WorkerReport> {
    let elems = (args.tensor_bytes / 4).max(1);
    let fill = 1.0 / (rt.rank() + 1) as f32;
    let step = || -> Result<()> {
        let grads = (0..args.num_tensors)
            .map(|i| Tensor::new(format!("grad/{i}"), vec![fill; elems]))
            .collect::<Result<Vec<_>>>()?;
        for t in rt.submit_allreduce_group(grads, ReduceOp::Average)? {
            t.wait()?;
        }
        Ok(())
    };

    let steps = args.steps.max(1);
    let mut run_throughputs = Vec::with_capacity(RUNS);
    let mut collectives = 0usize;
    for _ in 0..RUNS {
        for _ in 0..WARMUP_STEPS {
            step()?;
        }
        let plans_before = rt.plan_log().len();
        let started = Instant::now();
        for _ in 0..steps {
            step()?;
        }
        let secs = started.elapsed().as_secs_f64();
        collectives += rt.plan_log().len() - plans_before;
        let samples = (steps * args.batch_per_rank * rt.size()) as f64;
        run_throughputs.push(samples / secs);
    }
    Ok(WorkerReport {
        n: rt.size(),
        fused: args.fused,
        run_throughputs,
        collectives_per_step: collectives as f64 / (RUNS * steps) as f64,
    })
}

/// Launches `program worker_args... --out <file>` once per (fusion, N) pair
/// and assembles the report. The single-rank job always runs.
pub fn run_benchmark(
    cfg: &BenchConfig,
    program: &Path,
    worker_args: impl Fn(&WorkerArgs, &Path) -> Vec<String>,
) -> Result<ScalingReport> {
    if cfg.steps < MIN_TIMED_STEPS {
        return Err(Error::Usage(format!(
            "--steps {} is below the minimum of {MIN_TIMED_STEPS}",
            cfg.steps
        )));
    }
    let mut sizes = cfg.np_list.clone();
    sizes.push(1);
    sizes.sort_unstable();
    sizes.dedup();
    if sizes.contains(&0) {
        return Err(Error::Usage("job sizes must be at least 1".into()));
    }

    let scratch = std::env::temp_dir().join(format!("ringweave-bench-{}", std::process::id()));
    std::fs::create_dir_all(&scratch)?;
    let result = (|| {
        let mut measured = Vec::new();
        for &fused in cfg.fusion.settings() {
            for &n in &sizes {
                let args = WorkerArgs {
                    tensor_bytes: cfg.tensor_bytes,
                    num_tensors: cfg.num_tensors,
                    steps: cfg.steps,
                    batch_per_rank: cfg.batch_per_rank,
                    fused,
                };
                let out = scratch.join(format!("n{n}-{}.json", if fused { "fused" } else { "unfused" }));
                measured.push(run_job(n, program, worker_args(&args, &out), fused, &out)?);
            }
        }
        ScalingReport::from_measurements(&measured)
    })();
    let _ = std::fs::remove_dir_all(&scratch);
    result
}

fn run_job(n: usize, program: &Path, args: Vec<String>, fused: bool, out: &PathBuf) -> Result<WorkerReport> {
    let mut lc = LaunchConfig::new(n, program.to_string_lossy());
    lc.program_args = args;
    lc.base_port = find_free_base_port(n)?;
    let fusion_bytes = if fused { DEFAULT_FUSION_BYTES } else { 0 };
    lc.env.push((ENV_FUSION_BYTES.into(), fusion_bytes.to_string()));
    let outcome = launch(&lc)?;
    if !outcome.success() {
        return Err(Error::Protocol(format!(
            "benchmark job with {n} ranks failed with exit code {}",
            outcome.exit_code
        )));
    }
    let raw = std::fs::read_to_string(out)?;
    serde_json::from_str(&raw).map_err(|e| Error::Protocol(format!("bad worker report {}: {e}", out.display())))
}
