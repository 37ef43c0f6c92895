//! Allreduce throughput and scaling efficiency over loopback.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ringweave::bench::{run_benchmark, run_worker, BenchConfig, FusionMode, WorkerArgs, MIN_TIMED_STEPS};
use ringweave::Runtime;

#[derive(Parser, Debug)]
#[command(name = "ringweave-bench", about = "Measure allreduce throughput and scaling efficiency")]
struct Cli {
    #[command(subcommand)]
    worker: Option<Worker>,

    /// Comma-separated job sizes. N=1 is always measured.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
    np_list: Vec<usize>,

    /// Bytes per synthetic gradient tensor (F32).
    #[arg(long, default_value_t = 1024)]
    tensor_bytes: usize,

    /// Gradient tensors submitted per step.
    #[arg(long, default_value_t = 100)]
    num_tensors: usize,

    /// Timed steps per run.
    #[arg(long, default_value_t = MIN_TIMED_STEPS)]
    steps: usize,

    /// on, off or both.
    #[arg(long, default_value = "both")]
    fusion: FusionMode,

    /// Samples credited to each rank per step.
    #[arg(long, default_value_t = 32)]
    batch: usize,

    /// Also write the report as CSV here.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Worker {
    /// One rank of a benchmark job; started by the orchestrator.
    #[command(hide = true)]
    Worker {
        #[arg(long)]
        tensor_bytes: usize,
        #[arg(long)]
        num_tensors: usize,
        #[arg(long)]
        steps: usize,
        #[arg(long)]
        batch: usize,
        #[arg(long)]
        fused: bool,
        #[arg(long)]
        out: PathBuf,
    },
}

fn worker(args: WorkerArgs, out: PathBuf) -> ringweave::Result<()> {
    let rt = Runtime::init()?;
    let report = run_worker(&rt, &args)?;
    rt.shutdown()?;
    if rt.rank() == 0 {
        let json = serde_json::to_string_pretty(&report).expect("report serializes");
        std::fs::write(out, json)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();

    if let Some(Worker::Worker {
        tensor_bytes,
        num_tensors,
        steps,
        batch,
        fused,
        out,
    }) = cli.worker
    {
        let args = WorkerArgs {
            tensor_bytes,
            num_tensors,
            steps,
            batch_per_rank: batch,
            fused,
        };
        return match worker(args, out) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("ringweave-bench worker: {e}");
                ExitCode::FAILURE
            }
        };
    }

    let cfg = BenchConfig {
        np_list: cli.np_list,
        tensor_bytes: cli.tensor_bytes,
        num_tensors: cli.num_tensors,
        steps: cli.steps,
        fusion: cli.fusion,
        batch_per_rank: cli.batch,
    };
    let exe = match std::env::current_exe() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("ringweave-bench: cannot locate own executable: {e}");
            return ExitCode::FAILURE;
        }
    };
    let worker_args = |a: &WorkerArgs, out: &std::path::Path| {
        let mut v = vec![
            "worker".to_string(),
            format!("--tensor-bytes={}", a.tensor_bytes),
            format!("--num-tensors={}", a.num_tensors),
            format!("--steps={}", a.steps),
            format!("--batch={}", a.batch_per_rank),
            format!("--out={}", out.display()),
        ];
        if a.fused {
            v.push("--fused".into());
        }
        v
    };
    let report = match run_benchmark(&cfg, &exe, worker_args) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("ringweave-bench: {e}");
            return ExitCode::FAILURE;
        }
    };
    print!("{}", report.table());
    if let Some(path) = cli.csv {
        if let Err(e) = std::fs::write(&path, report.to_csv()) {
            eprintln!("ringweave-bench: cannot write {}: {e}", path.display());
            return ExitCode::FAILURE;
        }
    }
    ExitCode::SUCCESS
}
