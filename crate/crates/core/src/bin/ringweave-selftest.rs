//! Worker scenarios for end-to-end checks. Start under `ringrun`; each rank
//! writes `<out>/<scenario>.rank<r>.json` for the caller to cross-check.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use ringweave::collectives::{allreduce_tensor, broadcast_tensor};
use ringweave::runtime::{Config, DEFAULT_FUSION_BYTES};
use ringweave::train::{broadcast_initial_state, Dataset, DistributedSgd, Model, DATA_SEED};
use ringweave::{DType, ReduceOp, RingContext, Runtime, Tensor, TensorData};

#[derive(Parser, Debug)]
#[command(name = "ringweave-selftest")]
struct Cli {
    /// Directory for per-rank result files.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,

    #[command(subcommand)]
    scenario: Scenario,
}

#[derive(Subcommand, Debug)]
enum Scenario {
    /// Randomized allreduce/broadcast cases checked against a serial oracle.
    Oracle {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        cases: usize,
    },
    /// Many small tensors reduced fused and unfused.
    Fusion {
        #[arg(long, default_value = "f32")]
        dtype: String,
        #[arg(long, default_value_t = 1000)]
        tensors: usize,
        #[arg(long, default_value_t = 256)]
        elems: usize,
        #[arg(long, default_value_t = 3)]
        steps: usize,
    },
    /// Cycles of tensors submitted in a different order on every rank.
    Shuffle {
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        cycles: usize,
    },
    /// Sharded linear-regression training after a broadcast of rank 0's init.
    Train {
        #[arg(long, default_value_t = 100)]
        steps: usize,
        #[arg(long, default_value_t = 256)]
        samples: usize,
        #[arg(long, default_value_t = 8)]
        dim: usize,
        #[arg(long, default_value_t = 0.1)]
        lr: f64,
    },
    /// One rank exits 1; the others sleep until killed.
    Fail {
        #[arg(long, default_value_t = 1)]
        rank: usize,
    },
    /// Records the launcher-provided environment.
    Env,
}

/// Seed for a case-level stream, distinct per (seed, n, index, rank).
fn stream(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for p in parts {
        h.update(p.to_le_bytes());
    }
    let digest = h.finalize();
    ChaCha8Rng::seed_from_u64(u64::from_le_bytes(digest[..8].try_into().unwrap()))
}

fn hash_bytes(b: &[u8]) -> String {
    hex::encode(Sha256::digest(b))
}

/// Positive floats keep relative error meaningful; integers stay far from overflow.
fn random_data(rng: &mut ChaCha8Rng, dtype: DType, len: usize) -> TensorData {
    match dtype {
        DType::F32 => TensorData::F32((0..len).map(|_| rng.gen_range(0.5f32..2.0)).collect()),
        DType::F64 => TensorData::F64((0..len).map(|_| rng.gen_range(0.5f64..2.0)).collect()),
        DType::I32 => TensorData::I32((0..len).map(|_| rng.gen_range(-1000..=1000)).collect()),
        DType::I64 => TensorData::I64(
            (0..len)
                .map(|_| rng.gen_range(-1_000_000_000_000i64..=1_000_000_000_000))
                .collect(),
        ),
    }
}

fn as_f64(data: &TensorData) -> Vec<f64> {
    match data {
        TensorData::F32(v) => v.iter().map(|x| *x as f64).collect(),
        TensorData::F64(v) => v.clone(),
        TensorData::I32(v) => v.iter().map(|x| *x as f64).collect(),
        TensorData::I64(v) => v.iter().map(|x| *x as f64).collect(),
    }
}

fn max_rel_err(got: &[f64], want: &[f64]) -> f64 {
    got.iter()
        .zip(want)
        .map(|(g, w)| if *w == 0.0 { g.abs() } else { ((g - w) / w).abs() })
        .fold(0.0, f64::max)
}

fn write_result(out: &Path, scenario: &str, rank: usize, value: &impl Serialize) -> ringweave::Result<()> {
    std::fs::create_dir_all(out)?;
    let path = out.join(format!("{scenario}.rank{rank}.json"));
    std::fs::write(path, serde_json::to_string(value).expect("result serializes"))?;
    Ok(())
}

#[derive(Serialize)]
struct OracleCase {
    index: usize,
    kind: &'static str,
    dtype: String,
    len: usize,
    op: String,
    exact: bool,
    max_rel_err: f64,
    output_hash: String,
    chunk_frames_sent: u64,
    chunk_frames_received: u64,
    chunk_bytes_sent: u64,
    chunk_bytes_received: u64,
}

fn oracle(out: &Path, seed: u64, cases: usize) -> ringweave::Result<()> {
    let cfg = Config::from_env()?;
    let mut ctx = RingContext::init(&cfg)?;
    let n = ctx.size();
    let rank = ctx.rank();
    let lengths = [0, 1, 2, n - 1, n, n + 1, 1000, 100_000];
    let mut records = Vec::new();

    for index in 0..cases {
        let mut spec = stream(seed, &[n as u64, index as u64]);
        let dtype = DType::ALL[spec.gen_range(0..4)];
        let len = lengths[spec.gen_range(0..lengths.len())];
        let op = if dtype.is_float() && spec.gen_bool(0.5) {
            ReduceOp::Average
        } else {
            ReduceOp::Sum
        };
        let root = spec.gen_range(0..n);
        let inputs: Vec<Tensor> = (0..n)
            .map(|r| {
                let mut rng = stream(seed, &[n as u64, index as u64, r as u64]);
                Tensor::new(format!("case{index}"), random_data(&mut rng, dtype, len))
            })
            .collect::<ringweave::Result<_>>()?;

        let mut t = inputs[rank].clone();
        let before = ctx.snapshot_stats();
        allreduce_tensor(&mut ctx, &mut t, op, 2 * index as u64)?;
        let chunk = (ctx.snapshot_stats() - before).chunk();

        let (exact, err) = if dtype.is_float() {
            let mut want = ringweave::train::central_reduce_f64(&inputs)?;
            if op == ReduceOp::Average {
                want.iter_mut().for_each(|v| *v /= n as f64);
            }
            let got = as_f64(t.data());
            (got == want, max_rel_err(&got, &want))
        } else {
            let want = ringweave::train::central_reduce_oracle(&inputs)?;
            let exact = want.data() == t.data();
            (exact, if exact { 0.0 } else { f64::INFINITY })
        };
        records.push(OracleCase {
            index,
            kind: "allreduce",
            dtype: dtype.to_string(),
            len,
            op: format!("{op:?}"),
            exact,
            max_rel_err: err,
            output_hash: hash_bytes(t.data().as_bytes()),
            chunk_frames_sent: chunk.frames_sent,
            chunk_frames_received: chunk.frames_received,
            chunk_bytes_sent: chunk.payload_bytes_sent,
            chunk_bytes_received: chunk.payload_bytes_received,
        });

        if index % 4 == 0 {
            let mut b = inputs[rank].clone();
            broadcast_tensor(&mut ctx, &mut b, root, 2 * index as u64 + 1)?;
            let exact = b.data() == inputs[root].data();
            records.push(OracleCase {
                index,
                kind: "broadcast",
                dtype: dtype.to_string(),
                len,
                op: format!("root={root}"),
                exact,
                max_rel_err: if exact { 0.0 } else { f64::INFINITY },
                output_hash: hash_bytes(b.data().as_bytes()),
                chunk_frames_sent: 0,
                chunk_frames_received: 0,
                chunk_bytes_sent: 0,
                chunk_bytes_received: 0,
            });
        }
    }
    ctx.shutdown()?;
    write_result(out, "oracle", rank, &json!({ "n": n, "rank": rank, "cases": records }))
}

struct FusionPass {
    plans_per_step: Vec<usize>,
    outputs: Vec<Vec<Tensor>>,
    allocations: usize,
}

fn fusion_pass(cfg: Config, dtype: DType, tensors: usize, elems: usize, steps: usize) -> ringweave::Result<FusionPass> {
    let rt = Runtime::init_with_config(cfg)?;
    let op = if dtype.is_float() { ReduceOp::Average } else { ReduceOp::Sum };
    let mut plans_per_step = Vec::new();
    let mut outputs = Vec::new();
    for step in 0..steps {
        let batch = (0..tensors)
            .map(|i| {
                let mut rng = stream(7, &[step as u64, i as u64, rt.rank() as u64]);
                Tensor::new(format!("layer{i}/grad"), random_data(&mut rng, dtype, elems))
            })
            .collect::<ringweave::Result<Vec<_>>>()?;
        let before = rt.plan_log().len();
        let results = rt
            .submit_allreduce_group(batch, op)?
            .into_iter()
            .map(|t| t.wait())
            .collect::<ringweave::Result<Vec<_>>>()?;
        plans_per_step.push(rt.plan_log().len() - before);
        outputs.push(results);
    }
    let allocations = rt.fusion_buffer_allocations();
    rt.shutdown()?;
    Ok(FusionPass {
        plans_per_step,
        outputs,
        allocations,
    })
}

fn fusion(out: &Path, dtype: &str, tensors: usize, elems: usize, steps: usize) -> ringweave::Result<()> {
    let dtype = DType::ALL
        .into_iter()
        .find(|d| d.name() == dtype)
        .ok_or_else(|| ringweave::Error::Usage(format!("unknown dtype {dtype:?}")))?;
    let base = Config::from_env()?;
    let rank = base.rank;
    let fused = fusion_pass(
        Config {
            fusion_bytes: DEFAULT_FUSION_BYTES,
            ..base.clone()
        },
        dtype,
        tensors,
        elems,
        steps,
    )?;
    let unfused = fusion_pass(Config { fusion_bytes: 0, ..base }, dtype, tensors, elems, steps)?;

    let mut exact = true;
    let mut worst = 0.0f64;
    for (fs, us) in fused.outputs.iter().zip(&unfused.outputs) {
        for (f, u) in fs.iter().zip(us) {
            exact &= f.name() == u.name() && f.data() == u.data();
            worst = worst.max(max_rel_err(&as_f64(f.data()), &as_f64(u.data())));
        }
    }
    write_result(
        out,
        &format!("fusion-{dtype}"),
        rank,
        &json!({
            "rank": rank,
            "fused_plans_per_step": fused.plans_per_step,
            "unfused_plans_per_step": unfused.plans_per_step,
            "fused_buffer_allocations": fused.allocations,
            "exact": exact,
            "max_rel_err": worst,
        }),
    )
}

fn shuffle(out: &Path, seed: u64, cycles: usize) -> ringweave::Result<()> {
    let rt = Runtime::init()?;
    let (n, rank) = (rt.size(), rt.rank());
    let mut wrong = Vec::new();
    for cycle in 0..cycles {
        let mut plan = stream(seed, &[cycle as u64]);
        let count = plan.gen_range(1..=12);
        let mut items: Vec<(String, DType, usize, Option<usize>)> = (0..count)
            .map(|j| {
                let dtype = DType::ALL[plan.gen_range(0..4)];
                let len = plan.gen_range(0..3000);
                let root = plan.gen_bool(0.15).then(|| plan.gen_range(0..n));
                (format!("c{cycle}/t{j}"), dtype, len, root)
            })
            .collect();

        let mut mine = stream(seed, &[cycle as u64, rank as u64 + 1]);
        items.shuffle(&mut mine);
        let mut tokens = Vec::new();
        for (name, dtype, len, root) in items {
            let data = match dtype {
                DType::F32 => TensorData::F32(vec![(rank + 1) as f32; len]),
                DType::F64 => TensorData::F64(vec![(rank + 1) as f64; len]),
                DType::I32 => TensorData::I32(vec![(rank + 1) as i32; len]),
                DType::I64 => TensorData::I64(vec![(rank + 1) as i64; len]),
            };
            let t = Tensor::new(name, data)?;
            let expect = match root {
                Some(r) => (r + 1) as f64,
                None => (n * (n + 1) / 2) as f64,
            };
            let token = match root {
                Some(r) => rt.submit_broadcast(t, r)?,
                None => rt.submit_allreduce(t, ReduceOp::Sum)?,
            };
            tokens.push((token, expect));
            if mine.gen_bool(0.5) {
                std::thread::sleep(Duration::from_micros(mine.gen_range(0..4000)));
            }
        }
        for (token, expect) in tokens {
            let t = token.wait()?;
            if as_f64(t.data()).iter().any(|v| *v != expect) {
                wrong.push(t.name().to_string());
            }
        }
    }
    let plans = rt.plan_log().len();
    let hash = rt.plan_log_hash();
    rt.shutdown()?;
    write_result(
        out,
        "shuffle",
        rank,
        &json!({ "rank": rank, "plans": plans, "plan_log_hash": hash, "wrong": wrong }),
    )
}

fn train(out: &Path, steps: usize, samples: usize, dim: usize, lr: f64) -> ringweave::Result<()> {
    let rt = Runtime::init()?;
    let rank = rt.rank();
    let data = Dataset::synthetic(samples, dim, DATA_SEED);
    let shard = data.shard(rank, rt.size())?;
    let mut model = Model::random(dim, 1000 + rank as u64);
    let init_hash = model.param_hash();
    broadcast_initial_state(&rt, &mut model, 0)?;
    let synced_hash = model.param_hash();
    // Bit patterns, since decimal text does not always round-trip an f64.
    let synced: Vec<u64> = model.flat().iter().map(|v| v.to_bits()).collect();

    let opt = DistributedSgd::new(lr);
    let mut trajectory = Vec::with_capacity(steps);
    let mut hashes = Vec::with_capacity(steps);
    for _ in 0..steps {
        opt.step(&rt, &mut model, &shard)?;
        trajectory.push(model.flat());
        hashes.push(model.param_hash());
    }
    rt.shutdown()?;
    write_result(
        out,
        "train",
        rank,
        &json!({
            "rank": rank,
            "init_hash": init_hash,
            "synced_hash": synced_hash,
            "synced_bits": synced,
            "trajectory": trajectory,
            "hashes": hashes,
        }),
    )
}

fn env_snapshot(out: &Path) -> ringweave::Result<()> {
    let vars: serde_json::Map<String, Value> = std::env::vars()
        .filter(|(k, _)| k.starts_with("RINGWEAVE_"))
        .map(|(k, v)| (k, Value::String(v)))
        .collect();
    let rank: usize = std::env::var("RINGWEAVE_RANK")
        .ok()
        .and_then(|r| r.parse().ok())
        .unwrap_or(0);
    write_result(out, "env", rank, &vars)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.scenario {
        Scenario::Oracle { seed, cases } => oracle(&cli.out, seed, cases),
        Scenario::Fusion {
            dtype,
            tensors,
            elems,
            steps,
        } => fusion(&cli.out, &dtype, tensors, elems, steps),
        Scenario::Shuffle { seed, cycles } => shuffle(&cli.out, seed, cycles),
        Scenario::Train {
            steps,
            samples,
            dim,
            lr,
        } => train(&cli.out, steps, samples, dim, lr),
        Scenario::Fail { rank } => {
            let me: usize = std::env::var("RINGWEAVE_RANK")
                .ok()
                .and_then(|r| r.parse().ok())
                .unwrap_or(0);
            if me == rank {
                std::thread::sleep(Duration::from_millis(200));
                return ExitCode::FAILURE;
            }
            std::thread::sleep(Duration::from_secs(600));
            Ok(())
        }
        Scenario::Env => env_snapshot(&cli.out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ringweave-selftest: {e}");
            ExitCode::FAILURE
        }
    }
}
