use std::time::Duration;

use ringweave::runtime::{local_ring, Config};
use ringweave::{Error, ReduceOp, Runtime, Tensor};

/// Runs `f` once per rank of an `n`-rank job, each with its own runtime.
fn with_runtimes<R: Send>(
    n: usize,
    tweak: impl Fn(&mut Config) + Sync,
    f: impl Fn(&Runtime) -> ringweave::Result<R> + Sync,
) -> Vec<R> {
    let ring = local_ring(n).unwrap();
    std::thread::scope(|s| {
        let handles: Vec<_> = ring
            .into_iter()
            .map(|(mut cfg, l)| {
                tweak(&mut cfg);
                let f = &f;
                s.spawn(move || {
                    let rt = Runtime::init_with_listener(cfg, l)?;
                    let out = f(&rt)?;
                    rt.shutdown()?;
                    Ok::<_, Error>(out)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap().unwrap()).collect()
    })
}

#[test]
fn single_rank_tokens_resolve_to_input() {
    let rt = Runtime::init_with_config(Config::single()).unwrap();
    let t = Tensor::new("g", vec![1.5f64, -2.0]).unwrap();
    assert_eq!(rt.allreduce(t.clone(), ReduceOp::Average).unwrap(), t);
    let i = Tensor::new("i", vec![3i32]).unwrap();
    assert_eq!(rt.allreduce(i.clone(), ReduceOp::Sum).unwrap(), i);
    assert_eq!(rt.broadcast(t.clone(), 0).unwrap(), t);
    rt.shutdown().unwrap();
}

#[test]
fn fused_results_equal_standalone_results() {
    let n = 3;
    let make = |rank: usize| -> Vec<Tensor> {
        (0..40)
            .map(|i| Tensor::new(format!("t{i}"), vec![(rank * 100 + i) as i64; 17 + i]).unwrap())
            .collect()
    };
    let run = |fusion_bytes: usize| {
        with_runtimes(
            n,
            |c| c.fusion_bytes = fusion_bytes,
            |rt| {
                let before = rt.plan_log().len();
                let out = rt
                    .submit_allreduce_group(make(rt.rank()), ReduceOp::Sum)?
                    .into_iter()
                    .map(|t| t.wait())
                    .collect::<ringweave::Result<Vec<_>>>()?;
                Ok((out, rt.plan_log().len() - before, rt.fusion_buffer_allocations()))
            },
        )
    };
    let fused = run(1 << 20);
    let unfused = run(0);
    for ((f, fp, fa), (u, up, ua)) in fused.iter().zip(&unfused) {
        assert_eq!(f, u);
        assert_eq!(*fp, 1);
        assert_eq!(*up, 40);
        assert_eq!(*fa, 1);
        assert_eq!(*ua, 0);
    }
    for (i, t) in fused[0].0.iter().enumerate() {
        let want = (0..n).map(|r| (r * 100 + i) as i64).sum::<i64>();
        assert!(t.as_slice::<i64>().unwrap().iter().all(|v| *v == want));
    }
}

#[test]
fn small_fusion_buffer_splits_plans_and_allocates_once() {
    // 10 tensors of 64 f32 = 256 B each into a 1 KiB buffer: 3 plans of ≤ 4.
    let outs = with_runtimes(
        2,
        |c| c.fusion_bytes = 1024,
        |rt| {
            for step in 0..3 {
                let batch = (0..10)
                    .map(|i| Tensor::new(format!("s{step}/{i}"), vec![1.0f32; 64]).unwrap())
                    .collect();
                for t in rt.submit_allreduce_group(batch, ReduceOp::Sum)? {
                    assert_eq!(t.wait()?.as_slice::<f32>().unwrap(), &[2.0; 64]);
                }
            }
            Ok((rt.plan_log(), rt.fusion_buffer_allocations()))
        },
    );
    let (log, allocs) = &outs[0];
    assert_eq!(log.len(), 9);
    assert!(log.iter().all(|p| p.names.len() <= 4));
    assert_eq!(*allocs, 1);
    assert_eq!(outs[0].0, outs[1].0);
}

#[test]
fn dtype_boundaries_split_fused_groups() {
    let outs = with_runtimes(
        2,
        |_| {},
        |rt| {
            let a = rt.submit_allreduce(Tensor::new("a", vec![1.0f32; 4])?, ReduceOp::Sum)?;
            let b = rt.submit_allreduce(Tensor::new("b", vec![1.0f64; 4])?, ReduceOp::Sum)?;
            let c = rt.submit_allreduce(Tensor::new("c", vec![1.0f64; 4])?, ReduceOp::Average)?;
            a.wait()?;
            b.wait()?;
            c.wait()?;
            Ok(rt.plan_log())
        },
    );
    let plans: usize = outs[0].len();
    assert!(plans >= 3, "different dtypes/ops never share a plan: {:?}", outs[0]);
    assert_eq!(outs[0], outs[1]);
}

#[test]
fn broadcast_then_allreduce_in_submission_order() {
    let outs = with_runtimes(
        4,
        |_| {},
        |rt| {
            let w = Tensor::new("w", vec![rt.rank() as f64 + 10.0; 8])?;
            let w = rt.broadcast(w, 2)?;
            let g = rt.allreduce(w.clone(), ReduceOp::Average)?;
            Ok((w, g))
        },
    );
    for (w, g) in outs {
        assert_eq!(w.as_slice::<f64>().unwrap(), &[12.0; 8]);
        assert_eq!(g.as_slice::<f64>().unwrap(), &[12.0; 8]);
    }
}

#[test]
fn ranks_submitting_at_different_times_still_agree() {
    let outs = with_runtimes(
        3,
        |_| {},
        |rt| {
            std::thread::sleep(Duration::from_millis(30 * rt.rank() as u64));
            let mut tokens = Vec::new();
            let order: Vec<usize> = match rt.rank() {
                0 => (0..8).collect(),
                1 => (0..8).rev().collect(),
                _ => vec![3, 1, 7, 5, 0, 2, 6, 4],
            };
            for i in order {
                tokens.push(rt.submit_allreduce(Tensor::new(format!("t{i}"), vec![i as i32; 5])?, ReduceOp::Sum)?);
                std::thread::sleep(Duration::from_millis(2));
            }
            for t in tokens {
                let name = t.name().to_string();
                let i: i32 = name[1..].parse().unwrap();
                assert_eq!(t.wait()?.as_slice::<i32>().unwrap(), &[3 * i; 5]);
            }
            Ok(rt.plan_log_hash())
        },
    );
    assert!(outs.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn duplicate_in_flight_name_is_usage_error() {
    let rt = Runtime::init_with_config(Config {
        cycle: Duration::from_millis(200),
        ..Config::single()
    })
    .unwrap();
    let first = rt.submit_allreduce(Tensor::new("g", vec![1.0f32]).unwrap(), ReduceOp::Sum).unwrap();
    let dup = rt.submit_allreduce(Tensor::new("g", vec![2.0f32]).unwrap(), ReduceOp::Sum);
    assert!(matches!(dup, Err(Error::Usage(_))));
    first.wait().unwrap();
    // Once resolved the name is free again.
    rt.allreduce(Tensor::new("g", vec![3.0f32]).unwrap(), ReduceOp::Sum).unwrap();
    let both = rt.submit_allreduce_group(
        vec![Tensor::new("x", vec![1i32]).unwrap(), Tensor::new("x", vec![1i32]).unwrap()],
        ReduceOp::Sum,
    );
    assert!(matches!(both, Err(Error::Usage(_))));
    rt.shutdown().unwrap();
}

#[test]
fn invalid_submissions_rejected_up_front() {
    let rt = Runtime::init_with_config(Config::single()).unwrap();
    let avg_int = rt.submit_allreduce(Tensor::new("i", vec![1i64]).unwrap(), ReduceOp::Average);
    assert!(matches!(avg_int, Err(Error::Unsupported(_))));
    let bad_root = rt.submit_broadcast(Tensor::new("b", vec![1i64]).unwrap(), 1);
    assert!(matches!(bad_root, Err(Error::Usage(_))));
    rt.shutdown().unwrap();
}

#[test]
fn shutdown_is_idempotent_and_closes_submission() {
    let rt = Runtime::init_with_config(Config::single()).unwrap();
    rt.shutdown().unwrap();
    rt.shutdown().unwrap();
    let late = rt.submit_allreduce(Tensor::new("late", vec![1.0f32]).unwrap(), ReduceOp::Sum);
    assert!(matches!(late, Err(Error::Closed)));
}

#[test]
fn shutdown_waits_for_every_rank() {
    let outs = with_runtimes(
        3,
        |_| {},
        |rt| {
            // Rank 2 keeps working while the others have already asked to stop.
            if rt.rank() == 2 {
                std::thread::sleep(Duration::from_millis(100));
            }
            rt.allreduce(Tensor::new("last", vec![1i32; 3])?, ReduceOp::Sum)
        },
    );
    for t in outs {
        assert_eq!(t.as_slice::<i32>().unwrap(), &[3; 3]);
    }
}

#[test]
fn dropped_peer_surfaces_an_error() {
    let ring = local_ring(2).unwrap();
    let mut it = ring.into_iter();
    let (c0, l0) = it.next().unwrap();
    let (c1, l1) = it.next().unwrap();
    let quitter = std::thread::spawn(move || {
        let rt = Runtime::init_with_listener(c1, l1).unwrap();
        drop(rt);
    });
    let rt = Runtime::init_with_listener(c0, l0).unwrap();
    quitter.join().unwrap();
    let r = rt.allreduce(Tensor::new("x", vec![1.0f64]).unwrap(), ReduceOp::Sum);
    assert!(r.is_err());
    let _ = rt.shutdown();
}
