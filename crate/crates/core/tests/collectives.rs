use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ringweave::collectives::{allreduce_tensor, broadcast_tensor};
use ringweave::runtime::with_local_ring;
use ringweave::train::{central_reduce_f64, central_reduce_oracle};
use ringweave::{ring_allreduce, DType, ReduceOp, Tensor, TensorData};

fn inputs(seed: u64, n: usize, dtype: DType, len: usize) -> Vec<Tensor> {
    (0..n)
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed * 1000 + r as u64);
            let data = match dtype {
                DType::F32 => TensorData::F32((0..len).map(|_| rng.gen_range(0.5..2.0)).collect()),
                DType::F64 => TensorData::F64((0..len).map(|_| rng.gen_range(0.5..2.0)).collect()),
                DType::I32 => TensorData::I32((0..len).map(|_| rng.gen_range(-500..500)).collect()),
                DType::I64 => TensorData::I64((0..len).map(|_| rng.gen_range(-500..500)).collect()),
            };
            Tensor::new("x", data).unwrap()
        })
        .collect()
}

#[test]
fn integer_sum_matches_oracle_exactly() {
    for n in [2, 3, 5, 8] {
        for (k, dtype) in [DType::I32, DType::I64].into_iter().enumerate() {
            for len in [0, 1, n - 1, n, n + 1, 997] {
                let ins = inputs((n * 10 + k) as u64, n, dtype, len);
                let want = central_reduce_oracle(&ins).unwrap();
                let outs = with_local_ring(n, |mut ctx| {
                    let mut t = ins[ctx.rank()].clone();
                    allreduce_tensor(&mut ctx, &mut t, ReduceOp::Sum, 1)?;
                    ctx.shutdown()?;
                    Ok(t)
                });
                for out in outs {
                    assert_eq!(out.unwrap(), want, "n={n} {dtype} len={len}");
                }
            }
        }
    }
}

#[test]
fn float_average_within_tolerance() {
    let n = 6;
    for (dtype, tol) in [(DType::F32, 1e-5), (DType::F64, 1e-12)] {
        let ins = inputs(42, n, dtype, 5000);
        let want: Vec<f64> = central_reduce_f64(&ins).unwrap().iter().map(|v| v / n as f64).collect();
        let outs = with_local_ring(n, |mut ctx| {
            let mut t = ins[ctx.rank()].clone();
            allreduce_tensor(&mut ctx, &mut t, ReduceOp::Average, 9)?;
            Ok(t)
        });
        let outs: Vec<Tensor> = outs.into_iter().map(Result::unwrap).collect();
        for out in &outs {
            let got: Vec<f64> = match out.data() {
                TensorData::F32(v) => v.iter().map(|x| *x as f64).collect(),
                TensorData::F64(v) => v.clone(),
                _ => unreachable!(),
            };
            for (g, w) in got.iter().zip(&want) {
                assert!(((g - w) / w).abs() <= tol, "{dtype}: {g} vs {w}");
            }
        }
        // Every rank ends with the same bytes.
        assert!(outs.windows(2).all(|w| w[0].data().as_bytes() == w[1].data().as_bytes()));
    }
}

#[test]
fn chunk_frames_and_bytes_per_rank() {
    for n in [2, 3, 4, 8] {
        let len = 1001;
        let width = 4u64;
        let outs = with_local_ring(n, |mut ctx| {
            let mut buf = vec![1i32; len];
            let before = ctx.snapshot_stats();
            ring_allreduce(&mut ctx, &mut buf, ReduceOp::Sum, 3)?;
            Ok((ctx.snapshot_stats() - before).chunk())
        });
        let stats: Vec<_> = outs.into_iter().map(Result::unwrap).collect();
        let b = len as u64 * width;
        let steps = 2 * (n as u64 - 1);
        for s in &stats {
            assert_eq!(s.frames_sent, steps, "n={n}");
            assert_eq!(s.frames_received, steps, "n={n}");
            let bound = steps as f64 / n as f64 * b as f64 + (steps * width) as f64;
            assert!(s.payload_bytes_sent as f64 <= bound, "n={n}: {} > {bound}", s.payload_bytes_sent);
        }
        // Across the ring every chunk travels N−1 hops in each phase.
        assert_eq!(stats.iter().map(|s| s.payload_bytes_sent).sum::<u64>(), steps * b);
        assert_eq!(
            stats.iter().map(|s| s.payload_bytes_received).sum::<u64>(),
            stats.iter().map(|s| s.payload_bytes_sent).sum::<u64>()
        );
    }
}

#[test]
fn broadcast_from_every_root() {
    let n = 5;
    for root in 0..n {
        let ins = inputs(root as u64, n, DType::F64, 123);
        let outs = with_local_ring(n, |mut ctx| {
            let mut t = ins[ctx.rank()].clone();
            broadcast_tensor(&mut ctx, &mut t, root, 0)?;
            Ok(t)
        });
        for out in outs {
            assert_eq!(out.unwrap().data(), ins[root].data());
        }
    }
}

#[test]
fn back_to_back_mixed_collectives() {
    let n = 4;
    let outs = with_local_ring(n, |mut ctx| {
        let r = ctx.rank() as i64;
        let mut a = Tensor::new("a", vec![r; 10])?;
        let mut b = Tensor::new("b", vec![r as f32 + 0.5; 3])?;
        let mut c = Tensor::new("c", vec![r * 7; 2])?;
        allreduce_tensor(&mut ctx, &mut a, ReduceOp::Sum, 1)?;
        broadcast_tensor(&mut ctx, &mut c, 2, 2)?;
        allreduce_tensor(&mut ctx, &mut b, ReduceOp::Average, 3)?;
        ctx.shutdown()?;
        Ok((a, b, c))
    });
    for out in outs {
        let (a, b, c) = out.unwrap();
        assert_eq!(a.as_slice::<i64>().unwrap(), &[6; 10]);
        assert_eq!(b.as_slice::<f32>().unwrap(), &[2.0; 3]);
        assert_eq!(c.as_slice::<i64>().unwrap(), &[14; 2]);
    }
}
