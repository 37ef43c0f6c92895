//! Data-parallel SGD on a linear-regression model.
//!
//! Every rank holds a full copy of the model and an equal-sized shard of the
//! data. A step computes the local gradient, averages it across ranks with one
//! grouped allreduce and applies the same update everywhere, so parameters stay
//! bitwise identical without ever being exchanged again after the initial
//! broadcast.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::collectives::ReduceOp;
use crate::error::{Error, Result};
use crate::fusion::Runtime;
use crate::tensor::{DType, Element, Tensor, TensorData};

pub const WEIGHT_NAME: &str = "linear/w";
pub const BIAS_NAME: &str = "linear/b";

/// Seed of the synthetic regression problem shipped with the harness.
pub const DATA_SEED: u64 = 0x5EED_2017;

/// Row-major design matrix plus targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dim: usize,
    x: Vec<f64>,
    y: Vec<f64>,
}

impl Dataset {
    pub fn new(dim: usize, x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if dim == 0 || x.len() != y.len() * dim {
            return Err(Error::Usage(format!(
                "{} features do not form {} rows of width {dim}",
                x.len(),
                y.len()
            )));
        }
        Ok(Dataset { dim, x, y })
    }

    /// `y = w*·x + b* + noise` with features in [-1, 1) and noise in [-0.1, 0.1).
    pub fn synthetic(samples: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let true_w: Vec<f64> = (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let true_b: f64 = rng.gen_range(-1.0..1.0);
        let mut x = Vec::with_capacity(samples * dim);
        let mut y = Vec::with_capacity(samples);
        for _ in 0..samples {
            let row: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let target = row.iter().zip(&true_w).map(|(a, w)| a * w).sum::<f64>()
                + true_b
                + rng.gen_range(-0.1..0.1);
            x.extend_from_slice(&row);
            y.push(target);
        }
        Dataset { dim, x, y }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }

    pub fn target(&self, i: usize) -> f64 {
        self.y[i]
    }

    /// Contiguous shard `rank` of `size`. The sample count must divide evenly.
    pub fn shard(&self, rank: usize, size: usize) -> Result<Dataset> {
        if size == 0 || rank >= size || !self.len().is_multiple_of(size) {
            return Err(Error::Usage(format!(
                "cannot cut {} samples into {size} equal shards (rank {rank})",
                self.len()
            )));
        }
        let per = self.len() / size;
        let rows = rank * per..(rank + 1) * per;
        Ok(Dataset {
            dim: self.dim,
            x: self.x[rows.start * self.dim..rows.end * self.dim].to_vec(),
            y: self.y[rows].to_vec(),
        })
    }

    /// Largest eigenvalue of the loss Hessian `(1/n)·[X 1]ᵀ[X 1]`, by power
    /// iteration. Gradient descent with `lr < 1/L` never increases the loss.
    pub fn lipschitz_constant(&self) -> f64 {
        let d = self.dim + 1;
        let n = self.len().max(1) as f64;
        let mut h = vec![0.0; d * d];
        for i in 0..self.len() {
            let row = self.row(i);
            for a in 0..d {
                let xa = row.get(a).copied().unwrap_or(1.0);
                for b in 0..d {
                    h[a * d + b] += xa * row.get(b).copied().unwrap_or(1.0) / n;
                }
            }
        }
        let mut v = vec![1.0; d];
        let mut lambda = 0.0;
        for _ in 0..500 {
            let hv: Vec<f64> = (0..d)
                .map(|a| (0..d).map(|b| h[a * d + b] * v[b]).sum())
                .collect();
            let norm = hv.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return 0.0;
            }
            let next = norm / v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v = hv.into_iter().map(|x| x / norm).collect();
            if (next - lambda).abs() <= 1e-12 * next {
                return next;
            }
            lambda = next;
        }
        lambda
    }
}

/// Linear regression `ŷ = w·x + b` with loss `(1/2n)·Σ(ŷ − y)²`.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    params: Vec<Tensor>,
}

impl Model {
    pub fn zeros(dim: usize) -> Self {
        Self::from_values(vec![0.0; dim], 0.0)
    }

    pub fn random(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Self::from_values(w, rng.gen_range(-1.0..1.0))
    }

    pub fn from_values(w: Vec<f64>, b: f64) -> Self {
        Model {
            params: vec![
                Tensor::new(WEIGHT_NAME, w).expect("constant name"),
                Tensor::new(BIAS_NAME, vec![b]).expect("constant name"),
            ],
        }
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn weights(&self) -> &[f64] {
        self.params[0].as_slice().unwrap()
    }

    pub fn bias(&self) -> f64 {
        self.params[1].as_slice::<f64>().unwrap()[0]
    }

    /// All parameters flattened as `[w..., b]`.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = self.weights().to_vec();
        out.push(self.bias());
        out
    }

    fn residual(&self, data: &Dataset, i: usize) -> f64 {
        let w = self.weights();
        data.row(i).iter().zip(w).map(|(a, w)| a * w).sum::<f64>() + self.bias() - data.target(i)
    }

    pub fn loss(&self, data: &Dataset) -> f64 {
        let n = data.len().max(1) as f64;
        (0..data.len()).map(|i| self.residual(data, i).powi(2)).sum::<f64>() / (2.0 * n)
    }

    /// Mean gradient over `data`, as tensors named like the parameters.
    pub fn gradient(&self, data: &Dataset) -> Vec<Tensor> {
        let mut gw = vec![0.0; data.dim()];
        let mut gb = 0.0;
        for i in 0..data.len() {
            let r = self.residual(data, i);
            for (g, a) in gw.iter_mut().zip(data.row(i)) {
                *g += r * a;
            }
            gb += r;
        }
        let n = data.len().max(1) as f64;
        gw.iter_mut().for_each(|g| *g /= n);
        vec![
            Tensor::new(WEIGHT_NAME, gw).expect("constant name"),
            Tensor::new(BIAS_NAME, vec![gb / n]).expect("constant name"),
        ]
    }

    /// `p ← p − lr·g` for every parameter, matched by name.
    pub fn apply(&mut self, grads: &[Tensor], lr: f64) -> Result<()> {
        for p in &mut self.params {
            let g = grads
                .iter()
                .find(|g| g.name() == p.name())
                .ok_or_else(|| Error::Usage(format!("no gradient for {}", p.name())))?;
            let gv = g
                .as_slice::<f64>()
                .filter(|gv| gv.len() == p.len())
                .ok_or_else(|| Error::Usage(format!("gradient for {} has the wrong shape", p.name())))?;
            for (pv, gv) in p.as_mut_slice::<f64>().unwrap().iter_mut().zip(gv) {
                *pv -= lr * gv;
            }
        }
        Ok(())
    }

    /// Hex SHA-256 over parameter names and raw bytes.
    pub fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name().as_bytes());
            h.update(p.data().as_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// One synchronous data-parallel step: local gradient, cross-rank average, update.
pub fn distributed_step(rt: &Runtime, model: &mut Model, shard: &Dataset, lr: f64) -> Result<()> {
    let tokens = rt.submit_allreduce_group(model.gradient(shard), ReduceOp::Average)?;
    let averaged = tokens
        .into_iter()
        .map(|t| t.wait())
        .collect::<Result<Vec<_>>>()?;
    model.apply(&averaged, lr)
}

/// Plain SGD whose gradients are averaged across ranks before being applied.
#[derive(Debug, Clone, Copy)]
pub struct DistributedSgd {
    pub lr: f64,
}

impl DistributedSgd {
    pub fn new(lr: f64) -> Self {
        DistributedSgd { lr }
    }

    pub fn step(&self, rt: &Runtime, model: &mut Model, shard: &Dataset) -> Result<()> {
        distributed_step(rt, model, shard, self.lr)
    }
}

/// Overwrites every rank's parameters with `root`'s.
pub fn broadcast_initial_state(rt: &Runtime, model: &mut Model, root: usize) -> Result<()> {
    let tokens = model
        .params
        .iter()
        .map(|p| rt.submit_broadcast(p.clone(), root))
        .collect::<Result<Vec<_>>>()?;
    for (slot, token) in model.params.iter_mut().zip(tokens) {
        *slot = token.wait()?;
    }
    Ok(())
}

/// Single-process full-batch gradient descent. Returns the parameters after
/// every step, starting from `model`'s state before the first one.
pub fn train_full_batch(mut model: Model, data: &Dataset, lr: f64, steps: usize) -> Vec<Vec<f64>> {
    let mut trajectory = Vec::with_capacity(steps);
    for _ in 0..steps {
        let g = model.gradient(data);
        model.apply(&g, lr).expect("gradient matches model");
        trajectory.push(model.flat());
    }
    trajectory
}

/// Elementwise sum of `inputs`, folded left to right in `f64` for float dtypes.
pub fn central_reduce_f64(inputs: &[Tensor]) -> Result<Vec<f64>> {
    check_uniform(inputs)?;
    let mut acc = vec![0.0f64; inputs[0].len()];
    for t in inputs {
        match t.data() {
            TensorData::F32(v) => acc.iter_mut().zip(v).for_each(|(a, x)| *a += *x as f64),
            TensorData::F64(v) => acc.iter_mut().zip(v).for_each(|(a, x)| *a += x),
            TensorData::I32(v) => acc.iter_mut().zip(v).for_each(|(a, x)| *a += *x as f64),
            TensorData::I64(v) => acc.iter_mut().zip(v).for_each(|(a, x)| *a += *x as f64),
        }
    }
    Ok(acc)
}

/// Serial stand-in for a parameter server: the elementwise sum of `inputs`.
/// Integers add natively; floats accumulate in `f64` and round once at the end.
pub fn central_reduce_oracle(inputs: &[Tensor]) -> Result<Tensor> {
    check_uniform(inputs)?;
    let first = &inputs[0];
    let data = match first.dtype() {
        DType::F32 => TensorData::F32(central_reduce_f64(inputs)?.into_iter().map(|v| v as f32).collect()),
        DType::F64 => TensorData::F64(central_reduce_f64(inputs)?),
        DType::I32 => TensorData::I32(fold_native::<i32>(inputs)),
        DType::I64 => TensorData::I64(fold_native::<i64>(inputs)),
    };
    Tensor::new(first.name(), data)
}

fn fold_native<T: Element>(inputs: &[Tensor]) -> Vec<T> {
    let mut acc = inputs[0].as_slice::<T>().unwrap().to_vec();
    for t in &inputs[1..] {
        for (a, x) in acc.iter_mut().zip(t.as_slice::<T>().unwrap()) {
            *a = a.add(*x);
        }
    }
    acc
}

fn check_uniform(inputs: &[Tensor]) -> Result<()> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::Usage("central reduce needs at least one input".into()))?;
    for t in inputs {
        if t.dtype() != first.dtype() || t.len() != first.len() {
            return Err(Error::Usage(format!(
                "central reduce over {} x {} and {} x {}",
                first.dtype(),
                first.len(),
                t.dtype(),
                t.len()
            )));
        }
    }
    Ok(())
}
