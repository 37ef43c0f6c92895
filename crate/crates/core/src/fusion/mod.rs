//! Tensor submission, cross-rank negotiation and fused execution.
//!
//! Application threads hand tensors to a [`Runtime`] and get back a
//! [`CompletionToken`]. A background progress loop wakes every cycle, agrees
//! with the other ranks on which tensors everyone has submitted, packs them
//! into [`FusionPlan`]s and runs the collectives. Only that loop touches the
//! ring links.

mod plan;
mod progress;

use std::collections::HashSet;
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{mpsc, Arc, Mutex};
use std::thread::JoinHandle;

use sha2::{Digest, Sha256};

pub use plan::{
    coordinate, decode_plans, decode_ready, encode_plans, encode_ready, CollectiveKind,
    CycleDecision, FusionPlan, PlanMember, ReadyReport, TensorMeta, OP_AVERAGE, OP_BROADCAST,
    OP_SUM,
};
pub use progress::FusionBuffer;

use crate::collectives::ReduceOp;
use crate::error::{Error, Result};
use crate::runtime::{Config, RingContext};
use crate::tensor::Tensor;
use crate::transport::{LinkCounters, StatsSnapshot};
use progress::{Command, Pending, ProgressLoop};

/// One executed collective as seen by this rank.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlanRecord {
    pub collective_id: u64,
    pub names: Vec<String>,
}

/// Digest of a plan log; equal on every rank of a healthy job.
pub fn plan_log_hash(log: &[PlanRecord]) -> String {
    let mut h = Sha256::new();
    for r in log {
        h.update(r.collective_id.to_le_bytes());
        h.update((r.names.len() as u64).to_le_bytes());
        for n in &r.names {
            h.update((n.len() as u64).to_le_bytes());
            h.update(n.as_bytes());
        }
    }
    hex::encode(h.finalize())
}

#[derive(Default)]
struct State {
    closed: bool,
    failure: Option<Error>,
}

pub(crate) struct Shared {
    rank: usize,
    size: usize,
    local_rank: usize,
    counters: Arc<LinkCounters>,
    plan_log: Mutex<Vec<PlanRecord>>,
    in_flight: Mutex<HashSet<String>>,
    state: Mutex<State>,
    fusion_allocations: AtomicUsize,
}

impl Shared {
    fn set_failure(&self, e: Error) {
        self.state.lock().unwrap().failure.get_or_insert(e);
    }

    fn mark_closed(&self) {
        self.state.lock().unwrap().closed = true;
    }
}

/// Resolves once the submitted tensor's collective has completed.
#[derive(Debug)]
pub struct CompletionToken {
    name: String,
    rx: mpsc::Receiver<Result<Tensor>>,
}

impl CompletionToken {
    pub fn name(&self) -> &str {
        &self.name
    }

    /// Blocks until the result is ready and hands the tensor back.
    pub fn wait(self) -> Result<Tensor> {
        self.rx.recv().unwrap_or(Err(Error::Closed))
    }

    /// Non-blocking poll. `Ok(Err(self))` means not ready yet.
    pub fn try_wait(self) -> std::result::Result<Result<Tensor>, Self> {
        match self.rx.try_recv() {
            Ok(r) => Ok(r),
            Err(mpsc::TryRecvError::Empty) => Err(self),
            Err(mpsc::TryRecvError::Disconnected) => Ok(Err(Error::Closed)),
        }
    }
}

/// Handle to an initialized process: identity plus the tensor submission API.
pub struct Runtime {
    shared: Arc<Shared>,
    tx: Mutex<Option<mpsc::Sender<Command>>>,
    worker: Mutex<Option<JoinHandle<Result<()>>>>,
}

impl std::fmt::Debug for Runtime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Runtime")
            .field("rank", &self.shared.rank)
            .field("size", &self.shared.size)
            .finish()
    }
}

impl Runtime {
    /// Reads `RINGWEAVE_*` from the environment, joins the ring and starts the progress loop.
    pub fn init() -> Result<Self> {
        Self::init_with_config(Config::from_env()?)
    }

    pub fn init_with_config(cfg: Config) -> Result<Self> {
        let ctx = RingContext::init(&cfg)?;
        Ok(Self::start(ctx, cfg))
    }

    pub fn init_with_listener(cfg: Config, listener: TcpListener) -> Result<Self> {
        let ctx = RingContext::init_with_listener(&cfg, listener)?;
        Ok(Self::start(ctx, cfg))
    }

    fn start(ctx: RingContext, cfg: Config) -> Self {
        let shared = Arc::new(Shared {
            rank: ctx.rank(),
            size: ctx.size(),
            local_rank: ctx.local_rank(),
            counters: ctx.counters(),
            plan_log: Mutex::new(Vec::new()),
            in_flight: Mutex::new(HashSet::new()),
            state: Mutex::new(State::default()),
            fusion_allocations: AtomicUsize::new(0),
        });
        let (tx, rx) = mpsc::channel();
        let lp = ProgressLoop::new(ctx, cfg, Arc::clone(&shared), rx);
        let worker = std::thread::Builder::new()
            .name(format!("ringweave-progress-{}", shared.rank))
            .spawn(move || lp.run())
            .expect("failed to spawn progress loop");
        Runtime {
            shared,
            tx: Mutex::new(Some(tx)),
            worker: Mutex::new(Some(worker)),
        }
    }

    pub fn rank(&self) -> usize {
        self.shared.rank
    }

    pub fn size(&self) -> usize {
        self.shared.size
    }

    pub fn local_rank(&self) -> usize {
        self.shared.local_rank
    }

    pub fn link_stats(&self) -> StatsSnapshot {
        self.shared.counters.snapshot()
    }

    pub fn reset_link_stats(&self) {
        self.shared.counters.reset()
    }

    pub fn plan_log(&self) -> Vec<PlanRecord> {
        self.shared.plan_log.lock().unwrap().clone()
    }

    pub fn plan_log_hash(&self) -> String {
        plan_log_hash(&self.shared.plan_log.lock().unwrap())
    }

    /// How many times the fusion buffer has been allocated (0 or 1).
    pub fn fusion_buffer_allocations(&self) -> usize {
        self.shared.fusion_allocations.load(Ordering::Relaxed)
    }

    pub fn submit_allreduce(&self, tensor: Tensor, op: ReduceOp) -> Result<CompletionToken> {
        Ok(self
            .submit(vec![(tensor, CollectiveKind::Allreduce(op))])?
            .pop()
            .unwrap())
    }

    /// Submits several tensors atomically: the progress loop sees all or none of
    /// them in a given cycle, so a group that fits the fusion buffer on every
    /// rank always becomes one fused collective.
    pub fn submit_allreduce_group(
        &self,
        tensors: Vec<Tensor>,
        op: ReduceOp,
    ) -> Result<Vec<CompletionToken>> {
        self.submit(
            tensors
                .into_iter()
                .map(|t| (t, CollectiveKind::Allreduce(op)))
                .collect(),
        )
    }

    pub fn submit_broadcast(&self, tensor: Tensor, root: usize) -> Result<CompletionToken> {
        Ok(self
            .submit(vec![(tensor, CollectiveKind::Broadcast { root })])?
            .pop()
            .unwrap())
    }

    pub fn allreduce(&self, tensor: Tensor, op: ReduceOp) -> Result<Tensor> {
        self.submit_allreduce(tensor, op)?.wait()
    }

    pub fn broadcast(&self, tensor: Tensor, root: usize) -> Result<Tensor> {
        self.submit_broadcast(tensor, root)?.wait()
    }

    fn submit(&self, items: Vec<(Tensor, CollectiveKind)>) -> Result<Vec<CompletionToken>> {
        {
            let state = self.shared.state.lock().unwrap();
            if let Some(e) = &state.failure {
                return Err(e.duplicate());
            }
            if state.closed {
                return Err(Error::Closed);
            }
        }
        for (t, kind) in &items {
            if t.name().len() > u16::MAX as usize {
                return Err(Error::Usage(format!("tensor name of {} bytes is too long", t.name().len())));
            }
            match kind {
                CollectiveKind::Allreduce(op) => op.check_dtype(t.dtype())?,
                CollectiveKind::Broadcast { root } if *root >= self.size() => {
                    return Err(Error::Usage(format!(
                        "broadcast root {root} out of range for size {}",
                        self.size()
                    )))
                }
                CollectiveKind::Broadcast { .. } => {}
            }
        }

        let tx_guard = self.tx.lock().unwrap();
        let tx = tx_guard.as_ref().ok_or(Error::Closed)?;
        let mut in_flight = self.shared.in_flight.lock().unwrap();
        let mut batch_names = HashSet::new();
        for (t, _) in &items {
            if in_flight.contains(t.name()) || !batch_names.insert(t.name()) {
                return Err(Error::Usage(format!(
                    "tensor {:?} is already in flight",
                    t.name()
                )));
            }
        }
        let mut tokens = Vec::with_capacity(items.len());
        let mut batch = Vec::with_capacity(items.len());
        for (tensor, kind) in items {
            let (done, rx) = mpsc::channel();
            in_flight.insert(tensor.name().to_string());
            tokens.push(CompletionToken {
                name: tensor.name().to_string(),
                rx,
            });
            batch.push(Pending { tensor, kind, done });
        }
        if tx.send(Command::Submit(batch)).is_err() {
            for t in &tokens {
                in_flight.remove(&t.name);
            }
            let state = self.shared.state.lock().unwrap();
            return Err(state.failure.as_ref().map_or(Error::Closed, Error::duplicate));
        }
        Ok(tokens)
    }

    /// Leaves the job once every rank has asked to. Blocks until then.
    /// Tensors still pending when the ranks agree to stop fail with `Closed`.
    /// Calling it again is a no-op.
    pub fn shutdown(&self) -> Result<()> {
        let tx = self.tx.lock().unwrap().take();
        let Some(tx) = tx else {
            return Ok(());
        };
        self.shared.state.lock().unwrap().closed = true;
        let _ = tx.send(Command::Shutdown);
        let handle = self.worker.lock().unwrap().take();
        let result = match handle {
            Some(h) => h.join().unwrap_or_else(|_| Err(Error::protocol("progress loop panicked"))),
            None => Ok(()),
        };
        drop(tx);
        result
    }
}

impl Drop for Runtime {
    fn drop(&mut self) {
        // Without an explicit shutdown the loop notices the closed channel on its
        // next cycle and aborts, so peers see a transport error instead of hanging.
        self.tx.lock().unwrap().take();
    }
}
