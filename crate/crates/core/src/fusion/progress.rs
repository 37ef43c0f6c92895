//! The background progress loop: one per process, sole owner of the ring links.

use std::collections::{BTreeMap, HashMap};
use std::sync::mpsc::{self, TryRecvError};
use std::sync::Arc;
use std::time::Instant;

use super::plan::{
    coordinate, decode_plans, decode_ready, encode_plans, encode_ready, CollectiveKind,
    CycleDecision, FusionPlan, ReadyReport, TensorMeta,
};
use super::{PlanRecord, Shared};
use crate::collectives::{allreduce_tensor, broadcast_tensor, ring_allreduce, ReduceOp};
use crate::error::{Error, Result};
use crate::runtime::{Config, RingContext};
use crate::tensor::{Element, Tensor};
use crate::timeline::{Category, Phase, Timeline};
use crate::transport::{FrameHeader, MsgType};
use crate::with_dtype;

const PLAN_OK: u16 = 0;
const PLAN_STOP: u16 = 1;
const PLAN_ABORT: u16 = 2;

pub(crate) struct Pending {
    pub tensor: Tensor,
    pub kind: CollectiveKind,
    pub done: mpsc::Sender<Result<Tensor>>,
}

impl Pending {
    fn meta(&self) -> TensorMeta {
        TensorMeta {
            name: self.tensor.name().to_string(),
            dtype: self.tensor.dtype(),
            len: self.tensor.len() as u64,
            kind: self.kind,
        }
    }
}

pub(crate) enum Command {
    Submit(Vec<Pending>),
    Shutdown,
}

/// Reusable staging region for fused allreduces. Allocated on first use only.
#[derive(Debug)]
pub struct FusionBuffer {
    capacity: usize,
    storage: Option<Vec<u64>>,
    allocations: usize,
}

impl FusionBuffer {
    pub fn new(capacity: usize) -> Self {
        FusionBuffer {
            capacity,
            storage: None,
            allocations: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn allocations(&self) -> usize {
        self.allocations
    }

    pub fn is_allocated(&self) -> bool {
        self.storage.is_some()
    }

    /// The first `elems` elements of the buffer viewed as `T`.
    pub fn region<T: Element>(&mut self, elems: usize) -> &mut [T] {
        assert!(
            elems * std::mem::size_of::<T>() <= self.capacity,
            "fused plan of {elems} x {} exceeds buffer capacity {}",
            T::DTYPE,
            self.capacity
        );
        let storage = self.storage.get_or_insert_with(|| {
            self.allocations += 1;
            vec![0u64; self.capacity.div_ceil(8)]
        });
        &mut bytemuck::cast_slice_mut::<u64, T>(storage)[..elems]
    }
}

pub(crate) struct ProgressLoop {
    ctx: RingContext,
    cfg: Config,
    shared: Arc<Shared>,
    commands: mpsc::Receiver<Command>,
    pending: BTreeMap<u64, Pending>,
    by_name: HashMap<String, u64>,
    next_seq: u64,
    next_collective: u64,
    last_collective: Option<u64>,
    shutdown_requested: bool,
    fusion: FusionBuffer,
    timeline: Timeline,
}

enum Exit {
    Clean,
    Dropped,
}

impl ProgressLoop {
    pub(crate) fn new(
        ctx: RingContext,
        cfg: Config,
        shared: Arc<Shared>,
        commands: mpsc::Receiver<Command>,
    ) -> Self {
        let timeline = Timeline::new(cfg.timeline.clone(), ctx.rank());
        ProgressLoop {
            fusion: FusionBuffer::new(cfg.fusion_bytes),
            ctx,
            cfg,
            shared,
            commands,
            pending: BTreeMap::new(),
            by_name: HashMap::new(),
            next_seq: 0,
            next_collective: 0,
            last_collective: None,
            shutdown_requested: false,
            timeline,
        }
    }

    pub(crate) fn run(mut self) -> Result<()> {
        let outcome = self.cycles();
        let result = match outcome {
            Ok(Exit::Clean) => Ok(()),
            Ok(Exit::Dropped) => {
                self.ctx.abort();
                self.fail_all(&Error::Closed);
                Ok(())
            }
            Err(e) => {
                log::error!("rank {}: progress loop failed: {e}", self.ctx.rank());
                self.ctx.abort();
                self.fail_all(&e);
                self.shared.set_failure(e.duplicate());
                Err(e)
            }
        };
        self.shared
            .fusion_allocations
            .store(self.fusion.allocations(), std::sync::atomic::Ordering::Relaxed);
        self.timeline.flush();
        self.shared.mark_closed();
        result
    }

    fn cycles(&mut self) -> Result<Exit> {
        let period = self.cfg.cycle;
        let mut next_tick = Instant::now();
        let mut cycle: u64 = 0;
        loop {
            next_tick += period;
            let now = Instant::now();
            if next_tick > now {
                std::thread::sleep(next_tick - now);
            } else {
                next_tick = now;
            }

            loop {
                match self.commands.try_recv() {
                    Ok(Command::Submit(batch)) => {
                        for p in batch {
                            let seq = self.next_seq;
                            self.next_seq += 1;
                            self.by_name.insert(p.tensor.name().to_string(), seq);
                            self.pending.insert(seq, p);
                        }
                    }
                    Ok(Command::Shutdown) => self.shutdown_requested = true,
                    Err(TryRecvError::Empty) => break,
                    Err(TryRecvError::Disconnected) => return Ok(Exit::Dropped),
                }
            }

            let started = self.timeline.now_us();
            let (plans, stop) = match self.negotiate(cycle)? {
                CycleDecision::Run { plans, stop } => (plans, stop),
                CycleDecision::Abort(msg) => return Err(Error::Protocol(msg)),
            };
            if !plans.is_empty() {
                self.timeline.record_at("negotiate", Category::Negotiate, Phase::Begin, started);
                self.timeline.end("negotiate", Category::Negotiate);
            }
            for plan in plans {
                self.execute_plan(plan)?;
            }
            if stop {
                self.fail_all(&Error::Closed);
                self.ctx.shutdown()?;
                return Ok(Exit::Clean);
            }
            cycle += 1;
        }
    }

    fn my_report(&self) -> ReadyReport {
        ReadyReport {
            rank: self.ctx.rank(),
            shutdown: self.shutdown_requested,
            entries: self.pending.values().map(Pending::meta).collect(),
        }
    }

    /// One negotiation round. READY frames travel forward around the ring to
    /// rank 0, each rank forwarding its predecessors' frames before adding its
    /// own; rank 0 decides and the PLAN travels forward from rank 0 to rank N-1.
    fn negotiate(&mut self, cycle: u64) -> Result<CycleDecision> {
        let n = self.ctx.size();
        let rank = self.ctx.rank();
        let mine = self.my_report();
        if n == 1 {
            return Ok(coordinate(&[mine], self.cfg.fusion_bytes, &mut self.next_collective));
        }

        let ready_header = |origin: usize, shutdown: bool| FrameHeader {
            collective_id: cycle,
            phase_step: u16::from(shutdown),
            chunk_index: origin as u16,
            ..FrameHeader::new(MsgType::Ready)
        };

        if rank == 0 {
            let mut reports = vec![mine];
            for _ in 1..n {
                let f = self.ctx.recv_link()?.recv_frame()?;
                expect(&f.header, MsgType::Ready, cycle)?;
                reports.push(ReadyReport {
                    rank: f.header.chunk_index as usize,
                    shutdown: f.header.phase_step != 0,
                    entries: decode_ready(&f.payload)?,
                });
            }
            reports.sort_by_key(|r| r.rank);
            let decision = coordinate(&reports, self.cfg.fusion_bytes, &mut self.next_collective);
            let (flag, payload) = match &decision {
                CycleDecision::Run { plans, stop } => {
                    (if *stop { PLAN_STOP } else { PLAN_OK }, encode_plans(plans))
                }
                CycleDecision::Abort(msg) => (PLAN_ABORT, msg.as_bytes().to_vec()),
            };
            let header = FrameHeader {
                collective_id: cycle,
                phase_step: flag,
                ..FrameHeader::new(MsgType::Plan)
            };
            self.ctx.send_link()?.send_parts(header, &payload)?;
            return Ok(decision);
        }

        for _ in 0..rank - 1 {
            let f = self.ctx.recv_link()?.recv_frame()?;
            expect(&f.header, MsgType::Ready, cycle)?;
            self.ctx.send_link()?.send_frame(&f)?;
        }
        let payload = encode_ready(&mine.entries);
        self.ctx
            .send_link()?
            .send_parts(ready_header(rank, mine.shutdown), &payload)?;

        let f = self.ctx.recv_link()?.recv_frame()?;
        expect(&f.header, MsgType::Plan, cycle)?;
        if rank != n - 1 {
            self.ctx.send_link()?.send_frame(&f)?;
        }
        Ok(match f.header.phase_step {
            PLAN_ABORT => CycleDecision::Abort(String::from_utf8_lossy(&f.payload).into_owned()),
            flag => CycleDecision::Run {
                plans: decode_plans(&f.payload)?,
                stop: flag == PLAN_STOP,
            },
        })
    }

    fn take_member(&mut self, plan: &FusionPlan, name: &str, len: u64) -> Result<Pending> {
        let seq = self.by_name.remove(name).ok_or_else(|| {
            Error::protocol(format!(
                "plan {} names tensor {name:?} which is not pending on rank {}",
                plan.collective_id,
                self.ctx.rank()
            ))
        })?;
        let p = self.pending.remove(&seq).expect("pending index out of sync");
        if p.tensor.dtype() != plan.dtype || p.tensor.len() as u64 != len || p.kind != plan.kind {
            return Err(Error::protocol(format!(
                "plan {} disagrees with local tensor {name:?}",
                plan.collective_id
            )));
        }
        Ok(p)
    }

    fn execute_plan(&mut self, plan: FusionPlan) -> Result<()> {
        if let Some(last) = self.last_collective {
            if plan.collective_id <= last {
                return Err(Error::protocol(format!(
                    "collective id {} after {last}",
                    plan.collective_id
                )));
            }
        }
        self.last_collective = Some(plan.collective_id);
        self.next_collective = plan.collective_id + 1;

        let mut members = plan
            .members
            .iter()
            .map(|m| self.take_member(&plan, &m.name, m.len))
            .collect::<Result<Vec<_>>>()?;
        self.shared.plan_log.lock().unwrap().push(PlanRecord {
            collective_id: plan.collective_id,
            names: plan.members.iter().map(|m| m.name.clone()).collect(),
        });

        let label = plan.label();
        let id = plan.collective_id;
        match plan.kind {
            CollectiveKind::Broadcast { root } => {
                self.timeline.begin(&label, Category::Broadcast);
                self.timeline.begin(&label, Category::Communicate);
                broadcast_tensor(&mut self.ctx, &mut members[0].tensor, root, id)?;
                self.timeline.end(&label, Category::Communicate);
                self.timeline.end(&label, Category::Broadcast);
            }
            CollectiveKind::Allreduce(op) if !plan.uses_fusion_buffer(self.fusion.capacity()) => {
                self.timeline.begin(&label, Category::Communicate);
                allreduce_tensor(&mut self.ctx, &mut members[0].tensor, op, id)?;
                self.timeline.end(&label, Category::Communicate);
            }
            CollectiveKind::Allreduce(op) => {
                with_dtype!(plan.dtype, T => self.fused_allreduce::<T>(&plan, &label, &mut members, op))?;
            }
        }

        let mut in_flight = self.shared.in_flight.lock().unwrap();
        for m in members {
            in_flight.remove(m.tensor.name());
            let _ = m.done.send(Ok(m.tensor));
        }
        Ok(())
    }

    fn fused_allreduce<T: Element>(
        &mut self,
        plan: &FusionPlan,
        label: &str,
        members: &mut [Pending],
        op: ReduceOp,
    ) -> Result<()> {
        let total = plan.total_elements as usize;
        let buf = self.fusion.region::<T>(total);

        self.timeline.begin(label, Category::MemcpyInFusionBuffer);
        for (m, p) in plan.members.iter().zip(members.iter()) {
            let src = p.tensor.as_slice::<T>().expect("dtype checked against plan");
            buf[m.offset as usize..(m.offset + m.len) as usize].copy_from_slice(src);
        }
        self.timeline.end(label, Category::MemcpyInFusionBuffer);

        self.timeline.begin(label, Category::Communicate);
        ring_allreduce(&mut self.ctx, buf, op, plan.collective_id)?;
        self.timeline.end(label, Category::Communicate);

        self.timeline.begin(label, Category::MemcpyOutFusionBuffer);
        for (m, p) in plan.members.iter().zip(members.iter_mut()) {
            let dst = p.tensor.as_mut_slice::<T>().expect("dtype checked against plan");
            dst.copy_from_slice(&buf[m.offset as usize..(m.offset + m.len) as usize]);
        }
        self.timeline.end(label, Category::MemcpyOutFusionBuffer);
        self.shared
            .fusion_allocations
            .store(self.fusion.allocations(), std::sync::atomic::Ordering::Relaxed);
        Ok(())
    }

    fn fail_all(&mut self, err: &Error) {
        let mut in_flight = self.shared.in_flight.lock().unwrap();
        for (_, p) in std::mem::take(&mut self.pending) {
            in_flight.remove(p.tensor.name());
            let _ = p.done.send(Err(err.duplicate()));
        }
        self.by_name.clear();
    }
}

fn expect(h: &FrameHeader, t: MsgType, cycle: u64) -> Result<()> {
    if h.msg_type != t || h.collective_id != cycle {
        return Err(Error::protocol(format!(
            "expected {t:?} for cycle {cycle}, got {:?} for cycle {}",
            h.msg_type, h.collective_id
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn buffer_allocates_once() {
        let mut b = FusionBuffer::new(1024);
        assert!(!b.is_allocated());
        b.region::<f32>(10).fill(1.0);
        b.region::<i64>(128).fill(2);
        b.region::<f64>(0);
        assert_eq!(b.allocations(), 1);
    }

    #[test]
    #[should_panic]
    fn buffer_rejects_overflow() {
        FusionBuffer::new(16).region::<f64>(3);
    }
}
