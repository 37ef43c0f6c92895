//! Cross-rank readiness reports, the coordinator's packing rule, and the
//! READY/PLAN payload codecs.
//!
//! READY payload: `count:u32 | count × (name_len:u16 | name | dtype:u8 | len:u64 | op:u8 [| root:u32])`.
//! PLAN payload: `count:u32 | count × (collective_id:u64 | dtype:u8 | op:u8 [| root:u32] | members:u32 |
//! members × (name_len:u16 | name | offset:u64 | len:u64))`.
//! `root` is present only when `op` is broadcast. All integers little-endian.

use std::collections::HashMap;

use crate::collectives::ReduceOp;
use crate::error::{Error, Result};
use crate::tensor::DType;

pub const OP_SUM: u8 = 1;
pub const OP_AVERAGE: u8 = 2;
pub const OP_BROADCAST: u8 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CollectiveKind {
    Allreduce(ReduceOp),
    Broadcast { root: usize },
}

impl CollectiveKind {
    pub fn op_code(self) -> u8 {
        match self {
            CollectiveKind::Allreduce(ReduceOp::Sum) => OP_SUM,
            CollectiveKind::Allreduce(ReduceOp::Average) => OP_AVERAGE,
            CollectiveKind::Broadcast { .. } => OP_BROADCAST,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorMeta {
    pub name: String,
    pub dtype: DType,
    pub len: u64,
    pub kind: CollectiveKind,
}

impl TensorMeta {
    pub fn byte_size(&self) -> u64 {
        self.len * self.dtype.byte_width() as u64
    }
}

/// One rank's pending set for a cycle, in that rank's submission order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReadyReport {
    pub rank: usize,
    pub shutdown: bool,
    pub entries: Vec<TensorMeta>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlanMember {
    pub name: String,
    /// Element offset into the fusion buffer.
    pub offset: u64,
    pub len: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FusionPlan {
    pub collective_id: u64,
    pub dtype: DType,
    pub kind: CollectiveKind,
    pub members: Vec<PlanMember>,
    pub total_elements: u64,
}

impl FusionPlan {
    pub fn byte_size(&self) -> u64 {
        self.total_elements * self.dtype.byte_width() as u64
    }

    /// True when the plan is staged through a buffer of `capacity` bytes.
    /// Broadcasts and oversized singletons run in place.
    pub fn uses_fusion_buffer(&self, capacity: usize) -> bool {
        matches!(self.kind, CollectiveKind::Allreduce(_)) && self.byte_size() <= capacity as u64
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.members.iter().map(|m| m.name.as_str())
    }

    pub fn label(&self) -> String {
        match self.members.as_slice() {
            [one] => one.name.clone(),
            many => format!("fused[{}]#{}", many.len(), self.collective_id),
        }
    }
}

/// What rank 0 tells everyone at the end of a negotiation round.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CycleDecision {
    Run { plans: Vec<FusionPlan>, stop: bool },
    Abort(String),
}

/// Coordinator rule. A tensor is globally ready once every rank reports it;
/// ready tensors are taken in rank 0's submission order and packed greedily:
/// consecutive allreduces sharing dtype and op share a plan while the running
/// byte total stays within `fusion_bytes`. Broadcasts and tensors larger than
/// `fusion_bytes` always get a plan of their own.
pub fn coordinate(reports: &[ReadyReport], fusion_bytes: usize, next_id: &mut u64) -> CycleDecision {
    let n = reports.len();
    let Some(root) = reports.iter().find(|r| r.rank == 0) else {
        return CycleDecision::Abort("coordinator is missing rank 0's report".into());
    };

    let mut seen: HashMap<&str, (&TensorMeta, usize, usize)> = HashMap::new();
    for report in reports {
        for meta in &report.entries {
            match seen.get_mut(meta.name.as_str()) {
                None => {
                    seen.insert(&meta.name, (meta, report.rank, 1));
                }
                Some((first, first_rank, count)) => {
                    if *first != meta {
                        return CycleDecision::Abort(format!(
                            "tensor {:?} mismatch: rank {} submitted {} x{} {:?}, rank {} submitted {} x{} {:?}",
                            meta.name,
                            first_rank,
                            first.dtype,
                            first.len,
                            first.kind,
                            report.rank,
                            meta.dtype,
                            meta.len,
                            meta.kind
                        ));
                    }
                    *count += 1;
                }
            }
        }
    }

    let ready = root
        .entries
        .iter()
        .filter(|m| seen.get(m.name.as_str()).is_some_and(|(_, _, c)| *c == n));

    let cap = fusion_bytes as u64;
    let mut plans: Vec<FusionPlan> = Vec::new();
    let mut open: Option<(FusionPlan, u64)> = None;
    let mut new_plan = |meta: &TensorMeta| {
        let id = *next_id;
        *next_id += 1;
        FusionPlan {
            collective_id: id,
            dtype: meta.dtype,
            kind: meta.kind,
            members: vec![PlanMember {
                name: meta.name.clone(),
                offset: 0,
                len: meta.len,
            }],
            total_elements: meta.len,
        }
    };

    for meta in ready {
        let bytes = meta.byte_size();
        let fusable = matches!(meta.kind, CollectiveKind::Allreduce(_)) && bytes <= cap;
        if let Some((plan, used)) = open.as_mut() {
            if fusable && plan.dtype == meta.dtype && plan.kind == meta.kind && *used + bytes <= cap {
                plan.members.push(PlanMember {
                    name: meta.name.clone(),
                    offset: plan.total_elements,
                    len: meta.len,
                });
                plan.total_elements += meta.len;
                *used += bytes;
                continue;
            }
            plans.push(open.take().unwrap().0);
        }
        let plan = new_plan(meta);
        if fusable {
            open = Some((plan, bytes));
        } else {
            plans.push(plan);
        }
    }
    if let Some((plan, _)) = open {
        plans.push(plan);
    }

    CycleDecision::Run {
        plans,
        stop: reports.iter().all(|r| r.shutdown),
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn name(&mut self, s: &str) {
        self.u16(s.len() as u16);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn kind(&mut self, k: CollectiveKind) {
        self.u8(k.op_code());
        if let CollectiveKind::Broadcast { root } = k {
            self.u32(root as u32);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::protocol(format!("truncated {} payload", self.what)));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn name(&mut self) -> Result<String> {
        let len = self.u16()? as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::protocol(format!("non-utf8 tensor name in {} payload", self.what)))
    }
    fn dtype(&mut self) -> Result<DType> {
        let code = self.u8()?;
        DType::from_code(code)
            .ok_or_else(|| Error::protocol(format!("bad dtype code {code} in {} payload", self.what)))
    }
    fn kind(&mut self) -> Result<CollectiveKind> {
        match self.u8()? {
            OP_SUM => Ok(CollectiveKind::Allreduce(ReduceOp::Sum)),
            OP_AVERAGE => Ok(CollectiveKind::Allreduce(ReduceOp::Average)),
            OP_BROADCAST => Ok(CollectiveKind::Broadcast {
                root: self.u32()? as usize,
            }),
            other => Err(Error::protocol(format!("bad op code {other} in {} payload", self.what))),
        }
    }
    fn finish(self) -> Result<()> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(Error::protocol(format!(
                "{} trailing bytes in {} payload",
                self.buf.len(),
                self.what
            )))
        }
    }
}

pub fn encode_ready(entries: &[TensorMeta]) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.u32(entries.len() as u32);
    for e in entries {
        w.name(&e.name);
        w.u8(e.dtype.code());
        w.u64(e.len);
        w.kind(e.kind);
    }
    w.0
}

pub fn decode_ready(payload: &[u8]) -> Result<Vec<TensorMeta>> {
    let mut r = Reader { buf: payload, what: "READY" };
    let count = r.u32()?;
    let mut out = Vec::with_capacity(count.min(1 << 16) as usize);
    for _ in 0..count {
        let name = r.name()?;
        let dtype = r.dtype()?;
        let len = r.u64()?;
        let kind = r.kind()?;
        out.push(TensorMeta { name, dtype, len, kind });
    }
    r.finish()?;
    Ok(out)
}

pub fn encode_plans(plans: &[FusionPlan]) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.u32(plans.len() as u32);
    for p in plans {
        w.u64(p.collective_id);
        w.u8(p.dtype.code());
        w.kind(p.kind);
        w.u32(p.members.len() as u32);
        for m in &p.members {
            w.name(&m.name);
            w.u64(m.offset);
            w.u64(m.len);
        }
    }
    w.0
}

pub fn decode_plans(payload: &[u8]) -> Result<Vec<FusionPlan>> {
    let mut r = Reader { buf: payload, what: "PLAN" };
    let count = r.u32()?;
    let mut plans = Vec::with_capacity(count.min(1 << 16) as usize);
    for _ in 0..count {
        let collective_id = r.u64()?;
        let dtype = r.dtype()?;
        let kind = r.kind()?;
        let members = r.u32()?;
        let mut plan = FusionPlan {
            collective_id,
            dtype,
            kind,
            members: Vec::with_capacity(members.min(1 << 16) as usize),
            total_elements: 0,
        };
        for _ in 0..members {
            let name = r.name()?;
            let offset = r.u64()?;
            let len = r.u64()?;
            if offset != plan.total_elements {
                return Err(Error::protocol(format!(
                    "plan {collective_id}: member {name:?} at offset {offset}, expected {}",
                    plan.total_elements
                )));
            }
            plan.total_elements += len;
            plan.members.push(PlanMember { name, offset, len });
        }
        plans.push(plan);
    }
    r.finish()?;
    Ok(plans)
}
