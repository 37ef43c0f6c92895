//! Ring allreduce and ring broadcast over a [`RingContext`]'s two links.
//!
//! Allreduce runs in two phases of `N-1` steps each. During scatter-reduce,
//! rank `r` at step `s` sends chunk `(r-s) mod N` and adds the incoming chunk
//! `(r-s-1) mod N` into its buffer; afterwards it holds the complete sum for
//! chunk `(r+1) mod N`. During allgather, step `s` sends chunk `(r+1-s) mod N`
//! and overwrites chunk `(r-s) mod N` with what arrives. Every rank therefore
//! sends and receives exactly `2(N-1)` CHUNK frames, and each final chunk is
//! produced once and copied everywhere, so all ranks end with identical bytes.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::runtime::RingContext;
use crate::tensor::{elementwise_add_into, scale_slice, DType, Element, Tensor};
use crate::transport::{FrameHeader, MsgType};
use crate::with_dtype;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ReduceOp {
    Sum,
    Average,
}

impl ReduceOp {
    pub fn check_dtype(self, dtype: DType) -> Result<()> {
        if self == ReduceOp::Average && !dtype.is_float() {
            return Err(Error::Unsupported(format!("Average over {dtype} tensors")));
        }
        Ok(())
    }
}

/// Splits `total_len` elements into `n` contiguous chunks whose sizes differ by
/// at most one; the first `total_len % n` chunks take the extra element.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkPartition {
    pub total_len: usize,
    pub n: usize,
    pub boundaries: Vec<usize>,
}

impl ChunkPartition {
    pub fn range(&self, chunk: usize) -> Range<usize> {
        self.boundaries[chunk]..self.boundaries[chunk + 1]
    }

    pub fn len(&self, chunk: usize) -> usize {
        self.boundaries[chunk + 1] - self.boundaries[chunk]
    }

    pub fn max_len(&self) -> usize {
        self.total_len.div_ceil(self.n)
    }
}

pub fn make_partition(total_len: usize, n: usize) -> ChunkPartition {
    assert!(n >= 1, "partition needs at least one chunk");
    let base = total_len / n;
    let extra = total_len % n;
    let mut boundaries = Vec::with_capacity(n + 1);
    let mut at = 0;
    boundaries.push(0);
    for c in 0..n {
        at += base + usize::from(c < extra);
        boundaries.push(at);
    }
    ChunkPartition {
        total_len,
        n,
        boundaries,
    }
}

fn chunk_header(collective_id: u64, step: usize, chunk: usize) -> FrameHeader {
    FrameHeader {
        collective_id,
        phase_step: step as u16,
        chunk_index: chunk as u16,
        ..FrameHeader::new(MsgType::Chunk)
    }
}

/// Receives the next CHUNK frame and checks it is exactly the one the schedule expects.
fn recv_chunk_into<T: Element>(
    ctx: &mut RingContext,
    collective_id: u64,
    step: usize,
    chunk: usize,
    dst: &mut [T],
) -> Result<()> {
    let rank = ctx.rank();
    let link = ctx.recv_link()?;
    let h = link.recv_header()?;
    let want_bytes = std::mem::size_of_val(dst) as u64;
    if h.msg_type != MsgType::Chunk
        || h.collective_id != collective_id
        || h.phase_step as usize != step
        || h.chunk_index as usize != chunk
    {
        return Err(Error::protocol(format!(
            "rank {rank} expected CHUNK(collective {collective_id}, step {step}, chunk {chunk}), \
             got {:?}(collective {}, step {}, chunk {})",
            h.msg_type, h.collective_id, h.phase_step, h.chunk_index
        )));
    }
    if h.dtype_code != T::DTYPE.code() || h.payload_len != want_bytes {
        return Err(Error::protocol(format!(
            "collective {collective_id}: rank {rank} expected {want_bytes} bytes of {}, \
             peer sent {} bytes with dtype code {} (ranks disagree on dtype or length)",
            T::DTYPE,
            h.payload_len,
            h.dtype_code
        )));
    }
    link.recv_payload_into(bytemuck::cast_slice_mut(dst))
}

/// In-place ring allreduce. Every rank must call with the same
/// `collective_id`, dtype, length and op.
pub fn ring_allreduce<T: Element>(
    ctx: &mut RingContext,
    buf: &mut [T],
    op: ReduceOp,
    collective_id: u64,
) -> Result<()> {
    ctx.ensure_open()?;
    op.check_dtype(T::DTYPE)?;
    let n = ctx.size();
    if n == 1 {
        return Ok(());
    }
    let r = ctx.rank();
    let part = make_partition(buf.len(), n);
    let mut scratch = vec![<T as bytemuck::Zeroable>::zeroed(); part.max_len()];

    for s in 0..n - 1 {
        let send_c = (r + n - s) % n;
        let recv_c = (r + 2 * n - s - 1) % n;
        ctx.send_link()?
            .send_elements(chunk_header(collective_id, s, send_c), &buf[part.range(send_c)])?;
        let incoming = &mut scratch[..part.len(recv_c)];
        recv_chunk_into(ctx, collective_id, s, recv_c, incoming)?;
        elementwise_add_into(&mut buf[part.range(recv_c)], incoming)?;
    }

    for s in 0..n - 1 {
        let step = n - 1 + s;
        let send_c = (r + 1 + n - s) % n;
        let recv_c = (r + n - s) % n;
        ctx.send_link()?
            .send_elements(chunk_header(collective_id, step, send_c), &buf[part.range(send_c)])?;
        recv_chunk_into(ctx, collective_id, step, recv_c, &mut buf[part.range(recv_c)])?;
    }

    if op == ReduceOp::Average {
        scale_slice(buf, 1.0 / n as f64)?;
    }
    Ok(())
}

/// Pipelined ring broadcast: the root streams its buffer chunk by chunk to its
/// successor and every rank except the root's predecessor forwards each chunk
/// as soon as it lands.
pub fn ring_broadcast<T: Element>(
    ctx: &mut RingContext,
    buf: &mut [T],
    root: usize,
    collective_id: u64,
) -> Result<()> {
    ctx.ensure_open()?;
    let n = ctx.size();
    if root >= n {
        return Err(Error::Usage(format!("broadcast root {root} out of range for size {n}")));
    }
    if n == 1 {
        return Ok(());
    }
    let r = ctx.rank();
    let part = make_partition(buf.len(), n);
    let last = (root + n - 1) % n;

    for c in 0..n {
        let range = part.range(c);
        if r != root {
            recv_chunk_into(ctx, collective_id, 0, c, &mut buf[range.clone()])?;
        }
        if r != last {
            ctx.send_link()?
                .send_elements(chunk_header(collective_id, 0, c), &buf[range])?;
        }
    }
    Ok(())
}

pub fn allreduce_tensor(
    ctx: &mut RingContext,
    tensor: &mut Tensor,
    op: ReduceOp,
    collective_id: u64,
) -> Result<()> {
    with_dtype!(tensor.dtype(), T => ring_allreduce::<T>(
        ctx,
        tensor.as_mut_slice::<T>().unwrap(),
        op,
        collective_id,
    ))
}

pub fn broadcast_tensor(
    ctx: &mut RingContext,
    tensor: &mut Tensor,
    root: usize,
    collective_id: u64,
) -> Result<()> {
    with_dtype!(tensor.dtype(), T => ring_broadcast::<T>(
        ctx,
        tensor.as_mut_slice::<T>().unwrap(),
        root,
        collective_id,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::with_local_ring;
    use proptest::prelude::*;

    #[test]
    fn partition_examples() {
        assert_eq!(make_partition(7, 3).boundaries, vec![0, 3, 5, 7]);
        assert_eq!(make_partition(6, 3).boundaries, vec![0, 2, 4, 6]);
        assert_eq!(make_partition(2, 4).boundaries, vec![0, 1, 2, 2, 2]);
        assert_eq!(make_partition(0, 1).boundaries, vec![0, 0]);
    }

    proptest! {
        #[test]
        fn partition_invariants(total in 0usize..10_000, n in 1usize..70) {
            let p = make_partition(total, n);
            prop_assert_eq!(p.boundaries.len(), n + 1);
            prop_assert_eq!(p.boundaries[0], 0);
            prop_assert_eq!(p.boundaries[n], total);
            let sizes: Vec<_> = (0..n).map(|c| p.len(c)).collect();
            let lo = *sizes.iter().min().unwrap();
            let hi = *sizes.iter().max().unwrap();
            prop_assert!(hi - lo <= 1);
            prop_assert_eq!(hi, p.max_len());
            for (c, &len) in sizes.iter().enumerate() {
                let want = total / n + usize::from(c < total % n);
                prop_assert_eq!(len, want);
            }
        }
    }

    #[test]
    fn single_rank_is_identity_without_frames() {
        let out = with_local_ring(1, |mut ctx| {
            let mut buf = vec![5.0f64];
            ring_allreduce(&mut ctx, &mut buf, ReduceOp::Sum, 1)?;
            ring_broadcast(&mut ctx, &mut buf, 0, 2)?;
            let stats = ctx.snapshot_stats().chunk();
            ctx.shutdown()?;
            Ok((buf, stats.frames_sent))
        });
        let (buf, frames) = out.into_iter().next().unwrap().unwrap();
        assert_eq!(buf, vec![5.0]);
        assert_eq!(frames, 0);
    }

    #[test]
    fn two_rank_integer_sum() {
        let inputs = [vec![1i32, 2], vec![3, 4]];
        let out = with_local_ring(2, |mut ctx| {
            let mut buf = inputs[ctx.rank()].clone();
            ring_allreduce(&mut ctx, &mut buf, ReduceOp::Sum, 7)?;
            ctx.shutdown()?;
            Ok(buf)
        });
        for r in out {
            assert_eq!(r.unwrap(), vec![4, 6]);
        }
    }

    #[test]
    fn four_ranks_send_six_chunks_each() {
        let out = with_local_ring(4, |mut ctx| {
            let mut buf = vec![ctx.rank() as i64; 10];
            ring_allreduce(&mut ctx, &mut buf, ReduceOp::Sum, 1)?;
            let s = ctx.snapshot_stats().chunk();
            ctx.shutdown()?;
            Ok((buf, s.frames_sent, s.frames_received))
        });
        for r in out {
            let (buf, sent, recvd) = r.unwrap();
            assert_eq!(buf, vec![6; 10]);
            assert_eq!((sent, recvd), (6, 6));
        }
    }

    #[test]
    fn len_smaller_than_ring_uses_empty_chunks() {
        let out = with_local_ring(5, |mut ctx| {
            let mut buf = vec![ctx.rank() as i32 + 1, 10];
            ring_allreduce(&mut ctx, &mut buf, ReduceOp::Sum, 3)?;
            let s = ctx.snapshot_stats().chunk();
            ctx.shutdown()?;
            Ok((buf, s.frames_sent))
        });
        for r in out {
            let (buf, sent) = r.unwrap();
            assert_eq!(buf, vec![15, 50]);
            assert_eq!(sent, 8);
        }
    }

    #[test]
    fn broadcast_copies_root() {
        let out = with_local_ring(4, |mut ctx| {
            let mut buf = if ctx.rank() == 0 { vec![7i32, 8, 9] } else { vec![0; 3] };
            ring_broadcast(&mut ctx, &mut buf, 0, 1)?;
            ctx.shutdown()?;
            Ok(buf)
        });
        for r in out {
            assert_eq!(r.unwrap(), vec![7, 8, 9]);
        }
    }

    #[test]
    fn average_rejects_integers() {
        let out = with_local_ring(1, |mut ctx| {
            let mut buf = vec![1i32];
            let e = ring_allreduce(&mut ctx, &mut buf, ReduceOp::Average, 1);
            ctx.shutdown()?;
            Ok(e)
        });
        let e = out.into_iter().next().unwrap().unwrap();
        assert!(matches!(e, Err(Error::Unsupported(_))));
    }

    #[test]
    fn length_disagreement_is_protocol_error() {
        let out = with_local_ring(2, |mut ctx| {
            let mut buf = vec![1i32; 4 + ctx.rank()];
            Ok(ring_allreduce(&mut ctx, &mut buf, ReduceOp::Sum, 1))
        });
        assert!(out
            .into_iter()
            .any(|r| matches!(r.unwrap(), Err(Error::Protocol(_)))));
    }

    #[test]
    fn closed_context_rejects_collectives() {
        let out = with_local_ring(1, |mut ctx| {
            ctx.shutdown()?;
            let mut buf = vec![1.0f32];
            Ok(ring_allreduce(&mut ctx, &mut buf, ReduceOp::Sum, 1))
        });
        assert!(matches!(out.into_iter().next().unwrap().unwrap(), Err(Error::Closed)));
    }
}
