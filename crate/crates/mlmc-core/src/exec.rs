//! Execution strategy for embarrassingly parallel sample batches.
//!
//! Estimators split work into fixed-size chunks of replicates, evaluate each
//! chunk independently, and merge the per-chunk results in chunk order. The
//! chunk layout depends only on the sample range, never on the executor, so
//! any [`Executor`] implementation yields bit-identical results. The crate
//! ships the serial implementation; a rayon-backed one lives in the companion
//! CLI crate.

use alloc::vec::Vec;

/// Runs `n` independent jobs and returns their outputs in job order.
pub trait Executor: Sync {
    fn map<T: Send, F: Fn(usize) -> T + Sync + Send>(&self, n: usize, f: F) -> Vec<T>;
}

/// Executes jobs one after another on the calling thread.
#[derive(Debug, Default, Clone, Copy)]
pub struct Serial;

impl Executor for Serial {
    fn map<T: Send, F: Fn(usize) -> T + Sync + Send>(&self, n: usize, f: F) -> Vec<T> {
        (0..n).map(f).collect()
    }
}

/// Number of replicates evaluated per chunk. Fixed so that the partial-sum
/// tree is independent of worker count.
pub const CHUNK: u64 = 4096;

/// Per-chunk partial results over the replicate range `[start, start + n)`,
/// in chunk order. Chunk boundaries sit at `start + c * CHUNK`.
pub(crate) fn chunk_parts<E, T, FC>(exec: &E, start: u64, n: u64, fold_chunk: FC) -> Vec<T>
where
    E: Executor,
    T: Send,
    FC: Fn(core::ops::Range<u64>) -> T + Sync + Send,
{
    let chunks = n.div_ceil(CHUNK) as usize;
    exec.map(chunks, |c| {
        let lo = start + c as u64 * CHUNK;
        let hi = core::cmp::min(lo + CHUNK, start + n);
        fold_chunk(lo..hi)
    })
}

/// Splits the replicate range `[start, start + n)` into `CHUNK`-sized chunks,
/// evaluates `fold_chunk` on each, and merges results left to right with
/// `merge`.
pub fn chunked<E, T, FC, FM>(exec: &E, start: u64, n: u64, fold_chunk: FC, merge: FM) -> Option<T>
where
    E: Executor,
    T: Send,
    FC: Fn(core::ops::Range<u64>) -> T + Sync + Send,
    FM: Fn(T, T) -> T,
{
    if n == 0 {
        return None;
    }
    chunk_parts(exec, start, n, fold_chunk).into_iter().reduce(merge)
}
