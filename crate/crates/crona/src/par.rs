//! Data-parallel helpers with a sequential fallback.
//!
//! Everything parallel in this crate funnels through these functions.
//! Results are bit-identical regardless of thread count because every
//! helper maps into an ordered buffer and leaves reductions to the
//! caller, which must perform them sequentially. Never reduce across
//! threads with an order that depends on scheduling.
//!
//! With the `parallel` feature disabled the helpers compile to plain
//! loops. With it enabled, `force_sequential` still allows an at-runtime
//! opt-out, which the bench suite uses to compare both paths in one
//! binary.

use std::cell::Cell;

thread_local! {
    static FORCE_SEQUENTIAL: Cell<bool> = const { Cell::new(false) };
}

/// Runtime switch used by benches and tests; scoped to the calling thread.
pub fn set_force_sequential(v: bool) {
    FORCE_SEQUENTIAL.with(|f| f.set(v));
}

pub fn sequential_forced() -> bool {
    FORCE_SEQUENTIAL.with(|f| f.get())
}

/// Work below this many "inner elements" is not worth a fork-join.
pub const PAR_THRESHOLD: usize = 1 << 13;

#[cfg(feature = "parallel")]
pub fn parallel_enabled() -> bool {
    !sequential_forced()
}

#[cfg(not(feature = "parallel"))]
pub fn parallel_enabled() -> bool {
    false
}

/// Ordered map over `0..n`. `work_hint` is the approximate number of
/// scalar operations per item, used to decide whether to go parallel.
pub fn map_indexed<T, F>(n: usize, work_hint: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if parallel_enabled() && n > 1 && n.saturating_mul(work_hint) >= PAR_THRESHOLD {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    let _ = work_hint;
    (0..n).map(f).collect()
}

/// Splits `buf` into `n` equal chunks and runs `f(i, chunk_i)` for each.
/// Chunks are disjoint, so parallel execution cannot race.
pub fn for_each_chunk<T, F>(buf: &mut [T], n: usize, work_hint: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    assert!(n > 0 && buf.len() % n == 0, "buffer not divisible into chunks");
    let chunk = buf.len() / n;
    #[cfg(feature = "parallel")]
    {
        if parallel_enabled() && n > 1 && n.saturating_mul(work_hint) >= PAR_THRESHOLD {
            use rayon::prelude::*;
            buf.par_chunks_mut(chunk)
                .enumerate()
                .for_each(|(i, c)| f(i, c));
            return;
        }
    }
    let _ = work_hint;
    for (i, c) in buf.chunks_mut(chunk).enumerate() {
        f(i, c);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_indexed_preserves_order() {
        let v = map_indexed(100, usize::MAX, |i| i * 3);
        assert_eq!(v[0], 0);
        assert_eq!(v[99], 297);
    }

    #[test]
    fn chunks_are_disjoint_and_ordered() {
        let mut buf = vec![0usize; 64];
        for_each_chunk(&mut buf, 8, usize::MAX, |i, c| {
            for x in c.iter_mut() {
                *x = i;
            }
        });
        for (j, x) in buf.iter().enumerate() {
            assert_eq!(*x, j / 8);
        }
    }

    #[test]
    fn force_sequential_round_trips() {
        assert!(!sequential_forced());
        set_force_sequential(true);
        assert!(sequential_forced());
        set_force_sequential(false);
    }
}
