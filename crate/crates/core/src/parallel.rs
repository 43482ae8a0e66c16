//! Data-parallel map/reduce over examples with a sequential fallback.
//!
//! The `parallel` feature (on by default) backs [`ExecMode::Parallel`] with
//! rayon; without it both modes run sequentially. Work is split into a fixed
//! number of chunks and per-chunk accumulators are merged in chunk order, so
//! the result is bit-identical across thread counts, across machines, and
//! with the feature disabled.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// How batch-level loops execute.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum ExecMode {
    Sequential,
    Parallel,
}

impl ExecMode {
    /// Parallel when the `parallel` feature is compiled in.
    pub fn auto() -> Self {
        if cfg!(feature = "parallel") {
            ExecMode::Parallel
        } else {
            ExecMode::Sequential
        }
    }
}

/// Chunk count is fixed (not derived from the thread pool) so that chunk
/// boundaries — and therefore accumulation order — never depend on the host.
pub const FIXED_CHUNKS: usize = 8;

/// Ordered map: `out[i] = f(i, &items[i])`.
pub fn map_indexed<T, U, F>(mode: ExecMode, items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(usize, &T) -> U + Sync,
{
    match mode {
        ExecMode::Sequential => items.iter().enumerate().map(|(i, t)| f(i, t)).collect(),
        ExecMode::Parallel => {
            #[cfg(feature = "parallel")]
            {
                items
                    .par_iter()
                    .enumerate()
                    .map(|(i, t)| f(i, t))
                    .collect()
            }
            #[cfg(not(feature = "parallel"))]
            {
                items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
            }
        }
    }
}

/// Fold `items` into per-chunk accumulators (in parallel when enabled), then
/// merge the accumulators left-to-right in chunk order.
///
/// `fold` must only depend on the item and its global index; `merge` must be
/// associative over adjacent accumulators. Under those conditions the result
/// is independent of the execution mode.
pub fn chunked_fold<T, A, FInit, FFold, FMerge>(
    mode: ExecMode,
    items: &[T],
    init: FInit,
    fold: FFold,
    merge: FMerge,
) -> A
where
    T: Sync,
    A: Send,
    FInit: Fn() -> A + Sync,
    FFold: Fn(&mut A, usize, &T) + Sync,
    FMerge: Fn(&mut A, A),
{
    if items.is_empty() {
        return init();
    }
    let chunk_size = items.len().div_ceil(FIXED_CHUNKS);
    let ranges: Vec<(usize, usize)> = (0..items.len())
        .step_by(chunk_size)
        .map(|start| (start, (start + chunk_size).min(items.len())))
        .collect();

    let run_chunk = |&(start, end): &(usize, usize)| -> A {
        let mut acc = init();
        for i in start..end {
            fold(&mut acc, i, &items[i]);
        }
        acc
    };

    let accs: Vec<A> = match mode {
        ExecMode::Sequential => ranges.iter().map(run_chunk).collect(),
        ExecMode::Parallel => {
            #[cfg(feature = "parallel")]
            {
                ranges.par_iter().map(run_chunk).collect()
            }
            #[cfg(not(feature = "parallel"))]
            {
                ranges.iter().map(run_chunk).collect()
            }
        }
    };

    let mut accs = accs.into_iter();
    let mut total = accs.next().expect("at least one chunk");
    for a in accs {
        merge(&mut total, a);
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order() {
        let items: Vec<u32> = (0..100).collect();
        let seq = map_indexed(ExecMode::Sequential, &items, |i, &x| i as u32 + x);
        let par = map_indexed(ExecMode::Parallel, &items, |i, &x| i as u32 + x);
        assert_eq!(seq, par);
    }

    #[test]
    fn chunked_fold_is_mode_invariant() {
        // Floating-point sums are order sensitive; identical results across
        // modes prove the accumulation order is fixed.
        let items: Vec<f64> = (0..1000).map(|i| (i as f64).sin() * 1e-3).collect();
        let sum = |mode| {
            chunked_fold(
                mode,
                &items,
                || 0.0f64,
                |acc, _, &x| *acc += x,
                |acc, a| *acc += a,
            )
        };
        let s = sum(ExecMode::Sequential);
        let p = sum(ExecMode::Parallel);
        assert_eq!(s.to_bits(), p.to_bits());
    }

    #[test]
    fn chunked_fold_handles_empty_and_tiny_inputs() {
        let empty: Vec<f64> = vec![];
        let z = chunked_fold(
            ExecMode::Parallel,
            &empty,
            || 0.0f64,
            |acc, _, &x| *acc += x,
            |acc, a| *acc += a,
        );
        assert_eq!(z, 0.0);

        let one = vec![2.5f64];
        let s = chunked_fold(
            ExecMode::Parallel,
            &one,
            || 0.0f64,
            |acc, _, &x| *acc += x,
            |acc, a| *acc += a,
        );
        assert_eq!(s, 2.5);
    }
}
