//! Data-parallel helpers with a sequential fallback.
//!
//! Results are always returned in input order, so reductions over them are
//! bit-identical whichever mode runs.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

impl Execution {
    /// `Parallel` degrades to sequential when the `parallel` feature is off.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }
}

pub fn map<T, R, F>(exec: Execution, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return items.par_iter().map(f).collect();
    }
    let _ = exec;
    items.iter().map(f).collect()
}

pub fn map_chunks<T, R, F>(exec: Execution, items: &[T], chunk: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&[T]) -> R + Sync + Send,
{
    let chunk = chunk.max(1);
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return items.par_chunks(chunk).map(f).collect();
    }
    let _ = exec;
    items.chunks(chunk).map(f).collect()
}

/// Maps fixed-size chunks and folds the results strictly in chunk order, so
/// the outcome does not depend on the mode or thread count. Parallel mode
/// evaluates `window` chunks at a time to bound the number of live results.
pub fn map_fold_chunks<T, R, A, F, G>(
    exec: Execution,
    items: &[T],
    chunk: usize,
    window: usize,
    map: F,
    init: A,
    mut fold: G,
) -> A
where
    T: Sync,
    R: Send,
    F: Fn(&[T]) -> R + Sync + Send,
    G: FnMut(A, R) -> A,
{
    let chunk = chunk.max(1);
    let mut acc = init;
    if exec.is_parallel() {
        for group in items.chunks(chunk * window.max(1)) {
            for r in map_chunks(exec, group, chunk, &map) {
                acc = fold(acc, r);
            }
        }
    } else {
        for c in items.chunks(chunk) {
            acc = fold(acc, map(c));
        }
    }
    acc
}
