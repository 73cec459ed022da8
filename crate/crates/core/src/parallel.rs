//! Deterministic parallel maps: work is distributed over a rayon pool, results are
//! returned in index order and reduced sequentially by the caller.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Evaluates `f(i)` for `i in 0..n` in parallel and returns the results in order.
/// The error of the smallest failing index wins, independent of scheduling.
pub fn par_map<T: Send>(n: u64, f: impl Fn(u64) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    let out: Vec<Result<T>> = (0..n).into_par_iter().map(&f).collect();
    out.into_iter().collect()
}

/// Runs `f` inside a dedicated pool with `threads` workers (0 = available parallelism).
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::config(format!("cannot build thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Thread count from `MFW_THREADS`, if set and valid.
pub fn threads_from_env() -> Option<usize> {
    std::env::var("MFW_THREADS").ok()?.trim().parse().ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ordered_results_and_first_error() {
        let v = with_threads(2, || par_map(100, |i| Ok(i * i))).unwrap().unwrap();
        assert_eq!(v[7], 49);
        let e = par_map(50, |i| if i % 10 == 3 { Err(Error::BlowUp { step: i as usize, norm: 1.0 }) } else { Ok(i) });
        assert!(matches!(e, Err(Error::BlowUp { step: 3, .. })));
    }
}
