//! Rayon-backed executor. Work is dispatched by index and collected in
//! index order, so results are independent of the worker count; combined
//! with the core's fixed fold order this makes whole runs bit-reproducible
//! across `--threads` settings.

use mlmc_core::exec::Executor;
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, Default)]
pub struct RayonExecutor;

impl Executor for RayonExecutor {
    fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        (0..n).into_par_iter().map(f).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn results_come_back_in_index_order() {
        let out = RayonExecutor.map(1000, |i| i * i);
        assert_eq!(out.len(), 1000);
        for (i, v) in out.iter().enumerate() {
            assert_eq!(*v, i * i);
        }
    }

    #[test]
    fn order_is_stable_across_pool_sizes() {
        let base = RayonExecutor.map(500, |i| (i as f64).sin());
        for threads in [1usize, 3] {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            let got = pool.install(|| RayonExecutor.map(500, |i| (i as f64).sin()));
            assert_eq!(got, base);
        }
    }
}
