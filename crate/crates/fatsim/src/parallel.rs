//! Data-parallel map helper with a sequential fallback.
//!
//! With the `parallel` feature (default) work is spread over a rayon pool;
//! without it the same call runs sequentially. Output order always follows
//! input order, so results are independent of scheduling either way.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Number of worker threads to use, honoring the FATSIM_THREADS cap.
pub fn effective_threads() -> usize {
    let cap = std::env::var("FATSIM_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0);
    #[cfg(feature = "parallel")]
    {
        let avail = rayon::current_num_threads();
        cap.map_or(avail, |c| c.min(avail))
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = cap;
        1
    }
}

/// Map `f` over `items`, in parallel when available and requested.
pub fn par_map<T, U, F>(items: Vec<T>, threads: usize, f: F) -> Vec<U>
where
    T: Send,
    U: Send,
    F: Fn(T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if threads > 1 {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .expect("rayon pool");
            return pool.install(|| items.into_par_iter().map(&f).collect());
        }
    }
    let _ = threads;
    items.into_iter().map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preserves_input_order() {
        let out = par_map((0..100).collect::<Vec<_>>(), 4, |i| i * 2);
        assert_eq!(out, (0..100).map(|i| i * 2).collect::<Vec<_>>());
    }

    #[test]
    fn sequential_path_matches_parallel() {
        let seq = par_map((0..50).collect::<Vec<_>>(), 1, |i| (i as f64).sin());
        let par = par_map((0..50).collect::<Vec<_>>(), 4, |i| (i as f64).sin());
        for (a, b) in seq.iter().zip(&par) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
