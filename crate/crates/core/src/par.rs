//! Batch-level parallel map helpers.
//!
//! Heavy loops in this crate (episode generation, per-sequence
//! forward/backward inside a batch, trajectory sampling, reward scoring,
//! evaluation) are expressed as maps over independent items. With the
//! `parallel` feature (default) [`par_map`] runs them on the rayon pool;
//! without it the same call is a plain sequential map. Results are always
//! collected in input order and each item is computed independently, so
//! outputs are bit-identical regardless of thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map over items, in parallel when the `parallel` feature is enabled.
#[cfg(feature = "parallel")]
pub fn par_map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    items.par_iter().map(f).collect()
}

/// Map over items, in parallel when the `parallel` feature is enabled.
#[cfg(not(feature = "parallel"))]
pub fn par_map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    items.iter().map(f).collect()
}

/// Always-sequential map with the same signature as [`par_map`].
///
/// Kept as a separate entry point so the bench suite can compare the two
/// dispatches directly.
pub fn seq_map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    items.iter().map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn par_and_seq_agree_in_order() {
        let items: Vec<u64> = (0..257).collect();
        let f = |x: &u64| x.wrapping_mul(0x9E3779B97F4A7C15) ^ 17;
        assert_eq!(par_map(&items, f), seq_map(&items, f));
    }
}
