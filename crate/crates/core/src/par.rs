//! Data-parallel map used by batch scoring and Monte Carlo sweeps. With the
//! `parallel` feature (default) work is spread over the rayon pool; without
//! it the same calls run sequentially.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `f` over `items`, in parallel when the `parallel` feature is enabled.
/// Output order always matches input order.
pub fn par_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        seq_map(items, f)
    }
}

/// Sequential reference path, always available for comparison.
pub fn seq_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R,
{
    items.iter().map(f).collect()
}

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn par_and_seq_agree() {
        let xs: Vec<u64> = (0..1000).collect();
        assert_eq!(par_map(&xs, |x| x * x + 1), seq_map(&xs, |x| x * x + 1));
    }
}
