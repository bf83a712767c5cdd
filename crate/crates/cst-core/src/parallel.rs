//! Execution helpers: data-parallel via rayon under the `parallel` feature,
//! plain loops otherwise.
//!
//! Every entry point is deterministic for any worker count. Index maps write
//! disjoint outputs collected in index order, and floating-point reductions
//! sum fixed-size chunk partials in fixed chunk order, so the rounding tree
//! never depends on scheduling. The `_seq` twins run the identical tree on one
//! thread and are used as bit-exact references in tests and benches.

/// Rows per partial accumulator in chunked reductions. Fixed so the summation
/// tree is independent of thread count.
pub const REDUCE_CHUNK: usize = 256;

/// `(0..n).map(f)` collected in order, parallel when the feature allows.
pub fn indexed_map<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Sequential twin of [`indexed_map`].
pub fn indexed_map_seq<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    (0..n).map(f).collect()
}

/// Sums `n_chunks` dense partial vectors produced by `fill` into one vector of
/// `out_len`, combining partials in ascending chunk order.
pub fn chunk_accumulate<F>(out_len: usize, n_chunks: usize, fill: F) -> Vec<f64>
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    let partials = indexed_map(n_chunks, |ci| {
        let mut p = vec![0.0f64; out_len];
        fill(ci, &mut p);
        p
    });
    reduce_partials(out_len, &partials)
}

/// Sequential twin of [`chunk_accumulate`]; same summation tree.
pub fn chunk_accumulate_seq<F>(out_len: usize, n_chunks: usize, fill: F) -> Vec<f64>
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    let partials = indexed_map_seq(n_chunks, |ci| {
        let mut p = vec![0.0f64; out_len];
        fill(ci, &mut p);
        p
    });
    reduce_partials(out_len, &partials)
}

fn reduce_partials(out_len: usize, partials: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0f64; out_len];
    for p in partials {
        for (o, v) in out.iter_mut().zip(p) {
            *o += *v;
        }
    }
    out
}

/// Caps the global worker pool. Call once, before any parallel work; later
/// calls fail harmlessly. A no-op without the `parallel` feature.
pub fn configure_threads(n: usize) -> Result<(), String> {
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| e.to_string())
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = n;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_index_order() {
        let v = indexed_map(100, |i| i * i);
        assert_eq!(v, (0..100).map(|i| i * i).collect::<Vec<_>>());
    }

    #[test]
    fn chunked_reduction_matches_sequential_twin_bitwise() {
        let fill = |ci: usize, p: &mut [f64]| {
            for (i, v) in p.iter_mut().enumerate() {
                *v = ((ci * 31 + i) as f64).sin() * 1e-3;
            }
        };
        let a = chunk_accumulate(64, 7, fill);
        let b = chunk_accumulate_seq(64, 7, fill);
        assert_eq!(a, b);
    }
}
