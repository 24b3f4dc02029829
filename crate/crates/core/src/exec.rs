//! Execution strategy for path-parallel work.
//!
//! Every per-path computation in the crate goes through [`Exec`]. With the
//! `parallel` feature (on by default) `Exec::Parallel` dispatches to rayon;
//! without it both variants run sequentially. Results never depend on the
//! variant: work items are indexed, outputs are written by index, and all
//! reductions use [`pairwise_sum`] over index-ordered slices.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

impl Exec {
    /// Evaluates `f(i)` for `i in 0..n` and collects the results in index order.
    pub fn map<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel => (0..n).into_par_iter().map(f).collect(),
            _ => (0..n).map(f).collect(),
        }
    }

    /// Calls `f(row_index, row)` on consecutive `row_len`-sized chunks of `data`.
    pub fn for_each_row<F>(self, data: &mut [f64], row_len: usize, f: F)
    where
        F: Fn(usize, &mut [f64]) + Sync + Send,
    {
        assert!(row_len > 0 && data.len().is_multiple_of(row_len));
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel => data.par_chunks_mut(row_len).enumerate().for_each(|(i, row)| f(i, row)),
            _ => data.chunks_mut(row_len).enumerate().for_each(|(i, row)| f(i, row)),
        }
    }

    /// Fills two row-major arrays with the same row layout in one pass.
    pub fn for_each_row_pair<F>(self, a: &mut [f64], b: &mut [f64], row_len: usize, f: F)
    where
        F: Fn(usize, &mut [f64], &mut [f64]) + Sync + Send,
    {
        assert!(row_len > 0 && a.len() == b.len() && a.len().is_multiple_of(row_len));
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel => a
                .par_chunks_mut(row_len)
                .zip(b.par_chunks_mut(row_len))
                .enumerate()
                .for_each(|(i, (ra, rb))| f(i, ra, rb)),
            _ => a
                .chunks_mut(row_len)
                .zip(b.chunks_mut(row_len))
                .enumerate()
                .for_each(|(i, (ra, rb))| f(i, ra, rb)),
        }
    }
}

/// Pairwise (cascade) summation; the result depends only on the slice order.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const LEAF: usize = 32;
    if xs.len() <= LEAF {
        let mut s = 0.0;
        for &x in xs {
            s += x;
        }
        s
    } else {
        let mid = xs.len() / 2;
        pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
    }
}

/// Sample mean and standard error of the mean.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
}

impl MeanSe {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        assert!(n > 0, "MeanSe of an empty sample");
        let mean = pairwise_sum(xs) / n as f64;
        if n == 1 {
            return Self { mean, se: 0.0 };
        }
        let sq: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
        let var = pairwise_sum(&sq) / (n - 1) as f64;
        Self {
            mean,
            se: (var / n as f64).sqrt(),
        }
    }
}
