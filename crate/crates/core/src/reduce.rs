//! Order-fixed reductions.
//!
//! Sums are taken over fixed-size chunks and then combined in a pairwise
//! tree whose shape depends only on the input length, so results are
//! bit-identical for any rayon worker count.

use rayon::prelude::*;

pub(crate) const CHUNK: usize = 4096;

fn pairwise(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        n => {
            let (a, b) = values.split_at(n / 2);
            pairwise(a) + pairwise(b)
        }
    }
}

/// Deterministic sum of a slice.
pub fn det_sum(values: &[f64]) -> f64 {
    let partial: Vec<f64> = values.par_chunks(CHUNK).map(|c| c.iter().sum()).collect();
    pairwise(&partial)
}

/// Deterministic sum of `f(i)` for `i in 0..n`.
pub fn det_sum_by<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync,
{
    let chunks = n.div_ceil(CHUNK);
    let partial: Vec<f64> = (0..chunks)
        .into_par_iter()
        .map(|c| (c * CHUNK..((c + 1) * CHUNK).min(n)).map(&f).sum())
        .collect();
    pairwise(&partial)
}

/// Deterministic component-wise sum of vector-valued `f(i, out)` for
/// `i in 0..n`; `f` adds its contribution into `out` (length `width`).
pub fn det_vec_sum_by<F>(n: usize, width: usize, f: F) -> Vec<f64>
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    let chunks = n.div_ceil(CHUNK);
    let partial: Vec<Vec<f64>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = vec![0.0; width];
            for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                f(i, &mut acc);
            }
            acc
        })
        .collect();
    (0..width)
        .map(|j| {
            let column: Vec<f64> = partial.iter().map(|p| p[j]).collect();
            pairwise(&column)
        })
        .collect()
}
