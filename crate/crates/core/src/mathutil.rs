use crate::error::{Error, Result};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha12Rng;

/// Standard normal draw via Box-Muller (keeps us independent of
/// distribution-crate version churn).
pub fn standard_normal(rng: &mut ChaCha12Rng) -> f64 {
    loop {
        let u1: f64 = rng.gen::<f64>();
        let u2: f64 = rng.gen::<f64>();
        if u1 > f64::MIN_POSITIVE {
            return (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        }
    }
}

/// Fills a `rows x cols` matrix with iid standard normals.
pub fn gaussian_matrix(rng: &mut ChaCha12Rng, rows: usize, cols: usize) -> Array2<f64> {
    let mut m = Array2::zeros((rows, cols));
    for v in m.iter_mut() {
        *v = standard_normal(rng);
    }
    m
}

/// Seeded random matrix with orthonormal rows (modified Gram-Schmidt over
/// Gaussian draws). Requires `rows <= cols`.
pub fn orthonormal_rows(rng: &mut ChaCha12Rng, rows: usize, cols: usize) -> Result<Array2<f64>> {
    if rows > cols {
        return Err(Error::config(format!(
            "cannot build {rows} orthonormal vectors in dimension {cols}"
        )));
    }
    let mut m = gaussian_matrix(rng, rows, cols);
    for i in 0..rows {
        for _attempt in 0..64 {
            for j in 0..i {
                let dot: f64 = (0..cols).map(|k| m[[i, k]] * m[[j, k]]).sum();
                for k in 0..cols {
                    m[[i, k]] -= dot * m[[j, k]];
                }
            }
            let norm: f64 = (0..cols).map(|k| m[[i, k]] * m[[i, k]]).sum::<f64>().sqrt();
            if norm > 1e-8 {
                for k in 0..cols {
                    m[[i, k]] /= norm;
                }
                break;
            }
            // degenerate draw; resample the row
            for k in 0..cols {
                m[[i, k]] = standard_normal(rng);
            }
        }
    }
    Ok(m)
}

/// Stratified (systematic) sample of `count` indices from a discrete
/// distribution. One uniform jitter is shared by all strata, which keeps
/// per-call class counts within one of their expectation.
pub fn stratified_sample(weights: &[f64], count: usize, rng: &mut ChaCha12Rng) -> Vec<usize> {
    debug_assert!(!weights.is_empty());
    let total: f64 = weights.iter().sum();
    let u: f64 = rng.gen::<f64>();
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let target = (u + i as f64) / count as f64 * total;
        let mut acc = 0.0;
        let mut chosen = weights.len() - 1;
        for (j, &w) in weights.iter().enumerate() {
            acc += w;
            if target < acc {
                chosen = j;
                break;
            }
        }
        out.push(chosen);
    }
    out
}

/// Weighted sampling without replacement (Efraimidis-Spirakis keys).
pub fn weighted_sample_without_replacement(
    weights: &[f64],
    count: usize,
    rng: &mut ChaCha12Rng,
) -> Vec<usize> {
    let mut keyed: Vec<(f64, usize)> = weights
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            let u: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
            (u.powf(1.0 / w.max(f64::MIN_POSITIVE)), i)
        })
        .collect();
    keyed.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    keyed.into_iter().take(count).map(|(_, i)| i).collect()
}

/// Fisher-Yates shuffle driven by the given stream.
pub fn shuffle<T>(items: &mut [T], rng: &mut ChaCha12Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}
