//! Fuzzy C-means codebook updates.
//!
//! Every latent subvector holds a graded membership in every vector of its
//! codebook, `f_k ∝ d_k⁻²`. Each codebook vector then moves toward the
//! membership-weighted mean of the batch by a step size that shrinks
//! sharply with the vector's recent use rate, so rarely chosen vectors get
//! pulled back into the data while busy ones stay put.

use crate::vqvae::Codebook;

/// Default decay applied to usage counters once per update round.
pub const DEFAULT_USAGE_DECAY: f64 = 0.99;

/// Membership of one subvector in each codebook vector, from squared
/// Euclidean distances. Zero-distance vectors share full membership.
pub fn membership_from_sq_distances(sq_distances: &[f64]) -> Vec<f64> {
    let n = sq_distances.len();
    if n == 0 {
        return Vec::new();
    }
    let zeros = sq_distances.iter().filter(|&&d| d == 0.0).count();
    if zeros > 0 {
        let share = 1.0 / zeros as f64;
        return sq_distances
            .iter()
            .map(|&d| if d == 0.0 { share } else { 0.0 })
            .collect();
    }
    // d_k⁻² / Σ d_j⁻², rescaled by the smallest distance so no term overflows.
    let min = sq_distances.iter().copied().fold(f64::INFINITY, f64::min);
    let weights: Vec<f64> = sq_distances.iter().map(|&d| min / d).collect();
    let total: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / total).collect()
}

/// Membership row of `z` against every vector of `codebook`.
pub fn membership(z: &[f64], codebook: &Codebook) -> Vec<f64> {
    membership_from_sq_distances(&codebook.sq_distances(z))
}

/// Step size `exp(−10·N·R / (1 − ε) − 10⁻³)` for a vector with use rate
/// `rate` in a codebook of `codebook_size` vectors. Underflows to 0 for
/// busy vectors.
pub fn step_size(rate: f64, codebook_size: usize, decay: f64) -> f64 {
    debug_assert!((0.0..=1.0).contains(&rate), "use rate out of range: {rate}");
    debug_assert!(decay > 0.0 && decay < 1.0, "decay must lie in (0, 1)");
    (-10.0 * codebook_size as f64 * rate / (1.0 - decay) - 1e-3).exp()
}

/// One FCM round over a batch of subvectors belonging to this codebook.
///
/// Each vector `e_k` moves to `(1 − α_k)·e_k + α_k·m_k`, where `m_k` is the
/// membership-weighted batch mean and `α_k` comes from the usage stats as
/// they stood before this batch. Usage counters are decayed by `decay`, then
/// credited with this batch's nearest-vector selections.
pub fn fcm_update(codebook: &mut Codebook, batch: &[&[f64]], decay: f64) {
    if batch.is_empty() {
        return;
    }
    let n = codebook.len();
    let dim = codebook.dim();
    let mut numer = vec![0.0; n * dim];
    let mut denom = vec![0.0; n];
    let mut selected = Vec::with_capacity(batch.len());
    for z in batch {
        let sq = codebook.sq_distances(z);
        selected.push(argmin_lowest(&sq));
        let row = membership_from_sq_distances(&sq);
        for (k, &f) in row.iter().enumerate() {
            if f == 0.0 {
                continue;
            }
            denom[k] += f;
            for (acc, &zi) in numer[k * dim..(k + 1) * dim].iter_mut().zip(z.iter()) {
                *acc += f * zi;
            }
        }
    }
    let rates = codebook.use_rates();
    for k in 0..n {
        let alpha = step_size(rates[k], n, decay);
        if alpha == 0.0 || denom[k] == 0.0 {
            continue;
        }
        let mean = &numer[k * dim..(k + 1) * dim];
        for (e, &m) in codebook.vector_mut(k).iter_mut().zip(mean) {
            *e = (1.0 - alpha) * *e + alpha * (m / denom[k]);
        }
    }
    codebook.record_usage(&selected, decay);
}

/// Index of the smallest value; the lowest index wins exact ties.
pub(crate) fn argmin_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v < values[best] {
            best = i;
        }
    }
    best
}
