//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::params::ParamStore;

/// `||a - n|| / max(1e-8, ||a|| + ||n||)` over paired entries.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    diff / (norm(&mut analytic.iter().copied()) + norm(&mut numeric.iter().copied())).max(1e-8)
}

/// Compare `analytic` against central differences of `f` at `theta` on the
/// given coordinates. Returns the relative error over those coordinates.
pub fn grad_check(
    mut f: impl FnMut(&[f64]) -> f64,
    theta: &[f64],
    analytic: &[f64],
    eps: f64,
    coords: &[usize],
) -> f64 {
    let mut point = theta.to_vec();
    let mut numeric = Vec::with_capacity(coords.len());
    for &i in coords {
        let orig = point[i];
        point[i] = orig + eps;
        let up = f(&point);
        point[i] = orig - eps;
        let down = f(&point);
        point[i] = orig;
        numeric.push((up - down) / (2.0 * eps));
    }
    let picked: Vec<f64> = coords.iter().map(|&i| analytic[i]).collect();
    relative_error(&picked, &numeric)
}

/// Deterministic coordinate subset: all coordinates when `n <= max`,
/// otherwise `max` distinct indices drawn with `seed`.
pub fn sample_coords(n: usize, max: usize, seed: u64) -> Vec<usize> {
    if n <= max {
        return (0..n).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, n, max).into_vec();
    idx.sort_unstable();
    idx
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub rel_error: f64,
    pub coords: usize,
}

/// Finite-difference check of every trainable entry in `ps`. `loss` must
/// evaluate the objective at the store's current values; `ps` must already
/// hold the analytic gradients of that objective. Frozen entries and buffers
/// are skipped.
pub fn grad_check_store(
    ps: &mut ParamStore<f64>,
    mut loss: impl FnMut(&ParamStore<f64>) -> Result<f64>,
    eps: f64,
    max_coords_per_param: usize,
    seed: u64,
) -> Result<Vec<ParamCheck>> {
    let mut report = Vec::new();
    for idx in 0..ps.len() {
        let entry = &ps.entries()[idx];
        if !entry.trainable() {
            continue;
        }
        let name = entry.name.clone();
        let analytic = entry.grad.data().to_vec();
        let coords = sample_coords(analytic.len(), max_coords_per_param, seed ^ idx as u64);
        let mut numeric = Vec::with_capacity(coords.len());
        for &c in &coords {
            let orig = ps.entries()[idx].value.data()[c];
            ps.entries_mut()[idx].value.data_mut()[c] = orig + eps;
            let up = loss(ps)?;
            ps.entries_mut()[idx].value.data_mut()[c] = orig - eps;
            let down = loss(ps)?;
            ps.entries_mut()[idx].value.data_mut()[c] = orig;
            numeric.push((up - down) / (2.0 * eps));
        }
        let picked: Vec<f64> = coords.iter().map(|&c| analytic[c]).collect();
        report.push(ParamCheck {
            name,
            rel_error: relative_error(&picked, &numeric),
            coords: coords.len(),
        });
    }
    Ok(report)
}
