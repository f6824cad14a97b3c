//! Feature-drift diagnostic: project two feature sets onto a shared random
//! direction, fit Gaussian kernel density estimates, and measure the total
//! variation distance between them.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::rng::rng_for;
use crate::tensor::Tensor;

pub const GRID_POINTS: usize = 512;

/// Unit direction for `dim`-dimensional features, fixed by `seed`.
pub fn projection(dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = rng_for(seed, "kde-direction", dim as u64);
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
    v.into_iter().map(|x| x / n).collect()
}

/// Scott's rule `σ·n^(−1/5)`, floored so a constant sample still has width.
pub fn scott_bandwidth(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (var.sqrt() * n.powf(-0.2)).max(1e-6)
}

pub fn kde(xs: &[f64], h: f64, at: f64) -> f64 {
    let norm = 1.0 / (xs.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    xs.iter().map(|x| (-0.5 * ((at - x) / h).powi(2)).exp()).sum::<f64>() * norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KdeCurves {
    pub grid: Vec<f64>,
    pub before: Vec<f64>,
    pub after: Vec<f64>,
    pub distance: f64,
}

fn project(t: &Tensor, dir: &[f64]) -> Vec<f64> {
    (0..t.rows())
        .map(|r| t.row(r).iter().zip(dir).map(|(a, b)| a * b).sum())
        .collect()
}

/// Densities of both sets on a common grid plus their total variation
/// distance `½∫|p−q|`.
pub fn kde_curves(before: &Tensor, after: &Tensor, seed: u64) -> Result<KdeCurves> {
    if before.rows() == 0 || after.rows() == 0 {
        return Err(invalid!("kde shift needs non-empty feature sets"));
    }
    if before.cols() != after.cols() {
        return Err(invalid!("feature dims differ: {} vs {}", before.cols(), after.cols()));
    }
    let dir = projection(before.cols(), seed);
    let (a, b) = (project(before, &dir), project(after, &dir));
    let (ha, hb) = (scott_bandwidth(&a), scott_bandwidth(&b));
    let lo = a.iter().chain(&b).cloned().fold(f64::INFINITY, f64::min) - 4.0 * ha.max(hb);
    let hi = a.iter().chain(&b).cloned().fold(f64::NEG_INFINITY, f64::max) + 4.0 * ha.max(hb);
    let step = (hi - lo) / (GRID_POINTS - 1) as f64;
    let grid: Vec<f64> = (0..GRID_POINTS).map(|i| lo + i as f64 * step).collect();
    let pa: Vec<f64> = grid.iter().map(|&x| kde(&a, ha, x)).collect();
    let pb: Vec<f64> = grid.iter().map(|&x| kde(&b, hb, x)).collect();
    let diff: Vec<f64> = pa.iter().zip(&pb).map(|(p, q)| (p - q).abs()).collect();
    let integral: f64 = diff.windows(2).map(|w| 0.5 * (w[0] + w[1]) * step).sum();
    Ok(KdeCurves {
        grid,
        before: pa,
        after: pb,
        distance: 0.5 * integral,
    })
}

pub fn kde_shift(before: &Tensor, after: &Tensor, seed: u64) -> Result<f64> {
    Ok(kde_curves(before, after, seed)?.distance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gaussian(n: usize, d: usize, shift: f64, seed: u64) -> Tensor {
        let t = Tensor::randn(n, d, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        // shift along the projection so the 1-D marginal moves by `shift`
        let dir = projection(d, 0);
        let mut out = t.clone();
        for r in 0..n {
            for (v, u) in out.row_mut(r).iter_mut().zip(&dir) {
                *v += shift * u;
            }
        }
        out
    }

    #[test]
    fn identical_sets_have_zero_shift() {
        let a = gaussian(200, 4, 0.0, 1);
        assert!(kde_shift(&a, &a, 0).unwrap() < 1e-6);
    }

    #[test]
    fn shift_grows_with_mean_offset() {
        let a = gaussian(500, 4, 0.0, 1);
        let near = gaussian(500, 4, 0.5, 2);
        let far = gaussian(500, 4, 3.0, 3);
        let dn = kde_shift(&a, &near, 0).unwrap();
        let df = kde_shift(&a, &far, 0).unwrap();
        assert!(df > dn, "{df} vs {dn}");
        // analytic TV between N(0,1) and N(3,1) is 2Φ(1.5)−1 ≈ 0.866
        assert!((df - 0.866).abs() < 0.1, "{df}");
    }

    #[test]
    fn errors() {
        let a = gaussian(10, 4, 0.0, 1);
        assert!(kde_shift(&a, &gaussian(10, 3, 0.0, 1), 0).is_err());
        assert!(kde_shift(&a, &Tensor::zeros(0, 4), 0).is_err());
    }

    #[test]
    fn density_integrates_to_one() {
        let a = gaussian(300, 2, 0.0, 4);
        let c = kde_curves(&a, &a, 0).unwrap();
        let step = c.grid[1] - c.grid[0];
        let mass: f64 = c.before.iter().sum::<f64>() * step;
        assert!((mass - 1.0).abs() < 1e-3, "{mass}");
    }
}
