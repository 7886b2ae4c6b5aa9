//! Covariance matrix adaptation evolution strategy with rank-one and rank-mu
//! covariance updates and cumulative step-size adaptation.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CmaesOptions {
    /// Offspring per generation; `None` picks `4 + floor(3 ln d)`.
    pub population: Option<usize>,
    pub sigma0: f64,
    pub max_evals: usize,
    pub seed: u64,
}

impl Default for CmaesOptions {
    fn default() -> Self {
        Self {
            population: None,
            sigma0: 1.0,
            max_evals: 2000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CmaesResult {
    /// Best point ever evaluated.
    pub x: Vec<f64>,
    pub f: f64,
    pub evals: usize,
    pub generations: usize,
    /// Distribution mean and step size when the loop stopped.
    pub mean: Vec<f64>,
    pub sigma: f64,
}

pub fn default_population(dim: usize) -> usize {
    4 + (3.0 * (dim as f64).ln()).floor() as usize
}

/// Minimizes `f` starting from the mean `x0`.
///
/// Stops after `max_evals` evaluations or once the step size falls below
/// `1e-12`. The whole run is a function of `opts.seed` and the ranking of
/// objective values, so adding a constant to `f` leaves every iterate
/// unchanged.
pub fn cma_es_minimize<F>(mut f: F, x0: &[f64], opts: &CmaesOptions) -> Result<CmaesResult>
where
    F: FnMut(&[f64]) -> f64,
{
    let n = x0.len();
    if n == 0 {
        return Err(Error::InvalidArgument("CMA-ES needs dimension >= 1".into()));
    }
    if !(opts.sigma0 > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "sigma0 must be positive, got {}",
            opts.sigma0
        )));
    }
    let lambda = opts.population.unwrap_or_else(|| default_population(n));
    if lambda < 4 {
        return Err(Error::InvalidArgument(format!(
            "population must be at least 4, got {lambda}"
        )));
    }
    let nf = n as f64;
    let mu = lambda / 2;
    let raw: Vec<f64> = (1..=mu)
        .map(|i| (mu as f64 + 0.5).ln() - (i as f64).ln())
        .collect();
    let wsum: f64 = raw.iter().sum();
    let weights: Vec<f64> = raw.iter().map(|w| w / wsum).collect();
    let mu_eff = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();

    let c_sigma = (mu_eff + 2.0) / (nf + mu_eff + 5.0);
    let d_sigma = 1.0 + 2.0 * (((mu_eff - 1.0) / (nf + 1.0)).sqrt() - 1.0).max(0.0) + c_sigma;
    let c_c = (4.0 + mu_eff / nf) / (nf + 4.0 + 2.0 * mu_eff / nf);
    let c_1 = 2.0 / ((nf + 1.3).powi(2) + mu_eff);
    let c_mu = (1.0 - c_1)
        .min(2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((nf + 2.0).powi(2) + mu_eff));
    let chi_n = nf.sqrt() * (1.0 - 1.0 / (4.0 * nf) + 1.0 / (21.0 * nf * nf));
    let eigen_interval = lambda as f64 / (c_1 + c_mu) / nf / 10.0;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut mean = DVector::from_column_slice(x0);
    let mut sigma = opts.sigma0;
    let mut p_sigma = DVector::<f64>::zeros(n);
    let mut p_c = DVector::<f64>::zeros(n);
    let mut cov = DMatrix::<f64>::identity(n, n);
    let mut basis = DMatrix::<f64>::identity(n, n);
    let mut diag = DVector::<f64>::from_element(n, 1.0);
    let mut inv_sqrt = DMatrix::<f64>::identity(n, n);
    let mut last_eigen = 0usize;

    let mut best_x = x0.to_vec();
    let mut best_f = f64::INFINITY;
    let mut evals = 0usize;
    let mut generation = 0usize;
    // best value of each recent generation, for the flat-fitness stop
    let history_len = 10 + (30.0 * nf / lambda as f64).ceil() as usize;
    let mut recent: std::collections::VecDeque<f64> = std::collections::VecDeque::new();

    while evals < opts.max_evals {
        let mut ys = Vec::with_capacity(lambda);
        let mut scored = Vec::with_capacity(lambda);
        for k in 0..lambda {
            if evals >= opts.max_evals {
                break;
            }
            let z = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
            let y = &basis * diag.component_mul(&z);
            let x = &mean + sigma * &y;
            let fx = f(x.as_slice());
            evals += 1;
            if !fx.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("CMA-ES objective at evaluation {evals}"),
                    value: fx,
                });
            }
            if fx < best_f {
                best_f = fx;
                best_x = x.as_slice().to_vec();
            }
            ys.push(y);
            scored.push((fx, k));
        }
        if scored.len() < lambda {
            break;
        }
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        recent.push_back(scored[0].0);
        if recent.len() > history_len {
            recent.pop_front();
        }

        let mut y_w = DVector::<f64>::zeros(n);
        for (w, &(_, k)) in weights.iter().zip(&scored) {
            y_w += *w * &ys[k];
        }
        mean += sigma * &y_w;

        p_sigma = (1.0 - c_sigma) * &p_sigma
            + (c_sigma * (2.0 - c_sigma) * mu_eff).sqrt() * (&inv_sqrt * &y_w);
        let ps_norm = p_sigma.norm();
        let decay = 1.0 - (1.0 - c_sigma).powi(2 * (generation as i32 + 1));
        let h_sigma = if ps_norm / decay.sqrt() < (1.4 + 2.0 / (nf + 1.0)) * chi_n {
            1.0
        } else {
            0.0
        };
        p_c = (1.0 - c_c) * &p_c + h_sigma * (c_c * (2.0 - c_c) * mu_eff).sqrt() * &y_w;

        let mut rank_mu = DMatrix::<f64>::zeros(n, n);
        for (w, &(_, k)) in weights.iter().zip(&scored) {
            rank_mu += *w * &ys[k] * ys[k].transpose();
        }
        let delta_h = (1.0 - h_sigma) * c_c * (2.0 - c_c);
        cov = (1.0 - c_1 - c_mu) * &cov
            + c_1 * (&p_c * p_c.transpose() + delta_h * &cov)
            + c_mu * rank_mu;

        sigma *= ((c_sigma / d_sigma) * (ps_norm / chi_n - 1.0)).exp();
        generation += 1;

        if (generation - last_eigen) as f64 > eigen_interval {
            last_eigen = generation;
            cov = (&cov + cov.transpose()) * 0.5;
            let eig = SymmetricEigen::new(cov.clone());
            basis = eig.eigenvectors;
            diag = eig.eigenvalues.map(|v| v.max(1e-300).sqrt());
            let inv_diag = DMatrix::from_diagonal(&diag.map(|d| 1.0 / d));
            inv_sqrt = &basis * inv_diag * basis.transpose();
        }

        if converged(&scored, &recent, history_len, sigma, &diag) {
            break;
        }
    }

    Ok(CmaesResult {
        x: best_x,
        f: best_f,
        evals,
        generations: generation,
        mean: mean.as_slice().to_vec(),
        sigma,
    })
}

/// Fitness spread of at most `1e-12` over the generation and the recent
/// history, a sampling scale below `1e-12` in every direction, or a
/// covariance condition number above `1e14`.
fn converged(
    scored: &[(f64, usize)],
    recent: &std::collections::VecDeque<f64>,
    history_len: usize,
    sigma: f64,
    diag: &DVector<f64>,
) -> bool {
    let gen_lo = scored[0].0;
    let gen_hi = scored[scored.len() - 1].0;
    let hist_lo = recent.iter().copied().fold(f64::INFINITY, f64::min);
    let hist_hi = recent.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let flat = recent.len() == history_len
        && gen_hi.max(hist_hi) - gen_lo.min(hist_lo) <= 1e-12;
    let d_max = diag.max();
    let d_min = diag.min();
    flat || sigma * d_max < 1e-12 || d_max > 1e7 * d_min
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sphere(x: &[f64]) -> f64 {
        x.iter().map(|v| v * v).sum()
    }

    fn rosenbrock(x: &[f64]) -> f64 {
        (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2)
    }

    #[test]
    fn canonical_population() {
        assert_eq!(default_population(1), 4);
        assert_eq!(default_population(5), 8);
        assert_eq!(default_population(10), 10);
    }

    #[test]
    fn sphere_converges() {
        let opts = CmaesOptions {
            max_evals: 5000,
            seed: 1,
            ..CmaesOptions::default()
        };
        let r = cma_es_minimize(sphere, &[3.0; 5], &opts).unwrap();
        assert!(r.f < 1e-8, "f = {}", r.f);
        assert!(r.evals <= 5000);
    }

    #[test]
    fn one_dimensional_quadratic() {
        let opts = CmaesOptions {
            max_evals: 2000,
            seed: 4,
            ..CmaesOptions::default()
        };
        let r = cma_es_minimize(|x| (x[0] - 2.0).powi(2), &[0.0], &opts).unwrap();
        assert!((r.x[0] - 2.0).abs() < 1e-4, "x = {}", r.x[0]);
    }

    #[test]
    fn rosenbrock_converges() {
        let opts = CmaesOptions {
            sigma0: 0.5,
            max_evals: 20000,
            seed: 2,
            ..CmaesOptions::default()
        };
        let r = cma_es_minimize(rosenbrock, &[-1.2, 1.0], &opts).unwrap();
        assert!(r.f < 1e-6, "f = {}", r.f);
    }

    #[test]
    fn converged_runs_stop_instead_of_degenerating() {
        // with every sample at the exact optimum the ranking carries no
        // information; without a stop the covariance collapses and overflows
        for seed in 0..10 {
            let opts = CmaesOptions {
                sigma0: 0.5,
                max_evals: 20000,
                seed,
                ..CmaesOptions::default()
            };
            let r = cma_es_minimize(rosenbrock, &[-1.2, 1.0], &opts).unwrap();
            assert!(r.f < 1e-10, "seed {seed}: f = {}", r.f);
            assert!(r.evals < 20000, "seed {seed} ran to the evaluation cap");
        }
        let flat = cma_es_minimize(|_| 1.0, &[0.0, 0.0], &CmaesOptions::default()).unwrap();
        assert!(flat.evals < 2000);
    }

    #[test]
    fn translation_leaves_iterates_unchanged() {
        let opts = CmaesOptions {
            max_evals: 400,
            seed: 9,
            ..CmaesOptions::default()
        };
        let a = cma_es_minimize(sphere, &[3.0; 4], &opts).unwrap();
        let b = cma_es_minimize(|x| sphere(x) + 0.5, &[3.0; 4], &opts).unwrap();
        assert_eq!(a.x, b.x);
        assert_eq!(a.mean, b.mean);
        assert_eq!(a.sigma.to_bits(), b.sigma.to_bits());
        assert_eq!(a.evals, b.evals);
    }

    #[test]
    fn rejects_bad_input() {
        let o = CmaesOptions::default();
        assert!(cma_es_minimize(sphere, &[], &o).is_err());
        let bad = CmaesOptions {
            population: Some(3),
            ..o.clone()
        };
        assert!(cma_es_minimize(sphere, &[1.0], &bad).is_err());
        let err = cma_es_minimize(|_| f64::NAN, &[1.0], &o).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn seeded_runs_repeat() {
        let o = CmaesOptions {
            max_evals: 300,
            seed: 5,
            ..CmaesOptions::default()
        };
        let a = cma_es_minimize(rosenbrock, &[0.0, 0.0], &o).unwrap();
        let b = cma_es_minimize(rosenbrock, &[0.0, 0.0], &o).unwrap();
        assert_eq!(a, b);
    }
}
