use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::special::{bernoulli_entropy, logistic, xlogy, LN_2PI};

use super::design::Design;
use super::updates::{sweep, SlabScale, SweepInputs};

/// Fixed values for everything except `q(β, γ)` of a single response.
#[derive(Debug, Clone)]
pub struct FrozenGlobals {
    pub tau: f64,
    pub sigma2: f64,
    pub prior_inclusion: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct FrozenFit {
    pub mu: Vec<f64>,
    pub s2: Vec<f64>,
    pub g: Vec<f64>,
    /// Lower bound on `log p(y | τ, σ², π)`.
    pub elbo: f64,
    pub sweeps: usize,
}

/// Coordinate ascent over `q(β_s, γ_s)` with every other quantity held
/// at the values in `frozen`, iterated until no parameter moves by more
/// than `1e-13` (relative) or `max_sweeps` is reached.
pub fn fit_frozen(x: &DMatrix<f64>, y: &[f64], frozen: &FrozenGlobals, max_sweeps: usize) -> Result<FrozenFit> {
    let p = x.ncols();
    if frozen.prior_inclusion.len() != p || y.len() != x.nrows() {
        return Err(Error::Dimension("frozen fit inputs disagree in size".into()));
    }
    if !(frozen.tau > 0.0 && frozen.sigma2 > 0.0) {
        return Err(Error::Validation("frozen tau and sigma2 must be positive".into()));
    }
    let ym = DMatrix::from_column_slice(y.len(), 1, y);
    let design = Design::from_matrices(x, &ym);
    let prior_log_odds: Vec<f64> = frozen
        .prior_inclusion
        .iter()
        .map(|&pi| pi.ln() - (-pi).ln_1p())
        .collect();
    let phi = 1.0 / frozen.sigma2;
    let inputs = SweepInputs {
        e_tau: frozen.tau,
        elog_tau: frozen.tau.ln(),
        slab: SlabScale {
            e_sig: phi,
            elog_sig: phi.ln(),
        },
        prior_log_odds: &prior_log_odds,
        temperature: 1.0,
    };
    let mut mu = vec![0.0; p];
    let mut s2 = vec![1.0; p];
    let mut g: Vec<f64> = frozen.prior_inclusion.clone();
    let mut xr = design.fresh_xr(0, &vec![0.0; p]);
    let mut sweeps = 0;
    while sweeps < max_sweeps {
        let before: Vec<f64> = mu.iter().chain(&g).copied().collect();
        sweep(&design, &inputs, &mut mu, &mut s2, &mut g, &mut xr).map_err(|s| Error::Numerical {
            trait_index: Some(0),
            predictor: Some(s),
            iteration: sweeps,
            what: "non-finite frozen-globals update".into(),
        })?;
        sweeps += 1;
        let moved = before
            .iter()
            .zip(mu.iter().chain(&g))
            .any(|(a, b)| (a - b).abs() > 1e-13 * (1.0 + a.abs()));
        if !moved {
            break;
        }
    }
    let m: Vec<f64> = g.iter().zip(&mu).map(|(a, b)| a * b).collect();
    let xr = design.fresh_xr(0, &m);
    let sq_resid = design.expected_sq_residual(0, &g, &mu, &s2, &xr);
    let n = x.nrows() as f64;
    let tau = frozen.tau;
    let mut elbo = 0.5 * n * (tau.ln() - LN_2PI) - 0.5 * tau * sq_resid;
    for s in 0..p {
        let pi = frozen.prior_inclusion[s];
        elbo += xlogy(g[s], pi) + xlogy(1.0 - g[s], 1.0 - pi) + bernoulli_entropy(g[s]);
        if g[s] > 0.0 {
            elbo += g[s]
                * (0.5 * ((tau * phi).ln() - LN_2PI) - 0.5 * tau * phi * (mu[s] * mu[s] + s2[s])
                    + 0.5 * (LN_2PI + 1.0 + s2[s].ln()));
        }
    }
    Ok(FrozenFit {
        mu,
        s2,
        g,
        elbo,
        sweeps,
    })
}

/// Inclusion probability of the frozen single-predictor problem in closed
/// form: the posterior odds are the prior odds times the Bayes factor of
/// the slab against the spike.
pub fn single_predictor_ppi(x: &[f64], y: &[f64], frozen: &FrozenGlobals) -> f64 {
    let xx: f64 = x.iter().map(|v| v * v).sum();
    let xy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let a = xx + 1.0 / frozen.sigma2;
    let log_bf = 0.5 * frozen.tau * xy * xy / a - 0.5 * (frozen.sigma2 * a).ln();
    let pi = frozen.prior_inclusion[0];
    logistic(log_bf + pi.ln() - (-pi).ln_1p())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_predictor_fit_matches_closed_form() {
        let x = DMatrix::from_column_slice(4, 1, &[-1.5, -0.5, 0.5, 1.5]);
        let y = [0.3, -0.2, 0.9, 1.1];
        let frozen = FrozenGlobals {
            tau: 2.0,
            sigma2: 0.7,
            prior_inclusion: vec![0.2],
        };
        let fit = fit_frozen(&x, &y, &frozen, 100).unwrap();
        let expect = single_predictor_ppi(x.as_slice(), &y, &frozen);
        assert!((fit.g[0] - expect).abs() < 1e-12);
        let a = 5.0 + 1.0 / 0.7;
        assert!((fit.s2[0] - 1.0 / (2.0 * a)).abs() < 1e-14);
    }

    #[test]
    fn spike_only_prior_excludes_everything() {
        let x = DMatrix::from_column_slice(3, 2, &[1.0, 0.0, -1.0, 0.5, -1.0, 0.5]);
        let y = [1.0, 2.0, 3.0];
        let frozen = FrozenGlobals {
            tau: 1.0,
            sigma2: 1.0,
            prior_inclusion: vec![0.0, 0.0],
        };
        let fit = fit_frozen(&x, &y, &frozen, 50).unwrap();
        assert!(fit.g.iter().all(|&g| g == 0.0));
        let null = 0.5 * 3.0 * (-LN_2PI) - 0.5 * 14.0;
        assert!((fit.elbo - null).abs() < 1e-12);
    }
}
