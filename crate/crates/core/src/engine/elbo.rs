use nalgebra::DMatrix;
use rayon::prelude::*;
use statrs::function::gamma::ln_gamma;

use crate::data::Dataset;
use crate::model::{GlobalFactor, Hyperparameters, LocalFactor, VariationalState};
use crate::special::{gamma_entropy, gamma_expected_log_density, gamma_moments, LN_2PI};

use super::updates::{probit_log_lik, trait_terms, SlabScale, TraitTerms};

/// ELBO split into expected log joint and entropy; the tempered objective
/// is `energy + T · entropy`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ElboParts {
    pub energy: f64,
    pub entropy: f64,
}

impl ElboParts {
    pub fn at(&self, temperature: f64) -> f64 {
        self.energy + temperature * self.entropy
    }
}

pub(crate) fn slab_scale(global: &GlobalFactor) -> SlabScale {
    let (e_sig, elog_sig) = global.sig_moments();
    SlabScale { e_sig, elog_sig }
}

/// Terms that involve the global factors: the inclusion coupling over all
/// `(s, t)`, the horseshoe hierarchy, the slab-scale prior and the
/// `σ⁻²`-dependent part of each trait's slab prior.
fn global_parts(global: &GlobalFactor, locals: &[LocalFactor], cache: &[TraitTerms], hyper: &Hyperparameters) -> ElboParts {
    let p = global.theta_mean.len();
    let q = locals.len();
    let slab = slab_scale(global);

    let coupling: f64 = locals
        .par_iter()
        .map(|lf| {
            let mut acc = 0.0;
            for s in 0..p {
                acc += probit_log_lik(lf.g[s], global.theta_mean[s] + lf.zeta_mean);
            }
            acc - 0.5 * p as f64 * lf.zeta_var
        })
        .collect::<Vec<_>>()
        .into_iter()
        .sum();

    let mut energy = coupling;
    let mut entropy = 0.0;
    for c in cache {
        energy += 0.5 * slab.elog_sig * c.sum_g - 0.5 * slab.e_sig * c.slab_sq;
    }

    let (e_w0, elog_w0) = gamma_moments(global.sig0_shape, global.sig0_rate);
    let (e_rho, elog_rho) = gamma_moments(global.sig0_aux_shape, global.sig0_aux_rate);
    let ln_gamma_half = ln_gamma(0.5);
    for s in 0..p {
        let (e_nu, elog_nu) = gamma_moments(global.lam_shape[s], global.lam_rate[s]);
        let (e_k, elog_k) = gamma_moments(global.lam_aux_shape[s], global.lam_aux_rate[s]);
        let v = global.theta_var[s];
        let sq = global.theta_mean[s].powi(2) + v;
        energy += -0.5 * q as f64 * v;
        energy += -0.5 * LN_2PI + 0.5 * (elog_nu + elog_w0) - 0.5 * e_nu * e_w0 * sq;
        energy += 0.5 * elog_k - ln_gamma_half - 0.5 * elog_nu - e_k * e_nu;
        energy += gamma_expected_log_density(0.5, 1.0, e_k, elog_k);
        entropy += 0.5 * (LN_2PI + 1.0 + v.ln());
        entropy += gamma_entropy(global.lam_shape[s], global.lam_rate[s]);
        entropy += gamma_entropy(global.lam_aux_shape[s], global.lam_aux_rate[s]);
    }
    energy += 0.5 * elog_rho - ln_gamma_half - 0.5 * elog_w0 - e_rho * e_w0;
    energy += gamma_expected_log_density(0.5, q as f64, e_rho, elog_rho);
    energy += gamma_expected_log_density(hyper.sig_shape0, hyper.sig_rate0, slab.e_sig, slab.elog_sig);
    entropy += gamma_entropy(global.sig0_shape, global.sig0_rate);
    entropy += gamma_entropy(global.sig0_aux_shape, global.sig0_aux_rate);
    entropy += gamma_entropy(global.sig_shape, global.sig_rate);
    ElboParts { energy, entropy }
}

/// ELBO from cached per-trait terms plus freshly computed global terms.
pub(crate) fn elbo_cached(state: &VariationalState, cache: &[TraitTerms], hyper: &Hyperparameters) -> ElboParts {
    let mut parts = global_parts(&state.global, &state.locals, cache, hyper);
    for c in cache {
        parts.energy += c.energy;
        parts.entropy += c.entropy;
    }
    parts
}

/// Per-trait terms with the residual computed directly from `X` and `Y`.
pub(crate) fn trait_terms_from_scratch(
    lf: &LocalFactor,
    x: &DMatrix<f64>,
    y_t: &[f64],
    hyper: &Hyperparameters,
    zeta_prior: (f64, f64),
) -> TraitTerms {
    let m: Vec<f64> = lf.beta_mean();
    let mut sq_resid = 0.0;
    let fitted = x * nalgebra::DVector::from_column_slice(&m);
    for i in 0..y_t.len() {
        let r = y_t[i] - fitted[i];
        sq_resid += r * r;
    }
    for (s, col) in x.column_iter().enumerate() {
        let ss = col.norm_squared();
        sq_resid += ss * (lf.g[s] * (lf.mu[s] * lf.mu[s] + lf.s2[s]) - m[s] * m[s]);
    }
    trait_terms(lf, x.nrows(), sq_resid, hyper, zeta_prior)
}

/// ELBO of `state` computed without any cached quantity.
pub fn elbo_from_scratch(state: &VariationalState, ds: &Dataset, hyper: &Hyperparameters) -> ElboParts {
    let y = ds.y();
    let n = y.nrows();
    let cache: Vec<TraitTerms> = state
        .locals
        .par_iter()
        .enumerate()
        .map(|(t, lf)| {
            let yt = &y.as_slice()[t * n..(t + 1) * n];
            trait_terms_from_scratch(lf, ds.x(), yt, hyper, state.zeta_prior)
        })
        .collect();
    elbo_cached(state, &cache, hyper)
}
