//! Closed-form coordinate updates.
//!
//! Tempering at temperature `T` replaces each factor by the maximiser of
//! `E[log p] + T·H[q]`. The probit auxiliary `z_st` is maximised out
//! analytically, which leaves the inclusion prior contributing
//! `g lnΦ(m) + (1 − g) lnΦ(−m) − ½(Var θ_s + Var ζ_t)` with `m = E θ_s + E ζ_t`;
//! that term is counted as energy, not entropy.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{GlobalFactor, Hyperparameters, LocalFactor};
use crate::special::{gamma_moments, ln_norm_cdf, logistic, mills_lower, mills_upper, temper_gamma, LN_2PI};

use super::design::Design;

/// Moments of the global factors that a trait's local update reads.
#[derive(Debug, Clone, Copy)]
pub struct SlabScale {
    pub e_sig: f64,
    pub elog_sig: f64,
}

/// Fixed inputs to one pass over the predictors of a single trait.
pub(crate) struct SweepInputs<'a> {
    pub e_tau: f64,
    pub elog_tau: f64,
    pub slab: SlabScale,
    /// Prior log-odds of inclusion for each predictor.
    pub prior_log_odds: &'a [f64],
    pub temperature: f64,
}

/// Replaces every `q(β_st, γ_st)` in ascending `s`, keeping `xr` equal to
/// `Xᵀ(y − X(g ⊙ mu))`. Returns the first predictor whose update is not finite.
pub(crate) fn sweep(
    design: &Design,
    inp: &SweepInputs<'_>,
    mu: &mut [f64],
    s2: &mut [f64],
    g: &mut [f64],
    xr: &mut [f64],
) -> std::result::Result<(), usize> {
    let p = design.p();
    let t_inv = 1.0 / inp.temperature;
    let log_norm = 0.5 * (inp.elog_tau + inp.slab.elog_sig);
    let entropy_const = 0.5 * LN_2PI * (1.0 - t_inv);
    for s in 0..p {
        let gss = design.gram[(s, s)];
        let m_old = g[s] * mu[s];
        let r = xr[s] + gss * m_old;
        let s2_base = 1.0 / (inp.e_tau * (gss + inp.slab.e_sig));
        let mu_new = s2_base * inp.e_tau * r;
        let logit = (0.5 * mu_new * mu_new / s2_base + log_norm + inp.prior_log_odds[s]) * t_inv
            + 0.5 * (inp.temperature * s2_base).ln()
            + entropy_const;
        let g_new = logistic(logit);
        if !(mu_new.is_finite() && g_new.is_finite() && s2_base.is_finite()) {
            return Err(s);
        }
        mu[s] = mu_new;
        s2[s] = inp.temperature * s2_base;
        g[s] = g_new;
        let delta = g_new * mu_new - m_old;
        if delta != 0.0 {
            let col = design.gram_col(s);
            for j in 0..p {
                xr[j] -= col[j] * delta;
            }
        }
    }
    Ok(())
}

/// `d/dm` and `d²/dm²` of `g lnΦ(m) + (1 − g) lnΦ(−m)`.
#[inline]
pub(crate) fn probit_derivs(g: f64, m: f64) -> (f64, f64) {
    let mut d1 = 0.0;
    let mut d2 = 0.0;
    if g > 0.0 {
        let l1 = mills_upper(m);
        d1 += g * l1;
        d2 -= g * l1 * (m + l1);
    }
    if g < 1.0 {
        let l0 = mills_lower(m);
        d1 -= (1.0 - g) * l0;
        d2 -= (1.0 - g) * l0 * (l0 - m);
    }
    (d1, d2)
}

#[inline]
pub(crate) fn probit_log_lik(g: f64, m: f64) -> f64 {
    let mut v = 0.0;
    if g > 0.0 {
        v += g * ln_norm_cdf(m);
    }
    if g < 1.0 {
        v += (1.0 - g) * ln_norm_cdf(-m);
    }
    v
}

/// Maximises the strictly concave `F(a) = S(a) − precision (a − centre)² / 2`
/// where `derivs(a)` returns `(S'(a), S''(a))` with `S'' ≤ 0`.
/// Newton steps are kept inside the running sign-change bracket.
pub(crate) fn maximize_probit_mean(
    start: f64,
    precision: f64,
    centre: f64,
    derivs: impl Fn(f64) -> (f64, f64),
) -> f64 {
    let mut a = start;
    let mut lo = f64::NEG_INFINITY;
    let mut hi = f64::INFINITY;
    for _ in 0..200 {
        let (d1, d2) = derivs(a);
        let fp = d1 - precision * (a - centre);
        let fpp = d2 - precision;
        if fp > 0.0 {
            lo = a;
        } else if fp < 0.0 {
            hi = a;
        } else {
            return a;
        }
        let mut next = a - fp / fpp;
        if !(next > lo && next < hi) || !next.is_finite() {
            next = if lo.is_finite() && hi.is_finite() {
                0.5 * (lo + hi)
            } else if lo.is_finite() {
                lo + (lo - a).abs().max(1.0)
            } else {
                hi - (hi - a).abs().max(1.0)
            };
        }
        if (next - a).abs() <= 1e-14 * (1.0 + a.abs()) {
            return next;
        }
        a = next;
    }
    a
}

/// Per-trait ELBO pieces that depend only on the trait's own factors.
/// The slab-scale terms are kept separate so the cache stays valid when
/// `q(σ⁻²)` changes.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TraitTerms {
    /// Expected log joint of `y_t`, `β_t`, `τ_t`, `ζ_t` without the
    /// `E log σ⁻²` and `E σ⁻²` contributions.
    pub energy: f64,
    pub entropy: f64,
    pub sum_g: f64,
    /// `E τ_t · Σ_s g (mu² + s2)`
    pub slab_sq: f64,
}

impl TraitTerms {
    pub fn value(&self, slab: SlabScale, temperature: f64) -> f64 {
        self.energy + 0.5 * slab.elog_sig * self.sum_g - 0.5 * slab.e_sig * self.slab_sq
            + temperature * self.entropy
    }
}

pub(crate) fn trait_terms(
    lf: &LocalFactor,
    n: usize,
    sq_resid: f64,
    hyper: &Hyperparameters,
    zeta_prior: (f64, f64),
) -> TraitTerms {
    use crate::special::{bernoulli_entropy, gamma_entropy, gamma_expected_log_density};
    let (e_tau, elog_tau) = lf.tau_moments();
    let mut sum_g = 0.0;
    let mut weighted = 0.0;
    let mut entropy = 0.0;
    for s in 0..lf.g.len() {
        let g = lf.g[s];
        sum_g += g;
        weighted += g * (lf.mu[s] * lf.mu[s] + lf.s2[s]);
        entropy += bernoulli_entropy(g);
        if g > 0.0 {
            entropy += g * 0.5 * (LN_2PI + 1.0 + lf.s2[s].ln());
        }
    }
    let (n0, t0) = zeta_prior;
    let t02 = t0 * t0;
    let dz = lf.zeta_mean - n0;
    let energy = 0.5 * n as f64 * (elog_tau - LN_2PI) - 0.5 * e_tau * sq_resid
        + 0.5 * (elog_tau - LN_2PI) * sum_g
        + gamma_expected_log_density(hyper.tau_shape0, hyper.tau_rate0, e_tau, elog_tau)
        - 0.5 * (LN_2PI + t02.ln())
        - 0.5 * (dz * dz + lf.zeta_var) / t02;
    entropy += gamma_entropy(lf.tau_shape, lf.tau_rate) + 0.5 * (LN_2PI + 1.0 + lf.zeta_var.ln());
    TraitTerms {
        energy,
        entropy,
        sum_g,
        slab_sq: e_tau * weighted,
    }
}

/// Shared inputs to every local update of one iteration.
pub(crate) struct LocalContext<'a> {
    pub design: &'a Design,
    pub hyper: &'a Hyperparameters,
    pub global: &'a GlobalFactor,
    pub slab: SlabScale,
    pub zeta_prior: (f64, f64),
    pub temperature: f64,
    pub iteration: usize,
}

/// Sweeps the slab-and-spike factors of trait `t`, then refreshes `q(τ_t)`
/// and `q(ζ_t)`. Returns the trait's ELBO terms after the update.
pub(crate) fn update_local(ctx: &LocalContext<'_>, t: usize, lf: &mut LocalFactor) -> Result<TraitTerms> {
    let design = ctx.design;
    let hyper = ctx.hyper;
    let p = design.p();
    let temperature = ctx.temperature;
    let numerical = |s: Option<usize>, what: &str| Error::Numerical {
        trait_index: Some(t),
        predictor: s,
        iteration: ctx.iteration,
        what: what.to_owned(),
    };

    let prior_log_odds: Vec<f64> = (0..p)
        .map(|s| {
            let m = ctx.global.theta_mean[s] + lf.zeta_mean;
            ln_norm_cdf(m) - ln_norm_cdf(-m)
        })
        .collect();
    let (e_tau, elog_tau) = lf.tau_moments();
    let inputs = SweepInputs {
        e_tau,
        elog_tau,
        slab: ctx.slab,
        prior_log_odds: &prior_log_odds,
        temperature,
    };
    sweep(design, &inputs, &mut lf.mu, &mut lf.s2, &mut lf.g, &mut lf.xr_cache)
        .map_err(|s| numerical(Some(s), "non-finite slab update"))?;

    // q(τ_t)
    let sq_resid = design.expected_sq_residual(t, &lf.g, &lf.mu, &lf.s2, &lf.xr_cache);
    let sum_g: f64 = lf.g.iter().sum();
    let weighted: f64 = (0..p).map(|s| lf.g[s] * (lf.mu[s] * lf.mu[s] + lf.s2[s])).sum();
    let shape = hyper.tau_shape0 + 0.5 * design.n as f64 + 0.5 * sum_g;
    let rate = hyper.tau_rate0 + 0.5 * sq_resid + 0.5 * ctx.slab.e_sig * weighted;
    let (shape, rate) = temper_gamma(shape, rate, temperature);
    if !(shape > 0.0 && rate > 0.0 && rate.is_finite()) {
        return Err(numerical(None, "noise precision update"));
    }
    lf.tau_shape = shape;
    lf.tau_rate = rate;

    // q(ζ_t)
    let (n0, t0) = ctx.zeta_prior;
    let prior_prec = 1.0 / (t0 * t0);
    let theta = &ctx.global.theta_mean;
    let g = &lf.g;
    let zeta = maximize_probit_mean(lf.zeta_mean, prior_prec, n0, |a| {
        let mut d1 = 0.0;
        let mut d2 = 0.0;
        for s in 0..p {
            let (a1, a2) = probit_derivs(g[s], a + theta[s]);
            d1 += a1;
            d2 += a2;
        }
        (d1, d2)
    });
    if !zeta.is_finite() {
        return Err(numerical(None, "intercept update"));
    }
    lf.zeta_mean = zeta;
    lf.zeta_var = temperature / (p as f64 + prior_prec);

    Ok(trait_terms(lf, design.n, sq_resid, hyper, ctx.zeta_prior))
}

/// Replaces every global factor in turn: `q(θ_s)`, `q(ν_s)`, `q(κ_s)`,
/// `q(ω₀)`, `q(ρ)` and finally `q(σ⁻²)`.
pub(crate) fn update_global(
    global: &mut GlobalFactor,
    locals: &[LocalFactor],
    hyper: &Hyperparameters,
    temperature: f64,
    iteration: usize,
) -> Result<()> {
    let p = global.theta_mean.len();
    let q = locals.len();
    let zeta: Vec<f64> = locals.iter().map(|l| l.zeta_mean).collect();

    let (e_w0, _) = gamma_moments(global.sig0_shape, global.sig0_rate);
    let prec: Vec<f64> = (0..p)
        .map(|s| gamma_moments(global.lam_shape[s], global.lam_rate[s]).0 * e_w0)
        .collect();
    let new_theta: Vec<f64> = (0..p)
        .into_par_iter()
        .map(|s| {
            maximize_probit_mean(global.theta_mean[s], prec[s], 0.0, |a| {
                let mut d1 = 0.0;
                let mut d2 = 0.0;
                for (t, lf) in locals.iter().enumerate() {
                    let (a1, a2) = probit_derivs(lf.g[s], a + zeta[t]);
                    d1 += a1;
                    d2 += a2;
                }
                (d1, d2)
            })
        })
        .collect();
    if let Some(s) = new_theta.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numerical {
            trait_index: None,
            predictor: Some(s),
            iteration,
            what: "hotspot propensity update".into(),
        });
    }
    for s in 0..p {
        global.theta_mean[s] = new_theta[s];
        global.theta_var[s] = temperature / (q as f64 + prec[s]);
    }

    // q(ν_s), then q(κ_s)
    for s in 0..p {
        let sq = global.theta_mean[s].powi(2) + global.theta_var[s];
        let e_kappa = global.lam_aux_shape[s] / global.lam_aux_rate[s];
        let (a, b) = temper_gamma(1.0, e_kappa + 0.5 * e_w0 * sq, temperature);
        global.lam_shape[s] = a;
        global.lam_rate[s] = b;
        let e_nu = a / b;
        let (a, b) = temper_gamma(1.0, 1.0 + e_nu, temperature);
        global.lam_aux_shape[s] = a;
        global.lam_aux_rate[s] = b;
    }

    // q(ω₀), then q(ρ)
    let weighted_sq: f64 = (0..p)
        .map(|s| {
            let e_nu = global.lam_shape[s] / global.lam_rate[s];
            e_nu * (global.theta_mean[s].powi(2) + global.theta_var[s])
        })
        .sum();
    let e_rho = global.sig0_aux_shape / global.sig0_aux_rate;
    let (a, b) = temper_gamma(0.5 + 0.5 * p as f64, e_rho + 0.5 * weighted_sq, temperature);
    global.sig0_shape = a;
    global.sig0_rate = b;
    let (a, b) = temper_gamma(1.0, q as f64 + a / b, temperature);
    global.sig0_aux_shape = a;
    global.sig0_aux_rate = b;

    // q(σ⁻²)
    let mut sum_g = 0.0;
    let mut slab_sq = 0.0;
    for lf in locals {
        let (e_tau, _) = lf.tau_moments();
        let mut w = 0.0;
        for s in 0..p {
            sum_g += lf.g[s];
            w += lf.g[s] * (lf.mu[s] * lf.mu[s] + lf.s2[s]);
        }
        slab_sq += e_tau * w;
    }
    let (a, b) = temper_gamma(
        hyper.sig_shape0 + 0.5 * sum_g,
        hyper.sig_rate0 + 0.5 * slab_sq,
        temperature,
    );
    if !(a > 0.0 && b > 0.0 && b.is_finite()) {
        return Err(Error::Numerical {
            trait_index: None,
            predictor: None,
            iteration,
            what: "slab scale update".into(),
        });
    }
    global.sig_shape = a;
    global.sig_rate = b;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn probit_derivatives_match_finite_differences() {
        for &g in &[0.0, 0.2, 0.9, 1.0] {
            for &m in &[-6.0, -1.0, 0.3, 4.0] {
                let h = 1e-5;
                let f = |x: f64| probit_log_lik(g, x);
                let d1 = (f(m + h) - f(m - h)) / (2.0 * h);
                let d2 = (f(m + h) - 2.0 * f(m) + f(m - h)) / (h * h);
                let (a1, a2) = probit_derivs(g, m);
                assert!((a1 - d1).abs() < 1e-6 * (1.0 + d1.abs()), "g={g} m={m}");
                assert!((a2 - d2).abs() < 1e-3 * (1.0 + d2.abs()), "g={g} m={m}");
            }
        }
    }

    #[test]
    fn probit_mean_solver_finds_the_stationary_point() {
        let gs = [0.9, 0.01, 0.3, 0.0, 1.0];
        let offs = [0.2, -1.0, 3.0, -4.0, 0.5];
        let derivs = |a: f64| {
            gs.iter().zip(&offs).fold((0.0, 0.0), |acc, (&g, &c)| {
                let (d1, d2) = probit_derivs(g, a + c);
                (acc.0 + d1, acc.1 + d2)
            })
        };
        for &start in &[-30.0, 0.0, 25.0] {
            let a = maximize_probit_mean(start, 0.7, -0.4, derivs);
            let grad = derivs(a).0 - 0.7 * (a + 0.4);
            assert!(grad.abs() < 1e-10, "start {start}: grad {grad}");
        }
    }
}
