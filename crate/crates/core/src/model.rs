//! Hierarchical spike-and-slab model: hyperparameters, prior calibration of
//! the per-trait intercepts, and the variational state updated by the engine.
//!
//! Parameterisation used throughout:
//!
//! ```text
//! y_t | β_t, τ_t        ~ N(X β_t, τ_t⁻¹ I)
//! β_st | γ_st, τ_t, σ²  ~ γ_st N(0, σ² τ_t⁻¹) + (1 − γ_st) δ₀
//! γ_st                  ~ Bernoulli(Φ(θ_s + ζ_t))
//! ζ_t                   ~ N(n₀, t₀²)
//! θ_s | ν_s, ω₀         ~ N(0, (ν_s ω₀)⁻¹)
//! ν_s | κ_s ~ Gamma(½, κ_s),  κ_s ~ Gamma(½, 1)     (λ_s = ν_s^{-1/2} ~ C⁺(0, 1))
//! ω₀  | ρ   ~ Gamma(½, ρ),    ρ   ~ Gamma(½, q)     (σ₀ = ω₀^{-1/2} ~ C⁺(0, q^{-1/2}))
//! τ_t ~ Gamma(a_τ, b_τ),  σ⁻² ~ Gamma(a_σ, b_σ)
//! ```
//!
//! All Gamma distributions use the shape/rate convention.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::io::KeyValues;
use crate::special::{gamma_moments, norm_cdf, GaussHermite};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    /// Prior expected number of active predictors per response.
    pub e_active: f64,
    /// Prior variance of that count.
    pub v_active: f64,
    pub tau_shape0: f64,
    pub tau_rate0: f64,
    pub sig_shape0: f64,
    pub sig_rate0: f64,
    pub anneal_t0: f64,
    pub anneal_grid: usize,
    pub tol: f64,
    pub warmup_iters: usize,
    pub max_iters: usize,
    /// Fixed `(n₀, t₀)` bypassing moment matching.
    pub zeta_override: Option<(f64, f64)>,
    /// Iterations between full recomputations of the residual projections.
    pub xr_refresh_every: usize,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Self {
            e_active: 1.0,
            v_active: 4.0,
            tau_shape0: 0.01,
            tau_rate0: 0.01,
            sig_shape0: 0.01,
            sig_rate0: 0.01,
            anneal_t0: 2.0,
            anneal_grid: 10,
            tol: 0.01,
            warmup_iters: 50,
            max_iters: 5000,
            zeta_override: None,
            xr_refresh_every: 100,
        }
    }
}

const HYPER_KEYS: &[&str] = &[
    "e_active",
    "v_active",
    "tau_shape0",
    "tau_rate0",
    "sig_shape0",
    "sig_rate0",
    "anneal_T0",
    "anneal_grid",
    "tol",
    "warmup_iters",
    "max_iters",
    "zeta_n0",
    "zeta_t0",
    "xr_refresh_every",
];

impl Hyperparameters {
    /// The literal reading of the intercept prior: `n₀ = 1`, `t₀ = 4`.
    pub fn with_literal_zeta_prior(mut self) -> Self {
        self.zeta_override = Some((1.0, 4.0));
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("e_active", self.e_active),
            ("v_active", self.v_active),
            ("tau_shape0", self.tau_shape0),
            ("tau_rate0", self.tau_rate0),
            ("sig_shape0", self.sig_shape0),
            ("sig_rate0", self.sig_rate0),
            ("tol", self.tol),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive and finite, got {v}")));
            }
        }
        if !(self.anneal_t0 >= 1.0 && self.anneal_t0.is_finite()) {
            return Err(Error::Config(format!("anneal_T0 must be >= 1, got {}", self.anneal_t0)));
        }
        if self.anneal_grid == 0 {
            return Err(Error::Config("anneal_grid must be >= 1".into()));
        }
        if self.anneal_t0 > 1.0 && self.anneal_grid > self.warmup_iters {
            return Err(Error::Config(format!(
                "annealing ladder of {} rungs does not fit in {} warm-up iterations",
                self.anneal_grid, self.warmup_iters
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be >= 1".into()));
        }
        if self.xr_refresh_every == 0 {
            return Err(Error::Config("xr_refresh_every must be >= 1".into()));
        }
        if let Some((n0, t0)) = self.zeta_override {
            if !n0.is_finite() || !(t0 > 0.0 && t0.is_finite()) {
                return Err(Error::Config(format!("invalid zeta override ({n0}, {t0})")));
            }
        }
        Ok(())
    }

    /// Reads hyperparameters from `key=value` pairs; absent keys keep defaults.
    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        let d = Self::default();
        let n0: Option<f64> = kv.get("zeta_n0")?;
        let t0: Option<f64> = kv.get("zeta_t0")?;
        let zeta_override = match (n0, t0) {
            (Some(a), Some(b)) => Some((a, b)),
            (None, None) => None,
            _ => return Err(Error::Config("zeta_n0 and zeta_t0 must be given together".into())),
        };
        let h = Self {
            e_active: kv.get("e_active")?.unwrap_or(d.e_active),
            v_active: kv.get("v_active")?.unwrap_or(d.v_active),
            tau_shape0: kv.get("tau_shape0")?.unwrap_or(d.tau_shape0),
            tau_rate0: kv.get("tau_rate0")?.unwrap_or(d.tau_rate0),
            sig_shape0: kv.get("sig_shape0")?.unwrap_or(d.sig_shape0),
            sig_rate0: kv.get("sig_rate0")?.unwrap_or(d.sig_rate0),
            anneal_t0: kv.get("anneal_T0")?.unwrap_or(d.anneal_t0),
            anneal_grid: kv.get("anneal_grid")?.unwrap_or(d.anneal_grid),
            tol: kv.get("tol")?.unwrap_or(d.tol),
            warmup_iters: kv.get("warmup_iters")?.unwrap_or(d.warmup_iters),
            max_iters: kv.get("max_iters")?.unwrap_or(d.max_iters),
            zeta_override,
            xr_refresh_every: kv.get("xr_refresh_every")?.unwrap_or(d.xr_refresh_every),
        };
        h.validate()?;
        Ok(h)
    }

    /// Like [`from_key_values`](Self::from_key_values) but rejects keys that
    /// are not hyperparameters.
    pub fn from_key_values_strict(kv: &KeyValues) -> Result<Self> {
        kv.reject_unknown(HYPER_KEYS)?;
        Self::from_key_values(kv)
    }

    pub fn keys() -> &'static [&'static str] {
        HYPER_KEYS
    }

    pub fn write_key_values(&self, kv: &mut KeyValues) {
        kv.set("e_active", self.e_active);
        kv.set("v_active", self.v_active);
        kv.set("tau_shape0", self.tau_shape0);
        kv.set("tau_rate0", self.tau_rate0);
        kv.set("sig_shape0", self.sig_shape0);
        kv.set("sig_rate0", self.sig_rate0);
        kv.set("anneal_T0", self.anneal_t0);
        kv.set("anneal_grid", self.anneal_grid);
        kv.set("tol", self.tol);
        kv.set("warmup_iters", self.warmup_iters);
        kv.set("max_iters", self.max_iters);
        if let Some((n0, t0)) = self.zeta_override {
            kv.set("zeta_n0", n0);
            kv.set("zeta_t0", t0);
        }
        kv.set("xr_refresh_every", self.xr_refresh_every);
    }

    /// `(n₀, t₀)` for a block with `p` predictors.
    pub fn zeta_prior(&self, p: usize) -> Result<(f64, f64)> {
        match self.zeta_override {
            Some(v) => Ok(v),
            None => solve_zeta_prior(self, p),
        }
    }
}

const GH_ORDER: usize = 96;
const N0_BOX: (f64, f64) = (-10.0, 10.0);
const T0_BOX: (f64, f64) = (1e-4, 10.0);

/// Mean and variance of the number of active predictors out of `p` when each
/// is active with probability `Φ(n₀ + t₀ Z)`, `Z ~ N(0, 1)` shared.
pub fn active_count_moments(gh: &GaussHermite, n0: f64, t0: f64, p: usize) -> (f64, f64) {
    let pf = p as f64;
    let m1 = gh.expect(|z| norm_cdf(n0 + t0 * z));
    let m2 = gh.expect(|z| norm_cdf(n0 + t0 * z).powi(2));
    let mean = pf * m1;
    let var = pf * m1 + pf * (pf - 1.0) * m2 - pf * pf * m1 * m1;
    (mean, var)
}

fn bisect(mut lo: f64, mut hi: f64, f: impl Fn(f64) -> f64) -> f64 {
    // Requires f(lo) < 0 < f(hi) or the reverse; returns the sign-change point.
    let flo = f(lo);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if (f(mid) < 0.0) == (flo < 0.0) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Matches the prior mean and variance of the per-response active count
/// to `(e_active, v_active)`.
///
/// For fixed `t₀` the mean is increasing in `n₀`; along the resulting
/// mean-matching curve the variance is increasing in `t₀`. Both are solved
/// by bisection.
pub fn solve_zeta_prior(hyper: &Hyperparameters, p: usize) -> Result<(f64, f64)> {
    let (e, v) = (hyper.e_active, hyper.v_active);
    if !(e > 0.0 && e < p as f64) {
        return Err(Error::InfeasiblePrior(format!(
            "expected active count {e} must lie in (0, p = {p})"
        )));
    }
    let gh = GaussHermite::new(GH_ORDER);
    let n0_for = |t0: f64| -> Option<f64> {
        let f = |n0: f64| active_count_moments(&gh, n0, t0, p).0 - e;
        if f(N0_BOX.0) > 0.0 || f(N0_BOX.1) < 0.0 {
            return None;
        }
        Some(bisect(N0_BOX.0, N0_BOX.1, f))
    };
    let var_gap = |t0: f64| -> Option<f64> {
        let n0 = n0_for(t0)?;
        Some(active_count_moments(&gh, n0, t0, p).1 - v)
    };
    // Past the point where the mean can no longer be matched inside the n₀
    // box the variance already exceeds any attainable target.
    let gap = |t0: f64| var_gap(t0).unwrap_or(f64::INFINITY);
    match var_gap(T0_BOX.0) {
        Some(lo) if lo <= 0.0 && gap(T0_BOX.1) >= 0.0 => {
            let t0 = bisect(T0_BOX.0, T0_BOX.1, gap);
            let n0 = n0_for(t0).ok_or_else(|| {
                Error::InfeasiblePrior(format!("no intercept mean matches e_active = {e}"))
            })?;
            Ok((n0, t0))
        }
        _ => Err(Error::InfeasiblePrior(format!(
            "no (n0, t0) in [{}, {}] x [{}, {}] gives mean {e} and variance {v} for p = {p}",
            N0_BOX.0, N0_BOX.1, T0_BOX.0, T0_BOX.1
        ))),
    }
}

/// Variational factors of one trait.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalFactor {
    pub mu: Vec<f64>,
    pub s2: Vec<f64>,
    pub g: Vec<f64>,
    pub tau_shape: f64,
    pub tau_rate: f64,
    pub zeta_mean: f64,
    pub zeta_var: f64,
    /// `Xᵀ(y_t − X(g ⊙ mu))`.
    pub xr_cache: Vec<f64>,
}

impl LocalFactor {
    pub fn tau_moments(&self) -> (f64, f64) {
        gamma_moments(self.tau_shape, self.tau_rate)
    }

    /// `E[γ_st β_st]` for every predictor.
    pub fn beta_mean(&self) -> Vec<f64> {
        self.g.iter().zip(&self.mu).map(|(g, m)| g * m).collect()
    }
}

/// Variational factors shared by all traits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalFactor {
    pub theta_mean: Vec<f64>,
    pub theta_var: Vec<f64>,
    /// q(σ⁻²)
    pub sig_shape: f64,
    pub sig_rate: f64,
    /// q(ν_s) with ν_s = λ_s⁻²
    pub lam_shape: Vec<f64>,
    pub lam_rate: Vec<f64>,
    /// q(κ_s), the auxiliary of ν_s
    pub lam_aux_shape: Vec<f64>,
    pub lam_aux_rate: Vec<f64>,
    /// q(ω₀) with ω₀ = σ₀⁻²
    pub sig0_shape: f64,
    pub sig0_rate: f64,
    /// q(ρ), the auxiliary of ω₀
    pub sig0_aux_shape: f64,
    pub sig0_aux_rate: f64,
}

impl GlobalFactor {
    pub fn sig_moments(&self) -> (f64, f64) {
        gamma_moments(self.sig_shape, self.sig_rate)
    }

    pub fn sig0_moments(&self) -> (f64, f64) {
        gamma_moments(self.sig0_shape, self.sig0_rate)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalState {
    pub locals: Vec<LocalFactor>,
    pub global: GlobalFactor,
    /// Last evaluated ELBO; `-inf` before the first evaluation.
    pub elbo: f64,
    pub iteration: usize,
    pub zeta_prior: (f64, f64),
}

impl VariationalState {
    pub fn p(&self) -> usize {
        self.global.theta_mean.len()
    }

    pub fn q(&self) -> usize {
        self.locals.len()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        bincode::serialize_into(BufWriter::new(file), self)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        bincode::deserialize_from(BufReader::new(file))
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}

/// Starting point for the fit.
///
/// Slab and inclusion factors start at `mu = 0`, `s2 = 1`, `g = e_active/p`;
/// intercepts at their prior; the horseshoe factors at the prior with their
/// auxiliaries replaced by prior means. The noise-precision and slab-scale
/// factors are set to their closed-form optima given those starting moments,
/// because the vague Gamma(0.01, 0.01) priors have `E[log x] ≈ −96` and would
/// otherwise switch off every inclusion probability in the first sweep.
///
/// The state does not depend on `seed`; it is accepted so that randomised
/// initialisations remain a drop-in change.
pub fn init_state(ds: &Dataset, hyper: &Hyperparameters, _seed: u64) -> Result<VariationalState> {
    hyper.validate()?;
    let (n, p, q) = (ds.n(), ds.p(), ds.q());
    let (n0, t0) = hyper.zeta_prior(p)?;
    let g0 = (hyper.e_active / p as f64).min(1.0);
    let x = ds.x();
    let y = ds.y();
    let col_sq: Vec<f64> = x.column_iter().map(|c| c.norm_squared()).collect();
    let slab_sq: f64 = col_sq.iter().sum::<f64>() * g0;

    let mut locals = Vec::with_capacity(q);
    let mut sig_rate_acc = 0.0;
    for t in 0..q {
        let yt = y.column(t);
        let xr: Vec<f64> = x.tr_mul(&yt).iter().copied().collect();
        // E‖y − Xβ‖² with mean zero and per-coefficient second moment g·1.
        let resid = yt.norm_squared() + slab_sq;
        let tau_shape = hyper.tau_shape0 + 0.5 * n as f64 + 0.5 * g0 * p as f64;
        let tau_rate = hyper.tau_rate0 + 0.5 * resid + 0.5 * g0 * p as f64;
        let e_tau = tau_shape / tau_rate;
        sig_rate_acc += e_tau * g0 * p as f64;
        locals.push(LocalFactor {
            mu: vec![0.0; p],
            s2: vec![1.0; p],
            g: vec![g0; p],
            tau_shape,
            tau_rate,
            zeta_mean: n0,
            zeta_var: t0 * t0,
            xr_cache: xr,
        });
    }
    let global = GlobalFactor {
        theta_mean: vec![0.0; p],
        theta_var: vec![1.0; p],
        sig_shape: hyper.sig_shape0 + 0.5 * g0 * (p * q) as f64,
        sig_rate: hyper.sig_rate0 + 0.5 * sig_rate_acc,
        lam_shape: vec![0.5; p],
        lam_rate: vec![0.5; p],
        lam_aux_shape: vec![0.5; p],
        lam_aux_rate: vec![1.0; p],
        sig0_shape: 0.5,
        sig0_rate: 0.5 / q as f64,
        sig0_aux_shape: 0.5,
        sig0_aux_rate: q as f64,
    };
    Ok(VariationalState {
        locals,
        global,
        elbo: f64::NEG_INFINITY,
        iteration: 0,
        zeta_prior: (n0, t0),
    })
}
