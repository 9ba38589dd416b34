//! Coordinate ascent variational inference for the hierarchical model:
//! tempered closed-form updates, a per-trait cached ELBO and the outer loop
//! with adaptive focus.

mod design;
mod elbo;
mod frozen;
mod updates;

use std::fmt::Write as _;
use std::path::Path;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rayon::prelude::*;

pub use design::Design;
pub use elbo::{elbo_from_scratch, ElboParts};
pub use frozen::{fit_frozen, single_predictor_ppi, FrozenFit, FrozenGlobals};
pub use updates::{SlabScale, TraitTerms};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::focus::{self, AfioSchedule, FocusState, Scheme};
use crate::io::{self, KeyValues};
use crate::model::{init_state, Hyperparameters, VariationalState};

use elbo::{elbo_cached, slab_scale};
use updates::{trait_terms, update_global, update_local, LocalContext};

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub scheme: Scheme,
    pub rf_fraction: f64,
    pub afi_decay: f64,
    pub seed: u64,
    /// Use `ω = (1 − ε) + a ε` instead of `ω = (1 − ε) a + ε`.
    pub elbo_formula_literal: bool,
    /// Evaluate a from-scratch ELBO every iteration and keep the focus trace.
    pub record_trace: bool,
    pub afio_initial_gap: usize,
    /// Multiple of `tol` below which the AFIO gap halves.
    pub afio_shrink_factor: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::Vanilla,
            rf_fraction: 0.5,
            afi_decay: 0.95,
            seed: 0,
            elbo_formula_literal: false,
            record_trace: false,
            afio_initial_gap: 16,
            afio_shrink_factor: 100.0,
        }
    }
}

impl FitConfig {
    pub fn with_scheme(scheme: Scheme) -> Self {
        Self {
            scheme,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rf_fraction > 0.0 && self.rf_fraction <= 1.0) {
            return Err(Error::Config(format!("rf_fraction must lie in (0, 1], got {}", self.rf_fraction)));
        }
        if !(self.afi_decay > 0.0 && self.afi_decay < 1.0) {
            return Err(Error::Config(format!("afi_decay must lie in (0, 1), got {}", self.afi_decay)));
        }
        if self.afio_initial_gap == 0 {
            return Err(Error::Config("afio_initial_gap must be >= 1".into()));
        }
        Ok(())
    }

    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        let d = Self::default();
        let scheme = match kv.get_str("scheme") {
            Some(s) => s.parse()?,
            None => d.scheme,
        };
        let c = Self {
            scheme,
            rf_fraction: kv.get("rf_fraction")?.unwrap_or(d.rf_fraction),
            afi_decay: kv.get("afi_decay")?.unwrap_or(d.afi_decay),
            seed: kv.get("seed")?.unwrap_or(d.seed),
            elbo_formula_literal: kv.get("elbo_formula_literal")?.unwrap_or(d.elbo_formula_literal),
            record_trace: kv.get("record_trace")?.unwrap_or(d.record_trace),
            afio_initial_gap: kv.get("afio_initial_gap")?.unwrap_or(d.afio_initial_gap),
            afio_shrink_factor: kv.get("afio_shrink_factor")?.unwrap_or(d.afio_shrink_factor),
        };
        c.validate()?;
        Ok(c)
    }

    pub fn keys() -> &'static [&'static str] {
        &[
            "scheme",
            "rf_fraction",
            "afi_decay",
            "seed",
            "elbo_formula_literal",
            "record_trace",
            "afio_initial_gap",
            "afio_shrink_factor",
        ]
    }

    pub fn write_key_values(&self, kv: &mut KeyValues) {
        kv.set("scheme", self.scheme);
        kv.set("rf_fraction", self.rf_fraction);
        kv.set("afi_decay", self.afi_decay);
        kv.set("seed", self.seed);
        kv.set("elbo_formula_literal", self.elbo_formula_literal);
        kv.set("record_trace", self.record_trace);
        kv.set("afio_initial_gap", self.afio_initial_gap);
        kv.set("afio_shrink_factor", self.afio_shrink_factor);
    }
}

/// Temperature at 1-based `iteration`: a geometric ladder from `anneal_T0`
/// down to 1 over `anneal_grid` iterations, then 1.
pub fn annealing_temperature(iteration: usize, hyper: &Hyperparameters) -> f64 {
    let grid = hyper.anneal_grid;
    if grid <= 1 || iteration >= grid || hyper.anneal_t0 <= 1.0 {
        return 1.0;
    }
    let k = iteration.max(1);
    hyper
        .anneal_t0
        .powf(1.0 - (k - 1) as f64 / (grid - 1) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub temperature: f64,
    pub n_updated: usize,
    /// Tempered ELBO when it was evaluated at this iteration.
    pub elbo: Option<f64>,
    /// Tempered ELBO recomputed without caches (with `record_trace`).
    pub elbo_audit: Option<f64>,
    pub epsilon: Option<f64>,
    pub mean_omega: f64,
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub scheme: Scheme,
    pub ppi: DMatrix<f64>,
    pub beta_mean: DMatrix<f64>,
    pub trace: Vec<TraceRow>,
    pub iterations: usize,
    pub local_update_count: usize,
    pub elbo_evaluations: usize,
    pub final_elbo: f64,
    pub converged: bool,
    pub wall_time_total: Duration,
    pub wall_time_local: Duration,
    pub wall_time_global: Duration,
    pub wall_time_elbo: Duration,
    pub snp_ids: Vec<String>,
    pub trait_ids: Vec<String>,
    pub state: VariationalState,
}

impl FitReport {
    /// `(iteration, elbo)` at every evaluation.
    pub fn elbo_trace(&self) -> Vec<(usize, f64)> {
        self.trace
            .iter()
            .filter_map(|r| r.elbo.map(|e| (r.iteration, e)))
            .collect()
    }

    /// Everything except the wall-clock timers, for reproducibility checks.
    pub fn same_result(&self, other: &FitReport) -> bool {
        self.ppi == other.ppi
            && self.beta_mean == other.beta_mean
            && self.trace == other.trace
            && self.iterations == other.iterations
            && self.local_update_count == other.local_update_count
            && self.final_elbo.to_bits() == other.final_elbo.to_bits()
            && self.converged == other.converged
    }

    pub fn write_tsv(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let labels = Some(("snp", self.snp_ids.as_slice()));
        io::write_matrix(&dir.join("ppi.tsv"), &self.trait_ids, &self.ppi, labels)?;
        io::write_matrix(&dir.join("beta.tsv"), &self.trait_ids, &self.beta_mean, labels)?;
        io::write_text(&dir.join("trace.tsv"), &self.trace_tsv())?;
        io::write_text(&dir.join("focus_trace.tsv"), &self.focus_trace_tsv())?;
        io::write_text(&dir.join("report.tsv"), &self.report_tsv(true))
    }

    pub fn trace_tsv(&self) -> String {
        let mut out = String::from("iteration\telbo\tn_updated\ttemperature\n");
        for r in &self.trace {
            let elbo = r.elbo.map(io::fmt_f64).unwrap_or_else(|| "NA".into());
            let _ = writeln!(out, "{}\t{}\t{}\t{}", r.iteration, elbo, r.n_updated, io::fmt_f64(r.temperature));
        }
        out
    }

    pub fn focus_trace_tsv(&self) -> String {
        let mut out = String::from("iteration\tepsilon\tn_selected\tmean_omega\telbo_evaluated\n");
        for r in &self.trace {
            let eps = r.epsilon.map(io::fmt_f64).unwrap_or_else(|| "NA".into());
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}",
                r.iteration,
                eps,
                r.n_updated,
                io::fmt_f64(r.mean_omega),
                r.elbo.is_some() as u8
            );
        }
        out
    }

    /// Scalar counters; wall-clock fields are omitted when `timings` is false.
    pub fn report_tsv(&self, timings: bool) -> String {
        let mut out = String::from("key\tvalue\n");
        let _ = writeln!(out, "scheme\t{}", self.scheme);
        let _ = writeln!(out, "iterations\t{}", self.iterations);
        let _ = writeln!(out, "local_update_count\t{}", self.local_update_count);
        let _ = writeln!(out, "elbo_evaluations\t{}", self.elbo_evaluations);
        let _ = writeln!(out, "final_elbo\t{}", io::fmt_f64(self.final_elbo));
        let _ = writeln!(out, "converged\t{}", self.converged);
        if timings {
            for (k, d) in [
                ("wall_time_total", self.wall_time_total),
                ("wall_time_local", self.wall_time_local),
                ("wall_time_global", self.wall_time_global),
                ("wall_time_elbo", self.wall_time_elbo),
            ] {
                let _ = writeln!(out, "{k}\t{}", io::fmt_f64(d.as_secs_f64()));
            }
        }
        out
    }
}

pub fn run_cavi(ds: &Dataset, hyper: &Hyperparameters, config: &FitConfig) -> Result<FitReport> {
    let state = init_state(ds, hyper, config.seed)?;
    resume(ds, hyper, config, state)
}

/// Continues a fit from `state`. Focus bookkeeping restarts, so resuming
/// after the warm-up reproduces the uninterrupted run only for the
/// vanilla scheme.
pub fn resume(ds: &Dataset, hyper: &Hyperparameters, config: &FitConfig, state: VariationalState) -> Result<FitReport> {
    hyper.validate()?;
    config.validate()?;
    if state.q() != ds.q() || state.p() != ds.p() {
        return Err(Error::Dimension(format!(
            "state is {}x{} but dataset is {}x{}",
            state.p(),
            state.q(),
            ds.p(),
            ds.q()
        )));
    }
    let design = Design::new(ds);
    Runner::new(ds, &design, hyper, config, state).run()
}

struct Runner<'a> {
    ds: &'a Dataset,
    design: &'a Design,
    hyper: &'a Hyperparameters,
    config: &'a FitConfig,
    state: VariationalState,
    cache: Vec<TraitTerms>,
    focus: FocusState,
    afio: AfioSchedule,
    /// Evaluations at temperature 1: `(iteration, elbo)`.
    evals: Vec<(usize, f64)>,
}

impl<'a> Runner<'a> {
    fn new(
        ds: &'a Dataset,
        design: &'a Design,
        hyper: &'a Hyperparameters,
        config: &'a FitConfig,
        state: VariationalState,
    ) -> Self {
        let cache = state
            .locals
            .iter()
            .enumerate()
            .map(|(t, lf)| {
                let r = design.expected_sq_residual(t, &lf.g, &lf.mu, &lf.s2, &lf.xr_cache);
                trait_terms(lf, design.n, r, hyper, state.zeta_prior)
            })
            .collect();
        let afio = AfioSchedule::new(config.afio_initial_gap, config.afio_shrink_factor * hyper.tol);
        Self {
            ds,
            design,
            hyper,
            config,
            state,
            cache,
            focus: FocusState::default(),
            afio,
            evals: Vec::new(),
        }
    }

    fn choose_focus(&mut self, iteration: usize) -> (Vec<usize>, Option<f64>) {
        let q = self.state.q();
        let warm = iteration <= self.hyper.warmup_iters;
        self.focus.af_iteration = iteration.saturating_sub(self.hyper.warmup_iters);
        self.focus.elbo_eval_gap = self.afio.gap;
        let scheme = self.config.scheme;
        if warm || scheme == Scheme::Vanilla {
            self.focus.omega.clear();
            self.focus.selected = vec![true; q];
            return ((0..q).collect(), None);
        }
        let mut epsilon = None;
        self.focus.selected = match scheme {
            Scheme::Vanilla => unreachable!(),
            Scheme::Rf => {
                self.focus.omega.clear();
                focus::rf_focus_set(q, self.config.rf_fraction, self.config.seed, iteration)
            }
            Scheme::Afe | Scheme::Afi | Scheme::Afio => {
                let eps = match scheme {
                    Scheme::Afe => match self.evals.as_slice() {
                        [.., (i0, l0), (i1, l1)] => focus::perturbation_afe((l1 - l0) / (i1 - i0) as f64),
                        _ => 1.0,
                    },
                    _ => focus::perturbation_afi(self.focus.af_iteration, self.config.afi_decay),
                };
                epsilon = Some(eps);
                self.focus.epsilon = eps;
                self.focus.scores = self.state.locals.par_iter().map(|l| focus::activity_score(&l.g)).collect();
                self.focus.omega =
                    focus::selection_probabilities(&self.focus.scores, eps, self.config.elbo_formula_literal);
                focus::draw_focus_set(&self.focus.omega, self.config.seed, iteration)
            }
        };
        let chosen = self
            .focus
            .selected
            .iter()
            .enumerate()
            .filter_map(|(t, &b)| b.then_some(t))
            .collect();
        (chosen, epsilon)
    }

    fn should_eval(&self, iteration: usize) -> bool {
        if self.config.scheme != Scheme::Afio {
            return true;
        }
        let warmup = self.hyper.warmup_iters;
        if iteration <= warmup {
            return iteration == warmup;
        }
        self.afio.should_eval(iteration - warmup)
    }

    fn refresh_xr(&mut self) {
        let design = self.design;
        self.state.locals.par_iter_mut().enumerate().for_each(|(t, lf)| {
            lf.xr_cache = design.fresh_xr(t, &lf.beta_mean());
        });
    }

    fn run(mut self) -> Result<FitReport> {
        let start = Instant::now();
        let mut t_local = Duration::ZERO;
        let mut t_global = Duration::ZERO;
        let mut t_elbo = Duration::ZERO;
        let mut trace = Vec::new();
        let mut local_update_count = 0usize;
        let mut elbo_evaluations = 0usize;
        let mut converged = false;
        let first = self.state.iteration + 1;
        let mut last_iteration = self.state.iteration;

        for iteration in first..=self.hyper.max_iters {
            last_iteration = iteration;
            let temperature = annealing_temperature(iteration, self.hyper);
            let (chosen, epsilon) = self.choose_focus(iteration);
            if iteration % self.hyper.xr_refresh_every == 0 {
                self.refresh_xr();
            }

            let clock = Instant::now();
            {
                let ctx = LocalContext {
                    design: self.design,
                    hyper: self.hyper,
                    global: &self.state.global,
                    slab: slab_scale(&self.state.global),
                    zeta_prior: self.state.zeta_prior,
                    temperature,
                    iteration,
                };
                let selected = &self.focus.selected;
                let results: Vec<Result<Option<TraitTerms>>> = self
                    .state
                    .locals
                    .par_iter_mut()
                    .enumerate()
                    .map(|(t, lf)| if selected[t] { update_local(&ctx, t, lf).map(Some) } else { Ok(None) })
                    .collect();
                for (t, r) in results.into_iter().enumerate() {
                    if let Some(terms) = r? {
                        self.cache[t] = terms;
                    }
                }
            }
            local_update_count += chosen.len();
            t_local += clock.elapsed();

            let clock = Instant::now();
            update_global(&mut self.state.global, &self.state.locals, self.hyper, temperature, iteration)?;
            t_global += clock.elapsed();
            self.state.iteration = iteration;

            let mut row = TraceRow {
                iteration,
                temperature,
                n_updated: chosen.len(),
                elbo: None,
                elbo_audit: None,
                epsilon,
                mean_omega: self.focus.mean_omega(),
            };

            if self.should_eval(iteration) {
                let clock = Instant::now();
                let value = elbo_cached(&self.state, &self.cache, self.hyper).at(temperature);
                t_elbo += clock.elapsed();
                elbo_evaluations += 1;
                if !value.is_finite() {
                    return Err(Error::Numerical {
                        trait_index: None,
                        predictor: None,
                        iteration,
                        what: "non-finite ELBO".into(),
                    });
                }
                self.state.elbo = value;
                row.elbo = Some(value);
                if temperature == 1.0 {
                    let past_warmup = iteration > self.hyper.warmup_iters;
                    if let Some(&(i0, l0)) = self.evals.last() {
                        let per_iter = (value - l0) / (iteration - i0) as f64;
                        if past_warmup && self.config.scheme == Scheme::Afio {
                            self.afio.observe(per_iter);
                        }
                        if past_warmup && per_iter.abs() < self.hyper.tol {
                            converged = true;
                        }
                    }
                    self.evals.push((iteration, value));
                }
            }
            if self.config.record_trace {
                let audit = elbo_from_scratch(&self.state, self.ds, self.hyper).at(temperature);
                row.elbo_audit = Some(audit);
            }
            log::debug!(
                "iteration {iteration}: T={temperature:.4} updated={} elbo={:?}",
                chosen.len(),
                row.elbo
            );
            trace.push(row);
            if converged {
                break;
            }
        }

        let (p, q) = (self.state.p(), self.state.q());
        let ppi = DMatrix::from_fn(p, q, |s, t| self.state.locals[t].g[s]);
        let beta_mean = DMatrix::from_fn(p, q, |s, t| {
            let lf = &self.state.locals[t];
            lf.g[s] * lf.mu[s]
        });
        Ok(FitReport {
            scheme: self.config.scheme,
            ppi,
            beta_mean,
            trace,
            iterations: last_iteration,
            local_update_count,
            elbo_evaluations,
            final_elbo: self.state.elbo,
            converged,
            wall_time_total: start.elapsed(),
            wall_time_local: t_local,
            wall_time_global: t_global,
            wall_time_elbo: t_elbo,
            snp_ids: self.ds.snp_ids(),
            trait_ids: self.ds.trait_ids(),
            state: self.state,
        })
    }
}
