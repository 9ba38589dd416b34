//! Adaptive focus: which traits have their local factors refreshed at a
//! given iteration, and when the ELBO is evaluated.
//!
//! Every random draw comes from a ChaCha stream addressed by
//! `(seed, stream, word position)`, so a draw depends only on the seed, the
//! trait index and the iteration, never on thread count or evaluation order.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scheme {
    Vanilla,
    Rf,
    Afe,
    Afi,
    Afio,
}

impl Scheme {
    pub const ALL: [Scheme; 5] = [
        Scheme::Vanilla,
        Scheme::Rf,
        Scheme::Afe,
        Scheme::Afi,
        Scheme::Afio,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Vanilla => "vanilla",
            Scheme::Rf => "rf",
            Scheme::Afe => "afe",
            Scheme::Afi => "afi",
            Scheme::Afio => "afio",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        Scheme::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown scheme '{s}'")))
    }
}

/// Probability that a trait has at least one association, `1 − Π_s (1 − g_s)`.
pub fn activity_score(g: &[f64]) -> f64 {
    let mut log_none = 0.0;
    for &gs in g {
        if gs >= 1.0 {
            return 1.0;
        }
        log_none += (-gs).ln_1p();
    }
    -log_none.exp_m1()
}

/// Perturbation driven by the most recent ELBO gain: `ΔL / (1 + ΔL)`.
pub fn perturbation_afe(delta_elbo: f64) -> f64 {
    let d = if delta_elbo > 1e-12 { delta_elbo } else { 1e-12 };
    if d.is_infinite() {
        return 1.0;
    }
    d / (1.0 + d)
}

/// Deterministic geometric decay `decay^(i − 1)`.
pub fn perturbation_afi(af_iteration: usize, decay: f64) -> f64 {
    assert!(af_iteration >= 1);
    decay.powi((af_iteration - 1) as i32)
}

/// `ω_t = (1 − ε) a_t + ε`, or `(1 − ε) + a_t ε` when `literal` is set.
pub fn selection_probabilities(scores: &[f64], epsilon: f64, literal: bool) -> Vec<f64> {
    scores
        .iter()
        .map(|&a| {
            let w = if literal {
                (1.0 - epsilon) + a * epsilon
            } else {
                (1.0 - epsilon) * a + epsilon
            };
            w.clamp(0.0, 1.0)
        })
        .collect()
}

/// Uniform draw for `trait_index` at `iteration`.
fn trait_uniform(seed: u64, trait_index: usize, iteration: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trait_index as u64);
    // One f64 consumes two 32-bit words.
    rng.set_word_pos(2 * iteration as u128);
    rng.random::<f64>()
}

/// Independent Bernoulli(ω_t) draws; an empty draw selects the argmax of ω
/// (lowest index on ties).
pub fn draw_focus_set(omega: &[f64], seed: u64, iteration: usize) -> Vec<bool> {
    let mut z: Vec<bool> = omega
        .iter()
        .enumerate()
        .map(|(t, &w)| trait_uniform(seed, t, iteration) < w)
        .collect();
    if !z.is_empty() && !z.iter().any(|&b| b) {
        let mut best = 0;
        for (t, &w) in omega.iter().enumerate() {
            if w > omega[best] {
                best = t;
            }
        }
        z[best] = true;
    }
    z
}

/// `round(fraction · q)` (half up, at least one) traits chosen uniformly
/// without replacement.
pub fn rf_focus_set(q: usize, fraction: f64, seed: u64, iteration: usize) -> Vec<bool> {
    let k = ((fraction * q as f64 + 0.5).floor() as usize).clamp(1.min(q), q);
    let mut z = vec![false; q];
    if k == q {
        z.fill(true);
        return z;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX - iteration as u64);
    for i in index::sample(&mut rng, q, k) {
        z[i] = true;
    }
    z
}

/// Intermittent ELBO schedule: evaluate every `gap` focus iterations, halving
/// the gap whenever the per-iteration gain drops below `shrink_below`.
#[derive(Debug, Clone, PartialEq)]
pub struct AfioSchedule {
    pub gap: usize,
    pub shrink_below: f64,
}

impl AfioSchedule {
    pub fn new(initial_gap: usize, shrink_below: f64) -> Self {
        Self {
            gap: initial_gap.max(1),
            shrink_below,
        }
    }

    pub fn should_eval(&self, af_iteration: usize) -> bool {
        af_iteration % self.gap == 0
    }

    pub fn observe(&mut self, per_iteration_gain: f64) {
        if per_iteration_gain < self.shrink_below {
            self.gap = (self.gap / 2).max(1);
        }
    }
}

/// Per-iteration focus bookkeeping kept by the outer loop.
#[derive(Debug, Clone, Default)]
pub struct FocusState {
    pub scores: Vec<f64>,
    pub epsilon: f64,
    pub omega: Vec<f64>,
    pub selected: Vec<bool>,
    pub af_iteration: usize,
    pub elbo_eval_gap: usize,
}

impl FocusState {
    pub fn n_selected(&self) -> usize {
        self.selected.iter().filter(|&&b| b).count()
    }

    pub fn mean_omega(&self) -> f64 {
        if self.omega.is_empty() {
            1.0
        } else {
            self.omega.iter().sum::<f64>() / self.omega.len() as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn activity_score_examples() {
        assert_eq!(activity_score(&[0.0, 0.0]), 0.0);
        assert_eq!(activity_score(&[0.2, 1.0]), 1.0);
        assert!((activity_score(&[0.5, 0.5]) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn schedule_values() {
        assert_eq!(perturbation_afi(1, 0.95), 1.0);
        assert_eq!(perturbation_afi(2, 0.95), 0.95);
        assert!((perturbation_afi(15, 0.95) - 0.95f64.powi(14)).abs() < 1e-15);
        assert_eq!(perturbation_afe(1.0), 0.5);
        assert!((perturbation_afe(0.01) - 0.01 / 1.01).abs() < 1e-15);
        assert!(perturbation_afe(-3.0) > 0.0 && perturbation_afe(-3.0) < 1e-11);
        assert!(perturbation_afe(1e3) < perturbation_afe(1e4));
    }

    #[test]
    fn selection_limits() {
        assert_eq!(selection_probabilities(&[0.3, 0.0], 1.0, false), vec![1.0, 1.0]);
        assert_eq!(selection_probabilities(&[0.3], 0.0, false), vec![0.3]);
        assert!((selection_probabilities(&[0.4], 0.5, false)[0] - 0.7).abs() < 1e-15);
        assert_eq!(selection_probabilities(&[0.3], 1.0, true), vec![0.3]);
        assert_eq!(selection_probabilities(&[0.3], 0.0, true), vec![1.0]);
    }

    #[test]
    fn focus_draw_edge_cases() {
        assert!(draw_focus_set(&[1.0; 7], 3, 4).into_iter().all(|b| b));
        let z = draw_focus_set(&[0.0; 5], 3, 4);
        assert_eq!(z, vec![true, false, false, false, false]);
        let z = draw_focus_set(&[0.0, 0.1, 0.2, 0.2], 3, 4);
        assert_eq!(z.iter().filter(|&&b| b).count() >= 1, true);
    }

    #[test]
    fn focus_draw_marginals() {
        let omega = [0.3, 1.0];
        let draws = 100_000;
        let hits = (0..draws)
            .filter(|&i| draw_focus_set(&omega, 9, i)[0])
            .count();
        assert!((hits as f64 / draws as f64 - 0.3).abs() < 0.005);
    }

    #[test]
    fn rf_sizes_and_uniformity() {
        assert!(rf_focus_set(10, 1.0, 0, 1).into_iter().all(|b| b));
        assert_eq!(rf_focus_set(10, 0.5, 0, 1).iter().filter(|&&b| b).count(), 5);
        let mut counts = [0usize; 10];
        let draws = 10_000;
        for i in 0..draws {
            for (t, b) in rf_focus_set(10, 0.5, 42, i).into_iter().enumerate() {
                counts[t] += b as usize;
            }
        }
        for c in counts {
            assert!((c as f64 / draws as f64 - 0.5).abs() < 0.015);
        }
    }

    #[test]
    fn afio_gap_rule() {
        let mut s = AfioSchedule::new(16, 100.0 * 0.01);
        assert!(s.should_eval(16));
        assert!(!s.should_eval(8));
        s.observe(0.5);
        assert_eq!(s.gap, 8);
        s.observe(5.0);
        assert_eq!(s.gap, 8);
        for _ in 0..10 {
            s.observe(0.0);
        }
        assert_eq!(s.gap, 1);
        assert!(s.should_eval(7));
    }

    #[test]
    fn scheme_parsing() {
        for s in Scheme::ALL {
            assert_eq!(s.as_str().parse::<Scheme>().unwrap(), s);
        }
        assert!("bogus".parse::<Scheme>().is_err());
    }
}
