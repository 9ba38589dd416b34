//! Scoring of fitted inclusion probabilities against a known truth, the
//! exhaustive small-problem posterior, and scheme-vs-scheme benchmarking.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::data::Dataset;
use crate::engine::{run_cavi, FitConfig, FitReport};
use crate::error::{Error, Result};
use crate::focus::Scheme;
use crate::io;
use crate::model::Hyperparameters;
use crate::special::{xlogy, LN_2PI};

/// Confusion-derived rates at one threshold plus threshold-free areas.
/// Ratios with a zero denominator, and areas when only one class is
/// present, are `None`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScorePanel {
    pub threshold: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    pub fpr: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub auroc: Option<f64>,
    pub auprc: Option<f64>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Entries with `score > threshold` are called positive.
pub fn confusion_metrics(scores: &DMatrix<f64>, truth: &DMatrix<bool>, threshold: f64) -> Result<ScorePanel> {
    if scores.shape() != truth.shape() {
        return Err(Error::Dimension(format!(
            "scores are {:?} but truth is {:?}",
            scores.shape(),
            truth.shape()
        )));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&s, &t) in scores.iter().zip(truth.iter()) {
        match (s > threshold, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let flat_scores: Vec<f64> = scores.iter().copied().collect();
    let flat_truth: Vec<bool> = truth.iter().copied().collect();
    let curves = roc_pr_curves(&flat_scores, &flat_truth).ok();
    Ok(ScorePanel {
        threshold,
        tp,
        fp,
        tn,
        fn_,
        fpr: ratio(fp, fp + tn),
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fn_),
        auroc: curves.as_ref().map(|c| c.auroc),
        auprc: curves.as_ref().map(|c| c.auprc),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Curves {
    pub auroc: f64,
    pub auprc: f64,
    /// `(fpr, tpr)` from `(0, 0)` to `(1, 1)`.
    pub roc: Vec<(f64, f64)>,
    /// `(recall, precision)` at each distinct threshold.
    pub pr: Vec<(f64, f64)>,
}

/// ROC and precision-recall curves over all distinct score thresholds.
/// The ROC area uses the trapezoid rule; the PR area is the step-wise
/// average precision `Σ (R_k − R_{k−1}) P_k`.
pub fn roc_pr_curves(scores: &[f64], truth: &[bool]) -> Result<Curves> {
    if scores.len() != truth.len() {
        return Err(Error::Dimension("scores and truth lengths differ".into()));
    }
    let pos = truth.iter().filter(|&&b| b).count();
    let neg = truth.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedAuc);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut roc = vec![(0.0, 0.0)];
    let mut pr = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let (mut auroc, mut auprc) = (0.0, 0.0);
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < order.len() {
        let v = scores[order[i]];
        while i < order.len() && scores[order[i]] == v {
            if truth[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let tpr = tp as f64 / pos as f64;
        let fpr = fp as f64 / neg as f64;
        let (x0, y0) = *roc.last().unwrap();
        auroc += (fpr - x0) * (tpr + y0) / 2.0;
        roc.push((fpr, tpr));
        let precision = tp as f64 / (tp + fp) as f64;
        auprc += (tpr - prev_recall) * precision;
        prev_recall = tpr;
        pr.push((tpr, precision));
    }
    Ok(Curves { auroc, auprc, roc, pr })
}

/// Percentage change of `method` relative to `baseline`.
pub fn relative_change(method: f64, baseline: f64) -> Result<f64> {
    if baseline == 0.0 {
        return Err(Error::ZeroBaseline);
    }
    Ok((method - baseline) / baseline * 100.0)
}

/// Largest problem the exhaustive oracle accepts.
pub const ORACLE_MAX_P: usize = 12;

#[derive(Debug, Clone)]
pub struct OracleFixed {
    pub tau: f64,
    pub sigma2: f64,
    pub prior_inclusion: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct OracleResult {
    pub ppi: Vec<f64>,
    pub log_evidence: f64,
    /// `E[β_s | γ_s = 1, y]` (`NaN` when `P(γ_s = 1 | y) = 0`).
    pub slab_mean: Vec<f64>,
    /// `Var[β_s | γ_s = 1, y]`.
    pub slab_var: Vec<f64>,
}

/// Exact posterior for one response with noise precision, slab variance and
/// prior inclusion probabilities held fixed, by enumerating all `2^p` models.
///
/// For a model with included columns `X_γ`, `A = X_γᵀX_γ + I/σ²` and
/// `b = X_γᵀy`:
/// `log p(y | γ) = n/2 log(τ/2π) − τ/2 (yᵀy − bᵀA⁻¹b) − ½ log|A| − k/2 log σ²`,
/// with coefficient posterior `N(A⁻¹b, A⁻¹/τ)`.
pub fn exact_posterior_oracle(x: &DMatrix<f64>, y: &[f64], fixed: &OracleFixed) -> Result<OracleResult> {
    let (n, p) = x.shape();
    if p > ORACLE_MAX_P {
        return Err(Error::OracleSize {
            max: ORACLE_MAX_P,
            got: p,
        });
    }
    if y.len() != n || fixed.prior_inclusion.len() != p {
        return Err(Error::Dimension("oracle inputs disagree in size".into()));
    }
    let (tau, sigma2) = (fixed.tau, fixed.sigma2);
    let y = DVector::from_column_slice(y);
    let gram = x.tr_mul(x);
    let xty = x.tr_mul(&y);
    let yty = y.norm_squared();
    let base = 0.5 * n as f64 * (tau.ln() - LN_2PI) - 0.5 * tau * yty;

    struct Model {
        logw: f64,
        members: Vec<usize>,
        mean: Vec<f64>,
        var: Vec<f64>,
    }
    let mut models = Vec::new();
    for mask in 0u32..(1u32 << p) {
        let members: Vec<usize> = (0..p).filter(|&s| mask & (1 << s) != 0).collect();
        let mut log_prior = 0.0;
        for s in 0..p {
            let pi = fixed.prior_inclusion[s];
            log_prior += if mask & (1 << s) != 0 { xlogy(1.0, pi) } else { xlogy(1.0, 1.0 - pi) };
        }
        if log_prior == f64::NEG_INFINITY {
            continue;
        }
        let k = members.len();
        if k == 0 {
            models.push(Model {
                logw: log_prior + base,
                members,
                mean: vec![],
                var: vec![],
            });
            continue;
        }
        let a = DMatrix::from_fn(k, k, |i, j| gram[(members[i], members[j])] + if i == j { 1.0 / sigma2 } else { 0.0 });
        let b = DVector::from_fn(k, |i, _| xty[members[i]]);
        let chol = a.cholesky().ok_or_else(|| Error::Numerical {
            trait_index: None,
            predictor: None,
            iteration: 0,
            what: "oracle precision matrix not positive definite".into(),
        })?;
        let mean = chol.solve(&b);
        let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let inv = chol.inverse();
        let loglik = base + 0.5 * tau * b.dot(&mean) - 0.5 * log_det - 0.5 * k as f64 * sigma2.ln();
        models.push(Model {
            logw: log_prior + loglik,
            mean: mean.iter().copied().collect(),
            var: (0..k).map(|i| inv[(i, i)] / tau).collect(),
            members,
        });
    }
    let max = models.iter().map(|m| m.logw).fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = models.iter().map(|m| (m.logw - max).exp()).sum();
    let log_evidence = max + total.ln();
    let mut ppi = vec![0.0; p];
    let mut m1 = vec![0.0; p];
    let mut m2 = vec![0.0; p];
    for m in &models {
        let w = (m.logw - log_evidence).exp();
        for (i, &s) in m.members.iter().enumerate() {
            ppi[s] += w;
            m1[s] += w * m.mean[i];
            m2[s] += w * (m.mean[i] * m.mean[i] + m.var[i]);
        }
    }
    let slab_mean: Vec<f64> = (0..p).map(|s| m1[s] / ppi[s]).collect();
    let slab_var = (0..p).map(|s| m2[s] / ppi[s] - slab_mean[s] * slab_mean[s]).collect();
    Ok(OracleResult {
        ppi,
        log_evidence,
        slab_mean,
        slab_var,
    })
}

/// Absolute t statistics of every single-predictor regression `y_t ~ x_s`.
/// For a fixed sample size the two-sided p-value is a decreasing function of
/// `|t|`, so ranking by the largest `|t|` is ranking by the smallest p-value.
pub fn marginal_abs_t(ds: &Dataset) -> DMatrix<f64> {
    let n = ds.n() as f64;
    let x = ds.x();
    let y = ds.y();
    let xty = x.tr_mul(y);
    let xx: Vec<f64> = x.column_iter().map(|c| c.norm_squared()).collect();
    let yy: Vec<f64> = y.column_iter().map(|c| c.norm_squared()).collect();
    DMatrix::from_fn(ds.p(), ds.q(), |s, t| {
        let denom = (xx[s] * yy[t]).sqrt();
        if denom == 0.0 {
            return 0.0;
        }
        let r = (xty[(s, t)] / denom).clamp(-1.0, 1.0);
        let one_minus = (1.0 - r * r).max(f64::MIN_POSITIVE);
        r.abs() * ((n - 2.0) / one_minus).sqrt()
    })
}

/// Two-sided p-values of the marginal regressions.
pub fn marginal_pvalues(ds: &Dataset) -> DMatrix<f64> {
    use statrs::distribution::{ContinuousCDF, StudentsT};
    let df = ds.n() as f64 - 2.0;
    let dist = StudentsT::new(0.0, 1.0, df).expect("n > 2");
    marginal_abs_t(ds).map(|t| 2.0 * dist.sf(t))
}

/// Column-wise maxima (one score per trait).
pub fn column_max(m: &DMatrix<f64>) -> Vec<f64> {
    m.column_iter().map(|c| c.max()).collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
    pub count: usize,
}

impl MeanSe {
    /// Mean and standard error (sample variance with `n − 1`) of the
    /// defined values.
    pub fn of(values: impl IntoIterator<Item = Option<f64>>) -> Self {
        let v: Vec<f64> = values.into_iter().flatten().collect();
        let count = v.len();
        if count == 0 {
            return Self {
                mean: f64::NAN,
                se: f64::NAN,
                count,
            };
        }
        let mean = v.iter().sum::<f64>() / count as f64;
        let se = if count > 1 {
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (count - 1) as f64;
            (var / count as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, se, count }
    }
}

#[derive(Debug, Clone)]
pub struct SchemeSummary {
    pub scheme: Scheme,
    pub fpr: MeanSe,
    pub precision: MeanSe,
    pub recall: MeanSe,
    pub delta_iterations: MeanSe,
    /// Reduction (positive = faster) in total and local wall time, percent.
    pub reduction_runtime_total: MeanSe,
    pub reduction_runtime_local: MeanSe,
    pub reduction_local_updates: MeanSe,
}

#[derive(Debug, Clone)]
pub struct Benchmark {
    pub threshold: f64,
    /// `reports[c][r]`: config `c` on replicate `r`.
    pub reports: Vec<Vec<FitReport>>,
    pub panels: Vec<Vec<ScorePanel>>,
    pub summary: Vec<SchemeSummary>,
}

/// Fits every config on every replicate and summarises each against the
/// baseline: the first vanilla config, or the first config when there is none.
pub fn benchmark_fit(
    replicates: &[(Dataset, DMatrix<bool>)],
    hyper: &Hyperparameters,
    configs: &[FitConfig],
    threshold: f64,
) -> Result<Benchmark> {
    if configs.is_empty() {
        return Err(Error::Config("benchmark needs at least one config".into()));
    }
    let base = configs.iter().position(|c| c.scheme == Scheme::Vanilla).unwrap_or(0);
    let jobs: Vec<(usize, usize)> = (0..configs.len())
        .flat_map(|c| (0..replicates.len()).map(move |r| (c, r)))
        .collect();
    let results: Vec<Result<(FitReport, ScorePanel)>> = jobs
        .par_iter()
        .map(|&(c, r)| {
            let (ds, truth) = &replicates[r];
            let rep = run_cavi(ds, hyper, &configs[c])?;
            let panel = confusion_metrics(&rep.ppi, truth, threshold)?;
            Ok((rep, panel))
        })
        .collect();
    let mut reports: Vec<Vec<FitReport>> = (0..configs.len()).map(|_| Vec::new()).collect();
    let mut panels: Vec<Vec<ScorePanel>> = (0..configs.len()).map(|_| Vec::new()).collect();
    for (&(c, _), res) in jobs.iter().zip(results) {
        let (rep, panel) = res?;
        reports[c].push(rep);
        panels[c].push(panel);
    }
    let summary = (0..configs.len())
        .map(|c| {
            let rel = |f: &dyn Fn(&FitReport) -> f64, negate: bool| {
                MeanSe::of((0..replicates.len()).map(|r| {
                    let v = relative_change(f(&reports[c][r]), f(&reports[base][r])).ok()?;
                    Some(if negate { -v } else { v })
                }))
            };
            SchemeSummary {
                scheme: configs[c].scheme,
                fpr: MeanSe::of(panels[c].iter().map(|p| p.fpr)),
                precision: MeanSe::of(panels[c].iter().map(|p| p.precision)),
                recall: MeanSe::of(panels[c].iter().map(|p| p.recall)),
                delta_iterations: rel(&|r| r.iterations as f64, false),
                reduction_runtime_total: rel(&|r| r.wall_time_total.as_secs_f64(), true),
                reduction_runtime_local: rel(&|r| r.wall_time_local.as_secs_f64(), true),
                reduction_local_updates: rel(&|r| r.local_update_count as f64, true),
            }
        })
        .collect();
    Ok(Benchmark {
        threshold,
        reports,
        panels,
        summary,
    })
}

impl Benchmark {
    pub fn comparison_tsv(&self) -> String {
        let fmt = |m: &MeanSe| format!("{:.6}±{:.6}", m.mean, m.se);
        let mut out = String::from(
            "scheme\tdelta_iterations_pct\tneg_delta_runtime_total_pct\tneg_delta_runtime_local_pct\tneg_delta_local_updates_pct\tfpr\tprecision\trecall\n",
        );
        for s in &self.summary {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                s.scheme,
                fmt(&s.delta_iterations),
                fmt(&s.reduction_runtime_total),
                fmt(&s.reduction_runtime_local),
                fmt(&s.reduction_local_updates),
                fmt(&s.fpr),
                fmt(&s.precision),
                fmt(&s.recall)
            );
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        io::write_text(path, &self.comparison_tsv())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{fit_frozen, FrozenGlobals};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn confusion_examples() {
        let truth = DMatrix::from_row_slice(2, 2, &[true, false, false, false]);
        let scores = DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.6, 0.2]);
        let p = confusion_metrics(&scores, &truth, 0.5).unwrap();
        assert_eq!((p.tp, p.fp), (1, 1));
        assert_eq!(p.precision, Some(0.5));
        assert_eq!(p.recall, Some(1.0));
        assert!((p.fpr.unwrap() - 1.0 / 3.0).abs() < 1e-15);

        let perfect = truth.map(|b| b as u8 as f64);
        let p = confusion_metrics(&perfect, &truth, 0.5).unwrap();
        assert_eq!((p.precision, p.recall, p.fpr), (Some(1.0), Some(1.0), Some(0.0)));

        let zeros = DMatrix::zeros(2, 2);
        let p = confusion_metrics(&zeros, &truth, 0.5).unwrap();
        assert_eq!((p.recall, p.fpr, p.precision), (Some(0.0), Some(0.0), None));
    }

    #[test]
    fn recall_is_non_increasing_in_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let scores = DMatrix::from_fn(20, 5, |_, _| rng.random::<f64>());
        let truth = DMatrix::from_fn(20, 5, |_, _| rng.random::<f64>() < 0.3);
        let mut last = f64::INFINITY;
        for k in 0..=20 {
            let r = confusion_metrics(&scores, &truth, k as f64 / 20.0).unwrap().recall.unwrap();
            assert!(r <= last);
            last = r;
        }
    }

    #[test]
    fn curve_edge_cases() {
        let truth = [true, true, false, false, false];
        let c = roc_pr_curves(&[0.9, 0.8, 0.3, 0.2, 0.1], &truth).unwrap();
        assert_eq!((c.auroc, c.auprc), (1.0, 1.0));
        let c = roc_pr_curves(&[0.1, 0.2, 0.7, 0.8, 0.9], &truth).unwrap();
        assert_eq!(c.auroc, 0.0);
        assert!(matches!(roc_pr_curves(&[0.1, 0.2], &[true, true]), Err(Error::UndefinedAuc)));
        let tied = roc_pr_curves(&[0.5; 5], &truth).unwrap();
        assert_eq!(tied.roc.len(), 2);
        assert!((tied.auroc - 0.5).abs() < 1e-15);
    }

    #[test]
    fn auroc_is_invariant_to_monotone_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let truth: Vec<bool> = (0..200).map(|_| rng.random::<f64>() < 0.4).collect();
        let scores: Vec<f64> = truth.iter().map(|&b| rng.random::<f64>() + b as u8 as f64 * 0.3).collect();
        let a = roc_pr_curves(&scores, &truth).unwrap().auroc;
        let mapped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp()).collect();
        assert_eq!(a, roc_pr_curves(&mapped, &truth).unwrap().auroc);
    }

    #[test]
    fn auroc_null_is_one_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let truth: Vec<bool> = (0..100_000).map(|_| rng.random::<bool>()).collect();
        let scores: Vec<f64> = (0..100_000).map(|_| rng.random::<f64>()).collect();
        assert!((roc_pr_curves(&scores, &truth).unwrap().auroc - 0.5).abs() < 0.01);
    }

    #[test]
    fn relative_change_examples() {
        assert_eq!(relative_change(50.0, 100.0).unwrap(), -50.0);
        assert_eq!(relative_change(100.0, 100.0).unwrap(), 0.0);
        assert_eq!(relative_change(120.0, 100.0).unwrap(), 20.0);
        assert!(matches!(relative_change(1.0, 0.0), Err(Error::ZeroBaseline)));
        assert_eq!(relative_change(-3.5, -3.5).unwrap(), 0.0);
    }

    fn instance(n: usize, p: usize, seed: u64) -> (DMatrix<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, p, |_, _| rng.random::<f64>() - 0.5);
        let y: Vec<f64> = (0..n).map(|i| 0.8 * x[(i, 0)] + rng.random::<f64>() - 0.5).collect();
        (x, y)
    }

    #[test]
    fn oracle_with_spike_only_prior_returns_null_evidence() {
        let (x, y) = instance(20, 3, 4);
        let fixed = OracleFixed {
            tau: 3.0,
            sigma2: 0.5,
            prior_inclusion: vec![0.0; 3],
        };
        let r = exact_posterior_oracle(&x, &y, &fixed).unwrap();
        assert!(r.ppi.iter().all(|&v| v == 0.0));
        let yy: f64 = y.iter().map(|v| v * v).sum();
        let null = 10.0 * (3.0f64.ln() - LN_2PI) - 1.5 * yy;
        assert!((r.log_evidence - null).abs() < 1e-10);
        assert!(matches!(
            exact_posterior_oracle(&DMatrix::zeros(2, 13), &[0.0, 0.0], &OracleFixed {
                tau: 1.0,
                sigma2: 1.0,
                prior_inclusion: vec![0.5; 13]
            }),
            Err(Error::OracleSize { max: 12, got: 13 })
        ));
    }

    #[test]
    fn oracle_single_predictor_matches_two_term_sum() {
        // Orthogonal design: Xᵀy = 0 leaves only the Occam factor.
        let x = DMatrix::from_column_slice(4, 1, &[1.0, -1.0, 1.0, -1.0]);
        let y = [1.0, 1.0, -1.0, -1.0];
        let fixed = OracleFixed {
            tau: 1.3,
            sigma2: 0.8,
            prior_inclusion: vec![0.4],
        };
        let r = exact_posterior_oracle(&x, &y, &fixed).unwrap();
        let a: f64 = 4.0 + 1.0 / 0.8;
        let occam = -0.5 * (0.8 * a).ln();
        let odds = 0.4 / 0.6 * occam.exp();
        assert!((r.ppi[0] - odds / (1.0 + odds)).abs() < 1e-14);
        let null = 2.0 * (1.3f64.ln() - LN_2PI) - 0.5 * 1.3 * 4.0;
        let evidence = (0.6 * null.exp() + 0.4 * (null + occam).exp()).ln();
        assert!((r.log_evidence - evidence).abs() < 1e-12);
    }

    #[test]
    fn oracle_evidence_matches_quadrature() {
        let (x, y) = instance(15, 1, 6);
        let fixed = OracleFixed {
            tau: 2.0,
            sigma2: 0.6,
            prior_inclusion: vec![0.3],
        };
        let r = exact_posterior_oracle(&x, &y, &fixed).unwrap();
        // ∫ N(y; xβ, τ⁻¹I) N(β; 0, σ²/τ) dβ by the trapezoid rule.
        let lik = |b: f64| -> f64 {
            let rss: f64 = (0..15).map(|i| (y[i] - x[(i, 0)] * b).powi(2)).sum();
            let log_prior = -0.5 * (LN_2PI + (0.6f64 / 2.0).ln()) - 0.5 * b * b * 2.0 / 0.6;
            (7.5 * (2.0f64.ln() - LN_2PI) - rss + log_prior).exp()
        };
        let (lo, hi, m) = (-10.0, 10.0, 200_000);
        let h = (hi - lo) / m as f64;
        let mut integral = 0.5 * (lik(lo) + lik(hi));
        for k in 1..m {
            integral += lik(lo + k as f64 * h);
        }
        integral *= h;
        let yy: f64 = y.iter().map(|v| v * v).sum();
        let null = (7.5 * (2.0f64.ln() - LN_2PI) - yy).exp();
        let evidence = (0.7 * null + 0.3 * integral).ln();
        assert!((r.log_evidence - evidence).abs() < 1e-8, "{} vs {evidence}", r.log_evidence);
    }

    #[test]
    fn frozen_engine_agrees_with_oracle_for_one_predictor() {
        for seed in 0..10 {
            let (x, y) = instance(50, 1, seed);
            let fixed = OracleFixed {
                tau: 4.0,
                sigma2: 0.3,
                prior_inclusion: vec![0.2],
            };
            let r = exact_posterior_oracle(&x, &y, &fixed).unwrap();
            let fit = fit_frozen(
                &x,
                &y,
                &FrozenGlobals {
                    tau: 4.0,
                    sigma2: 0.3,
                    prior_inclusion: vec![0.2],
                },
                100,
            )
            .unwrap();
            assert!((fit.g[0] - r.ppi[0]).abs() < 1e-10);
            assert!((fit.mu[0] - r.slab_mean[0]).abs() < 1e-10);
            assert!((fit.s2[0] - r.slab_var[0]).abs() < 1e-10);
            assert!((fit.elbo - r.log_evidence).abs() < 1e-9);
        }
    }

    #[test]
    fn frozen_engine_elbo_bounds_multi_predictor_evidence() {
        let (x, y) = instance(30, 5, 8);
        let fixed = OracleFixed {
            tau: 2.0,
            sigma2: 1.0,
            prior_inclusion: vec![0.3; 5],
        };
        let r = exact_posterior_oracle(&x, &y, &fixed).unwrap();
        let fit = fit_frozen(
            &x,
            &y,
            &FrozenGlobals {
                tau: 2.0,
                sigma2: 1.0,
                prior_inclusion: vec![0.3; 5],
            },
            1000,
        )
        .unwrap();
        assert!(fit.elbo <= r.log_evidence + 1e-12);
    }

    #[test]
    fn mean_se_uses_sample_variance() {
        let m = MeanSe::of([Some(1.0), Some(3.0), None]);
        assert_eq!(m.mean, 2.0);
        assert!((m.se - 1.0).abs() < 1e-15);
        assert_eq!(m.count, 2);
    }
}
