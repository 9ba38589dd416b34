//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`). Every criterion is always
//! evaluated and reported; the process exits nonzero on a failing criterion
//! only when `AFCAVI_ACCEPTANCE_STRICT=1` is set.

use std::time::{Duration, Instant};

use afcavi::data::{Block, BlockTable, Dataset, SnpMeta};
use afcavi::engine::{fit_frozen, run_cavi, FitConfig, FitReport, FrozenGlobals};
use afcavi::evaluate::{
    benchmark_fit, column_max, exact_posterior_oracle, marginal_abs_t, roc_pr_curves, Benchmark, MeanSe,
    OracleFixed,
};
use afcavi::focus::{perturbation_afe, perturbation_afi, selection_probabilities, Scheme};
use afcavi::model::Hyperparameters;
use afcavi::pipeline::{fit_blocks, loci_tsv, locus_trait_pairs, summarize_loci, LocusParams};
use afcavi::simulate::{
    effect_size, simulate_correlated_noise, simulate_dataset, simulate_effect_sizes, SimulationSpec,
};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(checks: Vec<(bool, String)>) -> Self {
        let pass = checks.iter().all(|c| c.0);
        let detail = checks
            .into_iter()
            .map(|(ok, msg)| format!("[{}] {msg}", if ok { "ok" } else { "X" }))
            .collect::<Vec<_>>()
            .join("; ");
        Self { pass, detail }
    }
}

fn within_budget(elapsed: Duration, budget: Duration) -> (bool, String) {
    (
        elapsed <= budget,
        format!("runtime {:.1}s (budget {:.0}s)", elapsed.as_secs_f64(), budget.as_secs_f64()),
    )
}

fn oracle_exactness() -> Outcome {
    let clock = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut worst_ppi, mut worst_mean, mut worst_var, mut worst_gap) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut above = 0;
    for _ in 0..50 {
        let n = 200;
        let x = DMatrix::from_fn(n, 1, |_, _| rng.sample::<f64, _>(StandardNormal));
        let effect = if rng.random::<bool>() { rng.random_range(-0.3..0.3) } else { 0.0 };
        let y: Vec<f64> = (0..n).map(|i| effect * x[(i, 0)] + rng.sample::<f64, _>(StandardNormal)).collect();
        let tau = rng.random_range(0.3..3.0);
        let sigma2 = rng.random_range(0.05..3.0);
        let pi = rng.random_range(0.02..0.98);
        let fit = fit_frozen(
            &x,
            &y,
            &FrozenGlobals {
                tau,
                sigma2,
                prior_inclusion: vec![pi],
            },
            1000,
        )
        .expect("frozen fit");
        let exact = exact_posterior_oracle(
            &x,
            &y,
            &OracleFixed {
                tau,
                sigma2,
                prior_inclusion: vec![pi],
            },
        )
        .expect("oracle");
        worst_ppi = worst_ppi.max((fit.g[0] - exact.ppi[0]).abs());
        worst_mean = worst_mean.max((fit.mu[0] - exact.slab_mean[0]).abs());
        worst_var = worst_var.max((fit.s2[0] - exact.slab_var[0]).abs());
        let gap = exact.log_evidence - fit.elbo;
        if gap < -1e-9 * exact.log_evidence.abs() {
            above += 1;
        }
        worst_gap = worst_gap.max(gap.abs());
    }
    Outcome::new(vec![
        (worst_ppi < 1e-6, format!("max |PPI - exact| = {worst_ppi:.2e}")),
        (worst_mean < 1e-6, format!("max |slab mean - exact| = {worst_mean:.2e}")),
        (worst_var < 1e-6, format!("max |slab var - exact| = {worst_var:.2e}")),
        (above == 0, format!("{above} instances with ELBO above log evidence")),
        (worst_gap < 1e-6, format!("max |log evidence - ELBO| = {worst_gap:.2e}")),
        within_budget(clock.elapsed(), Duration::from_secs(60)),
    ])
}

fn elbo_monotonicity() -> Outcome {
    let clock = Instant::now();
    let hyper = Hyperparameters::default();
    let mut violations = 0;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for instance in 0..20u64 {
        let spec = SimulationSpec {
            n: 500,
            p: 50,
            q: 100,
            seed: 2000 + instance,
            ..Default::default()
        };
        let ds = simulate_dataset(&spec).and_then(|s| s.dataset()).expect("simulation");
        for scheme in Scheme::ALL {
            let config = FitConfig {
                scheme,
                seed: instance,
                record_trace: true,
                ..Default::default()
            };
            let rep = run_cavi(&ds, &hyper, &config).expect("fit");
            let audited: Vec<f64> = rep
                .trace
                .iter()
                .filter(|r| r.temperature == 1.0 && r.iteration >= hyper.anneal_grid)
                .map(|r| r.elbo_audit.expect("audit recorded"))
                .collect();
            for w in audited.windows(2) {
                checked += 1;
                let drop = (w[0] - w[1]) / w[0].abs();
                worst = worst.max(drop);
                if drop > 1e-7 {
                    violations += 1;
                }
            }
        }
    }
    Outcome::new(vec![
        (
            violations == 0,
            format!("{violations} decreases beyond 1e-7 relative over {checked} steps (largest relative drop {worst:.2e})"),
        ),
        within_budget(clock.elapsed(), Duration::from_secs(600)),
    ])
}

struct Scenario {
    a_q: f64,
    replicates: Vec<(Dataset, DMatrix<bool>)>,
    bench: Benchmark,
}

struct Grid {
    scenarios: Vec<Scenario>,
    elapsed: Duration,
}

fn run_grid() -> Grid {
    let clock = Instant::now();
    let hyper = Hyperparameters::default();
    let configs: Vec<FitConfig> = Scheme::ALL
        .iter()
        .map(|&scheme| FitConfig {
            scheme,
            seed: 17,
            ..Default::default()
        })
        .collect();
    let scenarios = [0.01, 0.2]
        .into_iter()
        .enumerate()
        .map(|(k, a_q)| {
            let replicates: Vec<(Dataset, DMatrix<bool>)> = (0..10u64)
                .map(|r| {
                    let spec = SimulationSpec {
                        n: 2000,
                        p: 300,
                        q: 500,
                        a_p: 0.01,
                        a_q,
                        h2m: 0.15,
                        seed: 3000 + 100 * k as u64 + r,
                        ..Default::default()
                    };
                    let sim = simulate_dataset(&spec).expect("simulation");
                    (sim.dataset().expect("dataset"), sim.truth.gamma_true)
                })
                .collect();
            let bench = benchmark_fit(&replicates, &hyper, &configs, 0.5).expect("benchmark");
            println!("# grid a_q = {a_q}\n{}", bench.comparison_tsv());
            Scenario { a_q, replicates, bench }
        })
        .collect();
    Grid {
        scenarios,
        elapsed: clock.elapsed(),
    }
}

fn scheme_index(bench: &Benchmark, scheme: Scheme) -> usize {
    bench.summary.iter().position(|s| s.scheme == scheme).expect("scheme benchmarked")
}

fn statistical_parity(grid: &Grid) -> Outcome {
    let mut checks = Vec::new();
    for sc in &grid.scenarios {
        let b = &sc.bench;
        let base = &b.summary[scheme_index(b, Scheme::Vanilla)];
        let mut worst_metric = 0.0f64;
        let mut worst_ppi = 0.0f64;
        for scheme in [Scheme::Afe, Scheme::Afi, Scheme::Afio, Scheme::Rf] {
            let c = scheme_index(b, scheme);
            let s = &b.summary[c];
            for (m, v) in [(&s.precision, &base.precision), (&s.recall, &base.recall), (&s.fpr, &base.fpr)] {
                worst_metric = worst_metric.max((m.mean - v.mean).abs());
            }
            for (rep, vanilla) in b.reports[c].iter().zip(&b.reports[scheme_index(b, Scheme::Vanilla)]) {
                for (a, v) in rep.ppi.iter().zip(vanilla.ppi.iter()) {
                    if *v > b.threshold {
                        worst_ppi = worst_ppi.max((a - v).abs());
                    }
                }
            }
        }
        checks.push((
            worst_metric <= 0.03,
            format!("a_q={}: max |metric - vanilla| = {worst_metric:.4}", sc.a_q),
        ));
        checks.push((
            worst_ppi <= 0.05,
            format!("a_q={}: max |PPI - vanilla| at vanilla signals = {worst_ppi:.4}", sc.a_q),
        ));
    }
    checks.push(within_budget(grid.elapsed, Duration::from_secs(7200)));
    Outcome::new(checks)
}

fn savings_ordering(grid: &Grid) -> Outcome {
    let reduction = |sc: &Scenario, scheme: Scheme| -> MeanSe {
        sc.bench.summary[scheme_index(&sc.bench, scheme)].reduction_local_updates
    };
    let sparse = &grid.scenarios[0];
    let dense = &grid.scenarios[1];
    let (afe, afi, afio) = (
        reduction(sparse, Scheme::Afe).mean,
        reduction(sparse, Scheme::Afi).mean,
        reduction(sparse, Scheme::Afio).mean,
    );
    let mut checks = vec![
        (
            (afio - afi).abs() <= 5.0,
            format!("AFIO {afio:.1}% vs AFI {afi:.1}% (within 5 points)"),
        ),
        (afi >= afe, format!("AFI {afi:.1}% >= AFE {afe:.1}%")),
        (afe > 0.0, format!("AFE {afe:.1}% > 0")),
        (afio >= 40.0, format!("AFIO {afio:.1}% >= 40% at a_q=0.01")),
    ];
    for scheme in [Scheme::Afe, Scheme::Afi, Scheme::Afio] {
        let s = reduction(sparse, scheme).mean;
        let d = reduction(dense, scheme).mean;
        checks.push((s > d, format!("{scheme}: {s:.1}% at a_q=0.01 > {d:.1}% at a_q=0.2")));
        let inflation = sparse.bench.summary[scheme_index(&sparse.bench, scheme)].delta_iterations.mean;
        checks.push((inflation <= 5.0, format!("{scheme}: iteration change {inflation:+.1}% <= 5%")));
    }
    Outcome::new(checks)
}

fn schedule_units() -> Outcome {
    let omega = |a: f64, eps: f64| selection_probabilities(&[a], eps, false)[0];
    Outcome::new(vec![
        (perturbation_afi(1, 0.95) == 1.0, "afi(1) = 1".into()),
        (perturbation_afi(2, 0.95) == 0.95, "afi(2) = 0.95".into()),
        (perturbation_afe(1.0) == 0.5, "afe(1) = 0.5".into()),
        (omega(0.37, 1.0) == 1.0, "omega(a, eps = 1) = 1".into()),
        (omega(0.3, 0.0) == 0.3, "omega(0.3, eps = 0) = 0.3".into()),
        (
            selection_probabilities(&[0.3], 0.0, true) == [1.0] && selection_probabilities(&[0.3], 1.0, true) == [0.3],
            "literal form limits".into(),
        ),
    ])
}

fn simulator_calibration() -> Outcome {
    let clock = Instant::now();
    let draws = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(606);

    let spec = SimulationSpec {
        h2m: 0.15,
        ..Default::default()
    };
    let all = DMatrix::from_element(1, draws, true);
    let (_, h2_t, _) = simulate_effect_sizes(&all, &spec, &[0.3], &vec![1.0; draws], &mut rng).expect("effects");
    let mean_h2 = h2_t.iter().sum::<f64>() / draws as f64;

    let noise_spec = SimulationSpec {
        n: draws,
        q: 30,
        ..Default::default()
    };
    let (noise, etas) = simulate_correlated_noise(&noise_spec, &mut rng).expect("noise");
    let mut worst_corr = 0.0f64;
    for (b, eta) in etas.iter().enumerate() {
        for i in 0..10 {
            for j in (i + 1)..10 {
                let r = correlation(noise.column(10 * b + i).as_slice(), noise.column(10 * b + j).as_slice());
                worst_corr = worst_corr.max((r - eta).abs());
            }
        }
    }

    let spot = effect_size(0.1, 0.1, 1.0, 0.5);

    let pattern = DMatrix::from_fn(8, 2000, |s, t| (s + t) % 3 == 0 || s == t % 8);
    let maf: Vec<f64> = (0..8).map(|s| 0.05 + 0.05 * s as f64).collect();
    let (_, h2_t, h2_st) = simulate_effect_sizes(&pattern, &spec, &maf, &vec![1.3; 2000], &mut rng).expect("effects");
    let worst_sum = (0..2000)
        .map(|t| (h2_st.column(t).sum() - h2_t[t]).abs())
        .fold(0.0f64, f64::max);

    Outcome::new(vec![
        ((mean_h2 - 0.15).abs() <= 0.01, format!("mean h2_t = {mean_h2:.4} (target 0.15)")),
        (worst_corr <= 0.01, format!("max |within-block correlation - eta| = {worst_corr:.4}")),
        (
            (spot - (2.0f64 / 9.0).sqrt()).abs() <= 1e-12,
            format!("effect spot value {spot:.15}"),
        ),
        (worst_sum <= 1e-10, format!("max |sum h2_st - h2_t| = {worst_sum:.1e}")),
        within_budget(clock.elapsed(), Duration::from_secs(300)),
    ])
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

fn pipeline_determinism(grid: &Grid) -> Outcome {
    let spec = SimulationSpec {
        n: 400,
        p: 100,
        q: 40,
        a_p: 0.05,
        a_q: 0.3,
        h2m: 0.3,
        seed: 707,
        ..Default::default()
    };
    let ds = simulate_dataset(&spec).and_then(|s| s.dataset()).expect("simulation");
    let blocks = BlockTable::new(vec![
        Block {
            block_id: 1,
            start_bp: 1,
            end_bp: 500_000,
        },
        Block {
            block_id: 2,
            start_bp: 500_001,
            end_bp: 1_000_000,
        },
    ])
    .expect("blocks");
    let hyper = Hyperparameters::default();
    let fit = FitConfig {
        scheme: Scheme::Afio,
        seed: 7,
        ..Default::default()
    };
    let run = |parallelism| {
        fit_blocks(&ds, &blocks, &hyper, &fit, parallelism, LocusParams::default(), 1_000_000).expect("pipeline")
    };
    let (one, four) = (run(1), run(4));
    let (tsv1, tsv4) = (loci_tsv(&one.loci), loci_tsv(&four.loci));

    let pair = |gap: u64| {
        let snps = vec![
            SnpMeta {
                id: "a".into(),
                bp: 1_000_000,
                maf: 0.2,
            },
            SnpMeta {
                id: "b".into(),
                bp: 1_000_000 + gap,
                maf: 0.2,
            },
        ];
        let ppi = DMatrix::from_element(2, 1, 0.9);
        let beta = DMatrix::from_element(2, 1, 0.1);
        summarize_loci(&ppi, &beta, &snps, &["t".to_string()], LocusParams::default()).expect("loci")
    };
    let near = pair(400_000);
    let far = pair(600_000);

    let sparse = &grid.scenarios[0];
    let vanilla = scheme_index(&sparse.bench, Scheme::Vanilla);
    let afio = scheme_index(&sparse.bench, Scheme::Afio);
    let pairs = |rep: &FitReport, ds: &Dataset| {
        let loci = summarize_loci(&rep.ppi, &rep.beta_mean, ds.snps(), &ds.trait_ids(), LocusParams::default())
            .expect("loci");
        locus_trait_pairs(&loci)
    };
    let identical = (0..sparse.replicates.len())
        .filter(|&r| {
            let ds = &sparse.replicates[r].0;
            pairs(&sparse.bench.reports[vanilla][r], ds) == pairs(&sparse.bench.reports[afio][r], ds)
        })
        .count();

    Outcome::new(vec![
        (
            tsv1 == tsv4 && !one.loci.is_empty(),
            format!("parallelism 1 vs 4 loci.tsv identical ({} loci)", one.loci.len()),
        ),
        (near.len() == 1, format!("0.4 Mb apart -> {} locus", near.len())),
        (
            far.len() == 2 && far[0].lead_snp == "a",
            format!("0.6 Mb apart -> {} loci, first lead {}", far.len(), far[0].lead_snp),
        ),
        (identical >= 9, format!("vanilla vs AFIO locus/trait lists identical on {identical}/10")),
    ])
}

fn toy_protocol() -> Outcome {
    let clock = Instant::now();
    let hyper = Hyperparameters::default();
    // Mean heritability 0.05% at n = 36 626 carries the same signal as
    // 0.05% × 36 626 / 2000 at n = 2000.
    let h2m = 0.0005 * 36_626.0 / 2000.0;
    let mut wins = 0;
    let mut lines = Vec::new();
    for r in 0..10u64 {
        let spec = SimulationSpec {
            n: 2000,
            p: 200,
            q: 1000,
            a_p: 1.0 / 200.0,
            a_q: 0.2,
            h2m,
            seed: 8000 + r,
            ..Default::default()
        };
        let sim = simulate_dataset(&spec).expect("simulation");
        let ds = sim.dataset().expect("dataset");
        let truth: Vec<bool> = (0..spec.q).map(|t| sim.truth.gamma_true.column(t).iter().any(|&g| g)).collect();
        let rep = run_cavi(&ds, &hyper, &FitConfig::default()).expect("fit");
        let joint = roc_pr_curves(&column_max(&rep.ppi), &truth).expect("curves").auroc;
        let screen = roc_pr_curves(&column_max(&marginal_abs_t(&ds)), &truth).expect("curves").auroc;
        if joint > screen {
            wins += 1;
        }
        lines.push(format!("{joint:.3}/{screen:.3}"));
    }
    Outcome::new(vec![
        (
            wins >= 8,
            format!("joint AUROC beats marginal screen on {wins}/10 (joint/screen: {})", lines.join(" ")),
        ),
        (true, format!("runtime {:.1}s", clock.elapsed().as_secs_f64())),
    ])
}

fn main() {
    let mut outcomes: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut record = |n: usize, name: &'static str, o: Outcome| {
        println!("{} criterion {n} ({name}): {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        outcomes.push((n, name, o));
    };
    record(5, "schedule unit conformance", schedule_units());
    record(1, "oracle exactness", oracle_exactness());
    record(6, "simulator calibration", simulator_calibration());
    record(2, "ELBO monotonicity", elbo_monotonicity());
    record(8, "toy-protocol sanity", toy_protocol());
    let grid = run_grid();
    record(3, "statistical parity", statistical_parity(&grid));
    record(4, "adaptive-focus savings ordering", savings_ordering(&grid));
    record(7, "pipeline determinism and composition", pipeline_determinism(&grid));

    outcomes.sort_by_key(|o| o.0);
    println!("\nsummary:");
    for (n, name, o) in &outcomes {
        println!("{} criterion {n} ({name})", if o.pass { "PASS" } else { "FAIL" });
    }
    let failed = outcomes.iter().filter(|o| !o.2.pass).count();
    println!("{} passed, {failed} failed", outcomes.len() - failed);
    if failed > 0 && std::env::var("AFCAVI_ACCEPTANCE_STRICT").as_deref() == Ok("1") {
        std::process::exit(1);
    }
}
