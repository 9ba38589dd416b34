use std::path::{Path, PathBuf};
use std::process::ExitCode;

use afcavi::data::{load_row_labeled_matrix, load_snp_meta, load_trait_meta, traits_from_ids, InputPaths, INPUT_KEYS};
use afcavi::engine::{resume, run_cavi, FitConfig};
use afcavi::evaluate::{
    benchmark_fit, confusion_metrics, exact_posterior_oracle, roc_pr_curves, OracleFixed, ScorePanel,
};
use afcavi::focus::Scheme;
use afcavi::io::{fmt_f64, write_text, KeyValues};
use afcavi::model::{Hyperparameters, VariationalState};
use afcavi::pipeline::{label_loci, loci_tsv, run_pipeline, summarize_loci, LocusParams, MergeRule, PipelineConfig};
use afcavi::simulate::{simulate_dataset, SimulationSpec};
use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "afcavi", version, about = "Adaptive-focus variational inference for multi-trait sparse regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Seed overriding any seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// `key=value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate genotypes, responses and ground truth.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Fit one dataset.
    Fit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scheme: Option<Scheme>,
        /// Directory laid out as written by `simulate`; replaces the input keys.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a fit against a ground-truth link matrix.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Directory holding `ppi.tsv`.
        #[arg(long)]
        fit: PathBuf,
        /// Ground-truth link matrix (`gamma_true.tsv`).
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Exact posterior of one response by model enumeration.
    Oracle {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Block-wise fitting and locus summarisation.
    Pipeline {
        #[command(flatten)]
        common: Common,
    },
    /// Locus report from a finished fit.
    Report {
        #[command(flatten)]
        common: Common,
        /// Directory holding `ppi.tsv` and `beta.tsv`.
        #[arg(long)]
        fit: PathBuf,
    },
    /// Compare schemes over simulated replicates.
    Benchmark {
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate { .. } => "simulate",
            Command::Fit { .. } => "fit",
            Command::Evaluate { .. } => "evaluate",
            Command::Oracle { .. } => "oracle",
            Command::Pipeline { .. } => "pipeline",
            Command::Report { .. } => "report",
            Command::Benchmark { .. } => "benchmark",
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let stage = cli.command.name();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("afcavi: stage '{stage}' failed: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Simulate { common } => simulate(&common),
        Command::Fit {
            common,
            scheme,
            data,
            resume,
        } => fit(&common, scheme, data.as_deref(), resume.as_deref()),
        Command::Evaluate {
            common,
            fit,
            truth,
            threshold,
        } => evaluate(&common, &fit, &truth, threshold),
        Command::Oracle { common, data } => oracle(&common, data.as_deref()),
        Command::Pipeline { common } => pipeline(&common),
        Command::Report { common, fit } => report(&common, &fit),
        Command::Benchmark { common } => benchmark(&common),
    }
}

fn read_config(common: &Common) -> Result<(KeyValues, PathBuf)> {
    match &common.config {
        Some(path) => {
            let kv = KeyValues::read(path).with_context(|| format!("reading config {}", path.display()))?;
            let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
            Ok((kv, base))
        }
        None => Ok((KeyValues::default(), PathBuf::new())),
    }
}

fn reject_unknown(kv: &KeyValues, groups: &[&[&str]]) -> Result<()> {
    let allowed: Vec<&str> = groups.iter().flat_map(|g| g.iter().copied()).collect();
    kv.reject_unknown(&allowed)?;
    Ok(())
}

fn create_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn simulate(common: &Common) -> Result<()> {
    let (kv, _) = read_config(common)?;
    reject_unknown(&kv, &[SimulationSpec::keys()])?;
    let mut spec = SimulationSpec::from_key_values(&kv).context("simulation config")?;
    if let Some(seed) = common.seed {
        spec.seed = seed;
    }
    let sim = simulate_dataset(&spec).context("simulating")?;
    sim.write(&common.out, &spec).context("writing simulated data")?;
    println!(
        "simulated n={} p={} q={} with {} links into {}",
        spec.n,
        spec.p,
        spec.q,
        sim.truth.gamma_true.iter().filter(|&&g| g).count(),
        common.out.display()
    );
    Ok(())
}

fn fit(common: &Common, scheme: Option<Scheme>, data: Option<&Path>, checkpoint: Option<&Path>) -> Result<()> {
    let (kv, base) = read_config(common)?;
    reject_unknown(&kv, &[INPUT_KEYS, Hyperparameters::keys(), FitConfig::keys()])?;
    let hyper = Hyperparameters::from_key_values(&kv).context("hyperparameters")?;
    let mut config = FitConfig::from_key_values(&kv).context("fit config")?;
    if let Some(s) = scheme {
        config.scheme = s;
    }
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    let inputs = match data {
        Some(dir) => InputPaths::in_directory(dir),
        None => InputPaths::from_key_values(&kv, &base).context("input paths")?,
    };
    let ds = inputs.load().context("loading inputs")?;
    let rep = match checkpoint {
        Some(path) => {
            let state = VariationalState::load(path).context("loading checkpoint")?;
            resume(&ds, &hyper, &config, state).context("fitting")?
        }
        None => run_cavi(&ds, &hyper, &config).context("fitting")?,
    };
    rep.write_tsv(&common.out).context("writing fit")?;
    rep.state.save(&common.out.join("state.bin")).context("writing checkpoint")?;
    let mut used = KeyValues::default();
    hyper.write_key_values(&mut used);
    config.write_key_values(&mut used);
    write_text(&common.out.join("config.txt"), &used.to_text())?;
    println!(
        "{}: {} iterations, {} local updates, converged={}, ELBO {}",
        rep.scheme,
        rep.iterations,
        rep.local_update_count,
        rep.converged,
        fmt_f64(rep.final_elbo)
    );
    Ok(())
}

fn panel_tsv(panel: &ScorePanel) -> String {
    let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_owned(), fmt_f64);
    let rows = [
        ("threshold", fmt_f64(panel.threshold)),
        ("tp", panel.tp.to_string()),
        ("fp", panel.fp.to_string()),
        ("tn", panel.tn.to_string()),
        ("fn", panel.fn_.to_string()),
        ("fpr", opt(panel.fpr)),
        ("precision", opt(panel.precision)),
        ("recall", opt(panel.recall)),
        ("auroc", opt(panel.auroc)),
        ("auprc", opt(panel.auprc)),
    ];
    let mut out = String::from("metric\tvalue\n");
    for (k, v) in rows {
        out.push_str(&format!("{k}\t{v}\n"));
    }
    out
}

fn curve_tsv(header: &str, points: &[(f64, f64)]) -> String {
    let mut out = format!("{header}\n");
    for (a, b) in points {
        out.push_str(&format!("{}\t{}\n", fmt_f64(*a), fmt_f64(*b)));
    }
    out
}

fn evaluate(common: &Common, fit_dir: &Path, truth: &Path, threshold: f64) -> Result<()> {
    let (snp_rows, ppi) = load_row_labeled_matrix(&fit_dir.join("ppi.tsv")).context("loading ppi.tsv")?;
    let (truth_rows, gamma) = load_row_labeled_matrix(truth).context("loading ground truth")?;
    if snp_rows != truth_rows || ppi.ids != gamma.ids {
        bail!("fit and ground truth disagree in SNP or trait ids");
    }
    let truth_bool = gamma.data.map(|v| v != 0.0);
    let panel = confusion_metrics(&ppi.data, &truth_bool, threshold)?;
    create_out(&common.out)?;
    write_text(&common.out.join("metrics.tsv"), &panel_tsv(&panel))?;
    let scores: Vec<f64> = ppi.data.iter().copied().collect();
    let labels: Vec<bool> = truth_bool.iter().copied().collect();
    if let Ok(curves) = roc_pr_curves(&scores, &labels) {
        write_text(&common.out.join("roc.tsv"), &curve_tsv("fpr\ttpr", &curves.roc))?;
        write_text(&common.out.join("pr.tsv"), &curve_tsv("recall\tprecision", &curves.pr))?;
    }
    print!("{}", panel_tsv(&panel));
    Ok(())
}

const ORACLE_KEYS: &[&str] = &["trait", "tau", "sigma2", "prior_inclusion"];

fn oracle(common: &Common, data: Option<&Path>) -> Result<()> {
    let (kv, base) = read_config(common)?;
    reject_unknown(&kv, &[INPUT_KEYS, ORACLE_KEYS])?;
    let inputs = match data {
        Some(dir) => InputPaths::in_directory(dir),
        None => InputPaths::from_key_values(&kv, &base).context("input paths")?,
    };
    let ds = inputs.load().context("loading inputs")?;
    let trait_id = kv.get_str("trait").map(str::to_owned).unwrap_or_else(|| ds.trait_ids()[0].clone());
    let t = ds
        .trait_ids()
        .iter()
        .position(|id| *id == trait_id)
        .ok_or_else(|| anyhow!("unknown trait '{trait_id}'"))?;
    let fixed = OracleFixed {
        tau: kv.get("tau")?.unwrap_or(1.0),
        sigma2: kv.get("sigma2")?.unwrap_or(1.0),
        prior_inclusion: vec![kv.get("prior_inclusion")?.unwrap_or(0.5); ds.p()],
    };
    let y: Vec<f64> = ds.y().column(t).iter().copied().collect();
    let res = exact_posterior_oracle(ds.x(), &y, &fixed).context("enumerating models")?;
    let mut out = String::from("snp\tppi\tslab_mean\tslab_var\n");
    for (s, id) in ds.snp_ids().iter().enumerate() {
        out.push_str(&format!(
            "{id}\t{}\t{}\t{}\n",
            fmt_f64(res.ppi[s]),
            fmt_f64(res.slab_mean[s]),
            fmt_f64(res.slab_var[s])
        ));
    }
    create_out(&common.out)?;
    write_text(&common.out.join("oracle.tsv"), &out)?;
    write_text(
        &common.out.join("evidence.txt"),
        &format!("trait={trait_id}\nlog_evidence={}\n", fmt_f64(res.log_evidence)),
    )?;
    println!("log evidence for {trait_id}: {}", fmt_f64(res.log_evidence));
    Ok(())
}

fn pipeline(common: &Common) -> Result<()> {
    let path = common
        .config
        .as_deref()
        .ok_or_else(|| anyhow!("the pipeline needs --config"))?;
    let mut cfg = PipelineConfig::read(path).context("pipeline config")?;
    cfg.out = common.out.clone();
    if let Some(seed) = common.seed {
        cfg.fit.seed = seed;
    }
    let out = run_pipeline(&cfg)?;
    println!(
        "{} blocks fitted, {} skipped, {} loci written to {}",
        out.fits.len(),
        out.skipped_blocks.len(),
        out.loci.len(),
        cfg.out.join("loci.tsv").display()
    );
    Ok(())
}

const REPORT_KEYS: &[&str] = &["snps", "traits", "threshold", "window_bp", "chained_merge", "cis_window_bp"];

fn report(common: &Common, fit_dir: &Path) -> Result<()> {
    let (kv, base) = read_config(common)?;
    reject_unknown(&kv, &[REPORT_KEYS])?;
    let (ppi_rows, ppi) = load_row_labeled_matrix(&fit_dir.join("ppi.tsv")).context("loading ppi.tsv")?;
    let (beta_rows, beta) = load_row_labeled_matrix(&fit_dir.join("beta.tsv")).context("loading beta.tsv")?;
    if ppi_rows != beta_rows || ppi.ids != beta.ids {
        bail!("ppi.tsv and beta.tsv disagree in ids");
    }
    let snps_path = kv
        .get_str("snps")
        .map(|v| base.join(v))
        .ok_or_else(|| anyhow!("report needs the 'snps' key"))?;
    let snps = load_snp_meta(&snps_path)?;
    if snps.iter().map(|s| &s.id).ne(ppi_rows.iter()) {
        bail!("SNP table does not match the fitted SNPs");
    }
    let traits = match kv.get_str("traits") {
        Some(v) => load_trait_meta(&base.join(v))?,
        None => traits_from_ids(&ppi.ids),
    };
    let d = LocusParams::default();
    let params = LocusParams {
        threshold: kv.get("threshold")?.unwrap_or(d.threshold),
        window_bp: kv.get("window_bp")?.unwrap_or(d.window_bp),
        merge: if kv.get("chained_merge")?.unwrap_or(false) {
            MergeRule::Chained
        } else {
            MergeRule::LeadAnchored
        },
    };
    let mut loci = summarize_loci(&ppi.data, &beta.data, &snps, &ppi.ids, params)?;
    label_loci(&mut loci, &traits, kv.get("cis_window_bp")?.unwrap_or(1_000_000));
    create_out(&common.out)?;
    write_text(&common.out.join("loci.tsv"), &loci_tsv(&loci))?;
    println!("{} loci", loci.len());
    Ok(())
}

const BENCHMARK_KEYS: &[&str] = &["replicates", "schemes", "threshold"];

fn benchmark(common: &Common) -> Result<()> {
    let (kv, _) = read_config(common)?;
    reject_unknown(&kv, &[BENCHMARK_KEYS, SimulationSpec::keys(), Hyperparameters::keys(), FitConfig::keys()])?;
    let mut sim_kv = KeyValues::default();
    for key in SimulationSpec::keys() {
        if let Some(v) = kv.get_str(key) {
            sim_kv.set(key, v);
        }
    }
    let mut spec = SimulationSpec::from_key_values(&sim_kv).context("simulation config")?;
    if let Some(seed) = common.seed {
        spec.seed = seed;
    }
    let hyper = Hyperparameters::from_key_values(&kv)?;
    let base_config = FitConfig::from_key_values(&kv)?;
    let replicates: usize = kv.get("replicates")?.unwrap_or(5);
    let threshold: f64 = kv.get("threshold")?.unwrap_or(0.5);
    let schemes: Vec<Scheme> = match kv.get_str("schemes") {
        Some(list) => list
            .split(',')
            .map(|s| s.trim().parse::<Scheme>().map_err(|e| anyhow!(e)))
            .collect::<Result<_>>()?,
        None => Scheme::ALL.to_vec(),
    };
    let data: Vec<_> = (0..replicates as u64)
        .map(|r| {
            let s = SimulationSpec {
                seed: spec.seed.wrapping_add(r),
                ..spec.clone()
            };
            let sim = simulate_dataset(&s)?;
            Ok((sim.dataset()?, sim.truth.gamma_true))
        })
        .collect::<afcavi::Result<_>>()
        .context("simulating replicates")?;
    let configs: Vec<FitConfig> = schemes
        .iter()
        .map(|&scheme| FitConfig {
            scheme,
            ..base_config.clone()
        })
        .collect();
    let bench = benchmark_fit(&data, &hyper, &configs, threshold).context("fitting replicates")?;
    create_out(&common.out)?;
    bench.write(&common.out.join("comparison.tsv"))?;
    print!("{}", bench.comparison_tsv());
    Ok(())
}
