//! Synthetic genotypes, sparse hotspot association patterns, block
//! equicorrelated noise and heritability-calibrated effect sizes.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Binomial, Distribution, StandardNormal, Uniform};

use crate::data::{self, Dataset, LabeledMatrix, SnpMeta, TraitMeta};
use crate::error::{Error, Result};
use crate::io::{self, KeyValues};

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationSpec {
    pub n: usize,
    pub p: usize,
    pub q: usize,
    /// Fraction of predictors with at least one association.
    pub a_p: f64,
    /// Fraction of responses with at least one association.
    pub a_q: f64,
    /// Average heritability of an active response.
    pub h2m: f64,
    pub noise_block_size: usize,
    pub noise_rho_max: f64,
    pub propensity_beta: (f64, f64),
    pub persnp_beta: (f64, f64),
    pub maf_range: (f64, f64),
    /// Draw effect signs uniformly instead of making every effect positive.
    pub rademacher_signs: bool,
    pub snp_spacing_bp: u64,
    pub seed: u64,
}

impl Default for SimulationSpec {
    fn default() -> Self {
        Self {
            n: 500,
            p: 100,
            q: 50,
            a_p: 0.02,
            a_q: 0.2,
            h2m: 0.15,
            noise_block_size: 10,
            noise_rho_max: 0.5,
            propensity_beta: (1.0, 5.0),
            persnp_beta: (2.0, 5.0),
            maf_range: (0.05, 0.5),
            rademacher_signs: false,
            snp_spacing_bp: 10_000,
            seed: 0,
        }
    }
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

impl SimulationSpec {
    /// Shape parameters of the per-trait heritability draw, whose mean is `h2m`.
    pub fn h2t_beta(&self) -> (f64, f64) {
        (1.0, (1.0 - self.h2m) / self.h2m)
    }

    pub fn n_active_snps(&self) -> usize {
        let k = round_half_up(self.a_p * self.p as f64);
        if self.a_p > 0.0 { k.max(1) } else { k }.min(self.p)
    }

    pub fn n_active_traits(&self) -> usize {
        let k = round_half_up(self.a_q * self.q as f64);
        if self.a_q > 0.0 { k.max(1) } else { k }.min(self.q)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 || self.p == 0 || self.q == 0 {
            return Err(Error::InfeasibleSpec(format!(
                "need n >= 2, p >= 1, q >= 1 (got {}, {}, {})",
                self.n, self.p, self.q
            )));
        }
        for (name, v) in [("a_p", self.a_p), ("a_q", self.a_q)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InfeasibleSpec(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if !(self.h2m > 0.0 && self.h2m < 1.0) {
            return Err(Error::InfeasibleSpec(format!("h2m must lie in (0, 1), got {}", self.h2m)));
        }
        if (self.n_active_snps() == 0) != (self.n_active_traits() == 0) {
            return Err(Error::InfeasibleSpec(
                "active SNPs and active traits must be both present or both absent".into(),
            ));
        }
        if self.noise_block_size == 0 {
            return Err(Error::InfeasibleSpec("noise_block_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.noise_rho_max) {
            return Err(Error::InfeasibleSpec(format!(
                "noise_rho_max must lie in [0, 1), got {}",
                self.noise_rho_max
            )));
        }
        let (lo, hi) = self.maf_range;
        if !(lo > 0.0 && lo <= hi && hi <= 0.5) {
            return Err(Error::InfeasibleSpec(format!("maf_range ({lo}, {hi}) must lie in (0, 0.5]")));
        }
        for (name, (a, b)) in [("propensity_beta", self.propensity_beta), ("persnp_beta", self.persnp_beta)] {
            if !(a > 0.0 && b > 0.0) {
                return Err(Error::InfeasibleSpec(format!("{name} shapes must be positive")));
            }
        }
        if self.snp_spacing_bp == 0 {
            return Err(Error::InfeasibleSpec("snp_spacing_bp must be >= 1".into()));
        }
        Ok(())
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.set("n", self.n);
        kv.set("p", self.p);
        kv.set("q", self.q);
        kv.set("a_p", self.a_p);
        kv.set("a_q", self.a_q);
        kv.set("h2m", self.h2m);
        kv.set("noise_block_size", self.noise_block_size);
        kv.set("noise_rho_max", self.noise_rho_max);
        kv.set("propensity_beta", format!("{},{}", self.propensity_beta.0, self.propensity_beta.1));
        kv.set("persnp_beta", format!("{},{}", self.persnp_beta.0, self.persnp_beta.1));
        kv.set("maf_range", format!("{},{}", self.maf_range.0, self.maf_range.1));
        kv.set("rademacher_signs", self.rademacher_signs);
        kv.set("snp_spacing_bp", self.snp_spacing_bp);
        kv.set("seed", self.seed);
        kv
    }

    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        let d = Self::default();
        let pair = |key: &str, default: (f64, f64)| -> Result<(f64, f64)> {
            match kv.get_str(key) {
                None => Ok(default),
                Some(v) => {
                    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
                    match parts.as_slice() {
                        [a, b] => Ok((
                            a.parse().map_err(|_| Error::Config(format!("bad value for {key}: '{v}'")))?,
                            b.parse().map_err(|_| Error::Config(format!("bad value for {key}: '{v}'")))?,
                        )),
                        _ => Err(Error::Config(format!("{key} expects two comma-separated numbers"))),
                    }
                }
            }
        };
        let spec = Self {
            n: kv.get("n")?.unwrap_or(d.n),
            p: kv.get("p")?.unwrap_or(d.p),
            q: kv.get("q")?.unwrap_or(d.q),
            a_p: kv.get("a_p")?.unwrap_or(d.a_p),
            a_q: kv.get("a_q")?.unwrap_or(d.a_q),
            h2m: kv.get("h2m")?.unwrap_or(d.h2m),
            noise_block_size: kv.get("noise_block_size")?.unwrap_or(d.noise_block_size),
            noise_rho_max: kv.get("noise_rho_max")?.unwrap_or(d.noise_rho_max),
            propensity_beta: pair("propensity_beta", d.propensity_beta)?,
            persnp_beta: pair("persnp_beta", d.persnp_beta)?,
            maf_range: pair("maf_range", d.maf_range)?,
            rademacher_signs: kv.get("rademacher_signs")?.unwrap_or(d.rademacher_signs),
            snp_spacing_bp: kv.get("snp_spacing_bp")?.unwrap_or(d.snp_spacing_bp),
            seed: kv.get("seed")?.unwrap_or(d.seed),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn keys() -> &'static [&'static str] {
        &[
            "n",
            "p",
            "q",
            "a_p",
            "a_q",
            "h2m",
            "noise_block_size",
            "noise_rho_max",
            "propensity_beta",
            "persnp_beta",
            "maf_range",
            "rademacher_signs",
            "snp_spacing_bp",
            "seed",
        ]
    }
}

#[derive(Debug, Clone)]
pub struct SimTruth {
    pub gamma_true: DMatrix<bool>,
    pub beta_true: DMatrix<f64>,
    pub h2_t: Vec<f64>,
    pub h2_st: DMatrix<f64>,
    pub eta_b: Vec<f64>,
    /// Hotspot propensity of each active predictor (0 for inactive ones).
    pub propensity: Vec<f64>,
}

fn beta_dist(shape: (f64, f64)) -> Result<Beta<f64>> {
    Beta::new(shape.0, shape.1).map_err(|e| Error::InfeasibleSpec(format!("Beta{shape:?}: {e}")))
}

/// Active predictors and responses, per-predictor propensities, and the
/// link matrix after the repair pass.
pub fn assign_association_pattern(spec: &SimulationSpec, rng: &mut impl Rng) -> Result<(DMatrix<bool>, Vec<f64>)> {
    spec.validate()?;
    let (p, q) = (spec.p, spec.q);
    let mut gamma = DMatrix::from_element(p, q, false);
    let mut propensity = vec![0.0; p];
    let kp = spec.n_active_snps();
    let kq = spec.n_active_traits();
    if kp == 0 {
        return Ok((gamma, propensity));
    }
    let mut snps = index::sample(rng, p, kp).into_vec();
    snps.sort_unstable();
    let mut traits = index::sample(rng, q, kq).into_vec();
    traits.sort_unstable();

    let beta = beta_dist(spec.propensity_beta)?;
    for &s in &snps {
        let w = beta.sample(rng);
        propensity[s] = w;
        for &t in &traits {
            gamma[(s, t)] = rng.random::<f64>() < w;
        }
    }
    for &s in &snps {
        if !traits.iter().any(|&t| gamma[(s, t)]) {
            let t = traits[rng.random_range(0..traits.len())];
            gamma[(s, t)] = true;
        }
    }
    for &t in &traits {
        if !snps.iter().any(|&s| gamma[(s, t)]) {
            let s = snps[rng.random_range(0..snps.len())];
            gamma[(s, t)] = true;
        }
    }
    Ok((gamma, propensity))
}

/// Equicorrelation matrix `(1 − η) I + η 11ᵀ` of size `k`.
fn equicorrelation(k: usize, eta: f64) -> DMatrix<f64> {
    DMatrix::from_fn(k, k, |i, j| if i == j { 1.0 } else { eta })
}

/// Unit-variance noise, equicorrelated within consecutive blocks of traits
/// and independent across blocks. Rows are `L z` with `L` the lower Cholesky
/// factor of the block correlation matrix.
pub fn simulate_correlated_noise(spec: &SimulationSpec, rng: &mut impl Rng) -> Result<(DMatrix<f64>, Vec<f64>)> {
    spec.validate()?;
    let (n, q, b) = (spec.n, spec.q, spec.noise_block_size);
    let eta_dist = Uniform::new_inclusive(0.0, spec.noise_rho_max).expect("valid range");
    let mut e = DMatrix::zeros(n, q);
    let mut etas = Vec::new();
    let mut start = 0;
    while start < q {
        let k = b.min(q - start);
        let eta = eta_dist.sample(rng);
        let chol = equicorrelation(k, eta)
            .cholesky()
            .expect("equicorrelation with eta in [0, 1) is positive definite");
        let l = chol.l();
        let z = DMatrix::from_fn(n, k, |_, _| rng.sample::<f64, _>(StandardNormal));
        let block = z * l.transpose();
        e.columns_mut(start, k).copy_from(&block);
        etas.push(eta);
        start += k;
    }
    Ok((e, etas))
}

/// `(β, h²_t, h²_st)` for a link pattern, using minor allele frequencies
/// `maf` and per-trait noise variances `noise_var`.
pub fn simulate_effect_sizes(
    gamma: &DMatrix<bool>,
    spec: &SimulationSpec,
    maf: &[f64],
    noise_var: &[f64],
    rng: &mut impl Rng,
) -> Result<(DMatrix<f64>, Vec<f64>, DMatrix<f64>)> {
    let (p, q) = gamma.shape();
    if maf.len() != p || noise_var.len() != q {
        return Err(Error::Dimension("effect-size inputs disagree with the link matrix".into()));
    }
    if let Some(f) = maf.iter().find(|f| !(**f > 0.0 && **f <= 0.5)) {
        return Err(Error::Validation(format!("allele frequency {f} outside (0, 0.5]")));
    }
    let h2t_dist = beta_dist(spec.h2t_beta())?;
    let persnp = beta_dist(spec.persnp_beta)?;
    let mut beta = DMatrix::zeros(p, q);
    let mut h2_st = DMatrix::zeros(p, q);
    let mut h2_t = vec![0.0; q];
    for t in 0..q {
        let linked: Vec<usize> = (0..p).filter(|&s| gamma[(s, t)]).collect();
        if linked.is_empty() {
            continue;
        }
        const ATTEMPTS: usize = 100;
        let mut h2 = None;
        for _ in 0..ATTEMPTS {
            let d = h2t_dist.sample(rng);
            if d < 1.0 - 1e-9 {
                h2 = Some(d);
                break;
            }
        }
        let h2 = h2.ok_or(Error::DegenerateHeritability(ATTEMPTS))?;
        let raw: Vec<f64> = linked.iter().map(|_| persnp.sample(rng)).collect();
        let total: f64 = raw.iter().sum();
        h2_t[t] = h2;
        for (&s, r) in linked.iter().zip(raw) {
            let share = h2 * r / total;
            h2_st[(s, t)] = share;
            let sign = if spec.rademacher_signs && rng.random::<bool>() { -1.0 } else { 1.0 };
            beta[(s, t)] = sign * effect_size(share, h2, noise_var[t], maf[s]);
        }
    }
    Ok((beta, h2_t, h2_st))
}

/// Per-allele effect giving a predictor with allele frequency `f` the
/// heritability share `h2_st` of a trait with total heritability `h2_t`.
pub fn effect_size(h2_st: f64, h2_t: f64, noise_var: f64, f: f64) -> f64 {
    (h2_st / (1.0 - h2_t) * noise_var / (2.0 * f * (1.0 - f))).sqrt()
}

pub fn simulate_responses(x_raw: &DMatrix<f64>, beta: &DMatrix<f64>, noise: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if x_raw.ncols() != beta.nrows() || x_raw.nrows() != noise.nrows() || beta.ncols() != noise.ncols() {
        return Err(Error::Dimension("genotype, effect and noise shapes disagree".into()));
    }
    Ok(x_raw * beta + noise)
}

/// Independent Hardy-Weinberg genotypes with allele frequencies drawn
/// uniformly from `maf_range`; monomorphic columns are re-drawn.
pub fn simulate_genotypes(n: usize, p: usize, maf_range: (f64, f64), rng: &mut impl Rng) -> (DMatrix<f64>, Vec<f64>) {
    let freq = Uniform::new_inclusive(maf_range.0, maf_range.1).expect("valid range");
    let mut x = DMatrix::zeros(n, p);
    let mut mafs = Vec::with_capacity(p);
    for s in 0..p {
        let mut f = freq.sample(rng);
        let mut attempts = 0;
        loop {
            let bin = Binomial::new(2, f).expect("frequency in (0, 0.5]");
            let mut col = x.column_mut(s);
            for v in col.iter_mut() {
                *v = bin.sample(rng) as f64;
            }
            let first = col[0];
            if col.iter().any(|&v| v != first) {
                break;
            }
            attempts += 1;
            if attempts % 10 == 0 {
                f = freq.sample(rng);
            }
        }
        mafs.push(f);
    }
    (x, mafs)
}

/// Minor allele frequencies estimated from 0/1/2 genotype columns.
pub fn empirical_maf(x_raw: &DMatrix<f64>) -> Vec<f64> {
    x_raw
        .column_iter()
        .map(|c| {
            let f = c.mean() / 2.0;
            f.min(1.0 - f)
        })
        .collect()
}

fn sample_variance(col: nalgebra::DVectorView<'_, f64>) -> f64 {
    let n = col.len() as f64;
    let m = col.mean();
    col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0)
}

#[derive(Debug, Clone)]
pub struct SimulatedData {
    pub x_raw: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub snps: Vec<SnpMeta>,
    pub traits: Vec<TraitMeta>,
    pub truth: SimTruth,
}

impl SimulatedData {
    pub fn dataset(&self) -> Result<Dataset> {
        Dataset::standardize(&self.x_raw, &self.y, self.snps.clone(), self.traits.clone())
    }

    /// Writes inputs and ground truth as TSV files plus `scenario.txt`.
    pub fn write(&self, dir: &Path, spec: &SimulationSpec) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let snp_ids: Vec<String> = self.snps.iter().map(|s| s.id.clone()).collect();
        let trait_ids: Vec<String> = self.traits.iter().map(|t| t.id.clone()).collect();
        data::write_matrix(
            &dir.join("genotypes.tsv"),
            &LabeledMatrix {
                ids: snp_ids.clone(),
                data: self.x_raw.clone(),
            },
        )?;
        data::write_matrix(
            &dir.join("responses.tsv"),
            &LabeledMatrix {
                ids: trait_ids.clone(),
                data: self.y.clone(),
            },
        )?;
        data::write_snp_meta(&dir.join("snps.tsv"), &self.snps)?;
        data::write_trait_meta(&dir.join("traits.tsv"), &self.traits)?;
        let labels = Some(("snp", snp_ids.as_slice()));
        let gamma = self.truth.gamma_true.map(|b| b as u8 as f64);
        io::write_matrix(&dir.join("gamma_true.tsv"), &trait_ids, &gamma, labels)?;
        io::write_matrix(&dir.join("beta_true.tsv"), &trait_ids, &self.truth.beta_true, labels)?;
        let h2 = DMatrix::from_column_slice(self.truth.h2_t.len(), 1, &self.truth.h2_t);
        io::write_matrix(&dir.join("h2.tsv"), &["h2".to_owned()], &h2, Some(("trait", trait_ids.as_slice())))?;
        io::write_text(&dir.join("scenario.txt"), &spec.to_key_values().to_text())
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Synthetic genotypes followed by [`simulate_from_genotypes`].
pub fn simulate_dataset(spec: &SimulationSpec) -> Result<SimulatedData> {
    spec.validate()?;
    let mut rng = stream_rng(spec.seed, 0);
    let (x_raw, _) = simulate_genotypes(spec.n, spec.p, spec.maf_range, &mut rng);
    let snps = (0..spec.p)
        .map(|s| SnpMeta {
            id: format!("snp{}", s + 1),
            bp: spec.snp_spacing_bp * (s as u64 + 1),
            maf: 0.0,
        })
        .collect();
    simulate_from_genotypes(x_raw, snps, spec)
}

/// Responses for given 0/1/2 genotypes. Effect sizes use the empirical
/// allele frequencies and noise variances so that realised heritabilities
/// track the drawn `h²_t`. SNP metadata MAFs are replaced by the empirical
/// values; traits receive gene positions uniform over the SNP span.
pub fn simulate_from_genotypes(x_raw: DMatrix<f64>, mut snps: Vec<SnpMeta>, spec: &SimulationSpec) -> Result<SimulatedData> {
    let mut spec = spec.clone();
    spec.n = x_raw.nrows();
    spec.p = x_raw.ncols();
    spec.validate()?;
    if snps.len() != spec.p {
        return Err(Error::Dimension("SNP metadata does not match genotype columns".into()));
    }
    let maf = empirical_maf(&x_raw);
    if let Some(s) = maf.iter().position(|&f| f <= 0.0) {
        return Err(Error::ConstantPredictor(snps[s].id.clone()));
    }
    for (meta, &f) in snps.iter_mut().zip(&maf) {
        meta.maf = f;
    }
    let mut rng = stream_rng(spec.seed, 1);
    let (gamma_true, propensity) = assign_association_pattern(&spec, &mut rng)?;
    let mut rng = stream_rng(spec.seed, 2);
    let (noise, eta_b) = simulate_correlated_noise(&spec, &mut rng)?;
    let noise_var: Vec<f64> = noise.column_iter().map(sample_variance).collect();
    let mut rng = stream_rng(spec.seed, 3);
    let (beta_true, h2_t, h2_st) = simulate_effect_sizes(&gamma_true, &spec, &maf, &noise_var, &mut rng)?;
    let y = simulate_responses(&x_raw, &beta_true, &noise)?;

    let mut rng = stream_rng(spec.seed, 4);
    let lo = snps.first().map_or(1, |s| s.bp);
    let hi = snps.last().map_or(1, |s| s.bp);
    let traits = (0..spec.q)
        .map(|t| TraitMeta {
            id: format!("trait{}", t + 1),
            gene_bp: Some(rng.random_range(lo..=hi)),
        })
        .collect();
    Ok(SimulatedData {
        x_raw,
        y,
        snps,
        traits,
        truth: SimTruth {
            gamma_true,
            beta_true,
            h2_t,
            h2_st,
            eta_b,
            propensity,
        },
    })
}

/// Fraction of `Var(y_t)` explained by `X β_t` in the simulated sample.
pub fn realized_heritability(x_raw: &DMatrix<f64>, beta: &DMatrix<f64>, y: &DMatrix<f64>, t: usize) -> f64 {
    let signal: DVector<f64> = x_raw * beta.column(t);
    sample_variance(signal.column(0)) / sample_variance(y.column(t))
}
