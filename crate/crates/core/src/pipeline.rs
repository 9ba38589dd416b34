//! Block-wise fitting of a chromosome and locus-wise summarisation of the
//! resulting signals.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::data::{self, Block, BlockTable, Dataset, InputPaths, SnpMeta, TraitMeta, INPUT_KEYS};
use crate::engine::{run_cavi, FitConfig, FitReport};
use crate::error::{Error, Result};
use crate::io::{self, KeyValues};
use crate::model::Hyperparameters;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CisTrans {
    Cis,
    Trans,
    Unknown,
}

impl CisTrans {
    pub fn as_str(self) -> &'static str {
        match self {
            CisTrans::Cis => "cis",
            CisTrans::Trans => "trans",
            CisTrans::Unknown => "unknown",
        }
    }
}

/// `cis` when the gene lies within `window` bp of the span `[start, end]`.
pub fn label_cis_trans(start_bp: u64, end_bp: u64, gene_bp: Option<u64>, window: u64) -> CisTrans {
    let Some(g) = gene_bp else {
        return CisTrans::Unknown;
    };
    let distance = if g < start_bp {
        start_bp - g
    } else if g > end_bp {
        g - end_bp
    } else {
        0
    };
    if distance <= window {
        CisTrans::Cis
    } else {
        CisTrans::Trans
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Association {
    pub trait_index: usize,
    pub trait_id: String,
    pub max_ppi: f64,
    pub beta_at_max: f64,
    pub snp_at_max: String,
    pub label: CisTrans,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Locus {
    pub locus_id: usize,
    pub start_bp: u64,
    pub end_bp: u64,
    pub lead_snp: String,
    /// Indices into the SNP list passed to [`summarize_loci`].
    pub members: Vec<usize>,
    pub associations: Vec<Association>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MergeRule {
    /// Members lie within the window of the lead SNP.
    LeadAnchored,
    /// Members are connected by a chain of window-sized steps.
    Chained,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocusParams {
    pub threshold: f64,
    pub window_bp: u64,
    pub merge: MergeRule,
}

impl Default for LocusParams {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            window_bp: 500_000,
            merge: MergeRule::LeadAnchored,
        }
    }
}

/// Greedy merge of signal SNPs (those with some PPI above the threshold)
/// into loci, anchored on the SNP with the most associated traits
/// (ties: smaller bp, then lower index). Loci are returned in order of
/// start position and numbered from 1. Association labels are `Unknown`
/// until [`label_loci`] is applied.
pub fn summarize_loci(
    ppi: &DMatrix<f64>,
    beta: &DMatrix<f64>,
    snps: &[SnpMeta],
    trait_ids: &[String],
    params: LocusParams,
) -> Result<Vec<Locus>> {
    let (p, q) = ppi.shape();
    if beta.shape() != (p, q) || snps.len() != p || trait_ids.len() != q {
        return Err(Error::Dimension("locus summary inputs disagree in shape".into()));
    }
    let counts: Vec<usize> = (0..p)
        .map(|s| ppi.row(s).iter().filter(|&&v| v > params.threshold).count())
        .collect();
    let mut unassigned: Vec<usize> = (0..p).filter(|&s| counts[s] > 0).collect();
    let mut loci = Vec::new();
    while !unassigned.is_empty() {
        let &lead = unassigned
            .iter()
            .min_by(|&&a, &&b| counts[b].cmp(&counts[a]).then(snps[a].bp.cmp(&snps[b].bp)).then(a.cmp(&b)))
            .expect("non-empty");
        let near = |a: usize, b: usize| snps[a].bp.abs_diff(snps[b].bp) <= params.window_bp;
        let mut members = vec![lead];
        match params.merge {
            MergeRule::LeadAnchored => {
                members.extend(unassigned.iter().copied().filter(|&s| s != lead && near(s, lead)));
            }
            MergeRule::Chained => {
                let mut frontier = vec![lead];
                while let Some(cur) = frontier.pop() {
                    for &s in &unassigned {
                        if !members.contains(&s) && near(s, cur) {
                            members.push(s);
                            frontier.push(s);
                        }
                    }
                }
            }
        }
        members.sort_unstable();
        unassigned.retain(|s| !members.contains(s));
        let start_bp = members.iter().map(|&s| snps[s].bp).min().unwrap();
        let end_bp = members.iter().map(|&s| snps[s].bp).max().unwrap();
        let mut associations = Vec::new();
        for t in 0..q {
            let mut best = members[0];
            for &s in &members[1..] {
                if ppi[(s, t)] > ppi[(best, t)] {
                    best = s;
                }
            }
            if ppi[(best, t)] > params.threshold {
                associations.push(Association {
                    trait_index: t,
                    trait_id: trait_ids[t].clone(),
                    max_ppi: ppi[(best, t)],
                    beta_at_max: beta[(best, t)],
                    snp_at_max: snps[best].id.clone(),
                    label: CisTrans::Unknown,
                });
            }
        }
        loci.push(Locus {
            locus_id: 0,
            start_bp,
            end_bp,
            lead_snp: snps[lead].id.clone(),
            members,
            associations,
        });
    }
    loci.sort_by_key(|l| (l.start_bp, l.end_bp));
    for (i, l) in loci.iter_mut().enumerate() {
        l.locus_id = i + 1;
    }
    Ok(loci)
}

/// Sets the cis/trans label of every association from the trait's gene position.
pub fn label_loci(loci: &mut [Locus], traits: &[TraitMeta], window: u64) {
    for l in loci {
        for a in &mut l.associations {
            a.label = label_cis_trans(l.start_bp, l.end_bp, traits[a.trait_index].gene_bp, window);
        }
    }
}

pub fn loci_tsv(loci: &[Locus]) -> String {
    let mut out = String::from("locus_id\tstart_bp\tend_bp\tlead_snp\ttrait_id\tmax_ppi\tbeta_at_max\tcis_trans\n");
    for l in loci {
        for a in &l.associations {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                l.locus_id,
                l.start_bp,
                l.end_bp,
                l.lead_snp,
                a.trait_id,
                io::fmt_f64(a.max_ppi),
                io::fmt_f64(a.beta_at_max),
                a.label.as_str()
            );
        }
    }
    out
}

/// `(lead SNP, trait)` pairs of a locus list, sorted.
pub fn locus_trait_pairs(loci: &[Locus]) -> Vec<(String, String)> {
    let mut v: Vec<(String, String)> = loci
        .iter()
        .flat_map(|l| l.associations.iter().map(move |a| (l.lead_snp.clone(), a.trait_id.clone())))
        .collect();
    v.sort();
    v
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub inputs: InputPaths,
    pub blocks: PathBuf,
    pub out: PathBuf,
    pub hyper: Hyperparameters,
    pub fit: FitConfig,
    pub parallelism: usize,
    pub locus: LocusParams,
    pub cis_window_bp: u64,
    /// Hash of the configuration text the run was built from.
    pub config_hash: String,
}

const PIPELINE_KEYS: &[&str] = &[
    "blocks",
    "out",
    "parallelism",
    "threshold",
    "window_bp",
    "chained_merge",
    "cis_window_bp",
];

pub fn sha256_hex(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

impl PipelineConfig {
    /// Builds a config from `key=value` pairs. Relative paths are resolved
    /// against `base`. Hyperparameter and fit keys may appear in the same file.
    pub fn from_key_values(kv: &KeyValues, base: &Path) -> Result<Self> {
        let allowed: Vec<&str> = PIPELINE_KEYS
            .iter()
            .chain(INPUT_KEYS)
            .chain(Hyperparameters::keys())
            .chain(FitConfig::keys())
            .copied()
            .collect();
        kv.reject_unknown(&allowed)?;
        let path = |key: &str| -> Result<PathBuf> {
            let v = kv
                .get_str(key)
                .ok_or_else(|| Error::Config(format!("missing required key '{key}'")))?;
            Ok(base.join(v))
        };
        let parallelism: usize = kv.get("parallelism")?.unwrap_or(1);
        if parallelism == 0 {
            return Err(Error::Config("parallelism must be >= 1".into()));
        }
        let d = LocusParams::default();
        Ok(Self {
            inputs: InputPaths::from_key_values(kv, base)?,
            blocks: path("blocks")?,
            out: kv.get_str("out").map_or_else(|| base.join("pipeline_out"), |v| base.join(v)),
            hyper: Hyperparameters::from_key_values(kv)?,
            fit: FitConfig::from_key_values(kv)?,
            parallelism,
            locus: LocusParams {
                threshold: kv.get("threshold")?.unwrap_or(d.threshold),
                window_bp: kv.get("window_bp")?.unwrap_or(d.window_bp),
                merge: if kv.get("chained_merge")?.unwrap_or(false) {
                    MergeRule::Chained
                } else {
                    MergeRule::LeadAnchored
                },
            },
            cis_window_bp: kv.get("cis_window_bp")?.unwrap_or(1_000_000),
            config_hash: sha256_hex(&kv.to_text()),
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let kv = KeyValues::read(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_key_values(&kv, base)
    }
}

#[derive(Debug, Clone)]
pub struct BlockFit {
    pub block: Block,
    pub snps: Vec<SnpMeta>,
    pub report: FitReport,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub fits: Vec<BlockFit>,
    pub skipped_blocks: Vec<i64>,
    pub loci: Vec<Locus>,
}

/// Seed of a block's fit, a fixed function of the run seed and block id.
pub fn block_seed(seed: u64, block_id: i64) -> u64 {
    let mut z = seed ^ (block_id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Fits every non-empty block with at most `parallelism` concurrent workers,
/// then summarises loci over the concatenated block results. Blocks without
/// SNPs are skipped and listed in the output.
pub fn fit_blocks(
    ds: &Dataset,
    blocks: &BlockTable,
    hyper: &Hyperparameters,
    fit: &FitConfig,
    parallelism: usize,
    locus: LocusParams,
    cis_window_bp: u64,
) -> Result<PipelineOutput> {
    let mut jobs = Vec::new();
    let mut skipped_blocks = Vec::new();
    for b in blocks.blocks() {
        match ds.slice_block(b) {
            Ok(sub) => jobs.push((*b, sub)),
            Err(Error::EmptyBlock(id)) => skipped_blocks.push(id),
            Err(e) => return Err(e),
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))?;
    let results: Vec<Result<BlockFit>> = pool.install(|| {
        jobs.par_iter()
            .map(|(block, sub)| {
                let cfg = FitConfig {
                    seed: block_seed(fit.seed, block.block_id),
                    ..fit.clone()
                };
                let report = run_cavi(sub, hyper, &cfg).map_err(|e| Error::BlockFailed {
                    block_id: block.block_id,
                    source: Box::new(e),
                })?;
                Ok(BlockFit {
                    block: *block,
                    snps: sub.snps().to_vec(),
                    report,
                })
            })
            .collect()
    });
    let fits = results.into_iter().collect::<Result<Vec<_>>>()?;

    let q = ds.q();
    let total_p: usize = fits.iter().map(|f| f.snps.len()).sum();
    let mut ppi = DMatrix::zeros(total_p, q);
    let mut beta = DMatrix::zeros(total_p, q);
    let mut snps = Vec::with_capacity(total_p);
    let mut row = 0;
    for f in &fits {
        let k = f.snps.len();
        ppi.rows_mut(row, k).copy_from(&f.report.ppi);
        beta.rows_mut(row, k).copy_from(&f.report.beta_mean);
        snps.extend(f.snps.iter().cloned());
        row += k;
    }
    let mut loci = summarize_loci(&ppi, &beta, &snps, &ds.trait_ids(), locus)?;
    label_loci(&mut loci, ds.traits(), cis_window_bp);
    Ok(PipelineOutput {
        fits,
        skipped_blocks,
        loci,
    })
}

/// Loads the configured inputs, fits all blocks and writes per-block
/// artifacts, `loci.tsv` and `manifest.txt` under the output directory.
/// When a block fails, a `FAILED` marker naming it is written and the
/// error is returned.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineOutput> {
    let started = Instant::now();
    std::fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    let ds = cfg.inputs.load()?;
    let blocks = data::load_blocks(&cfg.blocks)?;

    let out = match fit_blocks(&ds, &blocks, &cfg.hyper, &cfg.fit, cfg.parallelism, cfg.locus, cfg.cis_window_bp) {
        Ok(o) => o,
        Err(e) => {
            let id = match &e {
                Error::BlockFailed { block_id, .. } => block_id.to_string(),
                _ => "NA".into(),
            };
            let mut chain = e.to_string();
            let mut cause = std::error::Error::source(&e);
            while let Some(c) = cause {
                chain.push_str(": ");
                chain.push_str(&c.to_string());
                cause = c.source();
            }
            io::write_text(&cfg.out.join("FAILED"), &format!("block={id}\nerror={chain}\n"))?;
            return Err(e);
        }
    };

    for f in &out.fits {
        f.report.write_tsv(&cfg.out.join(format!("block_{}", f.block.block_id)))?;
    }
    io::write_text(&cfg.out.join("loci.tsv"), &loci_tsv(&out.loci))?;

    let mut manifest = KeyValues::default();
    manifest.set("version", env!("CARGO_PKG_VERSION"));
    manifest.set("seed", cfg.fit.seed);
    manifest.set("scheme", cfg.fit.scheme);
    manifest.set("config_hash", &cfg.config_hash);
    manifest.set("n", ds.n());
    manifest.set("p", ds.p());
    manifest.set("q", ds.q());
    manifest.set("parallelism", cfg.parallelism);
    manifest.set(
        "blocks_fitted",
        out.fits.iter().map(|f| f.block.block_id.to_string()).collect::<Vec<_>>().join(","),
    );
    manifest.set(
        "blocks_skipped",
        out.skipped_blocks.iter().map(|b| b.to_string()).collect::<Vec<_>>().join(","),
    );
    manifest.set("n_loci", out.loci.len());
    for f in &out.fits {
        let id = f.block.block_id;
        manifest.set(&format!("block_{id}_iterations"), f.report.iterations);
        manifest.set(&format!("block_{id}_local_update_count"), f.report.local_update_count);
        manifest.set(&format!("block_{id}_converged"), f.report.converged);
        manifest.set(&format!("block_{id}_wall_time_total"), f.report.wall_time_total.as_secs_f64());
    }
    manifest.set("wall_time_total", started.elapsed().as_secs_f64());
    io::write_text(&cfg.out.join("manifest.txt"), &manifest.to_text())?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn snps(bps: &[u64]) -> Vec<SnpMeta> {
        bps.iter()
            .enumerate()
            .map(|(i, &bp)| SnpMeta {
                id: format!("rs{i}"),
                bp,
                maf: 0.2,
            })
            .collect()
    }

    fn ids(q: usize) -> Vec<String> {
        (0..q).map(|t| format!("t{t}")).collect()
    }

    #[test]
    fn singleton_locus() {
        let ppi = DMatrix::from_row_slice(2, 1, &[0.9, 0.1]);
        let beta = DMatrix::from_row_slice(2, 1, &[0.4, 0.0]);
        let loci = summarize_loci(&ppi, &beta, &snps(&[100, 200]), &ids(1), LocusParams::default()).unwrap();
        assert_eq!(loci.len(), 1);
        assert_eq!(loci[0].associations.len(), 1);
        assert_eq!(loci[0].associations[0].beta_at_max, 0.4);
        assert_eq!((loci[0].start_bp, loci[0].end_bp), (100, 100));
    }

    #[test]
    fn merge_window_examples() {
        let ppi = DMatrix::from_row_slice(2, 1, &[0.9, 0.8]);
        let beta = DMatrix::zeros(2, 1);
        let close = summarize_loci(&ppi, &beta, &snps(&[1_000_000, 1_400_000]), &ids(1), LocusParams::default()).unwrap();
        assert_eq!(close.len(), 1);
        assert_eq!(close[0].lead_snp, "rs0");
        let far = summarize_loci(&ppi, &beta, &snps(&[1_000_000, 1_600_000]), &ids(1), LocusParams::default()).unwrap();
        assert_eq!(far.len(), 2);
        assert_eq!(far[0].lead_snp, "rs0");
        assert_eq!(far[0].locus_id, 1);
    }

    #[test]
    fn lead_anchored_versus_chained() {
        let ppi = DMatrix::from_row_slice(3, 2, &[0.9, 0.9, 0.9, 0.0, 0.9, 0.0]);
        let beta = DMatrix::zeros(3, 2);
        let s = snps(&[1_000_000, 1_400_000, 1_800_000]);
        let anchored = summarize_loci(&ppi, &beta, &s, &ids(2), LocusParams::default()).unwrap();
        assert_eq!(anchored.len(), 2);
        let chained = summarize_loci(
            &ppi,
            &beta,
            &s,
            &ids(2),
            LocusParams {
                merge: MergeRule::Chained,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(chained.len(), 1);
        assert_eq!(chained[0].members, vec![0, 1, 2]);
    }

    #[test]
    fn every_signal_belongs_to_exactly_one_locus() {
        let p = 40;
        let ppi = DMatrix::from_fn(p, 3, |s, t| if (s * 7 + t * 3) % 5 == 0 { 0.8 } else { 0.1 });
        let beta = DMatrix::zeros(p, 3);
        let bps: Vec<u64> = (0..p as u64).map(|k| 100_000 + k * 170_000).collect();
        let loci = summarize_loci(&ppi, &beta, &snps(&bps), &ids(3), LocusParams::default()).unwrap();
        let mut seen = vec![0; p];
        for l in &loci {
            for &m in &l.members {
                seen[m] += 1;
            }
            assert!(!l.associations.is_empty());
        }
        for s in 0..p {
            let signal = ppi.row(s).iter().any(|&v| v > 0.5);
            assert_eq!(seen[s], signal as usize);
        }
    }

    #[test]
    fn cis_trans_labels() {
        assert_eq!(label_cis_trans(100, 200, Some(150), 1_000_000), CisTrans::Cis);
        assert_eq!(label_cis_trans(3_000_000, 3_000_000, Some(1_000_000), 1_000_000), CisTrans::Trans);
        assert_eq!(label_cis_trans(100, 200, None, 1_000_000), CisTrans::Unknown);
    }

    #[test]
    fn block_seeds_differ() {
        assert_ne!(block_seed(1, 1), block_seed(1, 2));
        assert_eq!(block_seed(5, 3), block_seed(5, 3));
    }
}
