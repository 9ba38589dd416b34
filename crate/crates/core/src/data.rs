//! Genotype/response ingestion, standardisation and LD-block tables.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::io::{self, parse_cell, Table};

/// How the rows of a matrix file are laid out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Orientation {
    /// One row per sample; header names the variables.
    SamplesByVariables,
    /// One row per variable, led by the variable id; the header names the
    /// samples. The matrix is transposed on load so that samples are rows.
    VariablesBySamples,
}

/// Samples-by-variables matrix with one id per variable (column).
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledMatrix {
    pub ids: Vec<String>,
    pub data: DMatrix<f64>,
}

pub fn load_matrix(path: &Path, orientation: Orientation) -> Result<LabeledMatrix> {
    match orientation {
        Orientation::SamplesByVariables => {
            let table = io::read_table(path)?;
            let data = io::numeric_body(&table, 0, &path.display().to_string())?;
            Ok(LabeledMatrix {
                ids: table.header,
                data,
            })
        }
        Orientation::VariablesBySamples => {
            let (ids, by_row) = load_row_labeled_matrix(path)?;
            Ok(LabeledMatrix {
                ids,
                data: by_row.data.transpose(),
            })
        }
    }
}

pub fn write_matrix(path: &Path, m: &LabeledMatrix) -> Result<()> {
    io::write_matrix(path, &m.ids, &m.data, None)
}

/// Reads a matrix whose first column holds row labels (e.g. `ppi.tsv`).
pub fn load_row_labeled_matrix(path: &Path) -> Result<(Vec<String>, LabeledMatrix)> {
    let table = io::read_table(path)?;
    let ctx = path.display().to_string();
    if table.header.is_empty() {
        return Err(Error::Parse {
            context: ctx,
            row: 0,
            message: "empty header".into(),
        });
    }
    let data = io::numeric_body(&table, 1, &ctx)?;
    let labels = table.rows.iter().map(|r| r[0].clone()).collect();
    Ok((
        labels,
        LabeledMatrix {
            ids: table.header[1..].to_vec(),
            data,
        },
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SnpMeta {
    pub id: String,
    pub bp: u64,
    pub maf: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraitMeta {
    pub id: String,
    pub gene_bp: Option<u64>,
}

fn expect_header(table: &Table, expected: &[&str], ctx: &str) -> Result<()> {
    if table.header.iter().map(String::as_str).ne(expected.iter().copied()) {
        return Err(Error::Parse {
            context: ctx.to_owned(),
            row: 0,
            message: format!("expected header '{}'", expected.join("\\t")),
        });
    }
    Ok(())
}

/// SNP metadata with columns exactly `id\tbp\tmaf`.
pub fn load_snp_meta(path: &Path) -> Result<Vec<SnpMeta>> {
    let table = io::read_table(path)?;
    let ctx = path.display().to_string();
    expect_header(&table, &["id", "bp", "maf"], &ctx)?;
    table
        .rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            Ok(SnpMeta {
                id: r[0].clone(),
                bp: parse_cell(&r[1], &ctx, i + 1, "bp")?,
                maf: parse_cell(&r[2], &ctx, i + 1, "maf")?,
            })
        })
        .collect()
}

pub fn write_snp_meta(path: &Path, snps: &[SnpMeta]) -> Result<()> {
    let mut out = String::from("id\tbp\tmaf\n");
    for s in snps {
        out.push_str(&format!("{}\t{}\t{}\n", s.id, s.bp, io::fmt_f64(s.maf)));
    }
    io::write_text(path, &out)
}

/// Trait metadata with columns `id\tgene_bp`; an empty or `NA` position means unknown.
pub fn load_trait_meta(path: &Path) -> Result<Vec<TraitMeta>> {
    let table = io::read_table(path)?;
    let ctx = path.display().to_string();
    expect_header(&table, &["id", "gene_bp"], &ctx)?;
    table
        .rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let cell = r[1].trim();
            let gene_bp = if cell.is_empty() || cell.eq_ignore_ascii_case("na") {
                None
            } else {
                Some(parse_cell(cell, &ctx, i + 1, "gene_bp")?)
            };
            Ok(TraitMeta {
                id: r[0].clone(),
                gene_bp,
            })
        })
        .collect()
}

pub fn write_trait_meta(path: &Path, traits: &[TraitMeta]) -> Result<()> {
    let mut out = String::from("id\tgene_bp\n");
    for t in traits {
        match t.gene_bp {
            Some(bp) => out.push_str(&format!("{}\t{}\n", t.id, bp)),
            None => out.push_str(&format!("{}\tNA\n", t.id)),
        }
    }
    io::write_text(path, &out)
}

/// Trait ids only, for response files loaded without a metadata table.
pub fn traits_from_ids(ids: &[String]) -> Vec<TraitMeta> {
    ids.iter()
        .map(|id| TraitMeta {
            id: id.clone(),
            gene_bp: None,
        })
        .collect()
}

/// Locations of the tables making up one dataset.
#[derive(Debug, Clone)]
pub struct InputPaths {
    pub genotypes: PathBuf,
    pub genotype_orientation: Orientation,
    pub responses: PathBuf,
    pub snps: PathBuf,
    /// Without a trait table, ids come from the response header and no
    /// gene positions are known.
    pub traits: Option<PathBuf>,
}

pub const INPUT_KEYS: &[&str] = &["genotypes", "genotypes_by_snp", "responses", "snps", "traits"];

impl InputPaths {
    /// Reads `genotypes`, `genotypes_by_snp`, `responses`, `snps` and
    /// `traits`, resolving relative paths against `base`.
    pub fn from_key_values(kv: &io::KeyValues, base: &Path) -> Result<Self> {
        let path = |key: &str| -> Result<PathBuf> {
            let v = kv
                .get_str(key)
                .ok_or_else(|| Error::Config(format!("missing required key '{key}'")))?;
            Ok(base.join(v))
        };
        Ok(Self {
            genotypes: path("genotypes")?,
            genotype_orientation: if kv.get("genotypes_by_snp")?.unwrap_or(false) {
                Orientation::VariablesBySamples
            } else {
                Orientation::SamplesByVariables
            },
            responses: path("responses")?,
            snps: path("snps")?,
            traits: kv.get_str("traits").map(|v| base.join(v)),
        })
    }

    /// The file layout written by the simulator.
    pub fn in_directory(dir: &Path) -> Self {
        Self {
            genotypes: dir.join("genotypes.tsv"),
            genotype_orientation: Orientation::SamplesByVariables,
            responses: dir.join("responses.tsv"),
            snps: dir.join("snps.tsv"),
            traits: Some(dir.join("traits.tsv")),
        }
    }

    pub fn load(&self) -> Result<Dataset> {
        let x = load_matrix(&self.genotypes, self.genotype_orientation)?;
        let y = load_matrix(&self.responses, Orientation::SamplesByVariables)?;
        let snps = load_snp_meta(&self.snps)?;
        let traits = match &self.traits {
            Some(p) => load_trait_meta(p)?,
            None => traits_from_ids(&y.ids),
        };
        if x.ids.len() != snps.len() || x.ids.iter().zip(&snps).any(|(a, b)| *a != b.id) {
            return Err(Error::Validation(
                "genotype columns and SNP table disagree in ids or order".into(),
            ));
        }
        if y.ids.len() != traits.len() || y.ids.iter().zip(&traits).any(|(a, b)| *a != b.id) {
            return Err(Error::Validation(
                "response columns and trait table disagree in ids or order".into(),
            ));
        }
        Dataset::standardize(&x.data, &y.data, snps, traits)
    }
}

/// Column-standardised genotypes and column-centred responses.
///
/// Immutable once built; safe to share between concurrent block fits.
#[derive(Debug, Clone)]
pub struct Dataset {
    x: DMatrix<f64>,
    y: DMatrix<f64>,
    snps: Vec<SnpMeta>,
    traits: Vec<TraitMeta>,
    x_mean: Vec<f64>,
    x_sd: Vec<f64>,
    y_mean: Vec<f64>,
}

fn column_mean(col: &[f64]) -> f64 {
    col.iter().sum::<f64>() / col.len() as f64
}

impl Dataset {
    /// Centres and scales every genotype column to unit sample standard
    /// deviation (n − 1 denominator) and centres every response column.
    pub fn standardize(
        x_raw: &DMatrix<f64>,
        y_raw: &DMatrix<f64>,
        snps: Vec<SnpMeta>,
        traits: Vec<TraitMeta>,
    ) -> Result<Self> {
        let n = x_raw.nrows();
        if n < 2 {
            return Err(Error::Dimension(format!("need at least 2 samples, got {n}")));
        }
        if y_raw.nrows() != n {
            return Err(Error::Dimension(format!(
                "genotypes have {n} rows but responses have {}",
                y_raw.nrows()
            )));
        }
        if snps.len() != x_raw.ncols() {
            return Err(Error::Dimension(format!(
                "{} SNP metadata records for {} genotype columns",
                snps.len(),
                x_raw.ncols()
            )));
        }
        if traits.len() != y_raw.ncols() {
            return Err(Error::Dimension(format!(
                "{} trait metadata records for {} response columns",
                traits.len(),
                y_raw.ncols()
            )));
        }
        if x_raw.ncols() == 0 || y_raw.ncols() == 0 {
            return Err(Error::Dimension("need at least one SNP and one trait".into()));
        }
        validate_snp_meta(&snps)?;
        for (name, m) in [("genotype", x_raw), ("response", y_raw)] {
            if let Some(k) = m.iter().position(|v| !v.is_finite()) {
                return Err(Error::Validation(format!(
                    "non-finite {name} value at row {}, column {}",
                    k % n + 1,
                    k / n + 1
                )));
            }
        }

        let mut x = x_raw.clone();
        let mut x_mean = Vec::with_capacity(x.ncols());
        let mut x_sd = Vec::with_capacity(x.ncols());
        for (j, mut col) in x.column_iter_mut().enumerate() {
            let c = col.as_mut_slice();
            let mean = column_mean(c);
            let ss: f64 = c.iter().map(|v| (v - mean) * (v - mean)).sum();
            let sd = (ss / (n - 1) as f64).sqrt();
            let scale = c.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            if !(sd > 1e-12 * scale.max(f64::MIN_POSITIVE)) {
                return Err(Error::ConstantPredictor(snps[j].id.clone()));
            }
            for v in c.iter_mut() {
                *v = (*v - mean) / sd;
            }
            x_mean.push(mean);
            x_sd.push(sd);
        }

        let mut y = y_raw.clone();
        let mut y_mean = Vec::with_capacity(y.ncols());
        for mut col in y.column_iter_mut() {
            let c = col.as_mut_slice();
            let mean = column_mean(c);
            for v in c.iter_mut() {
                *v -= mean;
            }
            y_mean.push(mean);
        }

        Ok(Self {
            x,
            y,
            snps,
            traits,
            x_mean,
            x_sd,
            y_mean,
        })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }
    pub fn p(&self) -> usize {
        self.x.ncols()
    }
    pub fn q(&self) -> usize {
        self.y.ncols()
    }
    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }
    pub fn y(&self) -> &DMatrix<f64> {
        &self.y
    }
    pub fn snps(&self) -> &[SnpMeta] {
        &self.snps
    }
    pub fn traits(&self) -> &[TraitMeta] {
        &self.traits
    }
    pub fn x_mean(&self) -> &[f64] {
        &self.x_mean
    }
    pub fn x_sd(&self) -> &[f64] {
        &self.x_sd
    }
    pub fn y_mean(&self) -> &[f64] {
        &self.y_mean
    }
    pub fn snp_ids(&self) -> Vec<String> {
        self.snps.iter().map(|s| s.id.clone()).collect()
    }
    pub fn trait_ids(&self) -> Vec<String> {
        self.traits.iter().map(|t| t.id.clone()).collect()
    }

    /// Converts per-standard-deviation effects back to per-allele effects.
    pub fn beta_to_allelic_scale(&self, beta: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(beta.nrows(), beta.ncols(), |s, t| beta[(s, t)] / self.x_sd[s])
    }

    /// Restricts the dataset to the SNPs with `start_bp ≤ bp ≤ end_bp`.
    pub fn slice_block(&self, block: &Block) -> Result<Dataset> {
        let keep: Vec<usize> = self
            .snps
            .iter()
            .enumerate()
            .filter(|(_, s)| s.bp >= block.start_bp && s.bp <= block.end_bp)
            .map(|(j, _)| j)
            .collect();
        if keep.is_empty() {
            return Err(Error::EmptyBlock(block.block_id));
        }
        Ok(self.select_snps(&keep))
    }

    pub(crate) fn select_snps(&self, keep: &[usize]) -> Dataset {
        let x = self.x.select_columns(keep.iter());
        Dataset {
            x,
            y: self.y.clone(),
            snps: keep.iter().map(|&j| self.snps[j].clone()).collect(),
            traits: self.traits.clone(),
            x_mean: keep.iter().map(|&j| self.x_mean[j]).collect(),
            x_sd: keep.iter().map(|&j| self.x_sd[j]).collect(),
            y_mean: self.y_mean.clone(),
        }
    }
}

fn validate_snp_meta(snps: &[SnpMeta]) -> Result<()> {
    for (i, s) in snps.iter().enumerate() {
        if s.bp == 0 {
            return Err(Error::Validation(format!("SNP '{}' has non-positive bp", s.id)));
        }
        if !(s.maf > 0.0 && s.maf <= 0.5) {
            return Err(Error::Validation(format!(
                "SNP '{}' has MAF {} outside (0, 0.5]",
                s.id, s.maf
            )));
        }
        if i > 0 && snps[i - 1].bp > s.bp {
            return Err(Error::Validation(format!(
                "SNP metadata not sorted by bp at '{}'",
                s.id
            )));
        }
    }
    Ok(())
}

/// Expected allele count from genotype probabilities `(P(0), P(1), P(2))`.
pub fn dosage_to_genotype(p0: f64, p1: f64, p2: f64) -> Result<f64> {
    let probs = [p0, p1, p2];
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::Validation(format!(
            "dosage probabilities ({p0}, {p1}, {p2}) must be non-negative"
        )));
    }
    let total = p0 + p1 + p2;
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::Validation(format!(
            "dosage probabilities sum to {total}, expected 1"
        )));
    }
    Ok(p1 + 2.0 * p2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    pub block_id: i64,
    pub start_bp: u64,
    pub end_bp: u64,
}

/// Non-overlapping blocks sorted by start position. Ends are inclusive.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BlockTable {
    blocks: Vec<Block>,
}

impl BlockTable {
    pub fn new(mut blocks: Vec<Block>) -> Result<Self> {
        for b in &blocks {
            if b.start_bp >= b.end_bp {
                return Err(Error::Validation(format!(
                    "block {} has start {} not below end {}",
                    b.block_id, b.start_bp, b.end_bp
                )));
            }
        }
        blocks.sort_by_key(|b| (b.start_bp, b.end_bp));
        for w in blocks.windows(2) {
            if w[1].start_bp <= w[0].end_bp {
                return Err(Error::Validation(format!(
                    "blocks {} and {} overlap",
                    w[0].block_id, w[1].block_id
                )));
            }
        }
        Ok(Self { blocks })
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }
}

pub fn load_blocks(path: &Path) -> Result<BlockTable> {
    let table = io::read_table(path)?;
    let ctx = path.display().to_string();
    expect_header(&table, &["block_id", "start_bp", "end_bp"], &ctx)?;
    let rows = table
        .rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            Ok(Block {
                block_id: parse_cell(&r[0], &ctx, i + 1, "block_id")?,
                start_bp: parse_cell(&r[1], &ctx, i + 1, "start_bp")?,
                end_bp: parse_cell(&r[2], &ctx, i + 1, "end_bp")?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    BlockTable::new(rows)
}

pub fn write_blocks(path: &Path, table: &BlockTable) -> Result<()> {
    let mut out = String::from("block_id\tstart_bp\tend_bp\n");
    for b in table.blocks() {
        out.push_str(&format!("{}\t{}\t{}\n", b.block_id, b.start_bp, b.end_bp));
    }
    io::write_text(path, &out)
}
