use nalgebra::DMatrix;

use crate::data::Dataset;

/// Sufficient statistics of a dataset for the coordinate updates:
/// `G = XᵀX`, `XᵀY` and `‖y_t‖²`. The sweep touches only these, so its cost
/// per trait is O(p²) regardless of `n`.
#[derive(Debug, Clone)]
pub struct Design {
    pub n: usize,
    pub gram: DMatrix<f64>,
    pub xty: DMatrix<f64>,
    pub yty: Vec<f64>,
}

impl Design {
    pub fn new(ds: &Dataset) -> Self {
        Self::from_matrices(ds.x(), ds.y())
    }

    pub fn from_matrices(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Self {
        let gram = x.tr_mul(x);
        let xty = x.tr_mul(y);
        let yty = y.column_iter().map(|c| c.norm_squared()).collect();
        Self {
            n: x.nrows(),
            gram,
            xty,
            yty,
        }
    }

    pub fn p(&self) -> usize {
        self.gram.nrows()
    }

    pub fn q(&self) -> usize {
        self.xty.ncols()
    }

    #[inline]
    pub fn gram_col(&self, s: usize) -> &[f64] {
        let p = self.p();
        &self.gram.as_slice()[s * p..(s + 1) * p]
    }

    #[inline]
    pub fn xty_col(&self, t: usize) -> &[f64] {
        let p = self.p();
        &self.xty.as_slice()[t * p..(t + 1) * p]
    }

    /// `Xᵀ(y_t − X m)` from scratch.
    pub fn fresh_xr(&self, t: usize, m: &[f64]) -> Vec<f64> {
        let p = self.p();
        let mut xr = self.xty_col(t).to_vec();
        for (s, &ms) in m.iter().enumerate() {
            if ms != 0.0 {
                let col = self.gram_col(s);
                for j in 0..p {
                    xr[j] -= col[j] * ms;
                }
            }
        }
        xr
    }

    /// `E‖y_t − Xβ_t‖²` for the spike-and-slab factor, given a residual
    /// projection consistent with `(g, mu)`.
    pub fn expected_sq_residual(&self, t: usize, g: &[f64], mu: &[f64], s2: &[f64], xr: &[f64]) -> f64 {
        let xty = self.xty_col(t);
        let mut fit = 0.0;
        let mut spread = 0.0;
        for s in 0..g.len() {
            let m = g[s] * mu[s];
            fit += m * (xty[s] + xr[s]);
            spread += self.gram[(s, s)] * (g[s] * (mu[s] * mu[s] + s2[s]) - m * m);
        }
        (self.yty[t] - fit).max(0.0) + spread
    }
}
