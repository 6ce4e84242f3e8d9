//! Linear read-outs used by the probes: least-squares regression and a
//! least-squares one-vs-rest classifier.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Design matrix with a trailing bias column.
fn design(x: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = x.len();
    let d = x.first().map_or(0, Vec::len);
    if n == 0 || x.iter().any(|r| r.len() != d) {
        return Err(Error::shape("linear design", (n, d), (n.max(1), d)));
    }
    Ok(DMatrix::from_fn(n, d + 1, |i, j| if j < d { x[i][j] } else { 1.0 }))
}

/// Ridge-regularized least squares `W` (`(d+1) × k`) mapping rows of `x`
/// to rows of `y`.
#[derive(Debug, Clone)]
pub struct LinearMap {
    coef: DMatrix<f64>,
}

impl LinearMap {
    pub fn fit(x: &[Vec<f64>], y: &[Vec<f64>], ridge: f64) -> Result<Self> {
        let a = design(x)?;
        let k = y.first().map_or(0, Vec::len);
        if y.len() != x.len() || y.iter().any(|r| r.len() != k) {
            return Err(Error::shape("LinearMap::fit", (x.len(), 1), (y.len(), k)));
        }
        let b = DMatrix::from_fn(y.len(), k, |i, j| y[i][j]);
        let mut ata = a.transpose() * &a;
        let p = ata.nrows();
        // The bias column is left unpenalized.
        for i in 0..p - 1 {
            ata[(i, i)] += ridge;
        }
        let atb = a.transpose() * b;
        let coef = match ata.clone().cholesky() {
            Some(ch) => ch.solve(&atb),
            // Rank-deficient without a ridge term: minimum-norm solution.
            None => ata
                .svd(true, true)
                .solve(&atb, 1e-12)
                .map_err(|e| Error::Training(format!("least-squares solve failed: {e}")))?,
        };
        Ok(Self { coef })
    }

    pub fn input_dim(&self) -> usize {
        self.coef.nrows() - 1
    }

    /// A square factor `A` with `A Aᵀ = W Wᵀ` over the non-bias weights, so
    /// unit isotropic input noise moves the outputs by `A η`, `η ~ N(0, I)`.
    /// Taken from the QR factorization of `Wᵀ`, which stays defined when
    /// `W Wᵀ` is singular.
    pub fn output_noise_factor(&self) -> DMatrix<f64> {
        let wt = self.coef.rows(0, self.input_dim()).into_owned();
        wt.qr().r().transpose()
    }

    pub fn predict(&self, x: &[f64]) -> Vec<f64> {
        let d = self.coef.nrows() - 1;
        let row = DVector::from_fn(d + 1, |j, _| if j < d { x[j] } else { 1.0 });
        (self.coef.transpose() * row).iter().copied().collect()
    }
}

/// Pooled coefficient of determination `1 − SSE / SST` over all outputs.
pub fn r_squared(pred: &[Vec<f64>], truth: &[Vec<f64>]) -> f64 {
    let k = truth.first().map_or(0, Vec::len);
    let n = truth.len() as f64;
    let mut sse = 0.0;
    let mut sst = 0.0;
    for j in 0..k {
        let mean = truth.iter().map(|r| r[j]).sum::<f64>() / n;
        for (p, t) in pred.iter().zip(truth) {
            sse += (p[j] - t[j]).powi(2);
            sst += (t[j] - mean).powi(2);
        }
    }
    if sst == 0.0 {
        0.0
    } else {
        1.0 - sse / sst
    }
}

/// Least-squares fit to one-hot labels, predicting by argmax.
#[derive(Debug, Clone)]
pub struct LinearClassifier {
    map: LinearMap,
}

impl LinearClassifier {
    pub fn fit(x: &[Vec<f64>], labels: &[usize], n_classes: usize, ridge: f64) -> Result<Self> {
        let y: Vec<Vec<f64>> = labels
            .iter()
            .map(|&l| (0..n_classes).map(|c| if c == l { 1.0 } else { 0.0 }).collect())
            .collect();
        Ok(Self {
            map: LinearMap::fit(x, &y, ridge)?,
        })
    }

    pub fn scores(&self, x: &[f64]) -> Vec<f64> {
        self.map.predict(x)
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        argmax(&self.scores(x))
    }

    pub fn map(&self) -> &LinearMap {
        &self.map
    }

    pub fn accuracy(&self, x: &[Vec<f64>], labels: &[usize]) -> f64 {
        let hits = x.iter().zip(labels).filter(|(r, &l)| self.predict(r) == l).count();
        hits as f64 / labels.len().max(1) as f64
    }
}

/// Index of the largest element; the first one on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
