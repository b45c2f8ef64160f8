//! Feature standardization and product-Gaussian kernel density estimates.
//!
//! Densities are evaluated in log space: the shift estimator compares them
//! against thresholds as small as 1e-12 and divides by them.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub const STD_FLOOR: f64 = 1e-8;
pub const BANDWIDTH_FLOOR: f64 = 1e-6;
const LN_2PI: f64 = 1.837_877_066_409_345_5;
const QUERY_BLOCK: usize = 256;

/// Per-dimension affine map to zero mean and unit variance.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
}

impl Standardizer {
    /// Population mean and standard deviation per column; the standard
    /// deviation is floored at 1e-8.
    pub fn fit(f: &ArrayView2<f64>) -> Result<Self> {
        if f.nrows() < 2 {
            return Err(Error::invalid(
                "features",
                format!("standardizer needs at least 2 rows, got {}", f.nrows()),
            ));
        }
        let mean = f.mean_axis(Axis(0)).expect("non-empty");
        let std = f.std_axis(Axis(0), 0.0).mapv(|s| s.max(STD_FLOOR));
        Ok(Self { mean, std })
    }

    pub fn apply(&self, f: &ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check(f.ncols())?;
        Ok((f - &self.mean) / &self.std)
    }

    pub fn invert(&self, f: &ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check(f.ncols())?;
        Ok(f * &self.std + &self.mean)
    }

    fn check(&self, d: usize) -> Result<()> {
        if d != self.mean.len() {
            return Err(Error::DimensionMismatch {
                expected: self.mean.len(),
                got: d,
            });
        }
        Ok(())
    }
}

/// How per-dimension bandwidths are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    /// h_j = σ_j · k^(−1/(m+4)).
    #[default]
    Scott,
    /// h_j = σ_j · factor.
    Scaled(f64),
    /// h_j = σ_j · c · k^(−1/(m+4)), Scott's rule shrunk by `c`.
    ScottScaled(f64),
}

/// Equal-weight mixture of axis-aligned Gaussians centred on the fit points.
#[derive(Debug, Clone, PartialEq)]
pub struct KdeModel {
    points: Array2<f64>,
    bandwidth: Array1<f64>,
    /// Fit points minus their mean, divided by the bandwidth.
    scaled: Array2<f64>,
    center: Array1<f64>,
    log_norm_const: f64,
}

impl KdeModel {
    pub fn fit(f: &ArrayView2<f64>) -> Result<Self> {
        Self::fit_with(f, Bandwidth::Scott)
    }

    pub fn fit_with(f: &ArrayView2<f64>, rule: Bandwidth) -> Result<Self> {
        let k = f.nrows();
        if k < 2 {
            return Err(Error::invalid(
                "features",
                format!("KDE needs at least 2 points, got {k}"),
            ));
        }
        let m = f.ncols();
        let factor = match rule {
            Bandwidth::Scott => (k as f64).powf(-1.0 / (m as f64 + 4.0)),
            Bandwidth::Scaled(c) => {
                if !(c > 0.0 && c.is_finite()) {
                    return Err(Error::invalid("bandwidth", format!("factor {c} must be positive")));
                }
                c
            }
            Bandwidth::ScottScaled(c) => {
                if !(c > 0.0 && c.is_finite()) {
                    return Err(Error::invalid("bandwidth", format!("factor {c} must be positive")));
                }
                c * (k as f64).powf(-1.0 / (m as f64 + 4.0))
            }
        };
        let sigma = f.std_axis(Axis(0), 1.0);
        let bandwidth = sigma.mapv(|s| (s * factor).max(BANDWIDTH_FLOOR));
        Ok(Self::from_parts(f.to_owned(), bandwidth))
    }

    /// Model with explicit bandwidths (each floored at 1e-6).
    pub fn from_parts(points: Array2<f64>, bandwidth: Array1<f64>) -> Self {
        assert_eq!(points.ncols(), bandwidth.len(), "bandwidth length");
        assert!(points.nrows() >= 1, "at least one point");
        let bandwidth = bandwidth.mapv(|h| h.max(BANDWIDTH_FLOOR));
        let k = points.nrows() as f64;
        let m = points.ncols() as f64;
        let log_norm_const =
            -k.ln() - bandwidth.iter().map(|h| h.ln()).sum::<f64>() - 0.5 * m * LN_2PI;
        let center = points.mean_axis(Axis(0)).expect("non-empty");
        let scaled = (&points - &center) / &bandwidth;
        Self {
            points,
            bandwidth,
            scaled,
            center,
            log_norm_const,
        }
    }

    pub fn points(&self) -> &Array2<f64> {
        &self.points
    }

    pub fn bandwidth(&self) -> &Array1<f64> {
        &self.bandwidth
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn n_points(&self) -> usize {
        self.points.nrows()
    }

    pub fn log_norm_const(&self) -> f64 {
        self.log_norm_const
    }

    pub fn logpdf(&self, z: &ArrayView1<f64>) -> Result<f64> {
        Ok(self.logpdf_many(&z.view().insert_axis(Axis(0)))?[0])
    }

    pub fn pdf(&self, z: &ArrayView1<f64>) -> Result<f64> {
        self.logpdf(z).map(f64::exp)
    }

    /// Log-density at every row of `zs`. Squared distances come from one
    /// matrix product per block of queries.
    pub fn logpdf_many(&self, zs: &ArrayView2<f64>) -> Result<Array1<f64>> {
        if zs.ncols() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: zs.ncols(),
            });
        }
        let p_norm: Array1<f64> = self.scaled.rows().into_iter().map(|r| r.dot(&r)).collect();
        let mut out = Array1::zeros(zs.nrows());
        for (block, mut dst) in zs
            .axis_chunks_iter(Axis(0), QUERY_BLOCK)
            .zip(out.axis_chunks_iter_mut(Axis(0), QUERY_BLOCK))
        {
            let q = (&block - &self.center) / &self.bandwidth;
            let cross = q.dot(&self.scaled.t());
            for ((d, qr), cr) in dst.iter_mut().zip(q.rows()).zip(cross.rows()) {
                let q_norm = qr.dot(&qr);
                let mut best = f64::NEG_INFINITY;
                let e: Vec<f64> = cr
                    .iter()
                    .zip(&p_norm)
                    .map(|(&c, &pn)| {
                        let v = -0.5 * (q_norm + pn - 2.0 * c).max(0.0);
                        best = best.max(v);
                        v
                    })
                    .collect();
                *d = if best == f64::NEG_INFINITY {
                    f64::NEG_INFINITY
                } else {
                    best + e.iter().map(|&v| (v - best).exp()).sum::<f64>().ln() + self.log_norm_const
                };
            }
        }
        Ok(out)
    }

    /// `n` exact draws: a uniformly chosen fit point plus Gaussian noise
    /// with the model's bandwidth.
    pub fn sample(&self, n: usize, rng: &mut Rng) -> Result<Array2<f64>> {
        if n == 0 {
            return Err(Error::invalid("n", "sample size must be at least 1"));
        }
        let m = self.dim();
        let mut out = Array2::zeros((n, m));
        for mut row in out.rows_mut() {
            let c = self.points.row(rng.below(self.n_points()));
            for j in 0..m {
                row[j] = c[j] + self.bandwidth[j] * rng.normal();
            }
        }
        Ok(out)
    }
}
