//! Diversity and correlation shift.
//!
//! For environments with densities p (training) and q (test) over latent
//! features z, split the feature space into S = {z : p(z)·q(z) = 0} and its
//! complement T. Then
//!
//! ```text
//! D_div = ½ ∫_S |p(z) − q(z)| dz
//! D_cor = ½ ∫_T √(p(z) q(z)) Σ_y |p(y|z) − q(y|z)| dz
//! ```
//!
//! [`oracle_shift`] evaluates both sums exactly on a finite [`LatentSpec`].
//! [`estimate`] works from learned features: it standardizes the pooled
//! features, fits Gaussian KDEs for the pooled (ŵ), per-environment (p̂, q̂)
//! and per-class (p̂_y, q̂_y) distributions, and integrates by importance
//! sampling from ŵ. Near-zero density thresholds stand in for the exact
//! S / T split, and p(y|z) is rewritten through Bayes' rule with equal class
//! priors, giving the correlation integrand
//! `|p̂_y √(q̂/p̂) − q̂_y √(p̂/q̂)| / |Y|`.

use ndarray::{concatenate, Array1, Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::datagen::{gen_colored, ColoredSpec, LatentSpec};
use crate::density::{Bandwidth, KdeModel, Standardizer};
use crate::discriminator::{extract, train, MlpConfig};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Lower bound on log ŵ(z) before dividing by ŵ(z).
const LOG_W_FLOOR: f64 = -745.0;
/// Default multiplier on Scott's factor for the shared bandwidth.
pub const DEFAULT_SCOTT_SHRINK: f64 = 0.7;
/// Allowed deviation of each class frequency from 1/|Y|.
const PRIOR_TOLERANCE: f64 = 0.02;

/// Exact shifts of a finite latent specification, returned as (div, cor).
pub fn oracle_shift(spec: &LatentSpec) -> (f64, f64) {
    let (p, q) = (spec.p_z(), spec.q_z());
    let mut div = 0.0;
    let mut cor = 0.0;
    for z in 0..p.len() {
        if p[z] * q[z] == 0.0 {
            div += (p[z] - q[z]).abs();
        } else {
            let gap: f64 = spec.p_y_given_z()[z]
                .iter()
                .zip(&spec.q_y_given_z()[z])
                .map(|(a, b)| (a - b).abs())
                .sum();
            cor += (p[z] * q[z]).sqrt() * gap;
        }
    }
    // both are at most 1; summing normalized masses can overshoot by an ulp
    ((0.5 * div).clamp(0.0, 1.0), (0.5 * cor).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    /// Importance samples per run.
    pub samples: usize,
    pub eps_div: f64,
    pub eps_cor: f64,
    pub n_runs: usize,
    /// Draw a fresh batch of samples for every class instead of sharing one.
    pub resample_per_class: bool,
    pub bandwidth: Bandwidth,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            samples: 10_000,
            eps_div: 1e-12,
            eps_cor: 5e-4,
            n_runs: 5,
            resample_per_class: false,
            bandwidth: Bandwidth::ScottScaled(DEFAULT_SCOTT_SHRINK),
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::invalid("samples", "must be at least 1"));
        }
        if !(self.eps_div > 0.0 && self.eps_div < self.eps_cor) {
            return Err(Error::invalid(
                "eps_div",
                format!("need 0 < eps_div < eps_cor, got {} and {}", self.eps_div, self.eps_cor),
            ));
        }
        if self.n_runs == 0 {
            return Err(Error::invalid("n_runs", "must be at least 1"));
        }
        Ok(())
    }
}

/// One run of the Monte Carlo estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEstimate {
    pub d_div: f64,
    pub d_cor: f64,
    /// Fraction of draws with p̂ or q̂ below `eps_div`.
    pub frac_div_region: f64,
    /// Fraction of draws with p̂ and q̂ above `eps_cor`.
    pub frac_cor_region: f64,
    /// Mean kernel bandwidth in standardized units.
    pub mean_bandwidth: f64,
}

/// Per-run record of the full pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineRun {
    pub run: usize,
    pub seed: u64,
    pub d_div: f64,
    pub d_cor: f64,
    pub frac_div_region: f64,
    pub frac_cor_region: f64,
    pub mean_bandwidth: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pair {
    pub d_div: f64,
    pub d_cor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftEstimate {
    pub d_div: f64,
    pub d_cor: f64,
    pub per_run: Vec<PipelineRun>,
    pub mean: Pair,
    pub stderr: Pair,
    /// Some run produced a value above 1.
    pub over_one_flag: bool,
    pub warnings: Vec<String>,
}

impl ShiftEstimate {
    pub fn from_runs(per_run: Vec<PipelineRun>, warnings: Vec<String>) -> Self {
        let div: Vec<f64> = per_run.iter().map(|r| r.d_div).collect();
        let cor: Vec<f64> = per_run.iter().map(|r| r.d_cor).collect();
        let (md, sd) = mean_stderr(&div);
        let (mc, sc) = mean_stderr(&cor);
        let over_one_flag = div.iter().chain(&cor).any(|&v| v > 1.0);
        Self {
            d_div: md,
            d_cor: mc,
            per_run,
            mean: Pair { d_div: md, d_cor: mc },
            stderr: Pair { d_div: sd, d_cor: sc },
            over_one_flag,
            warnings,
        }
    }
}

/// Mean and standard error (sample standard deviation over √n; 0 for n = 1).
pub fn mean_stderr(v: &[f64]) -> (f64, f64) {
    let n = v.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = v.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Classes present in the data, checked to occur in both environments with
/// at least two rows each.
fn shared_classes(labels_tr: &[usize], labels_te: &[usize]) -> Result<Vec<usize>> {
    let n = labels_tr.iter().chain(labels_te).max().map_or(0, |&m| m + 1);
    let mut counts = vec![[0usize; 2]; n];
    for &y in labels_tr {
        counts[y][0] += 1;
    }
    for &y in labels_te {
        counts[y][1] += 1;
    }
    let mut classes = Vec::new();
    for (y, c) in counts.iter().enumerate() {
        if c[0] + c[1] == 0 {
            continue;
        }
        for (env, &k) in c.iter().enumerate() {
            if k < 2 {
                return Err(Error::MissingCell {
                    env: env as u8,
                    class: y,
                    need: 2,
                });
            }
        }
        classes.push(y);
    }
    Ok(classes)
}

/// Warnings for environments whose class histogram is not uniform within 2%.
pub fn class_prior_warnings(labels_tr: &[usize], labels_te: &[usize]) -> Vec<String> {
    let n = labels_tr.iter().chain(labels_te).max().map_or(0, |&m| m + 1);
    let present: Vec<usize> = (0..n)
        .filter(|y| labels_tr.contains(y) || labels_te.contains(y))
        .collect();
    let target = 1.0 / present.len().max(1) as f64;
    let mut out = Vec::new();
    for (env, labels) in [(0, labels_tr), (1, labels_te)] {
        for &y in &present {
            let f = labels.iter().filter(|&&l| l == y).count() as f64 / labels.len().max(1) as f64;
            if (f - target).abs() > PRIOR_TOLERANCE {
                out.push(format!(
                    "env {env}: class {y} frequency {f:.4} differs from uniform {target:.4} by more than {PRIOR_TOLERANCE}"
                ));
            }
        }
    }
    out
}

fn rows_of(f: &Array2<f64>, labels: &[usize], y: usize) -> Array2<f64> {
    let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == y).collect();
    f.select(Axis(0), &idx)
}

struct Densities {
    w: KdeModel,
    p: KdeModel,
    q: KdeModel,
    p_y: Vec<KdeModel>,
    q_y: Vec<KdeModel>,
}

/// Log-densities of p̂, q̂ and ŵ (floored) at each draw.
fn env_logpdfs(d: &Densities, z: &ArrayView2<f64>) -> Result<(Array1<f64>, Array1<f64>, Array1<f64>)> {
    let lp = d.p.logpdf_many(z)?;
    let lq = d.q.logpdf_many(z)?;
    let lw = d.w.logpdf_many(z)?.mapv(|v| v.max(LOG_W_FLOOR));
    Ok((lp, lq, lw))
}

fn check_finite(v: &Array1<f64>, what: &str) -> Result<()> {
    // -inf is a legitimate log-density far from every kernel
    if v.iter().any(|x| x.is_nan() || *x == f64::INFINITY) {
        return Err(Error::NonFinite {
            what: what.into(),
            step: 0,
        });
    }
    Ok(())
}

/// One run of the importance-sampling estimator on extracted features.
pub fn estimate(
    f_tr: &ArrayView2<f64>,
    f_te: &ArrayView2<f64>,
    labels_tr: &[usize],
    labels_te: &[usize],
    cfg: &EstimatorConfig,
    rng: &mut Rng,
) -> Result<RunEstimate> {
    cfg.validate()?;
    if f_tr.ncols() != f_te.ncols() {
        return Err(Error::DimensionMismatch {
            expected: f_tr.ncols(),
            got: f_te.ncols(),
        });
    }
    if f_tr.nrows() != labels_tr.len() || f_te.nrows() != labels_te.len() {
        return Err(Error::invalid("labels", "one label per feature row required"));
    }
    if f_tr.nrows() < 2 || f_te.nrows() < 2 {
        return Err(Error::invalid(
            "features",
            "each environment needs at least 2 rows",
        ));
    }
    let classes = shared_classes(labels_tr, labels_te)?;

    let pooled = concatenate(Axis(0), &[f_tr.view(), f_te.view()]).expect("widths checked");
    let scaler = Standardizer::fit(&pooled.view())?;
    let pooled = scaler.apply(&pooled.view())?;
    let n_tr = f_tr.nrows();
    let tr = pooled.slice(ndarray::s![..n_tr, ..]).to_owned();
    let te = pooled.slice(ndarray::s![n_tr.., ..]).to_owned();
    // one bandwidth, chosen on the pooled set, keeps the density ratios
    // p̂_y / p̂ and q̂ / p̂ free of bandwidth mismatch
    let w = KdeModel::fit_with(&pooled.view(), cfg.bandwidth)?;
    let kde = |points: Array2<f64>| KdeModel::from_parts(points, w.bandwidth().clone());
    let dens = Densities {
        p: kde(tr.clone()),
        q: kde(te.clone()),
        p_y: classes.iter().map(|&y| kde(rows_of(&tr, labels_tr, y))).collect(),
        q_y: classes.iter().map(|&y| kde(rows_of(&te, labels_te, y))).collect(),
        w,
    };
    let ln_eps_div = cfg.eps_div.ln();
    let ln_eps_cor = cfg.eps_cor.ln();
    let m = cfg.samples;

    // diversity
    let z = dens.w.sample(m, rng)?;
    let (lp, lq, lw) = env_logpdfs(&dens, &z.view())?;
    for (v, what) in [(&lp, "p density"), (&lq, "q density"), (&lw, "pooled density")] {
        check_finite(v, what)?;
    }
    let mut div = 0.0;
    let mut n_div = 0usize;
    let mut n_cor = 0usize;
    for i in 0..m {
        if lp[i] < ln_eps_div || lq[i] < ln_eps_div {
            div += ((lp[i] - lw[i]).exp() - (lq[i] - lw[i]).exp()).abs();
            n_div += 1;
        }
        if lp[i] > ln_eps_cor && lq[i] > ln_eps_cor {
            n_cor += 1;
        }
    }
    let d_div = div / (2.0 * m as f64);

    // correlation
    let mut cor = 0.0;
    for (k, _) in classes.iter().enumerate() {
        let fresh;
        let (zk, lpk, lqk, lwk) = if cfg.resample_per_class {
            let zz = dens.w.sample(m, rng)?;
            let (a, b, c) = env_logpdfs(&dens, &zz.view())?;
            fresh = (zz, a, b, c);
            (&fresh.0, &fresh.1, &fresh.2, &fresh.3)
        } else {
            (&z, &lp, &lq, &lw)
        };
        let accept: Vec<usize> = (0..m)
            .filter(|&i| lpk[i] > ln_eps_cor && lqk[i] > ln_eps_cor)
            .collect();
        if accept.is_empty() {
            continue;
        }
        let za = zk.select(Axis(0), &accept);
        let lpy = dens.p_y[k].logpdf_many(&za.view())?;
        let lqy = dens.q_y[k].logpdf_many(&za.view())?;
        check_finite(&lpy, "class density")?;
        check_finite(&lqy, "class density")?;
        for (j, &i) in accept.iter().enumerate() {
            let half = 0.5 * (lqk[i] - lpk[i]);
            let a = (lpy[j] + half - lwk[i]).exp();
            let b = (lqy[j] - half - lwk[i]).exp();
            cor += (a - b).abs();
        }
    }
    let d_cor = cor / (2.0 * m as f64 * classes.len() as f64);

    Ok(RunEstimate {
        d_div,
        d_cor,
        frac_div_region: n_div as f64 / m as f64,
        frac_cor_region: n_cor as f64 / m as f64,
        mean_bandwidth: dens.w.bandwidth().mean().unwrap_or(f64::NAN),
    })
}

/// Train a discriminator, extract features and estimate the shifts, once
/// per run with seed `base_seed + run`; runs are aggregated by mean and
/// standard error.
pub fn estimate_pipeline(
    ds: &LabeledDataset,
    mlp_cfg: &MlpConfig,
    est_cfg: &EstimatorConfig,
    base_seed: u64,
) -> Result<ShiftEstimate> {
    est_cfg.validate()?;
    mlp_cfg.validate()?;
    if ds.env_indices(0).is_empty() || ds.env_indices(1).is_empty() {
        return Err(Error::invalid("dataset", "both environments must be present"));
    }
    let (_, labels_tr) = ds.env_split(0);
    let (_, labels_te) = ds.env_split(1);
    let warnings = class_prior_warnings(&labels_tr, &labels_te);

    let runs: Vec<Result<PipelineRun>> = (0..est_cfg.n_runs)
        .into_par_iter()
        .map(|run| {
            let seed = base_seed.wrapping_add(run as u64);
            pipeline_run(ds, mlp_cfg, est_cfg, run, seed).map_err(|e| Error::Run {
                run,
                source: Box::new(e),
            })
        })
        .collect();
    let per_run = runs.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(ShiftEstimate::from_runs(per_run, warnings))
}

fn pipeline_run(
    ds: &LabeledDataset,
    mlp_cfg: &MlpConfig,
    est_cfg: &EstimatorConfig,
    run: usize,
    seed: u64,
) -> Result<PipelineRun> {
    let mut rng = Rng::new(seed);
    let model = train(ds, mlp_cfg, &mut rng)?;
    let feats = extract(&model, ds)?;
    let tr_idx = ds.env_indices(0);
    let te_idx = ds.env_indices(1);
    let f_tr = feats.select(Axis(0), &tr_idx);
    let f_te = feats.select(Axis(0), &te_idx);
    let l_tr: Vec<usize> = tr_idx.iter().map(|&i| ds.labels()[i]).collect();
    let l_te: Vec<usize> = te_idx.iter().map(|&i| ds.labels()[i]).collect();
    let est = estimate(&f_tr.view(), &f_te.view(), &l_tr, &l_te, est_cfg, &mut rng)?;
    Ok(PipelineRun {
        run,
        seed,
        d_div: est.d_div,
        d_cor: est.d_cor,
        frac_div_region: est.frac_div_region,
        frac_cor_region: est.frac_cor_region,
        mean_bandwidth: est.mean_bandwidth,
        val_accuracy: model.meta.val_accuracy,
    })
}

/// Mix a base seed with two indices (splitmix64 finalizer).
pub fn derive_seed(base: u64, a: u64, b: u64) -> u64 {
    let mut z = base
        .wrapping_add(a.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(b.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Grid over (rho_tr, rho_te).
    Rho,
    /// Grid over (mu_tr, mu_te).
    Mu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub row: usize,
    pub col: usize,
    /// Training-environment value of the swept parameter.
    pub tr: f64,
    /// Test-environment value of the swept parameter.
    pub te: f64,
    pub estimate: ShiftEstimate,
}

/// Colored-digit spec for one sweep cell.
pub fn sweep_cell_spec(base: &ColoredSpec, axis: SweepAxis, tr: f64, te: f64) -> ColoredSpec {
    let mut s = base.clone();
    match axis {
        SweepAxis::Rho => {
            s.rho_tr = tr;
            s.rho_te = te;
        }
        SweepAxis::Mu => {
            s.mu_tr = tr;
            s.mu_te = te;
        }
    }
    s
}

/// One pipeline estimate for every (tr, te) pair of `values × values`.
/// Cell `(r, c)` uses training value `values[r]` and test value `values[c]`.
pub fn sweep(
    base: &ColoredSpec,
    axis: SweepAxis,
    values: &[f64],
    mnist: Option<&LabeledDataset>,
    mlp_cfg: &MlpConfig,
    est_cfg: &EstimatorConfig,
    seed: u64,
) -> Result<Vec<SweepCell>> {
    if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::invalid("sweep values", format!("{v} not in [0, 1]")));
    }
    let cells: Vec<(usize, usize)> = (0..values.len())
        .flat_map(|r| (0..values.len()).map(move |c| (r, c)))
        .collect();
    cells
        .into_par_iter()
        .enumerate()
        .map(|(k, (r, c))| {
            let spec = sweep_cell_spec(base, axis, values[r], values[c]);
            let mut data_rng = Rng::new(derive_seed(seed, k as u64, 0));
            let ds = gen_colored(&spec, mnist, &mut data_rng)?;
            let cfg = MlpConfig {
                in_dim: ds.n_dims(),
                n_classes: ds.n_classes(),
                ..mlp_cfg.clone()
            };
            let estimate = estimate_pipeline(&ds, &cfg, est_cfg, derive_seed(seed, k as u64, 1))?;
            Ok(SweepCell {
                row: r,
                col: c,
                tr: values[r],
                te: values[c],
                estimate,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{latent_spec_a, Support};
    use approx::assert_abs_diff_eq;

    #[test]
    fn oracle_identity_is_zero() {
        let s = LatentSpec::new(
            Support::Discrete(3),
            vec![0.2, 0.3, 0.5],
            vec![0.2, 0.3, 0.5],
            vec![vec![0.3, 0.7], vec![0.5, 0.5], vec![0.9, 0.1]],
            vec![vec![0.3, 0.7], vec![0.5, 0.5], vec![0.9, 0.1]],
        )
        .unwrap();
        assert_eq!(oracle_shift(&s), (0.0, 0.0));
    }

    #[test]
    fn oracle_spec_a() {
        let (d, c) = oracle_shift(&latent_spec_a());
        assert_abs_diff_eq!(d, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(c, 0.4, epsilon = 1e-12);
    }

    #[test]
    fn mean_stderr_conventions() {
        assert_eq!(mean_stderr(&[0.3]), (0.3, 0.0));
        let (m, s) = mean_stderr(&[1.0, 2.0, 3.0, 4.0]);
        assert_abs_diff_eq!(m, 2.5, epsilon = 1e-15);
        // sample std = sqrt(5/3), stderr = that / 2
        assert_abs_diff_eq!(s, (5.0f64 / 3.0).sqrt() / 2.0, epsilon = 1e-15);
    }

    #[test]
    fn estimate_flags_over_one() {
        let run = |d_div| PipelineRun {
            run: 0,
            seed: 0,
            d_div,
            d_cor: 0.1,
            frac_div_region: 0.0,
            frac_cor_region: 0.0,
            mean_bandwidth: 0.3,
            val_accuracy: 0.5,
        };
        let e = ShiftEstimate::from_runs(vec![run(0.5), run(1.2)], vec![]);
        assert!(e.over_one_flag);
        assert_abs_diff_eq!(e.d_div, 0.85, epsilon = 1e-12);
        let e = ShiftEstimate::from_runs(vec![run(0.5)], vec![]);
        assert!(!e.over_one_flag);
    }

    #[test]
    fn config_validation() {
        EstimatorConfig::default().validate().unwrap();
        let bad = EstimatorConfig {
            eps_div: 1e-3,
            eps_cor: 1e-4,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = EstimatorConfig {
            samples: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn prior_warning() {
        assert!(class_prior_warnings(&[0, 1, 0, 1], &[1, 0, 1, 0]).is_empty());
        let w = class_prior_warnings(&[0, 0, 0, 1], &[0, 1, 0, 1]);
        assert_eq!(w.len(), 2);
        assert!(w[0].starts_with("env 0"));
    }

    #[test]
    fn missing_class_is_error() {
        let f = Array2::zeros((4, 1));
        let r = estimate(
            &f.view(),
            &f.view(),
            &[0, 0, 1, 1],
            &[0, 0, 0, 0],
            &EstimatorConfig::default(),
            &mut Rng::new(0),
        );
        assert!(matches!(r, Err(Error::MissingCell { env: 1, class: 1, .. })));
    }

    #[test]
    fn seeds_are_distinct() {
        let mut seen = std::collections::HashSet::new();
        for a in 0..30 {
            for b in 0..3 {
                assert!(seen.insert(derive_seed(17, a, b)));
            }
        }
    }
}
