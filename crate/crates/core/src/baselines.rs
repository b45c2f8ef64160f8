//! Single-number two-sample metrics (MMD, EMD, NI) and the side-by-side
//! comparison against the two-dimensional shift estimate.

use std::io::Write;

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::datagen::{blue_shift_default, gen_colored, irm_colored_default, ColoredSpec};
use crate::discriminator::MlpConfig;
use crate::error::{Error, Result};
use crate::estimator::{derive_seed, estimate_pipeline, mean_stderr, EstimatorConfig, ShiftEstimate};
use crate::rng::Rng;

/// Largest subsample the exact matching runs on.
pub const EMD_MAX_SUB: usize = 512;

/// Rows of `f` picked without replacement; all rows, in order, when
/// `n >= f.nrows()`.
fn subsample(f: &ArrayView2<f64>, n: usize, rng: &mut Rng) -> Array2<f64> {
    if n >= f.nrows() {
        return f.to_owned();
    }
    let mut idx: Vec<usize> = (0..f.nrows()).collect();
    rng.shuffle(&mut idx);
    idx.truncate(n);
    idx.sort_unstable();
    f.select(Axis(0), &idx)
}

fn sq_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Sum after sorting, so the result does not depend on visiting order.
fn sorted_sum(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v.iter().sum()
}

fn check_pair(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Result<()> {
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::invalid("features", "both sets must be nonempty"));
    }
    if a.ncols() != b.ncols() {
        return Err(Error::DimensionMismatch {
            expected: a.ncols(),
            got: b.ncols(),
        });
    }
    Ok(())
}

/// √max(0, MMD²) with the unbiased quadratic-time estimator and a Gaussian
/// kernel whose width is the median pairwise distance of the pooled
/// subsample. Exactly symmetric when neither set is subsampled.
pub fn mmd(a: &ArrayView2<f64>, b: &ArrayView2<f64>, n_sub: usize, rng: &mut Rng) -> Result<f64> {
    if n_sub < 2 {
        return Err(Error::invalid("n_sub", "must be at least 2"));
    }
    check_pair(a, b)?;
    let x = subsample(a, n_sub, rng);
    let y = subsample(b, n_sub, rng);
    if x.nrows() < 2 || y.nrows() < 2 {
        return Err(Error::invalid("features", "MMD needs at least 2 rows per set"));
    }
    let pooled = concatenate(Axis(0), &[x.view(), y.view()]).expect("widths checked");
    let mut d2: Vec<f64> = Vec::with_capacity(pooled.nrows() * (pooled.nrows() - 1) / 2);
    for i in 0..pooled.nrows() {
        for j in i + 1..pooled.nrows() {
            d2.push(sq_dist(pooled.row(i), pooled.row(j)));
        }
    }
    let mid = d2.len() / 2;
    let (_, median_d2, _) = d2.select_nth_unstable_by(mid, f64::total_cmp);
    let median_d2 = *median_d2;
    if median_d2 == 0.0 {
        // more than half the pairs coincide
        return Ok(0.0);
    }
    let inv = 1.0 / (2.0 * median_d2);
    let k = |p: ndarray::ArrayView1<f64>, q: ndarray::ArrayView1<f64>| (-sq_dist(p, q) * inv).exp();
    let within = |s: &Array2<f64>| {
        let n = s.nrows();
        let mut v = Vec::with_capacity(n * (n - 1) / 2);
        for i in 0..n {
            for j in i + 1..n {
                v.push(k(s.row(i), s.row(j)));
            }
        }
        2.0 * sorted_sum(v) / (n * (n - 1)) as f64
    };
    let mut cross = Vec::with_capacity(x.nrows() * y.nrows());
    for xi in x.rows() {
        for yj in y.rows() {
            cross.push(k(xi, yj));
        }
    }
    let cross = sorted_sum(cross) / (x.nrows() * y.nrows()) as f64;
    let mmd2 = within(&x) + within(&y) - 2.0 * cross;
    Ok(mmd2.max(0.0).sqrt())
}

/// Minimum-cost perfect matching on a square cost matrix (Hungarian method
/// with potentials, O(n³)). Returns `assign[row] = column`.
pub fn min_cost_matching(cost: &Array2<f64>) -> Vec<usize> {
    let n = cost.nrows();
    assert_eq!(n, cost.ncols(), "square cost matrix");
    // 1-based arrays; column 0 is a sentinel
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut col0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[col0] = true;
            let r = owner[col0];
            let mut delta = f64::INFINITY;
            let mut col1 = 0;
            for c in 1..=n {
                if !used[c] {
                    let cur = cost[[r - 1, c - 1]] - u[r] - v[c];
                    if cur < minv[c] {
                        minv[c] = cur;
                        way[c] = col0;
                    }
                    if minv[c] < delta {
                        delta = minv[c];
                        col1 = c;
                    }
                }
            }
            for c in 0..=n {
                if used[c] {
                    u[owner[c]] += delta;
                    v[c] -= delta;
                } else {
                    minv[c] -= delta;
                }
            }
            col0 = col1;
            if owner[col0] == 0 {
                break;
            }
        }
        loop {
            let prev = way[col0];
            owner[col0] = owner[prev];
            col0 = prev;
            if col0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for c in 1..=n {
        if owner[c] > 0 {
            assign[owner[c] - 1] = c - 1;
        }
    }
    assign
}

/// Mean Euclidean cost of the optimal matching between two equal-size sets.
pub fn matched_cost(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> f64 {
    let n = a.nrows();
    let cost = Array2::from_shape_fn((n, n), |(i, j)| sq_dist(a.row(i), b.row(j)).sqrt());
    let assign = min_cost_matching(&cost);
    sorted_sum((0..n).map(|i| cost[[i, assign[i]]]).collect()) / n as f64
}

/// 1-Wasserstein distance between equal-size subsamples (at most
/// [`EMD_MAX_SUB`] rows each) under Euclidean cost, divided by √d.
pub fn emd(a: &ArrayView2<f64>, b: &ArrayView2<f64>, n_sub: usize, rng: &mut Rng) -> Result<f64> {
    if n_sub < 1 {
        return Err(Error::invalid("n_sub", "must be at least 1"));
    }
    check_pair(a, b)?;
    let n = n_sub.min(a.nrows()).min(b.nrows()).min(EMD_MAX_SUB);
    let x = subsample(a, n, rng);
    let y = subsample(b, n, rng);
    Ok(matched_cost(&x.view(), &y.view()) / (a.ncols() as f64).sqrt())
}

/// Class-conditional standardized mean difference, averaged over classes.
/// Dimensions that are constant over the pooled data are skipped.
pub fn ni(ds: &LabeledDataset) -> Result<f64> {
    let f = ds.features();
    let pooled_std = f.std_axis(Axis(0), 0.0);
    let varying: Vec<bool> = f
        .columns()
        .into_iter()
        .map(|c| c.iter().any(|&v| v != c[0]))
        .collect();
    let mut per_class = Vec::new();
    for y in 0..ds.n_classes() {
        let mut means = Vec::with_capacity(2);
        for env in 0..2u8 {
            let idx: Vec<usize> = (0..ds.n_rows())
                .filter(|&i| ds.labels()[i] == y && ds.envs()[i] == env)
                .collect();
            means.push((idx.len(), f.select(Axis(0), &idx).mean_axis(Axis(0))));
        }
        match (&means[0], &means[1]) {
            ((0, _), (0, _)) => continue,
            ((_, Some(a)), (_, Some(b))) => {
                let s: f64 = (0..f.ncols())
                    .filter(|&j| varying[j])
                    .map(|j| ((a[j] - b[j]) / pooled_std[j]).powi(2))
                    .sum();
                per_class.push(s.sqrt());
            }
            _ => {
                let env = if means[0].0 == 0 { 0 } else { 1 };
                return Err(Error::MissingCell { env, class: y, need: 1 });
            }
        }
    }
    if per_class.is_empty() {
        return Err(Error::invalid("dataset", "no classes present"));
    }
    Ok(per_class.iter().sum::<f64>() / per_class.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub stderr: f64,
    pub per_run: Vec<f64>,
}

impl Stat {
    pub fn from_runs(per_run: Vec<f64>) -> Self {
        let (mean, stderr) = mean_stderr(&per_run);
        Self { mean, stderr, per_run }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub emd: Stat,
    pub mmd: Stat,
    pub ni: Stat,
    /// Rows per environment used by EMD and MMD.
    pub emd_rows: usize,
    pub mmd_rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareConfig {
    pub runs: usize,
    pub mmd_sub: usize,
    pub emd_sub: usize,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            runs: 5,
            mmd_sub: 500,
            emd_sub: EMD_MAX_SUB,
        }
    }
}

/// One row of a comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub label: String,
    pub spec: ColoredSpec,
    pub metrics: MetricReport,
    pub shift: ShiftEstimate,
    /// Verdict per column (emd, mmd, ni, div, cor) against the no-shift row.
    pub verdicts: Vec<String>,
}

/// The five red/green rows (ρ_tr = 0.1, ρ_te from 0.9 down to 0.1) and the
/// blue row.
pub fn default_compare_specs() -> Vec<(String, ColoredSpec)> {
    let mut rows: Vec<(String, ColoredSpec)> = [0.9, 0.7, 0.5, 0.3, 0.1]
        .iter()
        .map(|&te| {
            let mut s = irm_colored_default();
            s.rho_te = te;
            (format!("rho_te={te}"), s)
        })
        .collect();
    rows.push(("blue".into(), blue_shift_default()));
    rows
}

fn is_no_shift(s: &ColoredSpec) -> bool {
    s.rho_tr == s.rho_te && s.mu_tr == s.mu_te && s.sigma_tr == s.sigma_te
}

/// Baselines on the raw features, repeated `runs` times with fresh
/// subsamples.
pub fn metric_report(ds: &LabeledDataset, cfg: &CompareConfig, seed: u64) -> Result<MetricReport> {
    let (tr, _) = ds.env_split(0);
    let (te, _) = ds.env_split(1);
    let ni_value = ni(ds)?;
    let mut emds = Vec::with_capacity(cfg.runs);
    let mut mmds = Vec::with_capacity(cfg.runs);
    for r in 0..cfg.runs {
        let mut rng = Rng::new(derive_seed(seed, r as u64, 0));
        emds.push(emd(&tr.view(), &te.view(), cfg.emd_sub, &mut rng)?);
        mmds.push(mmd(&tr.view(), &te.view(), cfg.mmd_sub, &mut rng)?);
    }
    Ok(MetricReport {
        emd: Stat::from_runs(emds),
        mmd: Stat::from_runs(mmds),
        // NI uses every row, so runs repeat the same value
        ni: Stat::from_runs(vec![ni_value; cfg.runs]),
        emd_rows: cfg.emd_sub.min(tr.nrows()).min(te.nrows()).min(EMD_MAX_SUB),
        mmd_rows: cfg.mmd_sub.min(tr.nrows()).min(te.nrows()),
    })
}

/// "sensitive" when `value` differs from `reference` by more than three
/// combined standard errors (and by more than 1e-9).
pub fn verdict(value: (f64, f64), reference: (f64, f64)) -> &'static str {
    let band = 3.0 * (value.1.powi(2) + reference.1.powi(2)).sqrt();
    if (value.0 - reference.0).abs() > band.max(1e-9) {
        "sensitive"
    } else {
        "insensitive"
    }
}

/// Baselines and shift estimate for every spec. Row `i` uses data seed
/// `derive_seed(seed, i, 0)`; its pipeline runs start at
/// `derive_seed(seed, i, 1)`.
pub fn compare_table(
    specs: &[(String, ColoredSpec)],
    mnist: Option<&LabeledDataset>,
    mlp_cfg: &MlpConfig,
    est_cfg: &EstimatorConfig,
    cfg: &CompareConfig,
    seed: u64,
) -> Result<Vec<CompareRow>> {
    if cfg.runs == 0 {
        return Err(Error::invalid("runs", "must be at least 1"));
    }
    let est_cfg = EstimatorConfig {
        n_runs: cfg.runs,
        ..est_cfg.clone()
    };
    let mut rows: Vec<CompareRow> = specs
        .par_iter()
        .enumerate()
        .map(|(i, (label, spec))| {
            let mut data_rng = Rng::new(derive_seed(seed, i as u64, 0));
            let ds = gen_colored(spec, mnist, &mut data_rng)?;
            let mlp = MlpConfig {
                in_dim: ds.n_dims(),
                n_classes: ds.n_classes(),
                ..mlp_cfg.clone()
            };
            let metrics = metric_report(&ds, cfg, derive_seed(seed, i as u64, 2))?;
            let shift = estimate_pipeline(&ds, &mlp, &est_cfg, derive_seed(seed, i as u64, 1))?;
            Ok(CompareRow {
                label: label.clone(),
                spec: spec.clone(),
                metrics,
                shift,
                verdicts: Vec::new(),
            })
        })
        .collect::<Result<_>>()?;
    if let Some(r) = rows.iter().position(|row| is_no_shift(&row.spec)) {
        let cols = |row: &CompareRow| {
            let m = &row.metrics;
            let s = &row.shift;
            [
                (m.emd.mean, m.emd.stderr),
                (m.mmd.mean, m.mmd.stderr),
                (m.ni.mean, m.ni.stderr),
                (s.mean.d_div, s.stderr.d_div),
                (s.mean.d_cor, s.stderr.d_cor),
            ]
        };
        let reference = cols(&rows[r]);
        for row in &mut rows {
            row.verdicts = cols(row)
                .iter()
                .zip(&reference)
                .map(|(&v, &r)| verdict(v, r).to_string())
                .collect();
        }
    }
    Ok(rows)
}

pub const COMPARE_HEADER: &str = "label,rho_tr,rho_te,mu_tr,mu_te,sigma_tr,sigma_te,\
emd_mean,emd_stderr,mmd_mean,mmd_stderr,ni_mean,ni_stderr,\
div_mean,div_stderr,cor_mean,cor_stderr,\
emd_verdict,mmd_verdict,ni_verdict,div_verdict,cor_verdict";

pub fn write_compare_csv(rows: &[CompareRow], w: &mut impl Write) -> std::io::Result<()> {
    writeln!(w, "{COMPARE_HEADER}")?;
    for row in rows {
        let s = &row.spec;
        let m = &row.metrics;
        let e = &row.shift;
        let mut verdicts = row.verdicts.clone();
        verdicts.resize(5, "n/a".into());
        writeln!(
            w,
            "{},{},{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            row.label,
            s.rho_tr,
            s.rho_te,
            s.mu_tr,
            s.mu_te,
            s.sigma_tr,
            s.sigma_te,
            m.emd.mean,
            m.emd.stderr,
            m.mmd.mean,
            m.mmd.stderr,
            m.ni.mean,
            m.ni.stderr,
            e.mean.d_div,
            e.stderr.d_div,
            e.mean.d_cor,
            e.stderr.d_cor,
            verdicts.join(","),
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn gaussian(n: usize, d: usize, shift: f64, rng: &mut Rng) -> Array2<f64> {
        Array2::from_shape_fn((n, d), |_| rng.normal() + shift)
    }

    fn brute_force(cost: &Array2<f64>) -> f64 {
        fn go(cost: &Array2<f64>, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
            let n = cost.nrows();
            if row == n {
                *best = best.min(acc);
                return;
            }
            for c in 0..n {
                if !used[c] {
                    used[c] = true;
                    go(cost, row + 1, used, acc + cost[[row, c]], best);
                    used[c] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        go(cost, 0, &mut vec![false; cost.nrows()], 0.0, &mut best);
        best
    }

    #[test]
    fn matching_agrees_with_brute_force() {
        let mut rng = Rng::new(5);
        for _ in 0..100 {
            let a = gaussian(6, 3, 0.0, &mut rng);
            let b = gaussian(6, 3, 0.5, &mut rng);
            let cost = Array2::from_shape_fn((6, 6), |(i, j)| sq_dist(a.row(i), b.row(j)).sqrt());
            let assign = min_cost_matching(&cost);
            let mut seen = assign.clone();
            seen.sort_unstable();
            assert_eq!(seen, (0..6).collect::<Vec<_>>());
            let total: f64 = (0..6).map(|i| cost[[i, assign[i]]]).sum();
            assert!((total - brute_force(&cost)).abs() < 1e-12);
        }
    }

    #[test]
    fn emd_one_dimensional_shift() {
        let a = array![[0.0], [1.0]];
        let b = array![[3.0], [2.0]];
        let v = emd(&a.view(), &b.view(), 10, &mut Rng::new(0)).unwrap();
        assert!((v - 2.0).abs() < 1e-15);
    }

    #[test]
    fn identity_and_symmetry() {
        let mut rng = Rng::new(9);
        let a = gaussian(40, 4, 0.0, &mut rng);
        let b = gaussian(30, 4, 0.7, &mut rng);
        assert_eq!(mmd(&a.view(), &a.view(), 100, &mut Rng::new(1)).unwrap(), 0.0);
        assert_eq!(emd(&a.view(), &a.view(), 100, &mut Rng::new(1)).unwrap(), 0.0);
        let ab = mmd(&a.view(), &b.view(), 100, &mut Rng::new(1)).unwrap();
        let ba = mmd(&b.view(), &a.view(), 100, &mut Rng::new(1)).unwrap();
        assert_eq!(ab, ba);
        let b40 = gaussian(40, 4, 0.7, &mut rng);
        let ab = emd(&a.view(), &b40.view(), 100, &mut Rng::new(1)).unwrap();
        let ba = emd(&b40.view(), &a.view(), 100, &mut Rng::new(1)).unwrap();
        assert_eq!(ab, ba);
    }

    #[test]
    fn emd_triangle_inequality() {
        let mut rng = Rng::new(11);
        for _ in 0..1000 {
            let a = gaussian(16, 2, 0.0, &mut rng);
            let b = gaussian(16, 2, rng.uniform(), &mut rng);
            let c = gaussian(16, 2, 2.0 * rng.uniform(), &mut rng);
            let d = |x: &Array2<f64>, y: &Array2<f64>| matched_cost(&x.view(), &y.view());
            assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c) + 1e-12);
        }
    }

    #[test]
    fn mmd_null_and_separated() {
        let mut rng = Rng::new(3);
        let a = gaussian(2000, 1, 0.0, &mut rng);
        let b = gaussian(2000, 1, 0.0, &mut rng);
        let v = mmd(&a.view(), &b.view(), 500, &mut rng).unwrap();
        assert!(v < 0.05, "{v}");
        // far apart: the median pooled distance is about the gap g, so the
        // within-set kernel is ≈ 1 and the cross kernel ≈ exp(-g²/2g²)
        let c = gaussian(500, 1, 100.0, &mut rng);
        let v = mmd(&a.view(), &c.view(), 500, &mut rng).unwrap();
        let closed_form = (2.0 * (1.0 - (-0.5f64).exp())).sqrt();
        assert!((v - closed_form).abs() < 0.05, "{v} vs {closed_form}");
    }

    #[test]
    fn argument_errors() {
        let a = array![[0.0], [1.0]];
        let e = Array2::<f64>::zeros((0, 1));
        assert!(mmd(&a.view(), &a.view(), 1, &mut Rng::new(0)).is_err());
        assert!(emd(&a.view(), &a.view(), 0, &mut Rng::new(0)).is_err());
        assert!(emd(&a.view(), &e.view(), 4, &mut Rng::new(0)).is_err());
    }

    fn two_env(rng: &mut Rng, shift: f64, n: usize) -> LabeledDataset {
        let f = Array2::from_shape_fn((2 * n, 3), |(i, _)| {
            rng.normal() + if i >= n { shift } else { 0.0 }
        });
        let labels = (0..2 * n).map(|i| i % 2).collect();
        let envs = (0..2 * n).map(|i| u8::from(i >= n)).collect();
        LabeledDataset::from_rows(f, labels, envs).unwrap()
    }

    #[test]
    fn ni_identity_and_scale() {
        let mut rng = Rng::new(4);
        let ds = two_env(&mut rng, 0.0, 5000);
        assert!(ni(&ds).unwrap() < 0.05);
        let ds = two_env(&mut rng, 0.5, 200);
        let base = ni(&ds).unwrap();
        let scaled = LabeledDataset::from_rows(
            ds.features() * 3.7,
            ds.labels().to_vec(),
            ds.envs().to_vec(),
        )
        .unwrap();
        assert!((ni(&scaled).unwrap() - base).abs() < 1e-9);
    }

    #[test]
    fn ni_missing_class() {
        let f = Array2::zeros((3, 1));
        let ds = LabeledDataset::from_rows(f, vec![0, 1, 0], vec![0, 0, 1]).unwrap();
        assert!(matches!(ni(&ds), Err(Error::MissingCell { env: 1, class: 1, .. })));
    }

    #[test]
    fn verdict_band() {
        assert_eq!(verdict((0.5, 0.01), (0.0, 0.01)), "sensitive");
        assert_eq!(verdict((0.02, 0.01), (0.0, 0.01)), "insensitive");
        assert_eq!(verdict((0.0, 0.0), (0.0, 0.0)), "insensitive");
    }
}
