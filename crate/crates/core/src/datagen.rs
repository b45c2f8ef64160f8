//! Synthetic two-environment data.
//!
//! Two families:
//!
//! * Colored digits ([`ColoredSpec`], [`gen_colored`]): binary digit labels
//!   painted red or green with an environment-specific flip probability, and
//!   optional blue intensity drawn per image from a truncated Gaussian.
//! * Explicit latent distributions ([`LatentSpec`], [`gen_latent`]): a finite
//!   support with per-environment marginals and label conditionals, for which
//!   the shift components are known exactly.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Seed for the synthetic digit prototypes. Fixed so that every dataset
/// (and every environment) shares the same ten "digits".
const PROTOTYPE_SEED: u64 = 0x0d16_17a1_5eed;
const PROTOTYPE_NOISE: f64 = 0.1;
const PROTOTYPE_INK: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColoredSpec {
    /// Probability that the color disagrees with the label in env 0.
    pub rho_tr: f64,
    /// Probability that the color disagrees with the label in env 1.
    pub rho_te: f64,
    pub mu_tr: f64,
    pub mu_te: f64,
    pub sigma_tr: f64,
    pub sigma_te: f64,
    pub label_noise: f64,
    pub n_per_env: usize,
    #[serde(default)]
    pub use_real_mnist: bool,
    #[serde(default = "default_side")]
    pub image_side: usize,
}

fn default_side() -> usize {
    14
}

impl ColoredSpec {
    /// Red/green only, no label noise, 2,000 images per environment.
    pub fn rho(rho_tr: f64, rho_te: f64) -> Self {
        Self {
            rho_tr,
            rho_te,
            mu_tr: 0.0,
            mu_te: 0.0,
            sigma_tr: 0.0,
            sigma_te: 0.0,
            label_noise: 0.0,
            n_per_env: 2000,
            use_real_mnist: false,
            image_side: default_side(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = [
            ("rho_tr", self.rho_tr),
            ("rho_te", self.rho_te),
            ("mu_tr", self.mu_tr),
            ("mu_te", self.mu_te),
            ("label_noise", self.label_noise),
        ];
        for (name, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(name, format!("{v} not in [0, 1]")));
            }
        }
        for (name, v) in [("sigma_tr", self.sigma_tr), ("sigma_te", self.sigma_te)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(name, format!("{v} must be finite and >= 0")));
            }
        }
        if self.n_per_env < 2 {
            return Err(Error::invalid("n_per_env", "must be at least 2"));
        }
        if self.image_side == 0 {
            return Err(Error::invalid("image_side", "must be positive"));
        }
        Ok(())
    }

    pub fn n_dims(&self) -> usize {
        3 * self.image_side * self.image_side
    }
}

/// The single-training-environment setting: flip probability 0.1 in
/// training and 0.9 in test, 25% label noise, no blue.
pub fn irm_colored_default() -> ColoredSpec {
    ColoredSpec {
        label_noise: 0.25,
        ..ColoredSpec::rho(0.1, 0.9)
    }
}

/// Blue-shifted variant: same flip probability in both environments, blue
/// mean 0 in training and 1 in test.
pub fn blue_shift_default() -> ColoredSpec {
    ColoredSpec {
        mu_tr: 0.0,
        mu_te: 1.0,
        sigma_tr: 0.1,
        sigma_te: 0.1,
        label_noise: 0.25,
        ..ColoredSpec::rho(0.1, 0.1)
    }
}

/// Draw from Normal(mu, sigma) truncated to [0, 1] by rejection.
pub fn truncated_normal(mu: f64, sigma: f64, rng: &mut Rng) -> f64 {
    if sigma == 0.0 {
        return mu.clamp(0.0, 1.0);
    }
    loop {
        let v = mu + sigma * rng.normal();
        if (0.0..=1.0).contains(&v) {
            return v;
        }
    }
}

/// Ten fixed grayscale prototypes of `side × side` pixels.
pub fn digit_prototypes(side: usize) -> Vec<Vec<f64>> {
    let mut rng = Rng::new(PROTOTYPE_SEED ^ side as u64);
    (0..10)
        .map(|_| {
            (0..side * side)
                .map(|_| {
                    if rng.bernoulli(PROTOTYPE_INK) {
                        rng.uniform_range(0.6, 1.0)
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect()
}

/// Block-average a square grayscale image down to `side × side`.
fn downsample(img: &[f64], side: usize) -> Result<Vec<f64>> {
    let src = (img.len() as f64).sqrt().round() as usize;
    if src * src != img.len() || side == 0 || !src.is_multiple_of(side) {
        return Err(Error::invalid(
            "image_side",
            format!("cannot resample a {}-pixel image to side {side}", img.len()),
        ));
    }
    let k = src / side;
    let mut out = vec![0.0; side * side];
    for r in 0..src {
        for c in 0..src {
            out[(r / k) * side + c / k] += img[r * src + c];
        }
    }
    let norm = (k * k) as f64;
    out.iter_mut().for_each(|v| *v /= norm);
    Ok(out)
}

/// Paint one grayscale digit. Color 0 is red, 1 is green. The blue amount
/// at each pixel is min(v, blue) and the active channel loses the same
/// amount, i.e. keeps max(0, v - blue).
fn paint(gray: &[f64], color: usize, blue: f64, out: &mut [f64]) {
    let n = gray.len();
    out.fill(0.0);
    for (i, &v) in gray.iter().enumerate() {
        out[color * n + i] = (v - blue).max(0.0);
        out[2 * n + i] = v.min(blue);
    }
}

/// Generate `2 · n_per_env` colored digits, environment 0 first.
///
/// With `use_real_mnist` set, `mnist` must hold grayscale digits (as read by
/// [`crate::data::load_idx`]) with at least `2 · n_per_env` rows; otherwise
/// the fixed synthetic prototypes plus Gaussian pixel noise stand in.
pub fn gen_colored(
    spec: &ColoredSpec,
    mnist: Option<&LabeledDataset>,
    rng: &mut Rng,
) -> Result<LabeledDataset> {
    spec.validate()?;
    let side = spec.image_side;
    let pixels = side * side;
    let n = 2 * spec.n_per_env;

    let real_order = match (spec.use_real_mnist, mnist) {
        (true, None) => {
            return Err(Error::invalid(
                "use_real_mnist",
                "set but no IDX images were provided",
            ))
        }
        (true, Some(ds)) => {
            if ds.n_rows() < n {
                return Err(Error::invalid(
                    "n_per_env",
                    format!("need {n} MNIST images, only {} available", ds.n_rows()),
                ));
            }
            let mut idx: Vec<usize> = (0..ds.n_rows()).collect();
            rng.shuffle(&mut idx);
            idx.truncate(n);
            Some((ds, idx))
        }
        (false, _) => None,
    };
    let prototypes = digit_prototypes(side);

    let mut features = Array2::zeros((n, 3 * pixels));
    let mut labels = Vec::with_capacity(n);
    let mut envs = Vec::with_capacity(n);
    let mut gray = vec![0.0; pixels];
    let mut row = vec![0.0; 3 * pixels];
    for i in 0..n {
        let env = (i >= spec.n_per_env) as u8;
        let (rho, mu, sigma) = if env == 0 {
            (spec.rho_tr, spec.mu_tr, spec.sigma_tr)
        } else {
            (spec.rho_te, spec.mu_te, spec.sigma_te)
        };
        let digit = match &real_order {
            Some((ds, idx)) => {
                let r = idx[i];
                gray = downsample(ds.features().row(r).as_slice().expect("contiguous"), side)?;
                ds.labels()[r]
            }
            None => {
                let d = rng.below(10);
                for (g, &p) in gray.iter_mut().zip(&prototypes[d]) {
                    *g = (p + PROTOTYPE_NOISE * rng.normal()).clamp(0.0, 1.0);
                }
                d
            }
        };
        let mut y = usize::from(digit >= 5);
        if rng.bernoulli(spec.label_noise) {
            y ^= 1;
        }
        let color = if rng.bernoulli(rho) { y ^ 1 } else { y };
        let blue = truncated_normal(mu, sigma, rng);
        paint(&gray, color, blue, &mut row);
        features
            .row_mut(i)
            .iter_mut()
            .zip(&row)
            .for_each(|(f, &v)| *f = v);
        labels.push(y);
        envs.push(env);
    }
    LabeledDataset::new(features, labels, envs, 2)
}

/// Read back which channel carries the digit: 0 red, 1 green, or `None`
/// when both are blank (e.g. a fully blue digit).
pub fn dominant_color(row: &[f64]) -> Option<usize> {
    let n = row.len() / 3;
    let red: f64 = row[..n].iter().sum();
    let green: f64 = row[n..2 * n].iter().sum();
    if red == 0.0 && green == 0.0 {
        None
    } else {
        Some(usize::from(green > red))
    }
}

/// How latent points are rendered as features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Support {
    /// `n` discrete atoms, emitted as one-hot vectors.
    Discrete(usize),
    /// Points on the real line, emitted as a single coordinate.
    Grid(Vec<f64>),
}

impl Support {
    pub fn len(&self) -> usize {
        match self {
            Support::Discrete(n) => *n,
            Support::Grid(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_dims(&self) -> usize {
        match self {
            Support::Discrete(n) => *n,
            Support::Grid(_) => 1,
        }
    }
}

const PROB_TOL: f64 = 1e-12;

/// Two environments over a finite latent support, with label conditionals.
/// Construction enforces that both environments share the same class
/// marginal (no label shift).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentSpec {
    support: Support,
    p_z: Vec<f64>,
    q_z: Vec<f64>,
    p_y_given_z: Vec<Vec<f64>>,
    q_y_given_z: Vec<Vec<f64>>,
    /// Standard deviation of Gaussian noise added to emitted features.
    #[serde(default)]
    noise_std: f64,
}

impl LatentSpec {
    pub fn new(
        support: Support,
        p_z: Vec<f64>,
        q_z: Vec<f64>,
        p_y_given_z: Vec<Vec<f64>>,
        q_y_given_z: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let spec = Self {
            support,
            p_z,
            q_z,
            p_y_given_z,
            q_y_given_z,
            noise_std: 0.0,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_noise(mut self, noise_std: f64) -> Result<Self> {
        if !(noise_std >= 0.0 && noise_std.is_finite()) {
            return Err(Error::invalid("noise_std", format!("{noise_std} must be >= 0")));
        }
        self.noise_std = noise_std;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.support.len();
        if k == 0 {
            return Err(Error::invalid("support", "empty"));
        }
        for (name, v) in [("p_z", &self.p_z), ("q_z", &self.q_z)] {
            check_distribution(name, v, k)?;
        }
        let n_classes = self.p_y_given_z.first().map_or(0, Vec::len);
        if n_classes == 0 {
            return Err(Error::invalid("p_y_given_z", "no classes"));
        }
        for (name, table) in [("p_y_given_z", &self.p_y_given_z), ("q_y_given_z", &self.q_y_given_z)] {
            if table.len() != k {
                return Err(Error::invalid(name, format!("{} rows for {k} atoms", table.len())));
            }
            for (z, row) in table.iter().enumerate() {
                check_distribution(&format!("{name}[{z}]"), row, n_classes)?;
            }
        }
        let (pm, qm) = (self.class_marginal_p(), self.class_marginal_q());
        for (y, (a, b)) in pm.iter().zip(&qm).enumerate() {
            if (a - b).abs() > PROB_TOL {
                return Err(Error::invalid(
                    "class marginal",
                    format!("label shift at class {y}: p(y)={a}, q(y)={b}"),
                ));
            }
        }
        if self.noise_std.is_nan() || self.noise_std < 0.0 {
            return Err(Error::invalid("noise_std", "must be >= 0"));
        }
        Ok(())
    }

    pub fn support(&self) -> &Support {
        &self.support
    }
    pub fn p_z(&self) -> &[f64] {
        &self.p_z
    }
    pub fn q_z(&self) -> &[f64] {
        &self.q_z
    }
    pub fn p_y_given_z(&self) -> &[Vec<f64>] {
        &self.p_y_given_z
    }
    pub fn q_y_given_z(&self) -> &[Vec<f64>] {
        &self.q_y_given_z
    }
    pub fn noise_std(&self) -> f64 {
        self.noise_std
    }
    pub fn n_classes(&self) -> usize {
        self.p_y_given_z[0].len()
    }

    pub fn class_marginal_p(&self) -> Vec<f64> {
        marginal(&self.p_z, &self.p_y_given_z)
    }

    pub fn class_marginal_q(&self) -> Vec<f64> {
        marginal(&self.q_z, &self.q_y_given_z)
    }

    /// Swap the roles of the two environments.
    pub fn swapped(&self) -> Self {
        Self {
            support: self.support.clone(),
            p_z: self.q_z.clone(),
            q_z: self.p_z.clone(),
            p_y_given_z: self.q_y_given_z.clone(),
            q_y_given_z: self.p_y_given_z.clone(),
            noise_std: self.noise_std,
        }
    }

    /// Total variation between the joint (z, y) distributions.
    pub fn joint_total_variation(&self) -> f64 {
        let mut tv = 0.0;
        for z in 0..self.support.len() {
            for y in 0..self.n_classes() {
                let a = self.p_z[z] * self.p_y_given_z[z][y];
                let b = self.q_z[z] * self.q_y_given_z[z][y];
                tv += (a - b).abs();
            }
        }
        0.5 * tv
    }
}

fn check_distribution(name: &str, v: &[f64], len: usize) -> Result<()> {
    if v.len() != len {
        return Err(Error::invalid(name, format!("length {} (expected {len})", v.len())));
    }
    if v.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
        return Err(Error::invalid(name, "entries must lie in [0, 1]"));
    }
    let s: f64 = v.iter().sum();
    if (s - 1.0).abs() > PROB_TOL {
        return Err(Error::invalid(name, format!("sums to {s}, not 1")));
    }
    Ok(())
}

fn marginal(pz: &[f64], cond: &[Vec<f64>]) -> Vec<f64> {
    let mut m = vec![0.0; cond[0].len()];
    for (w, row) in pz.iter().zip(cond) {
        for (acc, &c) in m.iter_mut().zip(row) {
            *acc += w * c;
        }
    }
    m
}

/// Three atoms {a, b, c}: `a` shared with opposite label conditionals,
/// `b` only in env 0, `c` only in env 1. Exact shifts are (0.5, 0.4).
pub fn latent_spec_a() -> LatentSpec {
    LatentSpec::new(
        Support::Discrete(3),
        vec![0.5, 0.5, 0.0],
        vec![0.5, 0.0, 0.5],
        vec![vec![0.9, 0.1], vec![0.1, 0.9], vec![0.5, 0.5]],
        vec![vec![0.1, 0.9], vec![0.5, 0.5], vec![0.9, 0.1]],
    )
    .expect("spec A is valid")
}

/// Sample `n_per_env` rows from each environment, env 0 first.
pub fn gen_latent(spec: &LatentSpec, n_per_env: usize, rng: &mut Rng) -> Result<LabeledDataset> {
    spec.validate()?;
    if n_per_env == 0 {
        return Err(Error::invalid("n_per_env", "must be positive"));
    }
    let d = spec.support.n_dims();
    let n = 2 * n_per_env;
    let mut features = Array2::zeros((n, d));
    let mut labels = Vec::with_capacity(n);
    let mut envs = Vec::with_capacity(n);
    for i in 0..n {
        let env = (i >= n_per_env) as u8;
        let (pz, cond) = if env == 0 {
            (&spec.p_z, &spec.p_y_given_z)
        } else {
            (&spec.q_z, &spec.q_y_given_z)
        };
        let z = rng.categorical(pz);
        let y = rng.categorical(&cond[z]);
        let mut row = features.row_mut(i);
        match &spec.support {
            Support::Discrete(_) => row[z] = 1.0,
            Support::Grid(points) => row[0] = points[z],
        }
        if spec.noise_std > 0.0 {
            row.iter_mut().for_each(|v| *v += spec.noise_std * rng.normal());
        }
        labels.push(y);
        envs.push(env);
    }
    LabeledDataset::new(features, labels, envs, spec.n_classes())
}

/// Recover the atom index of each row of a noise-free latent dataset.
pub fn latent_atoms(spec: &LatentSpec, ds: &LabeledDataset) -> Vec<usize> {
    ds.features()
        .rows()
        .into_iter()
        .map(|row| match &spec.support {
            Support::Discrete(_) => row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map_or(0, |(i, _)| i),
            Support::Grid(points) => points
                .iter()
                .enumerate()
                .min_by(|a, b| (a.1 - row[0]).abs().total_cmp(&(b.1 - row[0]).abs()))
                .map_or(0, |(i, _)| i),
        })
        .collect()
}
