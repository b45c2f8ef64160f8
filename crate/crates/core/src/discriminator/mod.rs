//! Environment discriminator.
//!
//! A feature extractor `g` and a classifier `h(g(x), y)` are trained jointly
//! to tell which environment an example came from, by minimizing binary
//! cross-entropy with Adam. Every step draws `batch_per_env` examples from
//! each environment with the class chosen uniformly first, so both
//! environments and all classes within each carry equal weight. The model
//! kept is the checkpoint with the best validation accuracy.

mod adam;
mod gradcheck;
mod mlp;

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub use adam::Adam;
pub use gradcheck::{grad_check, grad_check_batch};
pub use mlp::{bce_with_logit, sigmoid, Activation, Dense, Mlp};

use crate::data::{split_train_val, LabeledDataset};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlpConfig {
    pub in_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub feature_dim: usize,
    pub n_classes: usize,
    /// Width of the hidden layer of `h`; 0 makes `h` a single linear layer.
    pub head_hidden: usize,
    pub lr: f64,
    pub iters: usize,
    pub batch_per_env: usize,
    pub activation: Activation,
    /// Fraction of rows kept for training; the rest is validation.
    pub train_frac: f64,
    pub checkpoint_every: usize,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            in_dim: 0,
            hidden_dims: vec![256, 256],
            feature_dim: 8,
            n_classes: 2,
            head_hidden: 64,
            lr: 3e-4,
            iters: 2000,
            batch_per_env: 32,
            activation: Activation::Relu,
            train_frac: 0.9,
            checkpoint_every: 100,
        }
    }
}

impl MlpConfig {
    pub fn for_dataset(ds: &LabeledDataset) -> Self {
        Self {
            in_dim: ds.n_dims(),
            n_classes: ds.n_classes(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 {
            return Err(Error::invalid("in_dim", "must be positive"));
        }
        if self.feature_dim == 0 {
            return Err(Error::invalid("feature_dim", "must be at least 1"));
        }
        if self.n_classes == 0 {
            return Err(Error::invalid("n_classes", "must be at least 1"));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::invalid("hidden_dims", "widths must be positive"));
        }
        if self.iters == 0 {
            return Err(Error::invalid("iters", "must be at least 1"));
        }
        if self.batch_per_env == 0 {
            return Err(Error::invalid("batch_per_env", "must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("lr", "must be positive"));
        }
        if !(self.train_frac > 0.0 && self.train_frac < 1.0) {
            return Err(Error::invalid("train_frac", "must lie in (0, 1)"));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::invalid("checkpoint_every", "must be positive"));
        }
        Ok(())
    }

    pub fn build(&self, rng: &mut Rng) -> Mlp {
        Mlp::new(
            self.in_dim,
            &self.hidden_dims,
            self.feature_dim,
            self.n_classes,
            self.head_hidden,
            self.activation,
            rng,
        )
    }
}

/// Training record kept alongside the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    /// Accuracy of the returned checkpoint on the validation rows.
    pub val_accuracy: f64,
    /// Step at which the returned checkpoint was taken.
    pub best_step: usize,
    /// Validation accuracy at every checkpoint, as (step, accuracy).
    pub checkpoints: Vec<(usize, f64)>,
    /// Mini-batch loss at every step.
    pub loss_curve: Vec<f64>,
    /// Loss over the whole training split before the first step.
    pub initial_loss: f64,
    /// Loss over the whole training split for the returned checkpoint.
    pub final_loss: f64,
    /// Validation split was empty; accuracy is measured on training rows.
    pub val_was_empty: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractorModel {
    pub net: Mlp,
    pub meta: TrainingMeta,
}

impl ExtractorModel {
    pub fn in_dim(&self) -> usize {
        self.net.in_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.net.feature_dim()
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let s = serde_json::to_string(self)?;
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let model: Self = serde_json::from_str(&s)?;
        if !model.net.all_finite() {
            return Err(Error::invalid("model", "non-finite parameter"));
        }
        Ok(model)
    }
}

/// Draws class-balanced mini-batches from each environment.
#[derive(Debug, Clone)]
pub struct BalancedSampler {
    /// Row indices per `[env][class]`; classes absent from both
    /// environments are dropped.
    cells: [Vec<Vec<usize>>; 2],
    per_env: usize,
}

impl BalancedSampler {
    pub fn new(ds: &LabeledDataset, per_env: usize, min_per_cell: usize) -> Result<Self> {
        let counts = ds.cell_counts();
        let present: Vec<usize> = (0..ds.n_classes())
            .filter(|&y| counts[0][y] + counts[1][y] > 0)
            .collect();
        let mut cells = [Vec::new(), Vec::new()];
        for env in 0..2u8 {
            for &y in &present {
                let rows: Vec<usize> = (0..ds.n_rows())
                    .filter(|&i| ds.envs()[i] == env && ds.labels()[i] == y)
                    .collect();
                if rows.len() < min_per_cell.max(1) {
                    return Err(Error::MissingCell {
                        env,
                        class: y,
                        need: min_per_cell.max(1),
                    });
                }
                cells[env as usize].push(rows);
            }
        }
        Ok(Self { cells, per_env })
    }

    /// Indices of one batch: `per_env` rows of env 0, then of env 1.
    pub fn next_batch(&self, rng: &mut Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(2 * self.per_env);
        for env_cells in &self.cells {
            for _ in 0..self.per_env {
                let cell = &env_cells[rng.below(env_cells.len())];
                out.push(cell[rng.below(cell.len())]);
            }
        }
        out
    }
}

fn env_targets(ds: &LabeledDataset) -> Vec<f64> {
    ds.envs().iter().map(|&e| f64::from(e)).collect()
}

/// Fraction of rows whose environment is predicted correctly.
pub fn accuracy(net: &Mlp, ds: &LabeledDataset) -> f64 {
    if ds.is_empty() {
        return f64::NAN;
    }
    let logits = net.logits(&ds.features().view(), ds.labels());
    let hits = logits
        .iter()
        .zip(ds.envs())
        .filter(|(&s, &e)| (s > 0.0) == (e == 1))
        .count();
    hits as f64 / ds.n_rows() as f64
}

fn full_loss(net: &Mlp, ds: &LabeledDataset) -> f64 {
    net.loss(&ds.features().view(), ds.labels(), &env_targets(ds))
}

/// Train `g` and `h` on `ds` and return the best validation checkpoint.
pub fn train(ds: &LabeledDataset, cfg: &MlpConfig, rng: &mut Rng) -> Result<ExtractorModel> {
    cfg.validate()?;
    if ds.n_dims() != cfg.in_dim {
        return Err(Error::DimensionMismatch {
            expected: cfg.in_dim,
            got: ds.n_dims(),
        });
    }
    if ds.n_classes() > cfg.n_classes {
        return Err(Error::invalid(
            "n_classes",
            format!("dataset has {} classes, config allows {}", ds.n_classes(), cfg.n_classes),
        ));
    }
    // every (env, class) cell needs two rows so that the split can leave
    // one on the training side
    BalancedSampler::new(ds, cfg.batch_per_env, 2)?;

    let split = split_train_val(ds, cfg.train_frac, rng)?;
    let sampler = BalancedSampler::new(&split.train, cfg.batch_per_env, 1)?;
    let val_was_empty = split.val.is_empty();
    let val = if val_was_empty { &split.train } else { &split.val };

    let mut net = cfg.build(rng);
    let mut opt = Adam::new(cfg.lr);
    let initial_loss = full_loss(&net, &split.train);

    let mut best = net.clone();
    let mut best_acc = f64::NEG_INFINITY;
    let mut best_step = 0;
    let mut checkpoints = Vec::new();
    let mut loss_curve = Vec::with_capacity(cfg.iters);
    let n_batch = 2 * cfg.batch_per_env;
    let mut x = Array2::zeros((n_batch, cfg.in_dim));
    let mut labels = vec![0usize; n_batch];
    let mut targets = vec![0.0; n_batch];

    for step in 1..=cfg.iters {
        let idx = sampler.next_batch(rng);
        for (k, &i) in idx.iter().enumerate() {
            x.row_mut(k).assign(&split.train.features().row(i));
            labels[k] = split.train.labels()[i];
            targets[k] = f64::from(split.train.envs()[i]);
        }
        let (loss, grads) = net.loss_and_grad(&x.view(), &labels, &targets);
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                what: "training loss".into(),
                step,
            });
        }
        loss_curve.push(loss);
        opt.step(net.param_slices_mut(), grads.param_slices());

        if step % cfg.checkpoint_every == 0 || step == cfg.iters {
            let acc = accuracy(&net, val);
            checkpoints.push((step, acc));
            if acc > best_acc {
                best_acc = acc;
                best_step = step;
                best = net.clone();
            }
        }
    }
    if !best.all_finite() {
        return Err(Error::NonFinite {
            what: "parameter".into(),
            step: best_step,
        });
    }
    let final_loss = full_loss(&best, &split.train);
    Ok(ExtractorModel {
        net: best,
        meta: TrainingMeta {
            val_accuracy: best_acc,
            best_step,
            checkpoints,
            loss_curve,
            initial_loss,
            final_loss,
            val_was_empty,
        },
    })
}

/// g(x) for every row of `ds`.
pub fn extract(model: &ExtractorModel, ds: &LabeledDataset) -> Result<Array2<f64>> {
    extract_features(model, ds.features())
}

pub fn extract_features(model: &ExtractorModel, x: &Array2<f64>) -> Result<Array2<f64>> {
    if x.ncols() != model.in_dim() {
        return Err(Error::DimensionMismatch {
            expected: model.in_dim(),
            got: x.ncols(),
        });
    }
    Ok(model.net.features(&x.view()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{gen_latent, LatentSpec, Support};

    fn small_cfg(in_dim: usize) -> MlpConfig {
        MlpConfig {
            in_dim,
            hidden_dims: vec![16],
            head_hidden: 8,
            feature_dim: 4,
            iters: 300,
            lr: 3e-3,
            ..MlpConfig::default()
        }
    }

    fn shifted_latent() -> LabeledDataset {
        let spec = LatentSpec::new(
            Support::Discrete(3),
            vec![0.6, 0.4, 0.0],
            vec![0.0, 0.4, 0.6],
            vec![vec![0.5, 0.5]; 3],
            vec![vec![0.5, 0.5]; 3],
        )
        .unwrap()
        .with_noise(0.05)
        .unwrap();
        gen_latent(&spec, 300, &mut Rng::new(11)).unwrap()
    }

    #[test]
    fn config_defaults() {
        let c = MlpConfig::default();
        assert_eq!(c.lr, 0.0003);
        assert_eq!(c.iters, 2000);
        assert_eq!(c.batch_per_env, 32);
        assert_eq!(c.feature_dim, 8);
        assert_eq!(c.hidden_dims, vec![256, 256]);
        assert_eq!(c.train_frac, 0.9);
    }

    #[test]
    fn config_validation() {
        let ok = small_cfg(3);
        ok.validate().unwrap();
        for bad in [
            MlpConfig { feature_dim: 0, ..ok.clone() },
            MlpConfig { iters: 0, ..ok.clone() },
            MlpConfig { batch_per_env: 0, ..ok.clone() },
            MlpConfig { lr: 0.0, ..ok.clone() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn zero_weight_model_gives_zero_features() {
        let cfg = small_cfg(3);
        let net = cfg.build(&mut Rng::new(1)).zeros_like();
        let model = ExtractorModel {
            net,
            meta: dummy_meta(),
        };
        let ds = shifted_latent();
        let f = extract(&model, &ds).unwrap();
        assert_eq!(f.dim(), (ds.n_rows(), 4));
        assert!(f.iter().all(|&v| v == 0.0));
    }

    fn dummy_meta() -> TrainingMeta {
        TrainingMeta {
            val_accuracy: 0.5,
            best_step: 0,
            checkpoints: vec![],
            loss_curve: vec![],
            initial_loss: 0.0,
            final_loss: 0.0,
            val_was_empty: false,
        }
    }

    #[test]
    fn extract_errors_and_empty() {
        let cfg = small_cfg(3);
        let model = ExtractorModel {
            net: cfg.build(&mut Rng::new(1)),
            meta: dummy_meta(),
        };
        let wrong = Array2::zeros((2, 5));
        assert!(matches!(
            extract_features(&model, &wrong),
            Err(Error::DimensionMismatch { expected: 3, got: 5 })
        ));
        let empty = Array2::zeros((0, 3));
        assert_eq!(extract_features(&model, &empty).unwrap().dim(), (0, 4));
        let x = Array2::from_shape_fn((5, 3), |(i, j)| (i * 3 + j) as f64 * 0.1);
        let a = extract_features(&model, &x).unwrap();
        let b = extract_features(&model, &x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let ds = shifted_latent();
        let cfg = small_cfg(3);
        let a = train(&ds, &cfg, &mut Rng::new(4)).unwrap();
        let b = train(&ds, &cfg, &mut Rng::new(4)).unwrap();
        assert_eq!(a, b);
        assert!(a.meta.final_loss < a.meta.initial_loss);
        // atoms 0 and 2 are environment-exclusive, atom 1 is shared:
        // best achievable accuracy is 0.6 + 0.4 / 2 = 0.8
        assert!(a.meta.val_accuracy > 0.7, "{}", a.meta.val_accuracy);
        assert!(a.meta.val_accuracy <= 0.8 + 0.1);
        assert_eq!(a.meta.loss_curve.len(), cfg.iters);
        assert_eq!(a.meta.checkpoints.len(), 3);
    }

    #[test]
    fn missing_cell_is_reported() {
        let spec = LatentSpec::new(
            Support::Discrete(2),
            vec![0.5, 0.5],
            vec![0.5, 0.5],
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        )
        .unwrap();
        let ds = gen_latent(&spec, 20, &mut Rng::new(1)).unwrap();
        // keep env 0 intact, drop every class-1 row of env 1
        let keep: Vec<usize> = (0..ds.n_rows())
            .filter(|&i| !(ds.envs()[i] == 1 && ds.labels()[i] == 1))
            .collect();
        let ds = ds.select(&keep);
        let err = train(&ds, &small_cfg(2), &mut Rng::new(1)).unwrap_err();
        assert!(matches!(err, Error::MissingCell { env: 1, class: 1, .. }), "{err}");
    }

    #[test]
    fn sampler_is_class_balanced() {
        let ds = shifted_latent();
        let sampler = BalancedSampler::new(&ds, 32, 1).unwrap();
        let mut rng = Rng::new(5);
        let mut counts = [[0usize; 2]; 2];
        let batches = 1000;
        for _ in 0..batches {
            let b = sampler.next_batch(&mut rng);
            assert_eq!(b.len(), 64);
            for (k, &i) in b.iter().enumerate() {
                let env = ds.envs()[i] as usize;
                assert_eq!(env, usize::from(k >= 32));
                counts[env][ds.labels()[i]] += 1;
            }
        }
        let n = (batches * 64) as f64;
        let p = 0.25;
        let sd = (n * p * (1.0 - p)).sqrt();
        for row in counts {
            for c in row {
                assert!((c as f64 - n * p).abs() < 3.0 * sd, "{counts:?}");
            }
        }
    }

    #[test]
    fn model_json_round_trip() {
        let cfg = small_cfg(3);
        let model = ExtractorModel {
            net: cfg.build(&mut Rng::new(3)),
            meta: dummy_meta(),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        model.save_json(&path).unwrap();
        let back = ExtractorModel::load_json(&path).unwrap();
        assert_eq!(model, back);
    }
}
