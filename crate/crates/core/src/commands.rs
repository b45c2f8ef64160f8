//! Subcommands of the `shiftbench` binary. Each one is a pure function of
//! its [`RunConfig`]: outputs are written under `out`, and only `run.log`
//! carries timestamps.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::baselines::{compare_table, default_compare_specs, write_compare_csv, CompareConfig, CompareRow};
use crate::benchscore::{score_table, AccuracyTable};
use crate::data::{load_csv, load_idx, save_csv, LabeledDataset};
use crate::datagen::{
    blue_shift_default, gen_colored, gen_latent, irm_colored_default, latent_spec_a, ColoredSpec, LatentSpec,
};
use crate::discriminator::MlpConfig;
use crate::error::{Error, Result};
use crate::estimator::{derive_seed, estimate_pipeline, sweep, EstimatorConfig, ShiftEstimate, SweepAxis, SweepCell};
use crate::rng::Rng;

/// Named data sources selectable with `--preset`.
#[derive(Debug, Clone, PartialEq)]
pub enum Preset {
    /// Both environments share ρ = 0.1 (with the IRM label noise).
    Iid,
    IrmCmnist,
    CmnistRho(f64, f64),
    CmnistBlue,
    LatentA,
}

/// Observation noise added to the latent-A atoms.
pub const LATENT_A_NOISE: f64 = 0.05;

impl Preset {
    /// `words` is the preset name followed by its arguments.
    pub fn parse(words: &[String]) -> Result<Self> {
        let name = words.first().map(String::as_str).unwrap_or("");
        let args = &words[words.len().min(1)..];
        let arity = |n: usize| {
            if args.len() == n {
                Ok(())
            } else {
                Err(Error::invalid(
                    "preset",
                    format!("{name} takes {n} argument(s), got {}", args.len()),
                ))
            }
        };
        match name {
            "iid" => arity(0).map(|_| Preset::Iid),
            "irm-cmnist" => arity(0).map(|_| Preset::IrmCmnist),
            "cmnist-blue" => arity(0).map(|_| Preset::CmnistBlue),
            "latent-a" => arity(0).map(|_| Preset::LatentA),
            "cmnist-rho" => {
                arity(2)?;
                let num = |s: &String| {
                    s.parse::<f64>()
                        .map_err(|_| Error::invalid("preset", format!("cmnist-rho: {s:?} is not a number")))
                };
                Ok(Preset::CmnistRho(num(&args[0])?, num(&args[1])?))
            }
            other => Err(Error::invalid(
                "preset",
                format!("unknown preset {other:?} (iid, irm-cmnist, cmnist-rho <a> <b>, cmnist-blue, latent-a)"),
            )),
        }
    }

    pub fn source(&self) -> Result<DataSource> {
        let colored = |spec: ColoredSpec| DataSource::Colored {
            spec,
            mnist_images: None,
            mnist_labels: None,
        };
        Ok(match *self {
            Preset::Iid => {
                let mut s = irm_colored_default();
                s.rho_te = s.rho_tr;
                colored(s)
            }
            Preset::IrmCmnist => colored(irm_colored_default()),
            Preset::CmnistRho(a, b) => colored(ColoredSpec::rho(a, b)),
            Preset::CmnistBlue => colored(blue_shift_default()),
            Preset::LatentA => DataSource::Latent {
                spec: latent_spec_a().with_noise(LATENT_A_NOISE)?,
                n_per_env: 2000,
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Colored {
        spec: ColoredSpec,
        #[serde(default)]
        mnist_images: Option<PathBuf>,
        #[serde(default)]
        mnist_labels: Option<PathBuf>,
    },
    Latent {
        spec: LatentSpec,
        n_per_env: usize,
    },
    Csv {
        path: PathBuf,
    },
}

/// Seed of the data generator for a run seeded with `seed`.
pub fn data_seed(seed: u64) -> u64 {
    derive_seed(seed, 0, 0)
}

fn load_mnist(images: &Option<PathBuf>, labels: &Option<PathBuf>) -> Result<Option<LabeledDataset>> {
    match (images, labels) {
        (Some(i), Some(l)) => Ok(Some(load_idx(i, l)?)),
        (None, None) => Ok(None),
        _ => Err(Error::invalid(
            "mnist_images",
            "mnist_images and mnist_labels must be given together",
        )),
    }
}

impl DataSource {
    pub fn load(&self, seed: u64) -> Result<LabeledDataset> {
        let mut rng = Rng::new(data_seed(seed));
        match self {
            DataSource::Colored {
                spec,
                mnist_images,
                mnist_labels,
            } => {
                let mnist = load_mnist(mnist_images, mnist_labels)?;
                gen_colored(spec, mnist.as_ref(), &mut rng)
            }
            DataSource::Latent { spec, n_per_env } => {
                spec.validate()?;
                gen_latent(spec, *n_per_env, &mut rng)
            }
            DataSource::Csv { path } => load_csv(path),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    /// Fields not swept are taken from here.
    pub base: ColoredSpec,
    pub runs: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            axis: SweepAxis::Rho,
            values: vec![0.1, 0.3, 0.5, 0.7, 0.9],
            base: ColoredSpec::rho(0.1, 0.1),
            runs: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads across runs and cells; 0 picks the core count.
    pub threads: usize,
    pub out: PathBuf,
    pub data: Option<DataSource>,
    /// `in_dim` and `n_classes` are always taken from the data.
    pub mlp: MlpConfig,
    pub estimator: EstimatorConfig,
    pub compare: CompareConfig,
    /// Rows of the comparison table; empty means the default six rows.
    pub compare_specs: Vec<(String, ColoredSpec)>,
    pub mnist_images: Option<PathBuf>,
    pub mnist_labels: Option<PathBuf>,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: 0,
            out: PathBuf::from("out"),
            data: None,
            mlp: MlpConfig::default(),
            estimator: EstimatorConfig::default(),
            compare: CompareConfig::default(),
            compare_specs: Vec::new(),
            mnist_images: None,
            mnist_labels: None,
            sweep: SweepConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
    pub runs: Option<usize>,
    pub preset: Option<Preset>,
    pub data: Option<PathBuf>,
}

impl Overrides {
    pub fn apply(&self, mut cfg: RunConfig) -> Result<RunConfig> {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(t) = self.threads {
            cfg.threads = t;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        if let Some(r) = self.runs {
            cfg.estimator.n_runs = r;
            cfg.compare.runs = r;
            cfg.sweep.runs = r;
        }
        match (&self.preset, &self.data) {
            (Some(_), Some(_)) => {
                return Err(Error::invalid("data", "--preset and --data are mutually exclusive"))
            }
            (Some(p), None) => cfg.data = Some(p.source()?),
            (None, Some(path)) => cfg.data = Some(DataSource::Csv { path: path.clone() }),
            (None, None) => {}
        }
        Ok(cfg)
    }
}

/// Appends timestamped lines to `run.log` in the output directory.
pub struct Log {
    file: fs::File,
    path: PathBuf,
}

impl Log {
    pub fn open(out: &Path) -> Result<Self> {
        let path = out.join("run.log");
        let file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self { file, path })
    }

    pub fn line(&mut self, msg: &str) -> Result<()> {
        let ts = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs_f64())
            .unwrap_or(0.0);
        writeln!(self.file, "[{ts:.3}] {msg}").map_err(|e| Error::io(&self.path, e))
    }
}

fn prepare_out(cfg: &RunConfig, command: &str) -> Result<Log> {
    fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    write_json(&cfg.out.join("config.json"), cfg)?;
    let mut log = Log::open(&cfg.out)?;
    log.line(&format!("{command}: seed {}", cfg.seed))?;
    Ok(log)
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, body: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Result<()> {
    let mut buf = Vec::new();
    body(&mut buf).map_err(|e| Error::io(path, e))?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn require_data(cfg: &RunConfig) -> Result<&DataSource> {
    cfg.data
        .as_ref()
        .ok_or_else(|| Error::invalid("data", "no data source: pass --preset, --data or a config with `data`"))
}

fn mlp_for(cfg: &RunConfig, ds: &LabeledDataset) -> MlpConfig {
    MlpConfig {
        in_dim: ds.n_dims(),
        n_classes: ds.n_classes(),
        ..cfg.mlp.clone()
    }
}

#[derive(Debug, Serialize)]
struct GeneratedSidecar<'a> {
    seed: u64,
    data_seed: u64,
    source: &'a DataSource,
    rows: usize,
    dims: usize,
}

/// Writes `data.csv` and `spec.json`.
pub fn cmd_generate(cfg: &RunConfig) -> Result<LabeledDataset> {
    let source = require_data(cfg)?;
    if matches!(source, DataSource::Csv { .. }) {
        return Err(Error::invalid("data", "generate needs a synthetic source, not a CSV file"));
    }
    let ds = source.load(cfg.seed)?;
    let mut log = prepare_out(cfg, "generate")?;
    save_csv(&ds, cfg.out.join("data.csv"))?;
    let sidecar = GeneratedSidecar {
        seed: cfg.seed,
        data_seed: data_seed(cfg.seed),
        source,
        rows: ds.n_rows(),
        dims: ds.n_dims(),
    };
    write_json(&cfg.out.join("spec.json"), &sidecar)?;
    log.line(&format!("wrote {} rows", ds.n_rows()))?;
    Ok(ds)
}

#[derive(Debug, Serialize)]
struct EstimateOutput<'a> {
    config: &'a RunConfig,
    rows: usize,
    dims: usize,
    classes: usize,
    estimate: &'a ShiftEstimate,
}

/// Writes `results.json`.
pub fn cmd_estimate(cfg: &RunConfig) -> Result<ShiftEstimate> {
    let ds = require_data(cfg)?.load(cfg.seed)?;
    let mlp = mlp_for(cfg, &ds);
    mlp.validate()?;
    cfg.estimator.validate()?;
    let mut log = prepare_out(cfg, "estimate")?;
    let t = Instant::now();
    let est = estimate_pipeline(&ds, &mlp, &cfg.estimator, cfg.seed)?;
    log.line(&format!(
        "d_div {:.4} ± {:.4}, d_cor {:.4} ± {:.4} in {:.1}s",
        est.mean.d_div,
        est.stderr.d_div,
        est.mean.d_cor,
        est.stderr.d_cor,
        t.elapsed().as_secs_f64()
    ))?;
    for w in &est.warnings {
        log.line(&format!("warning: {w}"))?;
    }
    let out = EstimateOutput {
        config: cfg,
        rows: ds.n_rows(),
        dims: ds.n_dims(),
        classes: ds.n_classes(),
        estimate: &est,
    };
    write_json(&cfg.out.join("results.json"), &out)?;
    Ok(est)
}

pub const SWEEP_HEADER: &str = "row,col,tr,te,d_div,d_cor,d_div_stderr,d_cor_stderr";

pub fn write_sweep_csv(cells: &[SweepCell], w: &mut impl Write) -> std::io::Result<()> {
    writeln!(w, "{SWEEP_HEADER}")?;
    for c in cells {
        let e = &c.estimate;
        writeln!(
            w,
            "{},{},{},{},{:.6},{:.6},{:.6},{:.6}",
            c.row, c.col, c.tr, c.te, e.mean.d_div, e.mean.d_cor, e.stderr.d_div, e.stderr.d_cor
        )?;
    }
    Ok(())
}

/// Writes `sweep.csv` (one row per grid cell) and `sweep.json`.
pub fn cmd_sweep(cfg: &RunConfig) -> Result<Vec<SweepCell>> {
    let sw = &cfg.sweep;
    if sw.values.is_empty() {
        return Err(Error::invalid("sweep.values", "empty grid"));
    }
    sw.base.validate()?;
    let est = EstimatorConfig {
        n_runs: sw.runs,
        ..cfg.estimator.clone()
    };
    est.validate()?;
    let mnist = load_mnist(&cfg.mnist_images, &cfg.mnist_labels)?;
    let mut log = prepare_out(cfg, "sweep")?;
    let t = Instant::now();
    let cells = sweep(&sw.base, sw.axis, &sw.values, mnist.as_ref(), &cfg.mlp, &est, cfg.seed)?;
    assert_eq!(cells.len(), sw.values.len() * sw.values.len(), "one result per grid cell");
    log.line(&format!("{} cells in {:.1}s", cells.len(), t.elapsed().as_secs_f64()))?;
    write_file(&cfg.out.join("sweep.csv"), |b| write_sweep_csv(&cells, b))?;
    write_json(&cfg.out.join("sweep.json"), &cells)?;
    Ok(cells)
}

/// Writes `compare.csv` and `compare.json`.
pub fn cmd_compare(cfg: &RunConfig) -> Result<Vec<CompareRow>> {
    let specs = if cfg.compare_specs.is_empty() {
        default_compare_specs()
    } else {
        cfg.compare_specs.clone()
    };
    for (_, s) in &specs {
        s.validate()?;
    }
    cfg.estimator.validate()?;
    let mnist = load_mnist(&cfg.mnist_images, &cfg.mnist_labels)?;
    let mut log = prepare_out(cfg, "compare")?;
    let t = Instant::now();
    let rows = compare_table(&specs, mnist.as_ref(), &cfg.mlp, &cfg.estimator, &cfg.compare, cfg.seed)?;
    log.line(&format!("{} rows in {:.1}s", rows.len(), t.elapsed().as_secs_f64()))?;
    write_file(&cfg.out.join("compare.csv"), |b| write_compare_csv(&rows, b))?;
    write_json(&cfg.out.join("compare.json"), &rows)?;
    Ok(rows)
}

/// Scores an accuracy table; returns the text (or JSON) to print.
pub fn cmd_score(table: &Path, reference: &str, json: bool) -> Result<String> {
    let table = AccuracyTable::load_csv(table, reference)?;
    let report = score_table(&table)?;
    if json {
        let mut s = serde_json::to_string_pretty(&report)?;
        s.push('\n');
        Ok(s)
    } else {
        Ok(report.render())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn preset_parsing() {
        assert_eq!(Preset::parse(&words("iid")).unwrap(), Preset::Iid);
        assert_eq!(
            Preset::parse(&words("cmnist-rho 0.1 0.9")).unwrap(),
            Preset::CmnistRho(0.1, 0.9)
        );
        assert!(Preset::parse(&words("cmnist-rho 0.1")).is_err());
        assert!(Preset::parse(&words("cmnist-rho a b")).is_err());
        assert!(Preset::parse(&words("latent-a 3")).is_err());
        assert!(Preset::parse(&words("mnist")).is_err());
        assert!(Preset::parse(&[]).is_err());
    }

    #[test]
    fn iid_preset_shares_rho() {
        match Preset::Iid.source().unwrap() {
            DataSource::Colored { spec, .. } => assert_eq!(spec.rho_tr, spec.rho_te),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn overrides_take_precedence() {
        let cfg = RunConfig {
            seed: 3,
            ..Default::default()
        };
        let o = Overrides {
            seed: Some(9),
            runs: Some(2),
            preset: Some(Preset::LatentA),
            ..Default::default()
        };
        let cfg = o.apply(cfg).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.estimator.n_runs, 2);
        assert_eq!(cfg.sweep.runs, 2);
        assert!(matches!(cfg.data, Some(DataSource::Latent { .. })));
        let both = Overrides {
            preset: Some(Preset::Iid),
            data: Some("x.csv".into()),
            ..Default::default()
        };
        assert!(both.apply(RunConfig::default()).is_err());
    }

    #[test]
    fn config_round_trip_and_unknown_fields() {
        let cfg = RunConfig {
            data: Some(Preset::CmnistBlue.source().unwrap()),
            ..Default::default()
        };
        let text = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);
        let partial: RunConfig = serde_json::from_str(r#"{"seed": 4, "estimator": {"n_runs": 2}}"#).unwrap();
        assert_eq!(partial.seed, 4);
        assert_eq!(partial.estimator.n_runs, 2);
        assert_eq!(partial.estimator.samples, 10_000);
        assert!(serde_json::from_str::<RunConfig>(r#"{"sed": 4}"#).is_err());
    }

    #[test]
    fn generate_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let run = |sub: &str| {
            let cfg = RunConfig {
                seed: 7,
                out: dir.path().join(sub),
                data: Some(Preset::LatentA.source().unwrap()),
                ..Default::default()
            };
            cmd_generate(&cfg).unwrap();
            fs::read(dir.path().join(sub).join("data.csv")).unwrap()
        };
        assert_eq!(run("a"), run("b"));
        assert!(dir.path().join("a/spec.json").exists());
        assert!(dir.path().join("a/run.log").exists());
    }

    #[test]
    fn generate_rejects_bad_spec() {
        let mut spec = irm_colored_default();
        spec.rho_tr = 1.5;
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            out: dir.path().to_path_buf(),
            data: Some(DataSource::Colored {
                spec,
                mnist_images: None,
                mnist_labels: None,
            }),
            ..Default::default()
        };
        let err = cmd_generate(&cfg).unwrap_err();
        assert!(!err.is_numeric());
        assert!(err.to_string().contains("rho_tr"), "{err}");
    }
}
