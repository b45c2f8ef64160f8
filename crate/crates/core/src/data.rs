//! Labeled two-environment datasets and their on-disk formats.
//!
//! CSV is the interchange format (`env,label,x0,...,x{d-1}`, floats written
//! with 17 significant digits so they round-trip exactly). MNIST-style IDX
//! files can be read but not written.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt};
use ndarray::{Array2, Axis};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Rows of (features, class label, environment id). Environment 0 is the
/// training environment and 1 the test environment.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: Array2<f64>,
    labels: Vec<usize>,
    envs: Vec<u8>,
    n_classes: usize,
}

impl LabeledDataset {
    pub fn new(
        features: Array2<f64>,
        labels: Vec<usize>,
        envs: Vec<u8>,
        n_classes: usize,
    ) -> Result<Self> {
        let n = features.nrows();
        if labels.len() != n || envs.len() != n {
            return Err(Error::invalid(
                "dataset",
                format!(
                    "column lengths differ: {} feature rows, {} labels, {} envs",
                    n,
                    labels.len(),
                    envs.len()
                ),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= n_classes) {
            return Err(Error::invalid(
                "label",
                format!("{bad} out of range for {n_classes} classes"),
            ));
        }
        if let Some(&bad) = envs.iter().find(|&&e| e > 1) {
            return Err(Error::invalid("env", format!("env out of range: {bad}")));
        }
        Ok(Self {
            features,
            labels,
            envs,
            n_classes,
        })
    }

    /// Build from rows, inferring `n_classes` as one past the largest label.
    pub fn from_rows(features: Array2<f64>, labels: Vec<usize>, envs: Vec<u8>) -> Result<Self> {
        let n_classes = labels.iter().max().map_or(0, |&m| m + 1);
        Self::new(features, labels, envs, n_classes)
    }

    pub fn n_rows(&self) -> usize {
        self.features.nrows()
    }

    pub fn n_dims(&self) -> usize {
        self.features.ncols()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn envs(&self) -> &[u8] {
        &self.envs
    }

    pub fn is_empty(&self) -> bool {
        self.n_rows() == 0
    }

    /// Row indices belonging to environment `env`.
    pub fn env_indices(&self, env: u8) -> Vec<usize> {
        (0..self.n_rows()).filter(|&i| self.envs[i] == env).collect()
    }

    /// New dataset made of the given rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            features: self.features.select(Axis(0), rows),
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
            envs: rows.iter().map(|&i| self.envs[i]).collect(),
            n_classes: self.n_classes,
        }
    }

    /// Features and labels of one environment.
    pub fn env_split(&self, env: u8) -> (Array2<f64>, Vec<usize>) {
        let idx = self.env_indices(env);
        let sub = self.select(&idx);
        (sub.features, sub.labels)
    }

    /// Counts per (env, class) cell, indexed `[env][class]`.
    pub fn cell_counts(&self) -> [Vec<usize>; 2] {
        let mut counts = [vec![0; self.n_classes], vec![0; self.n_classes]];
        for (&e, &y) in self.envs.iter().zip(&self.labels) {
            counts[e as usize][y] += 1;
        }
        counts
    }

    /// Overwrite every environment id.
    pub fn with_envs(mut self, envs: Vec<u8>) -> Result<Self> {
        if envs.len() != self.n_rows() {
            return Err(Error::DimensionMismatch {
                expected: self.n_rows(),
                got: envs.len(),
            });
        }
        if envs.iter().any(|&e| e > 1) {
            return Err(Error::invalid("env", "env out of range"));
        }
        self.envs = envs;
        Ok(self)
    }

    /// Stack two datasets with the same width.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.n_dims() != other.n_dims() {
            return Err(Error::DimensionMismatch {
                expected: self.n_dims(),
                got: other.n_dims(),
            });
        }
        let features = ndarray::concatenate(Axis(0), &[self.features.view(), other.features.view()])
            .expect("widths checked");
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        let mut envs = self.envs.clone();
        envs.extend_from_slice(&other.envs);
        Self::new(
            features,
            labels,
            envs,
            self.n_classes.max(other.n_classes),
        )
    }
}

/// Result of [`split_train_val`].
#[derive(Debug, Clone)]
pub struct TrainValSplit {
    pub train: LabeledDataset,
    pub val: LabeledDataset,
    /// Set when one side of the split came out empty.
    pub degenerate: bool,
}

/// Shuffle rows and split them into ⌈frac·n⌉ training and the rest validation.
pub fn split_train_val(ds: &LabeledDataset, frac: f64, rng: &mut Rng) -> Result<TrainValSplit> {
    if !(frac > 0.0 && frac < 1.0) {
        return Err(Error::invalid("frac", format!("{frac} not in (0, 1)")));
    }
    let n = ds.n_rows();
    if n == 0 {
        return Err(Error::invalid("dataset", "no rows"));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut idx);
    // guard against 0.9 * 100 = 90.00000000000001 style ceilings
    let n_train = ((frac * n as f64) - 1e-9).ceil().clamp(0.0, n as f64) as usize;
    let (tr, va) = idx.split_at(n_train);
    Ok(TrainValSplit {
        train: ds.select(tr),
        val: ds.select(va),
        degenerate: tr.is_empty() || va.is_empty(),
    })
}

fn format_float(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn write_csv(ds: &LabeledDataset, w: &mut impl Write) -> std::io::Result<()> {
    let mut header = String::from("env,label");
    for j in 0..ds.n_dims() {
        header.push_str(&format!(",x{j}"));
    }
    writeln!(w, "{header}")?;
    let mut line = String::new();
    for i in 0..ds.n_rows() {
        line.clear();
        line.push_str(&format!("{},{}", ds.envs[i], ds.labels[i]));
        for &v in ds.features.row(i) {
            line.push(',');
            line.push_str(&format_float(v));
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn save_csv(ds: &LabeledDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_csv(ds, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(BufReader::new(file), path)
}

pub fn read_csv(reader: impl BufRead, path: &Path) -> Result<LabeledDataset> {
    let perr = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = reader.lines();
    let header = match lines.next() {
        None => {
            return Err(Error::Format {
                path: path.to_path_buf(),
                msg: "no rows".into(),
            })
        }
        Some(h) => h.map_err(|e| Error::io(path, e))?,
    };
    let cols: Vec<&str> = header.trim().split(',').map(str::trim).collect();
    if cols.len() < 3 || cols[0] != "env" || cols[1] != "label" {
        return Err(perr(1, format!("malformed header: expected env,label,x0,..., got {header:?}")));
    }
    for (j, c) in cols[2..].iter().enumerate() {
        if *c != format!("x{j}") {
            return Err(perr(1, format!("malformed header: column {} is {c:?}, expected x{j}", j + 2)));
        }
    }
    let d = cols.len() - 2;
    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut envs = Vec::new();
    for (k, line) in lines.enumerate() {
        let lineno = k + 2;
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != d + 2 {
            return Err(perr(lineno, format!("expected {} cells, found {}", d + 2, cells.len())));
        }
        let env: u8 = cells[0]
            .parse()
            .map_err(|_| perr(lineno, format!("non-numeric env {:?}", cells[0])))?;
        if env > 1 {
            return Err(perr(lineno, format!("env out of range: {env}")));
        }
        let label: usize = cells[1]
            .parse()
            .map_err(|_| perr(lineno, format!("non-numeric label {:?}", cells[1])))?;
        for c in &cells[2..] {
            let v: f64 = c
                .parse()
                .map_err(|_| perr(lineno, format!("non-numeric cell {c:?}")))?;
            values.push(v);
        }
        envs.push(env);
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: "no rows".into(),
        });
    }
    let features = Array2::from_shape_vec((labels.len(), d), values).expect("row widths checked");
    LabeledDataset::from_rows(features, labels, envs)
}

fn read_idx_header(r: &mut impl Read, path: &Path, magic: u32, n_dims: usize) -> Result<Vec<usize>> {
    let fmt = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    let got = r
        .read_u32::<BigEndian>()
        .map_err(|_| fmt("truncated header".into()))?;
    if got != magic {
        return Err(fmt(format!(
            "unexpected IDX magic 0x{got:08x} (expected 0x{magic:08x})"
        )));
    }
    (0..n_dims)
        .map(|_| {
            r.read_u32::<BigEndian>()
                .map(|v| v as usize)
                .map_err(|_| fmt("truncated header".into()))
        })
        .collect()
}

/// Read an IDX image file and its label file. Pixels are scaled to [0, 1]
/// and every row is assigned environment 0.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();
    let open = |p: &Path| -> Result<BufReader<File>> {
        Ok(BufReader::new(File::open(p).map_err(|e| Error::io(p, e))?))
    };

    let mut ir = open(images_path)?;
    let dims = read_idx_header(&mut ir, images_path, IDX_IMAGES_MAGIC, 3)?;
    let (n, rows, cols) = (dims[0], dims[1], dims[2]);
    let mut pixels = vec![0u8; n * rows * cols];
    ir.read_exact(&mut pixels).map_err(|_| Error::Format {
        path: images_path.to_path_buf(),
        msg: format!("truncated payload: expected {} bytes", n * rows * cols),
    })?;

    let mut lr = open(labels_path)?;
    let ldims = read_idx_header(&mut lr, labels_path, IDX_LABELS_MAGIC, 1)?;
    if ldims[0] != n {
        return Err(Error::Format {
            path: labels_path.to_path_buf(),
            msg: format!("count mismatch: {n} images but {} labels", ldims[0]),
        });
    }
    let mut raw_labels = vec![0u8; n];
    lr.read_exact(&mut raw_labels).map_err(|_| Error::Format {
        path: labels_path.to_path_buf(),
        msg: format!("truncated payload: expected {n} labels"),
    })?;

    let features = Array2::from_shape_vec(
        (n, rows * cols),
        pixels.into_iter().map(|p| f64::from(p) / 255.0).collect(),
    )
    .expect("payload length checked");
    let labels: Vec<usize> = raw_labels.into_iter().map(usize::from).collect();
    let n_classes = labels.iter().max().map_or(0, |&m| m + 1).max(10);
    LabeledDataset::new(features, labels, vec![0; n], n_classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use std::io::Cursor;

    fn parse(s: &str) -> Result<LabeledDataset> {
        read_csv(Cursor::new(s), Path::new("mem.csv"))
    }

    #[test]
    fn csv_three_rows() {
        let ds = parse("env,label,x0,x1\n0,1,0.5,1.5\n1,0,2,3\n0,0,-1,1e-3\n").unwrap();
        assert_eq!(ds.n_rows(), 3);
        assert_eq!(ds.n_dims(), 2);
        assert_eq!(ds.envs(), &[0, 1, 0]);
        assert_eq!(ds.labels(), &[1, 0, 0]);
        assert_eq!(ds.features()[[2, 1]], 1e-3);
    }

    #[test]
    fn csv_env_out_of_range() {
        let err = parse("env,label,x0\n0,0,1\n2,0,1\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("env out of range"), "{msg}");
        assert!(msg.contains("line 3"), "{msg}");
    }

    #[test]
    fn csv_empty() {
        assert!(parse("").unwrap_err().to_string().contains("no rows"));
        assert!(parse("env,label,x0\n").unwrap_err().to_string().contains("no rows"));
    }

    #[test]
    fn csv_bad_cells() {
        let e = parse("env,label,x0\n0,0,abc\n").unwrap_err().to_string();
        assert!(e.contains("line 2") && e.contains("non-numeric"), "{e}");
        let e = parse("env,label,x0,x1\n0,0,1\n").unwrap_err().to_string();
        assert!(e.contains("line 2") && e.contains("expected 4"), "{e}");
        let e = parse("label,env,x0\n0,0,1\n").unwrap_err().to_string();
        assert!(e.contains("line 1") && e.contains("header"), "{e}");
    }

    #[test]
    fn split_sizes() {
        let ds = LabeledDataset::from_rows(Array2::zeros((100, 1)), vec![0; 100], vec![0; 100]).unwrap();
        let s = split_train_val(&ds, 0.9, &mut Rng::new(1)).unwrap();
        assert_eq!((s.train.n_rows(), s.val.n_rows()), (90, 10));
        assert!(!s.degenerate);

        let one = ds.select(&[0]);
        let s = split_train_val(&one, 0.9, &mut Rng::new(1)).unwrap();
        assert_eq!((s.train.n_rows(), s.val.n_rows()), (1, 0));
        assert!(s.degenerate);
    }

    #[test]
    fn split_is_seeded_partition() {
        let feats = Array2::from_shape_fn((37, 1), |(i, _)| i as f64);
        let ds = LabeledDataset::from_rows(feats, vec![0; 37], vec![0; 37]).unwrap();
        let a = split_train_val(&ds, 0.7, &mut Rng::new(5)).unwrap();
        let b = split_train_val(&ds, 0.7, &mut Rng::new(5)).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.val, b.val);
        let mut ids: Vec<i64> = a
            .train
            .features()
            .iter()
            .chain(a.val.features().iter())
            .map(|&v| v as i64)
            .collect();
        ids.sort_unstable();
        assert_eq!(ids, (0..37).collect::<Vec<_>>());
    }

    #[test]
    fn dataset_invariants() {
        let f = array![[1.0], [2.0]];
        assert!(LabeledDataset::new(f.clone(), vec![0], vec![0, 0], 2).is_err());
        assert!(LabeledDataset::new(f.clone(), vec![0, 2], vec![0, 0], 2).is_err());
        assert!(LabeledDataset::new(f, vec![0, 1], vec![0, 3], 2).is_err());
    }
}
