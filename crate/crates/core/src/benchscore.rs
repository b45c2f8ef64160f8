//! Ranking scores: each algorithm's accuracy on a dataset is compared with
//! the reference algorithm's error band (mean ± standard error) and scores
//! +1 above it, −1 below it, 0 inside; the ranking score sums over datasets.

use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_REFERENCE: &str = "ERM";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arrow {
    Up,
    Down,
    Neutral,
}

impl Arrow {
    pub fn from_score(s: i32) -> Self {
        match s.signum() {
            1 => Arrow::Up,
            -1 => Arrow::Down,
            _ => Arrow::Neutral,
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Arrow::Up => "↑",
            Arrow::Down => "↓",
            Arrow::Neutral => " ",
        }
    }
}

/// Relative slack at the band edges, so that decimal ties such as
/// 94.6 vs 94.7 − 0.1 stay inside the band despite binary rounding.
const EDGE_SLACK: f64 = 1e-9;

/// +1 above `ref_mean + ref_stderr`, −1 below `ref_mean − ref_stderr`,
/// 0 otherwise (band edges included).
pub fn cell_score(mean: f64, ref_mean: f64, ref_stderr: f64) -> i32 {
    let slack = EDGE_SLACK * (ref_mean.abs() + ref_stderr).max(1.0);
    if mean > ref_mean + ref_stderr + slack {
        1
    } else if mean < ref_mean - ref_stderr - slack {
        -1
    } else {
        0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub mean: f64,
    pub stderr: f64,
    /// Arrow printed next to the cell in the source table, when recorded.
    pub printed: Option<Arrow>,
}

/// Accuracy percentages per (algorithm, dataset), in input order.
#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyTable {
    algorithms: Vec<String>,
    datasets: Vec<String>,
    cells: HashMap<(usize, usize), Cell>,
    reference: String,
}

impl AccuracyTable {
    pub fn new(reference: &str) -> Self {
        Self {
            algorithms: Vec::new(),
            datasets: Vec::new(),
            cells: HashMap::new(),
            reference: reference.to_string(),
        }
    }

    fn index_of(list: &mut Vec<String>, name: &str) -> usize {
        list.iter().position(|n| n == name).unwrap_or_else(|| {
            list.push(name.to_string());
            list.len() - 1
        })
    }

    pub fn insert(&mut self, algorithm: &str, dataset: &str, cell: Cell) -> Result<()> {
        if !(0.0..=100.0).contains(&cell.mean) {
            return Err(Error::invalid(
                "mean",
                format!("{algorithm}/{dataset}: {} not in [0, 100]", cell.mean),
            ));
        }
        if !(cell.stderr >= 0.0 && cell.stderr.is_finite()) {
            return Err(Error::invalid(
                "stderr",
                format!("{algorithm}/{dataset}: {} must be ≥ 0", cell.stderr),
            ));
        }
        let a = Self::index_of(&mut self.algorithms, algorithm);
        let d = Self::index_of(&mut self.datasets, dataset);
        if self.cells.insert((a, d), cell).is_some() {
            return Err(Error::invalid(
                "cell",
                format!("duplicate entry for {algorithm}/{dataset}"),
            ));
        }
        Ok(())
    }

    pub fn algorithms(&self) -> &[String] {
        &self.algorithms
    }

    pub fn datasets(&self) -> &[String] {
        &self.datasets
    }

    pub fn reference(&self) -> &str {
        &self.reference
    }

    pub fn cell(&self, algorithm: &str, dataset: &str) -> Option<&Cell> {
        let a = self.algorithms.iter().position(|n| n == algorithm)?;
        let d = self.datasets.iter().position(|n| n == dataset)?;
        self.cells.get(&(a, d))
    }

    /// Reference row present and every (algorithm, dataset) cell filled.
    pub fn validate(&self) -> Result<()> {
        if !self.algorithms.contains(&self.reference) {
            return Err(Error::invalid(
                "reference",
                format!("reference row {:?} not in table", self.reference),
            ));
        }
        for (a, alg) in self.algorithms.iter().enumerate() {
            for (d, ds) in self.datasets.iter().enumerate() {
                if !self.cells.contains_key(&(a, d)) {
                    return Err(Error::invalid("cell", format!("missing {alg}/{ds}")));
                }
            }
        }
        Ok(())
    }

    /// CSV with header `algorithm,dataset,mean,stderr` and an optional fifth
    /// column `printed` holding `up`, `down` or nothing.
    pub fn read_csv(reader: impl BufRead, path: &Path, reference: &str) -> Result<Self> {
        let parse_err = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut lines = reader.lines().enumerate();
        let header = match lines.next() {
            Some((_, l)) => l.map_err(|e| Error::io(path, e))?,
            None => return Err(parse_err(1, "no rows".into())),
        };
        let cols: Vec<&str> = header.trim().split(',').map(str::trim).collect();
        let with_printed = match cols.as_slice() {
            ["algorithm", "dataset", "mean", "stderr"] => false,
            ["algorithm", "dataset", "mean", "stderr", "printed"] => true,
            _ => {
                return Err(parse_err(
                    1,
                    format!("expected header algorithm,dataset,mean,stderr[,printed], got {header:?}"),
                ))
            }
        };
        let mut table = Self::new(reference);
        for (i, line) in lines {
            let n = i + 1;
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != cols.len() {
                return Err(parse_err(n, format!("expected {} fields, got {}", cols.len(), f.len())));
            }
            let num = |s: &str, what: &str| {
                s.parse::<f64>()
                    .map_err(|_| parse_err(n, format!("{what} {s:?} is not a number")))
            };
            let printed = if with_printed {
                match f[4] {
                    "up" => Some(Arrow::Up),
                    "down" => Some(Arrow::Down),
                    "" => Some(Arrow::Neutral),
                    other => return Err(parse_err(n, format!("printed arrow {other:?}"))),
                }
            } else {
                None
            };
            let cell = Cell {
                mean: num(f[2], "mean")?,
                stderr: num(f[3], "stderr")?,
                printed,
            };
            table.insert(f[0], f[1], cell).map_err(|e| parse_err(n, e.to_string()))?;
        }
        if table.algorithms.is_empty() {
            return Err(parse_err(2, "no rows".into()));
        }
        table.validate()?;
        Ok(table)
    }

    pub fn load_csv(path: impl AsRef<Path>, reference: &str) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(std::io::BufReader::new(file), path, reference)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCell {
    pub dataset: String,
    pub mean: f64,
    pub stderr: f64,
    pub score: i32,
    pub arrow: Arrow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlgorithmScore {
    pub algorithm: String,
    pub cells: Vec<ScoredCell>,
    pub ranking_score: i32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub reference: String,
    pub datasets: Vec<String>,
    pub rows: Vec<AlgorithmScore>,
    /// Cells whose computed arrow differs from the printed one.
    pub discrepancies: Vec<String>,
}

impl ScoreReport {
    pub fn ranking(&self, algorithm: &str) -> Option<i32> {
        self.rows
            .iter()
            .find(|r| r.algorithm == algorithm)
            .map(|r| r.ranking_score)
    }

    /// One line per algorithm: cells with arrows, then the ranking score.
    pub fn render(&self) -> String {
        let name_w = self.rows.iter().map(|r| r.algorithm.len()).max().unwrap_or(9).max(9);
        let mut out = format!("{:<name_w$}", "algorithm");
        for d in &self.datasets {
            out.push_str(&format!(" {:>14}", d));
        }
        out.push_str("  ranking\n");
        for row in &self.rows {
            out.push_str(&format!("{:<name_w$}", row.algorithm));
            for c in &row.cells {
                let text = format!("{:.1} ± {:.1}{}", c.mean, c.stderr, c.arrow.symbol());
                out.push_str(&format!(" {text:>14}"));
            }
            out.push_str(&format!("  {:+}\n", row.ranking_score));
        }
        for d in &self.discrepancies {
            out.push_str(&format!("warning: {d}\n"));
        }
        out
    }
}

/// Score every cell against the reference row and sum per algorithm.
pub fn score_table(table: &AccuracyTable) -> Result<ScoreReport> {
    table.validate()?;
    let mut rows = Vec::with_capacity(table.algorithms.len());
    let mut discrepancies = Vec::new();
    for alg in &table.algorithms {
        let mut cells = Vec::with_capacity(table.datasets.len());
        for ds in &table.datasets {
            let c = table.cell(alg, ds).expect("validated");
            let r = table.cell(&table.reference, ds).expect("validated");
            let score = cell_score(c.mean, r.mean, r.stderr);
            let arrow = Arrow::from_score(score);
            if let Some(p) = c.printed {
                if p != arrow && *alg != table.reference {
                    discrepancies.push(format!(
                        "{alg}/{ds}: printed {p:?}, computed {arrow:?}"
                    ));
                }
            }
            cells.push(ScoredCell {
                dataset: ds.clone(),
                mean: c.mean,
                stderr: c.stderr,
                score,
                arrow,
            });
        }
        let ranking_score = cells.iter().map(|c| c.score).sum();
        rows.push(AlgorithmScore {
            algorithm: alg.clone(),
            cells,
            ranking_score,
        });
    }
    Ok(ScoreReport {
        reference: table.reference.clone(),
        datasets: table.datasets.clone(),
        rows,
        discrepancies,
    })
}

/// Ranking score per algorithm, in table order.
pub fn ranking_scores(table: &AccuracyTable) -> Result<Vec<(String, i32)>> {
    Ok(score_table(table)?
        .rows
        .into_iter()
        .map(|r| (r.algorithm, r.ranking_score))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const TABLE1: &str = include_str!("../fixtures/table1.csv");
    const TABLE2: &str = include_str!("../fixtures/table2.csv");

    fn load(text: &str) -> AccuracyTable {
        AccuracyTable::read_csv(text.as_bytes(), Path::new("fixture"), DEFAULT_REFERENCE).unwrap()
    }

    #[test]
    fn band_examples() {
        // RSC against ERM on TerraInc and OfficeHome
        assert_eq!(cell_score(43.6, 42.6, 0.9), 1);
        assert_eq!(cell_score(62.9, 63.3, 0.2), -1);
        assert_eq!(cell_score(42.6, 42.6, 0.9), 0);
        // edges belong to the band, including decimal ties
        assert_eq!(cell_score(1.5, 1.0, 0.5), 0);
        assert_eq!(cell_score(0.5, 1.0, 0.5), 0);
        assert_eq!(cell_score(94.6, 94.7, 0.1), 0);
        assert_eq!(cell_score(94.8, 94.7, 0.1), 0);
    }

    proptest! {
        #[test]
        fn banding_is_antisymmetric(m in -200.0..200.0f64, r in -100.0..100.0f64, s in 0.0..50.0f64) {
            let mirrored = 2.0 * r - m;
            // skip points where rounding moves the mirror across a band edge
            prop_assume!(((m - r).abs() - s).abs() > 1e-6);
            prop_assert_eq!(cell_score(m, r, s), -cell_score(mirrored, r, s));
        }
    }

    #[test]
    fn table1_scores() {
        let report = score_table(&load(TABLE1)).unwrap();
        let expected = [
            ("RSC", 2), ("MMD", 2), ("SagNet", 1), ("ERM", 0), ("IGA", 0), ("CORAL", 0),
            ("IRM", -1), ("VREx", -1), ("GroupDRO", -1), ("ERDG", -2), ("DANN", -2),
            ("MTL", -2), ("Mixup", -2), ("ANDMask", -2), ("ARM", -3), ("MLDG", -4),
        ];
        assert_eq!(report.rows.len(), expected.len());
        for (alg, score) in expected {
            assert_eq!(report.ranking(alg), Some(score), "{alg}");
        }
        assert!(report.discrepancies.is_empty(), "{:?}", report.discrepancies);
    }

    #[test]
    fn table2_scores() {
        let report = score_table(&load(TABLE2)).unwrap();
        let expected = [
            ("VREx", 1), ("GroupDRO", 1), ("ERM", 0), ("IRM", 0), ("MTL", 0), ("ERDG", 0),
            ("ARM", 0), ("MMD", -1), ("RSC", -1), ("IGA", -1), ("CORAL", -1), ("Mixup", -1),
            ("MLDG", -1), ("SagNet", -2), ("ANDMask", -2), ("DANN", -3),
        ];
        assert_eq!(report.rows.len(), expected.len());
        for (alg, score) in expected {
            assert_eq!(report.ranking(alg), Some(score), "{alg}");
        }
        assert!(report.discrepancies.is_empty(), "{:?}", report.discrepancies);
    }

    #[test]
    fn neutral_column_changes_nothing() {
        let mut table = load(TABLE1);
        let before = ranking_scores(&table).unwrap();
        let algs = table.algorithms().to_vec();
        for alg in &algs {
            let mean = if alg == "ERM" { 50.0 } else { 50.5 };
            table
                .insert(alg, "Extra", Cell { mean, stderr: 1.0, printed: None })
                .unwrap();
        }
        assert_eq!(ranking_scores(&table).unwrap(), before);
    }

    #[test]
    fn all_ties_score_zero() {
        let mut table = AccuracyTable::new("ERM");
        for alg in ["ERM", "A", "B"] {
            table.insert(alg, "D", Cell { mean: 70.0, stderr: 0.3, printed: None }).unwrap();
        }
        assert!(ranking_scores(&table).unwrap().iter().all(|(_, s)| *s == 0));
    }

    #[test]
    fn invalid_tables() {
        let p = Path::new("t.csv");
        let r = AccuracyTable::read_csv("algorithm,dataset,mean,stderr\nA,D,50,1\n".as_bytes(), p, "ERM");
        assert!(r.unwrap_err().to_string().contains("reference"));
        let r = AccuracyTable::read_csv("algorithm,dataset,mean,stderr\nERM,D,150,1\n".as_bytes(), p, "ERM");
        assert!(r.is_err());
        let r = AccuracyTable::read_csv("algorithm,dataset,mean,stderr\nERM,D,x,1\n".as_bytes(), p, "ERM");
        assert!(matches!(r, Err(Error::Parse { line: 2, .. })));
        let r = AccuracyTable::read_csv("alg,mean\n".as_bytes(), p, "ERM");
        assert!(matches!(r, Err(Error::Parse { line: 1, .. })));
        let r = AccuracyTable::read_csv(
            "algorithm,dataset,mean,stderr\nERM,D,50,1\nA,D,50,1\nA,E,50,1\n".as_bytes(),
            p,
            "ERM",
        );
        assert!(r.unwrap_err().to_string().contains("missing ERM/E"));
    }

    #[test]
    fn render_marks_arrows() {
        let text = score_table(&load(TABLE1)).unwrap().render();
        assert!(text.contains("43.6 ± 0.5↑"));
        assert!(text.contains("62.9 ± 0.4↓"));
        assert!(text.lines().any(|l| l.starts_with("MLDG") && l.ends_with("-4")));
    }
}
