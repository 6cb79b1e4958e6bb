//! Continual-learning metrics over a lower-triangular accuracy matrix.
//!
//! `A[j][i]` is the accuracy on task `i` after training through task `j`
//! (zero-based, `i <= j`). With `T` tasks:
//!
//! - Avg.ACC = mean of the final row.
//! - New.ACC = mean of the diagonal.
//! - Forgetting = mean over `i < T-1` of `max_{j in [i, T-2]} A[j][i] - A[T-1][i]`.
//!   Positive values mean accuracy was lost.
//! - ADA(t) = mean of column `t` from row `t` down.
//! - ADF(t) = mean over `i in (t, T-1]` of `max_{j in [t, i-1]} A[j][t] - A[i][t]`.
//!
//! CSV files are one-based: the trainer writes an `after_task` index column
//! and `task_k` headers; hand-entered tables may instead use task names as
//! the header and leave the upper triangle blank. An optional leading
//! `# unit=percent` or `# unit=fraction` line fixes the unit; otherwise it is
//! inferred from the values.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unit {
    Percent,
    Fraction,
}

impl Unit {
    fn max(self) -> f64 {
        match self {
            Unit::Percent => 100.0,
            Unit::Fraction => 1.0,
        }
    }

    pub fn display_places(self) -> usize {
        match self {
            Unit::Percent => 2,
            Unit::Fraction => 4,
        }
    }
}

impl std::fmt::Display for Unit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Unit::Percent => "percent",
            Unit::Fraction => "fraction",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
    unit: Unit,
    names: Vec<String>,
}

impl AccuracyMatrix {
    pub fn new(rows: Vec<Vec<f64>>, unit: Unit) -> Result<Self> {
        let names = (1..=rows.len()).map(|k| format!("task_{k}")).collect();
        Self::with_names(rows, unit, names)
    }

    pub fn with_names(rows: Vec<Vec<f64>>, unit: Unit, names: Vec<String>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidConfig("accuracy matrix has no rows".into()));
        }
        if names.len() != rows.len() {
            return Err(Error::InvalidConfig(format!(
                "{} task names for {} rows",
                names.len(),
                rows.len()
            )));
        }
        for (j, row) in rows.iter().enumerate() {
            if row.len() != j + 1 {
                return Err(Error::Malformed {
                    row: j + 1,
                    msg: format!("expected {} entries, found {}", j + 1, row.len()),
                });
            }
            if let Some(v) = row.iter().find(|v| !(0.0..=unit.max()).contains(*v)) {
                return Err(Error::Malformed {
                    row: j + 1,
                    msg: format!("accuracy {v} outside [0, {}]", unit.max()),
                });
            }
        }
        Ok(Self { rows, unit, names })
    }

    pub fn num_tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn unit(&self) -> Unit {
        self.unit
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// Accuracy on `task` after training through `after`.
    pub fn get(&self, after: usize, task: usize) -> f64 {
        self.rows[after][task]
    }

    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        let mut rows = std::mem::take(&mut self.rows);
        rows.push(row);
        let mut names = std::mem::take(&mut self.names);
        names.push(format!("task_{}", rows.len()));
        *self = Self::with_names(rows, self.unit, names)?;
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "# unit={}", self.unit)?;
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["after_task".to_string()];
        header.extend(self.names.iter().cloned());
        out.write_record(&header)?;
        let t = self.num_tasks();
        for (j, row) in self.rows.iter().enumerate() {
            let mut cells = vec![(j + 1).to_string()];
            cells.extend(row.iter().map(f64::to_string));
            cells.resize(t + 1, String::new());
            out.write_record(&cells)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn from_csv_str(text: &str) -> Result<Self> {
        let mut unit = None;
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            match line.strip_prefix('#') {
                Some(comment) => {
                    if let Some(value) = comment.trim().strip_prefix("unit=") {
                        unit = Some(match value.trim() {
                            "percent" => Unit::Percent,
                            "fraction" => Unit::Fraction,
                            other => {
                                return Err(Error::Malformed {
                                    row: 0,
                                    msg: format!("unknown unit {other:?}"),
                                })
                            }
                        });
                    }
                }
                None => break,
            }
        }

        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
        let indexed = header.first().map(String::as_str) == Some("after_task");
        let names: Vec<String> = if indexed {
            header[1..].to_vec()
        } else {
            header
        };
        if names.is_empty() {
            return Err(Error::Malformed {
                row: 1,
                msg: "header names no tasks".into(),
            });
        }

        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record?;
            let line = record.position().map_or(0, |p| p.line() as usize);
            let malformed = |msg: String| Error::Malformed { row: line, msg };
            let j = rows.len();
            let mut cells: Vec<&str> = record.iter().collect();
            if indexed {
                let index = cells.first().copied().unwrap_or_default();
                if index.parse::<usize>().ok() != Some(j + 1) {
                    return Err(malformed(format!(
                        "expected after_task {}, found {index:?}",
                        j + 1
                    )));
                }
                cells.remove(0);
            }
            if cells.iter().all(|c| c.is_empty()) {
                continue;
            }
            if cells.len() > names.len() {
                return Err(malformed(format!(
                    "{} cells but only {} tasks",
                    cells.len(),
                    names.len()
                )));
            }
            if cells.len() < j + 1 || cells[j + 1..].iter().any(|c| !c.is_empty()) {
                return Err(malformed(format!(
                    "row {} must have exactly {} leading values",
                    j + 1,
                    j + 1
                )));
            }
            let values = cells[..=j]
                .iter()
                .map(|c| {
                    c.parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| malformed(format!("not a number: {c:?}")))
                })
                .collect::<Result<Vec<f64>>>()?;
            rows.push(values);
        }
        if rows.is_empty() {
            return Err(Error::Malformed {
                row: 1,
                msg: "no data rows".into(),
            });
        }

        let unit = unit.unwrap_or_else(|| {
            if rows.iter().flatten().any(|&v| v > 1.0) {
                Unit::Percent
            } else {
                Unit::Fraction
            }
        });
        let names = names[..rows.len()].to_vec();
        Self::with_names(rows, unit, names)
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_csv_str(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub unit: Unit,
    pub names: Vec<String>,
    pub avg_acc: f64,
    pub new_acc: f64,
    /// Absent for a single task.
    pub forgetting: Option<f64>,
    pub ada: Vec<f64>,
    /// Absent for the last task.
    pub adf: Vec<Option<f64>>,
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values
        .into_iter()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n as f64
}

pub fn compute_metrics(m: &AccuracyMatrix) -> MetricsReport {
    let t = m.num_tasks();
    let last = t - 1;
    let running_max = |task: usize, through: usize| {
        (task..=through)
            .map(|j| m.get(j, task))
            .fold(f64::NEG_INFINITY, f64::max)
    };

    let avg_acc = mean((0..t).map(|i| m.get(last, i)));
    let new_acc = mean((0..t).map(|i| m.get(i, i)));
    let forgetting =
        (t > 1).then(|| mean((0..last).map(|i| running_max(i, last - 1) - m.get(last, i))));
    let ada = (0..t)
        .map(|task| mean((task..t).map(|i| m.get(i, task))))
        .collect();
    let adf = (0..t)
        .map(|task| {
            (task < last)
                .then(|| mean((task + 1..t).map(|i| running_max(task, i - 1) - m.get(i, task))))
        })
        .collect();

    MetricsReport {
        unit: m.unit(),
        names: m.names().to_vec(),
        avg_acc,
        new_acc,
        forgetting,
        ada,
        adf,
    }
}

/// Rounds half away from zero after snapping off binary representation noise,
/// so 61.885 prints as 61.89.
pub fn round_display(x: f64, places: usize) -> f64 {
    let factor = 10f64.powi(places as i32);
    let snapped = (x * factor * 1e6).round() / 1e6;
    snapped.round() / factor
}

impl MetricsReport {
    fn fmt_value(&self, v: f64, places: Option<usize>) -> String {
        match places {
            Some(p) => format!("{:.*}", p, round_display(v, p)),
            None => v.to_string(),
        }
    }

    fn lines(&self, places: Option<usize>) -> Vec<(String, String)> {
        let opt =
            |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| self.fmt_value(x, places));
        let mut out = vec![
            ("unit".to_string(), self.unit.to_string()),
            ("tasks".to_string(), self.names.len().to_string()),
            ("avg_acc".to_string(), self.fmt_value(self.avg_acc, places)),
            ("forgetting".to_string(), opt(self.forgetting)),
            ("new_acc".to_string(), self.fmt_value(self.new_acc, places)),
        ];
        for (name, v) in self.names.iter().zip(&self.ada) {
            out.push((format!("ada.{name}"), self.fmt_value(*v, places)));
        }
        for (name, v) in self.names.iter().zip(&self.adf) {
            out.push((format!("adf.{name}"), opt(*v)));
        }
        out
    }

    /// `key=value` lines at full precision.
    pub fn to_key_value(&self) -> String {
        self.render(None)
    }

    /// `key=value` lines rounded for display.
    pub fn summary(&self) -> String {
        self.render(Some(self.unit.display_places()))
    }

    fn render(&self, places: Option<usize>) -> String {
        let mut s = String::new();
        for (k, v) in self.lines(places) {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    /// `metric,value` rows at full precision.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["metric", "value"])?;
        for (k, v) in self.lines(None) {
            out.write_record([k, v])?;
        }
        out.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn type1() -> AccuracyMatrix {
        AccuracyMatrix::new(
            vec![
                vec![80.19],
                vec![78.24, 59.69],
                vec![77.74, 57.96, 61.58],
                vec![78.00, 58.34, 60.52, 52.00],
                vec![76.66, 58.10, 60.00, 36.47, 66.78],
                vec![77.15, 56.54, 60.18, 47.16, 65.83, 64.45],
            ],
            Unit::Percent,
        )
        .unwrap()
    }

    #[test]
    fn type1_table_reproduces_reported_metrics() {
        let r = compute_metrics(&type1());
        assert!((r.avg_acc - 61.89).abs() <= 0.01);
        assert!((r.forgetting.unwrap() - 2.68).abs() <= 0.01);
        assert!((r.new_acc - 64.12).abs() <= 0.01);
        assert!((r.ada[0] - 78.00).abs() <= 0.01);
        assert!(r.adf[5].is_none());
    }

    #[test]
    fn adf_by_hand() {
        // column 0: 80.19, 78.24, 77.74, 78.00, 76.66, 77.15; running max stays 80.19
        let r = compute_metrics(&type1());
        let expected = [78.24, 77.74, 78.00, 76.66, 77.15]
            .iter()
            .map(|v| 80.19 - v)
            .sum::<f64>()
            / 5.0;
        assert!((r.adf[0].unwrap() - expected).abs() < 1e-12);
        // column 3: 52.00, 36.47, 47.16
        let expected = ((52.00 - 36.47) + (52.00 - 47.16)) / 2.0;
        assert!((r.adf[3].unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn single_task() {
        let r = compute_metrics(&AccuracyMatrix::new(vec![vec![0.7]], Unit::Fraction).unwrap());
        assert_eq!(r.avg_acc, 0.7);
        assert_eq!(r.new_acc, 0.7);
        assert!(r.forgetting.is_none());
        assert!(r.summary().contains("forgetting=n/a"));
    }

    #[test]
    fn matrix_validation() {
        assert!(AccuracyMatrix::new(vec![], Unit::Percent).is_err());
        assert!(AccuracyMatrix::new(vec![vec![1.0, 2.0]], Unit::Percent).is_err());
        assert!(AccuracyMatrix::new(vec![vec![1.5]], Unit::Fraction).is_err());
        assert!(AccuracyMatrix::new(vec![vec![f64::NAN]], Unit::Fraction).is_err());
    }

    #[test]
    fn display_rounding() {
        assert_eq!(round_display(61.885, 2), 61.89);
        assert_eq!(round_display(64.115, 2), 64.12);
        assert_eq!(round_display(2.676, 2), 2.68);
        assert_eq!(round_display(-0.125, 2), -0.13);
        let r = compute_metrics(&type1());
        let s = r.summary();
        assert!(s.contains("avg_acc=61.89\n"), "{s}");
        assert!(s.contains("forgetting=2.68\n"));
        assert!(s.contains("new_acc=64.12\n"));
    }

    #[test]
    fn fixture_csv_with_blank_upper_triangle() {
        let text = "ScienceQA,TextVQA,GQA\n80.0,,\n78.0,60.0,\n77.0,58.0,61.0\n";
        let m = AccuracyMatrix::from_csv_str(text).unwrap();
        assert_eq!(m.unit(), Unit::Percent);
        assert_eq!(m.names()[1], "TextVQA");
        assert_eq!(m.get(2, 1), 58.0);
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let m = AccuracyMatrix::new(
            vec![vec![0.1 + 0.2], vec![1.0 / 3.0, 0.875]],
            Unit::Fraction,
        )
        .unwrap();
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("# unit=fraction\nafter_task,task_1,task_2\n1,"));
        let back = AccuracyMatrix::from_csv_str(&text).unwrap();
        assert_eq!(back, m);
        assert_eq!(compute_metrics(&back), compute_metrics(&m));
    }

    #[test]
    fn malformed_rows_are_named() {
        let err = AccuracyMatrix::from_csv_str("a,b\n1.0,\n2.0,x\n").unwrap_err();
        assert!(matches!(err, Error::Malformed { row: 3, .. }), "{err:?}");
        let err = AccuracyMatrix::from_csv_str("a,b\n1.0,2.0\n").unwrap_err();
        assert!(matches!(err, Error::Malformed { row: 2, .. }), "{err:?}");
        let err = AccuracyMatrix::from_csv_str("after_task,a,b\n2,0.5,\n").unwrap_err();
        assert!(matches!(err, Error::Malformed { row: 2, .. }), "{err:?}");
        assert!(AccuracyMatrix::from_csv_str("a,b\n").is_err());
    }

    #[test]
    fn report_writers() {
        let r = compute_metrics(&type1());
        assert!(r.to_key_value().contains("ada.task_1="));
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("metric,value\nunit,percent\n"));
        assert!(text.contains("adf.task_6,n/a\n"));
    }

    fn matrix_strategy() -> impl Strategy<Value = Vec<Vec<f64>>> {
        (1usize..7).prop_flat_map(|t| {
            (0..t)
                .map(|j| prop::collection::vec(0.0f64..100.0, j + 1))
                .collect::<Vec<_>>()
        })
    }

    proptest! {
        #[test]
        fn constant_columns_have_no_forgetting(diag in prop::collection::vec(0.0f64..100.0, 1..8)) {
            let rows = (0..diag.len()).map(|j| diag[..=j].to_vec()).collect();
            let r = compute_metrics(&AccuracyMatrix::new(rows, Unit::Percent).unwrap());
            if diag.len() > 1 {
                prop_assert_eq!(r.forgetting, Some(0.0));
            }
            prop_assert!(r.adf.iter().flatten().all(|&v| v == 0.0));
        }

        #[test]
        fn forgetting_nonnegative_without_backward_transfer(rows in matrix_strategy()) {
            // Cap every final-row entry at its running maximum.
            let mut rows = rows;
            let t = rows.len();
            let (last, earlier) = rows.split_last_mut().expect("at least one row");
            for (i, v) in last.iter_mut().enumerate().take(t - 1) {
                let max = earlier[i..].iter().map(|r| r[i]).fold(f64::NEG_INFINITY, f64::max);
                *v = v.min(max);
            }
            let m = AccuracyMatrix::new(rows.clone(), Unit::Percent).unwrap();
            let r = compute_metrics(&m);
            if let Some(f) = r.forgetting {
                prop_assert!(f >= 0.0);
                let any_drop = (0..t - 1).any(|i| {
                    let max = (i..t - 1).map(|j| rows[j][i]).fold(f64::NEG_INFINITY, f64::max);
                    rows[t - 1][i] < max
                });
                prop_assert_eq!(f > 0.0, any_drop);
            }
        }

        #[test]
        fn repeating_final_row_keeps_forgetting(rows in matrix_strategy(), extra in 0.0f64..100.0) {
            let t = rows.len();
            prop_assume!(t >= 2);
            let before = compute_metrics(&AccuracyMatrix::new(rows.clone(), Unit::Percent).unwrap());
            let mut longer = rows.clone();
            let mut last = rows[t - 1].clone();
            last.push(extra);
            longer.push(last);
            let after = compute_metrics(&AccuracyMatrix::new(longer, Unit::Percent).unwrap());
            // The repeated row adds no drop; the extra task contributes a zero
            // term, so only the averaging denominator changes.
            let max_through = |i: usize, last: usize| (i..=last).map(|j| rows[j][i]).fold(f64::NEG_INFINITY, f64::max);
            let old_terms: f64 = (0..t - 1).map(|i| max_through(i, t - 2) - rows[t - 1][i]).sum();
            let new_terms: f64 = (0..t - 1).map(|i| max_through(i, t - 1) - rows[t - 1][i]).sum();
            prop_assert!((before.forgetting.unwrap() * (t - 1) as f64 - old_terms).abs() < 1e-9);
            prop_assert!((after.forgetting.unwrap() * t as f64 - new_terms).abs() < 1e-9);
            if old_terms >= 0.0 && (0..t - 1).all(|i| rows[t - 1][i] <= max_through(i, t - 2)) {
                prop_assert!((new_terms - old_terms).abs() < 1e-9);
            }
            let avg = (rows[t - 1].iter().sum::<f64>() + extra) / (t + 1) as f64;
            prop_assert!((after.avg_acc - avg).abs() < 1e-9);
        }
    }
}
