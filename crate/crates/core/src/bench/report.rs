//! Experiment reports: one row per (task, method, setting, split) cell,
//! CSV/JSON writers and per-method aggregates.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bench::metrics::{average_rank, pearson};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub task: String,
    pub method: String,
    /// Train-size setting, `full` or a row count.
    pub setting: String,
    pub split: usize,
    pub test_mae: f64,
    /// Test MAE divided by the standard deviation of the task's full train
    /// targets.
    pub normalized_mae: f64,
}

impl ReportRow {
    fn key(&self) -> (&str, &str, &str, usize) {
        (&self.task, &self.method, &self.setting, self.split)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub setting: String,
    pub cells: usize,
    pub mean_test_mae: f64,
    pub mean_normalized_mae: f64,
    /// Mean over tasks of the method's rank among methods in the same
    /// setting, ranking by split-averaged test MAE.
    pub average_rank: f64,
    pub rank_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub experiment: String,
    pub aggregates: Vec<MethodSummary>,
}

impl ReportSummary {
    pub fn get(&self, method: &str, setting: &str) -> Option<&MethodSummary> {
        self.aggregates
            .iter()
            .find(|a| a.method == method && a.setting == setting)
    }
}

/// Rows are kept sorted by (task, method, setting, split), so the report
/// does not depend on the order cells finished in.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentReport {
    pub experiment: String,
    rows: Vec<ReportRow>,
}

impl ExperimentReport {
    pub fn new(experiment: impl Into<String>, mut rows: Vec<ReportRow>) -> Result<Self> {
        rows.sort_by(|a, b| a.key().cmp(&b.key()));
        if let Some(w) = rows.windows(2).find(|w| w[0].key() == w[1].key()) {
            return Err(Error::InvalidInput(format!("duplicate report cell {:?}", w[0].key())));
        }
        Ok(ExperimentReport {
            experiment: experiment.into(),
            rows,
        })
    }

    pub fn rows(&self) -> &[ReportRow] {
        &self.rows
    }

    pub fn settings(&self) -> BTreeSet<&str> {
        self.rows.iter().map(|r| r.setting.as_str()).collect()
    }

    /// Split-averaged `metric` per task and method within one setting.
    pub fn task_means(
        &self,
        setting: &str,
        metric: impl Fn(&ReportRow) -> f64,
    ) -> BTreeMap<String, BTreeMap<String, f64>> {
        let mut sums: BTreeMap<String, BTreeMap<String, (f64, usize)>> = BTreeMap::new();
        for r in self.rows.iter().filter(|r| r.setting == setting) {
            let e = sums
                .entry(r.task.clone())
                .or_default()
                .entry(r.method.clone())
                .or_insert((0.0, 0));
            e.0 += metric(r);
            e.1 += 1;
        }
        sums.into_iter()
            .map(|(t, by)| (t, by.into_iter().map(|(m, (s, n))| (m, s / n as f64)).collect()))
            .collect()
    }

    pub fn summary(&self) -> ReportSummary {
        let mut aggregates = vec![];
        for setting in self.settings() {
            let ranks = average_rank(&self.task_means(setting, |r| r.test_mae));
            let mut by_method: BTreeMap<&str, Vec<&ReportRow>> = BTreeMap::new();
            for r in self.rows.iter().filter(|r| r.setting == setting) {
                by_method.entry(&r.method).or_default().push(r);
            }
            for (method, rows) in by_method {
                let n = rows.len() as f64;
                let (avg, std) = ranks[method];
                aggregates.push(MethodSummary {
                    method: method.to_string(),
                    setting: setting.to_string(),
                    cells: rows.len(),
                    mean_test_mae: rows.iter().map(|r| r.test_mae).sum::<f64>() / n,
                    mean_normalized_mae: rows.iter().map(|r| r.normalized_mae).sum::<f64>() / n,
                    average_rank: avg,
                    rank_std: std,
                });
            }
        }
        ReportSummary {
            experiment: self.experiment.clone(),
            aggregates,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("task,method,setting,split,test_mae,normalized_mae\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.task, r.method, r.setting, r.split, r.test_mae, r.normalized_mae
            ));
        }
        out
    }

    /// Writes `<experiment>.csv` and `<experiment>_summary.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let csv = dir.join(format!("{}.csv", self.experiment));
        std::fs::write(&csv, self.to_csv())?;
        let json = dir.join(format!("{}_summary.json", self.experiment));
        std::fs::write(&json, serde_json::to_string_pretty(&self.summary())? + "\n")?;
        Ok(vec![csv, json])
    }
}

/// One AMC weight, for heat-map style exports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightRow {
    pub task: String,
    pub split: usize,
    pub module: String,
    pub weight: f64,
}

pub fn weights_csv(rows: &[WeightRow]) -> String {
    let mut sorted: Vec<&WeightRow> = rows.iter().collect();
    sorted.sort_by(|a, b| (&a.task, a.split, &a.module).cmp(&(&b.task, b.split, &b.module)));
    let mut out = String::from("task,split,module,weight\n");
    for r in sorted {
        out.push_str(&format!("{},{},{},{}\n", r.task, r.split, r.module, r.weight));
    }
    out
}

/// Before/after numbers for one downstream (task, split) whose AMC run
/// selected at least one newly added module.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinualRow {
    pub task: String,
    pub split: usize,
    pub proxy_error_before: f64,
    pub proxy_error_after: f64,
    pub mae_before: f64,
    pub mae_after: f64,
    /// `(mae_before − mae_after)` over the task's train-target std.
    pub normalized_mae_decrease: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinualReport {
    pub rows: Vec<ContinualRow>,
    /// Correlation of proxy-error decrease with normalized MAE decrease;
    /// `None` when it is undefined (fewer than two rows or zero variance).
    pub pearson: Option<f64>,
    /// (task, split) pairs examined, affected or not.
    pub cells_examined: usize,
}

impl ContinualReport {
    pub fn new(mut rows: Vec<ContinualRow>, cells_examined: usize) -> Self {
        rows.sort_by(|a, b| (&a.task, a.split).cmp(&(&b.task, b.split)));
        let x: Vec<f64> = rows
            .iter()
            .map(|r| r.proxy_error_before - r.proxy_error_after)
            .collect();
        let y: Vec<f64> = rows.iter().map(|r| r.normalized_mae_decrease).collect();
        let pearson = pearson(&x, &y).ok();
        ContinualReport {
            rows,
            pearson,
            cells_examined,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "task,split,proxy_error_before,proxy_error_after,mae_before,mae_after,normalized_mae_decrease\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.task,
                r.split,
                r.proxy_error_before,
                r.proxy_error_after,
                r.mae_before,
                r.mae_after,
                r.normalized_mae_decrease
            ));
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let csv = dir.join("continual.csv");
        std::fs::write(&csv, self.to_csv())?;
        let json = dir.join("continual_summary.json");
        std::fs::write(&json, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(vec![csv, json])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(task: &str, method: &str, split: usize, mae: f64) -> ReportRow {
        ReportRow {
            task: task.into(),
            method: method.into(),
            setting: "full".into(),
            split,
            test_mae: mae,
            normalized_mae: mae / 2.0,
        }
    }

    fn sample() -> Vec<ReportRow> {
        vec![
            row("t1", "a", 0, 1.0),
            row("t1", "b", 0, 2.0),
            row("t1", "c", 0, 3.0),
            row("t2", "a", 0, 5.0),
            row("t2", "b", 0, 4.0),
            row("t2", "c", 0, 4.0),
            row("t1", "a", 1, 1.5),
            row("t1", "b", 1, 2.5),
            row("t1", "c", 1, 0.5),
            row("t2", "a", 1, 5.0),
            row("t2", "b", 1, 4.0),
            row("t2", "c", 1, 4.0),
        ]
    }

    #[test]
    fn ranks_per_task_sum_to_triangular_number() {
        let report = ExperimentReport::new("main", sample()).unwrap();
        for by_method in report.task_means("full", |r| r.test_mae).values() {
            let values: Vec<f64> = by_method.values().copied().collect();
            let sum: f64 = crate::bench::metrics::rank_with_ties(&values).iter().sum();
            assert_eq!(sum, 6.0);
        }
        let s = report.summary();
        assert_eq!(s.aggregates.len(), 3);
        let total: f64 = s.aggregates.iter().map(|a| a.average_rank).sum();
        assert!((total - 6.0).abs() < 1e-12);
        // t1 means: a 1.25, b 2.25, c 1.75; t2: a 5, b 4, c 4.
        assert_eq!(s.get("a", "full").unwrap().average_rank, 2.0);
        assert_eq!(s.get("b", "full").unwrap().average_rank, 2.25);
        assert_eq!(s.get("c", "full").unwrap().average_rank, 1.75);
    }

    #[test]
    fn single_method_ranks_first() {
        let rows: Vec<ReportRow> = sample().into_iter().filter(|r| r.method == "b").collect();
        let s = ExperimentReport::new("main", rows).unwrap().summary();
        assert_eq!(s.aggregates.len(), 1);
        assert_eq!(s.aggregates[0].average_rank, 1.0);
        assert_eq!(s.aggregates[0].rank_std, 0.0);
    }

    #[test]
    fn row_order_does_not_matter() {
        let mut shuffled = sample();
        shuffled.reverse();
        shuffled.swap(2, 7);
        let a = ExperimentReport::new("main", sample()).unwrap();
        let b = ExperimentReport::new("main", shuffled).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
        assert_eq!(a.summary(), b.summary());
    }

    #[test]
    fn duplicate_cells_rejected() {
        let mut rows = sample();
        rows.push(row("t1", "a", 0, 9.0));
        assert!(ExperimentReport::new("main", rows).is_err());
    }

    #[test]
    fn continual_pearson() {
        let mk = |t: &str, dp: f64, dm: f64| ContinualRow {
            task: t.into(),
            split: 0,
            proxy_error_before: 1.0,
            proxy_error_after: 1.0 - dp,
            mae_before: 1.0,
            mae_after: 1.0 - dm,
            normalized_mae_decrease: dm,
        };
        let r = ContinualReport::new(vec![mk("a", 1.0, 2.0), mk("b", 2.0, 4.0), mk("c", 3.0, 6.0)], 3);
        assert!((r.pearson.unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(ContinualReport::new(vec![mk("a", 1.0, 1.0)], 4).pearson, None);
    }
}
