use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::text::TaskKind;
use crate::{Error, Result};

/// Metric name to one value per seed, aligned with [`Report::seeds`].
pub type MethodMetrics = BTreeMap<String, Vec<f64>>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamCounts {
    pub teacher: usize,
    pub student: usize,
    /// `teacher / student`.
    pub ratio: f64,
}

/// Test-split comparison of the four methods over one or more seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Report {
    pub task: TaskKind,
    pub seeds: Vec<u64>,
    pub config_hash: String,
    /// Which augmented-distillation variant fills `l2a`, e.g. `l2a-wo-src`.
    pub variant: String,
    pub student_ft: MethodMetrics,
    pub kd_noaug: MethodMetrics,
    pub l2a: MethodMetrics,
    pub teacher_ft: MethodMetrics,
    pub param_counts: ParamCounts,
}

/// The metric used for checkpoint selection and headline comparisons.
pub fn primary_metric(task: TaskKind) -> &'static str {
    match task {
        TaskKind::Classification => "accuracy",
        TaskKind::Regression => "pearson",
    }
}

impl Report {
    /// Method rows in display order, the `l2a` row named by its variant.
    pub fn methods(&self) -> [(&str, &MethodMetrics); 4] {
        [
            ("student_ft", &self.student_ft),
            ("kd_noaug", &self.kd_noaug),
            (&self.variant, &self.l2a),
            ("teacher_ft", &self.teacher_ft),
        ]
    }

    /// Per-seed values of the primary metric for `method`.
    pub fn primary(&self, method: &str) -> Option<&[f64]> {
        let metric = primary_metric(self.task);
        self.methods()
            .into_iter()
            .find(|(m, _)| *m == method)
            .and_then(|(_, mm)| mm.get(metric))
            .map(Vec::as_slice)
    }

    /// Concatenates per-seed reports of one configuration.
    pub fn merge(reports: &[Report]) -> Result<Report> {
        let first = reports
            .first()
            .ok_or_else(|| Error::InvalidArgument("no reports to merge".into()))?;
        let mut out = Report {
            seeds: Vec::new(),
            student_ft: MethodMetrics::new(),
            kd_noaug: MethodMetrics::new(),
            l2a: MethodMetrics::new(),
            teacher_ft: MethodMetrics::new(),
            ..first.clone()
        };
        for r in reports {
            if r.task != first.task || r.variant != first.variant {
                return Err(Error::InvalidArgument(format!(
                    "cannot merge a {:?} `{}` report into a {:?} `{}` report",
                    r.task, r.variant, first.task, first.variant
                )));
            }
            out.seeds.extend(&r.seeds);
            for (dst, src) in [
                (&mut out.student_ft, &r.student_ft),
                (&mut out.kd_noaug, &r.kd_noaug),
                (&mut out.l2a, &r.l2a),
                (&mut out.teacher_ft, &r.teacher_ft),
            ] {
                for (k, v) in src {
                    dst.entry(k.clone()).or_default().extend(v);
                }
            }
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Report> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

/// Mean and sample standard deviation; a single value has stdev 0.
pub fn mean_stdev(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: String,
    pub metric: String,
    pub mean: f64,
    pub stdev: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateTable {
    pub task: TaskKind,
    pub rows: Vec<AggregateRow>,
}

impl AggregateTable {
    pub const CSV_HEADER: &'static str = "method,metric,mean,stdev,n";

    pub fn csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{},{}", r.method, r.metric, r.mean, r.stdev, r.n);
        }
        out
    }

    /// Whitespace-separated columns, one method per line, for plotting.
    pub fn plot_data(&self) -> String {
        let mut metrics: Vec<&str> = self.rows.iter().map(|r| r.metric.as_str()).collect();
        metrics.sort_unstable();
        metrics.dedup();
        let mut out = String::from("# method");
        for m in &metrics {
            let _ = write!(out, " {m}_mean {m}_stdev");
        }
        out.push('\n');
        let mut methods: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !methods.contains(&r.method.as_str()) {
                methods.push(&r.method);
            }
        }
        for method in methods {
            out.push_str(method);
            for m in &metrics {
                match self.rows.iter().find(|r| r.method == method && r.metric == *m) {
                    Some(r) => {
                        let _ = write!(out, " {} {}", r.mean, r.stdev);
                    }
                    None => out.push_str(" nan nan"),
                }
            }
            out.push('\n');
        }
        out
    }

    /// `method metric mean ± stdev (n)` lines for terminals.
    pub fn display(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<24} {:<10} {:.4} ± {:.4} (n={})",
                r.method, r.metric, r.mean, r.stdev, r.n
            );
        }
        out
    }
}

/// Mean ± stdev per method and metric across every seed found in the
/// `report.json` of each directory. Baseline rows shared by several reports
/// are counted once per seed.
pub fn report_aggregate(dirs: &[PathBuf]) -> Result<AggregateTable> {
    if dirs.is_empty() {
        return Err(Error::InvalidArgument("aggregate needs at least one run directory".into()));
    }
    let missing: Vec<PathBuf> =
        dirs.iter().filter(|d| !d.join("report.json").is_file()).cloned().collect();
    if !missing.is_empty() {
        return Err(Error::MissingRuns(missing));
    }
    let reports: Vec<Report> =
        dirs.iter().map(|d| Report::load(&d.join("report.json"))).collect::<Result<_>>()?;
    let task = reports[0].task;
    if let Some((d, r)) = dirs.iter().zip(&reports).find(|(_, r)| r.task != task) {
        return Err(Error::InvalidArgument(format!(
            "mixed tasks: {} is {:?}, {} is {:?}",
            dirs[0].display(),
            task,
            d.display(),
            r.task
        )));
    }

    // (method, metric) -> seed -> value
    let mut order: Vec<(String, String)> = Vec::new();
    let mut cells: BTreeMap<(String, String), BTreeMap<u64, f64>> = BTreeMap::new();
    for r in &reports {
        for (method, metrics) in r.methods() {
            for (metric, values) in metrics {
                let key = (method.to_string(), metric.clone());
                if !cells.contains_key(&key) {
                    order.push(key.clone());
                }
                let cell = cells.entry(key).or_default();
                for (&seed, &v) in r.seeds.iter().zip(values) {
                    match cell.get(&seed) {
                        Some(&old) if old.to_bits() != v.to_bits() => {
                            return Err(Error::InvalidArgument(format!(
                                "conflicting {method} {metric} results for seed {seed}: {old} vs {v}"
                            )));
                        }
                        _ => {
                            cell.insert(seed, v);
                        }
                    }
                }
            }
        }
    }
    let rows = order
        .into_iter()
        .map(|key| {
            let values: Vec<f64> = cells[&key].values().copied().collect();
            let (mean, stdev) = mean_stdev(&values);
            AggregateRow {
                method: key.0,
                metric: key.1,
                mean,
                stdev,
                n: values.len(),
            }
        })
        .collect();
    Ok(AggregateTable { task, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn report(seeds: &[u64], l2a: &[f64], task: TaskKind) -> Report {
        let mm = |v: &[f64]| MethodMetrics::from([("accuracy".to_string(), v.to_vec())]);
        Report {
            task,
            seeds: seeds.to_vec(),
            config_hash: "h".into(),
            variant: "l2a".into(),
            student_ft: mm(&vec![0.5; seeds.len()]),
            kd_noaug: mm(&vec![0.6; seeds.len()]),
            l2a: mm(l2a),
            teacher_ft: mm(&vec![0.9; seeds.len()]),
            param_counts: ParamCounts {
                teacher: 10,
                student: 2,
                ratio: 5.0,
            },
        }
    }

    fn write(dir: &Path, r: &Report) -> PathBuf {
        fs::create_dir_all(dir).unwrap();
        r.save(&dir.join("report.json")).unwrap();
        dir.to_path_buf()
    }

    #[test]
    fn summary_statistics() {
        assert_eq!(mean_stdev(&[0.7]), (0.7, 0.0));
        let (m, s) = mean_stdev(&[1.0, 2.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
    }

    #[test]
    fn five_seeds_give_four_rows() {
        let tmp = tempfile::tempdir().unwrap();
        let seeds = [0, 1, 2, 3, 4];
        let d = write(
            tmp.path(),
            &report(&seeds, &[0.7, 0.8, 0.7, 0.8, 0.75], TaskKind::Classification),
        );
        let t = report_aggregate(&[d]).unwrap();
        assert_eq!(t.rows.len(), 4);
        assert!(t.rows.iter().all(|r| r.n == 5));
        let l2a = t.rows.iter().find(|r| r.method == "l2a").unwrap();
        assert!((l2a.mean - 0.75).abs() < 1e-12);
        assert_eq!(t.csv().lines().count(), 5);
        assert_eq!(t.plot_data().lines().count(), 5);
    }

    #[test]
    fn single_run_has_zero_stdev() {
        let tmp = tempfile::tempdir().unwrap();
        let d = write(tmp.path(), &report(&[3], &[0.8], TaskKind::Classification));
        let t = report_aggregate(&[d]).unwrap();
        assert!(t.rows.iter().all(|r| r.stdev == 0.0));
    }

    #[test]
    fn missing_and_mixed_inputs_fail() {
        let tmp = tempfile::tempdir().unwrap();
        let a = write(&tmp.path().join("a"), &report(&[0], &[0.8], TaskKind::Classification));
        let gone = tmp.path().join("gone");
        match report_aggregate(&[a.clone(), gone.clone()]) {
            Err(Error::MissingRuns(m)) => assert_eq!(m, vec![gone]),
            other => panic!("{other:?}"),
        }
        let b = write(&tmp.path().join("b"), &report(&[1], &[0.8], TaskKind::Regression));
        let e = report_aggregate(&[a, b]).unwrap_err();
        assert!(e.to_string().contains("mixed tasks"), "{e}");
    }

    #[test]
    fn shared_baselines_count_once() {
        let tmp = tempfile::tempdir().unwrap();
        let a = write(&tmp.path().join("a"), &report(&[0, 1], &[0.8, 0.9], TaskKind::Classification));
        let mut r = report(&[0, 1], &[0.7, 0.7], TaskKind::Classification);
        r.variant = "l2a-wo-dark".into();
        let b = write(&tmp.path().join("b"), &r);
        let t = report_aggregate(&[a, b]).unwrap();
        assert_eq!(t.rows.len(), 5);
        assert!(t.rows.iter().all(|r| r.n == 2));
    }

    #[test]
    fn merge_concatenates_seeds() {
        let a = report(&[0], &[0.8], TaskKind::Classification);
        let b = report(&[1], &[0.6], TaskKind::Classification);
        let m = Report::merge(&[a, b]).unwrap();
        assert_eq!(m.seeds, vec![0, 1]);
        assert_eq!(m.primary("l2a").unwrap(), &[0.8, 0.6]);
    }
}
