//! Accuracy, multi-seed aggregation and CSV/text reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Fraction of `ids` whose prediction equals its label.
pub fn accuracy(predictions: &[usize], labels: &[Option<usize>], ids: &[usize]) -> Result<f64> {
    if ids.is_empty() {
        return Err(Error::Contract("accuracy over an empty id set".into()));
    }
    let mut correct = 0usize;
    for &i in ids {
        let (Some(&pred), Some(&label)) = (predictions.get(i), labels.get(i)) else {
            return Err(Error::Contract(format!("id {i} out of range")));
        };
        if label == Some(pred) {
            correct += 1;
        }
    }
    Ok(correct as f64 / ids.len() as f64)
}

/// One finished (config, seed) run; also a row of `metrics.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub dataset: String,
    pub teacher: String,
    pub method: String,
    pub setting: String,
    pub seed: u64,
    pub test_acc: f64,
    pub val_acc: f64,
    pub epochs: usize,
    pub seconds: f64,
}

pub const METRICS_HEADER: &str = "dataset,teacher,method,setting,seed,test_acc,val_acc,epochs,seconds";

/// (dataset, teacher, method, setting).
pub type ConfigKey = (String, String, String, String);

impl RunRecord {
    pub fn config_key(&self) -> ConfigKey {
        (
            self.dataset.clone(),
            self.teacher.clone(),
            self.method.clone(),
            self.setting.clone(),
        )
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{:.6},{:.6},{},{:.3}",
            self.dataset,
            self.teacher,
            self.method,
            self.setting,
            self.seed,
            self.test_acc,
            self.val_acc,
            self.epochs,
            self.seconds
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
    pub n: usize,
}

impl Summary {
    /// `mean±std` in percent, two decimals.
    pub fn percent(&self) -> String {
        format!("{:.2}±{:.2}", 100.0 * self.mean, 100.0 * self.std)
    }
}

/// Mean and sample standard deviation. Values are summed in sorted order so
/// the result does not depend on input order.
pub fn aggregate(values: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return Err(Error::Contract("aggregate over zero records".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mean = sorted.iter().sum::<f64>() / n as f64;
    let std = if n < 2 {
        0.0
    } else {
        let mut dev: Vec<f64> = sorted.iter().map(|v| (v - mean) * (v - mean)).collect();
        dev.sort_by(f64::total_cmp);
        (dev.iter().sum::<f64>() / (n - 1) as f64).sqrt()
    };
    Ok(Summary { mean, std, n })
}

/// Test-accuracy summary per configuration.
pub fn summarize(records: &[RunRecord]) -> Result<BTreeMap<ConfigKey, Summary>> {
    let mut groups: BTreeMap<ConfigKey, Vec<f64>> = BTreeMap::new();
    for r in records {
        groups.entry(r.config_key()).or_default().push(r.test_acc);
    }
    groups.into_iter().map(|(k, v)| Ok((k, aggregate(&v)?))).collect()
}

pub const REPORT_HEADER: &str = "dataset,teacher,method,setting,mean,std,n";

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub csv: String,
    pub table: String,
}

/// One row per configuration plus, for each `(baseline, candidate)` method
/// pair sharing dataset/teacher/setting, a difference line in the table.
pub fn emit_report(records: &[RunRecord], comparisons: &[(&str, &str)]) -> Result<Report> {
    let summary = summarize(records)?;
    let mut csv = String::from(REPORT_HEADER);
    csv.push('\n');
    let mut table = format!("{:<12} {:<8} {:<20} {:<6} {:>14} {:>3}\n", "dataset", "teacher", "method", "set", "test acc %", "n");
    for ((dataset, teacher, method, setting), s) in &summary {
        let _ = writeln!(csv, "{dataset},{teacher},{method},{setting},{:.6},{:.6},{}", s.mean, s.std, s.n);
        let _ = writeln!(
            table,
            "{dataset:<12} {teacher:<8} {method:<20} {setting:<6} {:>14} {:>3}",
            s.percent(),
            s.n
        );
    }
    for &(base, cand) in comparisons {
        for ((dataset, teacher, method, setting), s) in &summary {
            if method != base {
                continue;
            }
            let key = (dataset.clone(), teacher.clone(), cand.to_string(), setting.clone());
            if let Some(c) = summary.get(&key) {
                let _ = writeln!(
                    table,
                    "{dataset} {teacher} {setting}: {cand} - {base} = {:+.2} points",
                    100.0 * (c.mean - s.mean)
                );
            }
        }
    }
    Ok(Report { csv, table })
}

/// Axis of a parameter sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    Noise,
    Gamma,
    Kernel,
    PeK,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::Noise => "noise",
            SweepAxis::Gamma => "gamma",
            SweepAxis::Kernel => "kernel",
            SweepAxis::PeK => "pe-k",
        }
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noise" => Ok(SweepAxis::Noise),
            "gamma" => Ok(SweepAxis::Gamma),
            "kernel" => Ok(SweepAxis::Kernel),
            "pe-k" => Ok(SweepAxis::PeK),
            other => Err(Error::Config(format!("unknown sweep axis `{other}`"))),
        }
    }
}

/// Method label carrying a sweep coordinate, e.g. `kmp@gamma=0.5`.
pub fn sweep_tag(method: &str, axis: SweepAxis, x: f64) -> String {
    format!("{method}@{}={x}", axis.as_str())
}

/// Inverse of [`sweep_tag`]; `None` for untagged methods.
pub fn parse_sweep_tag(tag: &str) -> Option<(&str, SweepAxis, f64)> {
    let (method, rest) = tag.split_once('@')?;
    let (axis, x) = rest.split_once('=')?;
    Some((method, axis.parse().ok()?, x.parse().ok()?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub method: String,
    pub x: f64,
    pub summary: Summary,
}

/// Groups tagged records on `axis` into points sorted by `x`, then method.
pub fn sweep_points(records: &[RunRecord], axis: SweepAxis) -> Result<Vec<SweepPoint>> {
    let mut groups: BTreeMap<(String, u64), (f64, Vec<f64>)> = BTreeMap::new();
    for r in records {
        if let Some((method, a, x)) = parse_sweep_tag(&r.method) {
            if a == axis {
                groups
                    .entry((method.to_string(), x.to_bits()))
                    .or_insert_with(|| (x, Vec::new()))
                    .1
                    .push(r.test_acc);
            }
        }
    }
    let mut points = groups
        .into_iter()
        .map(|((method, _), (x, v))| {
            Ok(SweepPoint {
                method,
                x,
                summary: aggregate(&v)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    points.sort_by(|a, b| a.x.total_cmp(&b.x).then_with(|| a.method.cmp(&b.method)));
    Ok(points)
}

pub const SWEEP_HEADER: &str = "x,method,mean,std,n";

pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut csv = String::from(SWEEP_HEADER);
    csv.push('\n');
    for p in points {
        let _ = writeln!(csv, "{},{},{:.6},{:.6},{}", p.x, p.method, p.summary.mean, p.summary.std, p.summary.n);
    }
    csv
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(method: &str, seed: u64, acc: f64) -> RunRecord {
        RunRecord {
            dataset: "cora".into(),
            teacher: "gcn".into(),
            method: method.into(),
            setting: "trans".into(),
            seed,
            test_acc: acc,
            val_acc: acc,
            epochs: 1,
            seconds: 0.0,
        }
    }

    #[test]
    fn accuracy_counts() {
        let labels = vec![Some(0), Some(1), Some(1), Some(0)];
        assert_eq!(accuracy(&[0, 1, 1, 0], &labels, &[0, 1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 0, 1, 1], &labels, &[0, 1, 2, 3]).unwrap(), 0.5);
        assert!(accuracy(&[0], &labels, &[]).is_err());
        assert!(accuracy(&[0], &labels, &[7]).is_err());
    }

    #[test]
    fn aggregate_values() {
        let s = aggregate(&[0.78, 0.80]).unwrap();
        assert!((s.mean - 0.79).abs() < 1e-12);
        assert!((s.std - 0.02f64 / 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(aggregate(&[0.5, 0.5, 0.5]).unwrap().std, 0.0);
        assert!(aggregate(&[]).is_err());
        let f = Summary {
            mean: 0.7903,
            std: 0.0119,
            n: 10,
        };
        assert_eq!(f.percent(), "79.03±1.19");
    }

    #[test]
    fn report_rows() {
        let empty = emit_report(&[], &[]).unwrap();
        assert_eq!(empty.csv, format!("{REPORT_HEADER}\n"));
        let recs = vec![rec("kmp", 0, 0.8), rec("glnn", 0, 0.7), rec("kmp", 1, 0.82)];
        let r = emit_report(&recs, &[("glnn", "kmp")]).unwrap();
        let lines: Vec<&str> = r.csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("cora,gcn,glnn,trans,0.700000"));
        assert!(lines[2].starts_with("cora,gcn,kmp,trans,0.810000"));
        assert!(r.table.contains("kmp - glnn = +11.00 points"));
    }

    #[test]
    fn sweep_sorted_by_x() {
        let recs = vec![
            rec(&sweep_tag("kmp", SweepAxis::Gamma, 3.0), 0, 0.7),
            rec(&sweep_tag("kmp", SweepAxis::Gamma, 0.1), 0, 0.8),
            rec(&sweep_tag("kmp", SweepAxis::Noise, 0.1), 0, 0.8),
            rec("kmp", 0, 0.8),
        ];
        let pts = sweep_points(&recs, SweepAxis::Gamma).unwrap();
        assert_eq!(pts.iter().map(|p| p.x).collect::<Vec<_>>(), vec![0.1, 3.0]);
        let csv = sweep_csv(&pts);
        assert!(csv.lines().nth(1).unwrap().starts_with("0.1,kmp,0.8"));
        assert_eq!(parse_sweep_tag("glnn@noise=0.3"), Some(("glnn", SweepAxis::Noise, 0.3)));
        assert_eq!(parse_sweep_tag("glnn"), None);
    }
}
