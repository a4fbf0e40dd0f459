//! Result rows, the JSON summary and report CSVs.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ensembench_core::embed::EmbeddingPoint;
use ensembench_core::eval::{aggregate_runs, mean_std, SensitivityReport};
use serde::Serialize;

use crate::{Error, Result};

pub const CSV_HEADER: &str =
    "dataset,family,depth,width,members,n_per_class,aug,seed,accuracy,mean_sensitivity,wall_seconds";

/// One trained design evaluated at one `(N, seed)`. Optional metrics are
/// written as empty fields.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub dataset: String,
    pub family: String,
    pub depth: usize,
    pub width: usize,
    pub members: usize,
    pub n_per_class: usize,
    pub aug: String,
    pub seed: u64,
    pub accuracy: Option<f64>,
    pub mean_sensitivity: Option<f64>,
    pub wall_seconds: Option<f64>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl ResultRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.dataset,
            self.family,
            self.depth,
            self.width,
            self.members,
            self.n_per_class,
            self.aug,
            self.seed,
            opt(self.accuracy),
            opt(self.mean_sensitivity),
            opt(self.wall_seconds)
        )
    }

    pub fn from_csv(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split(',').collect();
        let bad = |detail: String| Error::format("results row", 0, detail);
        if f.len() != 11 {
            return Err(bad(format!("expected 11 fields, found {}", f.len())));
        }
        let num = |i: usize| {
            f[i].parse::<u64>()
                .map_err(|_| bad(format!("field {} `{}` is not an integer", i, f[i])))
        };
        let real = |i: usize| -> Result<Option<f64>> {
            if f[i].is_empty() {
                return Ok(None);
            }
            f[i].parse()
                .map(Some)
                .map_err(|_| bad(format!("field {} `{}` is not a number", i, f[i])))
        };
        Ok(ResultRow {
            dataset: f[0].into(),
            family: f[1].into(),
            depth: num(2)? as usize,
            width: num(3)? as usize,
            members: num(4)? as usize,
            n_per_class: num(5)? as usize,
            aug: f[6].into(),
            seed: num(7)?,
            accuracy: real(8)?,
            mean_sensitivity: real(9)?,
            wall_seconds: real(10)?,
        })
    }
}

pub fn to_csv(rows: &[ResultRow]) -> String {
    let mut s = format!("{}\n", CSV_HEADER);
    for r in rows {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    s
}

pub fn parse_csv(text: &str) -> Result<Vec<ResultRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::format("results header", 0, "unexpected columns"));
    }
    lines.filter(|l| !l.is_empty()).map(ResultRow::from_csv).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

/// Mean and population std over seeds for one design and `N`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryEntry {
    pub dataset: String,
    pub family: String,
    pub depth: usize,
    pub width: usize,
    pub members: usize,
    pub n_per_class: usize,
    pub aug: String,
    pub seeds: Vec<u64>,
    pub accuracy: Option<Stat>,
    pub mean_sensitivity: Option<Stat>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub fingerprint: String,
    pub entries: Vec<SummaryEntry>,
}

fn stat(values: &[Option<f64>]) -> Option<Stat> {
    let v: Vec<f64> = values.iter().copied().collect::<Option<_>>()?;
    let (mean, std) = mean_std(&v).ok()?;
    Some(Stat { mean, std })
}

/// Groups rows by everything except the seed, in first-appearance order.
pub fn summarize(rows: &[ResultRow], fingerprint: &str) -> Summary {
    let mut order: Vec<(String, String, usize, usize, usize, usize, String)> = Vec::new();
    let mut groups: BTreeMap<usize, Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        let key = (
            r.dataset.clone(),
            r.family.clone(),
            r.depth,
            r.width,
            r.members,
            r.n_per_class,
            r.aug.clone(),
        );
        let idx = order.iter().position(|k| *k == key).unwrap_or_else(|| {
            order.push(key);
            order.len() - 1
        });
        groups.entry(idx).or_default().push(r);
    }
    let entries = groups
        .into_values()
        .map(|g| {
            let acc: Vec<Option<f64>> = g.iter().map(|r| r.accuracy).collect();
            let sens: Vec<Option<f64>> = g.iter().map(|r| r.mean_sensitivity).collect();
            SummaryEntry {
                dataset: g[0].dataset.clone(),
                family: g[0].family.clone(),
                depth: g[0].depth,
                width: g[0].width,
                members: g[0].members,
                n_per_class: g[0].n_per_class,
                aug: g[0].aug.clone(),
                seeds: g.iter().map(|r| r.seed).collect(),
                accuracy: stat(&acc),
                mean_sensitivity: stat(&sens),
            }
        })
        .collect();
    Summary {
        fingerprint: fingerprint.to_string(),
        entries,
    }
}

/// Mean accuracy over seeds for one design, via the run aggregator.
pub fn mean_accuracy(rows: &[&ResultRow]) -> Option<f64> {
    let v: Vec<f64> = rows.iter().map(|r| r.accuracy).collect::<Option<_>>()?;
    aggregate_runs(&v).ok().map(|r| r.mean)
}

/// `sample_id,class,jacobian_frobenius` rows.
pub fn sensitivity_csv(report: &SensitivityReport) -> String {
    let mut s = String::from("sample_id,class,jacobian_frobenius\n");
    for ((id, l), v) in report.sample_ids.iter().zip(&report.labels).zip(&report.values) {
        let _ = writeln!(s, "{},{},{}", id, l, v);
    }
    s
}

pub fn parse_sensitivity_csv(text: &str) -> Result<SensitivityReport> {
    let mut ids = Vec::new();
    let mut labels = Vec::new();
    let mut values = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::format("sensitivity report", 0, format!("line {}: `{}`", i + 1, line));
        if f.len() != 3 {
            return Err(bad());
        }
        ids.push(f[0].parse().map_err(|_| bad())?);
        labels.push(f[1].parse().map_err(|_| bad())?);
        values.push(f[2].parse().map_err(|_| bad())?);
    }
    let (mean, std) = mean_std(&values)?;
    Ok(SensitivityReport {
        sample_ids: ids,
        labels,
        values,
        mean,
        std,
    })
}

/// `sample_id,p1,p2,color` rows.
pub fn embedding_csv(points: &[EmbeddingPoint]) -> String {
    let mut s = String::from("sample_id,p1,p2,color\n");
    for p in points {
        let _ = writeln!(s, "{},{},{},{}", p.sample_id, p.p1, p.p2, p.color.as_f64());
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(seed: u64, acc: f64) -> ResultRow {
        ResultRow {
            dataset: "cifar10".into(),
            family: "resnet".into(),
            depth: 8,
            width: 16,
            members: 5,
            n_per_class: 10,
            aug: "+".into(),
            seed,
            accuracy: Some(acc),
            mean_sensitivity: None,
            wall_seconds: Some(1.5),
        }
    }

    #[test]
    fn csv_round_trip() {
        let rows = vec![row(1, 0.4), row(2, 0.6)];
        let text = to_csv(&rows);
        assert!(text.starts_with(CSV_HEADER));
        assert_eq!(text.lines().nth(1).unwrap(), "cifar10,resnet,8,16,5,10,+,1,0.4,,1.5");
        assert_eq!(parse_csv(&text).unwrap(), rows);
    }

    #[test]
    fn summary_groups_seeds() {
        let mut other = row(1, 0.9);
        other.width = 36;
        other.members = 1;
        let s = summarize(&[row(1, 0.4), other, row(2, 0.6)], "f");
        assert_eq!(s.entries.len(), 2);
        let a = s.entries[0].accuracy.as_ref().unwrap();
        assert!((a.mean - 0.5).abs() < 1e-12 && (a.std - 0.1).abs() < 1e-12);
        assert!(s.entries[0].mean_sensitivity.is_none());
        assert!(serde_json::to_string(&s).unwrap().contains("\"fingerprint\":\"f\""));
    }

    #[test]
    fn sensitivity_round_trip() {
        let r = SensitivityReport {
            sample_ids: vec![3, 7],
            labels: vec![1, 0],
            values: vec![0.25, 0.75],
            mean: 0.5,
            std: 0.25,
        };
        assert_eq!(parse_sensitivity_csv(&sensitivity_csv(&r)).unwrap(), r);
    }
}
