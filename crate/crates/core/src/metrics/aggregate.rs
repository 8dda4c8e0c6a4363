use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{csv_footer, Error, Result, VERSION};

/// Bumped when the JSON report layout changes.
pub const REPORT_VERSION: u32 = 1;

/// Category tags attached to an image; missing tags aggregate as "unknown".
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tags {
    pub subtlety: Option<String>,
    pub birads: Option<String>,
    pub shape: Option<String>,
    pub margin: Option<String>,
    pub pathology: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub image_id: String,
    pub dsc: f64,
    pub sen: f64,
    pub delta_a: f64,
    /// Pixels on the evaluated grid.
    pub hau: f64,
    /// `hau` is the image diagonal because a mask was empty.
    pub hau_sentinel: bool,
    pub tags: Tags,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Overall,
    Subtlety,
    Birads,
    Shape,
    Margin,
    Pathology,
}

impl Axis {
    pub const ALL: [Axis; 6] = [
        Axis::Overall,
        Axis::Subtlety,
        Axis::Birads,
        Axis::Shape,
        Axis::Margin,
        Axis::Pathology,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Axis::Overall => "overall",
            Axis::Subtlety => "subtlety",
            Axis::Birads => "birads",
            Axis::Shape => "shape",
            Axis::Margin => "margin",
            Axis::Pathology => "pathology",
        }
    }

    fn value(self, tags: &Tags) -> &str {
        let tag = match self {
            Axis::Overall => return "all",
            Axis::Subtlety => &tags.subtlety,
            Axis::Birads => &tags.birads,
            Axis::Shape => &tags.shape,
            Axis::Margin => &tags.margin,
            Axis::Pathology => &tags.pathology,
        };
        tag.as_deref().unwrap_or("unknown")
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Axis::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown category axis {s:?}")))
    }
}

/// Mean and sample standard deviation across runs of the per-run means
/// for one category value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub axis: Axis,
    pub value: String,
    /// Images in this category (per run).
    pub count: usize,
    pub dsc_mean: f64,
    pub dsc_sd: f64,
    pub sen_mean: f64,
    pub sen_sd: f64,
    pub da_mean: f64,
    pub da_sd: f64,
    pub hau_mean: f64,
    pub hau_sd: f64,
}

pub(crate) fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = xs.iter().map(|x| (x - mean) * (x - mean)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

fn check_runs(runs: &[Vec<MetricRecord>]) -> Result<()> {
    let Some(first) = runs.first() else {
        return Err(Error::Invalid("no runs to aggregate".into()));
    };
    if first.is_empty() {
        return Err(Error::Invalid("run 0 has no records".into()));
    }
    let ids = |run: &[MetricRecord]| -> Result<BTreeSet<String>> {
        let set: BTreeSet<String> = run.iter().map(|r| r.image_id.clone()).collect();
        if set.len() != run.len() {
            return Err(Error::Invalid("duplicate image id within a run".into()));
        }
        Ok(set)
    };
    let reference = ids(first)?;
    for (i, run) in runs.iter().enumerate().skip(1) {
        if ids(run)? != reference {
            return Err(Error::Invalid(format!(
                "run {i} covers a different image set than run 0"
            )));
        }
    }
    Ok(())
}

/// Per category value: the mean over its images within each run, then
/// mean ± sample s.d. of those means across runs.
pub fn aggregate(runs: &[Vec<MetricRecord>], axes: &[Axis]) -> Result<Vec<AggregateRow>> {
    check_runs(runs)?;
    let mut rows = Vec::new();
    for &axis in axes {
        // categories come from run 0 so every run is grouped identically
        let mut groups: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
        for r in &runs[0] {
            groups.entry(axis.value(&r.tags)).or_default().insert(&r.image_id);
        }
        for (value, ids) in groups {
            let mut per_run = [vec![], vec![], vec![], vec![]];
            for run in runs {
                let members: Vec<&MetricRecord> = run.iter().filter(|r| ids.contains(r.image_id.as_str())).collect();
                let n = members.len() as f64;
                let avg = |f: fn(&MetricRecord) -> f64| members.iter().map(|r| f(r)).sum::<f64>() / n;
                per_run[0].push(avg(|r| r.dsc));
                per_run[1].push(avg(|r| r.sen));
                per_run[2].push(avg(|r| r.delta_a));
                per_run[3].push(avg(|r| r.hau));
            }
            let [d, s, a, h] = per_run.map(|v| mean_sd(&v));
            rows.push(AggregateRow {
                axis,
                value: value.to_string(),
                count: ids.len(),
                dsc_mean: d.0,
                dsc_sd: d.1,
                sen_mean: s.0,
                sen_sd: s.1,
                da_mean: a.0,
                da_sd: a.1,
                hau_mean: h.0,
                hau_sd: h.1,
            });
        }
    }
    Ok(rows)
}

/// Per-image records of every run plus their aggregates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub format: u32,
    pub toolkit: String,
    pub run_id: String,
    /// Whatever configuration produced the report.
    pub config: serde_json::Value,
    pub runs: Vec<Vec<MetricRecord>>,
    pub aggregates: Vec<AggregateRow>,
}

impl MetricReport {
    pub fn build(
        run_id: impl Into<String>,
        runs: Vec<Vec<MetricRecord>>,
        axes: &[Axis],
        config: serde_json::Value,
    ) -> Result<Self> {
        let aggregates = aggregate(&runs, axes)?;
        Ok(MetricReport {
            format: REPORT_VERSION,
            toolkit: format!("aunet {VERSION}"),
            run_id: run_id.into(),
            config,
            runs,
            aggregates,
        })
    }

    pub fn overall(&self) -> Option<&AggregateRow> {
        self.aggregates.iter().find(|r| r.axis == Axis::Overall)
    }

    /// Per-image metric averaged over runs, sorted by image id.
    pub fn per_image(&self, metric: fn(&MetricRecord) -> f64) -> Vec<(String, f64)> {
        let mut acc: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
        for r in self.runs.iter().flatten() {
            let e = acc.entry(&r.image_id).or_default();
            e.0 += metric(r);
            e.1 += 1;
        }
        acc.into_iter()
            .map(|(k, (s, n))| (k.to_string(), s / n as f64))
            .collect()
    }

    /// One row per record, then aggregate rows, then the config echo as
    /// `#` comment lines.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "kind",
            "run",
            "image_id",
            "axis",
            "value",
            "count",
            "dsc",
            "dsc_sd",
            "sen",
            "sen_sd",
            "delta_a",
            "delta_a_sd",
            "hau",
            "hau_sd",
            "hau_sentinel",
            "subtlety",
            "birads",
            "shape",
            "margin",
            "pathology",
        ])?;
        let opt = |t: &Option<String>| t.clone().unwrap_or_default();
        for (i, run) in self.runs.iter().enumerate() {
            for r in run {
                w.write_record([
                    "record".to_string(),
                    i.to_string(),
                    r.image_id.clone(),
                    String::new(),
                    String::new(),
                    String::new(),
                    r.dsc.to_string(),
                    String::new(),
                    r.sen.to_string(),
                    String::new(),
                    r.delta_a.to_string(),
                    String::new(),
                    r.hau.to_string(),
                    String::new(),
                    r.hau_sentinel.to_string(),
                    opt(&r.tags.subtlety),
                    opt(&r.tags.birads),
                    opt(&r.tags.shape),
                    opt(&r.tags.margin),
                    opt(&r.tags.pathology),
                ])?;
            }
        }
        for a in &self.aggregates {
            let mut row = vec![
                "aggregate".to_string(),
                String::new(),
                String::new(),
                a.axis.to_string(),
                a.value.clone(),
                a.count.to_string(),
            ];
            for v in [
                a.dsc_mean, a.dsc_sd, a.sen_mean, a.sen_sd, a.da_mean, a.da_sd, a.hau_mean, a.hau_sd,
            ] {
                row.push(v.to_string());
            }
            row.extend(std::iter::repeat_n(String::new(), 6));
            w.write_record(row)?;
        }
        let body = w.into_inner().map_err(|e| Error::Invalid(e.to_string()))?;
        let mut text = String::from_utf8(body).expect("csv output is utf-8");
        text.push_str(&csv_footer(&self.config));
        Ok(text)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let report: MetricReport = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        if report.format != REPORT_VERSION {
            return Err(Error::Format {
                path: path.to_path_buf(),
                msg: format!("report format {} is not {REPORT_VERSION}", report.format),
            });
        }
        Ok(report)
    }
}

/// Right-continuous step points `(value, fraction ≤ value)` at the sorted
/// unique values.
pub fn ecdf(values: &[f64]) -> Vec<(f64, f64)> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (i, &v) in sorted.iter().enumerate() {
        if i + 1 < n && sorted[i + 1] == v {
            continue;
        }
        let frac = if i + 1 == n { 1.0 } else { (i + 1) as f64 / n as f64 };
        out.push((v, frac));
    }
    out
}

pub fn write_ecdf_csv(path: impl AsRef<Path>, points: &[(f64, f64)], config: &serde_json::Value) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::from("value,fraction\n");
    for (v, f) in points {
        text.push_str(&format!("{v},{f}\n"));
    }
    text.push_str(&csv_footer(config));
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}
