use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::MetricId;
use crate::error::{GctError, Result};

/// One line of the per-epoch training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochRecord {
    pub epoch: u32,
    pub step: u64,
    /// Mean of each loss term over the epoch's batches.
    pub losses: BTreeMap<String, f64>,
    pub rampup: f64,
    #[serde(with = "tagged_f64")]
    pub metric: f64,
    /// Samples drawn so far, `step * batch_size`.
    pub samples_seen: u64,
}

/// Summary of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunReport {
    pub run_id: String,
    pub method: String,
    /// Labeled fraction as written in the config, e.g. `1/8`.
    pub ratio: String,
    pub seed: u64,
    pub metric: MetricId,
    pub epochs: Vec<EpochRecord>,
    #[serde(with = "tagged_f64")]
    pub best_metric: f64,
    #[serde(with = "tagged_f64")]
    pub final_metric: f64,
    /// Total training samples drawn.
    pub samples_seen: u64,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| GctError::input(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| GctError::input(format!("bad run report: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| GctError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| GctError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| GctError::format(path, e.to_string()))
    }
}

/// Non-finite values are written as the strings `inf`, `-inf` and `nan` so
/// that a perfect PSNR survives a JSON round trip.
mod tagged_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Tag(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Tag(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(serde::de::Error::custom(format!("unexpected number tag `{other}`"))),
            },
        }
    }
}

/// Mean and spread of one (method, ratio) cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellStats {
    pub mean: f64,
    /// Sample standard deviation (divisor `n - 1`); zero for a single run.
    pub std: f64,
    pub runs: usize,
}

/// Methods by labeled ratio, best metric averaged over seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportTable {
    pub metric: MetricId,
    /// Sorted lexicographically.
    pub methods: Vec<String>,
    /// Sorted by numeric value of the fraction.
    pub ratios: Vec<String>,
    pub cells: BTreeMap<(String, String), CellStats>,
}

fn ratio_value(r: &str) -> f64 {
    match r.split_once('/') {
        Some((a, b)) => match (a.trim().parse::<f64>(), b.trim().parse::<f64>()) {
            (Ok(a), Ok(b)) if b != 0.0 => a / b,
            _ => f64::NAN,
        },
        None => r.trim().parse().unwrap_or(f64::NAN),
    }
}

fn stats(values: &[f64]) -> CellStats {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    CellStats { mean, std, runs: n }
}

/// Aggregates runs into a method by ratio table.
pub fn report(runs: &[RunReport]) -> Result<ReportTable> {
    let first = runs.first().ok_or_else(|| GctError::input("no run reports given"))?;
    if let Some(bad) = runs.iter().find(|r| r.metric != first.metric) {
        return Err(GctError::input(format!(
            "run `{}` reports {} but `{}` reports {}",
            bad.run_id,
            bad.metric.name(),
            first.run_id,
            first.metric.name()
        )));
    }
    let mut groups: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for r in runs {
        groups
            .entry((r.method.clone(), r.ratio.clone()))
            .or_default()
            .push(r.best_metric);
    }
    let mut methods: Vec<String> = groups.keys().map(|(m, _)| m.clone()).collect();
    methods.dedup();
    let mut ratios: Vec<String> = groups.keys().map(|(_, r)| r.clone()).collect();
    ratios.sort_by(|a, b| ratio_value(a).total_cmp(&ratio_value(b)).then_with(|| a.cmp(b)));
    ratios.dedup();
    let cells = groups.into_iter().map(|(k, v)| (k, stats(&v))).collect();
    Ok(ReportTable {
        metric: first.metric,
        methods,
        ratios,
        cells,
    })
}

impl ReportTable {
    fn scale(&self) -> f64 {
        match self.metric {
            MetricId::Miou => 100.0,
            MetricId::Psnr => 1.0,
        }
    }

    fn cell_text(&self, method: &str, ratio: &str) -> String {
        match self.cells.get(&(method.to_string(), ratio.to_string())) {
            Some(c) => format!("{:.2} ± {:.2}", c.mean * self.scale(), c.std * self.scale()),
            None => "-".to_string(),
        }
    }

    /// Aligned plain-text table. mIoU is shown in percent.
    pub fn to_text(&self) -> String {
        let unit = match self.metric {
            MetricId::Miou => "mIoU %",
            MetricId::Psnr => "PSNR dB",
        };
        let mut rows = vec![std::iter::once(format!("method ({unit})"))
            .chain(self.ratios.iter().cloned())
            .collect::<Vec<_>>()];
        for m in &self.methods {
            rows.push(
                std::iter::once(m.clone())
                    .chain(self.ratios.iter().map(|r| self.cell_text(m, r)))
                    .collect(),
            );
        }
        let cols = rows[0].len();
        let widths: Vec<usize> = (0..cols)
            .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for row in rows {
            let line: Vec<String> = row
                .iter()
                .zip(&widths)
                .map(|(cell, w)| format!("{cell:<w$}", w = *w))
                .collect();
            out.push_str(line.join("  ").trim_end());
            out.push('\n');
        }
        out
    }

    /// One row per cell: `method, ratio, mean, std, runs` in raw metric units.
    pub fn to_delimited(&self, sep: char) -> String {
        let mut out = format!("method{sep}ratio{sep}metric{sep}mean{sep}std{sep}runs\n");
        for m in &self.methods {
            for r in &self.ratios {
                if let Some(c) = self.cells.get(&(m.clone(), r.clone())) {
                    let _ = writeln!(
                        out,
                        "{m}{sep}{r}{sep}{}{sep}{}{sep}{}{sep}{}",
                        self.metric.name(),
                        c.mean,
                        c.std,
                        c.runs
                    );
                }
            }
        }
        out
    }
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// Metric against epoch for every run, one polyline per run, as an SVG file.
/// Non-finite points are skipped.
pub fn write_curves_svg(path: &Path, runs: &[RunReport]) -> Result<()> {
    let (w, h, pad) = (640.0, 400.0, 50.0);
    let points: Vec<(u32, f64)> = runs
        .iter()
        .flat_map(|r| r.epochs.iter().map(|e| (e.epoch, e.metric)))
        .filter(|(_, m)| m.is_finite())
        .collect();
    let max_epoch = points.iter().map(|p| p.0).max().unwrap_or(1).max(1) as f64;
    let (mut lo, mut hi) = points
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.1), hi.max(p.1)));
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        hi = lo + 1.0;
    }
    let x = |e: f64| pad + (w - 2.0 * pad) * e / max_epoch;
    let y = |m: f64| h - pad - (h - 2.0 * pad) * (m - lo) / (hi - lo);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<path d="M{pad} {pad} V{} H{}" stroke="black" fill="none"/>"#,
        h - pad,
        w - pad
    );
    let _ = writeln!(svg, r#"<text x="{}" y="{}">epoch</text>"#, w / 2.0, h - 10.0);
    let _ = writeln!(svg, r#"<text x="5" y="{}">{:.3}</text>"#, pad, hi);
    let _ = writeln!(svg, r#"<text x="5" y="{}">{:.3}</text>"#, h - pad, lo);
    for (i, r) in runs.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = r
            .epochs
            .iter()
            .filter(|e| e.metric.is_finite())
            .map(|e| format!("{:.2},{:.2}", x(e.epoch as f64), y(e.metric)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" stroke="{color}" fill="none" stroke-width="1.5"/>"#,
            pts.join(" ")
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" fill="{color}">{} {}</text>"#,
            w - pad + 4.0 - 150.0,
            pad + 14.0 * i as f64,
            r.run_id,
            r.metric.name()
        );
    }
    svg.push_str("</svg>\n");
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| GctError::io(dir, e))?;
    }
    std::fs::write(path, svg).map_err(|e| GctError::io(path, e))
}
