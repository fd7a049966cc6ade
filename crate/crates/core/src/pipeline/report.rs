//! Aggregation of per-seed metrics into a results table and bar plots.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use super::Condition;
use crate::metrics::BoundaryScore;
use crate::{Error, Result};

/// Name of the per-run metrics file.
pub const METRICS_FILE: &str = "metrics.json";

/// Scores of one (language, condition, seed) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub language: String,
    pub model: String,
    pub condition: Condition,
    pub seed: u64,
    /// Symmetric NMI in percent.
    pub nmi: f64,
    /// Cluster purity as a fraction.
    pub purity: f64,
    pub boundary: BoundaryScore,
    pub frames: u64,
}

impl RunMetrics {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    fn percent(&self) -> [f64; 3] {
        [self.nmi, 100.0 * self.purity, 100.0 * self.boundary.fscore]
    }
}

/// Mean and sample standard deviation; no deviation for a single value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: Option<f64>,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.len() > 1)
            .then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
        Self { mean, std }
    }

    fn cell(&self) -> String {
        match self.std {
            Some(s) => format!("{:.2} ± {:.2}", self.mean, s),
            None => format!("{:.2}", self.mean),
        }
    }
}

/// One line of the results table. All scores are percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub language: String,
    pub model: String,
    pub input: Condition,
    pub seeds: Vec<u64>,
    pub nmi: Summary,
    pub cp: Summary,
    pub bfs: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub runs: Vec<RunMetrics>,
}

/// Every metrics file below the given directories.
pub fn collect_metrics(dirs: &[PathBuf]) -> Result<Vec<RunMetrics>> {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
        entries.sort_by_key(|e| e.file_name());
        for e in entries {
            let path = e.path();
            if e.file_type()?.is_dir() {
                walk(&path, out)?;
            } else if e.file_name() == METRICS_FILE {
                out.push(path);
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    for d in dirs {
        walk(d, &mut files)?;
    }
    files.iter().map(|f| RunMetrics::load(f)).collect()
}

/// Groups runs by (language, model, condition).
pub fn build_report(mut runs: Vec<RunMetrics>) -> Result<Report> {
    if runs.is_empty() {
        return Err(Error::InvalidArgument("no completed runs to report".into()));
    }
    runs.sort_by(|a, b| {
        (&a.language, &a.model, a.condition, a.seed).cmp(&(&b.language, &b.model, b.condition, b.seed))
    });
    for w in runs.windows(2) {
        if (&w[0].language, &w[0].model, w[0].condition, w[0].seed) == (&w[1].language, &w[1].model, w[1].condition, w[1].seed)
            && w[0] != w[1]
        {
            return Err(Error::InvalidArgument(format!(
                "conflicting results for {} {} seed {}",
                w[0].language, w[0].condition, w[0].seed
            )));
        }
    }
    runs.dedup();
    let mut groups: BTreeMap<(String, String, Condition), Vec<&RunMetrics>> = BTreeMap::new();
    for r in &runs {
        groups
            .entry((r.language.clone(), r.model.clone(), r.condition))
            .or_default()
            .push(r);
    }
    let rows = groups
        .into_iter()
        .map(|((language, model, input), members)| {
            let column = |k: usize| Summary::of(&members.iter().map(|m| m.percent()[k]).collect::<Vec<_>>());
            ReportRow {
                language,
                model,
                input,
                seeds: members.iter().map(|m| m.seed).collect(),
                nmi: column(0),
                cp: column(1),
                bfs: column(2),
            }
        })
        .collect();
    Ok(Report { rows, runs })
}

impl Report {
    /// Aligned plain-text table.
    pub fn to_text(&self) -> String {
        let header = ["language", "model", "input", "NMI", "CP", "BFS"].map(String::from);
        let body: Vec<[String; 6]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.language.clone(),
                    r.model.clone(),
                    r.input.to_string(),
                    r.nmi.cell(),
                    r.cp.cell(),
                    r.bfs.cell(),
                ]
            })
            .collect();
        let widths: Vec<usize> = (0..6)
            .map(|c| {
                std::iter::once(&header)
                    .chain(&body)
                    .map(|row| row[c].chars().count())
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let mut out = String::new();
        for row in std::iter::once(&header).chain(&body) {
            let cells: Vec<String> = row
                .iter()
                .zip(&widths)
                .map(|(cell, &w)| format!("{cell}{}", " ".repeat(w - cell.chars().count())))
                .collect();
            let _ = writeln!(out, "{}", cells.join("  ").trim_end());
        }
        out
    }

    /// CSV with a standard deviation column after each score; deviations
    /// of single-seed rows are empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("language,model,input,NMI,NMI_std,CP,CP_std,BFS,BFS_std,seeds\n");
        let std = |s: &Summary| s.std.map(|v| v.to_string()).unwrap_or_default();
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                r.language,
                r.model,
                r.input,
                r.nmi.mean,
                std(&r.nmi),
                r.cp.mean,
                std(&r.cp),
                r.bfs.mean,
                std(&r.bfs),
                r.seeds.len()
            );
        }
        out
    }

    /// Writes `report.txt`, `report.csv`, `report.json` and one bar plot per
    /// language into `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        for (name, body) in [
            ("report.txt", self.to_text()),
            ("report.csv", self.to_csv()),
            ("report.json", serde_json::to_string_pretty(self)?),
        ] {
            let path = dir.join(name);
            std::fs::write(&path, body)?;
            written.push(path);
        }
        let mut languages: Vec<&str> = self.runs.iter().map(|r| r.language.as_str()).collect();
        languages.dedup();
        for language in languages {
            let path = dir.join(format!("{language}.svg"));
            let runs: Vec<&RunMetrics> = self.runs.iter().filter(|r| r.language == language).collect();
            plot_language(&path, language, &runs)
                .map_err(|e| Error::Stage { stage: "report".into(), message: format!("plot {}: {e}", path.display()) })?;
            written.push(path);
        }
        Ok(written)
    }
}

fn condition_color(c: Condition) -> RGBColor {
    match c {
        Condition::Clean => RGBColor(90, 90, 90),
        Condition::Rec => RGBColor(31, 119, 180),
        Condition::Vc => RGBColor(214, 39, 40),
    }
}

/// One panel per metric, one bar per (condition, seed).
fn plot_language(path: &Path, language: &str, runs: &[&RunMetrics]) -> std::result::Result<(), Box<dyn std::error::Error>> {
    let root = SVGBackend::new(path, (360 * 3, 340)).into_drawing_area();
    root.fill(&WHITE)?;
    let panels = root.split_evenly((1, 3));
    let labels: Vec<String> = runs.iter().map(|r| format!("{} s{}", r.condition, r.seed)).collect();
    let n = runs.len() as u32;
    for (k, (panel, name)) in panels.iter().zip(["NMI", "CP", "BFS"]).enumerate() {
        let values: Vec<f64> = runs.iter().map(|r| r.percent()[k]).collect();
        let top = values.iter().copied().fold(0.0, f64::max).max(1.0) * 1.1;
        let mut chart = ChartBuilder::on(panel)
            .caption(format!("{language} {name}"), ("sans-serif", 18))
            .margin(8)
            .x_label_area_size(60)
            .y_label_area_size(40)
            .build_cartesian_2d((0u32..n).into_segmented(), 0.0..top)?;
        chart
            .configure_mesh()
            .disable_x_mesh()
            .x_labels(runs.len())
            .x_label_formatter(&|v| match v {
                SegmentValue::CenterOf(i) | SegmentValue::Exact(i) => labels.get(*i as usize).cloned().unwrap_or_default(),
                SegmentValue::Last => String::new(),
            })
            .y_desc("%")
            .draw()?;
        for c in Condition::ALL {
            let color = condition_color(c);
            chart.draw_series(runs.iter().enumerate().filter(|(_, r)| r.condition == c).map(|(i, _)| {
                let i = i as u32;
                Rectangle::new(
                    [(SegmentValue::Exact(i), 0.0), (SegmentValue::Exact(i + 1), values[i as usize])],
                    color.filled(),
                )
            }))?;
        }
    }
    root.present()?;
    Ok(())
}
