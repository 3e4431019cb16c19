//! Tables and plots from event logs.
//!
//! Each input path is one configuration: either a single `.jsonl` log or a
//! directory written by `adapt` (every `*.jsonl` inside is one seed).

use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};

use odes_core::adaptation::{read_events, summarize_cycle, AdaptationEvent};
use odes_core::metrics::foreground_mean;
use plotters::prelude::*;
use serde::Serialize;

use crate::experiment::{class_names, Stat};
use crate::manifest::{Manifest, MANIFEST_FILE};
use crate::HarnessError;

/// The logs of one configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct LogSet {
    pub label: String,
    /// Annotation budget, from the manifest or the logged queries.
    pub b: Option<f64>,
    pub runs: Vec<Vec<AdaptationEvent>>,
    pub skipped_lines: usize,
}

impl LogSet {
    fn classes(&self) -> Option<usize> {
        self.runs
            .iter()
            .flatten()
            .find_map(|e| e.dice_counts.as_ref().map(|d| d.inter.len()))
    }
}

fn read_log(path: &Path) -> Result<(Vec<AdaptationEvent>, usize), HarnessError> {
    let file = File::open(path).map_err(|e| HarnessError::io(path, e))?;
    let (events, bad) = read_events(BufReader::new(file))?;
    for e in &bad {
        log::warn!("{}: skipped {e}", path.display());
    }
    Ok((events, bad.len()))
}

/// Reads one configuration from a file or a run directory.
pub fn load_log_set(path: &Path) -> Result<LogSet, HarnessError> {
    if !path.exists() {
        return Err(HarnessError::MissingPath(path.to_path_buf()));
    }
    let stem = |p: &Path| p.file_stem().or(p.file_name()).map_or_else(String::new, |s| s.to_string_lossy().into_owned());
    let (files, manifest) = if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| HarnessError::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        files.sort();
        let m = path.join(MANIFEST_FILE);
        (files, if m.is_file() { Some(Manifest::read(&m)?) } else { None })
    } else {
        (vec![path.to_path_buf()], None)
    };
    let mut runs = Vec::new();
    let mut skipped_lines = 0;
    for f in &files {
        let (events, bad) = read_log(f)?;
        skipped_lines += bad;
        if !events.is_empty() {
            runs.push(events);
        }
    }
    let b = manifest.as_ref().map(|m| m.config.adapt.b).or_else(|| {
        runs.iter()
            .flatten()
            .find_map(|e| e.queries.first().map(|q| q.budget_b))
    });
    Ok(LogSet {
        label: manifest.map_or_else(|| stem(path), |m| m.config.label),
        b,
        runs,
        skipped_lines,
    })
}

/// One CSV row: a configuration's Dice for one class, across runs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub configuration: String,
    pub b: Option<f64>,
    pub class: String,
    pub mean_dsc: f64,
    pub std_dsc: f64,
    pub runs: usize,
}

/// Last-cycle per-patient Dice of every run, per class.
fn per_run_dice(set: &LogSet, classes: usize) -> Vec<Vec<f64>> {
    set.runs
        .iter()
        .filter_map(|events| {
            let last = events.iter().map(|e| e.cycle).max()?;
            summarize_cycle(events, last, classes).map(|s| s.per_class_dsc)
        })
        .collect()
}

/// `configurations × classes` rows, in input order then class order.
pub fn table(sets: &[LogSet]) -> Vec<ReportRow> {
    let mut rows = Vec::new();
    for set in sets {
        let Some(classes) = set.classes() else {
            log::warn!("{}: no scored events, left out of the table", set.label);
            continue;
        };
        let runs = per_run_dice(set, classes);
        for (c, class) in class_names(classes).into_iter().enumerate() {
            let stat = Stat::of(&runs.iter().map(|r| r[c]).collect::<Vec<_>>());
            rows.push(ReportRow {
                configuration: set.label.clone(),
                b: set.b,
                class,
                mean_dsc: stat.mean,
                std_dsc: stat.std,
                runs: runs.len(),
            });
        }
    }
    rows
}

pub fn write_csv(path: &Path, rows: &[ReportRow]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

fn plot_err<E: std::fmt::Display>(path: &Path) -> impl Fn(E) -> HarnessError + '_ {
    move |e| HarnessError::Plot {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn padded(lo: f64, hi: f64) -> std::ops::Range<f64> {
    let pad = ((hi - lo) * 0.05).max(1e-3);
    (lo - pad)..(hi + pad)
}

/// Mean foreground Dice against the budget b, one point per configuration.
pub fn plot_b_curve(path: &Path, sets: &[LogSet]) -> Result<bool, HarnessError> {
    let mut pts: Vec<(f64, f64)> = sets
        .iter()
        .filter_map(|s| {
            let classes = s.classes()?;
            let means: Vec<f64> = per_run_dice(s, classes).iter().map(|r| foreground_mean(r)).collect();
            Some((s.b?, Stat::of(&means).mean))
        })
        .collect();
    if pts.is_empty() {
        return Ok(false);
    }
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (xmin, xmax) = (pts[0].0, pts[pts.len() - 1].0);
    let ymin = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let ymax = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let err = plot_err(path);
    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(&err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Mean DSC against annotation budget", ("sans-serif", 20))
        .margin(15)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(padded(xmin, xmax), padded(ymin, ymax))
        .map_err(&err)?;
    chart
        .configure_mesh()
        .x_desc("b (% of pixels)")
        .y_desc("mean foreground DSC")
        .draw()
        .map_err(&err)?;
    chart.draw_series(LineSeries::new(pts.clone(), &BLUE)).map_err(&err)?;
    chart
        .draw_series(pts.iter().map(|&p| Circle::new(p, 4, BLUE.filled())))
        .map_err(&err)?;
    root.present().map_err(&err)?;
    Ok(true)
}

/// Per-batch mean foreground Dice, averaged over runs, one line per
/// configuration.
pub fn plot_timeline(path: &Path, sets: &[LogSet]) -> Result<bool, HarnessError> {
    let lines: Vec<(String, Vec<(f64, f64)>)> = sets
        .iter()
        .map(|s| {
            let len = s.runs.iter().map(Vec::len).max().unwrap_or(0);
            let pts = (0..len)
                .filter_map(|i| {
                    let vals: Vec<f64> = s
                        .runs
                        .iter()
                        .filter_map(|r| r.get(i)?.per_class_dsc.as_deref().map(foreground_mean))
                        .collect();
                    (!vals.is_empty()).then(|| ((i + 1) as f64, Stat::of(&vals).mean))
                })
                .collect();
            (s.label.clone(), pts)
        })
        .filter(|(_, p): &(String, Vec<(f64, f64)>)| !p.is_empty())
        .collect();
    if lines.is_empty() {
        return Ok(false);
    }
    let xmax = lines.iter().flat_map(|l| l.1.iter().map(|p| p.0)).fold(1.0, f64::max);
    let err = plot_err(path);
    let root = SVGBackend::new(path, (900, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(&err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Per-batch DSC before each update", ("sans-serif", 20))
        .margin(15)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(padded(1.0, xmax), 0.0..1.0)
        .map_err(&err)?;
    chart
        .configure_mesh()
        .x_desc("batch")
        .y_desc("mean foreground DSC")
        .draw()
        .map_err(&err)?;
    for (i, (label, pts)) in lines.into_iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(pts, color))
            .map_err(&err)?
            .label(label)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(&err)?;
    root.present().map_err(&err)?;
    Ok(true)
}

/// Histogram of per-image divergence scores, one outline per configuration.
pub fn plot_divergence(path: &Path, sets: &[LogSet], bins: usize) -> Result<bool, HarnessError> {
    let scores: Vec<(String, Vec<f64>)> = sets
        .iter()
        .map(|s| {
            let v = s
                .runs
                .iter()
                .flatten()
                .filter_map(|e| e.divergence.as_ref())
                .flat_map(|d| d.per_image.iter().map(|p| p.score))
                .filter(|v| v.is_finite())
                .collect();
            (s.label.clone(), v)
        })
        .filter(|(_, v): &(String, Vec<f64>)| !v.is_empty())
        .collect();
    if scores.is_empty() {
        return Ok(false);
    }
    let lo = scores.iter().flat_map(|s| s.1.iter().copied()).fold(f64::INFINITY, f64::min);
    let hi = scores.iter().flat_map(|s| s.1.iter().copied()).fold(f64::NEG_INFINITY, f64::max);
    let width = ((hi - lo) / bins as f64).max(1e-12);
    let counted: Vec<(String, Vec<(f64, f64)>)> = scores
        .into_iter()
        .map(|(label, v)| {
            let mut counts = vec![0usize; bins];
            for x in v {
                counts[(((x - lo) / width) as usize).min(bins - 1)] += 1;
            }
            // Step outline through each bin's left and right edges.
            let pts = counts
                .iter()
                .enumerate()
                .flat_map(|(i, &c)| {
                    let x0 = lo + i as f64 * width;
                    [(x0, c as f64), (x0 + width, c as f64)]
                })
                .collect();
            (label, pts)
        })
        .collect();
    let ymax = counted.iter().flat_map(|c| c.1.iter().map(|p| p.1)).fold(1.0, f64::max);
    let err = plot_err(path);
    let root = SVGBackend::new(path, (900, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(&err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Per-image BN divergence", ("sans-serif", 20))
        .margin(15)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(padded(lo, hi), 0.0..ymax * 1.05)
        .map_err(&err)?;
    chart
        .configure_mesh()
        .x_desc("divergence")
        .y_desc("images")
        .draw()
        .map_err(&err)?;
    for (i, (label, pts)) in counted.into_iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(pts, color))
            .map_err(&err)?
            .label(label)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(&err)?;
    root.present().map_err(&err)?;
    Ok(true)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportOutcome {
    pub rows: Vec<ReportRow>,
    pub skipped_lines: usize,
    pub files: Vec<PathBuf>,
}

/// Reads every configuration and writes `report.csv` plus whichever plots
/// have data into `out_dir`.
pub fn cmd_report(inputs: &[PathBuf], out_dir: &Path) -> Result<ReportOutcome, HarnessError> {
    if inputs.is_empty() {
        return Err(HarnessError::NoLogs);
    }
    let sets = inputs.iter().map(|p| load_log_set(p)).collect::<Result<Vec<_>, _>>()?;
    fs::create_dir_all(out_dir).map_err(|e| HarnessError::io(out_dir, e))?;
    let rows = table(&sets);
    let csv_path = out_dir.join("report.csv");
    write_csv(&csv_path, &rows)?;
    let mut files = vec![csv_path];
    let b_path = out_dir.join("dsc_vs_b.svg");
    if sets.len() > 1 && plot_b_curve(&b_path, &sets)? {
        files.push(b_path);
    }
    let t_path = out_dir.join("timeline.svg");
    if plot_timeline(&t_path, &sets)? {
        files.push(t_path);
    }
    let d_path = out_dir.join("divergence_histogram.svg");
    if plot_divergence(&d_path, &sets, 20)? {
        files.push(d_path);
    }
    let skipped_lines = sets.iter().map(|s| s.skipped_lines).sum();
    if skipped_lines > 0 {
        log::warn!("skipped {skipped_lines} malformed log lines");
    }
    Ok(ReportOutcome {
        rows,
        skipped_lines,
        files,
    })
}
