//! SVG figures from benchmark result rows.

use std::path::{Path, PathBuf};

use odeformer_core::evaluation::{aggregate, summarize, BenchmarkRow, Task};
use plotters::prelude::*;

use crate::CliError;

/// Histogram bucket labels: invalid predictions, negative R², then ten
/// bins of width 0.1 on [0, 1].
pub fn bucket_labels() -> Vec<String> {
    let mut v = vec!["invalid".to_string(), "<0".to_string()];
    for i in 0..10 {
        v.push(format!("{:.1}", i as f64 / 10.0));
    }
    v
}

pub fn bucket_of(r2: Option<f64>) -> usize {
    match r2 {
        None => 0,
        Some(v) if v.is_nan() => 0,
        Some(v) if v < 0.0 => 1,
        Some(v) => 2 + ((v * 10.0).floor() as usize).min(9),
    }
}

pub fn bucket_counts(scores: &[Option<f64>]) -> Vec<usize> {
    let mut c = vec![0; 12];
    for &s in scores {
        c[bucket_of(s)] += 1;
    }
    c
}

/// Horizontal position of a score on the bucket axis, used for the mean and
/// median markers.
fn marker_x(v: f64) -> f64 {
    if v < 0.0 {
        1.5
    } else {
        2.0 + 10.0 * v.min(1.0)
    }
}

fn plot_err<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(format!("plotting failed: {e}"))
}

fn histogram(path: &Path, title: &str, scores: &[Option<f64>]) -> Result<(), CliError> {
    let counts = bucket_counts(scores);
    let labels = bucket_labels();
    let (_, mean, median, _) = summarize(scores, 0.9);
    let ymax = counts.iter().copied().max().unwrap_or(0).max(1) as f64 * 1.15;
    let root = SVGBackend::new(path, (800, 450)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(0f64..12f64, 0f64..ymax)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(12)
        .x_label_formatter(&|x| {
            let i = x.floor() as usize;
            labels.get(i).cloned().unwrap_or_default()
        })
        .x_desc("R²")
        .y_desc("equations")
        .draw()
        .map_err(plot_err)?;
    chart
        .draw_series(counts.iter().enumerate().map(|(i, &c)| {
            let color = if i < 2 { RGBColor(170, 170, 170) } else { RGBColor(70, 110, 180) };
            Rectangle::new([(i as f64 + 0.1, 0.0), (i as f64 + 0.9, c as f64)], color.filled())
        }))
        .map_err(plot_err)?;
    for (v, name, color) in [(mean, "mean", RED), (median, "median", BLACK)] {
        if let Some(v) = v {
            let x = marker_x(v);
            chart
                .draw_series(LineSeries::new([(x, 0.0), (x, ymax)], color.stroke_width(2)))
                .map_err(plot_err)?
                .label(format!("{name} {v:.3}"))
                .legend(move |(x, y)| PathElement::new([(x, y), (x + 16, y)], color));
        }
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .position(SeriesLabelPosition::UpperLeft)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

fn accuracy_bars(path: &Path, title: &str, rows: &[BenchmarkRow], task: Task) -> Result<(), CliError> {
    let aggs: Vec<_> = aggregate(rows, 0.9).into_iter().filter(|a| a.task == task).collect();
    let mut noises: Vec<f64> = aggs.iter().map(|a| a.noise).collect();
    noises.sort_by(f64::total_cmp);
    noises.dedup();
    let mut subs: Vec<f64> = aggs.iter().map(|a| a.subsample).collect();
    subs.sort_by(f64::total_cmp);
    subs.dedup();
    let root = SVGBackend::new(path, (800, 450)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(0f64..noises.len().max(1) as f64, 0f64..1.05f64)
        .map_err(plot_err)?;
    let labels: Vec<String> = noises.iter().map(|n| format!("{n}")).collect();
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(noises.len().max(1))
        .x_label_formatter(&|x| labels.get(x.floor() as usize).cloned().unwrap_or_default())
        .x_desc("noise σ")
        .y_desc("accuracy (R² > 0.9)")
        .draw()
        .map_err(plot_err)?;
    let width = 0.8 / subs.len().max(1) as f64;
    for (si, &rho) in subs.iter().enumerate() {
        let color = Palette99::pick(si).to_rgba();
        let bars: Vec<_> = aggs
            .iter()
            .filter(|a| a.subsample == rho)
            .filter_map(|a| {
                let ni = noises.iter().position(|&n| n == a.noise)?;
                let x0 = ni as f64 + 0.1 + si as f64 * width;
                Some(Rectangle::new([(x0, 0.0), (x0 + width, a.accuracy)], color.filled()))
            })
            .collect();
        chart
            .draw_series(bars)
            .map_err(plot_err)?
            .label(format!("subsample ρ = {rho}"))
            .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 12, y + 5)], color.filled()));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

/// Writes accuracy-vs-noise bars and a clean-data R² histogram for each
/// task present in `rows`. Returns the written paths; empty input writes
/// nothing.
pub fn write_figures(rows: &[BenchmarkRow], out_dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    if rows.is_empty() {
        log::warn!("no result rows; no figures written");
        return Ok(Vec::new());
    }
    std::fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
    let mut written = Vec::new();
    for task in Task::ALL {
        let task_rows: Vec<BenchmarkRow> = rows.iter().filter(|r| r.task == task).cloned().collect();
        if task_rows.is_empty() {
            continue;
        }
        let p = out_dir.join(format!("accuracy_vs_noise_{}.svg", task.name()));
        accuracy_bars(&p, &format!("{} accuracy", task.name()), &task_rows, task)?;
        written.push(p);
        let clean: Vec<Option<f64>> = task_rows
            .iter()
            .filter(|r| r.noise == 0.0 && r.subsample == 0.0)
            .map(|r| r.r2)
            .collect();
        let scores: Vec<Option<f64>> = if clean.is_empty() {
            task_rows.iter().map(|r| r.r2).collect()
        } else {
            clean
        };
        let p = out_dir.join(format!("r2_histogram_{}.svg", task.name()));
        histogram(&p, &format!("per-equation R² ({})", task.name()), &scores)?;
        written.push(p);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn buckets_cover_every_score() {
        let scores = vec![None, Some(f64::NEG_INFINITY), Some(-3.0), Some(0.0), Some(0.95), Some(1.0), Some(0.5)];
        let c = bucket_counts(&scores);
        assert_eq!(c.iter().sum::<usize>(), scores.len());
        assert_eq!(c[0], 1);
        assert_eq!(c[1], 2);
        assert_eq!(c[2], 1);
        assert_eq!(c[11], 2);
        assert_eq!(c[7], 1);
        assert_eq!(bucket_labels().len(), c.len());
    }
}
