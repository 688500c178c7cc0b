//! Markdown tables and a PNG loss-curve plot.

use std::fmt::Write as _;
use std::path::Path;

use image::{Rgb, RgbImage};

use super::{AblationTable, StepLog};
use crate::error::{data_err, Error, Result};
use crate::metrics::MetricsReport;

pub fn metrics_markdown(title: &str, report: &MetricsReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "### {title}\n");
    let _ = writeln!(s, "Criterion: {}\n", report.criterion.describe());
    let _ = writeln!(s, "| TP | FP | FN | Precision | Recall | F-score |");
    let _ = writeln!(s, "|---:|---:|---:|---:|---:|---:|");
    let _ = writeln!(
        s,
        "| {} | {} | {} | {:.4} | {:.4} | {:.4} |",
        report.tp, report.fp, report.fn_, report.precision, report.recall, report.f_score
    );
    if let Some(h) = &report.config_hash {
        let _ = writeln!(s, "\nConfig hash: `{h}`");
    }
    s
}

pub fn ablation_markdown(table: &AblationTable) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "Criterion: {}\n", table.criterion.describe());
    let mut header = "| Model | Generators | Merger |".to_string();
    let mut rule = "|---|---|---|".to_string();
    for split in &table.splits {
        let _ = write!(header, " {split} F-score | {split} Recall |");
        rule.push_str("---:|---:|");
    }
    let _ = writeln!(s, "{header}\n{rule}");
    for row in &table.rows {
        let _ = write!(s, "| {} | {} | {} |", row.name, row.generator_combo, row.merger_preset);
        for split in &table.splits {
            match row.results.get(split) {
                Some(r) => {
                    let _ = write!(s, " {:.3} | {:.3} |", r.f_score, r.recall);
                }
                None => s.push_str(" failed | failed |"),
            }
        }
        s.push('\n');
    }
    for row in table.rows.iter().filter(|r| r.error.is_some()) {
        let _ = writeln!(s, "\n{}: {}", row.name, row.error.as_deref().unwrap_or_default());
    }
    s
}

const WIDTH: u32 = 720;
const HEIGHT: u32 = 400;
const MARGIN: u32 = 40;

fn line(img: &mut RgbImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), color: Rgb<u8>) {
    let steps = (x1 - x0).abs().max((y1 - y0).abs()).ceil().max(1.0) as usize;
    for k in 0..=steps {
        let t = k as f64 / steps as f64;
        let (x, y) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
    }
}

/// Total (black), `l_c` (red), `l_l` (blue) and `l_b` (green) per step on a
/// log10 axis.
pub fn plot_loss_curve(losses: &[StepLog], path: &Path) -> Result<()> {
    if losses.is_empty() {
        return data_err("no losses to plot");
    }
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
    let axis = Rgb([90, 90, 90]);
    let (left, right) = (MARGIN as f64, (WIDTH - MARGIN / 2) as f64);
    let (top, bottom) = ((MARGIN / 2) as f64, (HEIGHT - MARGIN) as f64);
    line(&mut img, (left, top), (left, bottom), axis);
    line(&mut img, (left, bottom), (right, bottom), axis);

    let floor = 1e-6;
    let series: [(fn(&StepLog) -> f64, Rgb<u8>); 4] = [
        (|s| s.loss.l_c, Rgb([200, 40, 40])),
        (|s| s.loss.l_l, Rgb([40, 70, 200])),
        (|s| s.loss.l_b, Rgb([30, 150, 60])),
        (|s| s.loss.total, Rgb([0, 0, 0])),
    ];
    let logs: Vec<f64> = losses
        .iter()
        .flat_map(|s| series.iter().map(move |(f, _)| f(s).max(floor).log10()))
        .collect();
    let lo = logs.iter().copied().fold(f64::INFINITY, f64::min).floor();
    let hi = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max).ceil().max(lo + 1.0);
    for decade in lo as i32..=hi as i32 {
        let y = bottom - (decade as f64 - lo) / (hi - lo) * (bottom - top);
        line(&mut img, (left - 6.0, y), (left, y), axis);
    }
    let n = losses.len().max(2) - 1;
    let px = |i: usize| left + i as f64 / n as f64 * (right - left);
    let py = |v: f64| bottom - (v.max(floor).log10() - lo) / (hi - lo) * (bottom - top);
    for (f, color) in series {
        for i in 1..losses.len() {
            line(&mut img, (px(i - 1), py(f(&losses[i - 1]))), (px(i), py(f(&losses[i]))), color);
        }
        if losses.len() == 1 {
            line(&mut img, (px(0), py(f(&losses[0]))), (px(0) + 1.0, py(f(&losses[0]))), color);
        }
    }
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}
