//! The two per-run figures: PSNR against iteration and MSE against wall time.

use std::path::Path;
use std::sync::OnceLock;

use anyhow::{anyhow, Result};
use plotters::prelude::*;
use skei::trainer::IterRecord;

use crate::rundir::{read_metrics, RunManifest, FIGURES, FIGURE_DIR};

const FONT_PATHS: [&str; 4] = [
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
    "/usr/share/fonts/dejavu/DejaVuSans.ttf",
    "/Library/Fonts/Arial Unicode.ttf",
];

/// Registers a system TrueType font once; without one, figures have no text.
fn have_font() -> bool {
    static FONT: OnceLock<bool> = OnceLock::new();
    *FONT.get_or_init(|| {
        let mut paths: Vec<String> = std::env::var("SKEI_FONT").into_iter().collect();
        paths.extend(FONT_PATHS.iter().map(|p| p.to_string()));
        paths.iter().filter_map(|p| std::fs::read(p).ok()).any(|bytes| {
            let bytes: &'static [u8] = Box::leak(bytes.into_boxed_slice());
            plotters::style::register_font("sans-serif", FontStyle::Normal, bytes).is_ok()
        })
    })
}

fn bounds(v: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let lo = v.clone().fold(f64::INFINITY, f64::min);
    let hi = v.fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}

fn line_chart(path: &Path, title: &str, xlabel: &str, ylabel: &str, pts: &[(f64, f64)], log_y: bool) -> Result<()> {
    let root = BitMapBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| anyhow!("{e}"))?;
    let text = have_font();
    let (x0, x1) = bounds(pts.iter().map(|p| p.0));
    let err = |e: DrawingAreaErrorKind<_>| anyhow!("plotting {}: {e}", path.display());
    let mut builder = ChartBuilder::on(&root);
    builder.margin(20);
    if text {
        builder
            .caption(title, ("sans-serif", 24))
            .x_label_area_size(45)
            .y_label_area_size(70);
    }
    if log_y {
        let (y0, y1) = bounds(pts.iter().map(|p| p.1).filter(|v| *v > 0.0));
        let y0 = y0.max(f64::MIN_POSITIVE);
        let mut chart = builder
            .build_cartesian_2d(x0..x1, (y0..y1.max(y0 * 10.0)).log_scale())
            .map_err(err)?;
        let fmt = |v: &f64| format!("{v:.2e}");
        let mut mesh = chart.configure_mesh();
        mesh.y_label_formatter(&fmt);
        if text {
            mesh.x_desc(xlabel).y_desc(ylabel);
        } else {
            mesh.disable_x_mesh().disable_y_mesh();
        }
        mesh.draw().map_err(err)?;
        chart
            .draw_series(LineSeries::new(pts.iter().copied().filter(|p| p.1 > 0.0), &BLUE))
            .map_err(err)?;
    } else {
        let (y0, y1) = bounds(pts.iter().map(|p| p.1));
        let mut chart = builder.build_cartesian_2d(x0..x1, y0..y1).map_err(err)?;
        let mut mesh = chart.configure_mesh();
        if text {
            mesh.x_desc(xlabel).y_desc(ylabel);
        } else {
            mesh.disable_x_mesh().disable_y_mesh();
        }
        mesh.draw().map_err(err)?;
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), &BLUE))
            .map_err(err)?;
    }
    root.present().map_err(|e| anyhow!("writing {}: {e}", path.display()))?;
    Ok(())
}

/// Writes exactly the two figure files into `dir/figures`. Without a
/// reference the PSNR panel is empty and the MSE panel shows the
/// measurement residual instead.
pub fn plot_run(dir: &Path, records: &[IterRecord], peak: Option<f64>) -> Result<()> {
    let fig_dir = dir.join(FIGURE_DIR);
    std::fs::create_dir_all(&fig_dir)?;
    let psnr: Vec<(f64, f64)> = records
        .iter()
        .filter_map(|r| r.psnr.map(|p| (r.iter as f64, p)))
        .collect();
    let (mse, ylabel): (Vec<(f64, f64)>, &str) = match peak {
        Some(peak) if !psnr.is_empty() => (
            records
                .iter()
                .filter_map(|r| r.psnr.map(|p| (r.wall_time_s, peak * peak * 10f64.powf(-p / 10.0))))
                .collect(),
            "MSE to reference",
        ),
        _ => (
            records.iter().map(|r| (r.wall_time_s, r.mc)).collect(),
            "measurement residual",
        ),
    };
    line_chart(
        &fig_dir.join(FIGURES[0]),
        "PSNR vs iteration",
        "iteration",
        "PSNR (dB)",
        &psnr,
        false,
    )?;
    line_chart(
        &fig_dir.join(FIGURES[1]),
        "MSE vs wall time",
        "wall time (s)",
        ylabel,
        &mse,
        true,
    )?;
    Ok(())
}

/// `skei plot <dir>`: redraws the figures of one run or of every run below.
pub fn plot_dir(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut written = Vec::new();
    for run in crate::rundir::run_dirs(dir)? {
        let m = RunManifest::read(&run)?;
        let records = read_metrics(&run)?;
        plot_run(&run, &records, m.psnr_peak)?;
        written.extend(FIGURES.iter().map(|f| run.join(FIGURE_DIR).join(f)));
    }
    Ok(written)
}
