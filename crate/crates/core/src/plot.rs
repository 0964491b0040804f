//! Static SVG plots of average accuracy against the number of tasks seen.

use std::path::Path;

use plotters::prelude::*;

use crate::error::{EftError, Result};
use crate::run::Curves;

fn render_err(e: impl std::fmt::Display) -> EftError {
    EftError::Render(e.to_string())
}

/// Draws the TIL and CIL average-accuracy curves (in percent) to an SVG file.
pub fn plot_curves(curves: &Curves, path: &Path, title: &str) -> Result<()> {
    let n = curves.til.len().max(curves.cil.len());
    if n == 0 {
        return Err(EftError::Render("no accuracy values to plot".into()));
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|source| EftError::OutputNotWritable {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    // Probe writability up front so the caller gets the right error class.
    std::fs::write(path, b"").map_err(|source| EftError::OutputNotWritable {
        path: path.to_path_buf(),
        source,
    })?;

    let root = SVGBackend::new(path, (640, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(render_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d(0.5f64..n as f64 + 0.5, 0f64..100f64)
        .map_err(render_err)?;
    chart
        .configure_mesh()
        .x_desc("tasks seen")
        .y_desc("average accuracy (%)")
        .x_labels(n.min(20))
        .x_label_formatter(&|v| format!("{:.0}", v))
        .draw()
        .map_err(render_err)?;

    for (name, values, color) in [("TIL", &curves.til, BLUE), ("CIL", &curves.cil, RED)] {
        let pts: Vec<(f64, f64)> = values.iter().enumerate().map(|(i, &v)| ((i + 1) as f64, 100.0 * v)).collect();
        chart
            .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))
            .map_err(render_err)?
            .label(name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
        chart
            .draw_series(pts.into_iter().map(|p| Circle::new(p, 4, color.filled())))
            .map_err(render_err)?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .position(SeriesLabelPosition::LowerLeft)
        .draw()
        .map_err(render_err)?;
    root.present().map_err(render_err)
}
