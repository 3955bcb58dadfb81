//! SVG charts. The CSV files are the data of record; these are for reading.

use std::path::Path;

use plotters::prelude::*;

use crate::BenchError;

fn plot_err(e: impl std::fmt::Display) -> BenchError {
    BenchError::Io(std::io::Error::other(e.to_string()))
}

fn upper(values: impl Iterator<Item = f64>) -> f64 {
    let max = values.fold(0.0f64, f64::max);
    if max > 0.0 {
        max * 1.1
    } else {
        1.0
    }
}

/// Latency of each cycle in delivery order.
pub fn latency_series(path: &Path, latencies_ms: &[f64], title: &str) -> Result<(), BenchError> {
    let root = SVGBackend::new(path, (900, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let y_max = upper(latencies_ms.iter().copied());
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("End-to-end latency, {title}"), ("sans-serif", 20))
        .margin(15)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(0usize..latencies_ms.len().max(1), 0.0..y_max)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("cycle")
        .y_desc("latency (ms)")
        .draw()
        .map_err(plot_err)?;
    chart
        .draw_series(LineSeries::new(latencies_ms.iter().copied().enumerate(), &BLUE))
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

/// Median and p95 latency against producer count.
pub fn latency_vs_producers(path: &Path, levels: &[(usize, f64, f64)]) -> Result<(), BenchError> {
    let root = SVGBackend::new(path, (900, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let x_max = levels.iter().map(|l| l.0).max().unwrap_or(1);
    let y_max = upper(levels.iter().map(|l| l.2.max(l.1)));
    let mut chart = ChartBuilder::on(&root)
        .caption("Latency vs producers", ("sans-serif", 20))
        .margin(15)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(0usize..x_max + x_max / 10 + 1, 0.0..y_max)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("producers")
        .y_desc("latency (ms)")
        .draw()
        .map_err(plot_err)?;
    chart
        .draw_series(LineSeries::new(levels.iter().map(|l| (l.0, l.1)), &BLUE))
        .map_err(plot_err)?
        .label("median")
        .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], BLUE));
    chart
        .draw_series(LineSeries::new(levels.iter().map(|l| (l.0, l.2)), &RED))
        .map_err(plot_err)?
        .label("p95")
        .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], RED));
    chart
        .configure_series_labels()
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}
