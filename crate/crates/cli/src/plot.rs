//! SVG figures. Each one is written next to a CSV holding the same data.

use crate::CliError;
use plotters::prelude::*;
use std::path::Path;

const PALETTE: [RGBColor; 10] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
    RGBColor(227, 119, 194),
    RGBColor(127, 127, 127),
    RGBColor(188, 189, 34),
    RGBColor(23, 190, 207),
];

fn color(i: usize) -> RGBColor {
    PALETTE[i % PALETTE.len()]
}

fn draw_err<E: std::fmt::Debug>(e: E) -> CliError {
    CliError::Runtime(format!("plot: {e:?}"))
}

fn padded(lo: f64, hi: f64) -> (f64, f64) {
    let pad = ((hi - lo) * 0.05).max(1e-6);
    (lo - pad, hi + pad)
}

/// One accuracy-per-round line per run, in the given order.
pub fn curve(runs: &[(String, Vec<(usize, f64)>)], svg: &Path, csv_path: &Path) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(csv_path)?;
    w.write_record(["run", "t", "acc"])?;
    for (label, pts) in runs {
        for (t, a) in pts {
            w.write_record([label.as_str(), &t.to_string(), &a.to_string()])?;
        }
    }
    w.flush()?;

    let t_max = runs.iter().flat_map(|(_, p)| p.iter().map(|x| x.0)).max().unwrap_or(1).max(2);
    let root = SVGBackend::new(svg, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(draw_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("validation accuracy", ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(35)
        .y_label_area_size(45)
        .build_cartesian_2d(1usize..t_max, 0f64..1f64)
        .map_err(draw_err)?;
    chart
        .configure_mesh()
        .x_desc("round")
        .y_desc("accuracy")
        .draw()
        .map_err(draw_err)?;
    for (i, (label, pts)) in runs.iter().enumerate() {
        let c = color(i);
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), c.stroke_width(2)))
            .map_err(draw_err)?
            .label(label.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], c));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(draw_err)?;
    root.present().map_err(draw_err)?;
    Ok(())
}

/// Clients by classes, shaded by sample count.
pub fn heatmap(counts: &[Vec<usize>], svg: &Path, csv_path: &Path) -> Result<(), CliError> {
    let classes = counts.first().map_or(0, |r| r.len());
    let mut w = csv::Writer::from_path(csv_path)?;
    let mut header = vec!["client".to_string()];
    header.extend((0..classes).map(|c| format!("class_{c}")));
    w.write_record(&header)?;
    for (k, row) in counts.iter().enumerate() {
        let mut rec = vec![k.to_string()];
        rec.extend(row.iter().map(|c| c.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;

    let max = counts.iter().flatten().copied().max().unwrap_or(1).max(1) as f64;
    let k = counts.len().max(1);
    let root = SVGBackend::new(svg, (160 * classes.max(1) as u32 + 100, 40 * k as u32 + 80)).into_drawing_area();
    root.fill(&WHITE).map_err(draw_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("label counts per client", ("sans-serif", 18))
        .margin(10)
        .x_label_area_size(30)
        .y_label_area_size(50)
        .build_cartesian_2d(0..classes, 0..k)
        .map_err(draw_err)?;
    chart
        .configure_mesh()
        .disable_mesh()
        .x_desc("class")
        .y_desc("client")
        .draw()
        .map_err(draw_err)?;
    chart
        .draw_series(counts.iter().enumerate().flat_map(|(ki, row)| {
            row.iter().enumerate().map(move |(c, &n)| {
                let s = n as f64 / max;
                let shade = RGBColor((255.0 * (1.0 - s)) as u8, (255.0 * (1.0 - 0.6 * s)) as u8, 255);
                Rectangle::new([(c, ki), (c + 1, ki + 1)], shade.filled())
            })
        }))
        .map_err(draw_err)?;
    chart
        .draw_series(counts.iter().enumerate().flat_map(|(ki, row)| {
            row.iter().enumerate().map(move |(c, &n)| {
                Text::new(n.to_string(), (c, ki), ("sans-serif", 14).into_font().color(&BLACK))
            })
        }))
        .map_err(draw_err)?;
    root.present().map_err(draw_err)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeaturePoint {
    pub client: usize,
    pub x: f64,
    pub y: f64,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridCell {
    pub x: f64,
    pub y: f64,
    pub pred: usize,
}

/// Per-client scatter of 2-D representations over the decision regions.
pub fn features(
    points: &[FeaturePoint],
    grid: &[GridCell],
    cell: (f64, f64),
    svg: &Path,
    csv_path: &Path,
    grid_csv: &Path,
) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(csv_path)?;
    w.write_record(["client", "x", "y", "label"])?;
    for p in points {
        w.write_record([p.client.to_string(), p.x.to_string(), p.y.to_string(), p.label.to_string()])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(grid_csv)?;
    w.write_record(["x", "y", "pred"])?;
    for g in grid {
        w.write_record([g.x.to_string(), g.y.to_string(), g.pred.to_string()])?;
    }
    w.flush()?;

    let clients = points.iter().map(|p| p.client + 1).max().unwrap_or(1);
    let cols = (clients as f64).sqrt().ceil() as usize;
    let rows = clients.div_ceil(cols);
    let xs = grid.iter().map(|g| g.x).chain(points.iter().map(|p| p.x));
    let ys = grid.iter().map(|g| g.y).chain(points.iter().map(|p| p.y));
    let (x0, x1) = padded(xs.clone().fold(f64::INFINITY, f64::min), xs.fold(f64::NEG_INFINITY, f64::max));
    let (y0, y1) = padded(ys.clone().fold(f64::INFINITY, f64::min), ys.fold(f64::NEG_INFINITY, f64::max));

    let root = SVGBackend::new(svg, (300 * cols as u32, 300 * rows as u32)).into_drawing_area();
    root.fill(&WHITE).map_err(draw_err)?;
    let regions = [RGBColor(220, 232, 250), RGBColor(250, 225, 220)];
    let marks = [RGBColor(31, 80, 180), RGBColor(200, 40, 40)];
    for (k, area) in root.split_evenly((rows, cols)).into_iter().enumerate().take(clients) {
        let mut chart = ChartBuilder::on(&area)
            .caption(format!("client {k}"), ("sans-serif", 14))
            .margin(5)
            .x_label_area_size(20)
            .y_label_area_size(30)
            .build_cartesian_2d(x0..x1, y0..y1)
            .map_err(draw_err)?;
        chart.configure_mesh().disable_mesh().draw().map_err(draw_err)?;
        chart
            .draw_series(grid.iter().map(|g| {
                Rectangle::new(
                    [(g.x - cell.0 / 2.0, g.y - cell.1 / 2.0), (g.x + cell.0 / 2.0, g.y + cell.1 / 2.0)],
                    regions[g.pred % 2].filled(),
                )
            }))
            .map_err(draw_err)?;
        chart
            .draw_series(
                points
                    .iter()
                    .filter(|p| p.client == k)
                    .map(|p| Circle::new((p.x, p.y), 2, marks[p.label % 2].filled())),
            )
            .map_err(draw_err)?;
    }
    root.present().map_err(draw_err)?;
    Ok(())
}
