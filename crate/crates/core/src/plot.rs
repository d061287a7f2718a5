//! Line charts rendered to PNG.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use plotters::prelude::*;
use plotters::style::FontStyle;

use crate::error::{Error, Result};

const SIZE: (u32, u32) = (800, 500);
const FONT_ENV: &str = "BARKID_FONT";
const FONT_CANDIDATES: [&str; 6] = [
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
    "/usr/share/fonts/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/truetype/liberation/LiberationSans-Regular.ttf",
    "/Library/Fonts/Arial.ttf",
    "C:\\Windows\\Fonts\\arial.ttf",
];

/// Registers the first readable TrueType font as `sans-serif`; charts are drawn
/// without text when there is none.
fn text_available() -> bool {
    static REGISTERED: OnceLock<bool> = OnceLock::new();
    *REGISTERED.get_or_init(|| {
        let candidates = std::env::var_os(FONT_ENV)
            .map(PathBuf::from)
            .into_iter()
            .chain(FONT_CANDIDATES.iter().map(PathBuf::from));
        for path in candidates {
            if let Ok(bytes) = std::fs::read(&path) {
                let bytes: &'static [u8] = Box::leak(bytes.into_boxed_slice());
                if plotters::style::register_font("sans-serif", FontStyle::Normal, bytes).is_ok() {
                    return true;
                }
            }
        }
        log::warn!("no TrueType font found (set {FONT_ENV}); plots will have no labels");
        false
    })
}

fn padded_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    let pad = if hi > lo { (hi - lo) * 0.05 } else { lo.abs().max(1.0) * 0.1 };
    (lo - pad, hi + pad)
}

/// One curve per named series over shared x values; `None` points are skipped and
/// series with no points are left out.
pub(crate) fn line_chart(path: &Path, title: &str, y_label: &str, xs: &[f64], series: &[(&str, Vec<Option<f64>>)]) -> Result<()> {
    let with_text = text_available();
    let mut buf = vec![255u8; (SIZE.0 * SIZE.1 * 3) as usize];
    let fail = |e: &dyn std::fmt::Display| Error::format(path, format!("plotting failed: {e}"));
    {
        let root = BitMapBackend::with_buffer(&mut buf, SIZE).into_drawing_area();
        let (x0, x1) = padded_range(xs.iter().copied());
        let (y0, y1) = padded_range(series.iter().flat_map(|(_, v)| v.iter().flatten().copied()));
        let mut builder = ChartBuilder::on(&root);
        builder.margin(20);
        if with_text {
            builder
                .caption(title, ("sans-serif", 24))
                .x_label_area_size(40)
                .y_label_area_size(60);
        }
        let mut chart = builder.build_cartesian_2d(x0..x1, y0..y1).map_err(|e| fail(&e))?;
        let mut mesh = chart.configure_mesh();
        if with_text {
            mesh.x_desc("epoch").y_desc(y_label);
        } else {
            mesh.disable_x_axis().disable_y_axis();
        }
        mesh.draw().map_err(|e| fail(&e))?;
        let colors = [BLUE, RED, GREEN, MAGENTA];
        for (i, (name, ys)) in series.iter().enumerate() {
            let points: Vec<(f64, f64)> = xs.iter().zip(ys).filter_map(|(&x, y)| y.map(|y| (x, y))).collect();
            if points.is_empty() {
                continue;
            }
            let color = colors[i % colors.len()];
            let drawn = chart
                .draw_series(LineSeries::new(points.clone(), color.stroke_width(2)))
                .map_err(|e| fail(&e))?;
            if with_text {
                drawn
                    .label(*name)
                    .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
            }
            chart
                .draw_series(points.into_iter().map(|p| Circle::new(p, 3, color.filled())))
                .map_err(|e| fail(&e))?;
        }
        if with_text {
            chart
                .configure_series_labels()
                .background_style(WHITE.mix(0.8))
                .border_style(BLACK)
                .draw()
                .map_err(|e| fail(&e))?;
        }
        root.present().map_err(|e| fail(&e))?;
    }
    let img = image::RgbImage::from_raw(SIZE.0, SIZE.1, buf).expect("buffer sized for the canvas");
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::format(path, e.to_string()))
}
