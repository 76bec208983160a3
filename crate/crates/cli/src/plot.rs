//! PNG plots. Each plot's data is written as CSV beside it.

use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use unforge::metrics::Histogram;
use unforge::{Error, Result, Tensor};

const W: u32 = 480;
const H: u32 = 240;
const MARGIN: u32 = 16;
const BG: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([0, 0, 0]);
const PALETTE: [Rgb<u8>; 4] = [
    Rgb([31, 119, 180]),
    Rgb([255, 127, 14]),
    Rgb([44, 160, 44]),
    Rgb([214, 39, 40]),
];

fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| Error::Io(std::io::Error::other(e)))
}

fn canvas() -> RgbImage {
    let mut img = RgbImage::from_pixel(W, H, BG);
    for x in MARGIN..W - MARGIN {
        img.put_pixel(x, H - MARGIN, AXIS);
    }
    for y in MARGIN..=H - MARGIN {
        img.put_pixel(MARGIN, y, AXIS);
    }
    img
}

fn fill(img: &mut RgbImage, x0: u32, x1: u32, y0: u32, y1: u32, c: Rgb<u8>) {
    for x in x0..x1.min(W) {
        for y in y0..y1.min(H) {
            img.put_pixel(x, y, c);
        }
    }
}

/// Overlaid histograms sharing bin edges, one colour per series.
pub fn histograms(path: &Path, series: &[(&str, &Histogram)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path.with_extension("csv")).map_err(csv_err)?;
    w.write_record(["series", "lo", "hi", "count"]).map_err(csv_err)?;
    for (name, h) in series {
        for (b, c) in h.counts.iter().enumerate() {
            w.write_record([name.to_string(), h.edges[b].to_string(), h.edges[b + 1].to_string(), c.to_string()])
                .map_err(csv_err)?;
        }
    }
    w.flush()?;
    let mut img = canvas();
    let peak = series
        .iter()
        .flat_map(|(_, h)| h.counts.iter().copied())
        .max()
        .unwrap_or(0)
        .max(1);
    let bins = series.iter().map(|(_, h)| h.counts.len()).max().unwrap_or(1).max(1) as u32;
    let plot_w = W - 2 * MARGIN - 2;
    let slot = (plot_w / bins).max(1);
    let bar = (slot / series.len().max(1) as u32).max(1);
    let plot_h = (H - 2 * MARGIN - 2) as f64;
    for (s, (_, h)) in series.iter().enumerate() {
        for (b, &c) in h.counts.iter().enumerate() {
            let height = (c as f64 / peak as f64 * plot_h).round() as u32;
            let x0 = MARGIN + 2 + b as u32 * slot + s as u32 * bar;
            fill(&mut img, x0, x0 + bar, H - MARGIN - height, H - MARGIN, PALETTE[s % PALETTE.len()]);
        }
    }
    save_png(&img, path)
}

/// Line plot of `y` against `x` per series.
pub fn lines(path: &Path, x_name: &str, x: &[f64], series: &[(&str, Vec<f64>)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path.with_extension("csv")).map_err(csv_err)?;
    let mut header = vec![x_name.to_string()];
    header.extend(series.iter().map(|(n, _)| n.to_string()));
    w.write_record(&header).map_err(csv_err)?;
    for (i, xv) in x.iter().enumerate() {
        let mut row = vec![xv.to_string()];
        row.extend(series.iter().map(|(_, ys)| ys.get(i).map_or(String::new(), |v| v.to_string())));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    let mut img = canvas();
    let span = |v: &mut dyn Iterator<Item = f64>| {
        v.filter(|f| f.is_finite())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), f| (lo.min(f), hi.max(f)))
    };
    let (x_lo, x_hi) = span(&mut x.iter().copied());
    let (y_lo, y_hi) = span(&mut series.iter().flat_map(|(_, ys)| ys.iter().copied()));
    if !x_lo.is_finite() || !y_lo.is_finite() {
        return save_png(&img, path);
    }
    let sx = |v: f64| {
        let t = if x_hi > x_lo { (v - x_lo) / (x_hi - x_lo) } else { 0.5 };
        MARGIN + 4 + (t * (W - 2 * MARGIN - 8) as f64) as u32
    };
    let sy = |v: f64| {
        let t = if y_hi > y_lo { (v - y_lo) / (y_hi - y_lo) } else { 0.5 };
        H - MARGIN - 4 - (t * (H - 2 * MARGIN - 8) as f64) as u32
    };
    for (s, (_, ys)) in series.iter().enumerate() {
        let c = PALETTE[s % PALETTE.len()];
        let pts: Vec<(u32, u32)> = x.iter().zip(ys).map(|(&a, &b)| (sx(a), sy(b))).collect();
        for &(px, py) in &pts {
            fill(&mut img, px.saturating_sub(2), px + 3, py.saturating_sub(2), py + 3, c);
        }
        for pair in pts.windows(2) {
            let ((x0, y0), (x1, y1)) = (pair[0], pair[1]);
            let steps = x1.abs_diff(x0).max(y1.abs_diff(y0)).max(1);
            for t in 0..=steps {
                let f = t as f64 / steps as f64;
                let px = (x0 as f64 + f * (x1 as f64 - x0 as f64)).round() as u32;
                let py = (y0 as f64 + f * (y1 as f64 - y0 as f64)).round() as u32;
                img.put_pixel(px.min(W - 1), py.min(H - 1), c);
            }
        }
    }
    save_png(&img, path)
}

/// Grayscale PNG of a `[1, H, W]` or `[3, H, W]` tensor with values in [0, 1],
/// upscaled by `scale`.
pub fn image(path: &Path, t: &Tensor, scale: u32) -> Result<()> {
    let sh = t.shape();
    if sh.len() != 3 || !(sh[0] == 1 || sh[0] == 3) {
        return Err(Error::InvalidArgument(format!("cannot render tensor of shape {sh:?}")));
    }
    let (h, w) = (sh[1] as u32, sh[2] as u32);
    let px = |c: usize, y: u32, x: u32| (t[[c, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8;
    let scale = scale.max(1);
    if sh[0] == 1 {
        let img = GrayImage::from_fn(w * scale, h * scale, |x, y| Luma([px(0, y / scale, x / scale)]));
        img.save(path).map_err(|e| Error::Io(std::io::Error::other(e)))
    } else {
        let img = RgbImage::from_fn(w * scale, h * scale, |x, y| {
            let (yy, xx) = (y / scale, x / scale);
            Rgb([px(0, yy, xx), px(1, yy, xx), px(2, yy, xx)])
        });
        save_png(&img, path)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Write rows of string cells as CSV.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
