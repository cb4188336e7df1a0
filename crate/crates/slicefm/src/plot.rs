//! Chart rendering to PNG with no drawing dependencies: a raw RGB canvas,
//! an embedded 5x7 uppercase bitmap font, Bresenham lines, nice-tick axes,
//! and a monotone-luminance heatmap ramp (higher value always renders
//! brighter, so the brightest pixel marks the maximum cell).

use std::path::Path;

use image::{ImageFormat, Rgb, RgbImage};
use ndarray::Array2;

use crate::error::{Error, Result};
use crate::probe::FewShotPoint;
use crate::trainer::TrainLog;

pub type Color = [u8; 3];

pub const PALETTE: [Color; 6] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
];

const BG: Color = [255, 255, 255];
const FG: Color = [40, 40, 40];
const GRID: Color = [225, 225, 225];

/// 5x7 glyphs, one byte per row, low 5 bits; text renders uppercased.
const FONT: [(char, [u8; 7]); 49] = [
    (' ', [0, 0, 0, 0, 0, 0, 0]),
    ('0', [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E]),
    ('1', [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E]),
    ('2', [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F]),
    ('3', [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E]),
    ('4', [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02]),
    ('5', [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E]),
    ('6', [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E]),
    ('7', [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08]),
    ('8', [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E]),
    ('9', [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C]),
    ('A', [0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11]),
    ('B', [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E]),
    ('C', [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E]),
    ('D', [0x1C, 0x12, 0x11, 0x11, 0x11, 0x12, 0x1C]),
    ('E', [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F]),
    ('F', [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10]),
    ('G', [0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F]),
    ('H', [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11]),
    ('I', [0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E]),
    ('J', [0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C]),
    ('K', [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11]),
    ('L', [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F]),
    ('M', [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11]),
    ('N', [0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11]),
    ('O', [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E]),
    ('P', [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10]),
    ('Q', [0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D]),
    ('R', [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11]),
    ('S', [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E]),
    ('T', [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04]),
    ('U', [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E]),
    ('V', [0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04]),
    ('W', [0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A]),
    ('X', [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11]),
    ('Y', [0x11, 0x11, 0x11, 0x0A, 0x04, 0x04, 0x04]),
    ('Z', [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F]),
    ('.', [0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C]),
    (',', [0x00, 0x00, 0x00, 0x00, 0x0C, 0x04, 0x08]),
    ('-', [0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00]),
    ('+', [0x00, 0x04, 0x04, 0x1F, 0x04, 0x04, 0x00]),
    (':', [0x00, 0x0C, 0x0C, 0x00, 0x0C, 0x0C, 0x00]),
    ('/', [0x01, 0x01, 0x02, 0x04, 0x08, 0x10, 0x10]),
    ('(', [0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02]),
    (')', [0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08]),
    ('_', [0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F]),
    ('=', [0x00, 0x00, 0x1F, 0x00, 0x1F, 0x00, 0x00]),
    ('%', [0x18, 0x19, 0x02, 0x04, 0x08, 0x13, 0x03]),
    ('*', [0x00, 0x0A, 0x04, 0x1F, 0x04, 0x0A, 0x00]),
];

fn glyph(c: char) -> [u8; 7] {
    let up = c.to_ascii_uppercase();
    for (g, rows) in FONT {
        if g == up {
            return rows;
        }
    }
    // Unknown characters render as a hollow box.
    [0x1F, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1F]
}

pub struct Canvas {
    pub width: usize,
    pub height: usize,
    px: Vec<Color>,
}

impl Canvas {
    pub fn new(width: usize, height: usize) -> Self {
        Canvas { width, height, px: vec![BG; width * height] }
    }

    pub fn set(&mut self, x: i64, y: i64, c: Color) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            self.px[y as usize * self.width + x as usize] = c;
        }
    }

    pub fn fill_rect(&mut self, x0: i64, y0: i64, w: usize, h: usize, c: Color) {
        for dy in 0..h as i64 {
            for dx in 0..w as i64 {
                self.set(x0 + dx, y0 + dy, c);
            }
        }
    }

    pub fn line(&mut self, mut x0: i64, mut y0: i64, x1: i64, y1: i64, c: Color) {
        let dx = (x1 - x0).abs();
        let dy = -(y1 - y0).abs();
        let sx = if x0 < x1 { 1 } else { -1 };
        let sy = if y0 < y1 { 1 } else { -1 };
        let mut err = dx + dy;
        loop {
            self.set(x0, y0, c);
            if x0 == x1 && y0 == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x0 += sx;
            }
            if e2 <= dx {
                err += dx;
                y0 += sy;
            }
        }
    }

    /// Thick point marker.
    pub fn dot(&mut self, x: i64, y: i64, c: Color) {
        for dy in -1..=1 {
            for dx in -1..=1 {
                self.set(x + dx, y + dy, c);
            }
        }
    }

    pub fn text(&mut self, x: i64, y: i64, s: &str, c: Color) {
        let mut cx = x;
        for ch in s.chars() {
            let rows = glyph(ch);
            for (ry, bits) in rows.iter().enumerate() {
                for rx in 0..5 {
                    if bits & (0x10 >> rx) != 0 {
                        self.set(cx + rx as i64, y + ry as i64, c);
                    }
                }
            }
            cx += 6;
        }
    }

    pub fn text_width(s: &str) -> usize {
        s.chars().count() * 6
    }

    pub fn to_image(&self) -> RgbImage {
        let mut img = RgbImage::new(self.width as u32, self.height as u32);
        for (i, p) in self.px.iter().enumerate() {
            img.put_pixel((i % self.width) as u32, (i / self.width) as u32, Rgb(*p));
        }
        img
    }
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, ImageFormat::Png)
        .map_err(|e| Error::validation("png", e.to_string()))
}

/// Tick positions with a 1-2-5 step covering [lo, hi].
fn ticks(lo: f64, hi: f64, want: usize) -> Vec<f64> {
    if !(hi > lo) {
        return vec![lo];
    }
    let raw = (hi - lo) / want.max(1) as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let norm = raw / mag;
    let step = if norm <= 1.0 {
        1.0
    } else if norm <= 2.0 {
        2.0
    } else if norm <= 5.0 {
        5.0
    } else {
        10.0
    } * mag;
    let mut t = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while t <= hi + step * 1e-9 {
        // Snap values that should be zero.
        out.push(if t.abs() < step * 1e-9 { 0.0 } else { t });
        t += step;
    }
    out
}

fn tick_label(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if a >= 1e5 || a < 1e-3 {
        return format!("{v:.1e}");
    }
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.').to_string();
    if s.is_empty() {
        "0".into()
    } else {
        s
    }
}

#[derive(Clone, Debug)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

/// Line chart with axes, grid, tick labels, and a legend naming every
/// series. Series with fewer than one finite point are skipped.
pub fn line_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
    width: usize,
    height: usize,
) -> Result<Canvas> {
    let finite: Vec<&Series> = series
        .iter()
        .filter(|s| s.points.iter().any(|&(x, y)| x.is_finite() && y.is_finite()))
        .collect();
    if finite.is_empty() {
        return Err(Error::validation("chart", "no finite data points to plot"));
    }
    let (mut xlo, mut xhi) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut ylo, mut yhi) = (f64::INFINITY, f64::NEG_INFINITY);
    for s in &finite {
        for &(x, y) in &s.points {
            if x.is_finite() && y.is_finite() {
                xlo = xlo.min(x);
                xhi = xhi.max(x);
                ylo = ylo.min(y);
                yhi = yhi.max(y);
            }
        }
    }
    if xhi == xlo {
        xhi = xlo + 1.0;
    }
    if yhi == ylo {
        let pad = ylo.abs().max(1.0) * 0.1;
        ylo -= pad;
        yhi += pad;
    } else {
        let pad = (yhi - ylo) * 0.05;
        ylo -= pad;
        yhi += pad;
    }

    let mut c = Canvas::new(width, height);
    let (l, r, t, b) = (64i64, 16i64, 24i64, 40i64);
    let pw = width as i64 - l - r;
    let ph = height as i64 - t - b;
    let to_px = |x: f64, y: f64| -> (i64, i64) {
        let px = l + ((x - xlo) / (xhi - xlo) * pw as f64).round() as i64;
        let py = t + ph - ((y - ylo) / (yhi - ylo) * ph as f64).round() as i64;
        (px, py)
    };

    for tv in ticks(xlo, xhi, 5) {
        let (px, _) = to_px(tv, ylo);
        c.line(px, t, px, t + ph, GRID);
        let label = tick_label(tv);
        c.text(px - Canvas::text_width(&label) as i64 / 2, t + ph + 6, &label, FG);
    }
    for tv in ticks(ylo, yhi, 5) {
        let (_, py) = to_px(xlo, tv);
        c.line(l, py, l + pw, py, GRID);
        let label = tick_label(tv);
        c.text(l - 4 - Canvas::text_width(&label) as i64, py - 3, &label, FG);
    }
    // Axes over the grid.
    c.line(l, t, l, t + ph, FG);
    c.line(l, t + ph, l + pw, t + ph, FG);
    c.text(l + (pw - Canvas::text_width(title) as i64) / 2, 8, title, FG);
    c.text(
        l + (pw - Canvas::text_width(x_label) as i64) / 2,
        height as i64 - 12,
        x_label,
        FG,
    );
    c.text(4, 8, y_label, FG);

    for (si, s) in finite.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let pts: Vec<(i64, i64)> = s
            .points
            .iter()
            .filter(|&&(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| to_px(x, y))
            .collect();
        for w in pts.windows(2) {
            c.line(w[0].0, w[0].1, w[1].0, w[1].1, color);
        }
        if pts.len() == 1 {
            c.dot(pts[0].0, pts[0].1, color);
        }
    }
    // Legend, top-right inside the plot area.
    let lw = finite.iter().map(|s| Canvas::text_width(&s.name)).max().unwrap_or(0) as i64 + 22;
    let lx = l + pw - lw - 4;
    for (si, s) in finite.iter().enumerate() {
        let y = t + 6 + si as i64 * 10;
        c.fill_rect(lx, y + 2, 10, 3, PALETTE[si % PALETTE.len()]);
        c.text(lx + 14, y, &s.name, FG);
    }
    Ok(c)
}

/// Values mapped through a dark-to-bright ramp (monotone luminance), each
/// cell drawn as a square block.
pub fn heatmap(values: &Array2<f64>, lo: f64, hi: f64, cell: usize) -> Canvas {
    const RAMP: [Color; 5] =
        [[68, 1, 84], [59, 82, 139], [33, 145, 140], [94, 201, 98], [253, 231, 37]];
    let (rows, cols) = values.dim();
    let cell = cell.max(1);
    let mut c = Canvas::new(cols * cell, rows * cell);
    let span = if hi > lo { hi - lo } else { 1.0 };
    for i in 0..rows {
        for j in 0..cols {
            let t = ((values[[i, j]] - lo) / span).clamp(0.0, 1.0);
            let x = t * (RAMP.len() - 1) as f64;
            let k = (x.floor() as usize).min(RAMP.len() - 2);
            let f = x - k as f64;
            let mix = |a: u8, b: u8| (a as f64 + (b as f64 - a as f64) * f).round() as u8;
            let color = [
                mix(RAMP[k][0], RAMP[k + 1][0]),
                mix(RAMP[k][1], RAMP[k + 1][1]),
                mix(RAMP[k][2], RAMP[k + 1][2]),
            ];
            c.fill_rect((j * cell) as i64, (i * cell) as i64, cell, cell, color);
        }
    }
    c
}

/// Two stacked panels from training logs: every run's total loss (plus the
/// per-objective curves when a single run is given), and the probe metric
/// where recorded. Legend entries carry the run names.
pub fn train_log_charts(runs: &[(String, &TrainLog)]) -> Result<RgbImage> {
    if runs.is_empty() || runs.iter().all(|(_, log)| log.rows.is_empty()) {
        return Err(Error::validation("train_log", "no rows to plot"));
    }
    let mut loss_series = Vec::new();
    if runs.len() == 1 {
        let (name, log) = &runs[0];
        for (label, pick) in [
            ("total", 3usize),
            ("dino", 0),
            ("ibot", 1),
            ("reg", 2),
        ] {
            let points: Vec<(f64, f64)> = log
                .rows
                .iter()
                .map(|r| {
                    let v = [r.dino, r.ibot, r.reg, r.total][pick];
                    (r.step as f64, v)
                })
                .collect();
            loss_series.push(Series { name: format!("{name} {label}"), points });
        }
    } else {
        for (name, log) in runs {
            let points: Vec<(f64, f64)> =
                log.rows.iter().map(|r| (r.step as f64, r.total)).collect();
            loss_series.push(Series { name: name.clone(), points });
        }
    }
    let loss_panel = line_chart("loss vs step", "step", "loss", &loss_series, 720, 300)?;

    let mut probe_series = Vec::new();
    for (name, log) in runs {
        let points: Vec<(f64, f64)> = log
            .rows
            .iter()
            .filter_map(|r| r.probe_metric.map(|p| (r.step as f64, p)))
            .collect();
        if !points.is_empty() {
            probe_series.push(Series { name: name.clone(), points });
        }
    }
    let panels = if probe_series.is_empty() {
        vec![loss_panel]
    } else {
        vec![
            loss_panel,
            line_chart("probe metric vs step", "step", "metric", &probe_series, 720, 300)?,
        ]
    };
    Ok(stack_vertical(&panels))
}

/// Mean metric vs shot count, one band series per +/- one std around the
/// mean; skipped points are omitted.
pub fn few_shot_chart(task: &str, points: &[FewShotPoint]) -> Result<RgbImage> {
    let mut pts: Vec<(f64, f64, f64)> = points
        .iter()
        .filter_map(|p| p.report.as_ref().map(|r| (p.shots as f64, r.mean, r.std)))
        .collect();
    if pts.is_empty() {
        return Err(Error::validation("fewshot", "every point was skipped"));
    }
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let series = [
        Series { name: task.to_string(), points: pts.iter().map(|&(x, m, _)| (x, m)).collect() },
        Series {
            name: "mean+std".into(),
            points: pts.iter().map(|&(x, m, s)| (x, m + s)).collect(),
        },
        Series {
            name: "mean-std".into(),
            points: pts.iter().map(|&(x, m, s)| (x, m - s)).collect(),
        },
    ];
    let canvas = line_chart("metric vs shots", "shots per class", "metric", &series, 720, 300)?;
    Ok(canvas.to_image())
}

pub fn stack_vertical(panels: &[Canvas]) -> RgbImage {
    let width = panels.iter().map(|p| p.width).max().unwrap_or(1);
    let height: usize = panels.iter().map(|p| p.height).sum();
    let mut img = RgbImage::from_pixel(width as u32, height.max(1) as u32, Rgb(BG));
    let mut y0 = 0u32;
    for p in panels {
        let pi = p.to_image();
        for (x, y, px) in pi.enumerate_pixels() {
            img.put_pixel(x, y0 + y, *px);
        }
        y0 += p.height as u32;
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probe::MetricReport;
    use crate::trainer::TrainLogRow;

    fn row(step: u64, total: f64, probe: Option<f64>) -> TrainLogRow {
        TrainLogRow {
            step,
            dino: total * 0.6,
            ibot: total * 0.3,
            reg: total * 0.1,
            total,
            lr: 1e-3,
            m: 0.99,
            probe_metric: probe,
        }
    }

    #[test]
    fn ticks_cover_the_range_with_small_steps() {
        let t = ticks(0.0, 10.0, 5);
        assert!(t.contains(&0.0) && t.contains(&10.0), "{t:?}");
        assert!(t.len() >= 4 && t.len() <= 12, "{t:?}");
        let t = ticks(-0.37, 0.37, 5);
        assert!(t.iter().any(|&v| v == 0.0), "{t:?}");
        for w in t.windows(2) {
            assert!(w[1] > w[0]);
        }
        assert_eq!(ticks(2.0, 2.0, 5), vec![2.0]);
    }

    #[test]
    fn tick_labels_are_compact_and_lossless_for_round_values() {
        assert_eq!(tick_label(0.0), "0");
        assert_eq!(tick_label(2.5), "2.5");
        assert_eq!(tick_label(-10.0), "-10");
        assert_eq!(tick_label(1_000_000.0), "1.0e6");
        assert_eq!(tick_label(0.0005), "5.0e-4");
    }

    #[test]
    fn every_font_character_is_distinct() {
        for (i, (ca, ga)) in FONT.iter().enumerate() {
            for (cb, gb) in FONT.iter().skip(i + 1) {
                assert!(ca != cb, "duplicate glyph for {ca}");
                if ga == gb {
                    panic!("{ca} and {cb} share a bitmap");
                }
            }
        }
    }

    #[test]
    fn line_chart_rejects_empty_series_and_draws_finite_ones() {
        let empty = Series { name: "none".into(), points: vec![(f64::NAN, 1.0)] };
        assert!(line_chart("t", "x", "y", &[empty], 300, 200).is_err());
        let s = Series {
            name: "run".into(),
            points: (0..50).map(|i| (i as f64, (i as f64 * 0.3).sin())).collect(),
        };
        let c = line_chart("t", "x", "y", &[s], 300, 200).unwrap();
        let img = c.to_image();
        assert_eq!(img.dimensions(), (300, 200));
        // The series color must appear somewhere.
        let hit = img.pixels().any(|p| p.0 == PALETTE[0]);
        assert!(hit, "series line not drawn");
    }

    #[test]
    fn heatmap_brightest_pixel_marks_the_maximum_cell() {
        let mut v = Array2::from_elem((4, 4), -0.2);
        v[[1, 2]] = 1.0;
        let c = heatmap(&v, -1.0, 1.0, 8);
        let img = c.to_image();
        let mut best = (0u32, 0u32, 0u32);
        for (x, y, p) in img.enumerate_pixels() {
            let lum =
                2 * p.0[0] as u32 + 7 * p.0[1] as u32 + p.0[2] as u32;
            if lum > best.2 {
                best = (x, y, lum);
            }
        }
        assert!(best.0 >= 16 && best.0 < 24, "x {}", best.0);
        assert!(best.1 >= 8 && best.1 < 16, "y {}", best.1);
    }

    #[test]
    fn train_log_chart_overlays_runs_and_requires_rows() {
        let a = TrainLog {
            rows: (0..20).map(|i| row(i, 11.0 - i as f64 * 0.1, (i % 5 == 0).then(|| 0.5))).collect(),
            collapse_steps: vec![],
        };
        let b = TrainLog {
            rows: (0..20).map(|i| row(i, 11.5 - i as f64 * 0.05, None)).collect(),
            collapse_steps: vec![],
        };
        let img = train_log_charts(&[("with".into(), &a), ("without".into(), &b)]).unwrap();
        assert!(img.width() > 0 && img.height() > 0);
        let empty = TrainLog::default();
        let err = train_log_charts(&[("empty".into(), &empty)]).unwrap_err();
        assert!(matches!(err, Error::Validation { .. }), "{err}");
    }

    #[test]
    fn few_shot_chart_skips_missing_points() {
        let points = vec![
            FewShotPoint {
                shots: 1,
                report: Some(MetricReport::from_values("t".into(), "bacc".into(), vec![0.5, 0.6])),
            },
            FewShotPoint { shots: 64, report: None },
            FewShotPoint {
                shots: 4,
                report: Some(MetricReport::from_values("t".into(), "bacc".into(), vec![0.7, 0.8])),
            },
        ];
        let img = few_shot_chart("organ_class", &points).unwrap();
        assert!(img.width() > 0);
        let all_skipped = vec![FewShotPoint { shots: 9, report: None }];
        assert!(few_shot_chart("organ_class", &all_skipped).is_err());
    }

    #[test]
    fn png_round_trip_is_identical_for_identical_canvases() {
        let dir = tempfile::tempdir().unwrap();
        let v = Array2::from_shape_fn((3, 5), |(i, j)| (i * 5 + j) as f64);
        let p1 = dir.path().join("a.png");
        let p2 = dir.path().join("b.png");
        save_png(&heatmap(&v, 0.0, 14.0, 4).to_image(), &p1).unwrap();
        save_png(&heatmap(&v, 0.0, 14.0, 4).to_image(), &p2).unwrap();
        let b1 = std::fs::read(&p1).unwrap();
        let b2 = std::fs::read(&p2).unwrap();
        assert!(!b1.is_empty());
        assert_eq!(b1, b2);
    }
}
