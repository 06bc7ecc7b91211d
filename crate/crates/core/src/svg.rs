//! Minimal SVG plots: scatter and line series, linear or log axes, an
//! optional right axis and a crosshair.

use std::fmt::Write;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mark {
    Scatter,
    Line,
    Dashed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    pub mark: Mark,
    pub side: Side,
}

impl Series {
    pub fn new(label: impl Into<String>, points: Vec<(f64, f64)>, mark: Mark) -> Self {
        Series { label: label.into(), points, mark, side: Side::Left }
    }

    pub fn right(mut self) -> Self {
        self.side = Side::Right;
        self
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Plot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub y2_label: Option<String>,
    pub log_x: bool,
    pub log_y: bool,
    pub log_y2: bool,
    pub series: Vec<Series>,
    /// Vertical line at this x.
    pub crosshair_x: Option<f64>,
    /// Horizontal line at this left-axis y.
    pub crosshair_y: Option<f64>,
    /// Free text lines printed under the title.
    pub notes: Vec<String>,
}

const W: f64 = 720.0;
const H: f64 = 480.0;
const ML: f64 = 80.0;
const MR: f64 = 80.0;
const MT: f64 = 60.0;
const MB: f64 = 60.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

#[derive(Debug, Clone, Copy)]
struct Scale {
    lo: f64,
    hi: f64,
    log: bool,
}

impl Scale {
    fn fit(values: impl Iterator<Item = f64>, log: bool) -> Option<Scale> {
        let vals: Vec<f64> = values.filter(|v| v.is_finite() && (!log || *v > 0.0)).map(|v| if log { v.log10() } else { v }).collect();
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !lo.is_finite() {
            return None;
        }
        let (lo, hi) = if hi - lo < 1e-12 { (lo - 0.5, hi + 0.5) } else { (lo, hi) };
        let pad = 0.05 * (hi - lo);
        Some(Scale { lo: lo - pad, hi: hi + pad, log })
    }

    fn t(&self, v: f64) -> Option<f64> {
        if !v.is_finite() || (self.log && v <= 0.0) {
            return None;
        }
        let v = if self.log { v.log10() } else { v };
        Some((v - self.lo) / (self.hi - self.lo))
    }

    /// Tick values in data units.
    fn ticks(&self) -> Vec<f64> {
        if self.log {
            let (a, b) = (self.lo.ceil() as i32, self.hi.floor() as i32);
            if b - a >= 1 {
                let step = ((b - a) as f64 / 6.0).ceil().max(1.0) as usize;
                return (a..=b).step_by(step).map(|e| 10f64.powi(e)).collect();
            }
            let mut out = Vec::new();
            for e in (self.lo.floor() as i32)..=(self.hi.ceil() as i32) {
                for m in [1.0, 2.0, 5.0] {
                    let v = m * 10f64.powi(e);
                    if (self.lo..=self.hi).contains(&v.log10()) {
                        out.push(v);
                    }
                }
            }
            return out;
        }
        let span = self.hi - self.lo;
        let raw = span / 6.0;
        let mag = 10f64.powf(raw.log10().floor());
        let step = [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| span / s <= 7.0).unwrap_or(10.0 * mag);
        let mut v = (self.lo / step).ceil() * step;
        let mut out = Vec::new();
        while v <= self.hi + 1e-9 * step {
            out.push(if v.abs() < 1e-12 * step { 0.0 } else { v });
            v += step;
        }
        out
    }
}

fn tick_label(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if !(1e-3..1e5).contains(&a) {
        let s = format!("{v:.1e}");
        return s.replace(".0e", "e");
    }
    let s = format!("{v:.3}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

impl Plot {
    pub fn render(&self) -> String {
        let pw = W - ML - MR;
        let ph = H - MT - MB;
        let mut s = String::new();
        let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#);
        let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#, W / 2.0, esc(&self.title));
        for (i, note) in self.notes.iter().enumerate() {
            let _ = writeln!(s, r##"<text x="{}" y="{}" text-anchor="middle" fill="#555">{}</text>"##, W / 2.0, 38.0 + 14.0 * i as f64, esc(note));
        }
        let side_vals = |side: Side| self.series.iter().filter(move |r| r.side == side).flat_map(|r| r.points.iter().map(|p| p.1));
        let xs = self.series.iter().flat_map(|r| r.points.iter().map(|p| p.0)).chain(self.crosshair_x);
        let sx = Scale::fit(xs, self.log_x);
        let sy = Scale::fit(side_vals(Side::Left).chain(self.crosshair_y), self.log_y);
        let sy2 = Scale::fit(side_vals(Side::Right), self.log_y2);
        let _ = writeln!(s, r#"<rect x="{ML}" y="{MT}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, ML + pw / 2.0, H - 15.0, esc(&self.x_label));
        let _ = writeln!(s, r#"<text transform="translate(20,{}) rotate(-90)" text-anchor="middle">{}</text>"#, MT + ph / 2.0, esc(&self.y_label));
        if let Some(l) = &self.y2_label {
            let _ = writeln!(s, r#"<text transform="translate({},{}) rotate(90)" text-anchor="middle">{}</text>"#, W - 20.0, MT + ph / 2.0, esc(l));
        }
        let Some(sx) = sx else {
            let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">no data</text>"#, ML + pw / 2.0, MT + ph / 2.0);
            s.push_str("</svg>\n");
            return s;
        };
        let px = |x: f64| sx.t(x).map(|t| ML + t * pw);
        for v in sx.ticks() {
            if let Some(x) = px(v) {
                let _ = writeln!(s, r#"<line x1="{x:.2}" y1="{}" x2="{x:.2}" y2="{}" stroke="black"/><text x="{x:.2}" y="{}" text-anchor="middle">{}</text>"#, MT + ph, MT + ph + 5.0, MT + ph + 18.0, tick_label(v));
            }
        }
        let axis_ticks = |s: &mut String, sc: &Scale, right: bool| {
            for v in sc.ticks() {
                if let Some(t) = sc.t(v) {
                    let y = MT + ph - t * ph;
                    let (x0, x1, tx, anchor) = if right { (ML + pw, ML + pw + 5.0, ML + pw + 8.0, "start") } else { (ML - 5.0, ML, ML - 8.0, "end") };
                    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y:.2}" x2="{x1}" y2="{y:.2}" stroke="black"/><text x="{tx}" y="{:.2}" text-anchor="{anchor}">{}</text>"#, y + 4.0, tick_label(v));
                }
            }
        };
        if let Some(sc) = &sy {
            axis_ticks(&mut s, sc, false);
        }
        if let Some(sc) = &sy2 {
            axis_ticks(&mut s, sc, true);
        }
        let mut legend = 0;
        for (i, ser) in self.series.iter().enumerate() {
            let sc = match ser.side {
                Side::Left => sy,
                Side::Right => sy2,
            };
            let Some(sc) = sc else { continue };
            let color = PALETTE[i % PALETTE.len()];
            let pts: Vec<(f64, f64)> = ser
                .points
                .iter()
                .filter_map(|&(x, y)| Some((px(x)?, MT + ph - sc.t(y)? * ph)))
                .collect();
            match ser.mark {
                Mark::Scatter => {
                    for (x, y) in &pts {
                        let _ = writeln!(s, r#"<circle cx="{x:.2}" cy="{y:.2}" r="3.5" fill="{color}"/>"#);
                    }
                }
                Mark::Line | Mark::Dashed => {
                    let path: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
                    let dash = if ser.mark == Mark::Dashed { r#" stroke-dasharray="6,4""# } else { "" };
                    let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"{dash}/>"#, path.join(" "));
                }
            }
            let ly = MT + 14.0 + 16.0 * legend as f64;
            legend += 1;
            let _ = writeln!(s, r#"<rect x="{}" y="{}" width="10" height="10" fill="{color}"/><text x="{}" y="{}">{}</text>"#, ML + 8.0, ly - 9.0, ML + 22.0, ly, esc(&ser.label));
        }
        if let Some(x) = self.crosshair_x.and_then(px) {
            let _ = writeln!(s, r##"<line class="crosshair" x1="{x:.2}" y1="{MT}" x2="{x:.2}" y2="{}" stroke="#444" stroke-dasharray="3,3"/>"##, MT + ph);
        }
        if let Some(y) = sy.and_then(|sc| self.crosshair_y.and_then(|v| sc.t(v))) {
            let y = MT + ph - y * ph;
            let _ = writeln!(s, r##"<line class="crosshair" x1="{ML}" y1="{y:.2}" x2="{}" y2="{y:.2}" stroke="#444" stroke-dasharray="3,3"/>"##, ML + pw);
        }
        s.push_str("</svg>\n");
        s
    }
}
