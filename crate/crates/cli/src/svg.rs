//! Self-contained SVG line charts: observed vs predicted with a band.

use std::fmt::Write;

const WIDTH: f64 = 960.0;
const HEIGHT: f64 = 360.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;

pub struct Line {
    pub name: String,
    pub color: &'static str,
    pub values: Vec<Option<f64>>,
    /// Draw a marker at every point.
    pub markers: bool,
}

pub struct Chart {
    pub title: String,
    pub y_label: String,
    pub x: Vec<f64>,
    pub band: Option<(Vec<f64>, Vec<f64>)>,
    pub lines: Vec<Line>,
    pub x_ticks: Vec<(f64, String)>,
}

struct Scale {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Scale {
    fn px(&self, x: f64) -> f64 {
        let span = if self.x1 > self.x0 { self.x1 - self.x0 } else { 1.0 };
        LEFT + (x - self.x0) / span * (WIDTH - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        let span = if self.y1 > self.y0 { self.y1 - self.y0 } else { 1.0 };
        HEIGHT - BOTTOM - (y - self.y0) / span * (HEIGHT - TOP - BOTTOM)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Round tick step: 1, 2 or 5 times a power of ten.
fn nice_step(span: f64, target: usize) -> f64 {
    let raw = span / target.max(1) as f64;
    if !(raw > 0.0) || !raw.is_finite() {
        return 1.0;
    }
    let mag = 10f64.powf(raw.log10().floor());
    let f = raw / mag;
    let m = if f <= 1.0 {
        1.0
    } else if f <= 2.0 {
        2.0
    } else if f <= 5.0 {
        5.0
    } else {
        10.0
    };
    m * mag
}

impl Chart {
    fn y_range(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        let mut see = |v: f64| {
            if v.is_finite() {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        };
        if let Some((l, u)) = &self.band {
            l.iter().chain(u).for_each(|v| see(*v));
        }
        for line in &self.lines {
            line.values.iter().flatten().for_each(|v| see(*v));
        }
        if !lo.is_finite() {
            return (0.0, 1.0);
        }
        let lo = lo.min(0.0);
        if hi <= lo {
            return (lo, lo + 1.0);
        }
        let step = nice_step(hi - lo, 5);
        ((lo / step).floor() * step, (hi / step).ceil() * step)
    }

    pub fn render(&self) -> String {
        let (y0, y1) = self.y_range();
        let x0 = self.x.first().copied().unwrap_or(0.0);
        let x1 = self.x.last().copied().unwrap_or(1.0);
        let sc = Scale { x0, x1, y0, y1 };
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
        let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#, WIDTH / 2.0, escape(&self.title));

        let step = nice_step(y1 - y0, 5);
        let mut y = y0;
        while y <= y1 + step * 1e-9 {
            let py = sc.py(y);
            let _ = writeln!(s, r##"<line x1="{LEFT}" y1="{py:.2}" x2="{:.2}" y2="{py:.2}" stroke="#e0e0e0"/>"##, WIDTH - RIGHT);
            let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#, LEFT - 6.0, py + 4.0, trim_number(y));
            y += step;
        }
        for (x, label) in &self.x_ticks {
            let px = sc.px(*x);
            let _ = writeln!(s, r##"<line x1="{px:.2}" y1="{:.2}" x2="{px:.2}" y2="{:.2}" stroke="#999"/>"##, HEIGHT - BOTTOM, HEIGHT - BOTTOM + 5.0);
            let _ = writeln!(s, r#"<text x="{px:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, HEIGHT - BOTTOM + 18.0, escape(label));
        }
        let _ = writeln!(
            s,
            r##"<rect x="{LEFT}" y="{TOP}" width="{:.2}" height="{:.2}" fill="none" stroke="#333"/>"##,
            WIDTH - LEFT - RIGHT,
            HEIGHT - TOP - BOTTOM
        );
        let _ = writeln!(
            s,
            r#"<text transform="translate(16,{:.2}) rotate(-90)" text-anchor="middle">{}</text>"#,
            (TOP + HEIGHT - BOTTOM) / 2.0,
            escape(&self.y_label)
        );

        if let Some((lo, hi)) = &self.band {
            let mut pts = vec![];
            for (x, v) in self.x.iter().zip(hi) {
                pts.push(format!("{:.2},{:.2}", sc.px(*x), sc.py(*v)));
            }
            for (x, v) in self.x.iter().zip(lo).rev() {
                pts.push(format!("{:.2},{:.2}", sc.px(*x), sc.py(*v)));
            }
            let _ = writeln!(s, r##"<polygon points="{}" fill="#9ecae1" fill-opacity="0.5" stroke="none"/>"##, pts.join(" "));
        }

        for line in &self.lines {
            // break the path at missing values
            let mut runs: Vec<Vec<String>> = vec![vec![]];
            for (x, v) in self.x.iter().zip(&line.values) {
                match v {
                    Some(v) if v.is_finite() => runs.last_mut().unwrap().push(format!("{:.2},{:.2}", sc.px(*x), sc.py(*v))),
                    _ => {
                        if !runs.last().unwrap().is_empty() {
                            runs.push(vec![]);
                        }
                    }
                }
            }
            for run in runs.iter().filter(|r| !r.is_empty()) {
                let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="1.5"/>"#, run.join(" "), line.color);
            }
            if line.markers {
                for (x, v) in self.x.iter().zip(&line.values) {
                    if let Some(v) = v.filter(|v| v.is_finite()) {
                        let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{}"/>"#, sc.px(*x), sc.py(v), line.color);
                    }
                }
            }
        }

        let mut lx = LEFT + 10.0;
        let ly = TOP + 16.0;
        if self.band.is_some() {
            let _ = writeln!(s, r##"<rect x="{lx:.2}" y="{:.2}" width="18" height="10" fill="#9ecae1" fill-opacity="0.5"/>"##, ly - 9.0);
            let _ = writeln!(s, r#"<text x="{:.2}" y="{ly:.2}">interval</text>"#, lx + 24.0);
            lx += 100.0;
        }
        for line in &self.lines {
            let _ = writeln!(s, r#"<line x1="{lx:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{}" stroke-width="2"/>"#, ly - 4.0, lx + 18.0, ly - 4.0, line.color);
            let _ = writeln!(s, r#"<text x="{:.2}" y="{ly:.2}">{}</text>"#, lx + 24.0, escape(&line.name));
            lx += 110.0;
        }
        s.push_str("</svg>\n");
        s
    }
}

fn trim_number(v: f64) -> String {
    let t = format!("{v:.3}");
    let t = t.trim_end_matches('0').trim_end_matches('.');
    if t == "-0" {
        "0".into()
    } else {
        t.into()
    }
}
