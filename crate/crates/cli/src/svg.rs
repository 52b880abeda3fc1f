//! Static SVG line charts and heatmaps.

use std::fmt::Write;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 50.0;
const BOTTOM: f64 = 70.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct LineChart {
    pub title: String,
    pub x_label: String,
    /// Optional secondary x axis drawn along the top, as (label, scale from x).
    pub x2: Option<(String, f64)>,
    pub y_label: String,
    pub series: Vec<Series>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn extent(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-9 {
        return (lo - 0.5, hi + 0.5);
    }
    (lo, hi)
}

fn ticks(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..=n).map(|i| lo + (hi - lo) * i as f64 / n as f64).collect()
}

fn header(out: &mut String, title: &str) {
    let _ = write!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = write!(out, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = write!(
        out,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
}

impl LineChart {
    pub fn render(&self) -> String {
        let pw = WIDTH - LEFT - RIGHT;
        let ph = HEIGHT - TOP - BOTTOM;
        let pts = || self.series.iter().flat_map(|s| s.points.iter());
        let (x0, x1) = extent(pts().map(|p| p.0));
        let (y0, y1) = extent(pts().map(|p| p.1));
        let pad = (y1 - y0) * 0.05;
        let (y0, y1) = (y0 - pad, y1 + pad);
        let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
        let sy = |y: f64| TOP + ph - (y - y0) / (y1 - y0) * ph;

        let mut out = String::new();
        header(&mut out, &self.title);
        let _ = write!(
            out,
            r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
        );
        for x in ticks(x0, x1, 5) {
            let px = sx(x);
            let _ = write!(
                out,
                r##"<line x1="{px:.1}" y1="{b:.1}" x2="{px:.1}" y2="{t:.1}" stroke="#ddd"/><text x="{px:.1}" y="{l:.1}" text-anchor="middle">{x:.1}</text>"##,
                b = TOP + ph,
                t = TOP,
                l = TOP + ph + 16.0
            );
            if let Some((_, scale)) = &self.x2 {
                let _ = write!(
                    out,
                    r#"<text x="{px:.1}" y="{:.1}" text-anchor="middle">{:.2}</text>"#,
                    TOP - 6.0,
                    x * scale
                );
            }
        }
        for y in ticks(y0, y1, 5) {
            let py = sy(y);
            let _ = write!(
                out,
                r##"<line x1="{LEFT}" y1="{py:.1}" x2="{r:.1}" y2="{py:.1}" stroke="#ddd"/><text x="{l:.1}" y="{py:.1}" text-anchor="end" dominant-baseline="middle">{y:.3}</text>"##,
                r = LEFT + pw,
                l = LEFT - 6.0
            );
        }
        let _ = write!(
            out,
            r#"<text class="x-label" x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            LEFT + pw / 2.0,
            HEIGHT - 24.0,
            escape(&self.x_label)
        );
        if let Some((label, _)) = &self.x2 {
            let _ = write!(
                out,
                r#"<text class="x2-label" x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
                LEFT + pw / 2.0,
                TOP - 22.0,
                escape(label)
            );
        }
        let _ = write!(
            out,
            r#"<text class="y-label" x="18" y="{:.1}" text-anchor="middle" transform="rotate(-90 18 {:.1})">{}</text>"#,
            TOP + ph / 2.0,
            TOP + ph / 2.0,
            escape(&self.y_label)
        );
        for (i, s) in self.series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let path: Vec<String> = s.points.iter().map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y))).collect();
            let _ = write!(
                out,
                r#"<polyline data-series="{}" points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
                escape(&s.name),
                path.join(" ")
            );
            let ly = TOP + 10.0 + i as f64 * 18.0;
            let lx = LEFT + pw + 12.0;
            let _ = write!(
                out,
                r#"<line x1="{lx:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{ly:.1}" dominant-baseline="middle">{}</text>"#,
                lx + 18.0,
                lx + 24.0,
                escape(&s.name)
            );
        }
        out.push_str("</svg>\n");
        out
    }
}

#[derive(Debug, Clone)]
pub struct Heatmap {
    pub title: String,
    pub row_label: String,
    pub col_label: String,
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    /// Row-major, `rows.len() * cols.len()`.
    pub values: Vec<f64>,
}

impl Heatmap {
    pub fn render(&self) -> String {
        let pw = WIDTH - LEFT - RIGHT;
        let ph = HEIGHT - TOP - BOTTOM;
        let (nr, nc) = (self.rows.len().max(1), self.cols.len().max(1));
        let (cw, ch) = (pw / nc as f64, ph / nr as f64);
        let (lo, hi) = extent(self.values.iter().copied());
        let mut out = String::new();
        header(&mut out, &self.title);
        for (r, row) in self.rows.iter().enumerate() {
            for (c, _) in self.cols.iter().enumerate() {
                let v = self.values[r * self.cols.len() + c];
                let k = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
                let shade = (255.0 * (1.0 - k)).round() as u8;
                let (x, y) = (LEFT + c as f64 * cw, TOP + r as f64 * ch);
                let _ = write!(
                    out,
                    r#"<rect class="cell" x="{x:.1}" y="{y:.1}" width="{cw:.1}" height="{ch:.1}" fill="rgb({shade},{shade},255)"/>"#
                );
                let ink = if k > 0.6 { "white" } else { "black" };
                let _ = write!(
                    out,
                    r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" dominant-baseline="middle" font-size="10" fill="{ink}">{:.3}</text>"#,
                    x + cw / 2.0,
                    y + ch / 2.0,
                    v
                );
            }
            let _ = write!(
                out,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="end" dominant-baseline="middle">{}</text>"#,
                LEFT - 6.0,
                TOP + (r as f64 + 0.5) * ch,
                escape(row)
            );
        }
        for (c, col) in self.cols.iter().enumerate() {
            let _ = write!(
                out,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
                LEFT + (c as f64 + 0.5) * cw,
                TOP + ph + 16.0,
                escape(col)
            );
        }
        let _ = write!(
            out,
            r#"<text class="x-label" x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            LEFT + pw / 2.0,
            HEIGHT - 24.0,
            escape(&self.col_label)
        );
        let _ = write!(
            out,
            r#"<text class="y-label" x="18" y="{:.1}" text-anchor="middle" transform="rotate(-90 18 {:.1})">{}</text>"#,
            TOP + ph / 2.0,
            TOP + ph / 2.0,
            escape(&self.row_label)
        );
        out.push_str("</svg>\n");
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_polyline_per_series() {
        let chart = LineChart {
            title: "t".into(),
            x_label: "round trip (ms)".into(),
            x2: Some(("round trip (frames)".into(), 0.03)),
            y_label: "mIoU".into(),
            series: (0..3)
                .map(|i| Series {
                    name: format!("s{i}"),
                    points: vec![(0.0, i as f64), (33.3, 1.0)],
                })
                .collect(),
        };
        let svg = chart.render();
        assert_eq!(svg.matches("<polyline").count(), 3);
        assert!(svg.contains("round trip (ms)") && svg.contains("round trip (frames)"));
    }

    #[test]
    fn heatmap_has_all_cells() {
        let h = Heatmap {
            title: "m".into(),
            row_label: "observed".into(),
            col_label: "input".into(),
            rows: vec!["0".into(), "1".into()],
            cols: vec!["0".into(), "1".into(), "2".into()],
            values: vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6],
        };
        assert_eq!(h.render().matches(r#"class="cell""#).count(), 6);
    }

    #[test]
    fn flat_series_does_not_divide_by_zero() {
        let chart = LineChart {
            title: "flat".into(),
            x_label: "x".into(),
            x2: None,
            y_label: "y".into(),
            series: vec![Series {
                name: "c".into(),
                points: vec![(1.0, 0.5), (1.0, 0.5)],
            }],
        };
        assert!(!chart.render().contains("NaN"));
    }
}
