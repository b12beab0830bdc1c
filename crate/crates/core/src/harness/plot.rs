//! Minimal SVG line charts. The accompanying TSV tables are the canonical
//! output; the images are for eyeballing.

use std::fmt::Write as _;

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 56.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

#[derive(Clone, Debug, Default)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, Default)]
pub struct LinePlot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_x: bool,
    pub series: Vec<Series>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn span(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    (lo, hi)
}

impl LinePlot {
    pub fn to_svg(&self) -> String {
        let log_x = self.log_x
            && self
                .series
                .iter()
                .flat_map(|s| &s.points)
                .all(|(x, _)| *x > 0.0);
        let tx = |x: f64| if log_x { x.log10() } else { x };
        let pts = || self.series.iter().flat_map(|s| s.points.iter()).filter(|(x, y)| x.is_finite() && y.is_finite());
        let (x0, x1) = span(pts().map(|(x, _)| tx(*x)));
        let (y0, y1) = span(pts().map(|(_, y)| *y));
        let px = |x: f64| MARGIN + (tx(x) - x0) / (x1 - x0) * (W - 2.0 * MARGIN);
        let py = |y: f64| H - MARGIN - (y - y0) / (y1 - y0) * (H - 2.0 * MARGIN);

        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
            W / 2.0,
            escape(&self.title)
        );
        let (l, r, t, b) = (MARGIN, W - MARGIN, MARGIN, H - MARGIN);
        let _ = writeln!(s, r#"<path d="M{l} {t}V{b}H{r}" stroke="black" fill="none"/>"#);
        for i in 0..=4 {
            let f = i as f64 / 4.0;
            let yv = y0 + f * (y1 - y0);
            let xv = x0 + f * (x1 - x0);
            let xshown = if log_x { 10f64.powf(xv) } else { xv };
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="end">{:.3}</text>"#,
                l - 4.0,
                py(yv) + 4.0,
                yv
            );
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
                l + f * (r - l),
                b + 16.0,
                format_tick(xshown)
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            W / 2.0,
            H - 12.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            s,
            r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
            H / 2.0,
            H / 2.0,
            escape(&self.y_label)
        );

        for (i, series) in self.series.iter().enumerate() {
            let color = COLORS[i % COLORS.len()];
            let finite: Vec<(f64, f64)> = series
                .points
                .iter()
                .copied()
                .filter(|(x, y)| x.is_finite() && y.is_finite())
                .collect();
            if !finite.is_empty() {
                let d: Vec<String> = finite
                    .iter()
                    .enumerate()
                    .map(|(j, (x, y))| format!("{}{:.2} {:.2}", if j == 0 { 'M' } else { 'L' }, px(*x), py(*y)))
                    .collect();
                let _ = writeln!(s, r#"<path d="{}" stroke="{color}" stroke-width="2" fill="none"/>"#, d.join(""));
                for (x, y) in &finite {
                    let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, px(*x), py(*y));
                }
            }
            let ly = t + 16.0 * i as f64;
            let _ = writeln!(
                s,
                r#"<rect x="{}" y="{}" width="10" height="10" fill="{color}"/><text x="{}" y="{}">{}</text>"#,
                r - 120.0,
                ly - 9.0,
                r - 106.0,
                ly,
                escape(&series.name)
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

fn format_tick(v: f64) -> String {
    if v != 0.0 && (v.abs() < 0.01 || v.abs() >= 1e4) {
        format!("{v:.1e}")
    } else {
        format!("{}", (v * 1000.0).round() / 1000.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_one_path_per_nonempty_series() {
        let plot = LinePlot {
            title: "a < b".into(),
            log_x: true,
            series: vec![
                Series {
                    name: "one".into(),
                    points: vec![(0.01, 0.5), (0.1, 0.6), (1.0, 0.7)],
                },
                Series {
                    name: "two".into(),
                    points: vec![(0.01, f64::NAN)],
                },
            ],
            ..LinePlot::default()
        };
        let svg = plot.to_svg();
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("a &lt; b"));
        assert_eq!(svg.matches("<path d=\"M").count() - 1, 1);
        assert_eq!(svg.matches("<circle").count(), 3);
    }
}
