//! Minimal standalone SVG charts: polylines, markers and shaded bands on
//! linear or log10 y axes.

use std::fmt::Write;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 160.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 50.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Style {
    Line,
    Markers,
}

#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    pub style: Style,
}

/// A shaded region between `lower` and `upper` sampled at the same x values.
#[derive(Debug, Clone)]
pub struct Band {
    pub name: String,
    pub x: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_y: bool,
    pub series: Vec<Series>,
    pub bands: Vec<Band>,
}

impl Chart {
    pub fn new(title: &str, x_label: &str, y_label: &str) -> Self {
        Self {
            title: title.into(),
            x_label: x_label.into(),
            y_label: y_label.into(),
            ..Self::default()
        }
    }

    pub fn log_y(mut self) -> Self {
        self.log_y = true;
        self
    }

    pub fn line(mut self, name: &str, points: Vec<(f64, f64)>) -> Self {
        self.series.push(Series {
            name: name.into(),
            points,
            style: Style::Line,
        });
        self
    }

    pub fn markers(mut self, name: &str, points: Vec<(f64, f64)>) -> Self {
        self.series.push(Series {
            name: name.into(),
            points,
            style: Style::Markers,
        });
        self
    }

    pub fn band(mut self, band: Band) -> Self {
        self.bands.push(band);
        self
    }

    fn y_value(&self, y: f64) -> Option<f64> {
        if !y.is_finite() {
            return None;
        }
        if self.log_y {
            (y > 0.0).then(|| y.log10())
        } else {
            Some(y)
        }
    }

    fn bounds(&self) -> ((f64, f64), (f64, f64)) {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for s in &self.series {
            for &(x, y) in &s.points {
                if let Some(y) = self.y_value(y) {
                    xs.push(x);
                    ys.push(y);
                }
            }
        }
        for b in &self.bands {
            xs.extend(b.x.iter().copied());
            ys.extend(b.lower.iter().chain(&b.upper).filter_map(|&y| self.y_value(y)));
        }
        let range = |v: &[f64]| {
            let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if !lo.is_finite() {
                (0.0, 1.0)
            } else if hi - lo < 1e-12 {
                (lo - 0.5, hi + 0.5)
            } else {
                (lo, hi)
            }
        };
        (range(&xs), range(&ys))
    }

    /// Renders the chart as a complete SVG document.
    pub fn render(&self) -> String {
        let ((x0, x1), (y0, y1)) = self.bounds();
        let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
        let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
        let px = |x: f64| MARGIN_LEFT + (x - x0) / (x1 - x0) * plot_w;
        let py = |y: f64| MARGIN_TOP + (1.0 - (y - y0) / (y1 - y0)) * plot_h;

        let mut out = String::new();
        let _ = writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
            MARGIN_LEFT + plot_w / 2.0,
            escape(&self.title)
        );
        let _ = writeln!(
            out,
            r#"<rect x="{MARGIN_LEFT}" y="{MARGIN_TOP}" width="{plot_w}" height="{plot_h}" fill="none" stroke="black"/>"#
        );
        for i in 0..=4 {
            let t = i as f64 / 4.0;
            let xv = x0 + t * (x1 - x0);
            let yv = y0 + t * (y1 - y0);
            let ylabel = if self.log_y { format!("1e{yv:.1}") } else { format!("{yv:.3}") };
            let _ = writeln!(
                out,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
                px(xv),
                MARGIN_TOP + plot_h + 18.0,
                format_tick(xv)
            );
            let _ = writeln!(
                out,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
                MARGIN_LEFT - 6.0,
                py(yv) + 4.0,
                ylabel
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            MARGIN_LEFT + plot_w / 2.0,
            HEIGHT - 10.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            out,
            r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
            MARGIN_TOP + plot_h / 2.0,
            MARGIN_TOP + plot_h / 2.0,
            escape(&self.y_label)
        );

        let mut legend = 0;
        let mut legend_entry = |out: &mut String, color: &str, name: &str| {
            let y = MARGIN_TOP + 10.0 + 18.0 * legend as f64;
            let x = WIDTH - MARGIN_RIGHT + 12.0;
            let _ = writeln!(
                out,
                r#"<rect x="{x:.1}" y="{:.1}" width="12" height="12" fill="{color}"/><text x="{:.1}" y="{:.1}">{}</text>"#,
                y - 10.0,
                x + 18.0,
                y,
                escape(name)
            );
            legend += 1;
        };

        for (i, band) in self.bands.iter().enumerate() {
            let color = PALETTE[(i + 3) % PALETTE.len()];
            let upper: Vec<(f64, f64)> = band
                .x
                .iter()
                .zip(&band.upper)
                .filter_map(|(&x, &y)| self.y_value(y).map(|y| (px(x), py(y))))
                .collect();
            let lower: Vec<(f64, f64)> = band
                .x
                .iter()
                .zip(&band.lower)
                .filter_map(|(&x, &y)| self.y_value(y).map(|y| (px(x), py(y))))
                .rev()
                .collect();
            let pts = points_attr(upper.iter().chain(&lower));
            let _ = writeln!(out, r#"<polygon points="{pts}" fill="{color}" fill-opacity="0.3" stroke="none"/>"#);
            legend_entry(&mut out, color, &band.name);
        }
        for (i, series) in self.series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let pts: Vec<(f64, f64)> = series
                .points
                .iter()
                .filter_map(|&(x, y)| self.y_value(y).map(|y| (px(x), py(y))))
                .collect();
            match series.style {
                Style::Line => {
                    let _ = writeln!(
                        out,
                        r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
                        points_attr(pts.iter())
                    );
                }
                Style::Markers => {
                    for (x, y) in pts {
                        let _ = writeln!(out, r#"<circle cx="{x:.2}" cy="{y:.2}" r="2.5" fill="{color}"/>"#);
                    }
                }
            }
            legend_entry(&mut out, color, &series.name);
        }
        out.push_str("</svg>\n");
        out
    }
}

fn points_attr<'a>(pts: impl Iterator<Item = &'a (f64, f64)>) -> String {
    pts.map(|(x, y)| format!("{x:.2},{y:.2}")).collect::<Vec<_>>().join(" ")
}

fn format_tick(v: f64) -> String {
    if v.abs() >= 1000.0 || (v != 0.0 && v.abs() < 0.01) {
        format!("{v:.1e}")
    } else {
        format!("{v:.2}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_series_and_bands() {
        let chart = Chart::new("t<1>", "x", "y")
            .line("a", vec![(0.0, 1.0), (1.0, 2.0)])
            .markers("b", vec![(0.5, 1.5)])
            .band(Band {
                name: "range".into(),
                x: vec![0.0, 1.0],
                lower: vec![0.5, 1.0],
                upper: vec![1.5, 2.5],
            });
        let svg = chart.render();
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("<polyline") && svg.contains("<circle") && svg.contains("<polygon"));
        assert!(svg.contains("t&lt;1&gt;"));
        assert_eq!(svg, chart.render());
    }

    #[test]
    fn log_axis_drops_non_positive_points() {
        let svg = Chart::new("", "", "").log_y().markers("s", vec![(0.0, 0.0), (1.0, 10.0), (2.0, 100.0)]).render();
        assert_eq!(svg.matches("<circle").count(), 2);
    }

    #[test]
    fn empty_chart_is_valid() {
        let svg = Chart::new("empty", "x", "y").render();
        assert!(svg.contains("</svg>") && !svg.contains("NaN"));
    }
}
