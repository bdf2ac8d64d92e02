//! Bare-bones static charts. Enough to eyeball a run; styling is not a goal.

use fedcox_federation::coordinator::StudyReport;
use fedcox_federation::message::CurveReport;
use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 420.0;
const MARGIN: f64 = 56.0;
const COLOURS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Style {
    Step,
    Line,
    Points,
}

#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub style: Style,
    pub points: Vec<(f64, f64)>,
    /// Vertical error bars, drawn for `Points` only.
    pub bars: Vec<(f64, f64)>,
}

impl Series {
    pub fn new(label: impl Into<String>, style: Style, points: Vec<(f64, f64)>) -> Self {
        Self { label: label.into(), style, points, bars: Vec::new() }
    }
}

#[derive(Debug, Clone)]
pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

fn extent(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) =
        values.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.04 * (hi - lo);
    (lo - pad, hi + pad)
}

impl Chart {
    pub fn new(title: &str, x_label: &str, y_label: &str) -> Self {
        Self { title: title.into(), x_label: x_label.into(), y_label: y_label.into(), series: Vec::new() }
    }

    pub fn render(&self) -> String {
        let xs = self.series.iter().flat_map(|s| s.points.iter().map(|p| p.0));
        let ys =
            self.series.iter().flat_map(|s| s.points.iter().map(|p| p.1).chain(s.bars.iter().flat_map(|b| [b.0, b.1])));
        let (x0, x1) = extent(xs);
        let (y0, y1) = extent(ys);
        let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (W - 2.0 * MARGIN);
        let sy = |y: f64| H - MARGIN - (y - y0) / (y1 - y0) * (H - 2.0 * MARGIN);

        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
            W / 2.0,
            escape(&self.title)
        );
        let _ = writeln!(
            s,
            r#"<path d="M{m},{t} L{m},{b} L{r},{b}" stroke="black" fill="none"/>"#,
            m = MARGIN,
            t = MARGIN,
            b = H - MARGIN,
            r = W - MARGIN
        );
        for k in 0..=4 {
            let fx = x0 + (x1 - x0) * k as f64 / 4.0;
            let fy = y0 + (y1 - y0) * k as f64 / 4.0;
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
                sx(fx),
                H - MARGIN + 16.0,
                tick(fx)
            );
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
                MARGIN - 4.0,
                sy(fy) + 4.0,
                tick(fy)
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
            let colour = COLOURS[i % COLOURS.len()];
            let pts: Vec<(f64, f64)> =
                series.points.iter().filter(|p| p.0.is_finite() && p.1.is_finite()).copied().collect();
            match series.style {
                Style::Points => {
                    for (k, &(x, y)) in pts.iter().enumerate() {
                        let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="2.5" fill="{colour}"/>"#, sx(x), sy(y));
                        if let Some(&(lo, hi)) = series.bars.get(k) {
                            let _ = writeln!(
                                s,
                                r#"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}" stroke="{colour}" stroke-opacity="0.5"/>"#,
                                sy(lo),
                                sy(hi),
                                x = sx(x)
                            );
                        }
                    }
                }
                Style::Line | Style::Step => {
                    let mut d = String::new();
                    for (k, &(x, y)) in pts.iter().enumerate() {
                        if k == 0 {
                            let _ = write!(d, "M{:.1},{:.1}", sx(x), sy(y));
                        } else {
                            if series.style == Style::Step {
                                let _ = write!(d, " L{:.1},{:.1}", sx(x), sy(pts[k - 1].1));
                            }
                            let _ = write!(d, " L{:.1},{:.1}", sx(x), sy(y));
                        }
                    }
                    let _ = writeln!(s, r#"<path d="{d}" stroke="{colour}" fill="none"/>"#);
                }
            }
            let ly = MARGIN + 14.0 * i as f64;
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{ly}" fill="{colour}">{}</text>"#,
                W - MARGIN - 150.0,
                escape(&series.label)
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.1e}")
    } else {
        format!("{v:.2}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn curve_series(label: String, style: Style, c: &CurveReport) -> Series {
    Series::new(label, style, c.knots.iter().copied().zip(c.median.iter().copied()).collect())
}

/// One chart per figure table, keyed by file name.
pub fn figure_charts(report: &StudyReport) -> Vec<(&'static str, String)> {
    let sel = &report.selection;
    let mut selection = Chart::new("Model selection", "parameters", "mean out-of-bag negative log-likelihood");
    let mut all = Series::new("candidates", Style::Points, Vec::new());
    let mut chosen = Series::new("chosen", Style::Points, Vec::new());
    for (i, s) in sel.summaries.iter().enumerate() {
        if s.failed {
            continue;
        }
        let p = (s.n_params as f64, -s.mean_cv);
        let bar = (-s.mean_cv - s.sd_cv, -s.mean_cv + s.sd_cv);
        if i == sel.chosen {
            chosen.points.push(p);
            chosen.bars.push(bar);
        } else {
            all.points.push(p);
            all.bars.push(bar);
        }
    }
    selection.series = vec![all, chosen];

    let fm = &report.final_model;
    let mut coef = Chart::new("Coefficients", "coefficient index", "median and interval");
    let mut s = Series::new(fm.names.join(", "), Style::Points, Vec::new());
    for k in 0..fm.fit.median.len() {
        s.points.push((k as f64, fm.fit.median[k]));
        s.bars.push((fm.fit.lower[k], fm.fit.upper[k]));
    }
    coef.series.push(s);

    let mut baseline = Chart::new("Baseline cumulative hazard", "time", "cumulative hazard");
    let mut lp = Chart::new("Linear predictor distribution", "linear predictor", "cumulative fraction");
    let mut subgroups = Chart::new("Risk groups", "time", "survival");
    let mut calibration = Chart::new("Calibration", "predicted survival", "observed survival");
    for (centre, perf) in &fm.performance {
        let set = &perf.median_beta;
        if let Some(c) = &set.baseline {
            baseline.series.push(curve_series(centre.clone(), Style::Step, c));
        }
        if let Some(c) = &set.lp_cdf {
            lp.series.push(curve_series(centre.clone(), Style::Step, c));
        }
        for g in &set.subgroups {
            if let Some(c) = &g.km {
                subgroups.series.push(curve_series(format!("{centre} group {} KM", g.index), Style::Step, c));
            }
        }
        for cal in &set.calibration {
            let mut s = Series::new(format!("{centre} t={}", cal.time), Style::Points, Vec::new());
            for p in &cal.points {
                s.points.push((p.predicted, p.observed));
                s.bars.push((p.lower, p.upper));
            }
            calibration.series.push(s);
        }
    }
    if !calibration.series.is_empty() {
        calibration.series.push(Series::new("identity", Style::Line, vec![(0.0, 0.0), (1.0, 1.0)]));
    }
    vec![
        ("selection.svg", selection.render()),
        ("coefficients.svg", coef.render()),
        ("baseline.svg", baseline.render()),
        ("lp_cdf.svg", lp.render()),
        ("subgroups.svg", subgroups.render()),
        ("calibration.svg", calibration.render()),
    ]
}
