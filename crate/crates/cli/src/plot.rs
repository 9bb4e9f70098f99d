//! Static SVG figures from benchmark CSVs.
//!
//! Output is a pure function of the CSV text: coordinates are printed with
//! fixed precision and series appear in first-seen order, so the same input
//! always yields the same bytes.

use anyhow::{bail, Context, Result};
use std::collections::BTreeMap;
use std::fmt::Write as _;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Experiment {
    Accuracy,
    Calibration,
    Power,
}

/// A CSV file held as text fields, with columns looked up by name.
struct Table {
    columns: Vec<String>,
    rows: Vec<csv::StringRecord>,
}

impl Table {
    fn parse(text: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().from_reader(text.as_bytes());
        let columns = rdr.headers().context("reading the header row")?.iter().map(str::to_owned).collect();
        let rows = rdr.records().collect::<Result<Vec<_>, _>>().context("reading rows")?;
        if rows.is_empty() {
            bail!("the CSV has a header but no rows");
        }
        Ok(Self { columns, rows })
    }

    fn require(&self, names: &[&str]) -> Result<Vec<usize>> {
        names
            .iter()
            .map(|n| self.columns.iter().position(|c| c == n).with_context(|| format!("missing column `{n}`")))
            .collect()
    }

    fn text<'a>(&self, row: &'a csv::StringRecord, idx: usize) -> &'a str {
        row.get(idx).unwrap_or("")
    }

    fn num(&self, row: &csv::StringRecord, idx: usize, line: usize) -> Result<f64> {
        let s = self.text(row, idx);
        s.parse().with_context(|| format!("line {}: column `{}` is not a number: `{s}`", line + 2, self.columns[idx]))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    pub line: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub x_log: bool,
    /// Draws the line `y = x` (QQ reference).
    pub identity: bool,
    pub series: Vec<Series>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Figure {
    pub title: String,
    pub panels: Vec<Panel>,
    /// Lines embedded as a comment: the numbers behind the picture.
    pub summary: Vec<String>,
}

pub fn figure(experiment: Experiment, csv_text: &str) -> Result<Figure> {
    let t = Table::parse(csv_text)?;
    match experiment {
        Experiment::Accuracy => accuracy(&t),
        Experiment::Calibration => calibration(&t),
        Experiment::Power => power(&t),
    }
}

pub fn render(experiment: Experiment, csv_text: &str) -> Result<String> {
    Ok(to_svg(&figure(experiment, csv_text)?))
}

/// Groups `(key, value)` pairs by key, keeping keys in first-seen order.
fn ordered_groups<V>(items: impl IntoIterator<Item = (String, V)>) -> Vec<(String, Vec<V>)> {
    let mut out: Vec<(String, Vec<V>)> = Vec::new();
    for (k, v) in items {
        match out.iter_mut().find(|(name, _)| *name == k) {
            Some((_, vs)) => vs.push(v),
            None => out.push((k, vec![v])),
        }
    }
    out
}

fn padded(lo: f64, hi: f64) -> (f64, f64) {
    if hi > lo {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    } else {
        (lo - 0.5 * lo.abs().max(1.0), hi + 0.5 * hi.abs().max(1.0))
    }
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

/// Runtime against RMSE, one panel per parameter, over problems every method estimated.
fn accuracy(t: &Table) -> Result<Figure> {
    let c = t.require(&["problem_id", "method", "mu_true", "beta_true", "alpha_true", "mu_hat", "beta_hat", "alpha_hat", "runtime_ns"])?;
    struct Row {
        problem: String,
        method: String,
        err: [f64; 3],
        runtime: f64,
    }
    let mut rows = Vec::with_capacity(t.rows.len());
    for (i, r) in t.rows.iter().enumerate() {
        let v = |k: usize| t.num(r, c[k], i);
        rows.push(Row {
            problem: t.text(r, c[0]).to_owned(),
            method: t.text(r, c[1]).to_owned(),
            err: [v(5)? - v(2)?, v(6)? - v(3)?, v(7)? - v(4)?],
            runtime: v(8)?,
        });
    }
    let methods: Vec<String> = ordered_groups(rows.iter().map(|r| (r.method.clone(), ()))).into_iter().map(|g| g.0).collect();
    let mut failed: BTreeMap<&str, bool> = BTreeMap::new();
    for r in &rows {
        *failed.entry(&r.problem).or_default() |= r.err.iter().any(|e| !e.is_finite());
    }
    let mut stats = Vec::new();
    for m in &methods {
        let mine: Vec<&Row> = rows.iter().filter(|r| &r.method == m).collect();
        let ok: Vec<&&Row> = mine.iter().filter(|r| r.err[0].is_finite()).collect();
        let common: Vec<&&Row> = mine.iter().filter(|r| !failed[r.problem.as_str()]).collect();
        let runtime_us = ok.iter().map(|r| r.runtime).sum::<f64>() / ok.len() as f64 / 1e3;
        let rmse = [0, 1, 2].map(|k| (common.iter().map(|r| r.err[k] * r.err[k]).sum::<f64>() / common.len() as f64).sqrt());
        stats.push((m.clone(), runtime_us, rmse, common.len()));
    }
    let (xlo, xhi) = range(stats.iter().map(|s| s.1).filter(|v| *v > 0.0));
    if !xlo.is_finite() {
        bail!("no successful estimates with positive runtime to plot");
    }
    let x_range = (10f64.powf(xlo.log10().floor()), 10f64.powf(xhi.log10().ceil().max(xlo.log10().floor() + 1.0)));
    let names = ["μ", "β", "α = ln φ"];
    let panels = (0..3)
        .map(|k| {
            let (lo, hi) = range(stats.iter().map(|s| s.2[k]).filter(|v| v.is_finite()));
            Panel {
                title: format!("{} accuracy", names[k]),
                x_label: "mean runtime per problem (µs)".into(),
                y_label: format!("RMSE of {}", names[k]),
                x_range,
                y_range: if lo.is_finite() { padded(0.0f64.min(lo), hi) } else { (0.0, 1.0) },
                x_log: true,
                identity: false,
                series: stats.iter().map(|s| Series { name: s.0.clone(), points: vec![(s.1, s.2[k])], line: false }).collect(),
            }
        })
        .collect();
    let summary = stats
        .iter()
        .map(|(m, us, r, n)| format!("method={m} mean_runtime_us={us:.4} rmse_mu={:.6} rmse_beta={:.6} rmse_alpha={:.6} n_compared={n}", r[0], r[1], r[2]))
        .collect();
    Ok(Figure { title: "Runtime and accuracy".into(), panels, summary })
}

/// Observed against expected p-value quantiles.
fn calibration(t: &Table) -> Result<Figure> {
    let c = t.require(&["method", "p_value", "expected_quantile"])?;
    let mut items = Vec::with_capacity(t.rows.len());
    for (i, r) in t.rows.iter().enumerate() {
        items.push((t.text(r, c[0]).to_owned(), (t.num(r, c[2], i)?, t.num(r, c[1], i)?)));
    }
    let groups = ordered_groups(items);
    let summary = groups
        .iter()
        .map(|(m, pts)| {
            let reject = pts.iter().filter(|p| p.1 < 0.05).count();
            format!("method={m} n={} rejection_rate_0.05={:.4}", pts.len(), reject as f64 / pts.len() as f64)
        })
        .collect();
    let panel = Panel {
        title: "p-value QQ plot".into(),
        x_label: "expected uniform quantile".into(),
        y_label: "observed p-value".into(),
        x_range: (0.0, 1.0),
        y_range: (0.0, 1.0),
        x_log: false,
        identity: true,
        series: groups.into_iter().map(|(name, points)| Series { name, points, line: true }).collect(),
    };
    Ok(Figure { title: "Calibration under the null".into(), panels: vec![panel], summary })
}

/// Power against β, one panel per design.
fn power(t: &Table) -> Result<Figure> {
    let c = t.require(&["method", "design", "beta", "power"])?;
    let mut items = Vec::with_capacity(t.rows.len());
    for (i, r) in t.rows.iter().enumerate() {
        let row = (t.text(r, c[0]).to_owned(), t.num(r, c[2], i)?, t.num(r, c[3], i)?);
        items.push((t.text(r, c[1]).to_owned(), row));
    }
    let (blo, bhi) = range(items.iter().map(|(_, r)| r.1));
    let mut summary = Vec::new();
    let panels = ordered_groups(items)
        .into_iter()
        .map(|(design, rows)| {
            let series: Vec<Series> = ordered_groups(rows.into_iter().map(|(m, b, p)| (m, (b, p))))
                .into_iter()
                .map(|(name, mut points)| {
                    points.sort_by(|a, b| a.0.total_cmp(&b.0));
                    let pw: Vec<String> = points.iter().map(|p| format!("{:.3}", p.1)).collect();
                    summary.push(format!("design={design} method={name} power=[{}]", pw.join(",")));
                    Series { name, points, line: true }
                })
                .collect();
            Panel {
                title: format!("design {design}"),
                x_label: "effect size β".into(),
                y_label: "power at p < 0.05".into(),
                x_range: padded(blo, bhi),
                y_range: (0.0, 1.0),
                x_log: false,
                identity: false,
                series,
            }
        })
        .collect();
    Ok(Figure { title: "Power".into(), panels, summary })
}

const PANEL_W: f64 = 320.0;
const PANEL_H: f64 = 260.0;
const MARGIN_L: f64 = 62.0;
const MARGIN_R: f64 = 18.0;
const MARGIN_T: f64 = 56.0;
const MARGIN_B: f64 = 48.0;
const LEGEND_H: f64 = 24.0;

fn color(i: usize, name: &str) -> &'static str {
    match name {
        "mom" => "#1b9e77",
        "mle" => "#d95f02",
        "transformer" => "#7570b3",
        _ => ["#e7298a", "#66a61e", "#e6ab02", "#a6761d", "#666666"][i % 5],
    }
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace("--", "- -")
}

impl Panel {
    fn x_to_unit(&self, x: f64) -> f64 {
        if self.x_log {
            let (lo, hi) = (self.x_range.0.log10(), self.x_range.1.log10());
            (x.log10() - lo) / (hi - lo)
        } else {
            (x - self.x_range.0) / (self.x_range.1 - self.x_range.0)
        }
    }

    /// Pixel position of a data point inside the panel whose top-left corner is `origin`.
    pub fn to_px(&self, origin: (f64, f64), (x, y): (f64, f64)) -> (f64, f64) {
        let u = self.x_to_unit(x);
        let v = (y - self.y_range.0) / (self.y_range.1 - self.y_range.0);
        (origin.0 + MARGIN_L + u * PANEL_W, origin.1 + MARGIN_T + (1.0 - v) * PANEL_H)
    }

    fn x_ticks(&self) -> Vec<f64> {
        if self.x_log {
            let (lo, hi) = (self.x_range.0.log10().round() as i32, self.x_range.1.log10().round() as i32);
            (lo..=hi).map(|e| 10f64.powi(e)).collect()
        } else {
            ticks(self.x_range)
        }
    }
}

/// About five round tick positions inside `range`.
fn ticks((lo, hi): (f64, f64)) -> Vec<f64> {
    let raw = (hi - lo) / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 2.5, 5.0, 10.0].iter().map(|m| m * mag).find(|s| *s >= raw).unwrap_or(10.0 * mag);
    let first = (lo / step).ceil() as i64;
    let last = (hi / step).floor() as i64;
    (first..=last).map(|k| k as f64 * step).collect()
}

fn label(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".into() } else { s.into() }
}

pub fn to_svg(fig: &Figure) -> String {
    let cell_w = MARGIN_L + PANEL_W + MARGIN_R;
    let cell_h = MARGIN_T + PANEL_H + MARGIN_B;
    let width = cell_w * fig.panels.len() as f64;
    let height = cell_h + LEGEND_H + 20.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, "<!--");
    for line in &fig.summary {
        let _ = writeln!(s, "  {}", esc(line));
    }
    let _ = writeln!(s, "-->");
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{:.1}" y="20" text-anchor="middle" font-size="15">{}</text>"#, width / 2.0, esc(&fig.title));

    let mut legend: Vec<&str> = Vec::new();
    for (pi, panel) in fig.panels.iter().enumerate() {
        let origin = (pi as f64 * cell_w, 0.0);
        let (x0, y0) = (origin.0 + MARGIN_L, origin.1 + MARGIN_T);
        let _ = writeln!(s, r#"<g class="panel">"#);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="13">{}</text>"#, x0 + PANEL_W / 2.0, y0 - 12.0, esc(&panel.title));
        let _ = writeln!(s, r#"<rect x="{x0:.1}" y="{y0:.1}" width="{PANEL_W:.1}" height="{PANEL_H:.1}" fill="none" stroke="black"/>"#);
        for t in panel.x_ticks() {
            let (px, _) = panel.to_px(origin, (t, panel.y_range.0));
            let _ = writeln!(s, r##"<line x1="{px:.2}" y1="{:.2}" x2="{px:.2}" y2="{:.2}" stroke="#ccc"/>"##, y0, y0 + PANEL_H);
            let _ = writeln!(s, r#"<text x="{px:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, y0 + PANEL_H + 14.0, label(t));
        }
        for t in ticks(panel.y_range) {
            let (_, py) = panel.to_px(origin, (panel.x_range.0, t));
            let _ = writeln!(s, r##"<line x1="{x0:.2}" y1="{py:.2}" x2="{:.2}" y2="{py:.2}" stroke="#ccc"/>"##, x0 + PANEL_W);
            let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#, x0 - 5.0, py + 4.0, label(t));
        }
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, x0 + PANEL_W / 2.0, y0 + PANEL_H + 34.0, esc(&panel.x_label));
        let (lx, ly) = (origin.0 + 16.0, y0 + PANEL_H / 2.0);
        let _ = writeln!(s, r#"<text x="{lx:.1}" y="{ly:.1}" text-anchor="middle" transform="rotate(-90 {lx:.1} {ly:.1})">{}</text>"#, esc(&panel.y_label));
        if panel.identity {
            let lo = panel.x_range.0.max(panel.y_range.0);
            let hi = panel.x_range.1.min(panel.y_range.1);
            let (a, b) = (panel.to_px(origin, (lo, lo)), panel.to_px(origin, (hi, hi)));
            let _ = writeln!(s, r#"<line class="identity" x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="black" stroke-dasharray="4 3"/>"#, a.0, a.1, b.0, b.1);
        }
        for (si, series) in panel.series.iter().enumerate() {
            if !legend.contains(&series.name.as_str()) {
                legend.push(&series.name);
            }
            let col = color(si, &series.name);
            let pts: Vec<(f64, f64)> = series
                .points
                .iter()
                .filter(|p| p.0.is_finite() && p.1.is_finite() && (!panel.x_log || p.0 > 0.0))
                .map(|&p| panel.to_px(origin, p))
                .collect();
            if series.line && pts.len() > 1 {
                let path: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
                let _ = writeln!(s, r#"<polyline class="series" data-name="{}" fill="none" stroke="{col}" stroke-width="1.5" points="{}"/>"#, esc(&series.name), path.join(" "));
            }
            if !series.line || pts.len() <= 30 {
                for (x, y) in &pts {
                    let _ = writeln!(s, r#"<circle cx="{x:.2}" cy="{y:.2}" r="3.5" fill="{col}"/>"#);
                }
            }
        }
        let _ = writeln!(s, "</g>");
    }
    let ly = cell_h + 8.0;
    for (i, name) in legend.iter().enumerate() {
        let x = 20.0 + 140.0 * i as f64;
        let _ = writeln!(s, r#"<rect x="{x:.1}" y="{ly:.1}" width="14" height="14" fill="{}"/>"#, color(i, name));
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}">{}</text>"#, x + 20.0, ly + 11.0, esc(name));
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform_calibration(n: usize) -> String {
        let mut s = String::from("method,rank,p_value,expected_quantile\n");
        for i in 0..n {
            let q = (i as f64 + 0.5) / n as f64;
            s.push_str(&format!("mom,{},{q},{q}\n", i + 1));
        }
        s
    }

    #[test]
    fn uniform_p_values_lie_on_the_identity_line() {
        let fig = figure(Experiment::Calibration, &uniform_calibration(50)).unwrap();
        let panel = &fig.panels[0];
        assert!(panel.identity);
        let (a, b) = (panel.to_px((0.0, 0.0), (0.0, 0.0)), panel.to_px((0.0, 0.0), (1.0, 1.0)));
        for &p in &panel.series[0].points {
            let (x, y) = panel.to_px((0.0, 0.0), p);
            // collinear with the identity segment's endpoints
            let cross = (b.0 - a.0) * (y - a.1) - (b.1 - a.1) * (x - a.0);
            assert!(cross.abs() < 1e-9, "{p:?}");
        }
        assert!(to_svg(&fig).contains(r#"class="identity""#));
    }

    #[test]
    fn header_only_and_missing_columns_are_rejected() {
        let err = render(Experiment::Calibration, "method,rank,p_value,expected_quantile\n").unwrap_err();
        assert!(err.to_string().contains("no rows"));
        let err = render(Experiment::Power, "method,design,beta,n_sims\nmom,3v3,0,10\n").unwrap_err();
        assert!(err.to_string().contains("`power`"), "{err}");
    }

    #[test]
    fn power_is_faceted_by_design() {
        let csv = "method,design,beta,n_sims,n_reject,power\n\
                   mom,3v3,0,10,1,0.1\nmom,3v3,2.5,10,8,0.8\nmom,9v9,0,10,0,0\nmom,9v9,2.5,10,10,1\n\
                   mle,3v3,0,10,0,0\nmle,3v3,2.5,10,6,0.6\nmle,9v9,0,10,0,0\nmle,9v9,2.5,10,9,0.9\n";
        let fig = figure(Experiment::Power, csv).unwrap();
        assert_eq!(fig.panels.len(), 2);
        assert_eq!(fig.panels[1].title, "design 9v9");
        assert_eq!(fig.panels[0].series[1].name, "mle");
        assert_eq!(fig.panels[0].series[1].points, vec![(0.0, 0.0), (2.5, 0.6)]);
        let svg = to_svg(&fig);
        assert_eq!(svg.matches("<polyline").count(), 4);
        assert!(svg.contains("design=9v9 method=mom power=[0.000,1.000]"));
    }

    #[test]
    fn accuracy_uses_problems_every_method_estimated() {
        let csv = "problem_id,method,mu_true,beta_true,alpha_true,mu_hat,beta_hat,alpha_hat,converged,runtime_ns\n\
                   0,mom,0,0,0,1,1,1,true,100\n0,mle,0,0,0,2,2,2,true,10000\n\
                   1,mom,0,0,0,NaN,NaN,NaN,false,0\n1,mle,0,0,0,50,50,50,true,10000\n";
        let fig = figure(Experiment::Accuracy, csv).unwrap();
        assert_eq!(fig.panels.len(), 3);
        assert_eq!(fig.panels[0].series[0].points, vec![(0.1, 1.0)]);
        assert_eq!(fig.panels[0].series[1].points, vec![(10.0, 2.0)]);
        assert!(fig.panels[0].x_log);
    }

    #[test]
    fn rendering_is_deterministic() {
        let csv = uniform_calibration(20);
        assert_eq!(render(Experiment::Calibration, &csv).unwrap(), render(Experiment::Calibration, &csv).unwrap());
    }

    #[test]
    fn tick_positions_are_round() {
        assert_eq!(ticks((0.0, 1.0)), vec![0.0, 0.2, 0.4, 0.6000000000000001, 0.8, 1.0]);
        assert_eq!(label(0.6000000000000001), "0.6");
        assert_eq!(label(-0.0), "0");
    }
}
