//! Minimal SVG line charts rendered straight from run outputs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::harness::report::{find_runs, read_meta};
use crate::harness::run::MetricRecord;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 36.0;
const BOTTOM: f64 = 48.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn tick_label(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e5 || v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

/// Renders series as polylines over shared linear axes. No series gives
/// empty axes over `[0, 1]`.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (x0, x1) = range(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let (y0, y1) = range(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| TOP + ph - (y - y0) / (y1 - y0) * ph;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        LEFT + pw / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<path d="M{LEFT} {TOP} V{:.2} H{:.2}" fill="none" stroke="black"/>"#,
        TOP + ph,
        LEFT + pw
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let (px, py) = (sx(xv), sy(yv));
        let _ = writeln!(
            s,
            r#"<line x1="{px:.2}" y1="{:.2}" x2="{px:.2}" y2="{:.2}" stroke="black"/><text x="{px:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            TOP + ph,
            TOP + ph + 4.0,
            TOP + ph + 16.0,
            tick_label(xv)
        );
        let _ = writeln!(
            s,
            r#"<line x1="{:.2}" y1="{py:.2}" x2="{LEFT}" y2="{py:.2}" stroke="black"/><text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
            LEFT - 4.0,
            LEFT - 6.0,
            py + 4.0,
            tick_label(yv)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 10.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">{}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        escape(y_label)
    );
    for (k, ser) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pts: Vec<String> = ser
            .points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            pts.join(" ")
        );
        let ly = TOP + 8.0 + 16.0 * k as f64;
        let lx = LEFT + pw + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/><text x="{:.2}" y="{:.2}">{}</text>"#,
            lx + 18.0,
            lx + 22.0,
            ly + 4.0,
            escape(&ser.name)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Mean test accuracy per round from a `metrics.jsonl` stream.
pub fn accuracy_series(jsonl: &str) -> Result<Vec<(f64, f64)>> {
    let mut by_round: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for line in jsonl.lines().filter(|l| !l.trim().is_empty()) {
        let m: MetricRecord = serde_json::from_str(line)?;
        let e = by_round.entry(m.round).or_default();
        e.0 += m.test_acc;
        e.1 += 1;
    }
    Ok(by_round
        .into_iter()
        .map(|(r, (s, n))| (r as f64, s / n as f64))
        .collect())
}

/// Transmitted parameters (global + head) per round from `ledger.csv`.
pub fn cost_series(csv: &str) -> Result<Vec<(f64, f64)>> {
    let mut by_round: BTreeMap<usize, u64> = BTreeMap::new();
    for line in csv.lines().skip(1).filter(|l| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 {
            return Err(Error::Parse(format!("ledger row `{line}`")));
        }
        let round: usize = f[0]
            .parse()
            .map_err(|_| Error::Parse(format!("ledger round `{}`", f[0])))?;
        let v: u64 = f[2]
            .parse()
            .map_err(|_| Error::Parse(format!("ledger value `{}`", f[2])))?;
        let e = by_round.entry(round).or_default();
        if f[1] != "control" {
            *e += v;
        }
    }
    Ok(by_round.into_iter().map(|(r, v)| (r as f64, v as f64)).collect())
}

/// `alpha_{node,j}` per round, one series per neighbor `j`.
pub fn alpha_series(csv: &str, node: usize) -> Result<Vec<Series>> {
    let mut by_j: BTreeMap<usize, Vec<(f64, f64)>> = BTreeMap::new();
    for line in csv.lines().skip(1).filter(|l| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        let parse = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| Error::Parse(format!("alphas row `{line}`")))
        };
        if f.len() != 4 {
            return Err(Error::Parse(format!("alphas row `{line}`")));
        }
        if parse(f[1])? as usize == node {
            by_j.entry(parse(f[2])? as usize)
                .or_default()
                .push((parse(f[0])?, parse(f[3])?));
        }
    }
    Ok(by_j
        .into_iter()
        .map(|(j, points)| Series {
            name: format!("alpha {node},{j}"),
            points,
        })
        .collect())
}

/// `plot`: writes `accuracy.svg`, `cost.svg` and `alphas.svg` for the
/// runs found under `dirs`.
pub fn cmd_plot(dirs: &[PathBuf], out_dir: &Path, node: usize) -> Result<Vec<PathBuf>> {
    let mut runs = Vec::new();
    for d in dirs {
        runs.extend(find_runs(d)?);
    }
    let mut acc = Vec::new();
    let mut cost = Vec::new();
    let mut alphas = Vec::new();
    for run in &runs {
        let meta = read_meta(run)?;
        let name = format!("{} t{}", meta.algorithm, meta.trial);
        acc.push(Series {
            name: name.clone(),
            points: accuracy_series(&fs::read_to_string(run.join("metrics.jsonl"))?)?,
        });
        cost.push(Series {
            name,
            points: cost_series(&fs::read_to_string(run.join("ledger.csv"))?)?,
        });
        if alphas.is_empty() {
            if let Ok(text) = fs::read_to_string(run.join("alphas.csv")) {
                alphas = alpha_series(&text, node)?;
            }
        }
    }
    fs::create_dir_all(out_dir)?;
    let files = [
        (
            "accuracy.svg",
            line_chart("Mean test accuracy", "round", "accuracy", &acc),
        ),
        (
            "cost.svg",
            line_chart("Transmitted parameters per round", "round", "scalars", &cost),
        ),
        (
            "alphas.svg",
            line_chart(&format!("Attention weights at node {node}"), "round", "alpha", &alphas),
        ),
    ];
    let mut written = Vec::new();
    for (name, svg) in files {
        let p = out_dir.join(name);
        fs::write(&p, svg)?;
        written.push(p);
    }
    Ok(written)
}
