//! MSE-versus-noise-level line plots as standalone SVG.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::config::Variant;
use crate::report::{load_metrics, MetricRecord};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 55.0;

fn color(v: Variant) -> &'static str {
    match v {
        Variant::Encoder => "#1f77b4",
        Variant::EncoderPrior => "#ff7f0e",
        Variant::EncoderPriorEkf => "#2ca02c",
        Variant::LatentKalmanNet => "#d62728",
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub variant: Variant,
    /// `(noise level, MSE dB)` sorted by level.
    pub points: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Figure {
    pub title: String,
    pub levels: Vec<f64>,
    pub series: Vec<Series>,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median over seeds per `(variant, level)`. Variants without a single
/// finite value are left out and named in the returned warnings.
pub fn figure_from_metrics(rows: &[MetricRecord], title: &str) -> (Figure, Vec<String>) {
    let mut groups: BTreeMap<Variant, BTreeMap<u64, Vec<f64>>> = BTreeMap::new();
    let mut levels: Vec<f64> = Vec::new();
    for r in rows {
        if !levels.iter().any(|&l| l == r.noise_level) {
            levels.push(r.noise_level);
        }
        let cell = groups.entry(r.variant).or_default().entry(r.noise_level.to_bits()).or_default();
        if r.mse_db.is_finite() {
            cell.push(r.mse_db);
        }
    }
    levels.sort_by(f64::total_cmp);
    let mut warnings = Vec::new();
    let mut series = Vec::new();
    for (variant, cells) in groups {
        let mut points: Vec<(f64, f64)> = cells
            .into_iter()
            .filter(|(_, v)| !v.is_empty())
            .map(|(bits, mut v)| (f64::from_bits(bits), median(&mut v)))
            .collect();
        if points.is_empty() {
            warnings.push(format!("variant {variant} has no finite results; omitted from the plot"));
            continue;
        }
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        series.push(Series { variant, points });
    }
    (
        Figure {
            title: title.to_string(),
            levels,
            series,
        },
        warnings,
    )
}

/// "Nice" tick step for a span.
fn tick_step(span: f64) -> f64 {
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let r = raw / mag;
    let nice = if r < 1.5 {
        1.0
    } else if r < 3.5 {
        2.0
    } else if r < 7.5 {
        5.0
    } else {
        10.0
    };
    nice * mag
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn render_svg(fig: &Figure) -> String {
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let ys: Vec<f64> = fig.series.iter().flat_map(|s| s.points.iter().map(|p| p.1)).collect();
    let (mut ymin, mut ymax) = ys
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &y| (a.min(y), b.max(y)));
    if !ymin.is_finite() {
        (ymin, ymax) = (-1.0, 0.0);
    }
    if ymax - ymin < 1e-9 {
        ymin -= 0.5;
        ymax += 0.5;
    }
    let step = tick_step(ymax - ymin);
    let ylo = (ymin / step).floor() * step;
    let yhi = (ymax / step).ceil() * step;
    let (xlo, xhi) = match (fig.levels.first(), fig.levels.last()) {
        (Some(&a), Some(&b)) if b > a => (a, b),
        (Some(&a), _) => (a - 1.0, a + 1.0),
        _ => (0.0, 1.0),
    };
    let px = |x: f64| LEFT + (x - xlo) / (xhi - xlo) * pw;
    let py = |y: f64| TOP + (yhi - y) / (yhi - ylo) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        LEFT + pw / 2.0,
        escape(&fig.title)
    );
    let mut y = ylo;
    while y <= yhi + step * 1e-6 {
        let v = py(y);
        let _ = writeln!(
            s,
            r##"<line class="ytick" x1="{LEFT}" y1="{v:.2}" x2="{:.2}" y2="{v:.2}" stroke="#dddddd"/>"##,
            LEFT + pw
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.2}" text-anchor="end">{}</text>"#,
            LEFT - 6.0,
            v + 4.0,
            fmt_num(y)
        );
        y += step;
    }
    for &l in &fig.levels {
        let u = px(l);
        let _ = writeln!(
            s,
            r##"<line class="xtick" x1="{u:.2}" y1="{:.2}" x2="{u:.2}" y2="{:.2}" stroke="#000000"/>"##,
            TOP + ph,
            TOP + ph + 5.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{u:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            TOP + ph + 19.0,
            fmt_num(l)
        );
    }
    let _ = writeln!(
        s,
        r##"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="#000000"/>"##
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">noise level</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="18" y="{:.1}" text-anchor="middle" transform="rotate(-90 18 {:.1})">MSE [dB]</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0
    );
    for (i, ser) in fig.series.iter().enumerate() {
        let c = color(ser.variant);
        let pts: Vec<String> = ser.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{c}" stroke-width="2" points="{}"/>"#,
            pts.join(" ")
        );
        for &(x, y) in &ser.points {
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3.5" fill="{c}"/>"#, px(x), py(y));
        }
        let ly = TOP + 10.0 + 20.0 * i as f64;
        let lx = LEFT + pw + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{c}" stroke-width="2"/>"#,
            lx + 22.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}">{}</text>"#,
            lx + 28.0,
            ly + 4.0,
            escape(ser.variant.name())
        );
    }
    s.push_str("</svg>\n");
    s
}

fn fmt_num(v: f64) -> String {
    let r = (v * 100.0).round() / 100.0;
    let t = format!("{r:.2}");
    let t = t.trim_end_matches('0').trim_end_matches('.').to_string();
    if t == "-0" {
        "0".into()
    } else {
        t
    }
}

/// Render `csv` to `<out_dir>/<csv stem>.svg`. Returns the written file,
/// or `None` when there is nothing to draw.
pub fn plot_metrics_file(csv: &Path, out_dir: &Path) -> anyhow::Result<Option<PathBuf>> {
    let rows = load_metrics(csv)?;
    let stem = csv.file_stem().and_then(|s| s.to_str()).unwrap_or("metrics");
    let (fig, warnings) = figure_from_metrics(&rows, &format!("MSE vs noise level ({stem})"));
    for w in &warnings {
        log::warn!("{w}");
    }
    if fig.series.is_empty() {
        log::warn!("{}: no plottable rows", csv.display());
        return Ok(None);
    }
    std::fs::create_dir_all(out_dir)?;
    let path = out_dir.join(format!("{stem}.svg"));
    std::fs::write(&path, render_svg(&fig))?;
    Ok(Some(path))
}
