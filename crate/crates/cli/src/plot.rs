//! Profile CSV parsing and SVG rendering.

use std::fmt::Write as _;

use aia_core::aia::LayerTarget;

#[derive(Clone, Debug, PartialEq)]
pub struct ProfileSeries {
    pub label: String,
    pub task: String,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(serde::Deserialize)]
struct Row {
    layer: usize,
    task: String,
    mean: f64,
    std: f64,
    #[allow(dead_code)]
    n: usize,
}

/// Parses a `layer,task,mean,std,n` profile; `#` lines are skipped.
pub fn parse_profile_csv(text: &str, label: String) -> Result<ProfileSeries, String> {
    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| e.to_string())?.clone();
    if header.iter().collect::<Vec<_>>() != ["layer", "task", "mean", "std", "n"] {
        return Err(format!("expected header layer,task,mean,std,n, got {}", header.iter().collect::<Vec<_>>().join(",")));
    }
    let mut series = ProfileSeries { label, task: String::new(), mean: Vec::new(), std: Vec::new() };
    for (i, row) in reader.deserialize::<Row>().enumerate() {
        let row = row.map_err(|e| e.to_string())?;
        if row.layer != i {
            return Err(format!("row {i} has layer {}", row.layer));
        }
        if i == 0 {
            series.task = row.task;
        } else if row.task != series.task {
            return Err(format!("row {i} mixes task {} into {}", row.task, series.task));
        }
        if !row.mean.is_finite() || !row.std.is_finite() {
            return Err(format!("row {i} has a non-finite value"));
        }
        series.mean.push(row.mean);
        series.std.push(row.std);
    }
    if series.mean.is_empty() {
        return Err("profile has no rows".into());
    }
    Ok(series)
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 56.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 24.0;
const BOTTOM: f64 = 44.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Layer on x, intensity in `[0, 1]` on y, one polyline per series and an
/// optional shaded `[T − δ, T + δ]` band per layer.
pub fn render_svg(series: &[ProfileSeries], bands: Option<&[LayerTarget]>) -> String {
    let depth = series.iter().map(|s| s.mean.len()).chain(bands.map(<[_]>::len)).max().unwrap_or(1);
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let step = plot_w / depth as f64;
    let x = |l: f64| LEFT + (l + 0.5) * step;
    let y = |v: f64| TOP + (1.0 - v.clamp(0.0, 1.0)) * plot_h;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    if let Some(bands) = bands {
        let _ = writeln!(s, r##"<g class="bands" fill="#888888" fill-opacity="0.2">"##);
        for (l, b) in bands.iter().enumerate() {
            let (lo, hi) = (b.target - b.delta, b.target + b.delta);
            let _ = writeln!(
                s,
                r#"<rect x="{:.3}" y="{:.3}" width="{:.3}" height="{:.3}" data-layer="{l}" data-lo="{lo}" data-hi="{hi}"/>"#,
                LEFT + l as f64 * step,
                y(hi),
                step,
                y(lo) - y(hi)
            );
        }
        let _ = writeln!(s, "</g>");
    }
    let _ = writeln!(s, r##"<g class="axes" stroke="#000000" fill="none">"##);
    let _ = writeln!(s, r#"<line x1="{LEFT}" y1="{:.3}" x2="{:.3}" y2="{:.3}"/>"#, y(0.0), LEFT + plot_w, y(0.0));
    let _ = writeln!(s, r#"<line x1="{LEFT}" y1="{:.3}" x2="{LEFT}" y2="{:.3}"/>"#, y(0.0), y(1.0));
    let _ = writeln!(s, "</g>");
    for i in 0..=4 {
        let v = i as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{:.3}" y="{:.3}" text-anchor="end">{v:.2}</text>"#, LEFT - 6.0, y(v) + 4.0);
    }
    for l in 0..depth {
        let _ = writeln!(s, r#"<text x="{:.3}" y="{:.3}" text-anchor="middle">{l}</text>"#, x(l as f64), y(0.0) + 16.0);
    }
    let _ = writeln!(s, r#"<text x="{:.3}" y="{:.3}" text-anchor="middle">layer</text>"#, LEFT + plot_w / 2.0, HEIGHT - 8.0);
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.3}" text-anchor="middle" transform="rotate(-90 14 {:.3})">intensity</text>"#,
        TOP + plot_h / 2.0,
        TOP + plot_h / 2.0
    );
    for (i, series) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let points: Vec<String> =
            series.mean.iter().enumerate().map(|(l, &v)| format!("{:.3},{:.3}", x(l as f64), y(v))).collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            points.join(" ")
        );
        let ly = TOP + 14.0 + 18.0 * i as f64;
        let lx = LEFT + plot_w + 12.0;
        let _ = writeln!(s, r#"<line x1="{lx:.3}" y1="{ly:.3}" x2="{:.3}" y2="{ly:.3}" stroke="{color}" stroke-width="2"/>"#, lx + 18.0);
        let _ = writeln!(
            s,
            r#"<text x="{:.3}" y="{:.3}">{} ({})</text>"#,
            lx + 24.0,
            ly + 4.0,
            escape(&series.label),
            escape(&series.task)
        );
    }
    s.push_str("</svg>\n");
    s
}
