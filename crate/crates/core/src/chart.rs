//! Minimal SVG line charts of a metric against communication rounds.

use std::fmt::Write as _;

/// One curve: `(round, value, ci_half_width)` points. `None` values are gaps.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(usize, Option<f64>, Option<f64>)>,
}

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 180.0;
const TOP: f64 = 36.0;
const BOTTOM: f64 = 56.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Pads every series to the union of rounds, leaving gaps where a series
/// has no value.
pub fn align(series: &[Series]) -> Vec<Series> {
    let mut rounds: Vec<usize> = series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.0))
        .collect();
    rounds.sort_unstable();
    rounds.dedup();
    series
        .iter()
        .map(|s| {
            if s.points.len() != rounds.len() {
                log::warn!(
                    "series `{}` has {} points, padding to {} rounds",
                    s.name,
                    s.points.len(),
                    rounds.len()
                );
            }
            let points = rounds
                .iter()
                .map(|&r| {
                    s.points
                        .iter()
                        .find(|p| p.0 == r)
                        .copied()
                        .unwrap_or((r, None, None))
                })
                .collect();
            Series {
                name: s.name.clone(),
                points,
            }
        })
        .collect()
}

/// Renders `series` with the y axis fixed to [0, 1].
///
/// # Panics
/// If `series` is empty.
pub fn render_chart(title: &str, y_label: &str, series: &[Series]) -> String {
    assert!(!series.is_empty(), "a chart needs at least one series");
    let series = align(series);
    let max_round = series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.0))
        .max()
        .unwrap_or(0)
        .max(1);
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let x = |r: usize| LEFT + plot_w * r as f64 / max_round as f64;
    let y = |v: f64| TOP + plot_h * (1.0 - v.clamp(0.0, 1.0));

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(
        svg,
        r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        LEFT + plot_w / 2.0,
        escape(title)
    );

    for k in 0..=5 {
        let v = k as f64 / 5.0;
        let _ = writeln!(
            svg,
            r##"<line x1="{LEFT}" y1="{y0:.2}" x2="{x1:.2}" y2="{y0:.2}" stroke="#e0e0e0"/><text x="{tx:.2}" y="{ty:.2}" text-anchor="end">{v:.1}</text>"##,
            y0 = y(v),
            x1 = LEFT + plot_w,
            tx = LEFT - 6.0,
            ty = y(v) + 4.0
        );
    }
    let ticks = 5.min(max_round);
    for k in 0..=ticks {
        let r = max_round * k / ticks;
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{r}</text>"#,
            x(r),
            TOP + plot_h + 18.0
        );
    }
    let _ = writeln!(
        svg,
        r##"<rect x="{LEFT}" y="{TOP}" width="{plot_w}" height="{plot_h}" fill="none" stroke="#333"/>"##
    );
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">communication round</text>"#,
        LEFT + plot_w / 2.0,
        HEIGHT - 16.0
    );
    let _ = writeln!(
        svg,
        r#"<text transform="translate(18 {:.2}) rotate(-90)" text-anchor="middle">{}</text>"#,
        TOP + plot_h / 2.0,
        escape(y_label)
    );

    for (k, s) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        // contiguous runs of defined points
        let mut runs: Vec<Vec<(usize, f64, f64)>> = vec![Vec::new()];
        for &(r, v, ci) in &s.points {
            match v {
                Some(v) => runs.last_mut().unwrap().push((r, v, ci.unwrap_or(0.0))),
                None if !runs.last().unwrap().is_empty() => runs.push(Vec::new()),
                None => {}
            }
        }
        for run in runs.iter().filter(|r| !r.is_empty()) {
            if run.iter().any(|p| p.2 > 0.0) {
                let upper = run
                    .iter()
                    .map(|&(r, v, c)| format!("{:.2},{:.2}", x(r), y(v + c)));
                let lower = run
                    .iter()
                    .rev()
                    .map(|&(r, v, c)| format!("{:.2},{:.2}", x(r), y(v - c)));
                let pts: Vec<String> = upper.chain(lower).collect();
                let _ = writeln!(
                    svg,
                    r#"<polygon points="{}" fill="{color}" fill-opacity="0.18" stroke="none"/>"#,
                    pts.join(" ")
                );
            }
            let pts: Vec<String> = run
                .iter()
                .map(|&(r, v, _)| format!("{:.2},{:.2}", x(r), y(v)))
                .collect();
            let _ = writeln!(
                svg,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.8"/>"#,
                pts.join(" ")
            );
        }
        let ly = TOP + 10.0 + 20.0 * k as f64;
        let lx = WIDTH - RIGHT + 16.0;
        let _ = writeln!(
            svg,
            r#"<line class="legend" x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="3"/><text x="{}" y="{}">{}</text>"#,
            lx + 22.0,
            lx + 28.0,
            ly + 4.0,
            escape(&s.name)
        );
    }
    svg.push_str("</svg>\n");
    svg
}
