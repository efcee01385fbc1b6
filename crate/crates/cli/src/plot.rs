use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context};
use ddnn_core::trainer::{MetricsRow, METRICS_HEADER};

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const MARGIN: f64 = 56.0;
const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// Top-1 error against epoch, one series per (net, split).
pub fn plot_file(metrics: &Path, output: &Path, split: Option<&str>) -> anyhow::Result<()> {
    let text = fs::read_to_string(metrics).with_context(|| format!("reading {}", metrics.display()))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == METRICS_HEADER => {}
        _ => bail!("{} is not a metrics file (header mismatch)", metrics.display()),
    }
    let rows = lines
        .filter(|l| !l.trim().is_empty())
        .map(MetricsRow::parse_csv)
        .collect::<Result<Vec<_>, _>>()?;
    let svg = render(&rows, split)?;
    fs::write(output, svg).with_context(|| format!("writing {}", output.display()))?;
    Ok(())
}

pub fn render(rows: &[MetricsRow], split: Option<&str>) -> anyhow::Result<String> {
    let mut series: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for r in rows.iter().filter(|r| split.is_none_or(|s| s == r.split)) {
        series
            .entry(format!("{} ({})", r.net_name, r.split))
            .or_default()
            .push((r.epoch as f64 + 1.0, r.top1_err));
    }
    if series.is_empty() {
        bail!("no metrics rows to plot");
    }
    let pts = series.values().flatten();
    let x_max = pts.clone().map(|p| p.0).fold(1.0, f64::max);
    let y_max = pts.map(|p| p.1).fold(1.0, f64::max).ceil();
    let sx = |x: f64| MARGIN + (x - 1.0) / (x_max - 1.0).max(1.0) * (WIDTH - 2.0 * MARGIN);
    let sy = |y: f64| HEIGHT - MARGIN - y / y_max * (HEIGHT - 2.0 * MARGIN);

    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="12">"#
    )?;
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#)?;
    let (x0, x1, y0, y1) = (MARGIN, WIDTH - MARGIN, HEIGHT - MARGIN, MARGIN);
    writeln!(
        s,
        r#"<path d="M{x0},{y1} L{x0},{y0} L{x1},{y0}" fill="none" stroke="black"/>"#
    )?;
    for i in 0..=4 {
        let v = y_max * i as f64 / 4.0;
        let y = sy(v);
        writeln!(
            s,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.1}</text>"#,
            x0 - 6.0,
            y + 4.0
        )?;
        writeln!(
            s,
            r##"<line x1="{x0}" y1="{y:.1}" x2="{x1}" y2="{y:.1}" stroke="#ddd"/>"##
        )?;
    }
    writeln!(s, r#"<text x="{x0}" y="{}" text-anchor="middle">1</text>"#, y0 + 16.0)?;
    writeln!(
        s,
        r#"<text x="{x1}" y="{}" text-anchor="middle">{x_max}</text>"#,
        y0 + 16.0
    )?;
    writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">epoch</text>"#,
        WIDTH / 2.0,
        HEIGHT - 14.0
    )?;
    writeln!(
        s,
        r#"<text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">top-1 error (%)</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0
    )?;

    for (i, (name, points)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let coords: Vec<String> = points
            .iter()
            .map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y)))
            .collect();
        writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"><title>{name}</title></polyline>"#,
            coords.join(" ")
        )?;
        let ly = MARGIN + 16.0 * i as f64;
        writeln!(
            s,
            r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#,
            x1 - 140.0,
            x1 - 120.0
        )?;
        writeln!(s, r#"<text x="{}" y="{}">{name}</text>"#, x1 - 114.0, ly + 4.0)?;
    }
    s.push_str("</svg>\n");
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(epoch: usize, net: &str, split: &'static str, err: f64) -> MetricsRow {
        MetricsRow {
            epoch,
            net_name: net.into(),
            split,
            top1_err: err,
            ce: 1.0,
            kl: 0.0,
            att_mse: 0.0,
            total: 1.0,
            lr: 0.1,
            wall_secs: 0.0,
        }
    }

    #[test]
    fn one_polyline_per_series() {
        let rows = vec![
            row(0, "full", "test", 40.0),
            row(0, "sub1", "test", 45.0),
            row(1, "full", "test", 30.0),
        ];
        let svg = render(&rows, None).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("sub1 (test)"));
    }

    #[test]
    fn split_filter_drops_rows() {
        let rows = vec![row(0, "full", "train", 40.0), row(0, "full", "test", 45.0)];
        assert_eq!(render(&rows, Some("test")).unwrap().matches("<polyline").count(), 1);
        assert!(render(&rows, Some("nope")).is_err());
    }
}
