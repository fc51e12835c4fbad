//! CSV tables and static SVG charts for saturation reports.

use std::fmt::Write as _;

use crate::error::{Error, Result};

use super::{mean_gap, Curve, SaturationReport};

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// One row per (run, metric): `t_sat`, Δ_sat, Δ*_post and G_sat.
/// Undefined values are left empty.
pub fn table_csv(reports: &[SaturationReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Input(format!("csv: {e}"));
    w.write_record([
        "run_id",
        "n",
        "t_sat",
        "metric",
        "eval_step",
        "delta_sat",
        "delta_post",
        "companion_run",
        "companion_n",
        "g_sat",
    ])
    .map_err(csv_err)?;
    for r in reports {
        let t_sat = r.t_sat.map(|t| t.to_string()).unwrap_or_default();
        if r.metrics.is_empty() {
            w.write_record([r.run_id.as_str(), &r.n.to_string(), &t_sat, "", "", "", "", "", "", ""])
                .map_err(csv_err)?;
        }
        for m in &r.metrics {
            w.write_record([
                r.run_id.clone(),
                r.n.to_string(),
                t_sat.clone(),
                m.metric.clone(),
                m.efficiency.eval_step.map(|s| s.to_string()).unwrap_or_default(),
                opt(m.efficiency.delta_sat),
                opt(m.efficiency.delta_post),
                m.companion.clone().unwrap_or_default(),
                m.companion_n.map(|n| n.to_string()).unwrap_or_default(),
                opt(m.efficiency.gap),
            ])
            .map_err(csv_err)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Input(format!("csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Input(e.to_string()))
}

/// Mean G_sat over a declared benchmark group (e.g. in-domain or OOD).
pub fn group_gap(report: &SaturationReport, metrics: &[&str]) -> Option<f64> {
    let gaps: Vec<Option<f64>> = metrics
        .iter()
        .map(|m| {
            report
                .metrics
                .iter()
                .find(|x| x.metric == *m)
                .and_then(|x| x.efficiency.gap)
        })
        .collect();
    mean_gap(&gaps)
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Line chart of `curves` with dashed vertical markers at the given steps.
pub fn curves_svg(title: &str, curves: &[&Curve], markers: &[(String, usize)]) -> String {
    let (w, h, pad) = (640.0, 360.0, 48.0);
    let all = curves.iter().flat_map(|c| c.points().iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(s, v) in all {
        x0 = x0.min(s as f64);
        x1 = x1.max(s as f64);
        y0 = y0.min(v);
        y1 = y1.max(v);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let sx = |s: f64| pad + (s - x0) / (x1 - x0) * (w - 2.0 * pad);
    let sy = |v: f64| h - pad - (v - y0) / (y1 - y0) * (h - 2.0 * pad);

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="20" font-family="sans-serif" font-size="14" text-anchor="middle">{}</text>"#,
        w / 2.0,
        escape(title)
    );
    let _ = writeln!(
        out,
        r#"<polyline fill="none" stroke="black" points="{pad:.1},{:.1} {pad:.1},{:.1} {:.1},{:.1}"/>"#,
        pad,
        h - pad,
        w - pad,
        h - pad
    );
    let _ = writeln!(
        out,
        r#"<text x="{pad:.1}" y="{:.1}" font-family="sans-serif" font-size="10">{x0:.0}</text><text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="10" text-anchor="end">{x1:.0}</text>"#,
        h - pad + 14.0,
        w - pad,
        h - pad + 14.0
    );
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="10" text-anchor="end">{y0:.3}</text><text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="10" text-anchor="end">{y1:.3}</text>"#,
        pad - 4.0,
        h - pad,
        pad - 4.0,
        pad + 4.0
    );
    for (i, c) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = c
            .points()
            .iter()
            .map(|&(s, v)| format!("{:.2},{:.2}", sx(s as f64), sy(v)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            pts.join(" ")
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="10" fill="{color}">{} / {}</text>"#,
            w - pad - 150.0,
            pad + 12.0 * i as f64,
            escape(&c.run_id),
            escape(&c.metric)
        );
    }
    for (i, (label, step)) in markers.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let x = sx(*step as f64);
        let _ = writeln!(
            out,
            r#"<line x1="{x:.2}" y1="{pad:.1}" x2="{x:.2}" y2="{:.1}" stroke="{color}" stroke-dasharray="4,3"/>"#,
            h - pad
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.1}" font-family="sans-serif" font-size="9" fill="{color}">{}</text>"#,
            x + 2.0,
            pad - 4.0,
            escape(label)
        );
    }
    out.push_str("</svg>\n");
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytics::{Efficiency, MetricEfficiency};

    #[test]
    fn undefined_metrics_are_empty_cells() {
        let r = SaturationReport {
            run_id: "a".into(),
            n: 8,
            t_sat: None,
            r_max: 0.5,
            eps_max: 0.99,
            guard: 50,
            metrics: vec![MetricEfficiency {
                metric: "heldout/avg@16".into(),
                efficiency: Efficiency {
                    eval_step: None,
                    delta_sat: None,
                    delta_post: None,
                    gap: None,
                },
                companion: None,
                companion_n: None,
            }],
        };
        let csv = table_csv(&[r]).unwrap();
        assert_eq!(csv.lines().nth(1).unwrap(), "a,8,,heldout/avg@16,,,,,,");
    }

    #[test]
    fn svg_has_marker_and_polyline() {
        let c = Curve::new("run", "m", 8, vec![(0, 0.1), (10, 0.5), (20, 0.6)]).unwrap();
        let svg = curves_svg("t<1>", &[&c], &[("t_sat".into(), 10)]);
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("stroke-dasharray"));
        assert!(svg.contains("t&lt;1&gt;"));
    }
}
