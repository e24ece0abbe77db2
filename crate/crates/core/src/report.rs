//! CSV and static-SVG report rendering.

use crate::eval::{IgStatsRow, MetricReport};
use crate::training::ReportRow;

fn fmt(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v:.6}")
    }
}

/// Stage report CSV: `epoch,split,loss_sft,loss_rce,loss_rnorm,selection_acc`.
pub fn stage_report_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from("stage,epoch,split,loss_sft,loss_rce,loss_rnorm,selection_acc\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.stage,
            r.epoch,
            r.split,
            fmt(r.loss_sft),
            fmt(r.loss_rce),
            fmt(r.loss_rnorm),
            fmt(r.selection_acc)
        ));
    }
    out
}

/// Metric report CSV, one row per action type plus an overall row.
pub fn metrics_csv(report: &MetricReport) -> String {
    let mut out = String::from("action,count,type_acc,match_acc\n");
    for (kind, stats) in &report.per_type {
        out.push_str(&format!(
            "{},{},{},{}\n",
            kind.name(),
            stats.count,
            fmt(stats.type_acc()),
            fmt(stats.match_acc())
        ));
    }
    out.push_str(&format!(
        "OVERALL,{},{},{}\n",
        report.count,
        fmt(report.type_acc),
        fmt(report.match_acc)
    ));
    out
}

/// Information-gain statistics CSV.
pub fn ig_stats_csv(rows: &[IgStatsRow]) -> String {
    let mut out = String::from("side,stage,mean,std\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.side, r.stage, fmt(r.mean), fmt(r.std)));
    }
    out
}

/// Router confusion CSV: stage rows, expert columns.
pub fn confusion_csv(confusion: &[Vec<u64>]) -> String {
    let experts = confusion.first().map_or(0, |r| r.len());
    let mut out = String::from("stage");
    for e in 0..experts {
        out.push_str(&format!(",expert_{e}"));
    }
    out.push('\n');
    for (row, stage) in confusion.iter().zip(["ss", "sp", "ad", "af"]) {
        out.push_str(stage);
        for v in row {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

/// Grouped bar chart as a static SVG. `groups` are x-axis clusters and
/// every series contributes one bar per group.
pub fn svg_grouped_bars(
    title: &str,
    groups: &[String],
    series: &[(String, Vec<f64>)],
    y_label: &str,
) -> String {
    let width = 640.0;
    let height = 360.0;
    let margin = 50.0;
    let plot_w = width - 2.0 * margin;
    let plot_h = height - 2.0 * margin;
    let max_v = series
        .iter()
        .flat_map(|(_, vs)| vs.iter().copied())
        .fold(0.0f64, |a, b| a.max(b.abs()))
        .max(1e-9);
    let n_groups = groups.len().max(1);
    let n_series = series.len().max(1);
    let group_w = plot_w / n_groups as f64;
    let bar_w = (group_w * 0.8) / n_series as f64;
    let palette = ["#4878a8", "#e8803a", "#5aa469", "#b05a7a", "#8a7cc2", "#c2b25a"];

    let mut svg = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">
<rect width="{width}" height="{height}" fill="white"/>
<text x="{:.1}" y="24" font-family="sans-serif" font-size="15" text-anchor="middle">{title}</text>
<text x="14" y="{:.1}" font-family="sans-serif" font-size="11" text-anchor="middle" transform="rotate(-90 14 {:.1})">{y_label}</text>
"#,
        width / 2.0,
        height / 2.0,
        height / 2.0
    );
    // zero line
    let y0 = margin + plot_h * (max_v / (2.0 * max_v));
    svg.push_str(&format!(
        "<line x1=\"{margin}\" y1=\"{y0:.1}\" x2=\"{:.1}\" y2=\"{y0:.1}\" stroke=\"#999\"/>\n",
        width - margin
    ));
    for (g, group) in groups.iter().enumerate() {
        let gx = margin + g as f64 * group_w;
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">{group}</text>\n",
            gx + group_w / 2.0,
            height - margin + 16.0
        ));
        for (s, (_, values)) in series.iter().enumerate() {
            let v = values.get(g).copied().unwrap_or(0.0);
            let frac = v / (2.0 * max_v);
            let bar_h = frac.abs() * plot_h;
            let x = gx + group_w * 0.1 + s as f64 * bar_w;
            let y = if v >= 0.0 { y0 - bar_h } else { y0 };
            svg.push_str(&format!(
                "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{:.1}\" height=\"{bar_h:.1}\" fill=\"{}\"/>\n",
                bar_w * 0.9,
                palette[s % palette.len()]
            ));
        }
    }
    for (s, (name, _)) in series.iter().enumerate() {
        let lx = margin + s as f64 * 120.0;
        svg.push_str(&format!(
            "<rect x=\"{lx:.1}\" y=\"{:.1}\" width=\"10\" height=\"10\" fill=\"{}\"/>\n<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\">{name}</text>\n",
            height - 18.0,
            palette[s % palette.len()],
            lx + 14.0,
            height - 9.0
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_renders_nan_as_empty() {
        let rows = vec![ReportRow {
            stage: "cot".into(),
            epoch: 0,
            split: "train".into(),
            loss_sft: 1.25,
            loss_rce: f64::NAN,
            loss_rnorm: 0.5,
            selection_acc: f64::NAN,
        }];
        let csv = stage_report_csv(&rows);
        assert!(csv.contains("cot,0,train,1.250000,,0.500000,\n"), "{csv}");
    }

    #[test]
    fn svg_is_well_formed_enough() {
        let svg = svg_grouped_bars(
            "expert distribution",
            &["ss".into(), "sp".into()],
            &[("chosen".into(), vec![0.5, -0.2]), ("rejected".into(), vec![0.1, 0.3])],
            "share",
        );
        assert!(svg.starts_with("<svg"));
        assert!(svg.ends_with("</svg>\n"));
        assert_eq!(svg.matches("<rect").count(), 1 + 4 + 2); // background + bars + legend
    }
}
