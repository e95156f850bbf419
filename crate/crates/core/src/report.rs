//! Rendering of metrics reports: per-class score and accuracy curves sorted
//! by train count, per-group tables and a cross-run comparison, as CSV and
//! standalone SVG.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::experiment::write_file;
use crate::metrics::{ClassRow, MetricsReport};
use crate::synthetic_world::Group;

/// A report with the label used in file names and legends.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedReport {
    pub label: String,
    pub report: MetricsReport,
}

pub fn load_report(path: &Path) -> Result<MetricsReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    MetricsReport::from_json(&text).map_err(|e| match e {
        Error::Format { what, reason } => Error::Format {
            what,
            reason: format!("{}: {reason}", path.display()),
        },
        other => other,
    })
}

/// Expands directories to their `report_*.json` files (sorted by name).
pub fn collect_report_paths(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for input in inputs {
        if input.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(input)
                .map_err(|e| Error::io(input, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    p.file_name()
                        .and_then(|n| n.to_str())
                        .is_some_and(|n| n.starts_with("report_") && n.ends_with(".json"))
                })
                .collect();
            found.sort();
            if found.is_empty() {
                return Err(Error::invalid("reports", format!("no report_*.json in {}", input.display())));
            }
            out.extend(found);
        } else {
            out.push(input.clone());
        }
    }
    if out.is_empty() {
        return Err(Error::invalid("reports", "need at least one report"));
    }
    Ok(out)
}

/// Labels are the recorded variant names, made unique with the seed and
/// then a counter when several runs share a name.
pub fn label_reports(reports: Vec<MetricsReport>) -> Vec<NamedReport> {
    let base: Vec<String> = reports
        .iter()
        .map(|r| {
            let v = sanitize(&r.provenance.variant);
            if v.is_empty() {
                "run".to_string()
            } else {
                v
            }
        })
        .collect();
    let mut labels: Vec<String> = Vec::with_capacity(reports.len());
    for (i, r) in reports.iter().enumerate() {
        let clash = base.iter().filter(|b| **b == base[i]).count() > 1;
        let mut label = if clash {
            format!("{}_seed{}", base[i], r.provenance.seed)
        } else {
            base[i].clone()
        };
        if labels.contains(&label) {
            let mut k = 2;
            while labels.contains(&format!("{label}_{k}")) {
                k += 1;
            }
            label = format!("{label}_{k}");
        }
        labels.push(label);
    }
    labels
        .into_iter()
        .zip(reports)
        .map(|(label, report)| NamedReport { label, report })
        .collect()
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Classes by decreasing train count, ties by class index.
pub fn sorted_by_train_count(report: &MetricsReport) -> Vec<&ClassRow> {
    let mut rows: Vec<&ClassRow> = report.per_class.iter().collect();
    rows.sort_by(|a, b| b.train_count.cmp(&a.train_count).then(a.class.cmp(&b.class)));
    rows
}

fn provenance_cells(r: &MetricsReport) -> String {
    format!(
        "{},{},{}",
        r.provenance.config_digest, r.provenance.seed, r.provenance.variant
    )
}

pub fn class_curve_csv(report: &MetricsReport) -> String {
    let mut out = String::from(
        "config_digest,seed,variant,rank,class,train_count,group,mean_score,accuracy,background_rate\n",
    );
    for (rank, row) in sorted_by_train_count(report).iter().enumerate() {
        writeln!(
            out,
            "{},{},{},{},{},{:?},{:?},{:?}",
            provenance_cells(report),
            rank + 1,
            row.class,
            row.train_count,
            row.group.as_str(),
            row.mean_score,
            row.accuracy,
            row.background_rate
        )
        .expect("write to string");
    }
    out
}

pub fn group_table_csv(reports: &[NamedReport]) -> String {
    let mut out =
        String::from("config_digest,seed,variant,label,group,num_classes,accuracy,mean_score,background_rate\n");
    for nr in reports {
        for g in &nr.report.per_group {
            writeln!(
                out,
                "{},{},{},{},{:?},{:?},{:?}",
                provenance_cells(&nr.report),
                nr.label,
                g.group.as_str(),
                g.num_classes,
                g.accuracy,
                g.mean_score,
                g.background_rate
            )
            .expect("write to string");
        }
    }
    out
}

/// Headline numbers per run, with deltas against `baseline` (an index into
/// `reports`). Missing groups and undefined correlations are empty cells.
pub fn comparison_csv(reports: &[NamedReport], baseline: usize) -> String {
    let cols = |r: &MetricsReport| -> [Option<f64>; 7] {
        [
            Some(r.overall_accuracy),
            Some(r.balanced_accuracy),
            r.group(Group::Rare).map(|g| g.accuracy),
            r.group(Group::Common).map(|g| g.accuracy),
            r.group(Group::Frequent).map(|g| g.accuracy),
            Some(r.score_dispersion),
            r.spearman,
        ]
    };
    let cell = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
    let names = [
        "overall_accuracy",
        "balanced_accuracy",
        "rare_accuracy",
        "common_accuracy",
        "frequent_accuracy",
        "score_dispersion",
        "spearman",
    ];
    let mut out = format!("config_digest,seed,variant,label,baseline,{}", names.join(","));
    for n in &names[..6] {
        write!(out, ",delta_{n}").expect("write to string");
    }
    out.push('\n');
    let base = cols(&reports[baseline].report);
    for nr in reports {
        let c = cols(&nr.report);
        write!(
            out,
            "{},{},{}",
            provenance_cells(&nr.report),
            nr.label,
            reports[baseline].label
        )
        .expect("write to string");
        for v in c {
            write!(out, ",{}", cell(v)).expect("write to string");
        }
        for (v, b) in c.iter().zip(&base).take(6) {
            let d = match (v, b) {
                (Some(v), Some(b)) => Some(v - b),
                _ => None,
            };
            write!(out, ",{}", cell(d)).expect("write to string");
        }
        out.push('\n');
    }
    out
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

struct Frame {
    width: f64,
    height: f64,
    left: f64,
    right: f64,
    top: f64,
    bottom: f64,
}

impl Frame {
    const fn standard() -> Self {
        Self {
            width: 760.0,
            height: 420.0,
            left: 60.0,
            right: 150.0,
            top: 40.0,
            bottom: 50.0,
        }
    }

    fn plot_w(&self) -> f64 {
        self.width - self.left - self.right
    }

    fn plot_h(&self) -> f64 {
        self.height - self.top - self.bottom
    }

    /// Maps a value in [0, 1] to the vertical pixel coordinate.
    fn y(&self, v: f64) -> f64 {
        self.top + (1.0 - v.clamp(0.0, 1.0)) * self.plot_h()
    }

    fn open(&self, out: &mut String, title: &str, provenance: &str) {
        writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#,
            w = self.width,
            h = self.height
        )
        .expect("write to string");
        writeln!(out, "<desc>{}</desc>", escape(provenance)).expect("write to string");
        writeln!(
            out,
            r#"<rect width="{}" height="{}" fill="white"/>"#,
            self.width, self.height
        )
        .expect("write to string");
        writeln!(
            out,
            r#"<text x="{:.1}" y="22" font-size="14" text-anchor="middle">{}</text>"#,
            self.left + self.plot_w() / 2.0,
            escape(title)
        )
        .expect("write to string");
        for k in 0..=4 {
            let v = k as f64 / 4.0;
            let y = self.y(v);
            writeln!(
                out,
                r##"<line x1="{:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#dddddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{v:.2}</text>"##,
                self.left,
                self.left + self.plot_w(),
                self.left - 6.0,
                y + 4.0
            )
            .expect("write to string");
        }
        writeln!(
            out,
            r#"<rect x="{}" y="{}" width="{:.1}" height="{:.1}" fill="none" stroke="black"/>"#,
            self.left,
            self.top,
            self.plot_w(),
            self.plot_h()
        )
        .expect("write to string");
    }

    fn legend(&self, out: &mut String, entries: &[(&str, &str)]) {
        let x = self.left + self.plot_w() + 14.0;
        for (i, (color, label)) in entries.iter().enumerate() {
            let y = self.top + 10.0 + 20.0 * i as f64;
            writeln!(
                out,
                r#"<rect x="{x:.1}" y="{:.1}" width="12" height="12" fill="{color}"/><text x="{:.1}" y="{:.1}">{}</text>"#,
                y - 10.0,
                x + 18.0,
                y,
                escape(label)
            )
            .expect("write to string");
        }
    }
}

fn provenance_text(r: &MetricsReport) -> String {
    format!(
        "config_digest={} seed={} variant={}",
        r.provenance.config_digest, r.provenance.seed, r.provenance.variant
    )
}

/// Mean score and accuracy against class rank (most frequent first), with
/// group boundaries marked.
pub fn class_curve_svg(nr: &NamedReport) -> String {
    let f = Frame::standard();
    let rows = sorted_by_train_count(&nr.report);
    let n = rows.len().max(1);
    let x = |i: usize| {
        if n == 1 {
            f.left + f.plot_w() / 2.0
        } else {
            f.left + f.plot_w() * i as f64 / (n - 1) as f64
        }
    };
    let mut out = String::new();
    f.open(
        &mut out,
        &format!("{}: mean score and accuracy by class rank", nr.label),
        &provenance_text(&nr.report),
    );
    for i in 1..rows.len() {
        if rows[i].group != rows[i - 1].group {
            let bx = (x(i - 1) + x(i)) / 2.0;
            writeln!(
                out,
                r##"<line x1="{bx:.1}" y1="{}" x2="{bx:.1}" y2="{:.1}" stroke="#999999" stroke-dasharray="4 3"/><text x="{:.1}" y="{:.1}" fill="#666666">{}</text>"##,
                f.top,
                f.top + f.plot_h(),
                bx + 4.0,
                f.top + 14.0,
                rows[i].group.as_str()
            )
            .expect("write to string");
        }
    }
    let series: [(&str, fn(&ClassRow) -> f64); 2] = [("mean score", |r| r.mean_score), ("accuracy", |r| r.accuracy)];
    for (k, (_, value)) in series.iter().enumerate() {
        let points: Vec<String> = rows
            .iter()
            .enumerate()
            .map(|(i, r)| format!("{:.1},{:.1}", x(i), f.y(value(r))))
            .collect();
        writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="1.5"/>"#,
            points.join(" "),
            PALETTE[k]
        )
        .expect("write to string");
    }
    writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">class rank by train count</text>"#,
        f.left + f.plot_w() / 2.0,
        f.height - 14.0
    )
    .expect("write to string");
    f.legend(&mut out, &[(PALETTE[0], series[0].0), (PALETTE[1], series[1].0)]);
    out.push_str("</svg>\n");
    out
}

/// Grouped bars: per-group accuracy for every run.
pub fn group_bars_svg(reports: &[NamedReport]) -> String {
    let f = Frame::standard();
    let mut out = String::new();
    let provenance: Vec<String> = reports.iter().map(|r| provenance_text(&r.report)).collect();
    f.open(&mut out, "accuracy by group", &provenance.join("; "));
    let slot = f.plot_w() / Group::ALL.len() as f64;
    let bar = slot * 0.8 / reports.len().max(1) as f64;
    for (gi, g) in Group::ALL.iter().enumerate() {
        let x0 = f.left + slot * gi as f64 + slot * 0.1;
        for (ri, nr) in reports.iter().enumerate() {
            if let Some(row) = nr.report.group(*g) {
                let y = f.y(row.accuracy);
                writeln!(
                    out,
                    r#"<rect x="{:.1}" y="{y:.1}" width="{:.1}" height="{:.1}" fill="{}"/>"#,
                    x0 + bar * ri as f64,
                    bar * 0.9,
                    f.top + f.plot_h() - y,
                    PALETTE[ri % PALETTE.len()]
                )
                .expect("write to string");
            }
        }
        writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            x0 + slot * 0.4,
            f.top + f.plot_h() + 18.0,
            g.as_str()
        )
        .expect("write to string");
    }
    let entries: Vec<(&str, &str)> = reports
        .iter()
        .enumerate()
        .map(|(i, r)| (PALETTE[i % PALETTE.len()], r.label.as_str()))
        .collect();
    f.legend(&mut out, &entries);
    out.push_str("</svg>\n");
    out
}

/// Writes `curve_<label>.csv` and `.svg` per report, then `groups.csv`,
/// `groups.svg` and `comparison.csv`. The baseline is the run labelled
/// `baseline` if given, else a run labelled `ce`, else the first.
pub fn render(reports: &[NamedReport], baseline: Option<&str>, out_dir: &Path) -> Result<Vec<PathBuf>> {
    if reports.is_empty() {
        return Err(Error::invalid("reports", "need at least one report"));
    }
    let base = match baseline {
        Some(name) => reports
            .iter()
            .position(|r| r.label == name)
            .ok_or_else(|| Error::invalid("baseline", format!("no report labelled `{name}`")))?,
        None => reports.iter().position(|r| r.label == "ce").unwrap_or(0),
    };
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    for nr in reports {
        written.push(write_file(
            out_dir,
            &format!("curve_{}.csv", nr.label),
            class_curve_csv(&nr.report).as_bytes(),
        )?);
        written.push(write_file(
            out_dir,
            &format!("curve_{}.svg", nr.label),
            class_curve_svg(nr).as_bytes(),
        )?);
    }
    written.push(write_file(out_dir, "groups.csv", group_table_csv(reports).as_bytes())?);
    written.push(write_file(out_dir, "groups.svg", group_bars_svg(reports).as_bytes())?);
    written.push(write_file(
        out_dir,
        "comparison.csv",
        comparison_csv(reports, base).as_bytes(),
    )?);
    Ok(written)
}
