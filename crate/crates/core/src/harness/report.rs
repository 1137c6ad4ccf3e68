//! CSV tables, a text summary and log-log SVG charts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::record::{write_records_csv, RunRecord};
use crate::cbs_fit::{
    critical_batch, forecast, relative_steps, CbsLawFit, CriticalBatch, StepLawFit, StepObservation,
};
use crate::{Error, Result};

/// Everything a report can contain; absent parts are skipped.
#[derive(Debug, Clone, Default)]
pub struct ReportInput {
    pub records: Vec<RunRecord>,
    pub observations: Vec<StepObservation>,
    /// Relative steps are `steps(B) / steps(reference)`.
    pub reference_batch: Option<u64>,
    pub step_fit: Option<StepLawFit>,
    pub critical: Option<CriticalBatch>,
    /// `(scale, B*)` points.
    pub cbs_points: Vec<(f64, f64)>,
    pub cbs_fit: Option<CbsLawFit>,
    pub critical_table: Vec<CriticalRow>,
    pub svg: bool,
}

/// One row of a critical-batch table.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct CriticalRow {
    pub label: String,
    pub a: f64,
    pub b: f64,
    pub alpha: f64,
    pub b_opt: f64,
    pub overhead: f64,
    pub critical_batch: f64,
    pub log2_critical_batch: f64,
}

impl CriticalRow {
    pub fn compute(label: &str, fit: &StepLawFit, b_opt: f64, overhead: f64) -> Result<Self> {
        let c = critical_batch(fit, b_opt, overhead)?;
        Ok(Self {
            label: label.into(),
            a: fit.a,
            b: fit.b,
            alpha: fit.alpha,
            b_opt,
            overhead,
            critical_batch: c.batch,
            log2_critical_batch: c.log2,
        })
    }
}

#[derive(Serialize)]
struct RelativeRow {
    batch: u64,
    steps: f64,
    reference_batch: u64,
    relative_steps: f64,
    linear_scaling: f64,
}

#[derive(Serialize)]
struct CbsRow {
    kind: &'static str,
    scale: f64,
    critical_batch: f64,
}

#[derive(Serialize)]
struct FitSampleRow {
    batch: f64,
    steps: f64,
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(f))
}

fn write_rows<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<()> {
    let mut w = csv_writer(path)?;
    if rows.is_empty() {
        w.write_record(header)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `n` points spaced evenly in log between `lo` and `hi`.
pub fn log_space(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n <= 1 {
        return vec![lo];
    }
    let (l, h) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| (l + (h - l) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

/// Writes the report files into `dir` and returns their paths.
pub fn emit_report(input: &ReportInput, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();

    let path = dir.join("records.csv");
    let f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    write_records_csv(f, &input.records)?;
    written.push(path);

    if !input.observations.is_empty() {
        let reference = input.reference_batch.unwrap_or_else(|| {
            input
                .observations
                .iter()
                .map(|o| o.batch)
                .min()
                .expect("nonempty")
        });
        let rel = relative_steps(&input.observations, reference)?;
        let rows: Vec<RelativeRow> = input
            .observations
            .iter()
            .zip(rel)
            .map(|(o, (b, r))| RelativeRow {
                batch: b,
                steps: o.steps,
                reference_batch: reference,
                relative_steps: r,
                linear_scaling: reference as f64 / b as f64,
            })
            .collect();
        let path = dir.join("relative_steps.csv");
        write_rows(&path, &[], &rows)?;
        written.push(path);
    }

    if let Some(fit) = &input.step_fit {
        let (lo, hi) = batch_span(&input.observations);
        let rows: Vec<FitSampleRow> = log_space(lo, hi, 64)
            .into_iter()
            .map(|b| FitSampleRow {
                batch: b,
                steps: fit.steps_at(b),
            })
            .collect();
        let path = dir.join("step_fit.csv");
        write_rows(&path, &["batch", "steps"], &rows)?;
        written.push(path);
    }

    if !input.cbs_points.is_empty() || input.cbs_fit.is_some() {
        let mut rows: Vec<CbsRow> = input
            .cbs_points
            .iter()
            .map(|&(s, b)| CbsRow {
                kind: "point",
                scale: s,
                critical_batch: b,
            })
            .collect();
        if let Some(fit) = &input.cbs_fit {
            let lo = input
                .cbs_points
                .iter()
                .map(|p| p.0)
                .fold(f64::INFINITY, f64::min);
            let hi = input.cbs_points.iter().map(|p| p.0).fold(0.0, f64::max);
            let (lo, hi) = if lo.is_finite() {
                (lo, 4.0 * hi)
            } else {
                (1.0, 1e4)
            };
            rows.extend(log_space(lo, hi, 64).into_iter().map(|s| CbsRow {
                kind: "fit",
                scale: s,
                critical_batch: forecast(fit, s),
            }));
        }
        let path = dir.join("cbs_scaling.csv");
        write_rows(&path, &["kind", "scale", "critical_batch"], &rows)?;
        written.push(path);
    }

    if !input.critical_table.is_empty() {
        let path = dir.join("critical_batch.csv");
        write_rows(&path, &[], &input.critical_table)?;
        written.push(path);
    }

    let path = dir.join("summary.txt");
    fs::write(&path, summary(input)).map_err(|e| Error::io(&path, e))?;
    written.push(path);

    if input.svg && !input.observations.is_empty() {
        let mut series = vec![Series {
            name: "measured".into(),
            points: input
                .observations
                .iter()
                .map(|o| (o.batch as f64, o.steps))
                .collect(),
            markers: true,
        }];
        if let Some(fit) = &input.step_fit {
            let (lo, hi) = batch_span(&input.observations);
            series.push(Series {
                name: "fit".into(),
                points: log_space(lo, hi, 64)
                    .into_iter()
                    .map(|b| (b, fit.steps_at(b)))
                    .collect(),
                markers: false,
            });
        }
        let path = dir.join("steps_vs_batch.svg");
        let svg = loglog_svg(
            "steps to target vs batch size",
            "batch size",
            "steps",
            &series,
        );
        fs::write(&path, svg).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

fn batch_span(obs: &[StepObservation]) -> (f64, f64) {
    let lo = obs
        .iter()
        .map(|o| o.batch as f64)
        .fold(f64::INFINITY, f64::min);
    let hi = obs.iter().map(|o| o.batch as f64).fold(0.0, f64::max);
    if lo.is_finite() {
        (lo, hi)
    } else {
        (1.0, 1024.0)
    }
}

/// Plain-text summary of the report contents.
pub fn summary(input: &ReportInput) -> String {
    let mut s = String::new();
    let reached = input
        .records
        .iter()
        .filter(|r| r.outcome.steps().is_some())
        .count();
    let _ = writeln!(
        s,
        "runs: {} ({} reached target)",
        input.records.len(),
        reached
    );
    if !input.observations.is_empty() {
        let _ = writeln!(s, "best steps per batch size:");
        for o in &input.observations {
            let _ = writeln!(s, "  B={:<8} steps={:.1}", o.batch, o.steps);
        }
        let _ = writeln!(
            s,
            "steps are recorded at evaluation points, not interpolated"
        );
    }
    if let Some(f) = &input.step_fit {
        let _ = writeln!(
            s,
            "step law: Y = {:.6e} + {:.6e} / B^{:.4} (rss {:.3e}, converged {})",
            f.a, f.b, f.alpha, f.rss, f.converged
        );
    }
    if let Some(c) = &input.critical {
        let _ = writeln!(
            s,
            "critical batch size: {:.2} (log2 {:.4})",
            c.batch, c.log2
        );
    }
    if let Some(f) = &input.cbs_fit {
        let _ = writeln!(
            s,
            "CBS law: B* = {:.4} + {:.4} * S^{:.4}",
            f.constant, f.coefficient, f.exponent
        );
    }
    for r in &input.critical_table {
        let _ = writeln!(
            s,
            "  {}: B* = {:.2}, log2 = {:.2}",
            r.label, r.critical_batch, r.log2_critical_batch
        );
    }
    s
}

#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    pub markers: bool,
}

/// A minimal line chart with log-scaled axes.
pub fn loglog_svg(title: &str, xlabel: &str, ylabel: &str, series: &[Series]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 440.0;
    const L: f64 = 70.0;
    const R: f64 = 20.0;
    const T: f64 = 40.0;
    const B: f64 = 50.0;
    const COLORS: [&str; 6] = [
        "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf",
    ];

    let pts = series
        .iter()
        .flat_map(|s| s.points.iter())
        .filter(|(x, y)| *x > 0.0 && *y > 0.0);
    let (mut x0, mut x1, mut y0, mut y1) = (
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
    );
    for &(x, y) in pts {
        x0 = x0.min(x.log10());
        x1 = x1.max(x.log10());
        y0 = y0.min(y.log10());
        y1 = y1.max(y.log10());
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    let (x0, x1) = (x0.floor(), x1.ceil().max(x0.floor() + 1.0));
    let (y0, y1) = (y0.floor(), y1.ceil().max(y0.floor() + 1.0));
    let px = |x: f64| L + (x.log10() - x0) / (x1 - x0) * (W - L - R);
    let py = |y: f64| H - B - (y.log10() - y0) / (y1 - y0) * (H - T - B);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<rect x="{L}" y="{T}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        W - L - R,
        H - T - B
    );
    for e in x0 as i32..=x1 as i32 {
        let x = px(10f64.powi(e));
        let _ = writeln!(
            s,
            r##"<line x1="{x:.1}" y1="{T}" x2="{x:.1}" y2="{}" stroke="#ddd"/>"##,
            H - B
        );
        let _ = writeln!(
            s,
            r#"<text x="{x:.1}" y="{}" text-anchor="middle">1e{e}</text>"#,
            H - B + 16.0
        );
    }
    for e in y0 as i32..=y1 as i32 {
        let y = py(10f64.powi(e));
        let _ = writeln!(
            s,
            r##"<line x1="{L}" y1="{y:.1}" x2="{}" y2="{y:.1}" stroke="#ddd"/>"##,
            W - R
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.1}" text-anchor="end">1e{e}</text>"#,
            L - 6.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        (L + W - R) / 2.0,
        H - 12.0,
        escape(xlabel)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{0}" text-anchor="middle" transform="rotate(-90 16 {0})">{1}</text>"#,
        (T + H - B) / 2.0,
        escape(ylabel)
    );
    for (i, ser) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let coords: Vec<String> = ser
            .points
            .iter()
            .filter(|(x, y)| *x > 0.0 && *y > 0.0)
            .map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            coords.join(" ")
        );
        if ser.markers {
            for c in &coords {
                let (cx, cy) = c.split_once(',').expect("formatted pair");
                let _ = writeln!(s, r#"<circle cx="{cx}" cy="{cy}" r="3" fill="{color}"/>"#);
            }
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{color}">{}</text>"#,
            L + 10.0,
            T + 16.0 + 14.0 * i as f64,
            escape(&ser.name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::record::read_records_csv;

    #[test]
    fn empty_report_has_header_only_records() {
        let dir = tempfile::tempdir().unwrap();
        let files = emit_report(&ReportInput::default(), dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join("records.csv")).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(files.iter().any(|p| p.ends_with("summary.txt")));
        assert!(!dir.path().join("relative_steps.csv").exists());
    }

    #[test]
    fn critical_table_roundtrip() {
        let table: Vec<CriticalRow> = [(0.02, 2.7), (0.01, 2.0)]
            .iter()
            .map(|&(a, b)| {
                CriticalRow::compute("x", &StepLawFit::from_params(a, b, 1.0), 1.0, 0.2).unwrap()
            })
            .collect();
        // (1+ρ)·B_opt + ρ·b/a with B_opt = 1.
        assert!((table[0].critical_batch - (1.2 + 0.2 * 135.0)).abs() < 1e-9);
        assert!((table[1].critical_batch - (1.2 + 0.2 * 200.0)).abs() < 1e-9);
        let dir = tempfile::tempdir().unwrap();
        let input = ReportInput {
            critical_table: table,
            ..Default::default()
        };
        emit_report(&input, dir.path()).unwrap();
        let mut rd = csv::Reader::from_path(dir.path().join("critical_batch.csv")).unwrap();
        let back: Vec<CriticalRow> = rd.deserialize().map(|r| r.unwrap()).collect();
        assert_eq!(back, input.critical_table);
    }

    #[test]
    fn svg_and_relative_steps() {
        let obs: Vec<StepObservation> = [(4u64, 1000.0), (8, 520.0), (16, 300.0), (32, 250.0)]
            .iter()
            .map(|&(b, s)| StepObservation::new(b, s))
            .collect();
        let fit = StepLawFit::from_params(200.0, 3200.0, 1.0);
        let dir = tempfile::tempdir().unwrap();
        let input = ReportInput {
            observations: obs,
            reference_batch: Some(8),
            step_fit: Some(fit),
            svg: true,
            ..Default::default()
        };
        emit_report(&input, dir.path()).unwrap();
        let svg = fs::read_to_string(dir.path().join("steps_vs_batch.svg")).unwrap();
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<circle").count(), 4);
        let rel = fs::read_to_string(dir.path().join("relative_steps.csv")).unwrap();
        assert!(rel.lines().nth(2).unwrap().starts_with("8,520.0,8,1.0,1.0"));
    }

    #[test]
    fn records_csv_roundtrip_through_report() {
        use crate::harness::record::{Outcome, RunModule};
        let records = vec![RunRecord {
            run_id: "r1".into(),
            module: RunModule::SgdSim,
            spec_hash: "h".into(),
            model_size: None,
            data_size: Some(4096),
            batch_size: 8,
            lr: 0.125,
            ewa_decay: None,
            beta2: None,
            seed: 3,
            outcome: Outcome::ExcessRisk { value: 0.0116 },
            wall_time_s: 0.5,
        }];
        let dir = tempfile::tempdir().unwrap();
        emit_report(
            &ReportInput {
                records: records.clone(),
                ..Default::default()
            },
            dir.path(),
        )
        .unwrap();
        let f = fs::File::open(dir.path().join("records.csv")).unwrap();
        assert_eq!(read_records_csv(f).unwrap(), records);
    }
}
