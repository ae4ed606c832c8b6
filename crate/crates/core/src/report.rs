//! Per-dataset results, summary tables, reference comparison and charts.
//!
//! Raw values keep full precision everywhere. Rounding to two decimals
//! happens only when a number is displayed, via [`hundredths`].

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};

/// New-class minus base-class accuracy, in percentage points.
pub fn generalization_gap(base_acc: f64, new_acc: f64) -> f64 {
    new_acc - base_acc
}

/// Value rounded to the nearest hundredth, half away from zero, as an
/// integer count of hundredths. Float noise below 1e-6 hundredths is
/// snapped away first so that e.g. 1.425 computed as 1.42499999999 still
/// displays as 1.43.
pub fn hundredths(x: f64) -> i64 {
    let scaled = x * 100.0;
    let snapped = (scaled * 1e6).round() / 1e6;
    snapped.round() as i64
}

/// Two-decimal display form, e.g. `74.58`.
pub fn fmt2(x: f64) -> String {
    let h = hundredths(x);
    let sign = if h < 0 { "-" } else { "" };
    format!("{sign}{}.{:02}", h.abs() / 100, h.abs() % 100)
}

/// Two-decimal display form with explicit sign, e.g. `+1.43`, `-0.23`.
pub fn fmt2_signed(x: f64) -> String {
    let h = hundredths(x);
    match h.signum() {
        1 => format!("+{}", fmt2(x)),
        _ => fmt2(x),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalResult {
    pub dataset: String,
    pub base_acc: f64,
    pub new_acc: f64,
    pub gap: f64,
}

impl EvalResult {
    pub fn new(dataset: impl Into<String>, base_acc: f64, new_acc: f64) -> Result<Self> {
        for (what, v) in [("base", base_acc), ("new", new_acc)] {
            if !(0.0..=100.0).contains(&v) {
                return Err(Error::contract(format!("{what} accuracy {v} outside [0, 100]")));
            }
        }
        Ok(EvalResult {
            dataset: dataset.into(),
            base_acc,
            new_acc,
            gap: generalization_gap(base_acc, new_acc),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryTable {
    pub rows: Vec<EvalResult>,
    pub base_avg: f64,
    pub new_avg: f64,
    /// Mean of the per-dataset gaps.
    pub gap_avg: f64,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n as f64
}

pub fn summarize(results: &[EvalResult]) -> Result<SummaryTable> {
    if results.is_empty() {
        return Err(Error::contract("nothing to summarize"));
    }
    Ok(SummaryTable {
        rows: results.to_vec(),
        base_avg: mean(results.iter().map(|r| r.base_acc)),
        new_avg: mean(results.iter().map(|r| r.new_acc)),
        gap_avg: mean(results.iter().map(|r| r.gap)),
    })
}

/// One published row: original-method and replicated accuracies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceRow {
    pub dataset: &'static str,
    pub original_base: f64,
    pub ours_base: f64,
    pub original_new: f64,
    pub ours_new: f64,
}

/// Published per-dataset accuracies used as a reporting fixture.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceFixture {
    pub rows: Vec<ReferenceRow>,
}

const fn row(dataset: &'static str, ob: f64, b: f64, on: f64, n: f64) -> ReferenceRow {
    ReferenceRow {
        dataset,
        original_base: ob,
        ours_base: b,
        original_new: on,
        ours_new: n,
    }
}

pub const PUBLISHED_ROWS: [ReferenceRow; 6] = [
    row("Caltech101", 97.2, 96.84, 95.2, 95.41),
    row("Oxford Flowers", 70.8, 71.60, 78.7, 78.30),
    row("FGVC Aircraft", 31.5, 31.63, 35.7, 35.57),
    row("Oxford Pets", 94.9, 94.95, 94.5, 94.57),
    row("Food-101", 89.9, 89.82, 91.6, 91.65),
    row("DTD", 62.5, 62.62, 61.7, 60.51),
];

impl ReferenceFixture {
    pub fn published() -> Self {
        ReferenceFixture {
            rows: PUBLISHED_ROWS.to_vec(),
        }
    }

    pub fn original_results(&self) -> Result<Vec<EvalResult>> {
        self.rows
            .iter()
            .map(|r| EvalResult::new(r.dataset, r.original_base, r.original_new))
            .collect()
    }

    pub fn ours_results(&self) -> Result<Vec<EvalResult>> {
        self.rows
            .iter()
            .map(|r| EvalResult::new(r.dataset, r.ours_base, r.ours_new))
            .collect()
    }

    fn lookup(&self, dataset: &str) -> Result<&ReferenceRow> {
        self.rows
            .iter()
            .find(|r| r.dataset == dataset)
            .ok_or_else(|| Error::Lookup(format!("dataset `{dataset}` is not in the reference fixture")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeltaRow {
    pub dataset: String,
    pub reference_base: f64,
    pub base: f64,
    pub delta_base: f64,
    pub reference_new: f64,
    pub new: f64,
    pub delta_new: f64,
    pub reference_gap: f64,
    pub gap: f64,
    pub delta_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeltaTable {
    pub rows: Vec<DeltaRow>,
    pub average: DeltaRow,
}

/// Per-dataset and average differences, summary minus reference original.
pub fn compare_to_reference(summary: &SummaryTable, fixture: &ReferenceFixture) -> Result<DeltaTable> {
    let mut rows = Vec::with_capacity(summary.rows.len());
    let mut refs = Vec::with_capacity(summary.rows.len());
    for r in &summary.rows {
        let reference = fixture.lookup(&r.dataset)?;
        let ref_result = EvalResult::new(reference.dataset, reference.original_base, reference.original_new)?;
        rows.push(delta_row(&r.dataset, &ref_result, r.base_acc, r.new_acc, r.gap));
        refs.push(ref_result);
    }
    let ref_summary = summarize(&refs)?;
    let average = DeltaRow {
        dataset: "Average".into(),
        reference_base: ref_summary.base_avg,
        base: summary.base_avg,
        delta_base: summary.base_avg - ref_summary.base_avg,
        reference_new: ref_summary.new_avg,
        new: summary.new_avg,
        delta_new: summary.new_avg - ref_summary.new_avg,
        reference_gap: ref_summary.gap_avg,
        gap: summary.gap_avg,
        delta_gap: summary.gap_avg - ref_summary.gap_avg,
    };
    Ok(DeltaTable { rows, average })
}

fn delta_row(dataset: &str, reference: &EvalResult, base: f64, new: f64, gap: f64) -> DeltaRow {
    DeltaRow {
        dataset: dataset.to_string(),
        reference_base: reference.base_acc,
        base,
        delta_base: base - reference.base_acc,
        reference_new: reference.new_acc,
        new,
        delta_new: new - reference.new_acc,
        reference_gap: reference.gap,
        gap,
        delta_gap: gap - reference.gap,
    }
}

/// Plain-text rendering of a summary table.
pub fn render_summary(summary: &SummaryTable) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<16} {:>8} {:>8} {:>8}", "dataset", "base", "new", "gap");
    for r in &summary.rows {
        let _ = writeln!(
            out,
            "{:<16} {:>8} {:>8} {:>8}",
            r.dataset,
            fmt2(r.base_acc),
            fmt2(r.new_acc),
            fmt2_signed(r.gap)
        );
    }
    let _ = writeln!(
        out,
        "{:<16} {:>8} {:>8} {:>8}",
        "Average",
        fmt2(summary.base_avg),
        fmt2(summary.new_avg),
        fmt2_signed(summary.gap_avg)
    );
    out
}

/// Plain-text rendering of a delta table.
pub fn render_deltas(table: &DeltaTable) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<16} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}",
        "dataset", "ref base", "base", "d base", "ref new", "new", "d new", "gap"
    );
    for r in table.rows.iter().chain(std::iter::once(&table.average)) {
        let _ = writeln!(
            out,
            "{:<16} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}",
            r.dataset,
            fmt2(r.reference_base),
            fmt2(r.base),
            fmt2_signed(r.delta_base),
            fmt2(r.reference_new),
            fmt2(r.new),
            fmt2_signed(r.delta_new),
            fmt2_signed(r.gap)
        );
    }
    out
}

/// CSV with one row per dataset: `name,base,new,gap`, two decimals.
pub fn write_csv(path: &Path, results: &[EvalResult]) -> Result<()> {
    let file_err = |e: csv::Error| Error::file(path, std::io::Error::other(e.to_string()));
    let mut w = csv::Writer::from_path(path).map_err(file_err)?;
    w.write_record(["name", "base", "new", "gap"]).map_err(file_err)?;
    for r in results {
        w.write_record([r.dataset.clone(), fmt2(r.base_acc), fmt2(r.new_acc), fmt2_signed(r.gap)])
            .map_err(file_err)?;
    }
    w.flush().map_err(|e| Error::file(path, e))
}

#[derive(Serialize)]
struct Display2 {
    base: String,
    new: String,
    gap: String,
}

#[derive(Serialize)]
struct JsonRow<'a> {
    #[serde(flatten)]
    raw: &'a EvalResult,
    display: Display2,
}

#[derive(Serialize)]
struct JsonSummary<'a> {
    results: Vec<JsonRow<'a>>,
    base_avg: f64,
    new_avg: f64,
    gap_avg: f64,
    display: Display2,
    #[serde(skip_serializing_if = "Option::is_none")]
    comparison: Option<&'a DeltaTable>,
}

pub fn summary_json(summary: &SummaryTable, comparison: Option<&DeltaTable>) -> Result<String> {
    let doc = JsonSummary {
        results: summary
            .rows
            .iter()
            .map(|r| JsonRow {
                raw: r,
                display: Display2 {
                    base: fmt2(r.base_acc),
                    new: fmt2(r.new_acc),
                    gap: fmt2_signed(r.gap),
                },
            })
            .collect(),
        base_avg: summary.base_avg,
        new_avg: summary.new_avg,
        gap_avg: summary.gap_avg,
        display: Display2 {
            base: fmt2(summary.base_avg),
            new: fmt2(summary.new_avg),
            gap: fmt2_signed(summary.gap_avg),
        },
        comparison,
    };
    serde_json::to_string_pretty(&doc).map_err(|e| Error::contract(e.to_string()))
}

/// Reads a results CSV written by [`write_csv`].
pub fn read_csv(path: &Path) -> Result<Vec<EvalResult>> {
    let file_err = |e: csv::Error| Error::file(path, std::io::Error::other(e.to_string()));
    let mut r = csv::Reader::from_path(path).map_err(file_err)?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(file_err)?;
        let field = |j: usize| -> Result<f64> {
            rec.get(j)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| Error::Data {
                    row: i,
                    message: format!("column {j} is not a number"),
                })
        };
        let name = rec.get(0).unwrap_or_default().to_string();
        let result = EvalResult::new(name, field(1)?, field(2)?).map_err(|e| Error::Data {
            row: i,
            message: e.to_string(),
        })?;
        out.push(result);
    }
    Ok(out)
}

const BASE_COLOR: &str = "#1f77b4";
const NEW_COLOR: &str = "#ff7f0e";
const POS_COLOR: &str = "#2ca02c";
const NEG_COLOR: &str = "#d62728";

fn svg_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Grouped bars of error rate (100 − accuracy) per dataset and split.
pub fn error_rate_svg(results: &[EvalResult]) -> Result<String> {
    if results.is_empty() {
        return Err(Error::contract("no results to chart"));
    }
    let (w, h, left, bottom, top) = (120 * results.len() + 80, 360usize, 60usize, 60usize, 40usize);
    let plot_h = (h - bottom - top) as f64;
    let max_err = results
        .iter()
        .flat_map(|r| [100.0 - r.base_acc, 100.0 - r.new_acc])
        .fold(10.0f64, f64::max);
    let y_max = (max_err / 10.0).ceil() * 10.0;
    let y = |v: f64| top as f64 + plot_h * (1.0 - v / y_max);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="16">Error rate by dataset and split</text>"#, w / 2);
    let _ = writeln!(s, r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{}" stroke="black"/>"#, h - bottom);
    let _ = writeln!(s, r#"<line x1="{left}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, h - bottom, w - 20, h - bottom);
    for tick in 0..=((y_max / 10.0) as usize) {
        let v = tick as f64 * 10.0;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.2}" text-anchor="end" font-size="10">{v:.0}%</text>"#,
            left - 4,
            y(v) + 3.0
        );
    }
    for (i, r) in results.iter().enumerate() {
        let x0 = left + 20 + i * 120;
        for (j, (acc, color, split)) in [(r.base_acc, BASE_COLOR, "base"), (r.new_acc, NEW_COLOR, "new")]
            .into_iter()
            .enumerate()
        {
            let err = 100.0 - acc;
            let _ = writeln!(
                s,
                r#"<rect class="{split}" data-error="{}" x="{}" y="{:.2}" width="40" height="{:.2}" fill="{color}"/>"#,
                fmt2(err),
                x0 + j * 42,
                y(err),
                y(0.0) - y(err)
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle" font-size="11">{}</text>"#,
            x0 + 41,
            h - bottom + 16,
            svg_escape(&r.dataset)
        );
    }
    let _ = writeln!(s, r#"<rect x="{}" y="36" width="12" height="12" fill="{BASE_COLOR}"/><text x="{}" y="46" font-size="11">base</text>"#, w - 150, w - 134);
    let _ = writeln!(s, r#"<rect x="{}" y="36" width="12" height="12" fill="{NEW_COLOR}"/><text x="{}" y="46" font-size="11">new</text>"#, w - 90, w - 74);
    s.push_str("</svg>\n");
    Ok(s)
}

/// Signed bars of the generalization gap; positive and negative bars
/// use different colors.
pub fn gap_svg(results: &[EvalResult]) -> Result<String> {
    if results.is_empty() {
        return Err(Error::contract("no results to chart"));
    }
    let (w, h, left, top) = (100 * results.len() + 80, 360usize, 60usize, 40usize);
    let plot_h = (h - top - 60) as f64;
    let extent = results.iter().map(|r| r.gap.abs()).fold(1.0f64, f64::max).ceil();
    let y = |v: f64| top as f64 + plot_h * (0.5 - v / (2.0 * extent));
    let zero = y(0.0);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="16">Generalization gap (new - base)</text>"#, w / 2);
    let _ = writeln!(s, r#"<line x1="{left}" y1="{zero:.2}" x2="{}" y2="{zero:.2}" stroke="black"/>"#, w - 20);
    for (i, r) in results.iter().enumerate() {
        let x0 = left + 20 + i * 100;
        let (color, class) = if r.gap >= 0.0 { (POS_COLOR, "positive") } else { (NEG_COLOR, "negative") };
        let (top_y, height) = if r.gap >= 0.0 { (y(r.gap), zero - y(r.gap)) } else { (zero, y(r.gap) - zero) };
        let _ = writeln!(
            s,
            r#"<rect class="{class}" x="{x0}" y="{top_y:.2}" width="60" height="{height:.2}" fill="{color}"/>"#
        );
        let label_y = if r.gap >= 0.0 { top_y - 4.0 } else { top_y + height + 12.0 };
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{label_y:.2}" text-anchor="middle" font-size="11">{}</text>"#,
            x0 + 30,
            fmt2_signed(r.gap)
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle" font-size="11">{}</text>"#,
            x0 + 30,
            h - 30,
            svg_escape(&r.dataset)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

pub const ERROR_CHART: &str = "error_rates.svg";
pub const GAP_CHART: &str = "generalization_gap.svg";

/// Writes both charts into `dir` and returns their paths.
pub fn emit_charts(results: &[EvalResult], dir: &Path) -> Result<(PathBuf, PathBuf)> {
    let errors = error_rate_svg(results)?;
    let gaps = gap_svg(results)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    let p1 = dir.join(ERROR_CHART);
    let p2 = dir.join(GAP_CHART);
    std::fs::write(&p1, errors).map_err(|e| Error::file(&p1, e))?;
    std::fs::write(&p2, gaps).map_err(|e| Error::file(&p2, e))?;
    Ok((p1, p2))
}
