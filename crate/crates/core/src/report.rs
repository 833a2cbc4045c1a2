//! Report artifacts.
//!
//! A report directory holds `sweeps.csv`, `curves.svg`, `tokens.md` and
//! `run.json`. Every emitter is a pure function of its inputs, so identical
//! inputs give identical bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{best_layer, MetricName, SweepPoint, SweepResult, TokenFrequencyTable};
use crate::prompts::Condition;

pub const CSV_HEADER: &str = "task_tag,condition,layer,metric,score";
pub const REPORT_FORMAT: &str = "layerprobe-report/1";

/// Identity stamped into the SVG and markdown outputs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub toolkit_version: String,
    pub config_hash: String,
    pub global_seed: u64,
}

impl Provenance {
    pub fn new(config_hash: &str, global_seed: u64) -> Self {
        Self {
            toolkit_version: crate::TOOLKIT_VERSION.into(),
            config_hash: config_hash.into(),
            global_seed,
        }
    }

    fn comment(&self) -> String {
        format!(
            "<!-- {} config_hash={} global_seed={} -->",
            self.toolkit_version, self.config_hash, self.global_seed
        )
    }
}

fn condition_str(c: Option<Condition>) -> &'static str {
    c.map(Condition::as_str).unwrap_or("")
}

fn parse_condition(s: &str) -> Result<Option<Condition>> {
    match s {
        "" => Ok(None),
        "WithCat" => Ok(Some(Condition::WithCat)),
        "NoCat" => Ok(Some(Condition::NoCat)),
        other => Err(Error::Format(format!("unknown condition {other:?}"))),
    }
}

fn non_empty<T>(items: &[T], what: &str) -> Result<()> {
    if items.is_empty() {
        return Err(Error::Precondition(format!("no {what} to report")));
    }
    Ok(())
}

/// One row per sweep point. Scores carry 17 significant digits, enough to
/// reconstruct every `f64` exactly.
pub fn render_csv(sweeps: &[SweepResult]) -> Result<String> {
    non_empty(sweeps, "sweeps")?;
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for s in sweeps {
        if s.task_tag.contains([',', '"', '\n', '\r']) {
            return Err(Error::Invalid(format!("task tag {:?} is not CSV-safe", s.task_tag)));
        }
        for p in &s.points {
            writeln!(
                out,
                "{},{},{},{},{:.16e}",
                s.task_tag,
                condition_str(s.condition),
                p.layer,
                s.metric_name.as_str(),
                p.score
            )
            .unwrap();
        }
    }
    Ok(out)
}

/// Inverse of [`render_csv`]: consecutive rows with the same task, condition
/// and metric form one sweep.
pub fn parse_csv(text: &str) -> Result<Vec<SweepResult>> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::Format("missing sweeps.csv header".into()));
    }
    let mut out: Vec<SweepResult> = Vec::new();
    for (n, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        let [task, cond, layer, metric, score] = fields[..] else {
            return Err(Error::Format(format!("line {}: expected 5 fields", n + 2)));
        };
        let condition = parse_condition(cond)?;
        let metric_name =
            MetricName::parse(metric).ok_or_else(|| Error::Format(format!("unknown metric {metric:?}")))?;
        let point = SweepPoint {
            layer: layer
                .parse()
                .map_err(|_| Error::Format(format!("line {}: bad layer {layer:?}", n + 2)))?,
            score: score
                .parse()
                .map_err(|_| Error::Format(format!("line {}: bad score {score:?}", n + 2)))?,
        };
        match out.last_mut() {
            Some(s) if s.task_tag == task && s.condition == condition && s.metric_name == metric_name => {
                s.points.push(point)
            }
            _ => out.push(SweepResult {
                task_tag: task.into(),
                condition,
                metric_name,
                points: vec![point],
            }),
        }
    }
    out.into_iter()
        .map(|s| SweepResult::new(s.task_tag, s.condition, s.metric_name, s.points))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChartStyle {
    pub width: u32,
    pub height: u32,
    pub title: String,
    pub palette: Vec<String>,
}

impl Default for ChartStyle {
    fn default() -> Self {
        Self {
            width: 720,
            height: 420,
            title: String::new(),
            palette: ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"]
                .map(String::from)
                .to_vec(),
        }
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn sweep_label(s: &SweepResult) -> String {
    match s.condition {
        Some(c) => format!("{} {} ({})", s.task_tag, c.as_str(), s.metric_name.as_str()),
        None => format!("{} ({})", s.task_tag, s.metric_name.as_str()),
    }
}

/// A standalone SVG line chart with one `<polyline>` per sweep on a shared
/// layer axis and a `[0, 1]` score axis.
pub fn render_svg(sweeps: &[SweepResult], style: &ChartStyle, provenance: &Provenance) -> Result<String> {
    non_empty(sweeps, "sweeps")?;
    let layers = || sweeps.iter().flat_map(|s| s.points.iter().map(|p| p.layer));
    let lo = layers().min().unwrap_or(1) as f64;
    let hi = layers().max().unwrap_or(1) as f64;
    let span = (hi - lo).max(1.0);
    let (w, h) = (style.width as f64, style.height as f64);
    let (left, right, top, bottom) = (60.0, 190.0, 30.0, 50.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let x = |layer: f64| left + (layer - lo) / span * pw;
    let y = |score: f64| top + (1.0 - score) * ph;

    let mut o = String::new();
    writeln!(
        o,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" viewBox="0 0 {} {}" font-family="sans-serif" font-size="12">"#,
        style.width, style.height, style.width, style.height
    )
    .unwrap();
    writeln!(o, "{}", provenance.comment()).unwrap();
    writeln!(o, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    if !style.title.is_empty() {
        writeln!(o, r#"<text x="{:.2}" y="18" text-anchor="middle">{}</text>"#, left + pw / 2.0, xml_escape(&style.title)).unwrap();
    }
    // Axes.
    writeln!(
        o,
        r#"<path d="M{:.2} {:.2} V{:.2} H{:.2}" stroke="black" fill="none"/>"#,
        left,
        top,
        top + ph,
        left + pw
    )
    .unwrap();
    for i in 0..=5 {
        let s = i as f64 / 5.0;
        writeln!(
            o,
            r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="lightgray"/><text x="{:.2}" y="{:.2}" text-anchor="end">{:.1}</text>"#,
            left,
            y(s),
            left + pw,
            y(s),
            left - 6.0,
            y(s) + 4.0,
            s
        )
        .unwrap();
    }
    let step = ((hi - lo) / 12.0).ceil().max(1.0) as usize;
    for layer in (lo as u16..=hi as u16).step_by(step) {
        writeln!(
            o,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            x(layer as f64),
            top + ph + 16.0,
            layer
        )
        .unwrap();
    }
    writeln!(o, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">Layer</text>"#, left + pw / 2.0, h - 10.0).unwrap();
    writeln!(
        o,
        r#"<text transform="translate(16 {:.2}) rotate(-90)" text-anchor="middle">score</text>"#,
        top + ph / 2.0
    )
    .unwrap();
    for (i, s) in sweeps.iter().enumerate() {
        let colour = &style.palette[i % style.palette.len().max(1)];
        let points: Vec<String> = s
            .points
            .iter()
            .map(|p| format!("{:.2},{:.2}", x(p.layer as f64), y(p.score)))
            .collect();
        writeln!(
            o,
            r#"<polyline fill="none" stroke="{}" stroke-width="2" points="{}"/>"#,
            colour,
            points.join(" ")
        )
        .unwrap();
        let ly = top + 10.0 + 18.0 * i as f64;
        writeln!(
            o,
            r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{}" stroke-width="2"/><text x="{:.2}" y="{:.2}">{}</text>"#,
            left + pw + 12.0,
            ly,
            left + pw + 32.0,
            ly,
            colour,
            left + pw + 38.0,
            ly + 4.0,
            xml_escape(&sweep_label(s))
        )
        .unwrap();
    }
    o.push_str("</svg>\n");
    Ok(o)
}

/// `.dddd` for values below one, `1.0000` otherwise.
pub fn format_frequency(f: f64) -> String {
    let s = format!("{f:.4}");
    match s.strip_prefix("0.") {
        Some(rest) => format!(".{rest}"),
        None => s,
    }
}

fn table_heading(t: &TokenFrequencyTable) -> String {
    let cond = match t.condition {
        Some(Condition::NoCat) => "Prompt without categories, ",
        Some(Condition::WithCat) => "Prompt with categories, ",
        None => "",
    };
    let split = match t.split {
        crate::metrics::CaseSplit::Positive => "pos. set",
        crate::metrics::CaseSplit::Negative => "neg. set",
    };
    format!("{cond}{split}")
}

/// Side-by-side token tables, one token/frequency column pair per table, with
/// a final `OTHERS` row.
pub fn render_markdown_tokens(tables: &[TokenFrequencyTable], provenance: &Provenance) -> Result<String> {
    non_empty(tables, "token tables")?;
    let mut o = String::new();
    writeln!(o, "{}", provenance.comment()).unwrap();
    writeln!(o).unwrap();
    let heads: Vec<String> = tables
        .iter()
        .map(|t| format!(" {} (n={}) | |", table_heading(t), t.total))
        .collect();
    writeln!(o, "|{}", heads.concat()).unwrap();
    writeln!(o, "|{}", "---|---:|".repeat(tables.len())).unwrap();
    writeln!(o, "|{}", " **Token** | **Freq.** |".repeat(tables.len())).unwrap();
    let depth = tables.iter().map(|t| t.rows.len()).max().unwrap_or(0);
    for r in 0..depth {
        let cells: Vec<String> = tables
            .iter()
            .map(|t| match t.rows.get(r) {
                Some(row) => format!(" {} | {} |", markdown_escape(&row.token), format_frequency(row.frequency)),
                None => "  |  |".to_string(),
            })
            .collect();
        writeln!(o, "|{}", cells.concat()).unwrap();
    }
    let others: Vec<String> = tables
        .iter()
        .map(|t| format!(" `OTHERS` | {} |", format_frequency(t.others_mass)))
        .collect();
    writeln!(o, "|{}", others.concat()).unwrap();
    Ok(o)
}

fn markdown_escape(token: &str) -> String {
    let t = token.replace('|', "\\|");
    if t.trim().is_empty() {
        format!("`{t}`")
    } else {
        t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestLayer {
    pub task_tag: String,
    pub condition: Option<Condition>,
    pub metric_name: MetricName,
    pub layer: u16,
    pub score: f64,
}

/// Everything a report directory says, in machine-readable form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub format: String,
    pub run_id: String,
    #[serde(flatten)]
    pub provenance: Provenance,
    pub corpus_hash: Option<String>,
    pub dataset_hashes: BTreeMap<String, String>,
    /// Feature run directory name to SHA-256 of its manifest.
    pub manifest_hashes: BTreeMap<String, String>,
    pub config: serde_json::Value,
    pub sweeps: Vec<SweepResult>,
    pub best_layers: Vec<BestLayer>,
    pub token_tables: Vec<TokenFrequencyTable>,
}

impl RunReport {
    pub fn new(run_id: &str, provenance: Provenance, config: serde_json::Value, sweeps: Vec<SweepResult>) -> Result<Self> {
        let best_layers = sweeps
            .iter()
            .map(|s| {
                best_layer(s).map(|p| BestLayer {
                    task_tag: s.task_tag.clone(),
                    condition: s.condition,
                    metric_name: s.metric_name,
                    layer: p.layer,
                    score: p.score,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            format: REPORT_FORMAT.into(),
            run_id: run_id.into(),
            provenance,
            corpus_hash: None,
            dataset_hashes: BTreeMap::new(),
            manifest_hashes: BTreeMap::new(),
            config,
            sweeps,
            best_layers,
            token_tables: Vec::new(),
        })
    }
}

/// Paths of the files written by [`write_report`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ReportFiles {
    pub dir: PathBuf,
    pub csv: PathBuf,
    pub svg: PathBuf,
    pub tokens: Option<PathBuf>,
    pub run_json: PathBuf,
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `{root}/report/{run_id}/…`. `tokens.md` is only written when the
/// report carries token tables.
pub fn write_report(root: &Path, report: &RunReport, style: &ChartStyle) -> Result<ReportFiles> {
    let dir = root.join("report").join(&report.run_id);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let files = ReportFiles {
        csv: dir.join("sweeps.csv"),
        svg: dir.join("curves.svg"),
        tokens: (!report.token_tables.is_empty()).then(|| dir.join("tokens.md")),
        run_json: dir.join("run.json"),
        dir,
    };
    write(&files.csv, render_csv(&report.sweeps)?.as_bytes())?;
    write(&files.svg, render_svg(&report.sweeps, style, &report.provenance)?.as_bytes())?;
    if let Some(path) = &files.tokens {
        write(path, render_markdown_tokens(&report.token_tables, &report.provenance)?.as_bytes())?;
    }
    let mut json = serde_json::to_vec_pretty(report)?;
    json.push(b'\n');
    write(&files.run_json, &json)?;
    Ok(files)
}

pub fn emit_csv(sweeps: &[SweepResult], path: &Path) -> Result<()> {
    write(path, render_csv(sweeps)?.as_bytes())
}

pub fn emit_svg_linechart(sweeps: &[SweepResult], style: &ChartStyle, provenance: &Provenance, path: &Path) -> Result<()> {
    write(path, render_svg(sweeps, style, provenance)?.as_bytes())
}

pub fn emit_markdown_tokens(tables: &[TokenFrequencyTable], provenance: &Provenance, path: &Path) -> Result<()> {
    write(path, render_markdown_tokens(tables, provenance)?.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{CaseSplit, TokenFrequency};
    use proptest::prelude::*;

    fn sweep(tag: &str, cond: Option<Condition>, scores: &[f64]) -> SweepResult {
        SweepResult::new(
            tag,
            cond,
            MetricName::Accuracy,
            scores
                .iter()
                .enumerate()
                .map(|(i, &score)| SweepPoint { layer: i as u16 + 1, score })
                .collect(),
        )
        .unwrap()
    }

    fn prov() -> Provenance {
        Provenance::new("cafe", 42)
    }

    #[test]
    fn csv_rows_and_header() {
        let csv = render_csv(&[sweep("entailment", None, &[0.5, 0.6, 0.7])]).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], CSV_HEADER);
        assert!(lines[1].starts_with("entailment,,1,accuracy,5.0000000000000000e-1"));
        assert!(render_csv(&[]).is_err());
        assert!(render_csv(&[sweep("a,b", None, &[0.5])]).is_err());
    }

    #[test]
    fn svg_has_one_polyline_per_sweep() {
        let sweeps = [
            sweep("recognition", Some(Condition::WithCat), &[0.5, 0.6, 0.7]),
            sweep("recognition", Some(Condition::NoCat), &[0.4, 0.5, 0.55]),
        ];
        let svg = render_svg(&sweeps, &ChartStyle::default(), &prov()).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains(">Layer</text>"));
        assert!(svg.contains(">score</text>"));
        assert!(svg.contains("config_hash=cafe"));
        assert_eq!(svg, render_svg(&sweeps, &ChartStyle::default(), &prov()).unwrap());
    }

    #[test]
    fn frequency_format() {
        assert_eq!(format_frequency(0.0059), ".0059");
        assert_eq!(format_frequency(0.96624), ".9662");
        assert_eq!(format_frequency(1.0), "1.0000");
        assert_eq!(format_frequency(0.0), ".0000");
    }

    #[test]
    fn markdown_others_row() {
        let table = TokenFrequencyTable {
            split: CaseSplit::Positive,
            condition: Some(Condition::NoCat),
            total: 10000,
            rows: vec![TokenFrequency { token: "A".into(), frequency: 0.9941 }],
            others_mass: 0.0059,
        };
        let md = render_markdown_tokens(&[table.clone(), TokenFrequencyTable { split: CaseSplit::Negative, ..table }], &prov()).unwrap();
        assert!(md.contains("| A | .9941 |"));
        assert!(md.lines().last().unwrap().starts_with("| `OTHERS` | .0059 |"));
        assert!(md.contains("Prompt without categories, pos. set"));
    }

    #[test]
    fn report_layout() {
        let dir = tempfile::tempdir().unwrap();
        let report = RunReport::new("r1", prov(), serde_json::json!({"a": 1}), vec![sweep("e", None, &[0.2, 0.9, 0.4])]).unwrap();
        assert_eq!(report.best_layers[0].layer, 2);
        let files = write_report(dir.path(), &report, &ChartStyle::default()).unwrap();
        assert_eq!(files.dir, dir.path().join("report/r1"));
        assert!(files.csv.exists() && files.svg.exists() && files.run_json.exists());
        assert!(files.tokens.is_none());
        let back: RunReport = serde_json::from_slice(&std::fs::read(&files.run_json).unwrap()).unwrap();
        assert_eq!(back, report);
    }

    proptest! {
        #[test]
        fn csv_round_trip_is_exact(
            scores in prop::collection::vec(prop::collection::vec(0.0f64..=1.0, 1..12), 1..4),
        ) {
            let sweeps: Vec<SweepResult> = scores
                .iter()
                .enumerate()
                .map(|(i, s)| sweep(&format!("task{i}"), [None, Some(Condition::WithCat), Some(Condition::NoCat)][i % 3], s))
                .collect();
            let back = parse_csv(&render_csv(&sweeps).unwrap()).unwrap();
            prop_assert_eq!(back, sweeps);
        }
    }
}
