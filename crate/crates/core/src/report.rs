//! Result tables (markdown, CSV, JSON) and the score report file.
//!
//! Display values are rounded half-up to four decimals from the shortest
//! decimal form of the stored `f64`; stored values are never rounded.

use std::collections::{BTreeMap, BTreeSet};
use std::str::FromStr;

use rust_decimal::{Decimal, RoundingStrategy};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{mean_of_labels, CohortScore, CohortStats, LabelScore};
use crate::volume::{Label, GTVN, GTVP};

pub const TOOLKIT_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no rows to render")]
    NoRows,
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unknown format {0:?} (expected markdown, csv or json)")]
    UnknownFormat(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TableFormat {
    #[default]
    Markdown,
    Csv,
    Json,
}

impl FromStr for TableFormat {
    type Err = ReportError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "markdown" | "md" => Ok(Self::Markdown),
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            _ => Err(ReportError::UnknownFormat(s.to_string())),
        }
    }
}

/// Column name of a label: GTVp, GTVn, or `label<N>`.
pub fn label_name(label: Label) -> String {
    match label {
        GTVP => "GTVp".into(),
        GTVN => "GTVn".into(),
        other => format!("label{other}"),
    }
}

/// Four-decimal display, half-up on the shortest decimal representation.
pub fn display4(value: f64) -> String {
    if !value.is_finite() {
        return value.to_string();
    }
    match Decimal::from_str(&value.to_string()) {
        Ok(d) => format!("{:.4}", d.round_dp_with_strategy(4, RoundingStrategy::MidpointAwayFromZero)),
        Err(_) => format!("{value:.4}"),
    }
}

/// `m.mmmm ± s.ssss`
pub fn display_stats(stats: &CohortStats) -> String {
    format!("{} ± {}", display4(stats.mean), display4(stats.std))
}

/// One model configuration: per-label aggregated Dice and their mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub model_name: String,
    #[serde(with = "label_keys")]
    pub dsc_agg: BTreeMap<Label, f64>,
    /// Unweighted mean of `dsc_agg`, before any rounding.
    pub mean: f64,
    #[serde(default, skip_serializing_if = "Option::is_none", with = "opt_label_keys")]
    pub stats: Option<BTreeMap<Label, CohortStats>>,
}

impl ResultRow {
    pub fn new(model_name: impl Into<String>, dsc_agg: BTreeMap<Label, f64>) -> Self {
        let mean = mean_of_labels(&dsc_agg.values().copied().collect::<Vec<_>>());
        Self { model_name: model_name.into(), dsc_agg, mean, stats: None }
    }

    /// GTVp / GTVn pair, the usual two-column row.
    pub fn gtv(model_name: impl Into<String>, gtvp: f64, gtvn: f64) -> Self {
        Self::new(model_name, [(GTVP, gtvp), (GTVN, gtvn)].into_iter().collect())
    }

    pub fn with_stats(mut self, stats: BTreeMap<Label, CohortStats>) -> Self {
        self.stats = Some(stats);
        self
    }

    pub fn from_score(model_name: impl Into<String>, score: &CohortScore) -> Self {
        let agg = score.labels.iter().map(|s| (s.label, s.dsc_agg)).collect();
        let stats = score.labels.iter().map(|s| (s.label, CohortStats { mean: s.mean_dsc, std: s.std_dsc })).collect();
        let mut row = Self::new(model_name, agg);
        row.mean = score.mean_dsc_agg;
        row.with_stats(stats)
    }

    pub fn mean_display(&self) -> String {
        display4(self.mean)
    }
}

mod label_keys {
    use crate::volume::Label;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};
    use std::collections::BTreeMap;

    pub fn serialize<S: Serializer, V: Serialize>(m: &BTreeMap<Label, V>, s: S) -> Result<S::Ok, S::Error> {
        m.iter().map(|(k, v)| (k.to_string(), v)).collect::<BTreeMap<_, _>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>, V: Deserialize<'de>>(d: D) -> Result<BTreeMap<Label, V>, D::Error> {
        BTreeMap::<String, V>::deserialize(d)?
            .into_iter()
            .map(|(k, v)| k.parse::<Label>().map(|k| (k, v)).map_err(serde::de::Error::custom))
            .collect()
    }
}

mod opt_label_keys {
    use crate::metrics::CohortStats;
    use crate::volume::Label;
    use serde::{Deserialize, Deserializer, Serializer};
    use std::collections::BTreeMap;

    pub fn serialize<S: Serializer>(m: &Option<BTreeMap<Label, CohortStats>>, s: S) -> Result<S::Ok, S::Error> {
        match m {
            Some(m) => super::label_keys::serialize(m, s),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<BTreeMap<Label, CohortStats>>, D::Error> {
        #[derive(Deserialize)]
        struct Wrap(#[serde(with = "super::label_keys")] BTreeMap<Label, CohortStats>);
        Ok(Option::<Wrap>::deserialize(d)?.map(|w| w.0))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub toolkit_version: String,
    pub timestamp: Option<String>,
    #[serde(default)]
    pub input_digests: BTreeMap<String, String>,
}

impl ReportMetadata {
    pub fn current() -> Self {
        Self { toolkit_version: TOOLKIT_VERSION.into(), timestamp: None, input_digests: BTreeMap::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct JsonRow {
    #[serde(flatten)]
    row: ResultRow,
    display: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct JsonTable {
    rows: Vec<JsonRow>,
    metadata: ReportMetadata,
}

fn label_columns(rows: &[ResultRow]) -> Vec<Label> {
    rows.iter().flat_map(|r| r.dsc_agg.keys().copied()).collect::<BTreeSet<_>>().into_iter().collect()
}

fn markdown_cell(s: &str) -> String {
    s.replace('|', "\\|")
}

fn markdown(header: &[String], body: &[Vec<String>]) -> String {
    let mut out = String::new();
    out.push_str(&format!("| {} |\n", header.join(" | ")));
    let rule: Vec<&str> = header.iter().enumerate().map(|(i, _)| if i == 0 { "---" } else { "---:" }).collect();
    out.push_str(&format!("| {} |\n", rule.join(" | ")));
    for row in body {
        let cells: Vec<String> = row.iter().map(|c| markdown_cell(c)).collect();
        out.push_str(&format!("| {} |\n", cells.join(" | ")));
    }
    out
}

fn csv_text(header: &[String], body: &[Vec<String>]) -> Result<String, ReportError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for row in body {
        w.write_record(row)?;
    }
    let bytes = w.into_inner().map_err(|e| ReportError::Csv(e.into_error().into()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn json_table(rows: &[ResultRow], metadata: &ReportMetadata) -> Result<String, ReportError> {
    let labels = label_columns(rows);
    let table = JsonTable {
        rows: rows
            .iter()
            .map(|r| {
                let mut display: BTreeMap<String, String> =
                    labels.iter().filter_map(|l| r.dsc_agg.get(l).map(|v| (label_name(*l), display4(*v)))).collect();
                display.insert("Mean".into(), r.mean_display());
                if let Some(stats) = &r.stats {
                    for (l, s) in stats {
                        display.insert(format!("{} DSC", label_name(*l)), display_stats(s));
                    }
                }
                JsonRow { row: r.clone(), display }
            })
            .collect(),
        metadata: metadata.clone(),
    };
    let mut s = serde_json::to_string_pretty(&table)?;
    s.push('\n');
    Ok(s)
}

/// Parses a JSON table produced by [`render_table`] or [`render_stats_table`].
pub fn parse_json_table(text: &str) -> Result<(Vec<ResultRow>, ReportMetadata), ReportError> {
    let table: JsonTable = serde_json::from_str(text)?;
    Ok((table.rows.into_iter().map(|r| r.row).collect(), table.metadata))
}

/// Per-label aggregated Dice plus the Mean column.
pub fn render_table_with(rows: &[ResultRow], format: TableFormat, metadata: &ReportMetadata) -> Result<String, ReportError> {
    if rows.is_empty() {
        return Err(ReportError::NoRows);
    }
    let labels = label_columns(rows);
    let cell = |r: &ResultRow, l: &Label| r.dsc_agg.get(l).map(|v| display4(*v)).unwrap_or_default();
    match format {
        TableFormat::Markdown => {
            let mut header = vec!["Model".to_string()];
            header.extend(labels.iter().map(|l| format!("{} DSC_agg", label_name(*l))));
            header.push("Mean".into());
            let body: Vec<Vec<String>> = rows
                .iter()
                .map(|r| {
                    let mut v = vec![r.model_name.clone()];
                    v.extend(labels.iter().map(|l| cell(r, l)));
                    v.push(r.mean_display());
                    v
                })
                .collect();
            Ok(markdown(&header, &body))
        }
        TableFormat::Csv => {
            let mut header = vec!["model".to_string()];
            header.extend(labels.iter().map(|l| format!("{}_dsc_agg", label_name(*l))));
            header.push("mean".into());
            let body: Vec<Vec<String>> = rows
                .iter()
                .map(|r| {
                    let mut v = vec![r.model_name.clone()];
                    v.extend(labels.iter().map(|l| cell(r, l)));
                    v.push(r.mean_display());
                    v
                })
                .collect();
            csv_text(&header, &body)
        }
        TableFormat::Json => json_table(rows, metadata),
    }
}

pub fn render_table(rows: &[ResultRow], format: TableFormat) -> Result<String, ReportError> {
    render_table_with(rows, format, &ReportMetadata::current())
}

/// Mean ± STD of per-case Dice for every label. Rows without stats render empty cells.
pub fn render_stats_table_with(
    rows: &[ResultRow],
    format: TableFormat,
    metadata: &ReportMetadata,
) -> Result<String, ReportError> {
    if rows.is_empty() {
        return Err(ReportError::NoRows);
    }
    let labels: Vec<Label> = rows
        .iter()
        .filter_map(|r| r.stats.as_ref())
        .flat_map(|s| s.keys().copied())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let stat = |r: &ResultRow, l: &Label| r.stats.as_ref().and_then(|s| s.get(l)).copied();
    match format {
        TableFormat::Markdown => {
            let mut header = vec!["Model".to_string()];
            header.extend(labels.iter().map(|l| format!("{} DSC", label_name(*l))));
            let body: Vec<Vec<String>> = rows
                .iter()
                .map(|r| {
                    let mut v = vec![r.model_name.clone()];
                    v.extend(labels.iter().map(|l| stat(r, l).map(|s| display_stats(&s)).unwrap_or_default()));
                    v
                })
                .collect();
            Ok(markdown(&header, &body))
        }
        TableFormat::Csv => {
            let mut header = vec!["model".to_string()];
            for l in &labels {
                header.push(format!("{}_mean", label_name(*l)));
                header.push(format!("{}_std", label_name(*l)));
            }
            let body: Vec<Vec<String>> = rows
                .iter()
                .map(|r| {
                    let mut v = vec![r.model_name.clone()];
                    for l in &labels {
                        match stat(r, l) {
                            Some(s) => v.extend([display4(s.mean), display4(s.std)]),
                            None => v.extend([String::new(), String::new()]),
                        }
                    }
                    v
                })
                .collect();
            csv_text(&header, &body)
        }
        TableFormat::Json => json_table(rows, metadata),
    }
}

pub fn render_stats_table(rows: &[ResultRow], format: TableFormat) -> Result<String, ReportError> {
    render_stats_table_with(rows, format, &ReportMetadata::current())
}

/// Where a score came from.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub model_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layout: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fold: Option<String>,
}

/// Full scoring output for one model over one cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub provenance: Provenance,
    pub cases: Vec<String>,
    pub labels: Vec<LabelScore>,
    pub mean_dsc_agg: f64,
    pub metadata: ReportMetadata,
}

impl ScoreReport {
    pub fn new(provenance: Provenance, score: CohortScore, metadata: ReportMetadata) -> Self {
        let cases = score.labels.first().map(|l| l.per_case.iter().map(|c| c.case_id.clone()).collect()).unwrap_or_default();
        Self { provenance, cases, labels: score.labels, mean_dsc_agg: score.mean_dsc_agg, metadata }
    }

    pub fn to_row(&self) -> ResultRow {
        let score = CohortScore { labels: self.labels.clone(), mean_dsc_agg: self.mean_dsc_agg };
        ResultRow::from_score(self.provenance.model_name.clone(), &score)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_up_display() {
        assert_eq!(display4(0.5), "0.5000");
        assert_eq!(display4(1.0), "1.0000");
        assert_eq!(display4(0.0), "0.0000");
        assert_eq!(display4(0.82485), "0.8249");
        assert_eq!(display4(0.12344999), "0.1234");
        assert_eq!(display4(0.99995), "1.0000");
        assert_eq!(display4(f64::NAN), "NaN");
    }

    #[test]
    fn mean_column_examples() {
        assert_eq!(ResultRow::gtv("nnUNet Cascade + ResEnc", 0.7919, 0.8633).mean_display(), "0.8276");
        assert_eq!(ResultRow::gtv("nnUNet FullRes + ResEnc", 0.7896, 0.8601).mean_display(), "0.8249");
        assert_eq!(ResultRow::gtv("x", 0.5, 0.5).mean_display(), "0.5000");
    }

    #[test]
    fn stats_cells() {
        assert_eq!(display_stats(&CohortStats { mean: 0.6940, std: 0.2982 }), "0.6940 ± 0.2982");
        assert_eq!(display_stats(&CohortStats { mean: 1.0, std: 0.0 }), "1.0000 ± 0.0000");
    }

    fn sample_rows() -> Vec<ResultRow> {
        let stats = |m1, s1, m2, s2| {
            [(1, CohortStats { mean: m1, std: s1 }), (2, CohortStats { mean: m2, std: s2 })].into_iter().collect()
        };
        vec![
            ResultRow::gtv("MedNeXt Small (Kernel 3)", 0.8066, 0.8710).with_stats(stats(0.6940, 0.2982, 0.8010, 0.2341)),
            ResultRow::gtv("nnUNet, \"all\" | ensembled", 0.7889, 0.8618),
        ]
    }

    #[test]
    fn markdown_layout() {
        let md = render_table(&sample_rows(), TableFormat::Markdown).unwrap();
        let lines: Vec<&str> = md.lines().collect();
        assert_eq!(lines[0], "| Model | GTVp DSC_agg | GTVn DSC_agg | Mean |");
        assert_eq!(lines[2], "| MedNeXt Small (Kernel 3) | 0.8066 | 0.8710 | 0.8388 |");
        assert!(lines[3].contains("\\|"));
        let stats = render_stats_table(&sample_rows(), TableFormat::Markdown).unwrap();
        assert!(stats.contains("| MedNeXt Small (Kernel 3) | 0.6940 ± 0.2982 | 0.8010 ± 0.2341 |"));
    }

    #[test]
    fn csv_layout_and_quoting() {
        let csv = render_table(&sample_rows(), TableFormat::Csv).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "model,GTVp_dsc_agg,GTVn_dsc_agg,mean");
        assert_eq!(lines[2], "\"nnUNet, \"\"all\"\" | ensembled\",0.7889,0.8618,0.8254");
        let stats = render_stats_table(&sample_rows(), TableFormat::Csv).unwrap();
        assert!(!stats.contains('±'));
        assert!(stats.starts_with("model,GTVp_mean,GTVp_std,GTVn_mean,GTVn_std\n"));
        assert!(stats.contains("MedNeXt Small (Kernel 3),0.6940,0.2982,0.8010,0.2341"));
    }

    #[test]
    fn json_roundtrip_is_stable() {
        let rows = sample_rows();
        let first = render_table(&rows, TableFormat::Json).unwrap();
        let (parsed, meta) = parse_json_table(&first).unwrap();
        assert_eq!(parsed, rows);
        assert_eq!(render_table_with(&parsed, TableFormat::Json, &meta).unwrap(), first);
        let v: serde_json::Value = serde_json::from_str(&first).unwrap();
        assert_eq!(v["rows"][0]["display"]["Mean"], "0.8388");
        assert_eq!(v["rows"][0]["mean"], 0.8388);
        assert_eq!(v["metadata"]["toolkit_version"], TOOLKIT_VERSION);
    }

    #[test]
    fn display_does_not_touch_stored_values() {
        let row = ResultRow::gtv("m", 0.12345678, 0.9);
        let _ = render_table(std::slice::from_ref(&row), TableFormat::Markdown).unwrap();
        assert_eq!(row.dsc_agg[&1], 0.12345678);
    }

    #[test]
    fn empty_rows_and_formats() {
        assert!(matches!(render_table(&[], TableFormat::Csv), Err(ReportError::NoRows)));
        assert_eq!("md".parse::<TableFormat>().unwrap(), TableFormat::Markdown);
        assert!("xml".parse::<TableFormat>().is_err());
    }
}
