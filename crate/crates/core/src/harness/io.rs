//! File formats: label lists, JSONL datasets, similarity matrices and reports.

use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use tracing::warn;

use super::{EvalReport, HarnessError};
use crate::backends::ImageRef;
use crate::label_space::{LabelSet, SimilarityMatrix};

/// Splits newline-separated labels, skipping blank lines. Duplicates after
/// the first occurrence are dropped and returned.
pub fn parse_labels(text: &str) -> (LabelSet, Vec<String>) {
    LabelSet::dedup_from(text.lines())
}

pub fn load_labels(path: &Path) -> Result<LabelSet, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    let (labels, dropped) = parse_labels(&text);
    for d in &dropped {
        warn!(file = %path.display(), label = %d, "duplicate label dropped");
    }
    Ok(labels)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub image: String,
    pub label: String,
}

impl DatasetRecord {
    pub fn image_ref(&self) -> ImageRef {
        if self.image.starts_with("http://")
            || self.image.starts_with("https://")
            || self.image.starts_with("data:")
        {
            ImageRef::Url(self.image.clone())
        } else {
            ImageRef::Path(self.image.clone().into())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnknownLabelPolicy {
    #[default]
    Abort,
    Skip,
}

/// Reads `{"image": ..., "label": ...}` objects, one per line. Blank lines are
/// ignored. When `labels` is given, records whose label is outside it are
/// skipped or rejected per `policy`.
pub fn load_dataset(
    path: &Path,
    labels: Option<&LabelSet>,
    policy: UnknownLabelPolicy,
) -> Result<Vec<DatasetRecord>, HarnessError> {
    let file = std::fs::File::open(path).map_err(|e| HarnessError::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| HarnessError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DatasetRecord =
            serde_json::from_str(&line).map_err(|e| HarnessError::Parse {
                path: path.display().to_string(),
                line: line_no,
                message: e.to_string(),
            })?;
        let rec = DatasetRecord {
            image: rec.image,
            label: rec.label.trim().to_owned(),
        };
        if rec.label.is_empty() {
            return Err(HarnessError::Parse {
                path: path.display().to_string(),
                line: line_no,
                message: "empty label".into(),
            });
        }
        if let Some(ls) = labels {
            if !ls.contains(&rec.label) {
                match policy {
                    UnknownLabelPolicy::Skip => {
                        warn!(line = line_no, label = %rec.label, "label not in label set, skipping");
                        continue;
                    }
                    UnknownLabelPolicy::Abort => {
                        return Err(HarnessError::UnknownLabel {
                            line: line_no,
                            label: rec.label,
                        })
                    }
                }
            }
        }
        out.push(rec);
    }
    Ok(out)
}

/// Header row of labels, then one comma-separated numeric row per label.
pub fn load_similarity(path: &Path) -> Result<SimilarityMatrix, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    parse_similarity(&text).map_err(|e| match e {
        HarnessError::Parse { line, message, .. } => HarnessError::Parse {
            path: path.display().to_string(),
            line,
            message,
        },
        other => other,
    })
}

pub fn parse_similarity(text: &str) -> Result<SimilarityMatrix, HarnessError> {
    let parse_err = |line: usize, message: String| HarnessError::Parse {
        path: "<similarity>".into(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    let labels = LabelSet::new(header.iter())?;
    let mut rows = Vec::with_capacity(labels.len());
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| parse_err(line, e.to_string()))?;
        let row = rec
            .iter()
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|e| parse_err(line, format!("{v:?}: {e}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(row);
    }
    Ok(SimilarityMatrix::new(labels, rows)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Csv,
    Json,
}

pub const REPORT_CSV_HEADER: &str = "n,k,method,grouping,trials,accuracy_pct,mean_calls,mean_sim_latency_s,mean_wall_s,config_hash";

/// Fixed column order, 4-decimal rounding, accuracy as a percentage.
pub fn render_csv(r: &EvalReport) -> String {
    let mut out = String::from(REPORT_CSV_HEADER);
    out.push('\n');
    for row in &r.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{:.4},{:.4},{:.4},{:.4},{}\n",
            row.n,
            row.k.map(|k| k.to_string()).unwrap_or_default(),
            row.method.as_str(),
            row.grouping.as_deref().unwrap_or(""),
            row.trials,
            row.accuracy * 100.0,
            row.mean_calls,
            row.mean_sim_latency_s,
            row.mean_wall_s,
            r.config_hash,
        ));
    }
    out
}

pub fn render_json(r: &EvalReport) -> String {
    serde_json::to_string_pretty(r).expect("report serializes")
}

pub fn emit_report(r: &EvalReport, format: ReportFormat, path: &Path) -> Result<(), HarnessError> {
    let body = match format {
        ReportFormat::Csv => render_csv(r),
        ReportFormat::Json => render_json(r),
    };
    std::fs::write(path, body).map_err(|e| HarnessError::io(path, e))
}

pub fn load_report_json(path: &Path) -> Result<EvalReport, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| HarnessError::Parse {
        path: path.display().to_string(),
        line: e.line(),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{EvalRow, Method};
    use std::io::Write;

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        std::fs::File::create(&p)
            .unwrap()
            .write_all(body.as_bytes())
            .unwrap();
        p
    }

    #[test]
    fn labels_with_duplicate() {
        let (ls, dropped) = parse_labels("cat\ndog\ncat\n");
        assert_eq!(ls.len(), 2);
        assert_eq!(dropped, vec!["cat".to_string()]);
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "l.txt", "cat\n\n  dog \ncat\n");
        assert_eq!(load_labels(&p).unwrap().as_slice(), &["cat", "dog"]);
    }

    #[test]
    fn empty_label_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "l.txt", "");
        assert!(load_labels(&p).unwrap().is_empty());
        assert!(matches!(
            load_labels(&dir.path().join("missing.txt")),
            Err(HarnessError::Io { .. })
        ));
    }

    #[test]
    fn dataset_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "d.jsonl",
            "{\"image\": \"a.png\", \"label\": \"cat\"}\n\n{\"image\": \"https://x/b.jpg\", \"label\": \"dog\"}\n",
        );
        let recs = load_dataset(&p, None, UnknownLabelPolicy::Abort).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].image_ref(), ImageRef::Path("a.png".into()));
        assert_eq!(recs[1].image_ref(), ImageRef::Url("https://x/b.jpg".into()));

        let ls = LabelSet::new(["cat"]).unwrap();
        assert!(matches!(
            load_dataset(&p, Some(&ls), UnknownLabelPolicy::Abort),
            Err(HarnessError::UnknownLabel { line: 3, .. })
        ));
        assert_eq!(
            load_dataset(&p, Some(&ls), UnknownLabelPolicy::Skip).unwrap().len(),
            1
        );
    }

    #[test]
    fn dataset_missing_label_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "d.jsonl",
            "{\"image\": \"a.png\", \"label\": \"cat\"}\n{\"image\": \"b.png\"}\n",
        );
        let err = load_dataset(&p, None, UnknownLabelPolicy::Abort).unwrap_err();
        assert!(matches!(err, HarnessError::Parse { line: 2, .. }), "{err:?}");
        assert!(err.to_string().contains("line 2"));
    }

    #[test]
    fn similarity_csv() {
        let m = parse_similarity("a,b,c\n1,0.5,0\n0.5,1,0.2\n0,0.2,1\n").unwrap();
        assert_eq!(m.dim(), 3);
        assert_eq!(m.get("b", "c"), Some(0.2));
        assert!(parse_similarity("a,b\n1,0.5\n").is_err());
        assert!(parse_similarity("a,b\n1,x\nx,1\n").is_err());
        assert!(parse_similarity("a,b\n1,0.5\n0.4,1\n").is_err());
    }

    fn report(rows: Vec<EvalRow>) -> EvalReport {
        EvalReport {
            schema_version: 1,
            experiment: "test".into(),
            config_hash: "abc".into(),
            seed: 1,
            oracle_seed: 2,
            rows,
        }
    }

    fn row(n: usize, method: Method) -> EvalRow {
        EvalRow {
            n,
            k: Some(10),
            method,
            grouping: Some("sequential".into()),
            trials: 3,
            accuracy: 2.0 / 3.0,
            mean_calls: 10.0,
            mean_sim_latency_s: 1.0 / 3.0,
            mean_wall_s: 0.0,
        }
    }

    #[test]
    fn csv_layout() {
        assert_eq!(render_csv(&report(vec![])), format!("{REPORT_CSV_HEADER}\n"));
        let r = report(vec![row(100, Method::Flat), row(100, Method::Dci)]);
        let csv = render_csv(&r);
        assert_eq!(csv.lines().count(), 3);
        assert_eq!(
            csv.lines().nth(2).unwrap(),
            "100,10,dci,sequential,3,66.6667,10.0000,0.3333,0.0000,abc"
        );
    }

    #[test]
    fn json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let r = report(vec![row(100, Method::Flat), row(1000, Method::Dci)]);
        let p = dir.path().join("r.json");
        emit_report(&r, ReportFormat::Json, &p).unwrap();
        assert_eq!(load_report_json(&p).unwrap(), r);
        let p = dir.path().join("r.csv");
        emit_report(&r, ReportFormat::Csv, &p).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), render_csv(&r));
    }
}
