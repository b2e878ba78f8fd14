//! Report files and the dataset-by-(model, split) score grid.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::artifact::{self, ArtifactError, ArtifactHeader};
use crate::scoring::{format_pct, ScoreReport};

/// On-disk report: the score reports plus the stage header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub header: Option<ArtifactHeader>,
    pub reports: Vec<ScoreReport>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ReportOnDisk {
    Wrapped(ReportFile),
    Bare(Vec<ScoreReport>),
}

impl ReportFile {
    /// Accepts both the wrapped form and a bare JSON array of reports.
    pub fn read(path: &Path) -> Result<Self, ArtifactError> {
        Ok(match artifact::read_json::<ReportOnDisk>(path)? {
            ReportOnDisk::Wrapped(f) => f,
            ReportOnDisk::Bare(reports) => ReportFile { header: None, reports },
        })
    }

    pub fn write(&self, path: &Path) -> Result<(), ArtifactError> {
        artifact::write_json(path, self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridFormat {
    Table,
    Csv,
}

impl FromStr for GridFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "table" => Ok(GridFormat::Table),
            "csv" => Ok(GridFormat::Csv),
            other => Err(format!("unknown report format {other:?} (expected table or csv)")),
        }
    }
}

fn push_unique(list: &mut Vec<String>, value: &str) {
    if !list.iter().any(|v| v == value) {
        list.push(value.to_string());
    }
}

/// One row per dataset; for each model and split a `Score (%)` and a
/// `Cont. (%)` column. Train splits come first; missing cells print `-`.
pub fn render_grid(reports: &[ScoreReport], format: GridFormat) -> String {
    let mut models = Vec::new();
    let mut datasets = Vec::new();
    let mut splits = Vec::new();
    for r in reports {
        push_unique(&mut models, &r.taker_model);
        push_unique(&mut datasets, &r.dataset);
        push_unique(&mut splits, &r.split);
    }
    splits.sort_by_key(|s| s != "train");

    let mut header = vec!["Dataset".to_string()];
    for m in &models {
        for s in &splits {
            header.push(format!("{m} {s} Score (%)"));
            header.push(format!("{m} {s} Cont. (%)"));
        }
    }
    let mut rows = vec![header];
    for d in &datasets {
        let mut row = vec![d.clone()];
        for m in &models {
            for s in &splits {
                match reports
                    .iter()
                    .find(|r| &r.taker_model == m && &r.dataset == d && &r.split == s)
                {
                    Some(r) => {
                        row.push(format_pct(r.score_pct));
                        row.push(format_pct(r.contamination_pct));
                    }
                    None => {
                        row.push("-".into());
                        row.push("-".into());
                    }
                }
            }
        }
        rows.push(row);
    }

    match format {
        GridFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            for row in &rows {
                w.write_record(row).expect("in-memory write");
            }
            String::from_utf8(w.into_inner().expect("flush to vec")).expect("csv is utf-8")
        }
        GridFormat::Table => {
            let widths: Vec<usize> = (0..rows[0].len())
                .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
                .collect();
            let mut out = String::new();
            for (i, row) in rows.iter().enumerate() {
                let cells: Vec<String> = row
                    .iter()
                    .zip(&widths)
                    .enumerate()
                    .map(|(c, (cell, w))| {
                        if c == 0 {
                            format!("{cell:<w$}")
                        } else {
                            format!("{cell:>w$}")
                        }
                    })
                    .collect();
                out.push_str(cells.join(" | ").trim_end());
                out.push('\n');
                if i == 0 {
                    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
                    out.push_str(&rule.join("-|-"));
                    out.push('\n');
                }
            }
            out
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring::ScoreMeta;

    fn report(model: &str, dataset: &str, split: &str, n: usize, correct: usize) -> ScoreReport {
        ScoreReport::from_counts(
            ScoreMeta {
                taker_model: model.into(),
                dataset: dataset.into(),
                split: split.into(),
            },
            n,
            correct,
            0,
            0,
        )
        .unwrap()
    }

    #[test]
    fn grid_layout() {
        let reports = vec![
            report("gpt-4", "IMDB", "test", 100, 73),
            report("gpt-4", "IMDB", "train", 100, 60),
            report("gpt-3.5", "IMDB", "train", 100, 19),
        ];
        let csv = render_grid(&reports, GridFormat::Csv);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(
            lines[0],
            "Dataset,gpt-4 train Score (%),gpt-4 train Cont. (%),gpt-4 test Score (%),gpt-4 test Cont. (%),gpt-3.5 train Score (%),gpt-3.5 train Cont. (%),gpt-3.5 test Score (%),gpt-3.5 test Cont. (%)"
        );
        assert_eq!(lines[1], "IMDB,60.00,46.67,73.00,64.00,19.00,0.00,-,-");
        let table = render_grid(&reports, GridFormat::Table);
        assert!(table.lines().nth(2).unwrap().starts_with("IMDB"));
    }

    #[test]
    fn report_file_accepts_bare_array() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.json");
        let reports = vec![report("m", "d", "train", 10, 7)];
        std::fs::write(&path, serde_json::to_string(&reports).unwrap()).unwrap();
        assert_eq!(ReportFile::read(&path).unwrap().reports, reports);
        let wrapped = ReportFile { header: None, reports };
        wrapped.write(&path).unwrap();
        assert_eq!(ReportFile::read(&path).unwrap(), wrapped);
    }
}
