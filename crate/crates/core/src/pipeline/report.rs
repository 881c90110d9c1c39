use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::data::MASK_FILE;
use super::predict::PREDICTION_FILES;
use super::train::TrainSummary;
use super::{create_dir, io_err, nifti_err, write_file, write_json, PipelineError, Result};
use crate::metrics::{confusion, ConfusionCounts, Scores};
use crate::nifti::read_mask;
use crate::volume::Axis;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseScores {
    pub case: String,
    pub counts: ConfusionCounts,
    pub scores: Scores,
}

/// Scores for one prediction kind (one axis, or the fused masks).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Section {
    pub name: String,
    pub cases: Vec<CaseScores>,
    /// Arithmetic mean over cases.
    pub mean: Scores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferRecord {
    pub axis: Axis,
    pub pretrained_epoch1_val_loss: Option<f64>,
    pub scratch_epoch1_val_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub sections: Vec<Section>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub transfer: Vec<TransferRecord>,
    /// Training summary of the run that produced the predictions, when supplied.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<TrainSummary>,
    pub elapsed_secs: f64,
}

impl MetricsReport {
    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("section,case,tp,fp,tn,fn,dice,iou,accuracy,precision,recall,specificity,specificity_as_printed\n");
        let row = |s: &mut String, section: &str, case: &str, c: Option<&ConfusionCounts>, m: &Scores| {
            let counts = c.map_or_else(|| ",,,".to_string(), |c| format!("{},{},{},{}", c.tp, c.fp, c.tn, c.fn_));
            let _ = writeln!(
                s,
                "{section},{case},{counts},{},{},{},{},{},{},{}",
                m.dice, m.iou, m.accuracy, m.precision, m.recall, m.specificity, m.specificity_as_printed
            );
        };
        for sec in &self.sections {
            for c in &sec.cases {
                row(&mut s, &sec.name, &c.case, Some(&c.counts), &c.scores);
            }
            row(&mut s, &sec.name, "mean", None, &sec.mean);
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for sec in &self.sections {
            let _ = writeln!(s, "== {} ==", sec.name);
            let _ = writeln!(
                s,
                "{:<16} {:>8} {:>8} {:>8} {:>9} {:>8} {:>8} {:>8}",
                "case", "dice", "iou", "accuracy", "precision", "recall", "spec", "spec_tnfn"
            );
            let line = |s: &mut String, name: &str, m: &Scores| {
                let _ = writeln!(
                    s,
                    "{:<16} {:>8.4} {:>8.4} {:>8.4} {:>9.4} {:>8.4} {:>8.4} {:>8.4}{}",
                    name,
                    m.dice,
                    m.iou,
                    m.accuracy,
                    m.precision,
                    m.recall,
                    m.specificity,
                    m.specificity_as_printed,
                    if m.degenerate.is_empty() { String::new() } else { format!("  (empty: {})", m.degenerate.join(", ")) }
                );
            };
            for c in &sec.cases {
                line(&mut s, &c.case, &c.scores);
            }
            line(&mut s, "mean", &sec.mean);
            s.push('\n');
        }
        if !self.transfer.is_empty() {
            let _ = writeln!(s, "== transfer: epoch-1 validation loss ==");
            for t in &self.transfer {
                let f = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"));
                let _ = writeln!(s, "axis {}: pretrained {} scratch {}", t.axis, f(t.pretrained_epoch1_val_loss), f(t.scratch_epoch1_val_loss));
            }
            s.push('\n');
        }
        let _ = writeln!(s, "elapsed {:.2}s", self.elapsed_secs);
        s
    }
}

fn sorted_subdirs(root: &Path) -> Result<Vec<String>> {
    let mut names: Vec<String> = std::fs::read_dir(root)
        .map_err(io_err(root))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    Ok(names)
}

/// Scores every prediction under `pred_root/<case>/` against `gt_root/<case>/GT.nii`.
pub fn evaluate_predictions(pred_root: &Path, gt_root: &Path) -> Result<Vec<Section>> {
    if !pred_root.is_dir() {
        return Err(PipelineError::DataMissing(format!("{} is not a directory", pred_root.display())));
    }
    let cases: Vec<String> = sorted_subdirs(pred_root)?
        .into_iter()
        .filter(|c| PREDICTION_FILES.iter().any(|f| pred_root.join(c).join(f).is_file()))
        .collect();
    if cases.is_empty() {
        return Err(PipelineError::DataMissing(format!("no predictions under {}", pred_root.display())));
    }
    let mut sections = Vec::new();
    for file in PREDICTION_FILES {
        let present: Vec<bool> = cases.iter().map(|c| pred_root.join(c).join(file).is_file()).collect();
        if !present.iter().any(|&p| p) {
            continue;
        }
        if let Some(i) = present.iter().position(|&p| !p) {
            return Err(PipelineError::CaseMismatch(format!("case {} has no {file} while others do", cases[i])));
        }
        let mut scored = Vec::with_capacity(cases.len());
        for case in &cases {
            let gt_path = gt_root.join(case).join(MASK_FILE);
            if !gt_path.is_file() {
                return Err(PipelineError::CaseMismatch(format!("no ground truth {} for predicted case {case}", gt_path.display())));
            }
            let gt = read_mask(&gt_path).map_err(nifti_err(&gt_path))?;
            let pred_path = pred_root.join(case).join(file);
            let pred = read_mask(&pred_path).map_err(nifti_err(&pred_path))?;
            let counts = confusion(&pred, &gt)?;
            scored.push(CaseScores { case: case.clone(), counts, scores: Scores::from_counts(&counts) });
        }
        let mean = Scores::mean(&scored.iter().map(|c| c.scores.clone()).collect::<Vec<_>>()).expect("non-empty");
        sections.push(Section { name: file.trim_end_matches(".nii").to_string(), cases: scored, mean });
    }
    Ok(sections)
}

/// Writes `report.json`, `report.csv` and `report.txt` under `out`.
pub fn cmd_evaluate(pred_root: &Path, gt_root: &Path, out: &Path, summary: Option<&Path>) -> Result<MetricsReport> {
    let start = Instant::now();
    let training = summary
        .map(|p| -> Result<TrainSummary> {
            let text = std::fs::read_to_string(p).map_err(io_err(p))?;
            serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", p.display())))
        })
        .transpose()?;
    let sections = evaluate_predictions(pred_root, gt_root)?;
    let transfer = training
        .iter()
        .flat_map(|t| &t.axes)
        .filter(|a| a.pretrained)
        .map(|a| TransferRecord { axis: a.axis, pretrained_epoch1_val_loss: a.epoch1_val_loss, scratch_epoch1_val_loss: a.scratch_epoch1_val_loss })
        .collect();
    let report = MetricsReport { sections, transfer, training, elapsed_secs: start.elapsed().as_secs_f64() };
    create_dir(out)?;
    write_json(&out.join("report.json"), &report)?;
    write_file(&out.join("report.csv"), report.to_csv())?;
    write_file(&out.join("report.txt"), report.to_text())?;
    Ok(report)
}
