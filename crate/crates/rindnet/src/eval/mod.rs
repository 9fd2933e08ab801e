//! Benchmark-protocol evaluation of predicted edge maps: NMS thinning,
//! distance-toleranced pixel correspondence, PR curves over thresholds and
//! the ODS / OIS / AP summary, per edge type and for generic edges.

pub mod matching;
pub mod nms;
pub mod plot;
pub mod prcurve;

pub use matching::{match_edges, match_edges_brute_force, MatchCounts};
pub use nms::{conv_tri, nms_thin};
pub use prcurve::{default_thresholds, precision_recall_f, summarize, TypeSummary};

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::EvalParams;
use crate::dataio::{decode_prediction, generic_labels, DatasetSplit, EDGE_TYPES};
use crate::error::{Error, Result};

/// Report rows supported by the bench: the four types plus their union.
pub const REPORT_TYPES: [&str; 5] = [
    "reflectance",
    "illumination",
    "normal",
    "depth",
    "generic",
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub types: BTreeMap<String, TypeSummary>,
}

impl EvalReport {
    /// `type,ODS,OIS,AP` rows in report-type order.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("type,ODS,OIS,AP\n");
        for ty in REPORT_TYPES {
            if let Some(s) = self.types.get(ty) {
                let _ = writeln!(out, "{ty},{:.6},{:.6},{:.6}", s.ods, s.ois, s.ap);
            }
        }
        out
    }

    pub fn pr_csv(&self, ty: &str) -> Option<String> {
        let s = self.types.get(ty)?;
        let mut out = String::from("threshold,precision,recall,f\n");
        for i in 0..s.thresholds.len() {
            let _ = writeln!(
                out,
                "{:.6},{:.6},{:.6},{:.6}",
                s.thresholds[i], s.precision[i], s.recall[i], s.f[i]
            );
        }
        Some(out)
    }
}

fn gt_plane(labels: &ndarray::Array3<u8>, ty: &str) -> Result<Array2<u8>> {
    if ty == "generic" {
        return Ok(generic_labels(labels));
    }
    let k = EDGE_TYPES
        .iter()
        .position(|t| *t == ty)
        .ok_or_else(|| Error::Config(format!("unknown edge type `{ty}`")))?;
    Ok(labels.index_axis(ndarray::Axis(0), k).to_owned())
}

pub fn prediction_path(pred_dir: &Path, id: &str, ty: &str) -> PathBuf {
    pred_dir.join(format!("{id}_{ty}.png"))
}

/// Run the full pipeline for the requested types over a split: decode each
/// prediction, thin it once, sweep thresholds, match per image and
/// summarize. When `out_dir` is given, writes `report.json`, `summary.csv`,
/// `pr_<type>.csv` and PR plot images.
pub fn evaluate_dataset(
    pred_dir: &Path,
    split: &DatasetSplit,
    types: &[String],
    params: &EvalParams,
    out_dir: Option<&Path>,
) -> Result<EvalReport> {
    for ty in types {
        if !REPORT_TYPES.contains(&ty.as_str()) {
            return Err(Error::Config(format!(
                "unknown eval type `{ty}` (expected one of {REPORT_TYPES:?})"
            )));
        }
    }
    if split.is_empty() {
        return Err(Error::Data("evaluation split is empty".into()));
    }
    let thresholds = default_thresholds(params.num_thresholds);

    // preflight so a missing file fails before any heavy work, naming the id
    for id in &split.ids {
        for ty in types {
            let p = prediction_path(pred_dir, id, ty);
            if !p.exists() {
                return Err(Error::Data(format!(
                    "missing prediction for id `{id}`: {}",
                    p.display()
                )));
            }
        }
    }

    let mut report = EvalReport {
        types: BTreeMap::new(),
    };
    for ty in types {
        let per_image: Vec<Vec<MatchCounts>> = split
            .ids
            .par_iter()
            .map(|id| -> Result<Vec<MatchCounts>> {
                let sample = split.load_sample(id)?;
                let gt = gt_plane(&sample.labels, ty)?;
                let pred = decode_prediction(&prediction_path(pred_dir, id, ty))?;
                if pred.dim() != gt.dim() {
                    return Err(Error::Data(format!(
                        "prediction for `{id}` is {:?} but ground truth is {:?}",
                        pred.dim(),
                        gt.dim()
                    )));
                }
                let thinned = nms_thin(&pred);
                let (h, w) = gt.dim();
                let diag = ((h * h + w * w) as f64).sqrt();
                let max_dist = params.max_dist_frac * diag;
                Ok(prcurve::evaluate_image(&thinned, &gt, &thresholds, max_dist))
            })
            .collect::<Result<_>>()?;
        let summary = summarize(&split.ids, &per_image, &thresholds);
        report.types.insert(ty.clone(), summary);
    }

    if let Some(dir) = out_dir {
        write_report_files(&report, dir)?;
    }
    Ok(report)
}

/// Write the machine-readable report plus plots into `dir`.
pub fn write_report_files(report: &EvalReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json_path = dir.join("report.json");
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::Data(format!("report serialization: {e}")))?;
    std::fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;
    let csv_path = dir.join("summary.csv");
    std::fs::write(&csv_path, report.summary_csv()).map_err(|e| Error::io(&csv_path, e))?;

    let mut combined = Vec::new();
    for ty in REPORT_TYPES {
        let Some(summary) = report.types.get(ty) else {
            continue;
        };
        let csv = report.pr_csv(ty).expect("summary exists");
        let path = dir.join(format!("pr_{ty}.csv"));
        std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
        let pts: Vec<(f64, f64)> = summary
            .recall
            .iter()
            .zip(&summary.precision)
            .map(|(&r, &p)| (r, p))
            .collect();
        plot::render_pr_plot(
            &[(ty.to_string(), pts.clone())],
            &dir.join(format!("pr_{ty}.png")),
        )?;
        combined.push((ty.to_string(), pts));
    }
    if !combined.is_empty() {
        plot::render_pr_plot(&combined, &dir.join("pr_combined.png"))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{encode_prediction, load_split, synth, SplitRole};

    fn gt_as_predictions(root: &Path, pred_dir: &Path, ids: &[String]) {
        let split = load_split(root, SplitRole::Train).unwrap();
        std::fs::create_dir_all(pred_dir).unwrap();
        for id in ids {
            let sample = split.load_sample(id).unwrap();
            for ty in REPORT_TYPES {
                let plane = gt_plane(&sample.labels, ty).unwrap();
                let map = plane.mapv(|v| f32::from(v));
                encode_prediction(&map, &prediction_path(pred_dir, id, ty)).unwrap();
            }
        }
    }

    #[test]
    fn ground_truth_as_prediction_is_perfect() {
        let dir = tempfile::tempdir().unwrap();
        let ids = synth::write_dataset(dir.path(), 2, 0, 64, 5).unwrap();
        let pred_dir = dir.path().join("pred");
        gt_as_predictions(dir.path(), &pred_dir, &ids);
        let split = load_split(dir.path(), SplitRole::Train).unwrap();
        let types: Vec<String> = REPORT_TYPES.iter().map(|s| s.to_string()).collect();
        let report =
            evaluate_dataset(&pred_dir, &split, &types, &EvalParams::default(), None).unwrap();
        for (ty, s) in &report.types {
            assert!((s.ods - 1.0).abs() < 1e-6, "{ty} ODS {}", s.ods);
            assert!((s.ois - 1.0).abs() < 1e-6, "{ty} OIS {}", s.ois);
            assert!((s.ap - 1.0).abs() < 1e-6, "{ty} AP {}", s.ap);
        }
    }

    #[test]
    fn report_contains_exactly_the_requested_types() {
        let dir = tempfile::tempdir().unwrap();
        let ids = synth::write_dataset(dir.path(), 1, 0, 64, 6).unwrap();
        let pred_dir = dir.path().join("pred");
        gt_as_predictions(dir.path(), &pred_dir, &ids);
        let split = load_split(dir.path(), SplitRole::Train).unwrap();
        let types = vec!["depth".to_string()];
        let report =
            evaluate_dataset(&pred_dir, &split, &types, &EvalParams::default(), None).unwrap();
        assert_eq!(report.types.len(), 1);
        assert!(report.types.contains_key("depth"));
    }

    #[test]
    fn missing_prediction_names_the_id() {
        let dir = tempfile::tempdir().unwrap();
        let _ids = synth::write_dataset(dir.path(), 1, 0, 64, 7).unwrap();
        let split = load_split(dir.path(), SplitRole::Train).unwrap();
        let pred_dir = dir.path().join("nothing");
        std::fs::create_dir_all(&pred_dir).unwrap();
        let err = evaluate_dataset(
            &pred_dir,
            &split,
            &["depth".to_string()],
            &EvalParams::default(),
            None,
        )
        .unwrap_err();
        assert!(err.to_string().contains("scene000"), "{err}");
    }

    #[test]
    fn report_bytes_are_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let ids = synth::write_dataset(dir.path(), 2, 0, 64, 8).unwrap();
        let pred_dir = dir.path().join("pred");
        gt_as_predictions(dir.path(), &pred_dir, &ids);
        let split = load_split(dir.path(), SplitRole::Train).unwrap();
        let types = vec!["reflectance".to_string(), "depth".to_string()];
        let mut jsons = Vec::new();
        for run in 0..2 {
            let out = dir.path().join(format!("out{run}"));
            evaluate_dataset(
                &pred_dir,
                &split,
                &types,
                &EvalParams::default(),
                Some(&out),
            )
            .unwrap();
            jsons.push(std::fs::read(out.join("report.json")).unwrap());
        }
        assert_eq!(jsons[0], jsons[1]);
    }
}
