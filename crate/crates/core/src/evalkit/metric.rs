//! Intersection-over-union and the per-track average.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{bail, Result};
use crate::evalkit::records::{Prediction, TrackRecord};

/// Intersection area over union area; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    if a == b {
        return if a.area() > 0.0 { 1.0 } else { 0.0 };
    }
    let iw = (a.right().min(b.right()) - a.x.max(b.x)).max(0.0);
    let ih = (a.bottom().min(b.bottom()) - a.y.max(b.y)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union > 0.0 {
        (inter / union).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

/// Sum in ascending order, so that any permutation of `values` gives the
/// same bits.
pub(crate) fn ordered_mean(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v.iter().sum::<f64>() / v.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub average_iou: f64,
    pub per_track: BTreeMap<String, f64>,
    /// Tracks left out of the average, with the reason.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub excluded: BTreeMap<String, String>,
    #[serde(default)]
    pub fingerprint: String,
}

impl EvalReport {
    pub fn is_flagged(&self) -> bool {
        !self.excluded.is_empty()
    }
}

/// Mean IoU per track over frames `1..T`, then the unweighted mean over
/// tracks. Tracks with missing or misaligned predictions are excluded and
/// listed in the report.
pub fn average_iou(records: &[TrackRecord], predictions: &[Prediction], method: &str) -> Result<EvalReport> {
    let by_id: BTreeMap<&str, &Prediction> = predictions.iter().map(|p| (p.video_id.as_str(), p)).collect();
    let mut per_track = BTreeMap::new();
    let mut excluded = BTreeMap::new();
    for r in records {
        let Some(p) = by_id.get(r.video_id.as_str()) else {
            excluded.insert(r.video_id.clone(), "no predictions".to_string());
            continue;
        };
        if p.boxes.len() != r.gt_boxes.len() {
            excluded.insert(
                r.video_id.clone(),
                format!("{} predictions for {} frames", p.boxes.len(), r.gt_boxes.len()),
            );
            continue;
        }
        if r.gt_boxes.len() < 2 {
            excluded.insert(r.video_id.clone(), "no frames after the initial one".to_string());
            continue;
        }
        let ious: Vec<f64> = r.gt_boxes[1..]
            .iter()
            .zip(&p.boxes[1..])
            .map(|(g, b)| iou(g, b))
            .collect();
        per_track.insert(r.video_id.clone(), ordered_mean(&ious));
    }
    if per_track.is_empty() {
        bail!(Contract, "no track could be scored ({} excluded)", excluded.len());
    }
    let values: Vec<f64> = per_track.values().copied().collect();
    Ok(EvalReport {
        method: method.to_string(),
        average_iou: ordered_mean(&values),
        per_track,
        excluded,
        fingerprint: String::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::path::PathBuf;

    fn rec(id: &str, boxes: Vec<BBox>) -> TrackRecord {
        TrackRecord { video_id: id.into(), frame_source: PathBuf::new(), gt_boxes: boxes }
    }

    #[test]
    fn analytic_cases() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::new(5.0, 5.0, 1.0, 1.0)), 0.0);
        assert!((iou(&a, &BBox::new(1.0, 0.0, 2.0, 2.0)) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(iou(&BBox::default(), &BBox::default()), 0.0);
    }

    #[test]
    fn two_frame_mean() {
        let g = BBox::new(0.0, 0.0, 2.0, 2.0);
        let r = rec("a", vec![g, g, g]);
        let p = Prediction::new("a", vec![g, g, BBox::new(0.0, 0.0, 2.0, 1.0)]);
        let rep = average_iou(&[r], &[p], "m").unwrap();
        assert_eq!(rep.average_iou, 0.75);
    }

    #[test]
    fn misaligned_track_is_excluded() {
        let g = BBox::new(0.0, 0.0, 2.0, 2.0);
        let recs = [rec("a", vec![g, g]), rec("b", vec![g, g])];
        let preds = [
            Prediction::new("a", vec![g, g]),
            Prediction::new("b", vec![g]),
        ];
        let rep = average_iou(&recs, &preds, "m").unwrap();
        assert_eq!(rep.average_iou, 1.0);
        assert!(rep.is_flagged() && rep.excluded.contains_key("b"));
    }

    proptest! {
        #[test]
        fn symmetric_and_bounded(a in prop::array::uniform4(0.0f64..10.0), b in prop::array::uniform4(0.0f64..10.0)) {
            let (a, b) = (BBox::from(a), BBox::from(b));
            let v = iou(&a, &b);
            prop_assert_eq!(v, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&v));
            if a.w > 0.0 && a.h > 0.0 {
                prop_assert_eq!(iou(&a, &a), 1.0);
            }
        }

        #[test]
        fn moving_away_never_helps(a in prop::array::uniform4(1.0f64..10.0), dx in 0.0f64..3.0, dy in 0.0f64..3.0) {
            let a = BBox::from(a);
            let mut last = iou(&a, &a);
            for k in 1..20 {
                let v = iou(&a, &a.translated(dx * k as f64, dy * k as f64));
                prop_assert!(v <= last + 1e-12);
                last = v;
            }
        }
    }
}
