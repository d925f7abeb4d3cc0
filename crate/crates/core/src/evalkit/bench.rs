//! Method-by-track benchmark with a deterministic parallel reduction.

use std::fmt::Write as _;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::evalkit::metric::{average_iou, EvalReport};
use crate::evalkit::records::Prediction;
use crate::evalkit::synth::Video;
use crate::model::TrackerModel;
use crate::pipeline::{track_video, TrackerConfig};

/// Anything that turns a video into one box per frame.
pub trait Predictor: Send + Sync {
    fn predict(&self, video: &Video) -> Result<Vec<BBox>>;
}

/// Repeats the initial box.
#[derive(Clone, Copy, Debug, Default)]
pub struct DummyStatic;

impl Predictor for DummyStatic {
    fn predict(&self, video: &Video) -> Result<Vec<BBox>> {
        let init = video.record.gt_boxes.first().copied().unwrap_or_default();
        Ok(vec![init; video.record.gt_boxes.len()])
    }
}

/// Runs the tracking pipeline with a shared model.
#[derive(Clone, Debug)]
pub struct ModelTracker {
    pub model: Arc<TrackerModel<f32>>,
    pub config: TrackerConfig,
}

impl Predictor for ModelTracker {
    fn predict(&self, video: &Video) -> Result<Vec<BBox>> {
        let Some(init) = video.record.gt_boxes.first() else {
            return Err(Error::Contract(format!("track {:?} has no boxes", video.id())));
        };
        track_video::<f32>(&self.model, &video.frames, init, self.config.clone())
    }
}

/// Replays stored predictions.
#[derive(Clone, Debug)]
pub struct Replay(pub Vec<Prediction>);

impl Predictor for Replay {
    fn predict(&self, video: &Video) -> Result<Vec<BBox>> {
        self.0
            .iter()
            .find(|p| p.video_id == video.id())
            .map(|p| p.boxes.clone())
            .ok_or_else(|| Error::Format(format!("no stored predictions for {:?}", video.id())))
    }
}

pub struct Method {
    pub name: String,
    pub predictor: Arc<dyn Predictor>,
}

impl Method {
    pub fn new(name: impl Into<String>, predictor: impl Predictor + 'static) -> Self {
        Self {
            name: name.into(),
            predictor: Arc::new(predictor),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub method: String,
    /// `None` when the method failed.
    pub average_iou: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub per_track: std::collections::BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "std::collections::BTreeMap::is_empty")]
    pub excluded: std::collections::BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub fingerprint: String,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.method.len()).max().unwrap_or(6).max(6);
        let mut s = String::new();
        let _ = writeln!(s, "config {}", self.fingerprint);
        let _ = writeln!(s, "{:<width$}  average IoU", "method");
        let _ = writeln!(s, "{:-<width$}  -----------", "");
        for r in &self.rows {
            match r.average_iou {
                Some(v) => {
                    let _ = writeln!(s, "{:<width$}  {v:.3}", r.method);
                }
                None => {
                    let _ = writeln!(
                        s,
                        "{:<width$}  FAILED ({})",
                        r.method,
                        r.error.as_deref().unwrap_or("unknown error")
                    );
                }
            }
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn row(&self, method: &str) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.method == method)
    }
}

fn predict_all(method: &Method, videos: &[Video], workers: usize) -> Result<Vec<Prediction>> {
    let run = || {
        videos
            .par_iter()
            .map(|v| method.predictor.predict(v).map(|b| Prediction::new(v.id(), b)))
            .collect::<Vec<_>>()
    };
    let results = if workers <= 1 {
        videos
            .iter()
            .map(|v| method.predictor.predict(v).map(|b| Prediction::new(v.id(), b)))
            .collect()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(run)
    };
    // A failing track drops out of the average; the metric lists it.
    Ok(results.into_iter().filter_map(|r| r.ok()).collect())
}

/// Scores every method on every video. Results are gathered by track index,
/// so `workers` never changes a reported number.
pub fn run_benchmark(methods: &[Method], videos: &[Video], workers: usize, fingerprint: &str) -> Result<BenchReport> {
    if methods.is_empty() {
        return Err(Error::Contract("benchmark needs at least one method".into()));
    }
    let records: Vec<_> = videos.iter().map(|v| v.record.clone()).collect();
    let rows = methods
        .iter()
        .map(|m| {
            let scored: Result<EvalReport> =
                predict_all(m, videos, workers).and_then(|p| average_iou(&records, &p, &m.name));
            match scored {
                Ok(rep) => BenchRow {
                    method: m.name.clone(),
                    average_iou: Some(rep.average_iou),
                    error: None,
                    per_track: rep.per_track,
                    excluded: rep.excluded,
                },
                Err(e) => BenchRow {
                    method: m.name.clone(),
                    average_iou: None,
                    error: Some(e.to_string()),
                    per_track: Default::default(),
                    excluded: Default::default(),
                },
            }
        })
        .collect();
    Ok(BenchReport {
        fingerprint: fingerprint.to_string(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalkit::synth::synthetic_suite;

    struct Broken;
    impl Predictor for Broken {
        fn predict(&self, _: &Video) -> Result<Vec<BBox>> {
            Err(Error::State("broken".into()))
        }
    }

    #[test]
    fn dummy_on_static_is_one_and_failures_are_isolated() {
        let videos = synthetic_suite(3, 5, (64, 64), true, 1).unwrap();
        let methods = [Method::new("dummy", DummyStatic), Method::new("broken", Broken), Method::new("again", DummyStatic)];
        let rep = run_benchmark(&methods, &videos, 1, "x").unwrap();
        assert_eq!(rep.rows[0].average_iou, Some(1.0));
        assert!(rep.rows[1].average_iou.is_none());
        assert_eq!(rep.rows[0].per_track, rep.rows[2].per_track);
        assert!(rep.to_text().contains("FAILED"));
        assert!(rep.to_text().contains("1.000"));
    }

    #[test]
    fn workers_do_not_change_report() {
        let videos = synthetic_suite(6, 6, (64, 64), false, 2).unwrap();
        let methods = [Method::new("dummy", DummyStatic)];
        let a = run_benchmark(&methods, &videos, 1, "f").unwrap();
        let b = run_benchmark(&methods, &videos, 4, "f").unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    }
}
