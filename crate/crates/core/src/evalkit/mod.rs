//! Evaluation harness: metric, data, baselines, fine-tuning and reports.

pub mod bench;
pub mod finetune;
pub mod metric;
pub mod records;
pub mod synth;

pub use bench::{run_benchmark, BenchReport, BenchRow, DummyStatic, Method, ModelTracker, Predictor, Replay};
pub use finetune::{draw_sample, finetune, train_iou, FinetuneConfig, FinetuneLog};
pub use metric::{average_iou, iou, EvalReport};
pub use records::{
    got10k_record, load_predictions, load_records, read_got10k_groundtruth, save_predictions, save_records,
    Prediction, TrackRecord,
};
pub use synth::{dummy_static, generate_synthetic, save_suite, synthetic_suite, Motion, SynthConfig, Video};
