//! Desk-scale fine-tuning of adapters, head and embedding tables.

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{bail, Error, Result};
use crate::evalkit::metric::average_iou;
use crate::evalkit::records::Prediction;
use crate::evalkit::synth::Video;
use crate::model::{batch_loss, Adam, Sample, TrackerModel};
use crate::numerics::Tensor;
use crate::pipeline::{crop_square, image_to_crop, search_spec, template_spec, track_video, TrackerConfig};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Evaluate train-set average IoU every this many steps (0 = never).
    pub eval_every: usize,
    /// Stop once the train-set average IoU reaches this value.
    pub target_iou: Option<f64>,
    /// Search-center jitter as a fraction of `sqrt(w·h)`.
    pub center_jitter: f64,
    /// Log-uniform search-scale jitter half-width.
    pub scale_jitter: f64,
    /// Cosine-decay the learning rate to 5% of `lr` over `steps`.
    pub cosine: bool,
}

/// Floor of the cosine schedule as a fraction of the peak rate.
const COSINE_FLOOR: f64 = 0.05;

impl FinetuneConfig {
    /// Learning rate used at `step` (1-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        if !self.cosine || self.steps == 0 {
            return self.lr;
        }
        let p = step as f64 / self.steps as f64;
        self.lr * (COSINE_FLOOR + (1.0 - COSINE_FLOOR) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos()))
    }
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 16,
            lr: 1e-3,
            seed: 0,
            eval_every: 100,
            target_iou: None,
            center_jitter: 0.2,
            scale_jitter: 0.1,
            cosine: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FinetuneLog {
    pub steps_run: usize,
    pub losses: Vec<f64>,
    /// `(step, train average IoU)` at each evaluation.
    pub evals: Vec<(usize, f64)>,
    pub reached_target: bool,
}

impl FinetuneLog {
    pub fn best_iou(&self) -> Option<f64> {
        self.evals.iter().map(|e| e.1).reduce(f64::max)
    }
}

/// Draws one (template, search, target) triple: template from frame 0,
/// search crop around a jittered copy of the target in a later frame.
pub fn draw_sample<T: Scalar, R: Rng + ?Sized>(
    model: &TrackerModel<T>,
    video: &Video,
    tracker: &TrackerConfig,
    cfg: &FinetuneConfig,
    rng: &mut R,
) -> Result<Sample<T>> {
    let boxes = &video.record.gt_boxes;
    if boxes.len() < 2 || video.frames.len() != boxes.len() {
        bail!(Parameter, "track {:?} is too short to sample", video.id());
    }
    let init = boxes[0];
    let zspec = template_spec(&init, tracker.context_factor, model.config.template_size)?;
    let zsize = model.config.template_size as f64;
    let template = crop_square(&video.frames[0].cast::<T>(), &zspec)?;
    let template_box = image_to_crop(&init, &zspec).clipped(zsize, zsize);

    let t = rng.random_range(1..boxes.len());
    let gt = boxes[t];
    let extent = (gt.w * gt.h).sqrt();
    let j = cfg.center_jitter * extent;
    let dx = if j > 0.0 { rng.random_range(-j..=j) } else { 0.0 };
    let dy = if j > 0.0 { rng.random_range(-j..=j) } else { 0.0 };
    let s = if cfg.scale_jitter > 0.0 {
        rng.random_range(-cfg.scale_jitter..=cfg.scale_jitter).exp()
    } else {
        1.0
    };
    let (cx, cy) = gt.center();
    let anchor = BBox::from_center(cx + dx, cy + dy, gt.w * s, gt.h * s);
    let spec = search_spec(&anchor, tracker.search_factor, model.config.search_size)?;
    let search = crop_square(&video.frames[t].cast::<T>(), &spec)?;
    Ok(Sample {
        template,
        template_box,
        search,
        search_box: image_to_crop(&gt, &spec),
    })
}

/// Tracks every video with a merged copy of `model` and scores it.
pub fn train_iou<T: Scalar>(model: &TrackerModel<T>, videos: &[Video], tracker: &TrackerConfig) -> Result<f64> {
    let merged = model.merged_copy()?;
    let mut preds = Vec::with_capacity(videos.len());
    for v in videos {
        let frames: Vec<Tensor<T>> = v.frames.iter().map(|f| f.cast()).collect();
        let boxes = track_video(&merged, &frames, &v.record.gt_boxes[0], tracker.clone())?;
        preds.push(Prediction::new(v.id(), boxes));
    }
    let records: Vec<_> = videos.iter().map(|v| v.record.clone()).collect();
    Ok(average_iou(&records, &preds, "train")?.average_iou)
}

/// Adam over the trainable tensors of a LoRA-wrapped model.
pub fn finetune<T: Scalar>(
    model: &mut TrackerModel<T>,
    videos: &[Video],
    cfg: &FinetuneConfig,
    tracker: &TrackerConfig,
) -> Result<FinetuneLog> {
    if model.is_merged() {
        bail!(State, "finetune needs a model with unmerged LoRA adapters");
    }
    if videos.is_empty() || cfg.batch == 0 {
        bail!(Parameter, "finetune needs videos and a positive batch size");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(cfg.lr);
    let mut log = FinetuneLog::default();
    for step in 1..=cfg.steps {
        let batch = (0..cfg.batch)
            .map(|_| {
                let v = &videos[rng.random_range(0..videos.len())];
                draw_sample(model, v, tracker, cfg, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let (loss, grads) = batch_loss(model, &batch)
            .map_err(|e| Error::Numeric(format!("step {step}: loss diverged ({e})")))?;
        let loss = loss.as_f64();
        if !loss.is_finite() {
            bail!(Numeric, "step {step}: loss is {loss}");
        }
        opt.lr = cfg.lr_at(step);
        opt.step(model, &grads)?;
        log.losses.push(loss);
        log.steps_run = step;
        debug!("step {step}: loss {loss:.5}");
        if cfg.eval_every > 0 && (step % cfg.eval_every == 0 || step == cfg.steps) {
            let score = train_iou(model, videos, tracker)?;
            info!("step {step}: loss {loss:.4}, train average IoU {score:.4}");
            log.evals.push((step, score));
            if cfg.target_iou.is_some_and(|t| score >= t) {
                log.reached_target = true;
                break;
            }
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_endpoints() {
        let cfg = FinetuneConfig { steps: 100, lr: 1e-3, ..FinetuneConfig::default() };
        assert!((cfg.lr_at(0) - 1e-3).abs() < 1e-15);
        assert!((cfg.lr_at(50) - 1e-3 * 0.525).abs() < 1e-12);
        assert!((cfg.lr_at(100) - 5e-5).abs() < 1e-15);
        let flat = FinetuneConfig { cosine: false, ..cfg };
        assert_eq!(flat.lr_at(70), 1e-3);
    }
}
