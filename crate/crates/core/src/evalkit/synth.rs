//! Synthetic tracking videos: a solid rectangle moving over static noise.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{bail, Result};
use crate::evalkit::records::{Prediction, TrackRecord};
use crate::frames::{frames_to_archive, load_frames};
use crate::numerics::Tensor;

/// Saturated target colors; none has equal channels, so no target pixel can
/// coincide with the gray background.
pub const PALETTE: [[f32; 3]; 6] = [
    [1.0, 0.0, 0.0],
    [0.0, 0.75, 0.0],
    [0.0, 0.0, 1.0],
    [1.0, 0.75, 0.0],
    [1.0, 0.0, 1.0],
    [0.0, 0.75, 1.0],
];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Motion {
    Static,
    /// Constant integer displacement per frame.
    Linear { dx: i64, dy: i64 },
    /// Rounded sine offsets with the given amplitudes and period in frames.
    Sinusoidal { amp_x: f64, amp_y: f64, period: f64 },
}

impl Motion {
    fn offset(&self, t: usize) -> (i64, i64) {
        match *self {
            Motion::Static => (0, 0),
            Motion::Linear { dx, dy } => (dx * t as i64, dy * t as i64),
            Motion::Sinusoidal { amp_x, amp_y, period } => {
                let a = std::f64::consts::TAU * t as f64 / period;
                ((amp_x * a.sin()).round() as i64, (amp_y * (a + 1.0).sin() - amp_y * 1f64.sin()).round() as i64)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub frames: usize,
    /// `(width, height)`.
    pub image_size: (usize, usize),
    pub motion: Motion,
    /// `(width, height)`.
    pub target_size: (usize, usize),
    pub seed: u64,
    /// Top-left corner at frame 0; drawn at random when absent.
    #[serde(default)]
    pub start: Option<(i64, i64)>,
}

/// A track together with its decoded frames.
#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    pub record: TrackRecord,
    pub frames: Vec<Tensor<f32>>,
}

impl Video {
    pub fn load(record: TrackRecord) -> Result<Self> {
        let frames = load_frames(&record.frame_source)?;
        if frames.len() != record.gt_boxes.len() {
            bail!(
                Format,
                "track {:?}: {} frames but {} boxes",
                record.video_id,
                frames.len(),
                record.gt_boxes.len()
            );
        }
        Ok(Self { record, frames })
    }

    pub fn id(&self) -> &str {
        &self.record.video_id
    }
}

pub fn generate_synthetic(video_id: &str, cfg: &SynthConfig) -> Result<Video> {
    let (iw, ih) = cfg.image_size;
    let (tw, th) = cfg.target_size;
    if cfg.frames == 0 {
        bail!(Parameter, "need at least one frame");
    }
    if tw == 0 || th == 0 || tw > iw || th > ih {
        bail!(Parameter, "target {tw}x{th} does not fit a {iw}x{ih} image");
    }
    if let Motion::Sinusoidal { period, .. } = cfg.motion {
        if !(period > 0.0) {
            bail!(Parameter, "sinusoid period must be positive");
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let offsets: Vec<(i64, i64)> = (0..cfg.frames).map(|t| cfg.motion.offset(t)).collect();
    let span = |axis: fn(&(i64, i64)) -> i64, size: usize, target: usize| -> Option<(i64, i64)> {
        let lo = offsets.iter().map(axis).min().unwrap();
        let hi = offsets.iter().map(axis).max().unwrap();
        let (first, last) = (-lo, size as i64 - target as i64 - hi);
        (first <= last).then_some((first, last))
    };
    let (Some(xr), Some(yr)) = (span(|o| o.0, iw, tw), span(|o| o.1, ih, th)) else {
        bail!(Parameter, "a {tw}x{th} target moving {:?} leaves the {iw}x{ih} image", cfg.motion);
    };
    let (x0, y0) = match cfg.start {
        Some((x, y)) => {
            if x < xr.0 || x > xr.1 || y < yr.0 || y > yr.1 {
                bail!(Parameter, "start ({x}, {y}) lets the target leave the image");
            }
            (x, y)
        }
        None => (rng.random_range(xr.0..=xr.1), rng.random_range(yr.0..=yr.1)),
    };
    let color = PALETTE[rng.random_range(0..PALETTE.len())];
    let plane = iw * ih;
    let mut background = vec![0f32; 3 * plane];
    for k in 0..plane {
        let g: f32 = rng.random_range(0.3..0.7);
        for c in 0..3 {
            background[c * plane + k] = g;
        }
    }
    let mut frames = Vec::with_capacity(cfg.frames);
    let mut boxes = Vec::with_capacity(cfg.frames);
    for &(ox, oy) in &offsets {
        let (x, y) = ((x0 + ox) as usize, (y0 + oy) as usize);
        let mut px = background.clone();
        for c in 0..3 {
            for row in y..y + th {
                px[c * plane + row * iw + x..c * plane + row * iw + x + tw].fill(color[c]);
            }
        }
        frames.push(Tensor::new([3, ih, iw], px)?);
        boxes.push(BBox::new(x as f64, y as f64, tw as f64, th as f64));
    }
    Ok(Video {
        record: TrackRecord {
            video_id: video_id.to_string(),
            frame_source: PathBuf::from(format!("{video_id}.frames")),
            gt_boxes: boxes,
        },
        frames,
    })
}

/// `count` videos alternating linear and sinusoidal motion (or all static),
/// with target sizes and speeds drawn from `seed`.
pub fn synthetic_suite(count: usize, frames: usize, image_size: (usize, usize), static_only: bool, seed: u64) -> Result<Vec<Video>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let tw = rng.random_range(14..=30);
            let th = rng.random_range(14..=30);
            let motion = if static_only {
                Motion::Static
            } else if i % 2 == 0 {
                let mut d = || rng.random_range(-2i64..=2);
                let (dx, dy) = (d(), d());
                Motion::Linear { dx, dy }
            } else {
                Motion::Sinusoidal {
                    amp_x: rng.random_range(4.0..16.0),
                    amp_y: rng.random_range(4.0..16.0),
                    period: rng.random_range(12.0..30.0),
                }
            };
            let cfg = SynthConfig {
                frames,
                image_size,
                motion,
                target_size: (tw, th),
                seed: rng.random(),
                start: None,
            };
            generate_synthetic(&format!("synth-{i:03}"), &cfg)
        })
        .collect()
}

/// Writes each video as `<id>.frames` under `dir` plus `annotations.jsonl`.
pub fn save_suite(videos: &[Video], dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut records = Vec::with_capacity(videos.len());
    for v in videos {
        let name = format!("{}.frames", v.id());
        frames_to_archive(&v.frames)?.save(dir.join(&name))?;
        let mut r = v.record.clone();
        r.frame_source = PathBuf::from(name);
        records.push(r);
    }
    let path = dir.join("annotations.jsonl");
    crate::evalkit::records::save_records(&records, &path)?;
    Ok(path)
}

/// Predicts the initial box for every frame.
pub fn dummy_static(records: &[TrackRecord]) -> Vec<Prediction> {
    records
        .iter()
        .map(|r| {
            let init = r.gt_boxes.first().copied().unwrap_or_default();
            Prediction::new(r.video_id.clone(), vec![init; r.gt_boxes.len()])
        })
        .collect()
}
