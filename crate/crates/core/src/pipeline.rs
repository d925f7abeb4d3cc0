//! Siamese tracking loop: crops, coordinate maps and per-frame inference.

use std::fmt;
use std::sync::Arc;

use log::warn;

use crate::bbox::BBox;
use crate::embedding::TokenTypeIds;
use crate::error::{bail, Error, Result};
use crate::head::{decode_boxes, select_best_index};
use crate::model::TrackerModel;
use crate::numerics::Tensor;
use crate::scalar::Scalar;

pub const DEFAULT_CONTEXT_FACTOR: f64 = 2.0;
pub const DEFAULT_SEARCH_FACTOR: f64 = 4.0;
const MIN_EXTENT: f64 = 1e-3;

/// Axis-aligned square window `(center, side)` resampled to `out_size²`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropSpec {
    pub cx: f64,
    pub cy: f64,
    pub side: f64,
    pub out_size: usize,
}

impl CropSpec {
    pub fn new(cx: f64, cy: f64, side: f64, out_size: usize) -> Result<Self> {
        if !(side > 0.0 && side.is_finite()) || !cx.is_finite() || !cy.is_finite() {
            bail!(Parameter, "crop side must be positive and finite, got {side}");
        }
        if out_size == 0 {
            bail!(Parameter, "crop output size must be at least 1");
        }
        Ok(Self { cx, cy, side, out_size })
    }

    pub fn scale(&self) -> f64 {
        self.out_size as f64 / self.side
    }

    /// Top-left corner of the window in image pixels.
    pub fn origin(&self) -> (f64, f64) {
        (self.cx - self.side / 2.0, self.cy - self.side / 2.0)
    }
}

fn image_dims<T: Scalar>(image: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match image.shape() {
        &[c, h, w] if c > 0 && h > 0 && w > 0 => Ok((c, h, w)),
        s => bail!(Dimension, "expected a non-empty C×H×W image, got {s:?}"),
    }
}

/// Bilinear crop; samples falling outside the image take the per-channel
/// image mean.
pub fn crop_square<T: Scalar>(image: &Tensor<T>, spec: &CropSpec) -> Result<Tensor<T>> {
    if !(spec.side > 0.0) {
        bail!(Parameter, "crop side must be positive, got {}", spec.side);
    }
    if spec.out_size == 0 {
        bail!(Parameter, "crop output size must be at least 1");
    }
    let (c, h, w) = image_dims(image)?;
    let out = spec.out_size;
    let px = image.data();
    let (x0, y0) = spec.origin();
    let step = spec.side / out as f64;
    // Source coordinates in pixel-center convention and their weights.
    let taps = |n: usize, origin: f64| -> Vec<(isize, f64)> {
        (0..n)
            .map(|u| {
                let s = origin + (u as f64 + 0.5) * step - 0.5;
                let f = s.floor();
                (f as isize, s - f)
            })
            .collect()
    };
    let xs = taps(out, x0);
    let ys = taps(out, y0);
    let mut data = Vec::with_capacity(c * out * out);
    for ch in 0..c {
        let plane = &px[ch * h * w..(ch + 1) * h * w];
        let mean = plane.iter().map(|v| v.as_f64()).sum::<f64>() / (h * w) as f64;
        let at = |yi: isize, xi: isize| -> f64 {
            if yi < 0 || xi < 0 || yi >= h as isize || xi >= w as isize {
                mean
            } else {
                plane[yi as usize * w + xi as usize].as_f64()
            }
        };
        for &(yi, fy) in &ys {
            for &(xi, fx) in &xs {
                let top = at(yi, xi) * (1.0 - fx) + at(yi, xi + 1) * fx;
                let bottom = at(yi + 1, xi) * (1.0 - fx) + at(yi + 1, xi + 1) * fx;
                data.push(T::lit(top * (1.0 - fy) + bottom * fy));
            }
        }
    }
    Tensor::new([c, out, out], data)
}

fn context_side(b: &BBox, factor: f64) -> Result<f64> {
    if !(factor > 0.0) {
        bail!(Parameter, "crop factor must be positive, got {factor}");
    }
    if !(b.is_finite() && b.w > 0.0 && b.h > 0.0) {
        bail!(Parameter, "box {b:?} has no area");
    }
    Ok(factor * (b.w * b.h).sqrt())
}

/// Square context crop of side `f·sqrt(w·h)` around the box center.
pub fn template_spec(init_box: &BBox, context_factor: f64, out_size: usize) -> Result<CropSpec> {
    let side = context_side(init_box, context_factor)?;
    let (cx, cy) = init_box.center();
    CropSpec::new(cx, cy, side, out_size)
}

/// Search window of side `g·sqrt(w·h)` around the previous box.
pub fn search_spec(prev_box: &BBox, search_factor: f64, out_size: usize) -> Result<CropSpec> {
    let side = context_side(prev_box, search_factor)?;
    let (cx, cy) = prev_box.center();
    CropSpec::new(cx, cy, side, out_size)
}

pub fn image_to_crop(b: &BBox, spec: &CropSpec) -> BBox {
    let (x0, y0) = spec.origin();
    let s = spec.scale();
    BBox::new((b.x - x0) * s, (b.y - y0) * s, b.w * s, b.h * s)
}

/// Inverse of [`image_to_crop`] without clamping.
pub fn crop_to_image(b: &BBox, spec: &CropSpec) -> BBox {
    let (x0, y0) = spec.origin();
    let s = spec.scale();
    BBox::new(b.x / s + x0, b.y / s + y0, b.w / s, b.h / s)
}

/// Maps a crop box back to the image, clamps it to `bounds = (width,
/// height)` and floors its extents at 1e-3 px.
pub fn box_to_image(box_in_crop: &BBox, spec: &CropSpec, bounds: (f64, f64)) -> BBox {
    clamp_box(&crop_to_image(box_in_crop, spec), bounds)
}

pub fn clamp_box(b: &BBox, (width, height): (f64, f64)) -> BBox {
    let x = b.x.clamp(0.0, (width - MIN_EXTENT).max(0.0));
    let y = b.y.clamp(0.0, (height - MIN_EXTENT).max(0.0));
    let r = b.right().clamp(0.0, width);
    let btm = b.bottom().clamp(0.0, height);
    BBox::new(x, y, (r - x).max(MIN_EXTENT), (btm - y).max(MIN_EXTENT))
}

/// What a post-processing hook sees besides the box.
#[derive(Clone, Copy, Debug)]
pub struct PostContext {
    pub spec: CropSpec,
    pub image_size: (f64, f64),
    pub frame: usize,
}

/// Refines the selected box in search-crop coordinates.
pub trait Postprocess: Send + Sync {
    fn name(&self) -> &str;
    fn refine(&self, b: BBox, score: f64, ctx: &PostContext) -> Result<BBox>;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Identity;

impl Postprocess for Identity {
    fn name(&self) -> &str {
        "identity"
    }

    fn refine(&self, b: BBox, _score: f64, _ctx: &PostContext) -> Result<BBox> {
        Ok(b)
    }
}

/// Clips the crop box to the part of the crop that lies inside the image.
#[derive(Clone, Copy, Debug, Default)]
pub struct ClampToImage;

impl Postprocess for ClampToImage {
    fn name(&self) -> &str {
        "clamp-to-image"
    }

    fn refine(&self, b: BBox, _score: f64, ctx: &PostContext) -> Result<BBox> {
        let img = image_to_crop(&BBox::new(0.0, 0.0, ctx.image_size.0, ctx.image_size.1), &ctx.spec);
        let inside = b.x >= img.x && b.y >= img.y && b.right() <= img.right() && b.bottom() <= img.bottom();
        if inside {
            return Ok(b);
        }
        let x = b.x.clamp(img.x, img.right());
        let y = b.y.clamp(img.y, img.bottom());
        let r = b.right().clamp(img.x, img.right());
        let btm = b.bottom().clamp(img.y, img.bottom());
        Ok(BBox::new(x, y, r - x, btm - y))
    }
}

#[derive(Clone)]
pub struct TrackerConfig {
    pub context_factor: f64,
    pub search_factor: f64,
    /// Permit adapters that are not folded in; only useful for comparisons.
    pub allow_unmerged: bool,
    pub postprocess: Option<Arc<dyn Postprocess>>,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            context_factor: DEFAULT_CONTEXT_FACTOR,
            search_factor: DEFAULT_SEARCH_FACTOR,
            allow_unmerged: false,
            postprocess: None,
        }
    }
}

impl fmt::Debug for TrackerConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TrackerConfig")
            .field("context_factor", &self.context_factor)
            .field("search_factor", &self.search_factor)
            .field("allow_unmerged", &self.allow_unmerged)
            .field("postprocess", &self.postprocess.as_ref().map(|p| p.name().to_string()))
            .finish()
    }
}

/// Per-video tracking state over a shared model.
#[derive(Debug)]
pub struct TrackerState<'m, T: Scalar> {
    model: &'m TrackerModel<T>,
    template_tokens: Tensor<T>,
    ids: TokenTypeIds,
    template_box: BBox,
    prev: BBox,
    image_size: (usize, usize),
    config: TrackerConfig,
    frame: usize,
    flagged: Vec<usize>,
    last_score: Option<f64>,
}

pub fn track_init<'m, T: Scalar>(
    model: &'m TrackerModel<T>,
    first_frame: &Tensor<T>,
    init_box: &BBox,
    config: TrackerConfig,
) -> Result<TrackerState<'m, T>> {
    if !config.allow_unmerged && !model.is_merged() {
        bail!(State, "tracker needs a merged model");
    }
    let (_, h, w) = image_dims(first_frame)?;
    let (wf, hf) = (w as f64, h as f64);
    let b = init_box;
    if !(b.is_finite() && b.w > 0.0 && b.h > 0.0) {
        bail!(Parameter, "initial box {b:?} has no area");
    }
    if b.x < 0.0 || b.y < 0.0 || b.right() > wf || b.bottom() > hf {
        bail!(Parameter, "initial box {b:?} is outside the {w}x{h} frame");
    }
    first_frame.ensure_finite("first frame")?;
    let spec = template_spec(b, config.context_factor, model.config.template_size)?;
    let crop = crop_square(first_frame, &spec)?;
    let size = model.config.template_size as f64;
    let template_box = image_to_crop(b, &spec).clipped(size, size);
    let ids = model.ids_for(&template_box)?;
    let template_tokens = model.template_tokens(&crop)?;
    Ok(TrackerState {
        model,
        template_tokens,
        ids,
        template_box,
        prev: *b,
        image_size: (w, h),
        config,
        frame: 0,
        flagged: Vec::new(),
        last_score: None,
    })
}

impl<'m, T: Scalar> TrackerState<'m, T> {
    pub fn prev(&self) -> BBox {
        self.prev
    }

    pub fn template_tokens(&self) -> &Tensor<T> {
        &self.template_tokens
    }

    pub fn token_ids(&self) -> &TokenTypeIds {
        &self.ids
    }

    pub fn template_box(&self) -> BBox {
        self.template_box
    }

    /// Indices of frames whose output was unusable.
    pub fn flagged(&self) -> &[usize] {
        &self.flagged
    }

    pub fn last_score(&self) -> Option<f64> {
        self.last_score
    }

    /// Tracks one frame. Non-finite inputs or outputs flag the frame and
    /// return the previous box unchanged.
    pub fn step(&mut self, frame: &Tensor<T>) -> Result<BBox> {
        self.frame += 1;
        let (_, h, w) = image_dims(frame)?;
        if (w, h) != self.image_size {
            bail!(
                Dimension,
                "frame is {w}x{h}, tracker was initialized on {}x{}",
                self.image_size.0,
                self.image_size.1
            );
        }
        match self.infer(frame) {
            Ok(b) => {
                self.prev = b;
                Ok(b)
            }
            Err(Error::Numeric(msg)) => {
                warn!("frame {}: {msg}; keeping previous box", self.frame);
                self.flagged.push(self.frame);
                Ok(self.prev)
            }
            Err(e) => Err(e),
        }
    }

    fn infer(&mut self, frame: &Tensor<T>) -> Result<BBox> {
        frame.ensure_finite("frame")?;
        let model = self.model;
        let spec = search_spec(&self.prev, self.config.search_factor, model.config.search_size)?;
        let crop = crop_square(frame, &spec)?;
        let out = model.predict(&self.template_tokens, &crop, &self.ids)?;
        if !out.is_finite() {
            bail!(Numeric, "non-finite head output");
        }
        let cands = decode_boxes(&out, model.config.search_size as f64)?;
        let best = select_best_index(&cands)?;
        let (mut b, score) = cands[best];
        let bounds = (self.image_size.0 as f64, self.image_size.1 as f64);
        if let Some(hook) = &self.config.postprocess {
            let ctx = PostContext {
                spec,
                image_size: bounds,
                frame: self.frame,
            };
            match hook.refine(b, score, &ctx) {
                Ok(r) if r.is_finite() => b = r,
                Ok(_) => warn!("{} returned a non-finite box; ignored", hook.name()),
                Err(e) => warn!("{} failed: {e}; ignored", hook.name()),
            }
        }
        let out = box_to_image(&b, &spec, bounds);
        if !out.is_finite() {
            bail!(Numeric, "non-finite box");
        }
        self.last_score = Some(score);
        Ok(out)
    }
}

pub fn track_step<T: Scalar>(state: &mut TrackerState<'_, T>, frame: &Tensor<T>) -> Result<BBox> {
    state.step(frame)
}

/// Tracks a whole video; the first prediction is the initial box.
pub fn track_video<T: Scalar>(
    model: &TrackerModel<T>,
    frames: &[Tensor<T>],
    init_box: &BBox,
    config: TrackerConfig,
) -> Result<Vec<BBox>> {
    let Some(first) = frames.first() else {
        bail!(Contract, "video has no frames");
    };
    let mut state = track_init(model, first, init_box, config)?;
    let mut out = Vec::with_capacity(frames.len());
    out.push(*init_box);
    for f in &frames[1..] {
        out.push(state.step(f)?);
    }
    Ok(out)
}
