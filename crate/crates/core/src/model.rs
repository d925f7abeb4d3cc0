//! The full tracker network: patch embedding, decoupled input embeddings,
//! one-stream encoder and head, plus its training loss and optimizer.

use std::collections::HashMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::embedding::{
    assemble_on_tape, patchify, PositionalEmbedding, ResampleStrategy, TokenTypeIds, TokenTypeTable,
};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{bail, Error, Result};
use crate::head::{cell_center, encode_box, Head, HeadOutput};
use crate::numerics::{Archive, Gradients, Tape, Tensor, Var};
use crate::scalar::Scalar;

const BASE_INIT_STD: f64 = 0.06;
const TABLE_INIT_STD: f64 = 0.02;
/// Weight of the L1 box term relative to the score term.
pub const BOX_LOSS_WEIGHT: f64 = 10.0;

/// Architecture sizes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub name: String,
    pub search_size: usize,
    pub template_size: usize,
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub head_hidden: usize,
}

impl ModelConfig {
    pub const PRESETS: [&'static str; 2] = ["tiny96", "b224"];

    pub fn preset(name: &str) -> Result<Self> {
        let cfg = match name.to_ascii_lowercase().as_str() {
            "tiny96" | "tiny-96" => Self {
                name: "tiny96".into(),
                search_size: 96,
                template_size: 48,
                patch: 16,
                dim: 64,
                depth: 2,
                heads: 4,
                mlp_hidden: 128,
                head_hidden: 64,
            },
            "b224" | "b-224" => Self {
                name: "b224".into(),
                search_size: 224,
                template_size: 112,
                patch: 16,
                dim: 128,
                depth: 4,
                heads: 4,
                mlp_hidden: 256,
                head_hidden: 128,
            },
            other => bail!(Config, "unknown preset {other:?} (known: tiny96, b224)"),
        };
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.search_size % self.patch != 0 || self.template_size % self.patch != 0 {
            bail!(
                Config,
                "patch {} must divide search {} and template {}",
                self.patch,
                self.search_size,
                self.template_size
            );
        }
        if self.template_size > self.search_size {
            bail!(Config, "template larger than search region");
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            bail!(Config, "dim {} is not divisible by {} heads", self.dim, self.heads);
        }
        if self.dim == 0 || self.mlp_hidden == 0 || self.head_hidden == 0 {
            bail!(Config, "widths must be positive");
        }
        Ok(())
    }

    pub fn search_grid(&self) -> (usize, usize) {
        let g = self.search_size / self.patch;
        (g, g)
    }

    pub fn template_grid(&self) -> (usize, usize) {
        let g = self.template_size / self.patch;
        (g, g)
    }

    pub fn template_len(&self) -> usize {
        let (h, w) = self.template_grid();
        h * w
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch * self.patch
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            depth: self.depth,
            dim: self.dim,
            heads: self.heads,
            mlp_hidden: self.mlp_hidden,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self { rank: 8, alpha: 16.0 }
    }
}

/// One training example: a template crop with its target box, and a
/// search crop with the box to predict, both in crop pixels.
#[derive(Clone, Debug)]
pub struct Sample<T> {
    pub template: Tensor<T>,
    pub template_box: BBox,
    pub search: Tensor<T>,
    pub search_box: BBox,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackerModel<T> {
    pub config: ModelConfig,
    pub strategy: ResampleStrategy,
    /// `[3·P·P × D]`, frozen.
    pub patch_proj: Tensor<T>,
    pub pos: PositionalEmbedding<T>,
    pub types: TokenTypeTable<T>,
    pub encoder: Encoder<T>,
    pub head: Head<T>,
}

impl<T: Scalar> TrackerModel<T> {
    /// A base model whose encoder and patch projection stand in for
    /// pretrained weights; head and embedding tables start fresh.
    pub fn random(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let patch_proj = Tensor::randn(
            [config.patch_dim(), config.dim],
            1.0 / (config.patch_dim() as f64).sqrt(),
            &mut rng,
        );
        let encoder = Encoder::random(config.encoder(), BASE_INIT_STD, &mut rng)?;
        let mut pos = PositionalEmbedding::random(config.search_grid(), config.dim, TABLE_INIT_STD, &mut rng);
        pos.q_mut().set_requires_grad(true);
        let mut types = TokenTypeTable::random(config.dim, TABLE_INIT_STD, &mut rng);
        types.embeddings_mut().set_requires_grad(true);
        let head = Head::random(config.dim, config.head_hidden, &mut rng);
        Ok(Self {
            config,
            strategy: ResampleStrategy::default(),
            patch_proj,
            pos,
            types,
            encoder,
            head,
        })
    }

    pub fn wrap_lora<R: Rng + ?Sized>(&mut self, lora: LoraConfig, rng: &mut R) -> Result<()> {
        self.encoder.wrap_lora(lora.rank, lora.alpha, rng)
    }

    pub fn wrapped(mut self, lora: LoraConfig, seed: u64) -> Result<Self> {
        self.wrap_lora(lora, &mut ChaCha8Rng::seed_from_u64(seed))?;
        Ok(self)
    }

    pub fn merge(&mut self) -> Result<()> {
        self.encoder.merge()
    }

    /// A copy with all adapters folded in; plain models are returned as is.
    pub fn merged_copy(&self) -> Result<Self> {
        let mut m = self.clone();
        if m.encoder.has_live_adapters() {
            m.merge()?;
        }
        Ok(m)
    }

    pub fn is_merged(&self) -> bool {
        !self.encoder.has_live_adapters()
    }

    pub fn ids_for(&self, template_box: &BBox) -> Result<TokenTypeIds> {
        crate::embedding::token_type_ids(
            self.config.template_grid(),
            self.config.search_grid(),
            template_box,
            self.config.patch,
        )
    }

    /// Patch rows of a `[3 × S × S]` crop, pixel values shifted to zero mean.
    pub fn patches(&self, crop: &Tensor<T>, size: usize) -> Result<Tensor<T>> {
        if crop.shape() != [3, size, size] {
            bail!(Dimension, "expected a 3x{size}x{size} crop, got {:?}", crop.shape());
        }
        let half = T::lit(0.5);
        let centered = Tensor::from_fn(crop.shape().to_vec(), |i| crop.data()[i] - half);
        patchify(&centered, self.config.patch)
    }

    pub fn template_tokens(&self, template: &Tensor<T>) -> Result<Tensor<T>> {
        crate::numerics::matmul(&self.patches(template, self.config.template_size)?, &self.patch_proj)
    }

    /// Records the forward pass; returns score logits `[N_x × 1]` and
    /// distances `[N_x × 4]`.
    pub fn on_tape<'p>(
        &'p self,
        tape: &mut Tape<'p, T>,
        template_tokens: Var,
        search: &Tensor<T>,
        ids: &TokenTypeIds,
    ) -> Result<(Var, Var)> {
        let proj = tape.param(&self.patch_proj);
        let sp = tape.constant(self.patches(search, self.config.search_size)?);
        let search_tokens = tape.matmul(sp, proj)?;
        let seq = assemble_on_tape(
            tape,
            template_tokens,
            search_tokens,
            self.config.template_grid(),
            &self.pos,
            &self.types,
            ids,
            self.strategy,
        )?;
        let out = self.encoder.on_tape(tape, seq)?;
        let nz = self.config.template_len();
        let (n, _) = tape.value(out).dims2()?;
        let feats = tape.slice_rows(out, nz, n - nz)?;
        self.head.on_tape(tape, feats)
    }

    /// Head output for one search crop given precomputed template tokens.
    pub fn predict(&self, template_tokens: &Tensor<T>, search: &Tensor<T>, ids: &TokenTypeIds) -> Result<HeadOutput<T>> {
        let mut tape = Tape::new();
        let z = tape.constant(template_tokens.clone());
        let (scores, regs) = self.on_tape(&mut tape, z, search, ids)?;
        let (h, w) = self.config.search_grid();
        Ok(HeadOutput {
            scores: tape.value(scores).clone().reshape([h, w])?,
            regs: tape.value(regs).clone().reshape([h, w, 4])?,
        })
    }

    /// Encoder output for an already assembled sequence.
    pub fn encode(&self, seq: &Tensor<T>) -> Result<crate::encoder::EncoderOutput<T>> {
        crate::encoder::encoder_forward(seq, &self.encoder, self.config.template_len(), self.config.search_grid())
    }

    pub fn visit_params<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f("patch_proj".into(), &self.patch_proj);
        f("pos_embed".into(), self.pos.q());
        f("token_type".into(), self.types.embeddings());
        self.encoder.visit_params(f);
        self.head.visit_params(f);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f("patch_proj".into(), &mut self.patch_proj);
        f("pos_embed".into(), self.pos.q_mut());
        f("token_type".into(), self.types.embeddings_mut());
        self.encoder.visit_params_mut(f);
        self.head.visit_params_mut(f);
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut v = Vec::new();
        self.visit_params(&mut |n, t| v.push((n, t)));
        v
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.named_params().into_iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Overwrites one element of the named parameter.
    pub fn set_param_element(&mut self, name: &str, index: usize, value: T) -> Result<()> {
        let mut found = false;
        self.visit_params_mut(&mut |n, t| {
            if n == name && index < t.len() {
                t.data_mut()[index] = value;
                found = true;
            }
        });
        if !found {
            bail!(Parameter, "no element {index} in parameter {name:?}");
        }
        Ok(())
    }

    pub fn trainable_count(&self) -> usize {
        self.named_params().iter().filter(|(_, t)| t.requires_grad()).map(|(_, t)| t.len()).sum()
    }

    pub fn frozen_count(&self) -> usize {
        self.named_params().iter().filter(|(_, t)| !t.requires_grad()).map(|(_, t)| t.len()).sum()
    }

    /// Checksum of every parameter, keyed by name.
    pub fn checksums(&self) -> HashMap<String, (u64, bool)> {
        self.named_params()
            .into_iter()
            .map(|(n, t)| (n, (t.checksum(), t.requires_grad())))
            .collect()
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new();
        self.visit_params(&mut |n, t| a.insert(n, t));
        a
    }

    /// Only the trainable tensors: adapters, head and embedding tables.
    pub fn trainable_archive(&self) -> Archive {
        let mut a = Archive::new();
        self.visit_params(&mut |n, t| {
            if t.requires_grad() {
                a.insert(n, t)
            }
        });
        a
    }

    /// Overwrites parameters from `archive`. Adapter pairs for plain layers
    /// are attached with `alpha`. Unknown names and shape mismatches fail.
    pub fn load_archive(&mut self, archive: &Archive, alpha: f64) -> Result<()> {
        let mut pending: HashMap<(usize, String), (Option<Tensor<T>>, Option<Tensor<T>>)> = HashMap::new();
        let mut known = Vec::new();
        self.visit_params(&mut |n, _| known.push(n));
        for name in archive.names() {
            if known.iter().any(|k| k == name) {
                continue;
            }
            let parsed = name
                .strip_prefix("blocks.")
                .and_then(|r| r.split_once('.'))
                .and_then(|(i, rest)| Some((i.parse::<usize>().ok()?, rest)))
                .and_then(|(i, rest)| {
                    rest.strip_suffix(".lora_a")
                        .map(|l| (i, l, true))
                        .or_else(|| rest.strip_suffix(".lora_b").map(|l| (i, l, false)))
                });
            let Some((block, layer, is_a)) = parsed else {
                bail!(Format, "archive entry {name:?} matches no parameter");
            };
            let t = archive.get_as::<T>(name).expect("listed name");
            let slot = pending.entry((block, layer.to_string())).or_default();
            if is_a {
                slot.0 = Some(t);
            } else {
                slot.1 = Some(t);
            }
        }
        let mut pairs: Vec<_> = pending.into_iter().collect();
        pairs.sort_by(|a, b| a.0.cmp(&b.0));
        for ((block, layer), pair) in pairs {
            let (Some(a), Some(b)) = pair else {
                bail!(Format, "adapter for blocks.{block}.{layer} is missing one half");
            };
            let proj = self
                .encoder
                .projection_mut(block, &layer)
                .ok_or_else(|| Error::Format(format!("no layer blocks.{block}.{layer}")))?;
            proj.attach_adapter(a, b, alpha)?;
        }
        let mut failure = None;
        self.visit_params_mut(&mut |n, t| {
            if failure.is_some() {
                return;
            }
            if let Some(src) = archive.get(&n) {
                if src.shape() != t.shape() {
                    failure = Some(Error::Format(format!(
                        "{n}: archive shape {:?}, model shape {:?}",
                        src.shape(),
                        t.shape()
                    )));
                    return;
                }
                let grad = t.requires_grad();
                *t = src.cast::<T>().with_requires_grad(grad);
            }
        });
        match failure {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

/// Score and box targets for a search box in crop pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    pub positive: usize,
    pub ltrb: [f64; 4],
}

pub fn targets_for(config: &ModelConfig, search_box: &BBox) -> Targets {
    let (gh, gw) = config.search_grid();
    let size = config.search_size as f64;
    let (cx, cy) = search_box.center();
    let cell = |v: f64, n: usize| ((v / size * n as f64).floor().max(0.0) as usize).min(n - 1);
    let (i, j) = (cell(cy, gh), cell(cx, gw));
    Targets {
        positive: i * gw + j,
        ltrb: encode_box(search_box, cell_center(i, j, (gh, gw), size), size),
    }
}

/// `bce(scores, one-hot positive) + λ·L1(ltrb)`, the L1 term taken over the
/// positive cell and every cell whose center lies inside the target. The
/// positive cell's weight balances all negatives together.
pub fn loss_on_tape<'p, T: Scalar>(
    model: &'p TrackerModel<T>,
    tape: &mut Tape<'p, T>,
    sample: &Sample<T>,
) -> Result<Var> {
    let ids = model.ids_for(&sample.template_box)?;
    let proj = tape.param(&model.patch_proj);
    let zp = tape.constant(model.patches(&sample.template, model.config.template_size)?);
    let z = tape.matmul(zp, proj)?;
    let (scores, regs) = model.on_tape(tape, z, &sample.search, &ids)?;
    let n = tape.value(scores).len();
    let t = targets_for(&model.config, &sample.search_box);
    let mut target = vec![T::zero(); n];
    target[t.positive] = T::one();
    let mut weights = vec![T::one(); n];
    weights[t.positive] = T::from_usize(n - 1).unwrap();
    let cls = tape.bce_with_logits(scores, &target, &weights)?;
    let (gh, gw) = model.config.search_grid();
    let size = model.config.search_size as f64;
    let mut rows = Vec::new();
    let mut goal = Vec::new();
    for i in 0..gh {
        for j in 0..gw {
            let c = cell_center(i, j, (gh, gw), size);
            if i * gw + j == t.positive || sample.search_box.contains_point(c.0, c.1) {
                rows.push(tape.slice_rows(regs, i * gw + j, 1)?);
                goal.extend(encode_box(&sample.search_box, c, size).map(T::lit));
            }
        }
    }
    let inside = tape.concat_rows(&rows)?;
    let reg = tape.l1_loss(inside, &goal)?;
    let reg = tape.scale(reg, T::lit(BOX_LOSS_WEIGHT))?;
    tape.add(cls, reg)
}

/// Mean loss over `samples` without the backward pass.
pub fn batch_loss_value<T: Scalar>(model: &TrackerModel<T>, samples: &[Sample<T>]) -> Result<T> {
    if samples.is_empty() {
        bail!(Contract, "empty batch");
    }
    let mut total = T::zero();
    for s in samples {
        let mut tape = Tape::new();
        let l = loss_on_tape(model, &mut tape, s)?;
        total += tape.value(l).item()?;
    }
    Ok(total / T::from_usize(samples.len()).unwrap())
}

/// Mean loss over `samples` and its gradients.
pub fn batch_loss<T: Scalar>(model: &TrackerModel<T>, samples: &[Sample<T>]) -> Result<(T, Gradients<T>)> {
    if samples.is_empty() {
        bail!(Contract, "empty batch");
    }
    let mut tape = Tape::new();
    let mut total = None;
    for s in samples {
        let l = loss_on_tape(model, &mut tape, s)?;
        total = Some(match total {
            None => l,
            Some(acc) => tape.add(acc, l)?,
        });
    }
    let mean = tape.scale(total.unwrap(), T::one() / T::from_usize(samples.len()).unwrap())?;
    let value = tape.value(mean).item()?;
    Ok((value, tape.backward(mean)?))
}

/// Adam over every parameter with `requires_grad` set.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    moments: HashMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    pub fn step(&mut self, model: &mut TrackerModel<T>, grads: &Gradients<T>) -> Result<()> {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        let lr = self.lr;
        let eps = self.eps;
        let moments = &mut self.moments;
        model.visit_params_mut(&mut |name, t| {
            if !t.requires_grad() {
                return;
            }
            let Some(g) = grads.of(t) else { return };
            let g = g.to_vec();
            let (m, v) = moments
                .entry(name)
                .or_insert_with(|| (vec![T::zero(); g.len()], vec![T::zero(); g.len()]));
            if lr == 0.0 {
                return;
            }
            for (k, w) in t.data_mut().iter_mut().enumerate() {
                let gk = g[k];
                m[k] = T::lit(b1) * m[k] + T::lit(1.0 - b1) * gk;
                v[k] = T::lit(b2) * v[k] + T::lit(1.0 - b2) * gk * gk;
                let mh = m[k].as_f64() / c1;
                let vh = v[k].as_f64() / c2;
                *w -= T::lit(lr * mh / (vh.sqrt() + eps));
            }
        });
        Ok(())
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} (search {}, template {}, patch {}, dim {}, depth {}, heads {})",
            self.name, self.search_size, self.template_size, self.patch, self.dim, self.depth, self.heads
        )
    }
}
