//! One-stream ViT encoder with LoRA-adapted linear layers.
//!
//! Template and search tokens share every block and attend to each other
//! without masking. Each projection is either a plain [`Linear`] or a
//! [`LoraLinear`] carrying a frozen base weight plus a trainable low-rank
//! update that can be folded into the base weight.

use rand::Rng;

use crate::error::{bail, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::scalar::Scalar;

pub const LORA_INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-6;

/// Plain affine layer, weight stored `[out × in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let (out, _) = weight.dims2()?;
        if bias.len() != out {
            bail!(Dimension, "bias of length {} for {out} outputs", bias.len());
        }
        Ok(Self { weight, bias })
    }

    pub fn random<R: Rng + ?Sized>(input: usize, output: usize, std: f64, rng: &mut R) -> Self {
        Self {
            weight: Tensor::randn([output, input], std, rng),
            bias: Tensor::zeros([output]),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Tensor::zeros([output, input]),
            bias: Tensor::zeros([output]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn set_trainable(&mut self, on: bool) {
        self.weight.set_requires_grad(on);
        self.bias.set_requires_grad(on);
    }

    pub fn on_tape<'p>(&'p self, tape: &mut Tape<'p, T>, x: Var) -> Result<Var> {
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        let y = tape.matmul_nt(x, w)?;
        tape.add_row(y, b)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = self.on_tape(&mut tape, xv)?;
        Ok(tape.value(y).clone())
    }
}

/// Frozen base layer plus trainable rank-`r` pair: `y = x·Wᵀ + (α/r)·x·Aᵀ·Bᵀ + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraLinear<T> {
    w: Tensor<T>,
    bias: Tensor<T>,
    a: Tensor<T>,
    b: Tensor<T>,
    rank: usize,
    alpha: f64,
    merged: bool,
}

/// Wraps `layer` with an adapter: `A ~ N(0, 0.02²)`, `B = 0`, base frozen.
pub fn lora_wrap<T: Scalar, R: Rng + ?Sized>(
    layer: Linear<T>,
    rank: usize,
    alpha: f64,
    rng: &mut R,
) -> Result<LoraLinear<T>> {
    let (input, output) = (layer.in_dim(), layer.out_dim());
    if rank < 1 || rank > input.min(output) {
        bail!(
            Parameter,
            "LoRA rank {rank} outside 1..={} for a {input}->{output} layer",
            input.min(output)
        );
    }
    if !(alpha.is_finite() && alpha > 0.0) {
        bail!(Parameter, "LoRA alpha must be positive, got {alpha}");
    }
    let a = Tensor::randn([rank, input], LORA_INIT_STD, rng).with_requires_grad(true);
    let b = Tensor::zeros([output, rank]).with_requires_grad(true);
    LoraLinear::from_parts(layer, a, b, alpha)
}

/// Folds the adapter into the base weight.
pub fn lora_merge<T: Scalar>(mut layer: LoraLinear<T>) -> Result<LoraLinear<T>> {
    layer.merge()?;
    Ok(layer)
}

impl<T: Scalar> LoraLinear<T> {
    pub fn from_parts(layer: Linear<T>, a: Tensor<T>, b: Tensor<T>, alpha: f64) -> Result<Self> {
        let (input, output) = (layer.in_dim(), layer.out_dim());
        let (rank, a_in) = a.dims2()?;
        let (b_out, b_rank) = b.dims2()?;
        if a_in != input || b_out != output || b_rank != rank || rank == 0 {
            bail!(
                Dimension,
                "adapter A {:?} / B {:?} does not fit a {input}->{output} layer",
                a.shape(),
                b.shape()
            );
        }
        let Linear { weight, bias } = layer;
        Ok(Self {
            w: weight.with_requires_grad(false),
            bias: bias.with_requires_grad(false),
            a: a.with_requires_grad(true),
            b: b.with_requires_grad(true),
            rank,
            alpha,
            merged: false,
        })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn scaling(&self) -> T {
        T::lit(self.alpha / self.rank as f64)
    }

    pub fn is_merged(&self) -> bool {
        self.merged
    }

    pub fn weight(&self) -> &Tensor<T> {
        &self.w
    }

    pub fn bias(&self) -> &Tensor<T> {
        &self.bias
    }

    pub fn lora_a(&self) -> &Tensor<T> {
        &self.a
    }

    pub fn lora_b(&self) -> &Tensor<T> {
        &self.b
    }

    pub fn lora_a_mut(&mut self) -> &mut Tensor<T> {
        &mut self.a
    }

    pub fn lora_b_mut(&mut self) -> &mut Tensor<T> {
        &mut self.b
    }

    pub fn trainable_count(&self) -> usize {
        self.a.len() + self.b.len()
    }

    pub fn frozen_count(&self) -> usize {
        self.w.len() + self.bias.len()
    }

    /// `w ← w + (α/r)·B·A`; afterwards the adapter no longer participates.
    pub fn merge(&mut self) -> Result<()> {
        if self.merged {
            bail!(State, "adapter already merged");
        }
        let (out, input) = self.w.dims2()?;
        let s = self.scaling();
        let (a, b) = (self.a.data(), self.b.data());
        let w = self.w.data_mut();
        for o in 0..out {
            for i in 0..input {
                let mut delta = T::zero();
                for k in 0..self.rank {
                    delta += b[o * self.rank + k] * a[k * input + i];
                }
                w[o * input + i] += s * delta;
            }
        }
        self.w.ensure_finite("merged weight")?;
        self.merged = true;
        self.a.set_requires_grad(false);
        self.b.set_requires_grad(false);
        Ok(())
    }

    pub fn on_tape<'p>(&'p self, tape: &mut Tape<'p, T>, x: Var) -> Result<Var> {
        let w = tape.param(&self.w);
        let bias = tape.param(&self.bias);
        let y = tape.matmul_nt(x, w)?;
        let base = tape.add_row(y, bias)?;
        if self.merged {
            return Ok(base);
        }
        let a = tape.param(&self.a);
        let b = tape.param(&self.b);
        let xa = tape.matmul_nt(x, a)?;
        let xab = tape.matmul_nt(xa, b)?;
        let update = tape.scale(xab, self.scaling())?;
        tape.add(base, update)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = self.on_tape(&mut tape, xv)?;
        Ok(tape.value(y).clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Projection<T> {
    Plain(Linear<T>),
    Lora(LoraLinear<T>),
}

impl<T: Scalar> Projection<T> {
    pub fn on_tape<'p>(&'p self, tape: &mut Tape<'p, T>, x: Var) -> Result<Var> {
        match self {
            Self::Plain(l) => l.on_tape(tape, x),
            Self::Lora(l) => l.on_tape(tape, x),
        }
    }

    pub fn in_dim(&self) -> usize {
        match self {
            Self::Plain(l) => l.in_dim(),
            Self::Lora(l) => l.w.shape()[1],
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            Self::Plain(l) => l.out_dim(),
            Self::Lora(l) => l.w.shape()[0],
        }
    }

    /// True when this projection has an adapter that is not folded in.
    pub fn has_live_adapter(&self) -> bool {
        matches!(self, Self::Lora(l) if !l.merged)
    }

    fn wrap<R: Rng + ?Sized>(&mut self, rank: usize, alpha: f64, rng: &mut R) -> Result<()> {
        if let Self::Plain(l) = self {
            let base = std::mem::replace(l, Linear::zeros(0, 0));
            *self = Self::Lora(lora_wrap(base, rank, alpha, rng)?);
        }
        Ok(())
    }

    fn merge(&mut self) -> Result<()> {
        match self {
            Self::Lora(l) => l.merge(),
            Self::Plain(_) => Ok(()),
        }
    }

    /// Installs an adapter from stored tensors, replacing any existing one.
    pub fn attach_adapter(&mut self, a: Tensor<T>, b: Tensor<T>, alpha: f64) -> Result<()> {
        let base = match self {
            Self::Plain(l) => l.clone(),
            Self::Lora(l) if !l.merged => Linear {
                weight: l.w.clone(),
                bias: l.bias.clone(),
            },
            Self::Lora(_) => bail!(State, "cannot attach an adapter to a merged layer"),
        };
        *self = Self::Lora(LoraLinear::from_parts(base, a, b, alpha)?);
        Ok(())
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        match self {
            Self::Plain(l) => {
                f(format!("{prefix}.weight"), &l.weight);
                f(format!("{prefix}.bias"), &l.bias);
            }
            Self::Lora(l) => {
                f(format!("{prefix}.weight"), &l.w);
                f(format!("{prefix}.bias"), &l.bias);
                if !l.merged {
                    f(format!("{prefix}.lora_a"), &l.a);
                    f(format!("{prefix}.lora_b"), &l.b);
                }
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        match self {
            Self::Plain(l) => {
                f(format!("{prefix}.weight"), &mut l.weight);
                f(format!("{prefix}.bias"), &mut l.bias);
            }
            Self::Lora(l) => {
                f(format!("{prefix}.weight"), &mut l.w);
                f(format!("{prefix}.bias"), &mut l.bias);
                if !l.merged {
                    f(format!("{prefix}.lora_a"), &mut l.a);
                    f(format!("{prefix}.lora_b"), &mut l.b);
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
}

/// Pre-norm ViT block: LN → MHSA → residual → LN → MLP(GELU) → residual.
#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub norm1_gamma: Tensor<T>,
    pub norm1_beta: Tensor<T>,
    pub q: Projection<T>,
    pub k: Projection<T>,
    pub v: Projection<T>,
    pub o: Projection<T>,
    pub norm2_gamma: Tensor<T>,
    pub norm2_beta: Tensor<T>,
    pub fc1: Projection<T>,
    pub fc2: Projection<T>,
    pub heads: usize,
}

impl<T: Scalar> Block<T> {
    pub fn random<R: Rng + ?Sized>(dim: usize, heads: usize, mlp_hidden: usize, std: f64, rng: &mut R) -> Self {
        let mut lin = |i, o| Projection::Plain(Linear::random(i, o, std, rng));
        Self {
            norm1_gamma: Tensor::full([dim], T::one()),
            norm1_beta: Tensor::zeros([dim]),
            q: lin(dim, dim),
            k: lin(dim, dim),
            v: lin(dim, dim),
            o: lin(dim, dim),
            norm2_gamma: Tensor::full([dim], T::one()),
            norm2_beta: Tensor::zeros([dim]),
            fc1: lin(dim, mlp_hidden),
            fc2: lin(mlp_hidden, dim),
            heads,
        }
    }

    /// All weights, biases and norm scales zero.
    pub fn zeros(dim: usize, heads: usize, mlp_hidden: usize) -> Self {
        let lin = |i, o| Projection::Plain(Linear::zeros(i, o));
        Self {
            norm1_gamma: Tensor::zeros([dim]),
            norm1_beta: Tensor::zeros([dim]),
            q: lin(dim, dim),
            k: lin(dim, dim),
            v: lin(dim, dim),
            o: lin(dim, dim),
            norm2_gamma: Tensor::zeros([dim]),
            norm2_beta: Tensor::zeros([dim]),
            fc1: lin(dim, mlp_hidden),
            fc2: lin(mlp_hidden, dim),
            heads,
        }
    }

    pub fn dim(&self) -> usize {
        self.norm1_gamma.len()
    }

    fn projections_mut(&mut self) -> [&mut Projection<T>; 6] {
        [&mut self.q, &mut self.k, &mut self.v, &mut self.o, &mut self.fc1, &mut self.fc2]
    }

    fn check(&self) -> Result<()> {
        let d = self.dim();
        if self.heads == 0 || d % self.heads != 0 {
            bail!(Config, "dim {d} is not divisible by {} heads", self.heads);
        }
        Ok(())
    }

    /// Records the block; when `maps` is given, the per-head attention
    /// matrices are pushed onto it.
    pub fn on_tape<'p>(
        &'p self,
        tape: &mut Tape<'p, T>,
        x: Var,
        mut maps: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        self.check()?;
        let d = self.dim();
        let (_, xd) = tape.value(x).dims2()?;
        if xd != d {
            bail!(Dimension, "block of width {d} fed {xd}-wide tokens");
        }
        let dh = d / self.heads;
        let eps = T::lit(LN_EPS);

        let g1 = tape.param(&self.norm1_gamma);
        let b1 = tape.param(&self.norm1_beta);
        let h = tape.layernorm(x, g1, b1, eps)?;
        let q = self.q.on_tape(tape, h)?;
        let k = self.k.on_tape(tape, h)?;
        let v = self.v.on_tape(tape, h)?;
        let inv = T::one() / T::from_usize(dh).unwrap().sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let qh = tape.slice_cols(q, head * dh, dh)?;
            let kh = tape.slice_cols(k, head * dh, dh)?;
            let vh = tape.slice_cols(v, head * dh, dh)?;
            let s = tape.matmul_nt(qh, kh)?;
            let s = tape.scale(s, inv)?;
            let p = tape.softmax_rows(s)?;
            if let Some(m) = maps.as_deref_mut() {
                m.push(p);
            }
            outs.push(tape.matmul(p, vh)?);
        }
        let att = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        let o = self.o.on_tape(tape, att)?;
        let x1 = tape.add(x, o)?;

        let g2 = tape.param(&self.norm2_gamma);
        let b2 = tape.param(&self.norm2_beta);
        let h2 = tape.layernorm(x1, g2, b2, eps)?;
        let m = self.fc1.on_tape(tape, h2)?;
        let m = tape.gelu(m)?;
        let m = self.fc2.on_tape(tape, m)?;
        tape.add(x1, m)
    }

    /// Attention weights of every head, each `[N × N]`.
    pub fn attention_maps(&self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let mut maps = Vec::new();
        self.on_tape(&mut tape, xv, Some(&mut maps))?;
        Ok(maps.into_iter().map(|m| tape.value(m).clone()).collect())
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f(format!("{prefix}.norm1.gamma"), &self.norm1_gamma);
        f(format!("{prefix}.norm1.beta"), &self.norm1_beta);
        self.q.visit(&format!("{prefix}.attn.q"), f);
        self.k.visit(&format!("{prefix}.attn.k"), f);
        self.v.visit(&format!("{prefix}.attn.v"), f);
        self.o.visit(&format!("{prefix}.attn.o"), f);
        f(format!("{prefix}.norm2.gamma"), &self.norm2_gamma);
        f(format!("{prefix}.norm2.beta"), &self.norm2_beta);
        self.fc1.visit(&format!("{prefix}.mlp.fc1"), f);
        self.fc2.visit(&format!("{prefix}.mlp.fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(format!("{prefix}.norm1.gamma"), &mut self.norm1_gamma);
        f(format!("{prefix}.norm1.beta"), &mut self.norm1_beta);
        self.q.visit_mut(&format!("{prefix}.attn.q"), f);
        self.k.visit_mut(&format!("{prefix}.attn.k"), f);
        self.v.visit_mut(&format!("{prefix}.attn.v"), f);
        self.o.visit_mut(&format!("{prefix}.attn.o"), f);
        f(format!("{prefix}.norm2.gamma"), &mut self.norm2_gamma);
        f(format!("{prefix}.norm2.beta"), &mut self.norm2_beta);
        self.fc1.visit_mut(&format!("{prefix}.mlp.fc1"), f);
        self.fc2.visit_mut(&format!("{prefix}.mlp.fc2"), f);
    }
}

pub fn block_forward<T: Scalar>(x: &Tensor<T>, block: &Block<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = block.on_tape(&mut tape, xv, None)?;
    Ok(tape.value(y).clone())
}

/// Encoder output: every token plus the search block reshaped to the
/// `h_x × w_x × D` feature map the head reads.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput<T> {
    pub all_tokens: Tensor<T>,
    pub search_feature_map: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<T> {
    pub blocks: Vec<Block<T>>,
    config: EncoderConfig,
}

impl<T: Scalar> Encoder<T> {
    pub fn random<R: Rng + ?Sized>(config: EncoderConfig, std: f64, rng: &mut R) -> Result<Self> {
        if config.heads == 0 || config.dim % config.heads != 0 {
            bail!(Config, "dim {} is not divisible by {} heads", config.dim, config.heads);
        }
        let blocks = (0..config.depth)
            .map(|_| Block::random(config.dim, config.heads, config.mlp_hidden, std, rng))
            .collect();
        Ok(Self { blocks, config })
    }

    pub fn from_blocks(blocks: Vec<Block<T>>, config: EncoderConfig) -> Result<Self> {
        if blocks.len() != config.depth {
            bail!(Config, "{} blocks for depth {}", blocks.len(), config.depth);
        }
        for b in &blocks {
            b.check()?;
        }
        Ok(Self { blocks, config })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Wraps every q/k/v/o and MLP projection that is still plain.
    pub fn wrap_lora<R: Rng + ?Sized>(&mut self, rank: usize, alpha: f64, rng: &mut R) -> Result<()> {
        for block in &mut self.blocks {
            for p in block.projections_mut() {
                p.wrap(rank, alpha, rng)?;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self) -> Result<()> {
        if !self.has_live_adapters() {
            bail!(State, "no unmerged adapters to merge");
        }
        for block in &mut self.blocks {
            for p in block.projections_mut() {
                p.merge()?;
            }
        }
        Ok(())
    }

    pub fn has_live_adapters(&self) -> bool {
        self.blocks.iter().any(|b| {
            [&b.q, &b.k, &b.v, &b.o, &b.fc1, &b.fc2]
                .iter()
                .any(|p| p.has_live_adapter())
        })
    }

    pub fn projection_mut(&mut self, block: usize, name: &str) -> Option<&mut Projection<T>> {
        let b = self.blocks.get_mut(block)?;
        Some(match name {
            "attn.q" => &mut b.q,
            "attn.k" => &mut b.k,
            "attn.v" => &mut b.v,
            "attn.o" => &mut b.o,
            "mlp.fc1" => &mut b.fc1,
            "mlp.fc2" => &mut b.fc2,
            _ => return None,
        })
    }

    pub fn on_tape<'p>(&'p self, tape: &mut Tape<'p, T>, seq: Var) -> Result<Var> {
        let mut x = seq;
        for block in &self.blocks {
            x = block.on_tape(tape, x, None)?;
        }
        Ok(x)
    }

    pub fn visit_params<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("blocks.{i}"), f);
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("blocks.{i}"), f);
        }
    }
}

/// Runs the encoder over `seq` (`template_len` template rows followed by
/// the search rows) and splits out the search feature map.
pub fn encoder_forward<T: Scalar>(
    seq: &Tensor<T>,
    encoder: &Encoder<T>,
    template_len: usize,
    search_grid: (usize, usize),
) -> Result<EncoderOutput<T>> {
    let mut tape = Tape::new();
    let x = tape.constant(seq.clone());
    let y = encoder.on_tape(&mut tape, x)?;
    split_search(tape.value(y).clone(), template_len, search_grid)
}

pub(crate) fn split_search<T: Scalar>(
    all_tokens: Tensor<T>,
    template_len: usize,
    search_grid: (usize, usize),
) -> Result<EncoderOutput<T>> {
    let (n, d) = all_tokens.dims2()?;
    let nx = search_grid.0 * search_grid.1;
    if n != template_len + nx {
        bail!(
            Dimension,
            "sequence of {n} tokens, expected {template_len} + {nx}"
        );
    }
    let search = all_tokens.data()[template_len * d..].to_vec();
    let search_feature_map = Tensor::new([search_grid.0, search_grid.1, d], search)?;
    Ok(EncoderOutput {
        all_tokens,
        search_feature_map,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{mul_count, reset_mul_count};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn zero_block_is_identity() {
        let x = Tensor::<f32>::randn([5, 8], 1.0, &mut rng(1));
        let y = block_forward(&x, &Block::zeros(8, 2, 16)).unwrap();
        assert_eq!(x.data(), y.data());
    }

    #[test]
    fn head_mismatch_is_config_error() {
        let x = Tensor::<f32>::zeros([2, 6]);
        let b = Block::<f32>::zeros(6, 4, 8);
        assert!(matches!(block_forward(&x, &b), Err(crate::Error::Config(_))));
    }

    fn ln(row: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
        let n = row.len() as f64;
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        row.iter()
            .enumerate()
            .map(|(j, v)| (v - mean) / (var + 1e-6).sqrt() * g[j] + b[j])
            .collect()
    }

    fn lin(x: &[f64], w: &Tensor<f32>, b: &Tensor<f32>) -> Vec<f64> {
        let (out, input) = w.dims2().unwrap();
        (0..out)
            .map(|o| (0..input).map(|i| x[i] * w.data()[o * input + i] as f64).sum::<f64>() + b.data()[o] as f64)
            .collect()
    }

    fn gelu64(x: f64) -> f64 {
        0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
    }

    fn plain(p: &Projection<f32>) -> &Linear<f32> {
        match p {
            Projection::Plain(l) => l,
            _ => unreachable!(),
        }
    }

    #[test]
    fn block_matches_scalar_loop_oracle() {
        let mut r = rng(9);
        let mut block = Block::<f32>::random(4, 1, 6, 0.5, &mut r);
        block.norm1_gamma = Tensor::uniform([4], 0.5, 1.5, &mut r);
        block.norm2_beta = Tensor::uniform([4], -0.2, 0.2, &mut r);
        if let Projection::Plain(l) = &mut block.q {
            l.bias = Tensor::uniform([4], -0.1, 0.1, &mut r);
        }
        let x = Tensor::<f32>::randn([2, 4], 1.0, &mut r);
        let y = block_forward(&x, &block).unwrap();

        let f = |t: &Tensor<f32>| t.data().iter().map(|&v| v as f64).collect::<Vec<_>>();
        let rows: Vec<Vec<f64>> = (0..2).map(|i| x.row(i).iter().map(|&v| v as f64).collect()).collect();
        let (g1, b1, g2, b2) = (f(&block.norm1_gamma), f(&block.norm1_beta), f(&block.norm2_gamma), f(&block.norm2_beta));
        let h: Vec<Vec<f64>> = rows.iter().map(|r| ln(r, &g1, &b1)).collect();
        let pr = |p: &Projection<f32>, v: &[f64]| lin(v, &plain(p).weight, &plain(p).bias);
        let q: Vec<_> = h.iter().map(|v| pr(&block.q, v)).collect();
        let k: Vec<_> = h.iter().map(|v| pr(&block.k, v)).collect();
        let v: Vec<_> = h.iter().map(|v| pr(&block.v, v)).collect();
        for i in 0..2 {
            let s: Vec<f64> = (0..2).map(|j| (0..4).map(|c| q[i][c] * k[j][c]).sum::<f64>() / 2.0).collect();
            let mx = s[0].max(s[1]);
            let e: Vec<f64> = s.iter().map(|z| (z - mx).exp()).collect();
            let p: Vec<f64> = e.iter().map(|z| z / (e[0] + e[1])).collect();
            let att: Vec<f64> = (0..4).map(|c| p[0] * v[0][c] + p[1] * v[1][c]).collect();
            let o = pr(&block.o, &att);
            let x1: Vec<f64> = (0..4).map(|c| rows[i][c] + o[c]).collect();
            let h2 = ln(&x1, &g2, &b2);
            let m: Vec<f64> = pr(&block.fc1, &h2).into_iter().map(gelu64).collect();
            let m2 = pr(&block.fc2, &m);
            for c in 0..4 {
                let want = x1[c] + m2[c];
                assert!((y.row(i)[c] as f64 - want).abs() < 1e-5, "{} vs {}", y.row(i)[c], want);
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut r = rng(2);
        let block = Block::<f32>::random(8, 4, 16, 0.3, &mut r);
        let x = Tensor::<f32>::randn([7, 8], 1.0, &mut r);
        let maps = block.attention_maps(&x).unwrap();
        assert_eq!(maps.len(), 4);
        for m in maps {
            for i in 0..7 {
                let s: f32 = m.row(i).iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn wrap_is_neutral_and_counts() {
        let mut r = rng(3);
        let base = Linear::<f32>::random(6, 5, 0.5, &mut r);
        let x = Tensor::<f32>::randn([4, 6], 1.0, &mut r);
        let wrapped = lora_wrap(base.clone(), 2, 4.0, &mut r).unwrap();
        assert_eq!(wrapped.forward(&x).unwrap().data(), base.forward(&x).unwrap().data());
        assert_eq!(wrapped.trainable_count(), 2 * (6 + 5));
        assert_eq!(wrapped.frozen_count(), 6 * 5 + 5);
        assert!(wrapped.lora_a().requires_grad() && wrapped.lora_b().requires_grad());
        assert!(!wrapped.weight().requires_grad() && !wrapped.bias().requires_grad());
        assert!(lora_wrap(base.clone(), 0, 1.0, &mut r).is_err());
        assert!(lora_wrap(base, 6, 1.0, &mut r).is_err());
    }

    #[test]
    fn rank_one_merge_by_hand() {
        let base = Linear::<f32>::zeros(2, 2);
        let a = Tensor::new([1, 2], vec![1.0, 0.0]).unwrap();
        let b = Tensor::new([2, 1], vec![0.0, 1.0]).unwrap();
        let merged = lora_merge(LoraLinear::from_parts(base, a, b, 1.0).unwrap()).unwrap();
        assert_eq!(merged.weight().data(), &[0.0, 0.0, 1.0, 0.0]);
        assert!(matches!(lora_merge(merged), Err(crate::Error::State(_))));
    }

    #[test]
    fn zero_b_merge_keeps_weight() {
        let mut r = rng(4);
        let base = Linear::<f32>::random(3, 3, 1.0, &mut r);
        let merged = lora_merge(lora_wrap(base.clone(), 2, 16.0, &mut r).unwrap()).unwrap();
        assert_eq!(merged.weight().data(), base.weight.data());
    }

    #[test]
    fn merged_matches_unmerged() {
        let mut r = rng(5);
        let base = Linear::<f32>::random(8, 6, 0.3, &mut r);
        let mut l = lora_wrap(base, 4, 8.0, &mut r).unwrap();
        *l.lora_b_mut() = Tensor::randn([6, 4], 0.1, &mut r).with_requires_grad(true);
        let merged = lora_merge(l.clone()).unwrap();
        for _ in 0..50 {
            let x = Tensor::<f32>::randn([1, 8], 1.0, &mut r);
            assert!(l.forward(&x).unwrap().max_abs_diff(&merged.forward(&x).unwrap()) < 1e-5);
        }
    }

    #[test]
    fn merge_removes_adapter_work() {
        let mut r = rng(6);
        let cfg = EncoderConfig { depth: 2, dim: 16, heads: 4, mlp_hidden: 32 };
        let base = Encoder::<f32>::random(cfg, 0.02, &mut r).unwrap();
        let mut wrapped = base.clone();
        wrapped.wrap_lora(4, 8.0, &mut r).unwrap();
        let x = Tensor::<f32>::randn([10, 16], 1.0, &mut r);
        let count = |e: &Encoder<f32>| {
            reset_mul_count();
            encoder_forward(&x, e, 1, (3, 3)).unwrap();
            mul_count()
        };
        let (cb, cw) = (count(&base), count(&wrapped));
        wrapped.merge().unwrap();
        assert!(cw > cb);
        assert_eq!(count(&wrapped), cb);
        assert!(wrapped.merge().is_err());
    }

    #[test]
    fn depth_zero_passes_search_rows() {
        let enc = Encoder::<f32>::random(EncoderConfig { depth: 0, dim: 4, heads: 1, mlp_hidden: 4 }, 0.02, &mut rng(7)).unwrap();
        let x = Tensor::<f32>::randn([2 + 6, 4], 1.0, &mut rng(8));
        let out = encoder_forward(&x, &enc, 2, (2, 3)).unwrap();
        assert_eq!(out.search_feature_map.shape(), &[2, 3, 4]);
        assert_eq!(out.search_feature_map.data(), &x.data()[8..]);
        assert!(encoder_forward(&x, &enc, 3, (2, 3)).is_err());
    }

    #[test]
    fn b224_feature_map_shape() {
        let cfg = EncoderConfig { depth: 1, dim: 32, heads: 4, mlp_hidden: 64 };
        let enc = Encoder::<f32>::random(cfg, 0.02, &mut rng(9)).unwrap();
        let x = Tensor::<f32>::randn([49 + 196, 32], 1.0, &mut rng(10));
        let out = encoder_forward(&x, &enc, 49, (14, 14)).unwrap();
        assert_eq!(out.search_feature_map.shape(), &[14, 14, 32]);
    }
}
