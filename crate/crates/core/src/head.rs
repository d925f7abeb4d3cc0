//! MLP-only anchor-free head: per-cell score and (l, t, r, b) regression.

use rand::Rng;

use crate::bbox::BBox;
use crate::encoder::Linear;
use crate::error::{bail, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::scalar::Scalar;

/// Three linear layers with GELU between them.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp3<T> {
    pub layers: [Linear<T>; 3],
}

impl<T: Scalar> Mlp3<T> {
    /// Weights drawn with std `1/sqrt(fan_in)`, biases zero, all trainable.
    pub fn random<R: Rng + ?Sized>(input: usize, hidden: usize, output: usize, rng: &mut R) -> Self {
        let mut lin = |i: usize, o: usize| {
            let mut l = Linear::random(i, o, 1.0 / (i as f64).sqrt(), rng);
            l.set_trainable(true);
            l
        };
        Self {
            layers: [lin(input, hidden), lin(hidden, hidden), lin(hidden, output)],
        }
    }

    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        let lin = |i, o| {
            let mut l = Linear::zeros(i, o);
            l.set_trainable(true);
            l
        };
        Self {
            layers: [lin(input, hidden), lin(hidden, hidden), lin(hidden, output)],
        }
    }

    pub fn on_tape<'p>(&'p self, tape: &mut Tape<'p, T>, x: Var) -> Result<Var> {
        let h = self.layers[0].on_tape(tape, x)?;
        let h = tape.gelu(h)?;
        let h = self.layers[1].on_tape(tape, h)?;
        let h = tape.gelu(h)?;
        self.layers[2].on_tape(tape, h)
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        for (i, l) in self.layers.iter().enumerate() {
            f(format!("{prefix}.{i}.weight"), &l.weight);
            f(format!("{prefix}.{i}.bias"), &l.bias);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            f(format!("{prefix}.{i}.weight"), &mut l.weight);
            f(format!("{prefix}.{i}.bias"), &mut l.bias);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Head<T> {
    pub cls: Mlp3<T>,
    pub reg: Mlp3<T>,
}

impl<T: Scalar> Head<T> {
    pub fn random<R: Rng + ?Sized>(dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            cls: Mlp3::random(dim, hidden, 1, rng),
            reg: Mlp3::random(dim, hidden, 4, rng),
        }
    }

    pub fn zeros(dim: usize, hidden: usize) -> Self {
        Self {
            cls: Mlp3::zeros(dim, hidden, 1),
            reg: Mlp3::zeros(dim, hidden, 4),
        }
    }

    pub fn dim(&self) -> usize {
        self.cls.layers[0].in_dim()
    }

    /// Records both branches over `tokens` `[N × D]`; returns score logits
    /// `[N × 1]` and softplus-ed distances `[N × 4]`.
    pub fn on_tape<'p>(&'p self, tape: &mut Tape<'p, T>, tokens: Var) -> Result<(Var, Var)> {
        let (_, d) = tape.value(tokens).dims2()?;
        if d != self.dim() || self.reg.layers[0].in_dim() != d {
            bail!(Config, "head expects {}-wide features, got {d}", self.dim());
        }
        let scores = self.cls.on_tape(tape, tokens)?;
        let raw = self.reg.on_tape(tape, tokens)?;
        let regs = tape.softplus(raw)?;
        Ok((scores, regs))
    }

    pub fn visit_params<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        self.cls.visit("head.cls", f);
        self.reg.visit("head.reg", f);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.cls.visit_mut("head.cls", f);
        self.reg.visit_mut("head.reg", f);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutput<T> {
    /// Pre-sigmoid logits, `[h × w]`.
    pub scores: Tensor<T>,
    /// Distances in units of the search side, `[h × w × 4]`.
    pub regs: Tensor<T>,
}

impl<T: Scalar> HeadOutput<T> {
    pub fn grid(&self) -> (usize, usize) {
        (self.scores.shape()[0], self.scores.shape()[1])
    }

    pub fn is_finite(&self) -> bool {
        self.scores.is_finite() && self.regs.is_finite()
    }
}

/// Applies the head to a `[h × w × D]` feature map.
pub fn head_forward<T: Scalar>(s: &Tensor<T>, head: &Head<T>) -> Result<HeadOutput<T>> {
    if s.shape().len() != 3 {
        bail!(Dimension, "feature map must be h×w×D, got {:?}", s.shape());
    }
    let (h, w, d) = (s.shape()[0], s.shape()[1], s.shape()[2]);
    let mut tape = Tape::new();
    let x = tape.constant(s.clone().reshape([h * w, d])?);
    let (scores, regs) = head.on_tape(&mut tape, x)?;
    Ok(HeadOutput {
        scores: tape.value(scores).clone().reshape([h, w])?,
        regs: tape.value(regs).clone().reshape([h, w, 4])?,
    })
}

/// Center of cell `(i, j)` in search-crop pixels.
pub fn cell_center(i: usize, j: usize, grid: (usize, usize), search_size: f64) -> (f64, f64) {
    (
        (j as f64 + 0.5) * search_size / grid.1 as f64,
        (i as f64 + 0.5) * search_size / grid.0 as f64,
    )
}

/// Box from normalized distances around a cell center.
pub fn decode_cell(ltrb: [f64; 4], center: (f64, f64), search_size: f64) -> BBox {
    let [l, t, r, b] = ltrb.map(|v| v * search_size);
    BBox::new(center.0 - l, center.1 - t, l + r, t + b)
}

/// Inverse of [`decode_cell`].
pub fn encode_box(b: &BBox, center: (f64, f64), search_size: f64) -> [f64; 4] {
    [
        (center.0 - b.x) / search_size,
        (center.1 - b.y) / search_size,
        (b.right() - center.0) / search_size,
        (b.bottom() - center.1) / search_size,
    ]
}

/// One candidate box per cell, in row-major cell order.
pub fn decode_boxes<T: Scalar>(out: &HeadOutput<T>, search_size: f64) -> Result<Vec<(BBox, f64)>> {
    if !(search_size > 0.0) {
        bail!(Parameter, "search size must be positive, got {search_size}");
    }
    let grid = out.grid();
    if out.regs.shape() != [grid.0, grid.1, 4] {
        bail!(Dimension, "regression map {:?} does not match a {grid:?} grid", out.regs.shape());
    }
    let mut cands = Vec::with_capacity(grid.0 * grid.1);
    for i in 0..grid.0 {
        for j in 0..grid.1 {
            let k = i * grid.1 + j;
            let r = &out.regs.data()[k * 4..k * 4 + 4];
            let ltrb = [r[0].as_f64(), r[1].as_f64(), r[2].as_f64(), r[3].as_f64()];
            let b = decode_cell(ltrb, cell_center(i, j, grid, search_size), search_size);
            cands.push((b, out.scores.data()[k].as_f64()));
        }
    }
    Ok(cands)
}

/// Index of the highest score; ties go to the lowest index.
pub fn select_best_index(candidates: &[(BBox, f64)]) -> Result<usize> {
    if candidates.is_empty() {
        bail!(Contract, "select_best needs at least one candidate");
    }
    let mut best = 0;
    for (k, (_, s)) in candidates.iter().enumerate().skip(1) {
        if *s > candidates[best].1 {
            best = k;
        }
    }
    Ok(best)
}

pub fn select_best(candidates: &[(BBox, f64)]) -> Result<BBox> {
    Ok(candidates[select_best_index(candidates)?].0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ops::softplus_scalar;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_head_is_constant() {
        let s = Tensor::<f32>::randn([3, 3, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let out = head_forward(&s, &Head::zeros(8, 8)).unwrap();
        assert!(out.scores.data().iter().all(|&v| v == 0.0));
        let sp = softplus_scalar(0.0f32);
        assert!(out.regs.data().iter().all(|&v| v == sp));
    }

    #[test]
    fn width_mismatch_is_config_error() {
        let s = Tensor::<f32>::zeros([2, 2, 6]);
        let head = Head::<f32>::zeros(8, 8);
        assert!(matches!(head_forward(&s, &head), Err(crate::Error::Config(_))));
    }

    #[test]
    fn cells_are_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let head = Head::<f32>::random(4, 6, &mut rng);
        let s = Tensor::<f32>::randn([2, 2, 4], 1.0, &mut rng);
        let perm = [3usize, 0, 2, 1];
        let mut p = Vec::new();
        for &k in &perm {
            p.extend_from_slice(&s.data()[k * 4..k * 4 + 4]);
        }
        let a = head_forward(&s, &head).unwrap();
        let b = head_forward(&Tensor::new([2, 2, 4], p).unwrap(), &head).unwrap();
        for (dst, &src) in perm.iter().enumerate() {
            assert_eq!(b.scores.data()[dst], a.scores.data()[src]);
            assert_eq!(b.regs.data()[dst * 4..dst * 4 + 4], a.regs.data()[src * 4..src * 4 + 4]);
        }
    }

    #[test]
    fn matches_per_cell_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let head = Head::<f32>::random(3, 5, &mut rng);
        let s = Tensor::<f32>::randn([2, 2, 3], 1.0, &mut rng);
        let out = head_forward(&s, &head).unwrap();
        let gelu = |x: f64| 0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh());
        let lin = |l: &Linear<f32>, x: &[f64]| -> Vec<f64> {
            (0..l.out_dim())
                .map(|o| l.bias.data()[o] as f64 + (0..l.in_dim()).map(|i| l.weight.data()[o * l.in_dim() + i] as f64 * x[i]).sum::<f64>())
                .collect()
        };
        let mlp = |m: &Mlp3<f32>, x: &[f64]| {
            let h: Vec<f64> = lin(&m.layers[0], x).into_iter().map(gelu).collect();
            let h: Vec<f64> = lin(&m.layers[1], &h).into_iter().map(gelu).collect();
            lin(&m.layers[2], &h)
        };
        for k in 0..4 {
            let x: Vec<f64> = s.data()[k * 3..k * 3 + 3].iter().map(|&v| v as f64).collect();
            assert!((mlp(&head.cls, &x)[0] - out.scores.data()[k] as f64).abs() < 1e-5);
            for (c, r) in mlp(&head.reg, &x).into_iter().enumerate() {
                let want = if r > 30.0 { r } else { r.exp().ln_1p() };
                assert!((want - out.regs.data()[k * 4 + c] as f64).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn decode_examples() {
        let out = HeadOutput {
            scores: Tensor::<f64>::zeros([14, 14]),
            regs: Tensor::<f64>::zeros([14, 14, 4]),
        };
        let c = decode_boxes(&out, 224.0).unwrap();
        let b = c[7 * 14 + 7].0;
        assert_eq!((b.x, b.y, b.w, b.h), (120.0, 120.0, 0.0, 0.0));
        assert_eq!(decode_cell([0.25; 4], (112.0, 112.0), 224.0), BBox::new(56.0, 56.0, 112.0, 112.0));
        assert!(decode_boxes(&out, 0.0).is_err());
    }

    #[test]
    fn select_examples() {
        let b = |x| BBox::new(x, 0.0, 1.0, 1.0);
        assert_eq!(select_best(&[(b(4.0), -3.0)]).unwrap(), b(4.0));
        assert_eq!(select_best(&[(b(0.0), 0.1), (b(1.0), 0.9), (b(2.0), 0.3)]).unwrap(), b(1.0));
        assert_eq!(select_best_index(&[(b(0.0), 0.5), (b(1.0), 0.5)]).unwrap(), 0);
        assert!(matches!(select_best(&[]), Err(crate::Error::Contract(_))));
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(l in 0.0f64..0.5, t in 0.0f64..0.5, r in 0.0f64..0.5, bt in 0.0f64..0.5, i in 0usize..6, j in 0usize..6) {
            let c = cell_center(i, j, (6, 6), 96.0);
            let back = encode_box(&decode_cell([l, t, r, bt], c, 96.0), c, 96.0);
            for (a, b) in back.iter().zip([l, t, r, bt]) {
                prop_assert!((a - b).abs() < 1e-5);
            }
        }

        #[test]
        fn argmax_is_monotone_invariant(scores in prop::collection::vec(-5.0f64..5.0, 1..20), a in 0.1f64..3.0, b in -2.0f64..2.0) {
            let c: Vec<_> = scores.iter().enumerate().map(|(k, &s)| (BBox::new(k as f64, 0.0, 1.0, 1.0), s)).collect();
            let t: Vec<_> = c.iter().map(|(bb, s)| (*bb, (a * s + b).exp() + s.powi(3))).collect();
            prop_assert_eq!(select_best(&c).unwrap(), select_best(&t).unwrap());
        }
    }
}
