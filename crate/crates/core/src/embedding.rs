//! One-stream input construction: patch embedding, token-type embeddings and
//! the positional embedding shared between template and search tokens.
//!
//! The search region runs at the encoder's native grid, so its tokens take
//! the positional table verbatim. The smaller template grid reads the same
//! table through [`resample_positional`], treating it as a 2-D grid of
//! D-vectors.

use std::fmt;
use std::str::FromStr;

use log::warn;
use rand::Rng;

use crate::bbox::BBox;
use crate::error::{bail, Error, Result};
use crate::numerics::{matmul, Tape, Tensor, Var};
use crate::scalar::Scalar;

/// The 1-D absolute positional embedding together with its 2-D grid view.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionalEmbedding<T> {
    q: Tensor<T>,
    grid_h: usize,
    grid_w: usize,
}

impl<T: Scalar> PositionalEmbedding<T> {
    pub fn new(q: Tensor<T>, grid_h: usize, grid_w: usize) -> Result<Self> {
        let (l, _) = q.dims2()?;
        if grid_h * grid_w != l || l == 0 {
            bail!(
                Dimension,
                "positional table has {l} rows, grid {grid_h}x{grid_w}"
            );
        }
        Ok(Self { q, grid_h, grid_w })
    }

    pub fn random<R: Rng + ?Sized>(grid: (usize, usize), dim: usize, std: f64, rng: &mut R) -> Self {
        let q = Tensor::randn([grid.0 * grid.1, dim], std, rng);
        Self {
            q,
            grid_h: grid.0,
            grid_w: grid.1,
        }
    }

    pub fn q(&self) -> &Tensor<T> {
        &self.q
    }

    pub fn q_mut(&mut self) -> &mut Tensor<T> {
        &mut self.q
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.grid_h, self.grid_w)
    }

    pub fn dim(&self) -> usize {
        self.q.shape()[1]
    }

    /// `q_{i,j}` of the 2-D view.
    pub fn at(&self, i: usize, j: usize) -> &[T] {
        self.q.row(i * self.grid_w + j)
    }

    pub fn replace(&mut self, q: Tensor<T>) -> Result<()> {
        if q.shape() != self.q.shape() {
            bail!(
                Dimension,
                "positional table {:?} cannot replace {:?}",
                q.shape(),
                self.q.shape()
            );
        }
        let rg = self.q.requires_grad();
        self.q = q.with_requires_grad(rg);
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResampleStrategy {
    /// Bilinear resampling of the grid, align-corners convention.
    #[default]
    Interpolate,
    /// Top-left sub-grid.
    Slice,
}

impl FromStr for ResampleStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "interpolate" => Ok(Self::Interpolate),
            "slice" => Ok(Self::Slice),
            other => bail!(Config, "unknown positional strategy {other:?} (interpolate|slice)"),
        }
    }
}

impl fmt::Display for ResampleStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Interpolate => "interpolate",
            Self::Slice => "slice",
        })
    }
}

/// Source coordinate of output index `i` under align-corners sampling.
fn align_corners(i: usize, src: usize, dst: usize) -> f64 {
    if dst <= 1 || src <= 1 {
        0.0
    } else {
        i as f64 * (src - 1) as f64 / (dst - 1) as f64
    }
}

/// Row-stochastic matrix `[(h_t·w_t) × (h·w)]` mapping the source grid to
/// the target grid. Resampling is linear in the table, so applying it is a
/// single matmul and its gradient comes for free.
pub fn resample_matrix<T: Scalar>(
    src: (usize, usize),
    dst: (usize, usize),
    strategy: ResampleStrategy,
) -> Result<Tensor<T>> {
    let (sh, sw) = src;
    let (th, tw) = dst;
    if th == 0 || tw == 0 {
        bail!(Parameter, "resample target {th}x{tw} must be at least 1x1");
    }
    let l = sh * sw;
    let mut m = vec![T::zero(); th * tw * l];
    match strategy {
        ResampleStrategy::Slice => {
            if th > sh || tw > sw {
                bail!(Parameter, "cannot slice {th}x{tw} out of a {sh}x{sw} grid");
            }
            for i in 0..th {
                for j in 0..tw {
                    m[(i * tw + j) * l + i * sw + j] = T::one();
                }
            }
        }
        ResampleStrategy::Interpolate => {
            for i in 0..th {
                let y = align_corners(i, sh, th);
                let y0 = (y.floor() as usize).min(sh - 1);
                let y1 = (y0 + 1).min(sh - 1);
                let fy = y - y0 as f64;
                for j in 0..tw {
                    let x = align_corners(j, sw, tw);
                    let x0 = (x.floor() as usize).min(sw - 1);
                    let x1 = (x0 + 1).min(sw - 1);
                    let fx = x - x0 as f64;
                    let row = &mut m[(i * tw + j) * l..(i * tw + j + 1) * l];
                    row[y0 * sw + x0] += T::lit((1.0 - fy) * (1.0 - fx));
                    row[y0 * sw + x1] += T::lit((1.0 - fy) * fx);
                    row[y1 * sw + x0] += T::lit(fy * (1.0 - fx));
                    row[y1 * sw + x1] += T::lit(fy * fx);
                }
            }
        }
    }
    Tensor::new([th * tw, l], m)
}

pub fn resample_positional<T: Scalar>(
    pe: &PositionalEmbedding<T>,
    target: (usize, usize),
    strategy: ResampleStrategy,
) -> Result<Tensor<T>> {
    let r = resample_matrix(pe.grid(), target, strategy)?;
    matmul(&r, pe.q())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum TokenType {
    TemplateForeground = 0,
    TemplateBackground = 1,
    Search = 2,
}

impl TokenType {
    pub const COUNT: usize = 3;

    pub fn index(self) -> usize {
        self as usize
    }
}

/// One trainable embedding row per [`TokenType`].
#[derive(Clone, Debug, PartialEq)]
pub struct TokenTypeTable<T> {
    embeddings: Tensor<T>,
}

impl<T: Scalar> TokenTypeTable<T> {
    pub fn new(embeddings: Tensor<T>) -> Result<Self> {
        let (rows, _) = embeddings.dims2()?;
        if rows != TokenType::COUNT {
            bail!(Dimension, "token-type table needs 3 rows, got {rows}");
        }
        Ok(Self { embeddings })
    }

    pub fn random<R: Rng + ?Sized>(dim: usize, std: f64, rng: &mut R) -> Self {
        Self {
            embeddings: Tensor::randn([TokenType::COUNT, dim], std, rng),
        }
    }

    pub fn embeddings(&self) -> &Tensor<T> {
        &self.embeddings
    }

    pub fn embeddings_mut(&mut self) -> &mut Tensor<T> {
        &mut self.embeddings
    }

    pub fn row(&self, t: TokenType) -> &[T] {
        self.embeddings.row(t.index())
    }
}

/// Token roles for a template+search sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenTypeIds {
    pub ids: Vec<TokenType>,
    /// Set when the template box had zero area and every template token was
    /// marked background.
    pub degenerate: bool,
}

impl TokenTypeIds {
    pub fn foreground_count(&self) -> usize {
        self.ids
            .iter()
            .filter(|t| **t == TokenType::TemplateForeground)
            .count()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// `[N × 3]` one-hot rows.
    pub fn one_hot<T: Scalar>(&self) -> Tensor<T> {
        let mut m = vec![T::zero(); self.ids.len() * TokenType::COUNT];
        for (i, t) in self.ids.iter().enumerate() {
            m[i * TokenType::COUNT + t.index()] = T::one();
        }
        Tensor::new([self.ids.len(), TokenType::COUNT], m).expect("one-hot shape")
    }
}

/// Marks a template token foreground iff its patch center lies in
/// `target` (half-open on the right and bottom edges). Template tokens come
/// first, then search tokens.
pub fn token_type_ids(
    template_grid: (usize, usize),
    search_grid: (usize, usize),
    target: &BBox,
    patch: usize,
) -> Result<TokenTypeIds> {
    if patch == 0 {
        bail!(Parameter, "patch size must be positive");
    }
    let (hz, wz) = template_grid;
    let (width, height) = ((wz * patch) as f64, (hz * patch) as f64);
    const SLACK: f64 = 1e-9;
    if !target.is_finite()
        || target.w < 0.0
        || target.h < 0.0
        || target.x < -SLACK
        || target.y < -SLACK
        || target.right() > width + SLACK
        || target.bottom() > height + SLACK
    {
        bail!(
            Parameter,
            "template box {target:?} is not inside the {width}x{height} template"
        );
    }
    let degenerate = !(target.w > 0.0 && target.h > 0.0);
    if degenerate {
        warn!("zero-area template box; all template tokens marked background");
    }
    let half = patch as f64 / 2.0;
    let mut ids = Vec::with_capacity(hz * wz + search_grid.0 * search_grid.1);
    for i in 0..hz {
        for j in 0..wz {
            let cx = (j * patch) as f64 + half;
            let cy = (i * patch) as f64 + half;
            let fg = !degenerate && target.contains_point(cx, cy);
            ids.push(if fg {
                TokenType::TemplateForeground
            } else {
                TokenType::TemplateBackground
            });
        }
    }
    ids.extend(std::iter::repeat_n(TokenType::Search, search_grid.0 * search_grid.1));
    Ok(TokenTypeIds { ids, degenerate })
}

/// `[C×H×W]` image to `[(H/P·W/P) × (C·P·P)]` rows; each row is one patch
/// flattened channel-major then row-major, patches in row-major grid order.
pub fn patchify<T: Scalar>(image: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let [c, h, w] = image.shape()[..] else {
        bail!(Dimension, "expected a C×H×W image, got {:?}", image.shape());
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        bail!(Dimension, "patch {patch} does not divide image {h}x{w}");
    }
    let (gh, gw) = (h / patch, w / patch);
    let px = image.data();
    let row_len = c * patch * patch;
    let mut out = Vec::with_capacity(gh * gw * row_len);
    for gi in 0..gh {
        for gj in 0..gw {
            for ch in 0..c {
                for py in 0..patch {
                    let start = ch * h * w + (gi * patch + py) * w + gj * patch;
                    out.extend_from_slice(&px[start..start + patch]);
                }
            }
        }
    }
    Tensor::new([gh * gw, row_len], out)
}

pub fn patch_embed<T: Scalar>(image: &Tensor<T>, proj: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    matmul(&patchify(image, patch)?, proj)
}

/// Records `tokens + positional + type_embedding` for the joint sequence.
#[allow(clippy::too_many_arguments)]
pub fn assemble_on_tape<'p, T: Scalar>(
    tape: &mut Tape<'p, T>,
    template_tokens: Var,
    search_tokens: Var,
    template_grid: (usize, usize),
    pe: &'p PositionalEmbedding<T>,
    types: &'p TokenTypeTable<T>,
    ids: &TokenTypeIds,
    strategy: ResampleStrategy,
) -> Result<Var> {
    let (nz, d) = tape.value(template_tokens).dims2()?;
    let (nx, dx) = tape.value(search_tokens).dims2()?;
    let (gh, gw) = pe.grid();
    if nx != gh * gw || dx != pe.dim() {
        bail!(
            Dimension,
            "search block {nx}x{dx} does not match positional grid {gh}x{gw}x{}",
            pe.dim()
        );
    }
    if nz != template_grid.0 * template_grid.1 || d != dx {
        bail!(
            Dimension,
            "template block {nz}x{d} does not match grid {template_grid:?}"
        );
    }
    if ids.len() != nz + nx {
        bail!(Dimension, "{} token ids for {} tokens", ids.len(), nz + nx);
    }
    let q = tape.param(pe.q());
    let table = tape.param(types.embeddings());
    let r = tape.constant(resample_matrix(pe.grid(), template_grid, strategy)?);
    let pos_template = tape.matmul(r, q)?;
    let pos = tape.concat_rows(&[pos_template, q])?;
    let onehot = tape.constant(ids.one_hot());
    let type_rows = tape.matmul(onehot, table)?;
    let tokens = tape.concat_rows(&[template_tokens, search_tokens])?;
    let with_pos = tape.add(tokens, pos)?;
    tape.add(with_pos, type_rows)
}

/// Plain-tensor form of [`assemble_on_tape`].
pub fn assemble_input<T: Scalar>(
    template_tokens: &Tensor<T>,
    search_tokens: &Tensor<T>,
    template_grid: (usize, usize),
    pe: &PositionalEmbedding<T>,
    types: &TokenTypeTable<T>,
    ids: &TokenTypeIds,
    strategy: ResampleStrategy,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let z = tape.constant(template_tokens.clone());
    let x = tape.constant(search_tokens.clone());
    let out = assemble_on_tape(&mut tape, z, x, template_grid, pe, types, ids, strategy)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Independent per-element bilinear sampler used as the oracle.
    fn bilinear_oracle(pe: &PositionalEmbedding<f32>, th: usize, tw: usize) -> Vec<f64> {
        let (sh, sw) = pe.grid();
        let d = pe.dim();
        let mut out = Vec::new();
        for i in 0..th {
            for j in 0..tw {
                let y = if th > 1 { i as f64 * (sh as f64 - 1.0) / (th as f64 - 1.0) } else { 0.0 };
                let x = if tw > 1 { j as f64 * (sw as f64 - 1.0) / (tw as f64 - 1.0) } else { 0.0 };
                let (y0, x0) = (y.floor() as i64, x.floor() as i64);
                for c in 0..d {
                    let mut acc = 0.0;
                    for (yy, wy) in [(y0, 1.0 - (y - y0 as f64)), (y0 + 1, y - y0 as f64)] {
                        for (xx, wx) in [(x0, 1.0 - (x - x0 as f64)), (x0 + 1, x - x0 as f64)] {
                            if wy * wx == 0.0 {
                                continue;
                            }
                            let yy = yy.clamp(0, sh as i64 - 1) as usize;
                            let xx = xx.clamp(0, sw as i64 - 1) as usize;
                            acc += wy * wx * pe.at(yy, xx)[c] as f64;
                        }
                    }
                    out.push(acc);
                }
            }
        }
        out
    }

    #[test]
    fn patch_embed_single_patch_identity() {
        let img = Tensor::<f32>::new([1, 2, 2], vec![1., 2., 3., 4.]).unwrap();
        let tok = patch_embed(&img, &Tensor::eye(4), 2).unwrap();
        assert_eq!(tok.shape(), &[1, 4]);
        assert_eq!(tok.data(), &[1., 2., 3., 4.]);
    }

    #[test]
    fn patch_count_for_224() {
        let img = Tensor::<f32>::zeros([3, 224, 224]);
        assert_eq!(patchify(&img, 16).unwrap().shape(), &[196, 768]);
        assert!(patchify(&Tensor::<f32>::zeros([3, 20, 16]), 16).is_err());
    }

    #[test]
    fn patch_embed_matches_loop_extraction() {
        let mut r = rng(5);
        let img = Tensor::<f32>::uniform([3, 8, 12], 0.0, 1.0, &mut r);
        let proj = Tensor::<f32>::uniform([3 * 16, 5], -1.0, 1.0, &mut r);
        let tok = patch_embed(&img, &proj, 4).unwrap();
        for k in 0..6 {
            let (gi, gj) = (k / 3, k % 3);
            let mut patch = Vec::new();
            for c in 0..3 {
                for y in 0..4 {
                    for x in 0..4 {
                        patch.push(img.data()[c * 96 + (gi * 4 + y) * 12 + gj * 4 + x]);
                    }
                }
            }
            for o in 0..5 {
                let want: f32 = patch.iter().enumerate().map(|(p, v)| v * proj.data()[p * 5 + o]).sum();
                assert!((tok.data()[k * 5 + o] - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn whole_template_box_is_all_foreground() {
        let ids = token_type_ids((7, 7), (14, 14), &BBox::new(0., 0., 112., 112.), 16).unwrap();
        assert_eq!(ids.foreground_count(), 49);
        assert_eq!(ids.len(), 49 + 196);
        assert!(ids.ids[49..].iter().all(|t| *t == TokenType::Search));
    }

    #[test]
    fn worked_example_nine_foreground() {
        let ids = token_type_ids((7, 7), (14, 14), &BBox::new(32., 32., 48., 48.), 16).unwrap();
        assert_eq!(ids.foreground_count(), 9);
        for i in 0..7 {
            for j in 0..7 {
                let fg = ids.ids[i * 7 + j] == TokenType::TemplateForeground;
                assert_eq!(fg, (2..=4).contains(&i) && (2..=4).contains(&j));
            }
        }
    }

    #[test]
    fn degenerate_box_flags() {
        let ids = token_type_ids((7, 7), (14, 14), &BBox::new(40., 40., 0., 20.), 16).unwrap();
        assert_eq!(ids.foreground_count(), 0);
        assert!(ids.degenerate);
        assert!(token_type_ids((7, 7), (14, 14), &BBox::new(100., 0., 20., 20.), 16).is_err());
    }

    #[test]
    fn resample_identity_at_native_grid() {
        let pe = PositionalEmbedding::<f32>::random((5, 4), 3, 1.0, &mut rng(1));
        let s = resample_positional(&pe, (5, 4), ResampleStrategy::Slice).unwrap();
        assert_eq!(s.data(), pe.q().data());
        let i = resample_positional(&pe, (5, 4), ResampleStrategy::Interpolate).unwrap();
        assert!(i.max_abs_diff(pe.q()) < 1e-6);
    }

    #[test]
    fn constant_table_stays_constant() {
        let pe = PositionalEmbedding::new(Tensor::<f32>::full([36, 4], 0.3), 6, 6).unwrap();
        for s in [ResampleStrategy::Interpolate, ResampleStrategy::Slice] {
            let out = resample_positional(&pe, (3, 3), s).unwrap();
            assert!(out.data().iter().all(|v| (v - 0.3).abs() < 1e-7));
        }
        assert!(resample_positional(&pe, (7, 3), ResampleStrategy::Slice).is_err());
        assert!(resample_positional(&pe, (0, 3), ResampleStrategy::Interpolate).is_err());
    }

    #[test]
    fn interpolate_14_to_7_matches_oracle() {
        let pe = PositionalEmbedding::<f32>::random((14, 14), 8, 1.0, &mut rng(2));
        let out = resample_positional(&pe, (7, 7), ResampleStrategy::Interpolate).unwrap();
        for (a, b) in out.data().iter().zip(bilinear_oracle(&pe, 7, 7)) {
            assert!((*a as f64 - b).abs() < 1e-6);
        }
    }

    #[test]
    fn assemble_zero_tokens_gives_type_rows() {
        let d = 4;
        let pe = PositionalEmbedding::new(Tensor::<f32>::zeros([4, d]), 2, 2).unwrap();
        let types = TokenTypeTable::random(d, 1.0, &mut rng(3));
        let ids = token_type_ids((1, 1), (2, 2), &BBox::new(0., 0., 16., 16.), 16).unwrap();
        let out = assemble_input(
            &Tensor::zeros([1, d]),
            &Tensor::zeros([4, d]),
            (1, 1),
            &pe,
            &types,
            &ids,
            ResampleStrategy::Interpolate,
        )
        .unwrap();
        assert_eq!(out.row(0), types.row(TokenType::TemplateForeground));
        for i in 1..5 {
            assert_eq!(out.row(i), types.row(TokenType::Search));
        }
    }

    #[test]
    fn search_rows_take_q_verbatim() {
        let d = 6;
        let pe = PositionalEmbedding::<f32>::random((3, 3), d, 1.0, &mut rng(4));
        let types = TokenTypeTable::new(Tensor::zeros([3, d])).unwrap();
        let ids = token_type_ids((2, 2), (3, 3), &BBox::new(0., 0., 8., 8.), 16).unwrap();
        let out = assemble_input(
            &Tensor::zeros([4, d]),
            &Tensor::zeros([9, d]),
            (2, 2),
            &pe,
            &types,
            &ids,
            ResampleStrategy::Interpolate,
        )
        .unwrap();
        for k in 0..9 {
            assert_eq!(out.row(4 + k), pe.q().row(k));
        }
        let bad = assemble_input(
            &Tensor::zeros([4, d]),
            &Tensor::zeros([8, d]),
            (2, 2),
            &pe,
            &types,
            &ids,
            ResampleStrategy::Interpolate,
        );
        assert!(matches!(bad, Err(Error::Dimension(_))));
    }

    #[test]
    fn assemble_matches_per_token_loop() {
        let d = 5;
        let mut r = rng(6);
        let pe = PositionalEmbedding::<f32>::random((4, 4), d, 1.0, &mut r);
        let types = TokenTypeTable::random(d, 1.0, &mut r);
        let z = Tensor::<f32>::randn([4, d], 1.0, &mut r);
        let x = Tensor::<f32>::randn([16, d], 1.0, &mut r);
        let ids = token_type_ids((2, 2), (4, 4), &BBox::new(0., 0., 16., 32.), 16).unwrap();
        let out = assemble_input(&z, &x, (2, 2), &pe, &types, &ids, ResampleStrategy::Interpolate).unwrap();
        let pos_z = bilinear_oracle(&pe, 2, 2);
        for n in 0..20 {
            for c in 0..d {
                let (tok, pos) = if n < 4 {
                    (z.row(n)[c] as f64, pos_z[n * d + c])
                } else {
                    (x.row(n - 4)[c] as f64, pe.q().row(n - 4)[c] as f64)
                };
                let want = tok + pos + types.row(ids.ids[n])[c] as f64;
                assert!((out.row(n)[c] as f64 - want).abs() < 1e-6);
            }
        }
    }

    proptest! {
        #[test]
        fn interpolate_is_convex(seed in 0u64..500, th in 1usize..9, tw in 1usize..9) {
            let pe = PositionalEmbedding::<f32>::random((6, 5), 3, 1.0, &mut rng(seed));
            let out = resample_positional(&pe, (th, tw), ResampleStrategy::Interpolate).unwrap();
            for c in 0..3 {
                let col: Vec<f32> = (0..30).map(|k| pe.q().row(k)[c]).collect();
                let lo = col.iter().cloned().fold(f32::INFINITY, f32::min);
                let hi = col.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                for k in 0..th * tw {
                    let v = out.row(k)[c];
                    prop_assert!(v >= lo - 1e-6 && v <= hi + 1e-6);
                }
            }
        }

        #[test]
        fn nested_boxes_nested_foreground(x in 0.0f64..100.0, y in 0.0f64..100.0, w in 0.0f64..60.0, h in 0.0f64..60.0, g in 0.0f64..1.0) {
            let inner = BBox::new(x, y, w, h).clipped(112.0, 112.0);
            let outer = BBox::new(inner.x * g, inner.y * g, 0.0, 0.0);
            let outer = BBox::new(outer.x, outer.y, (inner.right() - outer.x + w * g).min(112.0 - outer.x), (inner.bottom() - outer.y + h * g).min(112.0 - outer.y));
            let a = token_type_ids((7, 7), (14, 14), &inner, 16).unwrap();
            let b = token_type_ids((7, 7), (14, 14), &outer, 16).unwrap();
            for (p, q) in a.ids.iter().zip(&b.ids) {
                if *p == TokenType::TemplateForeground {
                    prop_assert_eq!(*q, TokenType::TemplateForeground);
                }
            }
        }
    }
}
