//! Fast built-in property suite behind `lorat selftest`.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bbox::BBox;
use crate::embedding::{resample_positional, token_type_ids, PositionalEmbedding, ResampleStrategy};
use crate::encoder::{encoder_forward, Encoder, EncoderConfig};
use crate::evalkit::{
    average_iou, dummy_static, iou, run_benchmark, synthetic_suite, DummyStatic, FinetuneConfig, Method,
};
use crate::head::{cell_center, decode_cell, encode_box, select_best_index};
use crate::model::{batch_loss, batch_loss_value, LoraConfig, ModelConfig, TrackerModel};
use crate::numerics::{mul_count, reset_mul_count, Archive, Tensor};
use crate::pipeline::{track_video, TrackerConfig};

#[derive(Clone, Debug)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

type Outcome = std::result::Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

/// A model small enough for exhaustive checks.
pub fn micro_config() -> ModelConfig {
    ModelConfig {
        name: "micro".into(),
        search_size: 32,
        template_size: 16,
        patch: 8,
        dim: 8,
        depth: 1,
        heads: 2,
        mlp_hidden: 16,
        head_hidden: 8,
    }
}

fn merge_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = EncoderConfig { depth: 2, dim: 16, heads: 4, mlp_hidden: 32 };
    let base = Encoder::<f32>::random(cfg, 0.1, &mut rng).map_err(e2s)?;
    let mut enc = base.clone();
    enc.wrap_lora(4, 8.0, &mut rng).map_err(e2s)?;
    enc.visit_params_mut(&mut |n, t| {
        if n.ends_with("lora_b") {
            *t = Tensor::randn(t.shape().to_vec(), 0.05, &mut rng).with_requires_grad(true);
        }
    });
    let mut merged = enc.clone();
    merged.merge().map_err(e2s)?;
    let mut worst = 0f64;
    for _ in 0..20 {
        let x = Tensor::<f32>::randn([13, 16], 1.0, &mut rng);
        let a = encoder_forward(&x, &enc, 4, (3, 3)).map_err(e2s)?;
        let b = encoder_forward(&x, &merged, 4, (3, 3)).map_err(e2s)?;
        worst = worst.max(a.all_tokens.max_abs_diff(&b.all_tokens));
    }
    ensure(worst < 1e-5, || format!("max diff {worst:e}"))?;
    let x = Tensor::<f32>::zeros([13, 16]);
    let count = |e: &Encoder<f32>| {
        reset_mul_count();
        encoder_forward(&x, e, 4, (3, 3)).map(|_| mul_count())
    };
    let (cb, cm) = (count(&base).map_err(e2s)?, count(&merged).map_err(e2s)?);
    ensure(cb == cm, || format!("multiplies: base {cb}, merged {cm}"))?;
    Ok(format!("max diff {worst:.1e}, {cm} multiplies"))
}

fn zero_init_neutrality() -> Outcome {
    let videos = synthetic_suite(1, 6, (64, 64), false, 3).map_err(e2s)?;
    let v = &videos[0];
    let base = TrackerModel::<f32>::random(micro_config(), 5).map_err(e2s)?;
    let wrapped = base.clone().wrapped(LoraConfig { rank: 2, alpha: 4.0 }, 6).map_err(e2s)?;
    let cfg = TrackerConfig { allow_unmerged: true, ..TrackerConfig::default() };
    let a = track_video(&base, &v.frames, &v.record.gt_boxes[0], cfg.clone()).map_err(e2s)?;
    let b = track_video(&wrapped, &v.frames, &v.record.gt_boxes[0], cfg).map_err(e2s)?;
    ensure(a == b, || "predictions differ".into())?;
    Ok(format!("{} frames identical", a.len()))
}

fn freeze_discipline() -> Outcome {
    let videos = synthetic_suite(2, 5, (64, 64), false, 4).map_err(e2s)?;
    let mut m = TrackerModel::<f32>::random(micro_config(), 7)
        .and_then(|m| m.wrapped(LoraConfig { rank: 2, alpha: 4.0 }, 8))
        .map_err(e2s)?;
    let before = m.checksums();
    let ft = FinetuneConfig { steps: 3, batch: 2, eval_every: 0, ..FinetuneConfig::default() };
    crate::evalkit::finetune(&mut m, &videos, &ft, &TrackerConfig::default()).map_err(e2s)?;
    let after = m.checksums();
    let mut changed = 0;
    for (name, (sum, trainable)) in &before {
        let now = after[name].0;
        ensure(*trainable || now == *sum, || format!("frozen {name} changed"))?;
        changed += (now != *sum) as usize;
    }
    Ok(format!("{changed} trainable tensors changed, frozen untouched"))
}

fn gradient_check() -> Outcome {
    let videos = synthetic_suite(1, 4, (64, 64), false, 9).map_err(e2s)?;
    let mut m = TrackerModel::<f64>::random(micro_config(), 10)
        .and_then(|m| m.wrapped(LoraConfig { rank: 2, alpha: 4.0 }, 11))
        .map_err(e2s)?;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    m.visit_params_mut(&mut |n, t| {
        if n.ends_with("lora_b") {
            *t = Tensor::randn(t.shape().to_vec(), 0.1, &mut rng).with_requires_grad(true);
        }
    });
    let ft = FinetuneConfig::default();
    let sample = crate::evalkit::draw_sample(&m, &videos[0], &TrackerConfig::default(), &ft, &mut rng).map_err(e2s)?;
    let samples = [sample];
    let (_, grads) = batch_loss(&m, &samples).map_err(e2s)?;
    let names: Vec<String> = m
        .named_params()
        .into_iter()
        .filter(|(_, t)| t.requires_grad())
        .map(|(n, _)| n)
        .collect();
    let h = 1e-5;
    let mut worst = 0f64;
    for name in &names {
        let t = m.param(name).unwrap().clone();
        let g = grads.of(m.param(name).unwrap()).ok_or_else(|| format!("no gradient for {name}"))?.to_vec();
        for _ in 0..2 {
            let k = rng.random_range(0..t.len());
            let x = t.data()[k];
            let mut probe = m.clone();
            probe.set_param_element(name, k, x + h).map_err(e2s)?;
            let up = batch_loss_value(&probe, &samples).map_err(e2s)?;
            probe.set_param_element(name, k, x - h).map_err(e2s)?;
            let down = batch_loss_value(&probe, &samples).map_err(e2s)?;
            let fd = (up - down) / (2.0 * h);
            let rel = (fd - g[k]).abs() / fd.abs().max(g[k].abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    ensure(worst < 1e-3, || format!("worst relative error {worst:e}"))?;
    Ok(format!("{} tensors, worst rel err {worst:.1e}", names.len()))
}

fn positional_reuse() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let pe = PositionalEmbedding::<f64>::random((6, 6), 4, 1.0, &mut rng);
    let same = resample_positional(&pe, (6, 6), ResampleStrategy::Interpolate).map_err(e2s)?;
    ensure(same.data() == pe.q().data(), || "native resample is not identity".into())?;
    let small = resample_positional(&pe, (4, 5), ResampleStrategy::Interpolate).map_err(e2s)?;
    for c in 0..4 {
        let col: Vec<f64> = (0..36).map(|i| pe.q().data()[i * 4 + c]).collect();
        let (lo, hi) = col.iter().fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
        for i in 0..20 {
            let v = small.data()[i * 4 + c];
            ensure(v >= lo - 1e-12 && v <= hi + 1e-12, || format!("channel {c} out of range"))?;
        }
    }
    Ok("identity at native grid, outputs within source range".into())
}

fn token_types() -> Outcome {
    let ids = token_type_ids((7, 7), (14, 14), &BBox::new(32.0, 32.0, 48.0, 48.0), 16).map_err(e2s)?;
    ensure(ids.foreground_count() == 9, || format!("{} foreground tokens", ids.foreground_count()))?;
    Ok("9 foreground tokens".into())
}

fn head_decoding() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut worst = 0f64;
    for _ in 0..200 {
        let ltrb = [(); 4].map(|_| rng.random_range(0.0..0.5));
        let c = cell_center(rng.random_range(0..14), rng.random_range(0..14), (14, 14), 224.0);
        let back = encode_box(&decode_cell(ltrb, c, 224.0), c, 224.0);
        for (a, b) in back.iter().zip(ltrb) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure(worst < 1e-5, || format!("round trip error {worst:e}"))?;
    for _ in 0..20 {
        let c: Vec<_> = (0..10).map(|k| (BBox::new(k as f64, 0.0, 1.0, 1.0), rng.random_range(-3.0..3.0))).collect();
        let t: Vec<_> = c.iter().map(|(b, s): &(BBox, f64)| (*b, s.exp() * 2.0 + 1.0)).collect();
        ensure(select_best_index(&c).ok() == select_best_index(&t).ok(), || "argmax moved".into())?;
    }
    Ok(format!("round trip {worst:.1e}"))
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let rand_box = |rng: &mut ChaCha8Rng| {
        let x = rng.random_range(0..64);
        let y = rng.random_range(0..64);
        BBox::new(x as f64, y as f64, rng.random_range(0..=64 - x) as f64, rng.random_range(0..=64 - y) as f64)
    };
    for _ in 0..200 {
        let (a, b) = (rand_box(&mut rng), rand_box(&mut rng));
        let (mut inter, mut union) = (0u32, 0u32);
        for py in 0..64 {
            for px in 0..64 {
                let (cx, cy) = (px as f64 + 0.5, py as f64 + 0.5);
                let (ia, ib) = (a.contains_point(cx, cy), b.contains_point(cx, cy));
                inter += (ia && ib) as u32;
                union += (ia || ib) as u32;
            }
        }
        let want = if union == 0 { 0.0 } else { inter as f64 / union as f64 };
        ensure(iou(&a, &b) == want, || format!("{a:?} vs {b:?}: {} != {want}", iou(&a, &b)))?;
    }
    let videos = synthetic_suite(3, 5, (64, 64), true, 16).map_err(e2s)?;
    let records: Vec<_> = videos.iter().map(|v| v.record.clone()).collect();
    let rep = average_iou(&records, &dummy_static(&records), "dummy").map_err(e2s)?;
    ensure(rep.average_iou == 1.0, || format!("dummy on static {}", rep.average_iou))?;
    let g = BBox::new(0.0, 0.0, 4.0, 4.0);
    let moved = crate::evalkit::TrackRecord {
        video_id: "m".into(),
        frame_source: Default::default(),
        gt_boxes: vec![g, g.translated(4.0, 0.0), g.translated(4.0, 0.0)],
    };
    let zero = average_iou(&[moved.clone()], &dummy_static(&[moved]), "dummy").map_err(e2s)?;
    ensure(zero.average_iou == 0.0, || format!("translate-by-width {}", zero.average_iou))?;
    Ok("pixel oracle exact, dummy-static 1.0 / 0.0".into())
}

fn determinism() -> Outcome {
    let videos = synthetic_suite(4, 5, (64, 64), false, 17).map_err(e2s)?;
    let methods = [Method::new("dummy-static", DummyStatic)];
    let a = run_benchmark(&methods, &videos, 1, "selftest").map_err(e2s)?;
    let b = run_benchmark(&methods, &videos, 3, "selftest").map_err(e2s)?;
    ensure(a.to_json().map_err(e2s)? == b.to_json().map_err(e2s)?, || "reports differ".into())?;
    Ok("workers 1 and 3 agree".into())
}

fn archive_round_trip() -> Outcome {
    let m = TrackerModel::<f32>::random(micro_config(), 18)
        .and_then(|m| m.wrapped(LoraConfig { rank: 2, alpha: 4.0 }, 19))
        .map_err(e2s)?;
    let mut bytes = Vec::new();
    m.to_archive().write_to(&mut bytes).map_err(e2s)?;
    let back = Archive::read_from(&bytes[..]).map_err(e2s)?;
    let mut fresh = TrackerModel::<f32>::random(micro_config(), 99).map_err(e2s)?;
    fresh.load_archive(&back, 4.0).map_err(e2s)?;
    ensure(fresh.to_archive() == m.to_archive(), || "archive round trip changed tensors".into())?;
    Ok(format!("{} tensors", back.len()))
}

pub const CHECKS: [(&str, fn() -> Outcome); 10] = [
    ("lora merge equivalence and multiply count", merge_equivalence),
    ("lora zero-init neutrality", zero_init_neutrality),
    ("freeze discipline", freeze_discipline),
    ("loss gradients match finite differences", gradient_check),
    ("positional embedding reuse", positional_reuse),
    ("token-type annotation", token_types),
    ("head decoding and argmax invariance", head_decoding),
    ("iou and average-iou oracles", metric_oracles),
    ("benchmark determinism across workers", determinism),
    ("weight archive round trip", archive_round_trip),
];

pub fn run_selftest() -> Vec<Check> {
    CHECKS
        .iter()
        .map(|(name, f)| {
            let t = Instant::now();
            let r = f();
            Check {
                name,
                passed: r.is_ok(),
                detail: r.unwrap_or_else(|e| e),
                seconds: t.elapsed().as_secs_f64(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    #[test]
    fn all_checks_pass() {
        for c in super::run_selftest() {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
