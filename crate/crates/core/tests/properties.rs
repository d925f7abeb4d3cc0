use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use lorat_core::evalkit::{average_iou, iou, Prediction, TrackRecord};
use lorat_core::model::{ModelConfig, TrackerModel};
use lorat_core::numerics::Tensor;
use lorat_core::pipeline::{crop_to_image, image_to_crop, search_spec};
use lorat_core::BBox;

fn arb_box() -> impl Strategy<Value = BBox> {
    (0.0f64..60.0, 0.0f64..60.0, 0.5f64..30.0, 0.5f64..30.0).prop_map(|(x, y, w, h)| BBox::new(x, y, w, h))
}

fn arb_track() -> impl Strategy<Value = (Vec<BBox>, Vec<BBox>)> {
    (2usize..12).prop_flat_map(|n| (prop::collection::vec(arb_box(), n), prop::collection::vec(arb_box(), n)))
}

fn score(tracks: &[(Vec<BBox>, Vec<BBox>)]) -> f64 {
    let records: Vec<_> = tracks
        .iter()
        .enumerate()
        .map(|(i, (g, _))| TrackRecord { video_id: format!("v{i}"), frame_source: Default::default(), gt_boxes: g.clone() })
        .collect();
    let preds: Vec<_> = tracks.iter().enumerate().map(|(i, (_, p))| Prediction::new(format!("v{i}"), p.clone())).collect();
    average_iou(&records, &preds, "p").unwrap().average_iou
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn average_iou_ignores_track_and_frame_order(
        tracks in prop::collection::vec(arb_track(), 1..6),
        rot in 0usize..6,
        swap in any::<prop::sample::Index>(),
    ) {
        let base = score(&tracks);
        let mut moved = tracks.clone();
        let r = rot % moved.len();
        moved.rotate_left(r);
        let (g, p) = &mut moved[0];
        let k = 1 + swap.index(g.len() - 1);
        g.swap(1, k);
        p.swap(1, k);
        prop_assert!((score(&moved) - base).abs() < 1e-12);
    }

    #[test]
    fn iou_identity_and_bounds(a in arb_box(), b in arb_box()) {
        prop_assert_eq!(iou(&a, &a), 1.0);
        let v = iou(&a, &b);
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(v, iou(&b, &a));
    }

    #[test]
    fn crop_mapping_round_trips(prev in arb_box(), b in arb_box(), factor in 1.5f64..5.0) {
        let spec = search_spec(&prev, factor, 96).unwrap();
        let back = crop_to_image(&image_to_crop(&b, &spec), &spec);
        for (x, y) in [(back.x, b.x), (back.y, b.y), (back.w, b.w), (back.h, b.h)] {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }
}

#[test]
fn f32_and_f64_models_agree() {
    let cfg = ModelConfig::preset("tiny96").unwrap();
    let m32 = TrackerModel::<f32>::random(cfg.clone(), 8).unwrap();
    let m64 = TrackerModel::<f64>::random(cfg.clone(), 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let template = Tensor::<f64>::uniform([3, cfg.template_size, cfg.template_size], 0.0, 1.0, &mut rng);
    let search = Tensor::<f64>::uniform([3, cfg.search_size, cfg.search_size], 0.0, 1.0, &mut rng);
    let b = BBox::new(12.0, 12.0, 24.0, 24.0);
    let ids = m64.ids_for(&b).unwrap();
    let out64 = m64.predict(&m64.template_tokens(&template).unwrap(), &search, &ids).unwrap();
    let out32 = m32
        .predict(&m32.template_tokens(&template.cast()).unwrap(), &search.cast(), &ids)
        .unwrap();
    let diff = out64.scores.cast::<f32>().max_abs_diff(&out32.scores);
    assert!(diff < 1e-3, "score diff {diff}");
    let diff = out64.regs.cast::<f32>().max_abs_diff(&out32.regs);
    assert!(diff < 1e-3, "regression diff {diff}");
}
