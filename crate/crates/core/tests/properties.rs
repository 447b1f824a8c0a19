use proptest::prelude::*;

use wnet::data::{fold_split, fold_split_shuffled, generate_scene, read_pfm, write_pfm, SceneKind};
use wnet::ensemble::{binarize, ensemble, sharpen, BinaryMask, ProbabilityMap};
use wnet::metrics::{confusion, dice_from_counts, dice_set_form, precision, recall};
use wnet::nn::{DoubleEncoderDecoder, EncoderDecoderConfig};
use wnet::optim::{adam_step, Adam, AdamConfig};
use wnet::tensor::{Graph, ParamStore, Tensor};

fn maps(k: usize, len: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(0.0..=1.0f64, len), k)
}

fn to_maps(raw: &[Vec<f64>], w: usize, h: usize) -> Vec<ProbabilityMap> {
    raw.iter().map(|v| ProbabilityMap::new(w, h, v.clone()).unwrap()).collect()
}

fn mask_pair(len: usize) -> impl Strategy<Value = (Vec<u8>, Vec<u8>)> {
    (prop::collection::vec(0..=1u8, len), prop::collection::vec(0..=1u8, len))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn ensemble_is_pointwise_monotone_in_t(raw in maps(4, 36), t1 in 0.05..4.0f64, dt in 0.0..4.0f64) {
        let m = to_maps(&raw, 6, 6);
        let (lo, hi) = (ensemble(&m, t1).unwrap(), ensemble(&m, t1 + dt).unwrap());
        for (a, b) in lo.values().iter().zip(hi.values()) {
            prop_assert!(a >= b);
            prop_assert!((0.0..=1.0).contains(a));
        }
        prop_assert!(binarize(&lo, 0.5).foreground() >= binarize(&hi, 0.5).foreground());
    }

    #[test]
    fn ensemble_ignores_map_order(raw in maps(4, 16), t in 0.1..3.0f64, rot in 0usize..4) {
        let mut m = to_maps(&raw, 4, 4);
        let a = ensemble(&m, t).unwrap();
        m.rotate_left(rot);
        m.swap(0, 3);
        let b = ensemble(&m, t).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn single_map_ensemble_is_sharpen(raw in maps(1, 16), t in 0.1..3.0f64) {
        let m = to_maps(&raw, 4, 4);
        prop_assert_eq!(ensemble(&m, t).unwrap(), sharpen(&m[0], t).unwrap());
    }

    #[test]
    fn recall_falls_with_temperature(raw in maps(4, 36), gt in prop::collection::vec(0..=1u8, 36)) {
        let m = to_maps(&raw, 6, 6);
        let gt = BinaryMask::new(6, 6, gt).unwrap();
        let r: Vec<f64> = [0.5, 1.0, 2.0]
            .iter()
            .map(|&t| recall(&confusion(&binarize(&ensemble(&m, t).unwrap(), 0.5), &gt).unwrap()))
            .collect();
        prop_assert!(r[0] >= r[1] && r[1] >= r[2]);
    }

    #[test]
    fn dice_forms_agree((p, g) in mask_pair(64)) {
        let (p, g) = (BinaryMask::new(8, 8, p).unwrap(), BinaryMask::new(8, 8, g).unwrap());
        let c = confusion(&p, &g).unwrap();
        prop_assert_eq!(dice_set_form(&p, &g).unwrap(), dice_from_counts(&c));
        let (pr, re) = (precision(&c), recall(&c));
        if pr + re > 0.0 {
            prop_assert!((dice_from_counts(&c) - 2.0 * pr * re / (pr + re)).abs() <= 1e-12);
        }
    }

    #[test]
    fn true_negatives_do_not_matter((p, g) in mask_pair(16), extra in 1usize..20) {
        let (p, g) = (BinaryMask::new(4, 4, p).unwrap(), BinaryMask::new(4, 4, g).unwrap());
        let pad = |m: &BinaryMask| BinaryMask::from_fn(4 + extra, 4, |x, y| x < 4 && m.get(x, y));
        let (c, cp) = (confusion(&p, &g).unwrap(), confusion(&pad(&p), &pad(&g)).unwrap());
        prop_assert_eq!(cp.tn, c.tn + 4 * extra as u64);
        prop_assert_eq!(dice_from_counts(&cp), dice_from_counts(&c));
        prop_assert_eq!(precision(&cp), precision(&c));
        prop_assert_eq!(recall(&cp), recall(&c));
    }

    #[test]
    fn folds_partition(n in 2usize..200, k in 2usize..9, seed in any::<u64>()) {
        prop_assume!(k <= n);
        let mut seen = vec![0u8; n];
        for f in 0..k {
            let a = fold_split(n, k, f).unwrap();
            let b = fold_split_shuffled(n, k, f, seed).unwrap();
            prop_assert_eq!(a.val_ids.len(), b.val_ids.len());
            prop_assert!(a.val_ids.windows(2).all(|w| w[1] == w[0] + 1));
            for &v in &a.val_ids {
                seen[v] += 1;
            }
        }
        prop_assert!(seen.iter().all(|&s| s == 1));
    }

    #[test]
    fn pfm_roundtrip(raw in prop::collection::vec(0.0..=1.0f32, 1..80), w in 1usize..9) {
        let h = raw.len().div_ceil(w);
        let mut v: Vec<f64> = raw.iter().map(|&x| x as f64).collect();
        v.resize(w * h, 0.25);
        let map = ProbabilityMap::new(w, h, v).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pfm");
        write_pfm(&map, &path).unwrap();
        prop_assert_eq!(read_pfm(&path).unwrap(), map);
    }

    #[test]
    fn scenes_regenerate_identically(seed in any::<u64>(), kind in 0usize..3) {
        let kind = SceneKind::ALL[kind];
        prop_assert_eq!(generate_scene(seed, kind, 16, 16).unwrap(), generate_scene(seed, kind, 16, 16).unwrap());
    }

    #[test]
    fn adam_ignores_parameter_order(a in prop::collection::vec(-2.0..2.0f64, 3), b in prop::collection::vec(-2.0..2.0f64, 2)) {
        let build = |order: &[(&str, &Vec<f64>)]| {
            let mut s = ParamStore::new();
            for (name, v) in order {
                s.add(*name, Tensor::from_vec((*v).clone())).unwrap();
            }
            s
        };
        let run = |mut s: ParamStore| {
            let mut adam = Adam::new(AdamConfig::default(), &s);
            for _ in 0..3 {
                adam_step(&mut adam, &mut s, |s: &mut ParamStore| {
                    for p in s.iter_mut() {
                        let v = p.value.data().to_vec();
                        for (gi, w) in p.grad.data_mut().iter_mut().zip(v) {
                            *gi += 2.0 * w;
                        }
                    }
                    Ok::<_, std::convert::Infallible>(0.0)
                })
                .unwrap();
            }
            let mut out: Vec<(String, Vec<f64>)> = s.iter().map(|p| (p.name.clone(), p.value.data().to_vec())).collect();
            out.sort_by(|x, y| x.0.cmp(&y.0));
            out
        };
        prop_assert_eq!(run(build(&[("a", &a), ("b", &b)])), run(build(&[("b", &b), ("a", &a)])));
    }
}

fn loss(model: &DoubleEncoderDecoder, image: &Tensor, target: &Tensor) -> f64 {
    let mut g = Graph::new();
    let l = model.loss(&mut g, image, target, None).unwrap();
    g.value(l).item()
}

#[test]
fn one_small_step_lowers_the_loss() {
    let config = EncoderDecoderConfig { in_channels: 3, stage_widths: vec![4, 8], lateral_width: 4 };
    let mut decreased = 0;
    for seed in 0..20u64 {
        let mut model = DoubleEncoderDecoder::new(config.clone(), seed).unwrap();
        let scene = generate_scene(seed, SceneKind::ALL[(seed % 2) as usize], 16, 16).unwrap();
        let target = scene.mask.to_tensor();
        let before = loss(&model, &scene.image, &target);
        let mut adam = Adam::new(AdamConfig { lr: 1e-4, ..AdamConfig::default() }, model.params());
        adam_step(&mut adam, &mut model, |m: &mut DoubleEncoderDecoder| m.loss_and_backward(&scene.image, &target, None)).unwrap();
        if loss(&model, &scene.image, &target) < before {
            decreased += 1;
        }
    }
    assert!(decreased >= 18, "loss fell on only {decreased}/20 seeds");
}
