use gated_latent_core::analysis::{
    aggregate, detect_branching_steps, four_pass_snapshots, overlap_profile, step_overlap, topk_overlap,
    LensSnapshot, OverlapConfig, StepOverlap,
};
use gated_latent_core::decode::{decode, DecodeConfig};
use gated_latent_core::dist::TokenId;
use gated_latent_core::error::Error;
use gated_latent_core::model::{ToyTransformer, ToyTransformerConfig};
use proptest::prelude::*;

fn toy_transcripts(m: &ToyTransformer) -> Vec<gated_latent_core::decode::Transcript> {
    (0..6u32)
        .map(|i| {
            let prompt: Vec<TokenId> = (0..3).map(|j| TokenId((i * 17 + j * 3) % 120)).collect();
            let cfg = DecodeConfig { max_steps: 24, seed: i as u64, ..Default::default() };
            decode(m, &prompt, &cfg).unwrap()
        })
        .collect()
}

#[test]
fn one_hot_soft_pass_tracks_top1_everywhere() {
    let m = ToyTransformer::new(ToyTransformerConfig::default()).unwrap();
    let ts = toy_transcripts(&m);
    let steps = detect_branching_steps(&ts, 0.5, 2.0, 200, 0).unwrap();
    assert!(!steps.is_empty());
    let cfg = OverlapConfig { mixture_k: Some(1), ..Default::default() };
    let (raw, reg) = overlap_profile(&m, &ts, &steps, &cfg).unwrap();
    let passes = four_pass_snapshots(&m, &ts, &steps, &cfg).unwrap();
    for profile in [&raw, &reg] {
        assert_eq!(profile.n, steps.len());
        assert_eq!(profile.layers.len(), 6);
        for (l, layer) in profile.layers.iter().enumerate() {
            assert_eq!(layer.o_top1_mean, 1.0);
            assert_eq!(layer.o_top1_se, 0.0);
            let ref_overlap: Vec<f64> = passes
                .iter()
                .map(|p| topk_overlap(&p.top1.sets[l], &p.top2.sets[l], 10).unwrap())
                .collect();
            let mean = ref_overlap.iter().sum::<f64>() / ref_overlap.len() as f64;
            assert!((layer.o_top2_mean - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn profiles_stay_in_unit_interval() {
    let m = ToyTransformer::new(ToyTransformerConfig::default()).unwrap();
    let ts = toy_transcripts(&m);
    let steps = detect_branching_steps(&ts, 0.5, 2.0, 200, 0).unwrap();
    let (raw, reg) = overlap_profile(&m, &ts, &steps, &OverlapConfig::default()).unwrap();
    for l in raw.layers.iter().chain(&reg.layers) {
        for v in [l.o_top1_mean, l.o_top2_mean] {
            assert!((0.0..=1.0).contains(&v));
        }
    }
}

#[test]
fn replay_rejects_foreign_traces() {
    let m = ToyTransformer::new(ToyTransformerConfig::default()).unwrap();
    let other = ToyTransformer::new(ToyTransformerConfig { seed: 43, ..Default::default() }).unwrap();
    let ts = toy_transcripts(&m);
    let steps = detect_branching_steps(&ts, 0.5, 2.0, 200, 0).unwrap();
    let err = overlap_profile(&other, &ts, &steps, &OverlapConfig::default()).unwrap_err();
    assert!(matches!(err, Error::InvalidInput(_)), "{err}");
    assert!(matches!(
        overlap_profile(&m, &ts, &[], &OverlapConfig::default()),
        Err(Error::EmptyInput(_))
    ));
}

fn brute_force(steps: &[StepOverlap], layer: usize, top2: bool) -> (f64, f64) {
    let xs: Vec<f64> = steps
        .iter()
        .map(|s| if top2 { s.o_top2[layer] } else { s.o_top1[layer] })
        .collect();
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let se = if xs.len() > 1 {
        let ss: f64 = xs.iter().map(|x| (x - mean).powi(2)).sum();
        (ss / (n - 1.0)).sqrt() / n.sqrt()
    } else {
        0.0
    };
    (mean, se)
}

fn set_strategy(k: usize) -> impl Strategy<Value = Vec<TokenId>> {
    prop::sample::subsequence((0u32..30).collect::<Vec<_>>(), k)
        .prop_map(|v| v.into_iter().map(TokenId).collect())
}

fn snapshot_strategy(layers: usize, k: usize) -> impl Strategy<Value = LensSnapshot> {
    prop::collection::vec(set_strategy(k), layers).prop_map(move |sets| LensSnapshot::new(k, sets).unwrap())
}

proptest! {
    #[test]
    fn aggregation_matches_brute_force(
        passes in (1usize..=5, 1usize..=4).prop_flat_map(|(n, layers)| {
            prop::collection::vec(
                (snapshot_strategy(layers, 5), snapshot_strategy(layers, 5), snapshot_strategy(layers, 5)),
                n,
            )
        })
    ) {
        let steps: Vec<StepOverlap> = passes
            .iter()
            .map(|(a, b, s)| step_overlap(a, b, s).unwrap())
            .collect();
        let p = aggregate(&steps).unwrap();
        for (l, layer) in p.layers.iter().enumerate() {
            let (m1, s1) = brute_force(&steps, l, false);
            let (m2, s2) = brute_force(&steps, l, true);
            prop_assert!((layer.o_top1_mean - m1).abs() <= 1e-12);
            prop_assert!((layer.o_top1_se - s1).abs() <= 1e-12);
            prop_assert!((layer.o_top2_mean - m2).abs() <= 1e-12);
            prop_assert!((layer.o_top2_se - s2).abs() <= 1e-12);
        }
    }

    #[test]
    fn overlap_is_symmetric_and_bounded(a in set_strategy(8), b in set_strategy(8)) {
        let x = topk_overlap(&a, &b, 8).unwrap();
        prop_assert_eq!(x, topk_overlap(&b, &a, 8).unwrap());
        prop_assert!((0.0..=1.0).contains(&x));
    }
}
