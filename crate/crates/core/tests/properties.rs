mod common;

use common::invariants::*;
use crowd_count::autodiff::{Graph, Tensor};
use crowd_count::backbone::BackboneConfig;
use crowd_count::heads::{quantize_density_level, smooth_l1_loss, DensityLevelConfig};
use crowd_count::model::{CrowdCounter, ModelConfig};
use crowd_count::profiler::{analytic_params, count_params, energy_per_image, layer_costs, with_input_size, LayerKind};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn ldwa_weights_are_a_distribution(x in ldwa_input()) {
        weights_form_a_distribution(&x)?;
    }

    #[test]
    fn ldwa_softmax_ignores_score_shifts(x in ldwa_input()) {
        shift_invariant(&x)?;
    }

    #[test]
    fn ldwa_without_parameters_is_average_pooling(x in ldwa_input()) {
        zero_params_match_average_pooling(&x)?;
    }

    #[test]
    fn ldwa_output_is_a_convex_combination(x in ldwa_input()) {
        convex_combination_bound(&x)?;
    }
}

proptest! {
    #[test]
    fn quantization_is_monotone_and_bounded(
        a in 0.0..5000.0f64,
        b in 0.0..5000.0f64,
        c_max in 1.0..4000.0f64,
        k in 2usize..=20,
    ) {
        let cfg = DensityLevelConfig::new(k, c_max).unwrap();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (l_lo, l_hi) = (quantize_density_level(lo, &cfg).unwrap(), quantize_density_level(hi, &cfg).unwrap());
        prop_assert!(l_lo <= l_hi && l_hi < k);
        if hi >= c_max {
            prop_assert_eq!(l_hi, k - 1);
        }
    }

    #[test]
    fn quantization_matches_threshold_count(c in 0u64..10_000, c_max in 1u64..5000, k in 2u64..=16) {
        let cfg = DensityLevelConfig::new(k as usize, c_max as f64).unwrap();
        let got = quantize_density_level(c as f64, &cfg).unwrap() as u64;
        prop_assert_eq!(got, brute_force_level(c.min(c_max), c_max, k));
    }

    #[test]
    fn rmse_bounds_mae((preds, truth) in metric_pairs()) {
        rmse_at_least_mae(&preds, &truth)?;
    }

    #[test]
    fn smooth_l1_is_symmetric_continuous_and_below_both_branches(d in -10.0..10.0f64) {
        let eval = |x: f64| {
            let mut g = Graph::<f64>::new();
            let p = g.constant(Tensor::new(&[1], vec![x]).unwrap());
            let l = smooth_l1_loss(&mut g, p, &[0.0]).unwrap();
            g.value(l).item()
        };
        let v = eval(d);
        prop_assert!((v - eval(-d)).abs() <= 1e-12);
        prop_assert!(v <= 0.5 * d * d + 1e-12 && v <= d.abs() + 1e-12);
        prop_assert!(v >= 0.0);
    }

    #[test]
    fn energy_is_bilinear(p in 0.1..500.0f64, t in 1e-4..10.0f64, s in 0.1..10.0f64) {
        let e = energy_per_image(p, t).unwrap();
        prop_assert!((e - p * t).abs() <= 1e-12 * e);
        prop_assert!((energy_per_image(p * s, t).unwrap() - s * e).abs() <= 1e-9 * s * e);
    }
}

fn small_config(ch: [usize; 4], blocks: [usize; 4], heads: [usize; 2], use_ldwa: bool, use_cls: bool) -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            input_size: [64, 64],
            channels: ch,
            blocks_per_stage: blocks,
            attention_heads: heads,
            window: 2,
            mlp_ratio: 2,
            expand_ratio: 2,
        },
        use_ldwa,
        use_cls_head: use_cls,
        ..ModelConfig::default()
    }
}

fn config_strategy() -> impl Strategy<Value = ModelConfig> {
    (
        prop::array::uniform4(0usize..=2),
        prop::array::uniform4(1usize..=2),
        prop::array::uniform2(1usize..=2),
        any::<bool>(),
        any::<bool>(),
    )
        .prop_map(|(steps, blocks, heads, ldwa, cls)| {
            // Non-decreasing even widths.
            let mut ch = [0; 4];
            let mut c = 2;
            for (slot, step) in ch.iter_mut().zip(steps) {
                c += 2 * step;
                *slot = c;
            }
            small_config(ch, blocks, heads, ldwa, cls)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn analytic_parameter_walk_matches_the_built_model(cfg in config_strategy()) {
        let (_, p) = CrowdCounter::init::<f32>(&cfg, 0).unwrap();
        prop_assert_eq!(analytic_params(&cfg).unwrap(), count_params(&p));
    }

    #[test]
    fn conv_flops_scale_with_area(cfg in config_strategy(), scale in 1usize..=3) {
        let small = layer_costs(&with_input_size(&cfg, [32 * scale, 32 * scale])).unwrap();
        let large = layer_costs(&with_input_size(&cfg, [64 * scale, 64 * scale])).unwrap();
        prop_assert_eq!(small.len(), large.len());
        for (a, b) in small.iter().zip(&large) {
            prop_assert_eq!(&a.name, &b.name);
            prop_assert_eq!(a.params, b.params);
            if a.kind == LayerKind::Conv {
                prop_assert_eq!(4 * a.flops, b.flops, "{}", a.name);
            } else {
                prop_assert!(b.flops >= a.flops);
            }
        }
    }
}
