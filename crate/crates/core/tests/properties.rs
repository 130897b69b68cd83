use progae_core::checkpoint;
use progae_core::config::Preset;
use progae_core::latent_ops::{code_grid, edit_code, lerp, slerp};
use progae_core::losses::kl_unit_gaussian;
use progae_core::metrics::{fit_feature_stats, frechet_distance};
use progae_core::normalization::{pixel_norm, spectral_normalize, SpectralState};
use progae_core::trainer::{fade_alpha, TrainState};
use progae_core::{Config, GridSpec, Interpolation, LatentCode, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn code(dim: usize) -> impl Strategy<Value = LatentCode> {
    prop::collection::vec(-1.0f64..1.0, dim)
        .prop_filter("non-zero", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-3)
        .prop_map(|v| LatentCode::normalized(v).unwrap())
}

fn norm(c: &LatentCode) -> f64 {
    c.values().iter().map(|x| x * x).sum::<f64>().sqrt()
}

proptest! {
    #[test]
    fn interpolation_stays_on_sphere_and_hits_endpoints(a in code(6), b in code(6), t in 0.0f64..=1.0) {
        let dot: f64 = a.values().iter().zip(b.values()).map(|(x, y)| x * y).sum();
        prop_assume!(dot > -0.99);
        for how in [Interpolation::Slerp, Interpolation::Lerp] {
            let z = how.apply(&a, &b, t).unwrap();
            prop_assert!((norm(&z) - 1.0).abs() < 1e-12);
        }
        prop_assert_eq!(slerp(&a, &b, 0.0).unwrap(), a.clone());
        prop_assert_eq!(slerp(&a, &b, 1.0).unwrap(), b.clone());
        prop_assert_eq!(lerp(&a, &b, 1.0).unwrap(), b);
    }

    #[test]
    fn slerp_moves_at_constant_angular_speed(a in code(4), b in code(4), t in 0.05f64..0.95) {
        let dot: f64 = a.values().iter().zip(b.values()).map(|(x, y)| x * y).sum();
        prop_assume!(dot > -0.9 && dot < 0.9);
        let omega = dot.acos();
        let z = slerp(&a, &b, t).unwrap();
        let along: f64 = a.values().iter().zip(z.values()).map(|(x, y)| x * y).sum();
        prop_assert!((along.clamp(-1.0, 1.0).acos() - t * omega).abs() < 1e-9);
    }

    #[test]
    fn zero_edit_is_identity_and_edits_stay_unit(c in code(5), d in prop::collection::vec(-1.0f64..1.0, 5), l in -3.0f64..3.0) {
        prop_assert_eq!(edit_code(&c, &d, 0.0).unwrap(), c.clone());
        if let Ok(e) = edit_code(&c, &d, l) {
            prop_assert!((norm(&e) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn grid_corners_are_the_inputs(cs in prop::collection::vec(code(3), 4), rows in 2usize..5, cols in 2usize..5) {
        let grid = code_grid(&cs, GridSpec { rows, cols }, Interpolation::Slerp);
        prop_assume!(grid.is_ok());
        let grid = grid.unwrap();
        prop_assert_eq!(grid.len(), rows * cols);
        prop_assert_eq!(&grid[0], &cs[0]);
        prop_assert_eq!(&grid[cols - 1], &cs[1]);
        prop_assert_eq!(&grid[(rows - 1) * cols], &cs[2]);
        prop_assert_eq!(&grid[rows * cols - 1], &cs[3]);
    }

    #[test]
    fn kl_is_nonnegative_and_order_free(rows in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), 2..10)) {
        let codes: Vec<LatentCode> = rows.iter().map(|r| LatentCode::new(r.clone())).collect();
        let k = kl_unit_gaussian(&codes).unwrap().kl;
        prop_assert!(k >= -1e-12);
        let mut rev = codes.clone();
        rev.reverse();
        prop_assert!((kl_unit_gaussian(&rev).unwrap().kl - k).abs() <= 1e-9 * k.abs().max(1.0));
    }

    #[test]
    fn fade_alpha_is_a_clamped_ramp(level in 0usize..6, budget in 2u64..10_000, a in 0u64..20_000, b in 0u64..20_000) {
        let (lo, hi) = (a.min(b), a.max(b));
        let (x, y) = (fade_alpha(level, lo, budget), fade_alpha(level, hi, budget));
        prop_assert!((0.0..=1.0).contains(&x) && (0.0..=1.0).contains(&y));
        prop_assert!(x <= y);
        if level == 0 {
            prop_assert_eq!(x, 1.0);
        }
    }

    #[test]
    fn pixel_norm_gives_unit_rms(v in prop::collection::vec(-10.0f64..10.0, 2 * 4 * 3)) {
        prop_assume!(v.iter().any(|x| x.abs() > 1e-2));
        let y = pixel_norm(&Tensor::new(&[2, 4, 3, 1], v.clone()).unwrap(), 1e-8).unwrap();
        for n in 0..2 {
            for p in 0..3 {
                let ms: f64 = (0..4).map(|c| v[n * 12 + c * 3 + p].powi(2)).sum::<f64>() / 4.0;
                if ms < 1e-4 {
                    continue;
                }
                let out: f64 = (0..4).map(|c| y.data()[n * 12 + c * 3 + p].powi(2)).sum::<f64>() / 4.0;
                prop_assert!((out.sqrt() - 1.0).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn spectral_normalization_ignores_positive_scale(v in prop::collection::vec(-2.0f64..2.0, 12), s in 0.01f64..100.0, seed in 0u64..100) {
        prop_assume!(v.iter().any(|x| x.abs() > 0.1));
        let w = Tensor::new(&[3, 4], v).unwrap();
        let st = SpectralState::random(3, &mut ChaCha8Rng::seed_from_u64(seed));
        let (a, _) = spectral_normalize(&w, &st, 3).unwrap();
        let (b, _) = spectral_normalize(&w.map(|x| x * s), &st, 3).unwrap();
        prop_assert!(a.max_abs_diff(&b) < 1e-9);
    }

    #[test]
    fn frechet_distance_is_symmetric_and_nonnegative(a in prop::collection::vec(-2.0f64..2.0, 30), b in prop::collection::vec(-2.0f64..2.0, 30)) {
        let sa = fit_feature_stats(&Tensor::new(&[10, 3], a).unwrap()).unwrap();
        let sb = fit_feature_stats(&Tensor::new(&[10, 3], b).unwrap()).unwrap();
        let (ab, ba) = (frechet_distance(&sa, &sb).unwrap(), frechet_distance(&sb, &sa).unwrap());
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() < 1e-7 * ab.max(1.0));
        prop_assert!(frechet_distance(&sa, &sa).unwrap() < 1e-7);
    }

    #[test]
    fn unit_codes_keep_their_bits(c in code(7)) {
        let again = LatentCode::unit(c.values().to_vec()).unwrap();
        prop_assert!(again.values().iter().zip(c.values()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn config_override_round_trips(seed in 0u64..1_000_000, lx in 0.0f64..50.0, batch in 2usize..64) {
        let mut c = Preset::DeskSynthetic.config();
        c.set("seed", &seed.to_string()).unwrap();
        c.set("train.loss.lambda_x", &format!("{lx:?}")).unwrap();
        c.set("train.batch_schedule", &format!("[{batch}, {batch}, {batch}, {batch}]")).unwrap();
        prop_assert_eq!(c.seed, seed);
        prop_assert_eq!(c.train.loss.lambda_x, lx);
        let back = Config::from_toml(&c.to_toml().unwrap()).unwrap();
        prop_assert_eq!(back.hash(), c.hash());
        prop_assert!(back.diff(&c).is_empty());
    }

    #[test]
    fn truncated_checkpoints_are_rejected(cut in 0usize..4096) {
        let mut cfg = Preset::DeskSynthetic.config();
        cfg.model.max_resolution = 8;
        cfg.model.channel_schedule = vec![4, 4];
        cfg.train.phase_samples = vec![1_000, 1_000];
        let state = TrainState::new(cfg).unwrap();
        let bytes = checkpoint::to_bytes(&state).unwrap();
        let cut = cut.min(bytes.len() - 1);
        prop_assert!(checkpoint::from_bytes(&bytes[..cut]).is_err());
    }
}
