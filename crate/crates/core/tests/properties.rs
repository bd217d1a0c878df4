use ditblock::cli::{resolve_config, RunConfig};
use ditblock::envs::{generate_dataset, Dataset, Env, NormStats, Task};
use ditblock::eval::{temporal_ensemble, EnsembleBuffer};
use ditblock::nn::sinusoidal_features;
use ditblock::schedule::{
    ddim_sample, ddim_timesteps, forward_noise, NoiseSchedule, DEFAULT_COSINE_OFFSET, MAX_BETA,
};
use ditblock::tensor::Tensor;
use ditblock::training::{learning_rate, relative_error};
use proptest::prelude::*;

fn chunk(vals: Vec<f64>, cols: usize) -> Tensor<f64> {
    Tensor::from_vec(&[vals.len() / cols, cols], vals)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cosine_schedule_is_monotone_and_clipped(steps in 2usize..1500, offset in 1e-4f64..0.1) {
        let s = NoiseSchedule::cosine(steps, offset).unwrap();
        prop_assert_eq!(s.betas.len(), steps);
        prop_assert!(s.betas.iter().all(|&b| b > 0.0 && b <= MAX_BETA));
        prop_assert!(s.alpha_bars.windows(2).all(|w| w[1] < w[0]));
        prop_assert!(s.alpha_bars.iter().all(|&a| a > 0.0 && a < 1.0));
        prop_assert!(s.sigma_coeff.iter().all(|v| v.is_finite() && *v >= 0.0));
    }

    #[test]
    fn forward_noise_inverts_through_predict_x0(
        a in prop::collection::vec(-1.0f64..1.0, 8),
        e in prop::collection::vec(-3.0f64..3.0, 8),
        k in 0usize..100,
    ) {
        let s = NoiseSchedule::cosine(100, DEFAULT_COSINE_OFFSET).unwrap();
        let (a0, eps) = (chunk(a, 2), chunk(e, 2));
        let x = forward_noise(&a0, k, &eps, &s).unwrap();
        let back = s.predict_x0(&x, k, &eps).unwrap();
        for (p, q) in back.data.iter().zip(&a0.data) {
            prop_assert!((p - q).abs() < 1e-9);
        }
    }

    #[test]
    fn exact_noise_oracle_recovers_clean_chunk(
        a in prop::collection::vec(-1.0f64..1.0, 6),
        seed in any::<u64>(),
        steps in 2usize..=20,
    ) {
        let s = NoiseSchedule::cosine(100, DEFAULT_COSINE_OFFSET).unwrap();
        let a0 = chunk(a, 2);
        let oracle = |x: &Tensor<f64>, k: usize| {
            let ab = s.alpha_bars[k];
            let data = x.data.iter().zip(&a0.data).map(|(x, a)| (x - ab.sqrt() * a) / (1.0 - ab).sqrt()).collect();
            Ok(Tensor::from_vec(&x.shape, data))
        };
        let x = ddim_sample(oracle, &s, steps, seed, (3, 2), None).unwrap();
        let eps = oracle(&x, 0).unwrap();
        let back = s.predict_x0(&x, 0, &eps).unwrap();
        for (p, q) in back.data.iter().zip(&a0.data) {
            prop_assert!((p - q).abs() <= 1e-6);
        }
    }

    #[test]
    fn ddim_timesteps_are_strictly_decreasing(total in 2usize..500, steps in 1usize..50) {
        prop_assume!(steps <= total);
        let ks = ddim_timesteps(total, steps).unwrap();
        prop_assert_eq!(ks.len(), steps);
        prop_assert_eq!(ks[0], total - 1);
        prop_assert!(ks.windows(2).all(|w| w[1] < w[0]));
        if steps > 1 {
            prop_assert_eq!(*ks.last().unwrap(), 0);
        }
    }

    #[test]
    fn ensemble_weights_are_normalised_and_monotone(decay in 0.0f64..3.0, n in 1usize..8, h in 8usize..12) {
        let mut b = EnsembleBuffer::new(decay, h, 1).unwrap();
        for t in 0..n {
            b.push(t, (0..h).map(|i| (t * 10 + i) as f64).collect()).unwrap();
        }
        let t = n - 1;
        let w = b.weights(t);
        prop_assert_eq!(w.len(), n);
        prop_assert!((w.iter().map(|(_, w)| w).sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(w.windows(2).all(|p| p[0].1 >= p[1].1 && p[0].0 > p[1].0));
        let a = temporal_ensemble(&b, t).unwrap()[0];
        let preds: Vec<f64> = (0..n).map(|s| (s * 10 + t - s) as f64).collect();
        let lo = preds.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = preds.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(a >= lo - 1e-9 && a <= hi + 1e-9);
    }

    #[test]
    fn learning_rate_is_bounded_and_decays(base in 1e-5f64..1e-2, warmup in 0usize..200, extra in 1usize..2000) {
        let total = warmup + extra;
        let mut prev = f64::INFINITY;
        for it in warmup..=total {
            let lr = learning_rate(it, base, warmup, total);
            prop_assert!(lr <= prev + 1e-18);
            prop_assert!(lr >= 0.1 * base - 1e-15 && lr <= base + 1e-15);
            prev = lr;
        }
        prop_assert!((learning_rate(total, base, warmup, total) - 0.1 * base).abs() < 1e-15);
    }

    #[test]
    fn relative_error_is_symmetric_and_bounded(a in -1e3f64..1e3, b in -1e3f64..1e3) {
        let e = relative_error(a, b);
        prop_assert_eq!(e, relative_error(b, a));
        prop_assert!((0.0..=2.0).contains(&e));
        prop_assert_eq!(relative_error(a, a), 0.0);
    }

    #[test]
    fn action_normalisation_round_trips(
        lo in prop::collection::vec(-2.0f32..0.0, 3),
        span in prop::collection::vec(0.1f32..3.0, 3),
        x in prop::collection::vec(-2.0f32..3.0, 9),
    ) {
        let hi: Vec<f32> = lo.iter().zip(&span).map(|(l, s)| l + s).collect();
        let stats = NormStats { proprio_min: lo.clone(), proprio_max: hi.clone(), action_min: lo, action_max: hi };
        let back = stats.denormalize_actions(&stats.normalize_actions(&x));
        for (p, q) in back.iter().zip(&x) {
            prop_assert!((p - q).abs() < 1e-5);
        }
    }

    #[test]
    fn sinusoidal_features_are_unit_pairs(k in 0.0f64..1000.0, half in 1usize..32) {
        let f = sinusoidal_features(k, 2 * half).unwrap();
        for i in 0..half {
            prop_assert!((f[i].powi(2) + f[half + i].powi(2) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn env_transitions_are_deterministic_and_clamped(
        seed in any::<u64>(),
        actions in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0, -1.0f64..1.0), 1..30),
        pick in any::<bool>(),
    ) {
        let task = if pick { Task::PickplaceLang } else { Task::Fork2d };
        let goal = (seed % task.goal_vocab() as u64) as usize;
        let mut a = Env::reset(task, seed, goal).unwrap();
        let mut b = Env::reset(task, seed, goal).unwrap();
        for (x, y, g) in actions {
            if a.done() {
                break;
            }
            let act: Vec<f64> = [x, y, g].into_iter().take(task.action_dim()).collect();
            let before = a.position();
            a.step(&act).unwrap();
            b.step(&act).unwrap();
            prop_assert_eq!(&a, &b);
            let p = a.position();
            prop_assert!((p[0] - before[0]).abs() <= 0.08 + 1e-12 && (p[1] - before[1]).abs() <= 0.08 + 1e-12);
        }
    }

    #[test]
    fn scalar_overrides_round_trip(width in 1usize..16, lr in 1e-6f64..1.0, episodes in 1usize..1000) {
        let rc = resolve_config(
            &RunConfig::default(),
            None,
            &[format!("model.width={}", 2 * width), "model.heads=2".into(), format!("train.lr={lr:e}"), format!("env.episodes={episodes}")],
        )
        .unwrap();
        prop_assert_eq!(rc.model.width, 2 * width);
        prop_assert_eq!(rc.train.lr, lr);
        prop_assert_eq!(rc.env.episodes, episodes);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn datasets_round_trip_exactly(n in 1usize..4, seed in 0u64..1000, pick in any::<bool>()) {
        let task = if pick { Task::PickplaceLang } else { Task::Fork2d };
        let data = generate_dataset(task, n, seed).unwrap();
        let bytes = data.to_bytes().unwrap();
        let back = Dataset::from_bytes(&bytes, std::path::Path::new("mem")).unwrap();
        prop_assert_eq!(&back, &data);
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        let s = data.stats();
        prop_assert!(s.action_min.iter().zip(&s.action_max).all(|(l, h)| l <= h));
        prop_assert!(s.proprio_min.iter().zip(&s.proprio_max).all(|(l, h)| l <= h));
    }
}
