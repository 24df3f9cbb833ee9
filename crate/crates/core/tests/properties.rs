use aia_core::aia::{huber_penalty, huber_slope};
use aia_core::intensity::{aggregate_profiles, layer_intensity, profile_std_scalar, IntensityProfile, ModalityRoles};
use aia_core::model::{AttentionRecord, Modality, Task};
use aia_core::numerics::{deterministic_sum, Tensor};
use proptest::prelude::*;

// Random row-stochastic attention of shape (L, H, T, T) with random labels.
fn record_strategy() -> impl Strategy<Value = (AttentionRecord, Task)> {
    (1usize..=4, 1usize..=4, 2usize..=12, any::<u64>(), any::<bool>()).prop_map(|(l, h, t, seed, gen)| {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut labels: Vec<Modality> =
            (0..t).map(|_| if rng.random_bool(0.5) { Modality::Text } else { Modality::Image }).collect();
        // guarantee both roles exist for either task
        labels[0] = if gen { Modality::Text } else { Modality::Image };
        labels[t - 2] = Modality::Image;
        labels[t - 1] = if gen { Modality::Image } else { Modality::Text };
        if gen {
            labels[0] = Modality::Text;
        }
        let probs = (0..l)
            .map(|_| {
                (0..h)
                    .map(|_| {
                        let mut data = vec![0.0; t * t];
                        for q in 0..t {
                            let row: Vec<f64> = (0..=q).map(|_| rng.random_range(0.0..1.0f64) + 1e-3).collect();
                            let s: f64 = row.iter().sum();
                            for (k, v) in row.iter().enumerate() {
                                data[q * t + k] = v / s;
                            }
                        }
                        Tensor::new(vec![t, t], data).unwrap()
                    })
                    .collect()
            })
            .collect();
        let task = if gen { Task::Generation } else { Task::Understanding };
        (AttentionRecord::new(probs, labels).unwrap(), task)
    })
}

fn brute_force(rec: &AttentionRecord, roles: &ModalityRoles) -> Vec<f64> {
    let (_, h, t, _) = rec.dims();
    let q_count = roles.query_mask.iter().filter(|&&b| b).count() as f64;
    rec.probs
        .iter()
        .map(|layer| {
            let mut total = 0.0;
            for m in layer {
                for q in 0..t {
                    for k in 0..t {
                        if roles.query_mask[q] && roles.key_mask[k] {
                            total += m.at(q, k);
                        }
                    }
                }
            }
            total / (h as f64 * q_count)
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn intensity_matches_brute_force((rec, task) in record_strategy()) {
        let roles = ModalityRoles::from_labels(task, &rec.modality).unwrap();
        let got = layer_intensity(&rec, &roles).unwrap();
        for (a, b) in got.values.iter().zip(brute_force(&rec, &roles)) {
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((-1e-12..=1.0 + 1e-12).contains(a));
        }
    }

    #[test]
    fn aggregation_ignores_sample_order(values in prop::collection::vec(prop::collection::vec(0.0..1.0f64, 3), 2..20), rot in 0usize..20) {
        let profiles: Vec<IntensityProfile> = values
            .iter()
            .map(|v| IntensityProfile { task: Task::Generation, values: v.clone(), samples: 1 })
            .collect();
        let mut rotated = profiles.clone();
        rotated.rotate_left(rot % profiles.len());
        let a = aggregate_profiles(&profiles).unwrap();
        let b = aggregate_profiles(&rotated).unwrap();
        for l in 0..3 {
            prop_assert!((a.mean.values[l] - b.mean.values[l]).abs() < 1e-12);
            prop_assert!((a.std[l] - b.std[l]).abs() < 1e-12);
        }
        prop_assert!(profile_std_scalar(&profiles).unwrap() >= 0.0);
    }

    // Splitting the key set splits the intensity.
    #[test]
    fn intensity_is_additive_over_keys((rec, task) in record_strategy(), cut in 0usize..12) {
        let roles = ModalityRoles::from_labels(task, &rec.modality).unwrap();
        let whole = layer_intensity(&rec, &roles).unwrap();
        let part = |keep: &dyn Fn(usize) -> bool| {
            let key_mask = roles.key_mask.iter().enumerate().map(|(k, &b)| b && keep(k)).collect();
            let r = ModalityRoles { key_mask, ..roles.clone() };
            brute_force(&rec, &r)
        };
        let lo = part(&|k| k < cut);
        let hi = part(&|k| k >= cut);
        for l in 0..whole.depth() {
            prop_assert!((whole.values[l] - lo[l] - hi[l]).abs() < 1e-12);
        }
    }

    // Each side is extended to the knot with its own first-order Taylor step.
    #[test]
    fn huber_is_continuous_with_matching_slope_at_the_knot(t in 0.0..1.0f64, delta in 1e-3..0.5f64, side in prop::bool::ANY) {
        let dir = if side { 1.0 } else { -1.0 };
        let knot = t + dir * delta;
        let eps = 1e-7;
        let (i_in, i_out) = (knot - dir * eps, knot + dir * eps);
        let s_in = huber_slope(i_in, t, delta).unwrap();
        let s_out = huber_slope(i_out, t, delta).unwrap();
        let from_in = huber_penalty(i_in, t, delta).unwrap() + s_in * (knot - i_in);
        let from_out = huber_penalty(i_out, t, delta).unwrap() + s_out * (knot - i_out);
        prop_assert!((from_in - from_out).abs() < 1e-12);
        prop_assert!((s_in - s_out).abs() < 1e-6);
    }

    #[test]
    fn huber_is_nonnegative_and_symmetric(i in -1.0..2.0f64, t in 0.0..1.0f64, delta in 1e-3..0.5f64) {
        let p = huber_penalty(i, t, delta).unwrap();
        prop_assert!(p >= 0.0);
        prop_assert!((p - huber_penalty(2.0 * t - i, t, delta).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn deterministic_sum_is_reproducible(xs in prop::collection::vec(-1e6..1e6f64, 0..200)) {
        prop_assert_eq!(deterministic_sum(xs.iter().copied()).to_bits(), deterministic_sum(xs).to_bits());
    }
}
