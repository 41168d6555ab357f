use micl_core::likelihood::{log_p_partition, Kernel};
use micl_core::rng::stream;
use micl_core::search::{run_single_start, SearchConfig};
use micl_core::simulation::{adjusted_rand_index, gen_misspecified, gen_scenario, gen_well_specified, DesignKind, ScenarioSpec};
use micl_core::{log_integrated_complete, DataMatrix, Hyperparams, ModelSpec, Partition};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn matrix(n: usize, d: usize, seed: u64) -> DataMatrix {
    let mut rng = stream(seed, &[]);
    let values = (0..n * d).map(|_| rng.random_range(-3.0..3.0)).collect();
    DataMatrix::new(values, n, d, None).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn criterion_is_invariant_to_class_relabeling(seed in 0u64..10_000, g in 1usize..4, mask in 0u8..8) {
        let x = matrix(12, 3, seed);
        let hp = Hyperparams::default_for(&x);
        let mut rng = stream(seed, &[1]);
        let labels: Vec<usize> = (0..12).map(|_| rng.random_range(0..g)).collect();
        let mut perm: Vec<usize> = (0..g).collect();
        perm.shuffle(&mut rng);
        let permuted: Vec<usize> = labels.iter().map(|&k| perm[k]).collect();
        let m = ModelSpec::new(g, (0..3).map(|j| mask >> j & 1 == 1).collect()).unwrap();
        let a = log_integrated_complete(&x, &Partition::from_labels(labels, g).unwrap(), &m, &hp).unwrap();
        let b = log_integrated_complete(&x, &Partition::from_labels(permuted, g).unwrap(), &m, &hp).unwrap();
        prop_assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn incremental_value_tracks_scratch(seed in 0u64..10_000, mask in 0u8..16) {
        let x = matrix(30, 4, seed);
        let hp = Hyperparams::default_for(&x);
        let kernel = Kernel::new(&x, &hp).unwrap();
        let omega: Vec<bool> = (0..4).map(|j| mask >> j & 1 == 1).collect();
        let m = ModelSpec::new(3, omega.clone()).unwrap();
        let mut rng = stream(seed, &[2]);
        let mut state = kernel.state(Partition::from_labels((0..30).map(|_| rng.random_range(0..3)).collect(), 3).unwrap());
        let mut value = state.value(&kernel, &omega);
        for _ in 0..200 {
            let i = rng.random_range(0..30);
            let to = rng.random_range(0..3);
            value += state.delta_move(&kernel, &omega, i, to);
            state.apply_move(&kernel, i, to);
        }
        let scratch = log_integrated_complete(&x, state.partition(), &m, &hp).unwrap();
        prop_assert!((value - scratch).abs() < 1e-8);
    }

    #[test]
    fn ari_is_symmetric_and_label_invariant(seed in 0u64..10_000, n in 2usize..40) {
        let mut rng = stream(seed, &[3]);
        let a: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
        let b: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let mut perm: Vec<usize> = (0..4).collect();
        perm.shuffle(&mut rng);
        let relabeled: Vec<usize> = a.iter().map(|&k| perm[k] + 10).collect();
        let ab = adjusted_rand_index(&a, &b).unwrap();
        prop_assert!((ab - adjusted_rand_index(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!((ab - adjusted_rand_index(&relabeled, &b).unwrap()).abs() < 1e-12);
        prop_assert!((adjusted_rand_index(&a, &relabeled).unwrap() - 1.0).abs() < 1e-12);
        prop_assert!(ab <= 1.0 + 1e-12);
    }

    #[test]
    fn generators_are_deterministic(seed in 0u64..10_000, eps in 0.0f64..3.0) {
        let spec = ScenarioSpec { n: 20, r: 3, d: 6, epsilon: eps, g_true: 3, design: DesignKind::ThreeComponent };
        prop_assert_eq!(gen_scenario(&spec, &mut stream(seed, &[])).unwrap(), gen_scenario(&spec, &mut stream(seed, &[])).unwrap());
        prop_assert_eq!(gen_well_specified(10, eps, &mut stream(seed, &[])).unwrap(), gen_well_specified(10, eps, &mut stream(seed, &[])).unwrap());
    }
}

#[test]
fn partition_prior_sums_to_one_for_small_cases() {
    for g in 1..=3usize {
        for n in 1..=6usize {
            let total: f64 = (0..g.pow(n as u32))
                .map(|mut code| {
                    let mut counts = vec![0; g];
                    for _ in 0..n {
                        counts[code % g] += 1;
                        code /= g;
                    }
                    log_p_partition(&counts).exp()
                })
                .sum();
            assert!((total - 1.0).abs() < 1e-10, "n={n} g={g} total={total}");
        }
    }
}

#[test]
fn every_start_ends_at_a_fixed_point() {
    for seed in 0..5 {
        let x = matrix(25, 3, 100 + seed);
        let hp = Hyperparams::default_for(&x);
        let kernel = Kernel::new(&x, &hp).unwrap();
        let config = SearchConfig { seed, ..SearchConfig::default() };
        for start in 0..3 {
            let out = run_single_start(&kernel, &x, &hp, 3, &config, start, None);
            let m = ModelSpec::new(3, out.omega.clone()).unwrap();
            let base = log_integrated_complete(&x, &out.partition, &m, &hp).unwrap();
            for i in 0..25 {
                for k in 0..3 {
                    let mut z = out.partition.clone();
                    z.reassign(i, k);
                    assert!(log_integrated_complete(&x, &z, &m, &hp).unwrap() <= base + 1e-9);
                }
            }
            for j in 0..3 {
                let mut flipped = m.clone();
                flipped.omega[j] = !flipped.omega[j];
                assert!(log_integrated_complete(&x, &out.partition, &flipped, &hp).unwrap() <= base + 1e-9);
            }
            assert!(out.trace.windows(2).all(|w| w[1] >= w[0] - 1e-10));
        }
    }
}

fn class_mean(x: &DataMatrix, labels: &[usize], k: usize, j: usize) -> (f64, f64) {
    let vals: Vec<f64> = labels.iter().enumerate().filter(|(_, &l)| l == k).map(|(i, _)| x.get(i, j)).collect();
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
    (mean, var)
}

#[test]
fn large_sample_generator_laws() {
    let n = 100_000;
    let (x, labels) = gen_well_specified(n, 1.26, &mut stream(11, &[])).unwrap();
    let (m0, _) = class_mean(&x, &labels, 0, 0);
    assert!((m0 - 1.26).abs() < 0.02);
    let ybar = labels.iter().sum::<usize>() as f64 / n as f64;
    let col = x.column(2);
    let cbar = x.column_means()[2];
    let cov: f64 = col.iter().zip(&labels).map(|(c, &l)| (c - cbar) * (l as f64 - ybar)).sum::<f64>() / n as f64;
    let corr = cov / (x.column_variance(2) * ybar * (1.0 - ybar)).sqrt();
    assert!(corr.abs() < 0.02);

    let (x, labels) = gen_misspecified(n, 1.05, &mut stream(12, &[])).unwrap();
    let (_, v) = class_mean(&x, &labels, 0, 0);
    assert!((v - 1.0 / 3.0).abs() < 0.01);

    let spec = ScenarioSpec { n: 30_000, r: 5, d: 5, epsilon: 1.7, g_true: 3, design: DesignKind::ThreeComponent };
    let (x, labels) = gen_scenario(&spec, &mut stream(13, &[])).unwrap();
    assert_eq!(x.d(), 5);
    for j in 0..5 {
        assert!(class_mean(&x, &labels, 2, j).0.abs() < 0.05);
    }
}
