use canica::dataio::{decode_matrix, encode_matrix, standardize};
use canica::linalg::orthonormalize_rows;
use canica::metrics::{cross_correlation, greedy_match, subspace_energy, MatchReport};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn gaussian(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
}

/// Rows centered, mutually uncorrelated and of unit variance.
fn decorrelated_maps(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
    let mut m = gaussian(rows, cols, seed);
    for mut r in m.row_iter_mut() {
        let mean = r.mean();
        r.add_scalar_mut(-mean);
    }
    orthonormalize_rows(&mut m, &[]);
    m * (cols as f64).sqrt()
}

fn random_rotation(k: usize, seed: u64) -> DMatrix<f64> {
    let mut q = gaussian(k, k, seed);
    orthonormalize_rows(&mut q, &[]);
    q
}

fn finite_matrix() -> impl Strategy<Value = DMatrix<f64>> {
    (1usize..6, 1usize..6).prop_flat_map(|(r, c)| {
        prop::collection::vec(prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO, r * c)
            .prop_map(move |v| DMatrix::from_row_slice(r, c, &v))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn encoding_round_trip_is_bitwise(m in finite_matrix()) {
        let back = decode_matrix(&encode_matrix(&m)).unwrap();
        prop_assert_eq!(back.shape(), m.shape());
        for (a, b) in back.iter().zip(m.iter()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn standardize_is_idempotent(rows in 2usize..20, cols in 1usize..12, seed in any::<u64>(), scale in 1e-3f64..1e3) {
        let x = gaussian(rows, cols, seed) * scale;
        let once = standardize(&x).unwrap();
        let twice = standardize(&once.data).unwrap();
        prop_assert!((&once.data - &twice.data).amax() < 1e-10);
        for c in once.data.column_iter() {
            let mean = c.mean();
            let var = c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / rows as f64;
            prop_assert!(mean.abs() < 1e-10);
            prop_assert!((var - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn energy_ignores_rotations_of_uncorrelated_maps(k in 1usize..6, seed in any::<u64>()) {
        let a = gaussian(k + 1, 300, seed);
        let b = decorrelated_maps(k, 300, seed ^ 1);
        let e = subspace_energy(&cross_correlation(&a, &b).unwrap()).unwrap();
        let rb = random_rotation(k, seed ^ 2) * &b;
        let e_rot = subspace_energy(&cross_correlation(&a, &rb).unwrap()).unwrap();
        prop_assert!((e - e_rot).abs() < 1e-8, "{} vs {}", e, e_rot);
    }

    #[test]
    fn matching_ignores_order_and_sign(k in 1usize..7, seed in any::<u64>()) {
        let a = gaussian(k, 200, seed);
        let b = &a + gaussian(k, 200, seed ^ 7) * 0.5;
        let base = MatchReport::compare(&a, &b).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..k).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        let mut shuffled = b.select_rows(&order);
        for (i, mut row) in shuffled.row_iter_mut().enumerate() {
            if (seed >> i) & 1 == 1 {
                row.neg_mut();
            }
        }
        let moved = MatchReport::compare(&a, &shuffled).unwrap();
        prop_assert!((base.t - moved.t).abs() < 1e-12);
        prop_assert!((base.e - moved.e).abs() < 1e-12);
    }
}

#[test]
fn greedy_counter_example() {
    let c = DMatrix::from_row_slice(2, 2, &[0.9, 0.8, 0.8, 0.1]);
    let (reordered, perm, t) = greedy_match(&c).unwrap();
    assert_eq!(t, 0.5);
    assert_eq!(perm, vec![(0, 0), (1, 1)]);
    assert_eq!(reordered[(1, 1)], 0.1);
}
