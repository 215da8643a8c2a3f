use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tensor_defense::decomp::{
    cp_decompose_traced, decompose, decompose_traced, tt_decompose_traced, tucker_decompose, tucker_decompose_traced,
    DecompSettings, Method, TtCores,
};
use tensor_defense::tensor::{svd, DenseTensor, Matrix};

fn random(shape: Vec<usize>, seed: u64) -> DenseTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DenseTensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0)).unwrap()
}

fn outer(vs: &[Vec<f64>]) -> DenseTensor {
    let shape = vs.iter().map(Vec::len).collect();
    DenseTensor::from_fn(shape, |idx| idx.iter().zip(vs).map(|(&i, v)| v[i]).product()).unwrap()
}

fn shape_strategy() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(2usize..=5, 2..=4)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn iterative_errors_never_increase(shape in shape_strategy(), seed in any::<u64>(), rank in 1usize..4) {
        let t = random(shape, seed);
        let s = DecompSettings { max_iters: 30, tolerance: 1e-9, ..DecompSettings::new(Method::Cp, rank).with_seed(seed) };
        let (_, cp) = cp_decompose_traced(&t, &s).unwrap();
        prop_assert!(cp.errors.windows(2).all(|w| w[1] <= w[0] + 1e-10), "{:?}", cp.errors);
        let s = DecompSettings { method: Method::Tucker, ..s };
        let (_, tk) = tucker_decompose_traced(&t, &s).unwrap();
        prop_assert!(tk.errors.windows(2).all(|w| w[1] <= w[0] + 1e-10), "{:?}", tk.errors);
    }

    #[test]
    fn tucker_and_tt_error_falls_with_rank(shape in shape_strategy(), seed in any::<u64>(), r in 1usize..4, k in 1usize..3) {
        let t = random(shape, seed);
        for m in [Method::Tucker, Method::Tt] {
            let err = |rank| decompose_traced(&t, &DecompSettings::new(m, rank).with_seed(seed)).unwrap().1.final_error();
            prop_assert!(err(r + k) <= err(r) + 1e-9, "{m}");
        }
    }

    #[test]
    fn tt_recorded_truncation_matches_measured_error(shape in shape_strategy(), seed in any::<u64>(), rank in 1usize..5) {
        let t = random(shape, seed);
        let (_, tr) = tt_decompose_traced(&t, &DecompSettings::new(Method::Tt, rank)).unwrap();
        let recorded = tr.truncation_error.unwrap();
        let measured = tr.final_error();
        // Exact fits measure pure round-off, hence the floor tied to the input norm.
        let tol = 1e-6 * measured + 1e-12 * tr.input_norm;
        prop_assert!((recorded - measured).abs() <= tol, "{recorded} vs {measured}");
    }

    #[test]
    fn reconstruction_keeps_shape_and_seed_is_deterministic(shape in shape_strategy(), seed in any::<u64>(), rank in 1usize..4) {
        let t = random(shape, seed ^ 1);
        for m in Method::ALL {
            let s = DecompSettings { max_iters: 10, ..DecompSettings::new(m, rank).with_seed(seed) };
            let a = decompose(&t, &s).unwrap();
            let (ra, rb) = (a.reconstruct().unwrap(), decompose(&t, &s).unwrap().reconstruct().unwrap());
            prop_assert_eq!(ra.shape(), t.shape());
            prop_assert_eq!(ra.data(), rb.data());
            prop_assert_eq!(&a, &decompose(&t, &s).unwrap());
        }
    }

    #[test]
    fn full_rank_tucker_and_tt_are_lossless(shape in shape_strategy(), seed in any::<u64>()) {
        let t = random(shape, seed);
        let full = t.len();
        for m in [Method::Tucker, Method::Tt] {
            let r = decompose(&t, &DecompSettings::new(m, full)).unwrap().reconstruct().unwrap();
            prop_assert!(r.distance(&t).unwrap() <= 1e-8 * t.frobenius_norm());
        }
    }
}

#[test]
fn cp_recovers_exact_rank_one() {
    let t = outer(&[vec![1.0, -2.0, 0.5], vec![0.3, 0.7, -1.1, 2.0], vec![1.5, -0.5]]);
    let (f, tr) = cp_decompose_traced(&t, &DecompSettings::new(Method::Cp, 1).with_seed(11)).unwrap();
    assert!(tr.relative_error() <= 1e-6, "{}", tr.relative_error());
    assert!(f.reconstruct().unwrap().distance(&t).unwrap() <= 1e-6 * t.frobenius_norm());
}

#[test]
fn cp_zero_tensor_has_zero_weights() {
    let z = DenseTensor::zeros(vec![3, 4, 2]).unwrap();
    let f = decompose(&z, &DecompSettings::new(Method::Cp, 3)).unwrap();
    assert_eq!(f.reconstruct().unwrap(), z);
}

#[test]
fn cp_higher_rank_fits_random_cube_better() {
    for seed in 0..8 {
        let t = random(vec![4, 4, 4], seed);
        let err =
            |r| cp_decompose_traced(&t, &DecompSettings::new(Method::Cp, r).with_seed(seed)).unwrap().1.final_error();
        assert!(err(4) <= err(2) + 1e-9, "seed {seed}");
    }
}

/// Best rank-(1,1,1) fit by alternating power iteration from many random
/// starts: the residual squared is `|T|^2 - sigma^2` for the best `sigma`.
fn best_rank_one_residual_sq(t: &DenseTensor, starts: u64) -> f64 {
    let n = t.shape().to_vec();
    let contract = |u: &[Vec<f64>], skip: usize| -> Vec<f64> {
        let mut out = vec![0.0; n[skip]];
        for i in 0..n[0] {
            for j in 0..n[1] {
                for k in 0..n[2] {
                    let idx = [i, j, k];
                    let w: f64 = (0..3).filter(|&m| m != skip).map(|m| u[m][idx[m]]).product();
                    out[idx[skip]] += w * t.get(&idx);
                }
            }
        }
        out
    };
    let mut best: f64 = 0.0;
    for s in 0..starts {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let mut u: Vec<Vec<f64>> = n.iter().map(|&e| (0..e).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let mut sigma = 0.0;
        for _ in 0..200 {
            for m in 0..3 {
                let v = contract(&u, m);
                sigma = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                u[m] = v.iter().map(|x| x / sigma.max(1e-300)).collect();
            }
        }
        best = best.max(sigma);
    }
    t.frobenius_norm().powi(2) - best * best
}

#[test]
fn tucker_rank_one_of_superdiagonal_matches_search() {
    let mut t = DenseTensor::zeros(vec![3, 3, 3]).unwrap();
    for (i, v) in [5.0, 2.0, 1.0].into_iter().enumerate() {
        t.set(&[i, i, i], v);
    }
    let f = tucker_decompose(&t, &DecompSettings::new(Method::Tucker, 1)).unwrap();
    assert!((f.core.data()[0].abs() - 5.0).abs() < 0.05 * 5.0);
    let err_sq = f.reconstruct().unwrap().distance(&t).unwrap().powi(2);
    let oracle = best_rank_one_residual_sq(&t, 25);
    assert!((oracle - 5.0).abs() < 1e-6, "oracle {oracle}");
    assert!((err_sq - oracle).abs() <= 0.05 * oracle, "{err_sq} vs {oracle}");
}

#[test]
fn tucker_factors_are_orthonormal() {
    let t = random(vec![6, 5, 4], 2);
    let f = tucker_decompose(&t, &DecompSettings::new(Method::Tucker, 3)).unwrap();
    assert_eq!(f.ranks(), vec![3, 3, 3]);
    assert!(f.factors.iter().all(|u| u.orthonormality_defect() <= 1e-8));
}

#[test]
fn tt_on_a_matrix_is_truncated_svd() {
    let t = random(vec![7, 5], 4);
    let m = Matrix::new(7, 5, t.data().to_vec()).unwrap();
    let s = svd(&m).unwrap().s;
    for r in 1..=5 {
        let (_, tr) = tt_decompose_traced(&t, &DecompSettings::new(Method::Tt, r)).unwrap();
        let expect = s[r..].iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((tr.final_error() - expect).abs() <= 1e-8, "rank {r}");
    }
}

#[test]
fn tt_cube_cap_one_matches_hand_chain() {
    let t = DenseTensor::new(vec![2, 2, 2], (0..8).map(f64::from).collect()).unwrap();
    // First step: rank-1 truncation of the 2x4 reshape.
    let a = svd(&Matrix::new(2, 4, t.data().to_vec()).unwrap()).unwrap();
    let carry: Vec<f64> = (0..4).map(|j| a.s[0] * a.v.get(j, 0)).collect();
    // Second step: rank-1 truncation of the carried 2x2 block.
    let b = svd(&Matrix::new(2, 2, carry).unwrap()).unwrap();
    let approx = outer(&[
        (0..2).map(|i| a.u.get(i, 0)).collect(),
        (0..2).map(|i| b.u.get(i, 0) * b.s[0]).collect(),
        (0..2).map(|i| b.v.get(i, 0)).collect(),
    ]);
    let oracle = approx.distance(&t).unwrap();
    let (_, tr) = tt_decompose_traced(&t, &DecompSettings::new(Method::Tt, 1)).unwrap();
    assert!((tr.final_error() - oracle).abs() <= 1e-10, "{} vs {oracle}", tr.final_error());
}

#[test]
fn rank_one_tt_cores_rebuild_the_outer_product() {
    let vs = vec![vec![1.0, 2.0], vec![-1.0, 0.5, 3.0], vec![2.0, -2.0], vec![0.25, 4.0]];
    let cores = vs.iter().map(|v| DenseTensor::new(vec![1, v.len(), 1], v.clone()).unwrap()).collect();
    let tt = TtCores::new(cores).unwrap();
    assert_eq!(tt.reconstruct().unwrap(), outer(&vs));
}
