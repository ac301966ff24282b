use facegaze_core::regress::{
    alr_solve, knn_predict, l1_min_within_ball, select_sparse_indices, GazeDirection, TrainingSet,
};
use facegaze_core::render::{EyeFeature, FEATURE_LEN};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Exhaustive minimum-l1 solution inside the residual ball: for every support
/// and sign pattern, the KKT point `w = w_ls - sqrt(eps^2 - r0^2) G^-1 s / sqrt(s' G^-1 s)`
/// is a candidate when its signs agree with `s`.
fn brute_force_l1(f: &DMatrix<f64>, x: &DVector<f64>, eps: f64) -> f64 {
    if x.norm() <= eps {
        return 0.0;
    }
    let n = f.ncols();
    let mut best = f64::INFINITY;
    for mask in 1u32..(1 << n) {
        let support: Vec<usize> = (0..n).filter(|j| mask & (1 << j) != 0).collect();
        let fs = f.select_columns(support.iter());
        let Some(chol) = fs.tr_mul(&fs).cholesky() else { continue };
        let w_ls = chol.solve(&fs.tr_mul(x));
        let r0 = (x - &fs * &w_ls).norm();
        if r0 > eps {
            continue;
        }
        for signs in 0u32..(1 << support.len()) {
            let s = DVector::from_iterator(
                support.len(),
                (0..support.len()).map(|i| if signs & (1 << i) != 0 { 1.0 } else { -1.0 }),
            );
            let gs = chol.solve(&s);
            let q = s.dot(&gs);
            if q <= 0.0 {
                continue;
            }
            let w = &w_ls - gs * ((eps * eps - r0 * r0).sqrt() / q.sqrt());
            if w.iter().zip(s.iter()).all(|(wi, si)| wi * si > 0.0) {
                best = best.min(w.abs().sum());
            }
        }
    }
    best
}

fn random_problem(rng: &mut ChaCha8Rng, n: usize) -> (DMatrix<f64>, DVector<f64>, f64) {
    let f = DMatrix::from_fn(FEATURE_LEN, n, |_, _| rng.random_range(0.0..1.0));
    let w = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
    let noise = DVector::from_fn(FEATURE_LEN, |_, _| rng.random_range(-0.05..0.05));
    let x = &f * w + noise;
    let fs = &f;
    let ls = fs.clone().svd(true, true).solve(&x, 1e-12).unwrap();
    let floor = (&x - fs * ls).norm();
    let eps = floor + rng.random_range(0.0..1.0) * (x.norm() - floor);
    (f, x, eps)
}

#[test]
fn homotopy_matches_exhaustive_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for trial in 0..200 {
        let n = 1 + trial % 6;
        let (f, x, eps) = random_problem(&mut rng, n);
        let w = l1_min_within_ball(&f, &x, eps).unwrap();
        let w = DVector::from_vec(w);
        let residual = (&x - &f * &w).norm();
        assert!(residual <= eps + 1e-8, "trial {trial}: residual {residual} > {eps}");
        let oracle = brute_force_l1(&f, &x, eps);
        let got = w.abs().sum();
        assert!((got - oracle).abs() <= 1e-7 * oracle.max(1.0), "trial {trial}: {got} vs {oracle}");
    }
}

#[test]
fn zero_weights_when_query_is_inside_the_ball() {
    let f = DMatrix::from_element(FEATURE_LEN, 3, 1.0);
    let x = DVector::from_element(FEATURE_LEN, 0.01);
    assert_eq!(l1_min_within_ball(&f, &x, 1.0).unwrap(), vec![0.0; 3]);
}

#[test]
fn infeasible_ball_is_reported() {
    let f = DMatrix::from_fn(FEATURE_LEN, 1, |r, _| if r == 0 { 1.0 } else { 0.0 });
    let x = DVector::from_fn(FEATURE_LEN, |r, _| if r == 1 { 1.0 } else { 0.0 });
    assert!(l1_min_within_ball(&f, &x, 0.5).is_err());
    assert!(l1_min_within_ball(&f, &x, -1.0).is_err());
}

fn feature(rng: &mut ChaCha8Rng) -> EyeFeature {
    let mut v = [0.0; FEATURE_LEN];
    v.iter_mut().for_each(|e| *e = rng.random_range(0.0..1.0));
    EyeFeature(v)
}

#[test]
fn alr_reproduces_a_training_sample() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let feats: Vec<EyeFeature> = (0..8).map(|_| feature(&mut rng)).collect();
    let targets: Vec<GazeDirection> =
        (0..8).map(|i| GazeDirection::from_yaw_pitch(0.05 * i as f64, -0.02 * i as f64)).collect();
    let train = TrainingSet::new(feats.clone(), targets.clone(), None).unwrap();
    let sol = alr_solve(&train, &feats[4], 1e-9).unwrap();
    assert!((sol.gaze.vector() - targets[4].vector()).norm() < 1e-6);
    let knn = knn_predict(&train, &feats[4], 1).unwrap();
    assert!((knn.vector() - targets[4].vector()).norm() < 1e-12);
}

#[test]
fn sparse_selection_picks_one_frame_per_cell() {
    let points: Vec<[f64; 2]> =
        (0..100).map(|i| [(i % 10) as f64 / 10.0 + 0.05, (i / 10) as f64 / 10.0 + 0.05]).collect();
    let idx = select_sparse_indices(&points, 5).unwrap();
    assert_eq!(idx.len(), 25);
    let mut sorted = idx.clone();
    sorted.dedup();
    assert_eq!(sorted.len(), idx.len());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn homotopy_is_feasible_and_optimal(seed in 0u64..10_000, n in 1usize..=6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (f, x, eps) = random_problem(&mut rng, n);
        let w = DVector::from_vec(l1_min_within_ball(&f, &x, eps).unwrap());
        prop_assert!((&x - &f * &w).norm() <= eps + 1e-8);
        let oracle = brute_force_l1(&f, &x, eps);
        prop_assert!((w.abs().sum() - oracle).abs() <= 1e-7 * oracle.max(1.0));
    }

    #[test]
    fn knn_output_is_unit(seed in 0u64..10_000, k in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let feats: Vec<EyeFeature> = (0..6).map(|_| feature(&mut rng)).collect();
        let targets: Vec<GazeDirection> = (0..6)
            .map(|_| GazeDirection::from_yaw_pitch(rng.random_range(-0.4..0.4), rng.random_range(-0.3..0.3)))
            .collect();
        let train = TrainingSet::new(feats, targets, None).unwrap();
        let q = feature(&mut rng);
        let g = knn_predict(&train, &q, k).unwrap();
        prop_assert!((g.vector().norm() - 1.0).abs() < 1e-12);
    }
}
