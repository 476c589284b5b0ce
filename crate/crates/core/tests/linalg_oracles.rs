use ewod_core::adapters::project_rank;
use ewod_core::linalg::{hungarian_assign, truncated_svd};
use ewod_core::rng::SeedStream;
use ewod_core::Matrix;
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn gaussian(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    Matrix::new(r, c, (0..r * c).map(|_| StandardNormal.sample(rng)).collect()).unwrap()
}

fn fro(a: &Matrix, b: &Matrix) -> f64 {
    a.sub(b).unwrap().frobenius_norm()
}

#[test]
fn eckart_young_against_random_candidates() {
    let mut rng = SeedStream::new(2024).rng("eckart-young");
    for case in 0..100 {
        let m = gaussian(&mut rng, 16, 16);
        let best = truncated_svd(&m, 4).unwrap().reconstruct();
        assert!(best.numerical_rank() <= 4);
        let err = fro(&m, &best);
        for _ in 0..1000 {
            let cand = gaussian(&mut rng, 16, 4).matmul(&gaussian(&mut rng, 4, 16)).unwrap();
            // scale each candidate to its least-squares optimum along its own direction
            let num: f64 = m.data().iter().zip(cand.data()).map(|(a, b)| a * b).sum();
            let den: f64 = cand.data().iter().map(|x| x * x).sum();
            let cand = cand.scale(num / den);
            assert!(err <= fro(&m, &cand) + 1e-12, "case {case}");
        }
    }
}

#[test]
fn eckart_young_against_perturbed_optimum() {
    let mut rng = SeedStream::new(7).rng("perturbed");
    for _ in 0..100 {
        let m = gaussian(&mut rng, 16, 16);
        let svd = truncated_svd(&m, 4).unwrap();
        let err = fro(&m, &svd.reconstruct());
        for _ in 0..50 {
            let u = svd.u.add(&gaussian(&mut rng, 16, 4).scale(1e-3)).unwrap();
            let vt = svd.vt.add(&gaussian(&mut rng, 4, 16).scale(1e-3)).unwrap();
            let us = u.matmul(&Matrix::from_diag(&svd.sigma)).unwrap();
            assert!(err <= fro(&m, &us.matmul(&vt).unwrap()) + 1e-12);
        }
    }
}

#[test]
fn low_rank_inputs_reconstruct_exactly() {
    let mut rng = SeedStream::new(99).rng("low-rank");
    for k in 0..100 {
        let r = 1 + k % 4;
        let m = gaussian(&mut rng, 16, r).matmul(&gaussian(&mut rng, r, 16)).unwrap();
        assert!(fro(&m, &truncated_svd(&m, 4).unwrap().reconstruct()) < 1e-10);
        assert!(fro(&m, &project_rank(&m, 4, "w").unwrap().delta()) < 1e-10);
    }
}

fn brute_force(cost: &Matrix) -> f64 {
    fn go(cost: &Matrix, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if row == cost.rows() {
            *best = best.min(acc);
            return;
        }
        for c in 0..cost.cols() {
            if !used[c] {
                used[c] = true;
                go(cost, row + 1, used, acc + cost[(row, c)], best);
                used[c] = false;
            }
        }
    }
    let t = if cost.rows() <= cost.cols() { cost.clone() } else { cost.transpose() };
    let mut best = f64::INFINITY;
    go(&t, 0, &mut vec![false; t.cols()], 0.0, &mut best);
    best
}

#[test]
fn hungarian_matches_brute_force() {
    let mut rng = SeedStream::new(31).rng("hungarian");
    for case in 0..500 {
        let r = rng.random_range(1..=7);
        let c = rng.random_range(1..=7);
        let integer = case % 3 == 0;
        let cost = Matrix::new(
            r,
            c,
            (0..r * c)
                .map(|_| if integer { rng.random_range(0..5) as f64 } else { rng.random_range(-10.0..10.0) })
                .collect(),
        )
        .unwrap();
        let a = hungarian_assign(&cost).unwrap();
        assert_eq!(a.pairs.len(), r.min(c));
        let mut rows: Vec<usize> = a.pairs.iter().map(|p| p.0).collect();
        let mut cols: Vec<usize> = a.pairs.iter().map(|p| p.1).collect();
        rows.dedup();
        cols.sort();
        cols.dedup();
        assert_eq!((rows.len(), cols.len()), (r.min(c), r.min(c)));
        let total: f64 = a.pairs.iter().map(|&(i, j)| cost[(i, j)]).sum();
        assert!((total - a.total_cost).abs() < 1e-9);
        assert!((total - brute_force(&cost)).abs() < 1e-9, "case {case}: {total} vs {}", brute_force(&cost));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn svd_factors_are_orthonormal(seed in any::<u64>(), rows in 2usize..9, cols in 2usize..9, r in 1usize..4) {
        let mut rng = SeedStream::new(seed).rng("svd");
        let m = gaussian(&mut rng, rows, cols);
        let r = r.min(rows.min(cols));
        let s = truncated_svd(&m, r).unwrap();
        prop_assert!(s.sigma.windows(2).all(|w| w[0] >= w[1]));
        let utu = s.u.transpose().matmul(&s.u).unwrap();
        let vvt = s.vt.matmul(&s.vt.transpose()).unwrap();
        prop_assert!(utu.sub(&Matrix::identity(r)).unwrap().max_abs() < 1e-9);
        prop_assert!(vvt.sub(&Matrix::identity(r)).unwrap().max_abs() < 1e-9);
    }

    #[test]
    fn hungarian_cost_is_shift_invariant(seed in any::<u64>(), n in 1usize..6, shift in -5.0f64..5.0) {
        let mut rng = SeedStream::new(seed).rng("shift");
        let cost = gaussian(&mut rng, n, n);
        let a = hungarian_assign(&cost).unwrap();
        let b = hungarian_assign(&cost.map(|x| x + shift)).unwrap();
        prop_assert!((b.total_cost - a.total_cost - shift * n as f64).abs() < 1e-9);
    }
}
