mod common;

use common::*;
use mqcl::losses::{self, bayesian_loss, contra1, contra2, contrastive, contrastive_term, Reduction};
use mqcl::model::{DensityMap, ProjVector};
use mqcl::multiqueue::{KeyMemory, MultiQueue};
use proptest::prelude::*;
use rand::Rng;

#[test]
fn direct_evaluation_of_separated_pair() {
    // -log(e^20 / (e^20 + e^-20)) = log(1 + e^-40)
    let expected = (1.0 + (-40f64).exp()).ln();
    assert!(expected < 1e-15);
    let q = vec![1.0, 0.0];
    let keys = [vec![1.0, 0.0], vec![-1.0, 0.0]];
    let rows: Vec<&[f64]> = keys.iter().map(Vec::as_slice).collect();
    let l = contrastive(&[&q], &rows, &[vec![0]], 0.05, Reduction::Mean).unwrap();
    assert!((l.loss - expected).abs() < 1e-18);
}

#[test]
fn equal_similarities_give_ln_n_for_any_positive_count() {
    for n in [2usize, 4, 8] {
        // Orthogonal anchor: every logit is zero.
        let mut mq = MultiQueue::new(2, n, n + 1).unwrap();
        for i in 0..n {
            let mut k = vec![0.0; n + 1];
            k[i] = 1.0;
            mq.push(ProjVector::new(k, (i % 3) as u64, i % 2)).unwrap();
        }
        let mut q = vec![0.0; n + 1];
        q[n] = 1.0;
        for image in 0..3u64.min(n as u64) {
            let anchor = ProjVector::new(q.clone(), image, 0);
            let l = contra1(&[anchor], &mq, 0.05, Reduction::Mean).unwrap();
            let brute = naive_contrastive(&[q.clone()], &mq.all().iter().map(|k| k.vector.clone()).collect::<Vec<_>>(), &[mq.all().iter().enumerate().filter(|(_, k)| k.image_index == image).map(|(i, _)| i).collect()], 0.05);
            assert!((l.loss - (n as f64).ln()).abs() < 1e-12);
            assert!((brute - (n as f64).ln()).abs() < 1e-12);
        }
        let l = contra2(&[q.clone()], &mq, 0, 0.05, Reduction::Mean).unwrap();
        assert!((l.loss - (n as f64).ln()).abs() < 1e-12);
    }
}

#[test]
fn two_bump_density_matches_counts() {
    let (h, w) = (32, 32);
    let points = [[8.5, 9.5], [23.5, 22.5]];
    let bump_sigma = 1.0;
    let mut density = vec![0.0; h * w];
    for p in &points {
        let mut bump = vec![0.0; h * w];
        for i in 0..h {
            for j in 0..w {
                let d2 = (j as f64 + 0.5 - p[0]).powi(2) + (i as f64 + 0.5 - p[1]).powi(2);
                bump[i * w + j] = (-d2 / (2.0 * bump_sigma * bump_sigma)).exp();
            }
        }
        let mass: f64 = bump.iter().sum();
        for (d, b) in density.iter_mut().zip(bump) {
            *d += b / mass;
        }
    }
    let oracle = naive_bayesian(h, w, &density, &points, 2.0);
    assert!(oracle < 0.05, "oracle {oracle}");
    let map = DensityMap::from_vec(h, w, density).unwrap();
    let (loss, _) = bayesian_loss(&map, &points, 2.0).unwrap();
    assert!((loss - oracle).abs() < 1e-12, "{loss} vs {oracle}");
}

#[test]
fn bayesian_matches_naive_on_random_maps() {
    let mut r = rng(11);
    for _ in 0..30 {
        let (h, w) = (r.random_range(2..12), r.random_range(2..12));
        let density: Vec<f64> = (0..h * w).map(|_| r.random_range(0.0..0.3)).collect();
        let n = r.random_range(0..6);
        let points: Vec<[f64; 2]> = (0..n).map(|_| [r.random_range(0.0..w as f64), r.random_range(0.0..h as f64)]).collect();
        let sigma = r.random_range(0.5..3.0);
        let oracle = naive_bayesian(h, w, &density, &points, sigma);
        let (loss, _) = bayesian_loss(&DensityMap::from_vec(h, w, density).unwrap(), &points, sigma).unwrap();
        assert!((loss - oracle).abs() <= 1e-9 * oracle.max(1.0));
    }
}

#[test]
fn gradients_match_finite_differences() {
    let mut r = rng(5);
    for case in 0..10 {
        let dim = r.random_range(2..8);
        let keys: Vec<Vec<f64>> = (0..r.random_range(2..12)).map(|_| random_unit(&mut r, dim)).collect();
        let rows: Vec<&[f64]> = keys.iter().map(Vec::as_slice).collect();
        let q = random_unit(&mut r, dim);
        let pos = vec![vec![0, keys.len() - 1]];
        let l = contrastive(&[&q], &rows, &pos, 0.1, Reduction::Mean).unwrap();
        let fd = finite_diff(&q, 1e-5, |x| contrastive(&[x], &rows, &pos, 0.1, Reduction::Mean).unwrap().loss);
        assert!(rel_error(&l.grad[0], &fd) < 1e-4, "case {case}");
    }
}

#[test]
fn logit_shift_invariance() {
    let mut r = rng(3);
    for _ in 0..50 {
        let n = r.random_range(2..20);
        let logits: Vec<f64> = (0..n).map(|_| r.random_range(-20.0..20.0)).collect();
        let pos: Vec<usize> = (0..r.random_range(1..n)).collect();
        let shift = r.random_range(-50.0..50.0);
        let shifted: Vec<f64> = logits.iter().map(|z| z + shift).collect();
        assert!((contrastive_term(&logits, &pos) - contrastive_term(&shifted, &pos)).abs() < 1e-9);
    }
}

proptest! {
    #[test]
    fn contrastive_losses_are_nonnegative(seed in any::<u64>(), n_keys in 1usize..24, dim in 2usize..10) {
        let mut r = rng(seed);
        let mut mq = MultiQueue::new(3, 8, dim).unwrap();
        for i in 0..n_keys {
            mq.push(ProjVector::new(random_unit(&mut r, dim), (i % 5) as u64, i % 3)).unwrap();
        }
        let present = mq.all()[0].image_index;
        let anchor = ProjVector::new(random_unit(&mut r, dim), present, 0);
        let l = contra1(&[anchor.clone()], &mq, 0.05, Reduction::Mean).unwrap();
        prop_assert!(l.loss >= 0.0);
        if !mq.class(0).unwrap().is_empty() {
            let l2 = contra2(&[anchor.vector], &mq, 0, 0.05, Reduction::Mean).unwrap();
            prop_assert!(l2.loss >= 0.0);
        }
    }

    #[test]
    fn bayesian_is_permutation_invariant(seed in any::<u64>(), n in 1usize..8) {
        let mut r = rng(seed);
        let (h, w) = (6, 7);
        let density: Vec<f64> = (0..h * w).map(|_| r.random_range(0.0..0.5)).collect();
        let map = DensityMap::from_vec(h, w, density).unwrap();
        let points: Vec<[f64; 2]> = (0..n).map(|_| [r.random_range(0.0..7.0), r.random_range(0.0..6.0)]).collect();
        let mut shuffled = points.clone();
        shuffled.reverse();
        shuffled.rotate_left(n / 2);
        let (a, _) = bayesian_loss(&map, &points, 1.5).unwrap();
        let (b, _) = bayesian_loss(&map, &shuffled, 1.5).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn stage_totals_compose() {
    assert!((losses::wrl_total(0.7, 0.02, 10.0) - 0.9).abs() < 1e-12);
    assert!((losses::crr_total(0.7, 0.02, 10.0) - 0.9).abs() < 1e-12);
}
