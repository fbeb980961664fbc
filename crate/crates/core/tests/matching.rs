use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rcfuse_core::matching::{assignment_cost, hungarian};
use rcfuse_core::Error;

/// Minimum total cost over all injective maps of the smaller side into
/// the larger one.
fn brute_force(cost: &[f64], n: usize, m: usize) -> f64 {
    fn rec(cost: &[f64], n: usize, m: usize, row: usize, used: &mut [bool], acc: f64, best: &mut f64) {
        if row == n {
            *best = best.min(acc);
            return;
        }
        for j in 0..m {
            if !used[j] {
                used[j] = true;
                rec(cost, n, m, row + 1, used, acc + cost[row * m + j], best);
                used[j] = false;
            }
        }
    }
    let (c, n, m) = if n <= m {
        (cost.to_vec(), n, m)
    } else {
        let mut t = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                t[j * n + i] = cost[i * m + j];
            }
        }
        (t, m, n)
    };
    let mut best = f64::INFINITY;
    rec(&c, n, m, 0, &mut vec![false; m], 0.0, &mut best);
    best
}

fn check(cost: &[f64], n: usize, m: usize) {
    let pairs = hungarian(cost, n, m).unwrap();
    assert_eq!(pairs.len(), n.min(m));
    let mut rows: Vec<_> = pairs.iter().map(|p| p.0).collect();
    let mut cols: Vec<_> = pairs.iter().map(|p| p.1).collect();
    rows.dedup();
    cols.sort_unstable();
    cols.dedup();
    assert_eq!(rows.len(), pairs.len());
    assert_eq!(cols.len(), pairs.len());
    let got = assignment_cost(cost, m, &pairs);
    let want = brute_force(cost, n, m);
    assert!((got - want).abs() <= 1e-9 * want.abs().max(1.0), "{got} vs {want} on {n}x{m}");
}

#[test]
fn two_by_two_example() {
    let pairs = hungarian(&[1.0, 2.0, 3.0, 1.0], 2, 2).unwrap();
    assert_eq!(pairs, vec![(0, 0), (1, 1)]);
    assert_eq!(assignment_cost(&[1.0, 2.0, 3.0, 1.0], 2, &pairs), 2.0);
}

#[test]
fn diagonal_dominant_gives_identity() {
    let n = 6;
    let cost: Vec<f64> = (0..n * n).map(|k| if k / n == k % n { 0.0 } else { 1.0 + k as f64 }).collect();
    assert_eq!(hungarian(&cost, n, n).unwrap(), (0..n).map(|i| (i, i)).collect::<Vec<_>>());
}

#[test]
fn integer_costs_match_brute_force_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..1000 {
        let (n, m) = (rng.random_range(1..=7), rng.random_range(1..=7));
        let cost: Vec<f64> = (0..n * m).map(|_| rng.random_range(0..10) as f64).collect();
        let pairs = hungarian(&cost, n, m).unwrap();
        assert_eq!(assignment_cost(&cost, m, &pairs), brute_force(&cost, n, m));
    }
}

#[test]
fn empty_sides_give_no_pairs() {
    assert!(hungarian(&[], 0, 4).unwrap().is_empty());
    assert!(hungarian(&[], 3, 0).unwrap().is_empty());
}

#[test]
fn non_finite_costs_are_rejected() {
    assert!(matches!(hungarian(&[1.0, f64::NAN], 1, 2), Err(Error::Contract(_))));
    assert!(matches!(hungarian(&[f64::INFINITY], 1, 1), Err(Error::Contract(_))));
    assert!(hungarian(&[1.0, 2.0], 2, 2).is_err());
}

proptest! {
    #[test]
    fn continuous_costs_match_brute_force(
        (n, m, cost) in (1usize..=7, 1usize..=7).prop_flat_map(|(n, m)| {
            (Just(n), Just(m), prop::collection::vec(-50.0f64..50.0, n * m))
        })
    ) {
        check(&cost, n, m);
    }

    #[test]
    fn positive_scaling_keeps_the_assignment(
        (n, m, cost) in (1usize..=7, 1usize..=7).prop_flat_map(|(n, m)| {
            (Just(n), Just(m), prop::collection::vec(0.0f64..1.0, n * m))
        }),
        scale in 0.5f64..8.0,
    ) {
        // powers of two keep the scaled costs exact
        let s = scale.log2().round().exp2();
        let scaled: Vec<f64> = cost.iter().map(|c| c * s).collect();
        prop_assert_eq!(hungarian(&cost, n, m).unwrap(), hungarian(&scaled, n, m).unwrap());
    }
}
