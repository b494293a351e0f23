//! Independent oracles shared by the integration and acceptance suites. These
//! deliberately avoid the library's enumeration and recursion paths: the
//! Shapley oracle averages over explicit permutations, the Banzhaf oracle
//! enumerates subsets recursively, and the ridge oracle solves the batch
//! normal equations directly.
//!
//! Each test binary uses its own subset of the oracles.
#![allow(dead_code)]

use nalgebra::{Cholesky, DMatrix, DVector};

/// Shapley values by brute force over all `D!` permutations. The value
/// function receives a sorted slice of player positions.
pub fn shapley_permutation_oracle(players: usize, value: &dyn Fn(&[usize]) -> f64) -> Vec<f64> {
    let mut order: Vec<usize> = (0..players).collect();
    let mut phi = vec![0.0; players];
    let mut count = 0usize;
    permute(&mut order, 0, &mut |perm| {
        count += 1;
        let mut prefix: Vec<usize> = Vec::with_capacity(players);
        let mut before = value(&[]);
        for &p in perm {
            prefix.push(p);
            prefix.sort_unstable();
            let after = value(&prefix);
            phi[p] += before - after;
            before = after;
        }
    });
    for v in &mut phi {
        *v /= count as f64;
    }
    phi
}

fn permute(order: &mut Vec<usize>, k: usize, visit: &mut impl FnMut(&[usize])) {
    if k == order.len() {
        visit(order);
        return;
    }
    for i in k..order.len() {
        order.swap(k, i);
        permute(order, k + 1, visit);
        order.swap(k, i);
    }
}

/// Banzhaf values by recursive subset enumeration.
pub fn banzhaf_subset_oracle(players: usize, value: &dyn Fn(&[usize]) -> f64) -> Vec<f64> {
    (0..players)
        .map(|i| {
            let others: Vec<usize> = (0..players).filter(|&j| j != i).collect();
            let mut total = 0.0;
            let mut n = 0usize;
            subsets(&others, &mut |subset| {
                let mut with_i: Vec<usize> = subset.to_vec();
                with_i.push(i);
                with_i.sort_unstable();
                total += value(subset) - value(&with_i);
                n += 1;
            });
            total / n as f64
        })
        .collect()
}

fn subsets(items: &[usize], visit: &mut impl FnMut(&[usize])) {
    let n = items.len();
    for mask in 0..1usize << n {
        let subset: Vec<usize> = (0..n).filter(|b| mask >> b & 1 == 1).map(|b| items[b]).collect();
        visit(&subset);
    }
}

/// Batch ridge solution `(beta X^T X + alpha I)^-1 beta X^T y`, the closed
/// form the online recursion must reproduce at `tau = 1`.
pub fn batch_ridge_oracle(
    rows: &[Vec<f64>],
    targets: &[f64],
    alpha: f64,
    beta: f64,
) -> DVector<f64> {
    let n = rows.len();
    let d = rows[0].len();
    let x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    let y = DVector::from_vec(targets.to_vec());
    let lhs = x.transpose() * &x * beta + DMatrix::<f64>::identity(d, d) * alpha;
    let rhs = x.transpose() * y * beta;
    Cholesky::new(lhs).expect("ridge system is SPD").solve(&rhs)
}
