//! Oracles shared by several test targets.
#![allow(dead_code)]

use fedprompt::dataset::Preset;
use ndarray::Array2;

pub const CLIENT_COUNTS: [usize; 6] = [2, 5, 10, 15, 20, 40];

/// Published per-client (train, test) images for N = 2, 5, 10, 15, 20, 40.
pub fn published(preset: Preset) -> [(usize, usize); 6] {
    match preset {
        Preset::FedOptimal => [
            (465, 465),
            (186, 186),
            (93, 93),
            (62, 62),
            (46, 46),
            (23, 23),
        ],
        Preset::FedUcmerced => [
            (525, 525),
            (210, 210),
            (105, 105),
            (70, 70),
            (52, 52),
            (26, 26),
        ],
        Preset::FedNwpu => [
            (3150, 12600),
            (1260, 5040),
            (630, 2520),
            (420, 1680),
            (315, 1260),
            (158, 630),
        ],
        Preset::Synthetic => unreachable!(),
    }
}

/// Solves `a x = b` by Gaussian elimination with partial pivoting; `None`
/// when (numerically) singular.
fn solve_linear(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            let (upper, lower) = a.split_at_mut(row);
            for (x, p) in lower[0][col..].iter_mut().zip(&upper[col][col..]) {
                *x -= f * p;
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    Some(x)
}

fn choose(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, k, &mut Vec::new(), &mut out);
    out
}

/// Exact optimum of `min <C, T>` over `T >= 0, T 1 <= alpha, T^T 1 = beta`
/// by enumerating every vertex of the feasible polytope.
pub fn lp_optimum(cost: &Array2<f64>, alpha: &[f64], beta: &[f64]) -> f64 {
    let (rows, cols) = cost.dim();
    let n = rows * cols;
    let var = |i: usize, j: usize| i * cols + j;
    // inequality rows as (coefficients, rhs) with a x <= rhs
    let mut ineq: Vec<(Vec<f64>, f64)> = Vec::new();
    for i in 0..rows {
        let mut a = vec![0.0; n];
        for j in 0..cols {
            a[var(i, j)] = 1.0;
        }
        ineq.push((a, alpha[i]));
    }
    for k in 0..n {
        let mut a = vec![0.0; n];
        a[k] = -1.0;
        ineq.push((a, 0.0));
    }
    let mut eq: Vec<(Vec<f64>, f64)> = Vec::new();
    for j in 0..cols {
        let mut a = vec![0.0; n];
        for i in 0..rows {
            a[var(i, j)] = 1.0;
        }
        eq.push((a, beta[j]));
    }
    let mut best = f64::INFINITY;
    for active in choose(ineq.len(), n - cols) {
        let mut a: Vec<Vec<f64>> = eq.iter().map(|(r, _)| r.clone()).collect();
        let mut b: Vec<f64> = eq.iter().map(|(_, v)| *v).collect();
        for &k in &active {
            a.push(ineq[k].0.clone());
            b.push(ineq[k].1);
        }
        let Some(x) = solve_linear(a, b) else {
            continue;
        };
        let feasible = ineq
            .iter()
            .all(|(r, rhs)| r.iter().zip(&x).map(|(c, v)| c * v).sum::<f64>() <= rhs + 1e-9);
        if feasible {
            let value: f64 = (0..rows)
                .flat_map(|i| (0..cols).map(move |j| (i, j)))
                .map(|(i, j)| cost[[i, j]] * x[var(i, j)])
                .sum();
            best = best.min(value);
        }
    }
    best
}
