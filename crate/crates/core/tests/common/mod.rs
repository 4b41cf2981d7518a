//! Independent reference implementations shared by the integration and
//! acceptance tests. None of them calls into the code under test.

#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::Rng;

/// Least-squares coefficients `pinv(X) Y` through an SVD; `x` is `n x k`,
/// `y` is `n x p`, both row-major. Returns `k x p`, row-major.
pub fn pinv_solution(x: &[f64], n: usize, k: usize, y: &[f64], p: usize) -> Vec<f64> {
    let xm = DMatrix::from_row_slice(n, k, x);
    let ym = DMatrix::from_row_slice(n, p, y);
    let pinv = xm.pseudo_inverse(1e-12).expect("svd converges");
    let b = pinv * ym;
    let mut out = Vec::with_capacity(k * p);
    for r in 0..k {
        for c in 0..p {
            out.push(b[(r, c)]);
        }
    }
    out
}

/// Random binary design with an intercept column appended; redrawn until it
/// has full column rank.
pub fn random_design<R: Rng>(rng: &mut R, n: usize, k_terms: usize) -> Vec<Vec<f64>> {
    loop {
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..k_terms).map(|_| f64::from(u8::from(rng.gen_bool(0.4)))).collect())
            .collect();
        let mut full = Vec::with_capacity(n * (k_terms + 1));
        for r in &rows {
            full.extend_from_slice(r);
            full.push(1.0);
        }
        let m = DMatrix::from_row_slice(n, k_terms + 1, &full);
        let sv = m.singular_values();
        let max = sv.max();
        if sv.iter().all(|&s| s > 1e-8 * max) {
            return rows;
        }
    }
}

/// Voxel coordinates of a full `dims` grid in C order (x slowest).
pub fn grid_coords(dims: [usize; 3]) -> Vec<[usize; 3]> {
    let mut out = Vec::new();
    for x in 0..dims[0] {
        for y in 0..dims[1] {
            for z in 0..dims[2] {
                out.push([x, y, z]);
            }
        }
    }
    out
}

fn face_adjacent(a: [usize; 3], b: [usize; 3]) -> bool {
    let d: usize = (0..3).map(|i| a[i].abs_diff(b[i])).sum();
    d == 1
}

/// Within-cluster sum of squares of a voxel set, summed over maps.
fn ess(data: &[f64], n: usize, p: usize, members: &[usize]) -> f64 {
    let mut total = 0.0;
    for r in 0..n {
        let vals: Vec<f64> = members.iter().map(|&v| data[r * p + v]).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        total += vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
    }
    total
}

/// Exhaustive constrained Ward: at every step evaluate every pair of
/// spatially touching clusters, merge the one that increases the total
/// within-cluster sum of squares least, ties to the lowest `(a, b)` id
/// pair. Voxels are clusters `0..p`, merge `m` creates cluster `p + m`.
/// `data` is `n x p` row-major. Returns `(a, b, cost)` per merge.
pub fn brute_force_ward(data: &[f64], n: usize, coords: &[[usize; 3]]) -> Vec<(usize, usize, f64)> {
    let p = coords.len();
    let mut clusters: Vec<(usize, Vec<usize>)> = (0..p).map(|v| (v, vec![v])).collect();
    let mut merges = Vec::new();
    while clusters.len() > 1 {
        let mut best: Option<(f64, usize, usize, usize, usize)> = None;
        for i in 0..clusters.len() {
            for j in 0..clusters.len() {
                if i == j {
                    continue;
                }
                let (ida, ma) = (&clusters[i].0, &clusters[i].1);
                let (idb, mb) = (&clusters[j].0, &clusters[j].1);
                if ida > idb {
                    continue;
                }
                let touching = ma.iter().any(|&u| mb.iter().any(|&v| face_adjacent(coords[u], coords[v])));
                if !touching {
                    continue;
                }
                let mut union = ma.clone();
                union.extend(mb);
                let cost = ess(data, n, p, &union) - ess(data, n, p, ma) - ess(data, n, p, mb);
                let better = match best {
                    None => true,
                    Some((c, a, b, _, _)) => {
                        // Costs within rounding of each other count as ties.
                        let tol = 1e-9 * c.abs().max(cost.abs()).max(1e-300);
                        if (cost - c).abs() <= tol {
                            (*ida, *idb) < (a, b)
                        } else {
                            cost < c
                        }
                    }
                };
                if better {
                    best = Some((cost, *ida, *idb, i, j));
                }
            }
        }
        let Some((cost, a, b, i, j)) = best else { break };
        let new_id = p + merges.len();
        let mut union = clusters[i].1.clone();
        union.extend(&clusters[j].1);
        let (hi, lo) = (i.max(j), i.min(j));
        clusters.remove(hi);
        clusters.remove(lo);
        clusters.push((new_id, union));
        merges.push((a, b, cost));
    }
    merges
}

/// Penalized logistic objective written from scratch:
/// `sum_i w_i log(1 + exp(-s_i (x_i . beta + b))) + lambda/2 |beta|^2`
/// with `s_i = +1` for positives, `-1` otherwise.
pub fn logistic_objective(x: &[f64], d: usize, y: &[bool], w: &[f64], lambda: f64, theta: &[f64]) -> f64 {
    let (beta, b) = theta.split_at(d);
    let mut total = 0.0;
    for (i, row) in x.chunks(d).enumerate() {
        let z: f64 = row.iter().zip(beta).map(|(a, c)| a * c).sum::<f64>() + b[0];
        let s = if y[i] { 1.0 } else { -1.0 };
        let m = -s * z;
        // log(1 + e^m), stable for large |m|
        total += w[i] * if m > 30.0 { m } else { m.exp().ln_1p() };
    }
    total + 0.5 * lambda * beta.iter().map(|v| v * v).sum::<f64>()
}

/// Nelder-Mead simplex minimisation with restarts, for low-dimensional
/// smooth objectives.
pub fn nelder_mead(f: impl Fn(&[f64]) -> f64, start: &[f64], step: f64, iters: usize) -> Vec<f64> {
    let mut x0 = start.to_vec();
    for _ in 0..4 {
        x0 = nelder_mead_once(&f, &x0, step, iters);
    }
    x0
}

fn nelder_mead_once(f: &impl Fn(&[f64]) -> f64, start: &[f64], step: f64, iters: usize) -> Vec<f64> {
    let k = start.len();
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(k + 1);
    simplex.push((start.to_vec(), f(start)));
    for i in 0..k {
        let mut v = start.to_vec();
        v[i] += step;
        let fv = f(&v);
        simplex.push((v, fv));
    }
    for _ in 0..iters {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let spread = simplex[k].1 - simplex[0].1;
        if spread.abs() < 1e-15 * simplex[0].1.abs().max(1.0) {
            break;
        }
        let centroid: Vec<f64> = (0..k)
            .map(|j| simplex[..k].iter().map(|(v, _)| v[j]).sum::<f64>() / k as f64)
            .collect();
        let along = |t: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&simplex[k].0)
                .map(|(c, w)| c + t * (c - w))
                .collect()
        };
        let r = along(1.0);
        let fr = f(&r);
        if fr < simplex[0].1 {
            let e = along(2.0);
            let fe = f(&e);
            simplex[k] = if fe < fr { (e, fe) } else { (r, fr) };
        } else if fr < simplex[k - 1].1 {
            simplex[k] = (r, fr);
        } else {
            let c = if fr < simplex[k].1 { along(0.5) } else { along(-0.5) };
            let fc = f(&c);
            if fc < simplex[k].1.min(fr) {
                simplex[k] = (c, fc);
            } else {
                let best = simplex[0].0.clone();
                for s in simplex.iter_mut().skip(1) {
                    for (v, b) in s.0.iter_mut().zip(&best) {
                        *v = b + 0.5 * (*v - b);
                    }
                    s.1 = f(&s.0);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    simplex.swap_remove(0).0
}

/// Central finite-difference gradient.
pub fn finite_gradient(f: impl Fn(&[f64]) -> f64, at: &[f64], h: f64) -> Vec<f64> {
    (0..at.len())
        .map(|i| {
            let mut a = at.to_vec();
            let mut b = at.to_vec();
            a[i] += h;
            b[i] -= h;
            (f(&a) - f(&b)) / (2.0 * h)
        })
        .collect()
}

/// Upper one-sided binomial bound `q + 3 sqrt(q (1 - q) / trials)`.
pub fn binomial_bound(q: f64, trials: usize) -> f64 {
    q + 3.0 * (q * (1.0 - q) / trials as f64).sqrt()
}
