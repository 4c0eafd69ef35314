#![allow(dead_code)]

use ndarray::{Array1, Array2};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use transmodel_iv::sim::{calibrate_censoring, generate_case, CaseId, CaseSpec};
use transmodel_iv::{HazardFamily, SurvivalDataset};

/// Small random dataset with optional ties: `p` surrogates, `q` instruments.
pub fn random_dataset(seed: u64, n: usize, p: usize, q: usize, ties: bool) -> SurvivalDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Array2::from_shape_fn((n, q), |_| rng.random_range(0.0..3.0));
    let z = Array2::from_shape_fn((n, p), |(i, j)| w[[i, j % q]] + rng.random_range(-1.0..1.0));
    let mut times: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..5.0)).collect();
    if ties {
        for t in times.iter_mut() {
            *t = (*t * 2.0).ceil() / 2.0;
        }
    }
    let mut status: Vec<bool> = (0..n).map(|_| rng.random_bool(0.7)).collect();
    status[0] = true;
    SurvivalDataset::new(times, status, z, w).unwrap()
}

pub fn random_beta(seed: u64, p: usize) -> Array1<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    Array1::from_shape_fn(p, |_| rng.random_range(-1.5..1.5))
}

/// `Σ_{j ≤ k} d_j / Σᵢ Yᵢ(t_j) exp(ηᵢ)` at each distinct event time, computed
/// by brute force over records.
pub fn breslow_cumulative(times: &[f64], status: &[bool], eta: &[f64]) -> Vec<(f64, f64)> {
    let mut event_times: Vec<f64> = times.iter().zip(status).filter(|(_, d)| **d).map(|(t, _)| *t).collect();
    event_times.sort_by(f64::total_cmp);
    event_times.dedup();
    let mut cum = 0.0;
    event_times
        .iter()
        .map(|&t| {
            let d = times.iter().zip(status).filter(|(s, e)| **e && **s == t).count() as f64;
            let s0: f64 = times.iter().zip(eta).filter(|(s, _)| **s >= t).map(|(_, e)| e.exp()).sum();
            cum += d / s0;
            (t, cum)
        })
        .collect()
}

fn gauss_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let p = b.len();
    for c in 0..p {
        let piv = (c..p).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, piv);
        b.swap(c, piv);
        for r in c + 1..p {
            let f = a[r][c] / a[c][c];
            for k in c..p {
                a[r][k] -= f * a[c][k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = vec![0.0; p];
    for r in (0..p).rev() {
        let s: f64 = (r + 1..p).map(|k| a[r][k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

/// Breslow partial log-likelihood, gradient and negative Hessian.
fn cox_terms(times: &[f64], status: &[bool], x: &Array2<f64>, beta: &[f64]) -> (f64, Vec<f64>, Vec<Vec<f64>>) {
    let (n, p) = x.dim();
    let eta: Vec<f64> = (0..n).map(|i| (0..p).map(|j| x[[i, j]] * beta[j]).sum()).collect();
    let mut ll = 0.0;
    let mut grad = vec![0.0; p];
    let mut info = vec![vec![0.0; p]; p];
    for i in 0..n {
        if !status[i] {
            continue;
        }
        let risk: Vec<usize> = (0..n).filter(|&j| times[j] >= times[i]).collect();
        let m = risk.iter().map(|&j| eta[j]).fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = risk.iter().map(|&j| (eta[j] - m).exp()).collect();
        let s0: f64 = w.iter().sum();
        ll += eta[i] - m - s0.ln();
        let mean: Vec<f64> = (0..p)
            .map(|a| risk.iter().zip(&w).map(|(&j, wj)| wj * x[[j, a]]).sum::<f64>() / s0)
            .collect();
        for a in 0..p {
            grad[a] += x[[i, a]] - mean[a];
            for b in 0..p {
                let s2: f64 = risk.iter().zip(&w).map(|(&j, wj)| wj * x[[j, a]] * x[[j, b]]).sum::<f64>() / s0;
                info[a][b] += s2 - mean[a] * mean[b];
            }
        }
    }
    (ll, grad, info)
}

/// Newton–Raphson on the Breslow partial likelihood with step halving.
pub fn cox_newton(times: &[f64], status: &[bool], x: &Array2<f64>) -> Vec<f64> {
    let p = x.ncols();
    let mut beta = vec![0.0; p];
    let (mut ll, mut grad, mut info) = cox_terms(times, status, x, &beta);
    for _ in 0..200 {
        let step = gauss_solve(info.clone(), grad.clone());
        let mut t = 1.0;
        loop {
            let cand: Vec<f64> = beta.iter().zip(&step).map(|(b, s)| b + t * s).collect();
            let (l2, g2, i2) = cox_terms(times, status, x, &cand);
            if l2 >= ll - 1e-12 || t < 1e-10 {
                beta = cand;
                ll = l2;
                grad = g2;
                info = i2;
                break;
            }
            t *= 0.5;
        }
        if grad.iter().map(|g| g.abs()).fold(0.0, f64::max) < 1e-11 * times.len() as f64 {
            break;
        }
    }
    beta
}

/// One replicate of a simulation design with a calibrated censoring constant.
pub fn case_data(case: CaseId, n: usize, beta: Vec<f64>, family: HazardFamily, seed: u64, rep: u64) -> SurvivalDataset {
    let mut spec = CaseSpec::new(case, n, beta, family, 1, seed).unwrap();
    spec.censoring_constant = Some(calibrate_censoring(&spec).unwrap());
    generate_case(&spec, rep).unwrap().dataset
}

/// Trial-shaped data: follow-up in whole days with administrative censoring,
/// a log cell count measured twice (baseline surrogate and screening
/// instrument) and age recorded without error, so it serves as its own
/// instrument.
pub fn write_trial_csv(path: &Path, n: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.25).unwrap();
    let mut out = String::from("pidnum,days,cens,cd4_baseline,cd4_screen,age,age_screen\n");
    for i in 0..n {
        let truth: f64 = 5.8 + Normal::new(0.0, 0.5).unwrap().sample(&mut rng);
        let age: f64 = rng.random_range(20.0..60.0);
        let rate = (-1.2 * (truth - 5.8) + 0.02 * (age - 40.0)).exp() / 900.0;
        let u: f64 = rng.random_range(1e-12..1.0);
        let t = -u.ln() / rate;
        let follow = rng.random_range(600.0..1200.0);
        let (days, cens) = if t <= follow { (t.ceil(), 1) } else { (follow.floor(), 0) };
        out.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.1},{:.1}\n",
            10000 + i,
            days,
            cens,
            truth + noise.sample(&mut rng),
            truth + noise.sample(&mut rng),
            age,
            age
        ));
    }
    std::fs::write(path, out).unwrap();
}
