#![allow(dead_code)]

pub mod gradcases;

use tch::{Device, Kind, Tensor};

pub fn seeded(shape: &[i64], kind: Kind, seed: i64) -> Tensor {
    tch::manual_seed(seed);
    Tensor::rand(shape, (kind, Device::Cpu)) * 2 - 1
}

fn value(t: &Tensor) -> f64 {
    f64::try_from(t.detach().to_kind(Kind::Double)).unwrap()
}

fn analytic(f: &dyn Fn(&Tensor) -> Tensor, x: &Tensor) -> Tensor {
    let x = x.detach().set_requires_grad(true);
    let y = f(&x);
    let g = Tensor::run_backward(&[y], &[&x], false, false);
    g[0].detach()
}

/// Central-difference check of every listed coordinate; returns the
/// norm-wise relative error ‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖).
pub fn coordinate_check(f: &dyn Fn(&Tensor) -> Tensor, x: &Tensor, coords: &[i64], h: f64) -> f64 {
    let grad = analytic(f, x).view([-1]);
    let flat = x.detach().view([-1]);
    let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
    for &i in coords {
        let probe = |delta: f64| {
            let xp = flat.copy();
            let _ = xp.get(i).g_add_scalar_(delta);
            tch::no_grad(|| value(&f(&xp.view(x.size().as_slice()))))
        };
        let numeric = (probe(h) - probe(-h)) / (2.0 * h);
        let a = value(&grad.get(i));
        diff += (a - numeric).powi(2);
        na += a * a;
        nn += numeric * numeric;
    }
    diff.sqrt() / na.sqrt().max(nn.sqrt()).max(1e-300)
}

/// Central-difference check along v = sign(∇f): every input element moves
/// by ±h, and the directional derivative is ‖∇f‖₁. Compared with a single
/// coordinate this keeps float32 rounding of f small relative to the
/// measured change.
pub fn directional_check(f: &dyn Fn(&Tensor) -> Tensor, x: &Tensor, h: f64) -> f64 {
    let grad = analytic(f, x);
    let v = grad.sign();
    let probe = |s: f64| tch::no_grad(|| value(&f(&(x.detach() + &v * s))));
    let numeric = (probe(h) - probe(-h)) / (2.0 * h);
    let a = value(&grad.to_kind(Kind::Double).abs().sum(Kind::Double));
    (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-300)
}

/// Evenly spread flat indices of a tensor with `numel` entries.
pub fn spread(numel: i64, count: i64) -> Vec<i64> {
    let step = (numel / count).max(1);
    (0..numel).step_by(step as usize).take(count as usize).collect()
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations, as an oracle
/// independent of the library eigen solver. Returns eigenvalues in
/// descending order with eigenvectors as columns (row-major `v[i][k]`).
pub fn jacobi_eigen(a: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut a = a.to_vec();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        if off < 1e-22 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k][p], v[k][q]);
                    v[k][p] = c * vkp - s * vkq;
                    v[k][q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j][j].total_cmp(&a[i][i]));
    let values = order.iter().map(|&i| a[i][i]).collect();
    let vectors = (0..n).map(|r| order.iter().map(|&i| v[r][i]).collect()).collect();
    (values, vectors)
}
