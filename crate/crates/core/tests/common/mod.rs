//! Dense reference computations shared by the integration tests.
#![allow(dead_code)]

use std::f64::consts::PI;

use clreg::model::GradientSet;
use clreg::{Dataset, ModelParams};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

pub fn random_params(rng: &mut ChaCha8Rng, p: usize, d: usize) -> ModelParams {
    let s = normal(rng, p, d);
    let w = normal(rng, p, d);
    let beta = normal(rng, d, 1).column(0).into_owned();
    let sigma2 = rng.random_range(0.3..2.0);
    let tau2 = rng.random_range(0.3..2.0);
    ModelParams::new(s, w, beta, sigma2, tau2).unwrap()
}

pub fn random_data(rng: &mut ChaCha8Rng, n: usize, m: usize, p: usize) -> Dataset {
    let x = normal(rng, n, p) * 1.5;
    let r = normal(rng, n, 1).column(0).into_owned();
    let y = normal(rng, m, p) * 1.5;
    Dataset::new(x, r, y).unwrap()
}

/// Haar-distributed orthogonal matrix via QR with sign correction.
pub fn random_orthogonal(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
    let qr = normal(rng, d, d).qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

/// Covariance of the stacked foreground observation and response `(x, r)`.
pub fn joint_cov(params: &ModelParams) -> DMatrix<f64> {
    let p = params.p();
    let q = &params.s * params.s.transpose()
        + &params.w * params.w.transpose()
        + DMatrix::identity(p, p) * params.sigma2;
    let wb = &params.w * &params.beta;
    let mut cov = DMatrix::zeros(p + 1, p + 1);
    cov.view_mut((0, 0), (p, p)).copy_from(&q);
    cov.view_mut((0, p), (p, 1)).copy_from(&wb);
    cov.view_mut((p, 0), (1, p)).copy_from(&wb.transpose());
    cov[(p, p)] = params.beta.norm_squared() + params.tau2;
    cov
}

pub fn background_cov(params: &ModelParams) -> DMatrix<f64> {
    let p = params.p();
    &params.s * params.s.transpose() + DMatrix::identity(p, p) * params.sigma2
}

/// Gaussian log-density from an explicit inverse and an LU determinant.
pub fn dense_logpdf(v: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let inv = cov.clone().try_inverse().expect("invertible covariance");
    let det = cov.clone().lu().determinant();
    let quad = (v.transpose() * inv * v)[(0, 0)];
    -0.5 * (v.len() as f64 * (2.0 * PI).ln() + det.ln() + quad)
}

pub fn dense_log_likelihood(params: &ModelParams, data: &Dataset, alpha: f64) -> f64 {
    let p = params.p();
    let joint = joint_cov(params);
    let bg = background_cov(params);
    let mut ll = 0.0;
    for i in 0..data.n() {
        let mut v = DVector::zeros(p + 1);
        v.rows_mut(0, p).copy_from(&data.x.row(i).transpose());
        v[p] = data.r[i];
        ll += dense_logpdf(&v, &joint);
    }
    if alpha > 0.0 {
        for j in 0..data.m() {
            ll += alpha * dense_logpdf(&data.y.row(j).transpose(), &bg);
        }
    }
    ll
}

/// Mean coefficient vector and variance of the last coordinate of a joint
/// Gaussian given the leading block.
pub fn condition_last(cov: &DMatrix<f64>) -> (DVector<f64>, f64) {
    let k = cov.nrows() - 1;
    let soo = cov.view((0, 0), (k, k)).into_owned();
    let sro = cov.view((k, 0), (1, k)).into_owned();
    let inv = soo.try_inverse().expect("invertible block");
    let coef = (&sro * &inv).transpose().column(0).into_owned();
    let var = cov[(k, k)] - (&sro * &inv * sro.transpose())[(0, 0)];
    (coef, var)
}

/// Posterior mean map and covariance of `t` given `x` from the joint law
/// cov[(x, t)] = [[Q, W], [W', I]].
pub fn latent_conditioning(params: &ModelParams) -> (DMatrix<f64>, DMatrix<f64>) {
    let p = params.p();
    let d = params.d();
    let q = &params.s * params.s.transpose()
        + &params.w * params.w.transpose()
        + DMatrix::identity(p, p) * params.sigma2;
    let inv = q.try_inverse().expect("invertible Q");
    let map = params.w.transpose() * &inv;
    let cov = DMatrix::identity(d, d) - &map * &params.w;
    (map, cov)
}

/// Central differences of the dense likelihood on the unconstrained
/// coordinates (variances on the log scale), mapped back to the natural
/// scale.
pub fn dense_fd_gradient(params: &ModelParams, data: &Dataset, alpha: f64, h: f64) -> GradientSet {
    let p = params.p();
    let d = params.d();
    let eval = |f: &dyn Fn(&mut ModelParams)| {
        let mut q = params.clone();
        f(&mut q);
        dense_log_likelihood(&q, data, alpha)
    };
    let diff =
        |f: &dyn Fn(&mut ModelParams, f64)| (eval(&|q| f(q, h)) - eval(&|q| f(q, -h))) / (2.0 * h);
    let ds = DMatrix::from_fn(p, d, |i, j| diff(&|q, e| q.s[(i, j)] += e));
    let dw = DMatrix::from_fn(p, d, |i, j| diff(&|q, e| q.w[(i, j)] += e));
    let dbeta = DVector::from_fn(d, |k, _| diff(&|q, e| q.beta[k] += e));
    let dsigma2 = diff(&|q, e| q.sigma2 *= e.exp()) / params.sigma2;
    let dtau2 = diff(&|q, e| q.tau2 *= e.exp()) / params.tau2;
    GradientSet {
        ds,
        dw,
        dbeta,
        dsigma2,
        dtau2,
    }
}

/// `max |a - b| / max(|a|, |b|, floor)` over all coordinates.
pub fn worst_scaled(a: &GradientSet, b: &GradientSet, floor: f64) -> f64 {
    let pairs =
        a.ds.iter()
            .zip(b.ds.iter())
            .chain(a.dw.iter().zip(b.dw.iter()))
            .chain(a.dbeta.iter().zip(b.dbeta.iter()))
            .chain([(&a.dsigma2, &b.dsigma2), (&a.dtau2, &b.dtau2)]);
    pairs
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

pub fn ols_predictions(x: &DMatrix<f64>, r: &DVector<f64>, x_test: &DMatrix<f64>) -> Vec<f64> {
    // least squares with an intercept column via the normal equations
    let design = |m: &DMatrix<f64>| {
        let mut out = DMatrix::from_element(m.nrows(), m.ncols() + 1, 1.0);
        out.columns_mut(1, m.ncols()).copy_from(m);
        out
    };
    let a = design(x);
    let coef = (a.transpose() * &a)
        .try_inverse()
        .expect("full-rank design")
        * a.transpose()
        * r;
    (design(x_test) * coef).iter().copied().collect()
}
