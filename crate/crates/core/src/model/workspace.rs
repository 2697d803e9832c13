use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use super::{Dataset, ModelParams};
use crate::error::{Error, Result};

/// Dense derived quantities for one parameter setting.
///
/// `P = SS' + sigma2 I`, `Q = P + WW'`, `A = (W'P^-1 W + I)^-1`. Every
/// product with `P^-1` or `Q^-1` goes through the stored Cholesky factors.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub p_mat: DMatrix<f64>,
    pub q_mat: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub chol_p: Cholesky<f64, Dyn>,
    pub chol_q: Cholesky<f64, Dyn>,
    pub logdet_p: f64,
    pub logdet_q: f64,
    /// `tau2 + beta' A beta`
    pub pred_var: f64,
    /// `P^-1 W A beta`, so the predictive mean is `pred_coef' x`.
    pub pred_coef: DVector<f64>,
    /// `P^-1 W`
    pinv_w: DMatrix<f64>,
}

fn logdet(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol
        .l_dirty()
        .diagonal()
        .iter()
        .map(|v| v.ln())
        .sum::<f64>()
}

pub fn build_workspace(params: &ModelParams) -> Result<Workspace> {
    params.validate()?;
    let p = params.p();
    let d = params.d();

    let mut p_mat = &params.s * params.s.transpose();
    for i in 0..p {
        p_mat[(i, i)] += params.sigma2;
    }
    let q_mat = &p_mat + &params.w * params.w.transpose();

    let chol_p = Cholesky::new(p_mat.clone()).ok_or(Error::Factorization { matrix: "P" })?;
    let chol_q = Cholesky::new(q_mat.clone()).ok_or(Error::Factorization { matrix: "Q" })?;

    let pinv_w = chol_p.solve(&params.w);
    let mut a_inv = params.w.transpose() * &pinv_w;
    for i in 0..d {
        a_inv[(i, i)] += 1.0;
    }
    let a_inv = symmetrize(a_inv);
    let a = Cholesky::new(a_inv)
        .ok_or(Error::Factorization { matrix: "A^-1" })?
        .inverse();
    let a = symmetrize(a);

    let a_beta = &a * &params.beta;
    let pred_var = params.tau2 + params.beta.dot(&a_beta);
    let pred_coef = &pinv_w * &a_beta;

    Ok(Workspace {
        logdet_p: logdet(&chol_p),
        logdet_q: logdet(&chol_q),
        p_mat,
        q_mat,
        a,
        chol_p,
        chol_q,
        pred_var,
        pred_coef,
        pinv_w,
    })
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

impl Workspace {
    /// Smallest pivot `L_ii^2` of the Cholesky factor of P.
    pub fn min_pivot_p(&self) -> f64 {
        min_pivot(&self.chol_p)
    }

    pub fn min_pivot_q(&self) -> f64 {
        min_pivot(&self.chol_q)
    }

    /// `A W' P^-1`, a d x p matrix.
    pub fn posterior_map(&self) -> DMatrix<f64> {
        &self.a * self.pinv_w.transpose()
    }

    pub fn predict(&self, x_star: &DVector<f64>) -> Result<PredictiveDist> {
        if x_star.len() != self.pred_coef.len() {
            return Err(Error::shape(format!(
                "query has length {}, model has p = {}",
                x_star.len(),
                self.pred_coef.len()
            )));
        }
        Ok(PredictiveDist {
            mean: self.pred_coef.dot(x_star),
            variance: self.pred_var,
        })
    }

    /// Predictive means for every row of `x`.
    pub fn predict_rows(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        if x.ncols() != self.pred_coef.len() {
            return Err(Error::shape(format!(
                "input has {} columns, model has p = {}",
                x.ncols(),
                self.pred_coef.len()
            )));
        }
        Ok(x * &self.pred_coef)
    }

    /// `sum_i x_i' Q^-1 x_i` over the rows of `x`.
    fn quad_q(&self, x: &DMatrix<f64>) -> f64 {
        quad_form(&self.chol_q, x)
    }

    fn quad_p(&self, y: &DMatrix<f64>) -> f64 {
        quad_form(&self.chol_p, y)
    }
}

fn min_pivot(chol: &Cholesky<f64, Dyn>) -> f64 {
    chol.l_dirty()
        .diagonal()
        .iter()
        .map(|v| v * v)
        .fold(f64::INFINITY, f64::min)
}

fn quad_form(chol: &Cholesky<f64, Dyn>, rows: &DMatrix<f64>) -> f64 {
    if rows.nrows() == 0 {
        return 0.0;
    }
    let l = chol.l_dirty().lower_triangle();
    let z = l
        .solve_lower_triangular(&rows.transpose())
        .expect("Cholesky factor has a positive diagonal");
    z.norm_squared()
}

/// Log-density of the observed data, background terms weighted by `alpha`.
///
/// Includes the `-(n p / 2 + n / 2 + alpha m p / 2) ln 2 pi` normalizing
/// constants.
pub fn log_likelihood(params: &ModelParams, data: &Dataset, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    data.check_params(params)?;
    let ws = build_workspace(params)?;
    let n = data.n() as f64;
    let m = data.m() as f64;
    let p = data.p() as f64;

    let mut ll = 0.0;
    if data.n() > 0 {
        let resid = &data.r - &data.x * &ws.pred_coef;
        ll -= 0.5 * n * ws.pred_var.ln() + resid.norm_squared() / (2.0 * ws.pred_var);
        ll -= 0.5 * n * ws.logdet_q + 0.5 * ws.quad_q(&data.x);
    }
    if alpha > 0.0 && data.m() > 0 {
        ll -= alpha * (0.5 * m * ws.logdet_p + 0.5 * ws.quad_p(&data.y));
    }
    ll -= (0.5 * n * p + 0.5 * n + 0.5 * alpha * m * p) * (2.0 * PI).ln();
    Ok(ll)
}

pub(crate) fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "alpha must be finite and nonnegative, got {alpha}"
        )));
    }
    Ok(())
}

/// Gaussian law of a new response given a new foreground observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictiveDist {
    pub mean: f64,
    pub variance: f64,
}

pub fn predict(params: &ModelParams, x_star: &DVector<f64>) -> Result<PredictiveDist> {
    build_workspace(params)?.predict(x_star)
}

/// Posterior of the foreground-specific latent `t` given `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPosterior {
    pub t_mean: DVector<f64>,
    pub t_cov: DMatrix<f64>,
}

pub fn latent_posterior(params: &ModelParams, x: &DVector<f64>) -> Result<LatentPosterior> {
    if x.len() != params.p() {
        return Err(Error::shape(format!(
            "observation has length {}, model has p = {}",
            x.len(),
            params.p()
        )));
    }
    let ws = build_workspace(params)?;
    let t_mean = &ws.a * (ws.pinv_w.transpose() * x);
    Ok(LatentPosterior {
        t_mean,
        t_cov: ws.a,
    })
}
