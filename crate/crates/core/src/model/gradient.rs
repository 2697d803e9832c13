//! Log-likelihood gradients.
//!
//! The foreground pair `(x, r)` is jointly Gaussian with covariance
//! `L L' + D`, where `L = [[S, W], [0, beta']]` and
//! `D = diag(sigma2, ..., sigma2, tau2)`; the background is `S S' + sigma2 I`.
//! Both are low-rank-plus-diagonal, so values and gradients come from the
//! Woodbury identity on k x k capacitance matrices and the data scatter
//! matrices, which are formed once per dataset.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector};

use super::workspace::{check_alpha, log_likelihood};
use super::{Dataset, ModelParams};
use crate::error::{Error, Result};

/// Partial derivatives of the log-likelihood in the natural parameterization.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub ds: DMatrix<f64>,
    pub dw: DMatrix<f64>,
    pub dbeta: DVector<f64>,
    pub dsigma2: f64,
    pub dtau2: f64,
}

impl GradientSet {
    pub fn zeros(p: usize, d: usize) -> Self {
        GradientSet {
            ds: DMatrix::zeros(p, d),
            dw: DMatrix::zeros(p, d),
            dbeta: DVector::zeros(d),
            dsigma2: 0.0,
            dtau2: 0.0,
        }
    }

    /// Gradient with respect to `ModelParams::to_unconstrained` coordinates;
    /// the variance entries pick up the chain-rule factor `sigma2`, `tau2`.
    pub fn to_unconstrained(&self, params: &ModelParams) -> DVector<f64> {
        let mut out = Vec::with_capacity(params.n_coords());
        out.extend(self.ds.iter());
        out.extend(self.dw.iter());
        out.extend(self.dbeta.iter());
        out.push(self.dsigma2 * params.sigma2);
        out.push(self.dtau2 * params.tau2);
        DVector::from_vec(out)
    }

    pub fn is_finite(&self) -> bool {
        self.ds
            .iter()
            .chain(self.dw.iter())
            .chain(self.dbeta.iter())
            .all(|v| v.is_finite())
            && self.dsigma2.is_finite()
            && self.dtau2.is_finite()
    }
}

/// Log-likelihood evaluator holding the data scatter matrices.
///
/// Each evaluation costs `O(p^2 d)`; building it costs `O((n + m) p^2)`.
#[derive(Debug, Clone)]
pub struct Objective {
    n: usize,
    m: usize,
    p: usize,
    alpha: f64,
    /// `[X r]' [X r]`, (p+1) x (p+1).
    fg_scatter: DMatrix<f64>,
    /// `Y' Y`, p x p.
    bg_scatter: DMatrix<f64>,
}

struct BlockEval {
    value: f64,
    /// `G L` with `G = S^-1 C S^-1 - N S^-1`, the loading gradient.
    grad_loadings: DMatrix<f64>,
    /// Diagonal of `G`.
    grad_diag: DVector<f64>,
}

/// Gaussian log-density of `count` zero-mean samples with scatter `scatter`
/// under covariance `L L' + diag(noise)`.
///
/// With `V = D^-1/2 L = U R` (thin QR), `M = R R'` and `K = I + M`,
/// `D^1/2 S^-1 D^1/2 = I - U E U'` where `E = M K^-1`, and
/// `ln|S| = ln|D| + ln|K|`. Working in the orthonormal basis `U` keeps every
/// cancellation bounded by the scale of the data rather than the loadings.
fn low_rank_gaussian(
    scatter: &DMatrix<f64>,
    count: f64,
    loadings: &DMatrix<f64>,
    noise: &DVector<f64>,
    with_grad: bool,
) -> Result<(f64, Option<BlockEval>)> {
    let q = loadings.nrows();
    let inv_sd = noise.map(|v| 1.0 / v.sqrt());

    let mut v = loadings.clone();
    for (i, mut row) in v.row_iter_mut().enumerate() {
        row *= inv_sd[i];
    }
    let qr = v.qr();
    let basis = qr.q();
    let r = qr.r();
    let rank = r.nrows();
    let mut cap = &r * r.transpose();
    for i in 0..rank {
        cap[(i, i)] += 1.0;
    }
    let chol = Cholesky::new(cap).ok_or(Error::Factorization {
        matrix: "capacitance",
    })?;
    let logdet = noise.iter().map(|v| v.ln()).sum::<f64>()
        + 2.0
            * chol
                .l_dirty()
                .diagonal()
                .iter()
                .map(|v| v.ln())
                .sum::<f64>();

    // scaled scatter C~ = D^-1/2 C D^-1/2, only through C~ U
    let mut scaled_basis = basis.clone();
    for (i, mut row) in scaled_basis.row_iter_mut().enumerate() {
        row *= inv_sd[i];
    }
    let mut cu = scatter * &scaled_basis;
    for (i, mut row) in cu.row_iter_mut().enumerate() {
        row *= inv_sd[i];
    }
    let h = basis.transpose() * &cu;
    // E = I - K^-1
    let e = DMatrix::identity(rank, rank) - chol.inverse();
    let trace_c = (0..q)
        .map(|i| scatter[(i, i)] * inv_sd[i] * inv_sd[i])
        .sum::<f64>();
    let trace = trace_c - (&e * &h).trace();

    let value = -0.5 * (count * q as f64 * (2.0 * PI).ln() + count * logdet + trace);
    if !with_grad {
        return Ok((value, None));
    }

    // Pi V = U T with T = K^-1 R; G~ V = C~ U T - U E H T - N U T
    let t = chol.solve(&r);
    let ue = &basis * &e;
    let mut grad_loadings = (&cu - &ue * &h) * &t - (&basis * &t) * count;
    for (i, mut row) in grad_loadings.row_iter_mut().enumerate() {
        row *= inv_sd[i];
    }

    let ueh = &ue * &h;
    let grad_diag = DVector::from_fn(q, |i, _| {
        let ue_i = ue.row(i);
        let quad = scatter[(i, i)] * inv_sd[i] * inv_sd[i] - 2.0 * ue_i.dot(&cu.row(i))
            + ueh.row(i).dot(&ue_i);
        let pi_diag = 1.0 - ue_i.dot(&basis.row(i));
        (quad - count * pi_diag) * inv_sd[i] * inv_sd[i]
    });

    Ok((
        value,
        Some(BlockEval {
            value,
            grad_loadings,
            grad_diag,
        }),
    ))
}

impl Objective {
    pub fn new(data: &Dataset, alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        let p = data.p();
        let mut xr = DMatrix::zeros(data.n(), p + 1);
        xr.columns_mut(0, p).copy_from(&data.x);
        xr.column_mut(p).copy_from(&data.r);
        let fg_scatter = xr.transpose() * &xr;
        let bg_scatter = if alpha > 0.0 {
            data.y.transpose() * &data.y
        } else {
            DMatrix::zeros(p, p)
        };
        Ok(Objective {
            n: data.n(),
            m: data.m(),
            p,
            alpha,
            fg_scatter,
            bg_scatter,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    fn check(&self, params: &ModelParams) -> Result<()> {
        params.validate()?;
        if params.p() != self.p {
            return Err(Error::shape(format!(
                "model has p = {} but data has {} columns",
                params.p(),
                self.p
            )));
        }
        Ok(())
    }

    fn foreground_block(params: &ModelParams) -> (DMatrix<f64>, DVector<f64>) {
        let p = params.p();
        let d = params.d();
        let mut loadings = DMatrix::zeros(p + 1, 2 * d);
        loadings.view_mut((0, 0), (p, d)).copy_from(&params.s);
        loadings.view_mut((0, d), (p, d)).copy_from(&params.w);
        for j in 0..d {
            loadings[(p, d + j)] = params.beta[j];
        }
        let mut noise = DVector::from_element(p + 1, params.sigma2);
        noise[p] = params.tau2;
        (loadings, noise)
    }

    fn uses_background(&self) -> bool {
        self.alpha > 0.0 && self.m > 0
    }

    pub fn value(&self, params: &ModelParams) -> Result<f64> {
        self.check(params)?;
        let mut value = 0.0;
        if self.n > 0 {
            let (loadings, noise) = Self::foreground_block(params);
            value +=
                low_rank_gaussian(&self.fg_scatter, self.n as f64, &loadings, &noise, false)?.0;
        }
        if self.uses_background() {
            let noise = DVector::from_element(self.p, params.sigma2);
            value += self.alpha
                * low_rank_gaussian(&self.bg_scatter, self.m as f64, &params.s, &noise, false)?.0;
        }
        Ok(value)
    }

    pub fn value_and_gradient(&self, params: &ModelParams) -> Result<(f64, GradientSet)> {
        self.check(params)?;
        let p = params.p();
        let d = params.d();
        let mut grad = GradientSet::zeros(p, d);
        let mut value = 0.0;

        if self.n > 0 {
            let (loadings, noise) = Self::foreground_block(params);
            let (_, eval) =
                low_rank_gaussian(&self.fg_scatter, self.n as f64, &loadings, &noise, true)?;
            let eval = eval.expect("gradient requested");
            value += eval.value;
            grad.ds += eval.grad_loadings.view((0, 0), (p, d));
            grad.dw += eval.grad_loadings.view((0, d), (p, d));
            grad.dbeta += eval.grad_loadings.view((p, d), (1, d)).transpose();
            grad.dsigma2 += 0.5 * eval.grad_diag.rows(0, p).sum();
            grad.dtau2 += 0.5 * eval.grad_diag[p];
        }
        if self.uses_background() {
            let noise = DVector::from_element(p, params.sigma2);
            let (_, eval) =
                low_rank_gaussian(&self.bg_scatter, self.m as f64, &params.s, &noise, true)?;
            let eval = eval.expect("gradient requested");
            value += self.alpha * eval.value;
            grad.ds += eval.grad_loadings * self.alpha;
            grad.dsigma2 += self.alpha * 0.5 * eval.grad_diag.sum();
        }
        Ok((value, grad))
    }
}

/// Analytic gradient of [`log_likelihood`].
pub fn grad_log_likelihood(
    params: &ModelParams,
    data: &Dataset,
    alpha: f64,
) -> Result<GradientSet> {
    data.check_params(params)?;
    Ok(Objective::new(data, alpha)?.value_and_gradient(params)?.1)
}

/// Central differences of [`log_likelihood`] on the unconstrained
/// coordinates; variance derivatives are converted back to the natural scale.
pub fn finite_diff_gradient(
    params: &ModelParams,
    data: &Dataset,
    alpha: f64,
    step: f64,
) -> Result<GradientSet> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "step must be positive, got {step}"
        )));
    }
    params.validate()?;
    data.check_params(params)?;
    let p = params.p();
    let d = params.d();
    let u = params.to_unconstrained();
    let mut g = DVector::zeros(u.len());
    for i in 0..u.len() {
        let mut up = u.clone();
        up[i] += step;
        let mut down = u.clone();
        down[i] -= step;
        let f_up = log_likelihood(&ModelParams::from_unconstrained(p, d, &up), data, alpha)?;
        let f_down = log_likelihood(&ModelParams::from_unconstrained(p, d, &down), data, alpha)?;
        g[i] = (f_up - f_down) / (2.0 * step);
    }
    let pd = p * d;
    Ok(GradientSet {
        ds: DMatrix::from_column_slice(p, d, &g.as_slice()[..pd]),
        dw: DMatrix::from_column_slice(p, d, &g.as_slice()[pd..2 * pd]),
        dbeta: DVector::from_column_slice(&g.as_slice()[2 * pd..2 * pd + d]),
        dsigma2: g[2 * pd + d] / params.sigma2,
        dtau2: g[2 * pd + d + 1] / params.tau2,
    })
}

/// Worst scaled disagreement per parameter block,
/// `|a - b| / max(|a|, |b|, floor)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize)]
pub struct GradientErrors {
    pub s: f64,
    pub w: f64,
    pub beta: f64,
    pub sigma2: f64,
    pub tau2: f64,
}

impl GradientErrors {
    pub fn max(&self) -> f64 {
        [self.s, self.w, self.beta, self.sigma2, self.tau2]
            .into_iter()
            .fold(0.0, f64::max)
    }

    pub fn merge(&self, other: &GradientErrors) -> GradientErrors {
        GradientErrors {
            s: self.s.max(other.s),
            w: self.w.max(other.w),
            beta: self.beta.max(other.beta),
            sigma2: self.sigma2.max(other.sigma2),
            tau2: self.tau2.max(other.tau2),
        }
    }
}

/// With `floor = atol / rtol`, `error <= rtol` is the usual
/// `|a - b| <= max(rtol * max(|a|, |b|), atol)` test.
pub fn compare_gradients(a: &GradientSet, b: &GradientSet, floor: f64) -> GradientErrors {
    let scaled = |x: f64, y: f64| {
        let diff = (x - y).abs();
        if diff == 0.0 {
            0.0
        } else {
            diff / x.abs().max(y.abs()).max(floor)
        }
    };
    let block = |xs: &[f64], ys: &[f64]| {
        xs.iter()
            .zip(ys)
            .map(|(&x, &y)| scaled(x, y))
            .fold(0.0, f64::max)
    };
    GradientErrors {
        s: block(a.ds.as_slice(), b.ds.as_slice()),
        w: block(a.dw.as_slice(), b.dw.as_slice()),
        beta: block(a.dbeta.as_slice(), b.dbeta.as_slice()),
        sigma2: scaled(a.dsigma2, b.dsigma2),
        tau2: scaled(a.dtau2, b.dtau2),
    }
}
