//! Model types and the closed-form quantities of the contrastive regression
//! model
//!
//! ```text
//! x = S z_a + W t + eps_a        (foreground, n rows)
//! y = S z_b + eps_b              (background, m rows)
//! r = beta' t + eta              (foreground response)
//! ```
//!
//! with `z_a, z_b, t ~ N(0, I_d)`, `eps ~ N(0, sigma2 I_p)` and
//! `eta ~ N(0, tau2)`.

mod gradient;
mod residuals;
mod workspace;

pub use gradient::{
    compare_gradients, finite_diff_gradient, grad_log_likelihood, GradientErrors, GradientSet,
    Objective,
};
pub use residuals::{contrastive_residuals, contrastive_residuals_with, ResidualMode};
pub use workspace::{
    build_workspace, latent_posterior, log_likelihood, predict, LatentPosterior, PredictiveDist,
    Workspace,
};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Parameter bundle `(S, W, beta, sigma2, tau2)`.
///
/// `p` and `d` are carried by the shapes of `s` and `w`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// Shared loadings, p x d.
    pub s: DMatrix<f64>,
    /// Foreground-specific loadings, p x d.
    pub w: DMatrix<f64>,
    pub beta: DVector<f64>,
    pub sigma2: f64,
    pub tau2: f64,
}

impl ModelParams {
    pub fn new(
        s: DMatrix<f64>,
        w: DMatrix<f64>,
        beta: DVector<f64>,
        sigma2: f64,
        tau2: f64,
    ) -> Result<Self> {
        let params = ModelParams {
            s,
            w,
            beta,
            sigma2,
            tau2,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn p(&self) -> usize {
        self.s.nrows()
    }

    pub fn d(&self) -> usize {
        self.s.ncols()
    }

    /// Checks shapes only: S and W agree, beta has length d, d <= p.
    pub fn check_shapes(&self) -> Result<()> {
        if self.s.shape() != self.w.shape() {
            return Err(Error::shape(format!(
                "S is {:?} but W is {:?}",
                self.s.shape(),
                self.w.shape()
            )));
        }
        if self.beta.len() != self.d() {
            return Err(Error::shape(format!(
                "beta has length {} but d = {}",
                self.beta.len(),
                self.d()
            )));
        }
        if self.p() == 0 || self.d() == 0 || self.d() > self.p() {
            return Err(Error::shape(format!(
                "need 1 <= d <= p, got p = {}, d = {}",
                self.p(),
                self.d()
            )));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.check_shapes()?;
        if !(self.sigma2 > 0.0 && self.sigma2.is_finite()) {
            return Err(Error::InvalidParams(format!(
                "sigma2 must be positive and finite, got {}",
                self.sigma2
            )));
        }
        if !(self.tau2 > 0.0 && self.tau2.is_finite()) {
            return Err(Error::InvalidParams(format!(
                "tau2 must be positive and finite, got {}",
                self.tau2
            )));
        }
        let finite = self.s.iter().chain(self.w.iter()).chain(self.beta.iter());
        if finite.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParams(
                "non-finite loading or coefficient".into(),
            ));
        }
        Ok(())
    }

    /// Number of free coordinates: `2pd + d + 2`.
    pub fn n_coords(&self) -> usize {
        2 * self.p() * self.d() + self.d() + 2
    }

    /// Flattens to the unconstrained parameterization
    /// `(vec S, vec W, beta, ln sigma2, ln tau2)`, column-major.
    pub fn to_unconstrained(&self) -> DVector<f64> {
        let mut out = Vec::with_capacity(self.n_coords());
        out.extend(self.s.iter());
        out.extend(self.w.iter());
        out.extend(self.beta.iter());
        out.push(self.sigma2.ln());
        out.push(self.tau2.ln());
        DVector::from_vec(out)
    }

    pub fn from_unconstrained(p: usize, d: usize, u: &DVector<f64>) -> Self {
        assert_eq!(u.len(), 2 * p * d + d + 2, "unconstrained vector length");
        let pd = p * d;
        let s = DMatrix::from_column_slice(p, d, &u.as_slice()[..pd]);
        let w = DMatrix::from_column_slice(p, d, &u.as_slice()[pd..2 * pd]);
        let beta = DVector::from_column_slice(&u.as_slice()[2 * pd..2 * pd + d]);
        ModelParams {
            s,
            w,
            beta,
            sigma2: u[2 * pd + d].exp(),
            tau2: u[2 * pd + d + 1].exp(),
        }
    }
}

/// Foreground observations with responses plus background observations.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Foreground, n x p.
    pub x: DMatrix<f64>,
    /// Foreground responses, length n.
    pub r: DVector<f64>,
    /// Background, m x p.
    pub y: DMatrix<f64>,
    pub feature_names: Option<Vec<String>>,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, r: DVector<f64>, y: DMatrix<f64>) -> Result<Self> {
        if x.ncols() != y.ncols() {
            return Err(Error::shape(format!(
                "foreground has {} columns, background has {}",
                x.ncols(),
                y.ncols()
            )));
        }
        if r.len() != x.nrows() {
            return Err(Error::shape(format!(
                "{} responses for {} foreground rows",
                r.len(),
                x.nrows()
            )));
        }
        if x.iter()
            .chain(r.iter())
            .chain(y.iter())
            .any(|v| !v.is_finite())
        {
            return Err(Error::DegenerateData("non-finite entry in dataset".into()));
        }
        Ok(Dataset {
            x,
            r,
            y,
            feature_names: None,
        })
    }

    pub fn with_feature_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.p() {
            return Err(Error::shape(format!(
                "{} feature names for {} columns",
                names.len(),
                self.p()
            )));
        }
        self.feature_names = Some(names);
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn m(&self) -> usize {
        self.y.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    /// Foreground subset by row index; the background is kept whole.
    pub fn select_foreground(&self, rows: &[usize]) -> Dataset {
        let x = self.x.select_rows(rows);
        let r = DVector::from_iterator(rows.len(), rows.iter().map(|&i| self.r[i]));
        Dataset {
            x,
            r,
            y: self.y.clone(),
            feature_names: self.feature_names.clone(),
        }
    }

    pub(crate) fn check_params(&self, params: &ModelParams) -> Result<()> {
        params.check_shapes()?;
        if params.p() != self.p() {
            return Err(Error::shape(format!(
                "model has p = {} but data has {} columns",
                params.p(),
                self.p()
            )));
        }
        Ok(())
    }
}

/// One draw of the latent and noise variables behind a foreground/background
/// sample pair.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub z_a: DVector<f64>,
    pub z_b: DVector<f64>,
    pub t: DVector<f64>,
    pub eps_a: DVector<f64>,
    pub eps_b: DVector<f64>,
    pub eta: f64,
}
