use nalgebra::DMatrix;

use super::ModelParams;
use crate::error::{Error, Result};

/// How to treat shared loadings without full column rank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ResidualMode {
    /// Reject rank-deficient S.
    #[default]
    Strict,
    /// Project onto the numerical column span of S (minimum-norm solution).
    MinimumNorm,
}

/// Rows of `x` minus their least-squares reconstruction from the columns of S.
pub fn contrastive_residuals(params: &ModelParams, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    contrastive_residuals_with(params, x, ResidualMode::Strict)
}

pub fn contrastive_residuals_with(
    params: &ModelParams,
    x: &DMatrix<f64>,
    mode: ResidualMode,
) -> Result<DMatrix<f64>> {
    params.check_shapes()?;
    if x.ncols() != params.p() {
        return Err(Error::shape(format!(
            "input has {} columns, model has p = {}",
            x.ncols(),
            params.p()
        )));
    }
    let s = &params.s;
    let scale = s.norm_squared();
    let svd = s.clone().svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    // singular values of S'S are the squared singular values of S
    let keep: Vec<usize> = svd
        .singular_values
        .iter()
        .enumerate()
        .filter(|(_, &sv)| scale > 0.0 && sv * sv > 1e-12 * scale)
        .map(|(i, _)| i)
        .collect();
    if keep.len() < params.d() && mode == ResidualMode::Strict {
        return Err(Error::RankDeficiency(format!(
            "S'S is singular: numerical rank {} < d = {}",
            keep.len(),
            params.d()
        )));
    }
    if keep.is_empty() {
        return Ok(x.clone());
    }
    let basis = u.select_columns(&keep);
    let coords = x * &basis;
    Ok(x - coords * basis.transpose())
}
