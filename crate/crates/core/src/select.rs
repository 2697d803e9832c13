//! Latent-dimension selection, the PCA regression baseline and feature
//! ranking.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{Dataset, ModelParams};
use crate::optimizer::{fit, FitConfig};
use crate::simulate::{r_squared, rng_from_seed};

/// Mean test R² values closer than this count as a tie.
const TIE_TOL: f64 = 1e-12;
/// Smallest response-weight norm accepted by [`rank_features`].
const BETA_FLOOR: f64 = 1e-12;

/// A CV cell that produced no value.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellFailure {
    pub d: usize,
    pub fold: usize,
    pub stage: &'static str,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CVReport {
    pub d_grid: Vec<usize>,
    pub k: usize,
    /// `train_r2[i][j]` is the R² of grid entry `i` on fold `j`; `None` marks
    /// a failed or undefined cell.
    pub train_r2: Vec<Vec<Option<f64>>>,
    pub test_r2: Vec<Vec<Option<f64>>>,
    /// Mean over the defined test cells of each grid entry.
    pub mean_test_r2: Vec<Option<f64>>,
    /// R² of all out-of-fold predictions pooled together.
    pub pooled_test_r2: Vec<Option<f64>>,
    /// Selection statistic used for `best_d`: `"mean_test_r2"`, or
    /// `"pooled_test_r2"` when no per-fold test value is defined.
    pub criterion: &'static str,
    pub best_d: Option<usize>,
    pub failures: Vec<CellFailure>,
}

impl CVReport {
    /// Rows of `(d, fold, train_r2, test_r2)`.
    pub fn tidy_rows(&self) -> Vec<(usize, usize, Option<f64>, Option<f64>)> {
        let mut rows = Vec::new();
        for (i, &d) in self.d_grid.iter().enumerate() {
            for fold in 0..self.k {
                rows.push((d, fold, self.train_r2[i][fold], self.test_r2[i][fold]));
            }
        }
        rows
    }
}

struct CellOutcome {
    train: Option<f64>,
    test: Option<f64>,
    test_predictions: Option<Vec<f64>>,
    failures: Vec<CellFailure>,
}

fn run_cell(
    data: &Dataset,
    train_rows: &[usize],
    test_rows: &[usize],
    d: usize,
    fold: usize,
    config: &FitConfig,
) -> CellOutcome {
    let failure = |stage: &'static str, err: &Error| CellFailure {
        d,
        fold,
        stage,
        message: err.to_string(),
    };
    let train = data.select_foreground(train_rows);
    let test = data.select_foreground(test_rows);
    let cfg = FitConfig {
        d,
        ..config.clone()
    };
    let result = match fit(&train, &cfg) {
        Ok(r) => r,
        Err(e) => {
            return CellOutcome {
                train: None,
                test: None,
                test_predictions: None,
                failures: vec![failure("fit", &e)],
            }
        }
    };
    let mut failures = Vec::new();
    let mut score = |stage: &'static str, set: &Dataset| -> (Option<f64>, Option<Vec<f64>>) {
        match result.predict_means(&set.x) {
            Ok(pred) => match r_squared(&pred, set.r.as_slice()) {
                Ok(v) => (Some(v), Some(pred)),
                Err(e) => {
                    failures.push(failure(stage, &e));
                    (None, Some(pred))
                }
            },
            Err(e) => {
                failures.push(failure(stage, &e));
                (None, None)
            }
        }
    };
    let (train_r2, _) = score("train_r2", &train);
    let (test_r2, test_predictions) = score("test_r2", &test);
    CellOutcome {
        train: train_r2,
        test: test_r2,
        test_predictions,
        failures,
    }
}

fn mean_defined(values: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

/// Largest statistic; within [`TIE_TOL`] the earlier (smaller) d wins.
fn select_best(d_grid: &[usize], stats: &[Option<f64>]) -> Option<usize> {
    let mut order: Vec<usize> = (0..d_grid.len()).collect();
    order.sort_by_key(|&i| d_grid[i]);
    let mut best: Option<(usize, f64)> = None;
    for i in order {
        if let Some(v) = stats[i] {
            if best.is_none_or(|(_, b)| v > b + TIE_TOL) {
                best = Some((i, v));
            }
        }
    }
    best.map(|(i, _)| d_grid[i])
}

/// k-fold cross-validation of the latent dimension.
///
/// Foreground rows are shuffled with `config.seed` and dealt round-robin into
/// `k` folds; the whole background accompanies every training split. Cells
/// whose fit or R² fails are reported as `None` and listed in `failures`.
pub fn cross_validate(
    data: &Dataset,
    d_grid: &[usize],
    k: usize,
    config: &FitConfig,
) -> Result<CVReport> {
    if d_grid.is_empty() {
        return Err(Error::InvalidConfig("d_grid is empty".into()));
    }
    if let Some(&d) = d_grid.iter().find(|&&d| d == 0 || d > data.p()) {
        return Err(Error::InvalidConfig(format!(
            "grid value d = {d} outside 1..={}",
            data.p()
        )));
    }
    if k < 2 {
        return Err(Error::TooFewSamples(format!(
            "k = {k}, need at least 2 folds"
        )));
    }
    if data.n() < k {
        return Err(Error::TooFewSamples(format!(
            "{} foreground rows cannot fill {k} folds",
            data.n()
        )));
    }

    let mut perm: Vec<usize> = (0..data.n()).collect();
    perm.shuffle(&mut rng_from_seed(config.seed));
    let folds: Vec<Vec<usize>> = (0..k)
        .map(|f| perm.iter().copied().skip(f).step_by(k).collect())
        .collect();

    let cells: Vec<(usize, usize)> = (0..d_grid.len())
        .flat_map(|i| (0..k).map(move |f| (i, f)))
        .collect();
    let outcomes: Vec<CellOutcome> = cells
        .par_iter()
        .map(|&(i, f)| {
            let train_rows: Vec<usize> = (0..k)
                .filter(|&g| g != f)
                .flat_map(|g| folds[g].iter().copied())
                .collect();
            run_cell(data, &train_rows, &folds[f], d_grid[i], f, config)
        })
        .collect();

    let mut train_r2 = vec![vec![None; k]; d_grid.len()];
    let mut test_r2 = vec![vec![None; k]; d_grid.len()];
    let mut pooled_test_r2 = Vec::with_capacity(d_grid.len());
    let mut failures = Vec::new();
    let mut out_of_fold: Vec<Vec<Option<f64>>> = vec![vec![None; data.n()]; d_grid.len()];
    for (&(i, f), outcome) in cells.iter().zip(outcomes) {
        train_r2[i][f] = outcome.train;
        test_r2[i][f] = outcome.test;
        if let Some(pred) = outcome.test_predictions {
            for (&row, v) in folds[f].iter().zip(pred) {
                out_of_fold[i][row] = Some(v);
            }
        }
        failures.extend(outcome.failures);
    }
    for (i, preds) in out_of_fold.iter().enumerate() {
        let pooled = if preds.iter().all(Option::is_some) {
            let preds: Vec<f64> = preds.iter().flatten().copied().collect();
            match r_squared(&preds, data.r.as_slice()) {
                Ok(v) => Some(v),
                Err(e) => {
                    failures.push(CellFailure {
                        d: d_grid[i],
                        fold: k,
                        stage: "pooled_test_r2",
                        message: e.to_string(),
                    });
                    None
                }
            }
        } else {
            None
        };
        pooled_test_r2.push(pooled);
    }

    let mean_test_r2: Vec<Option<f64>> = test_r2.iter().map(|row| mean_defined(row)).collect();
    let (criterion, best_d) = if mean_test_r2.iter().any(Option::is_some) {
        ("mean_test_r2", select_best(d_grid, &mean_test_r2))
    } else {
        ("pooled_test_r2", select_best(d_grid, &pooled_test_r2))
    };
    Ok(CVReport {
        d_grid: d_grid.to_vec(),
        k,
        train_r2,
        test_r2,
        mean_test_r2,
        pooled_test_r2,
        criterion,
        best_d,
        failures,
    })
}

/// Predictions from ordinary least squares on the top-d principal component
/// scores of the centered foreground.
pub fn pca_linear_baseline(train: &Dataset, test_x: &DMatrix<f64>, d: usize) -> Result<Vec<f64>> {
    let p = train.p();
    if d == 0 || d > p {
        return Err(Error::InvalidConfig(format!("d = {d} outside 1..={p}")));
    }
    if test_x.ncols() != p {
        return Err(Error::shape(format!(
            "test input has {} columns, training data has p = {p}",
            test_x.ncols()
        )));
    }
    if train.n() == 0 {
        return Err(Error::DegenerateData("no foreground samples".into()));
    }
    let mean_x = train.x.row_mean().transpose();
    let mean_r = train.r.mean();
    let xc = DMatrix::from_fn(train.n(), p, |i, j| train.x[(i, j)] - mean_x[j]);
    let svd = xc.clone().svd(false, true);
    let v_t = svd.v_t.expect("right singular vectors requested");
    let mut idx: Vec<usize> = (0..svd.singular_values.len()).collect();
    idx.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let top = svd.singular_values[idx[0]];
    let nonzero = idx
        .iter()
        .filter(|&&i| svd.singular_values[i] > 1e-12 * top.max(f64::MIN_POSITIVE))
        .count();
    if nonzero < d {
        return Err(Error::RankDeficiency(format!(
            "centered foreground has {nonzero} nonzero singular values, need d = {d}"
        )));
    }
    let basis = DMatrix::from_fn(p, d, |i, k| v_t[(idx[k], i)]);
    let scores = &xc * &basis;
    let rc = train.r.add_scalar(-mean_r);
    let coef = scores
        .clone()
        .svd(true, true)
        .solve(&rc, 0.0)
        .map_err(|e| Error::RankDeficiency(e.to_string()))?;
    let test_scores =
        DMatrix::from_fn(test_x.nrows(), p, |i, j| test_x[(i, j)] - mean_x[j]) * &basis;
    let pred: DVector<f64> = test_scores * coef;
    Ok(pred.iter().map(|v| v + mean_r).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeatureRanking {
    /// Selected latent dimension, 1-based.
    pub component_index: usize,
    /// Selected column of W, one entry per feature.
    pub scores: Vec<f64>,
    /// 1-based feature indices by decreasing |score|, ties to the lower index.
    pub order: Vec<usize>,
    pub names: Option<Vec<String>>,
}

/// Ranks features by their loading on the response-linked latent dimension.
///
/// With `canonical`, (W, β) is first rotated so that β lies along the first
/// axis; the selected column is then Wβ/‖β‖ and the ranking does not depend
/// on the rotation of the fitted latent space. Without it, the column of W
/// with the largest |β_k| is used as fitted.
pub fn rank_features(
    params: &ModelParams,
    names: Option<&[String]>,
    canonical: bool,
) -> Result<FeatureRanking> {
    params.check_shapes()?;
    let p = params.p();
    if let Some(names) = names {
        if names.len() != p {
            return Err(Error::shape(format!(
                "{} feature names for p = {p}",
                names.len()
            )));
        }
    }
    let norm = params.beta.norm();
    if !(norm >= BETA_FLOOR) {
        return Err(Error::ZeroBeta { norm });
    }
    let (component_index, scores) = if canonical {
        (1, &params.w * &params.beta / norm)
    } else {
        let mut best = 0;
        for k in 1..params.d() {
            if params.beta[k].abs() > params.beta[best].abs() {
                best = k;
            }
        }
        (best + 1, params.w.column(best).into_owned())
    };
    let scores: Vec<f64> = scores.iter().copied().collect();
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| scores[b].abs().total_cmp(&scores[a].abs()).then(a.cmp(&b)));
    Ok(FeatureRanking {
        component_index,
        scores,
        order: order.into_iter().map(|i| i + 1).collect(),
        names: names.map(<[String]>::to_vec),
    })
}
