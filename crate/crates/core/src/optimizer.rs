//! Maximum-likelihood fitting by gradient ascent.
//!
//! Variances are optimized on the log scale. Each restart runs on its own
//! ChaCha stream derived from the configured seed, so results do not depend
//! on how restarts are scheduled across threads.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{build_workspace, Dataset, ModelParams, Objective, PredictiveDist};
use crate::simulate::{normal_matrix, rng_from_seed};

/// Smallest initial response variance.
pub const TAU2_FLOOR: f64 = 1e-6;
const INIT_SD: f64 = 0.1;
const MAX_HALVINGS: usize = 60;
const NONFINITE_SHRINKS: usize = 3;
/// Largest change of a log-variance per iteration.
const MAX_LOG_VAR_MOVE: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Steepest ascent with backtracking; every accepted step increases the
    /// objective.
    LineSearchAscent,
    /// Adam-style first/second moment step adaptation.
    AdaptiveMoment,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    RandomNormal,
    PcaWarmStart,
}

#[derive(Debug, Clone)]
pub struct FitConfig {
    pub d: usize,
    pub alpha: f64,
    /// Stop once `|l_k - l_{k-1}| / (|l_{k-1}| + 1) < tol`.
    pub tol: f64,
    pub max_iter: usize,
    pub mode: Mode,
    pub step0: f64,
    pub restarts: usize,
    pub seed: u64,
    pub init: Init,
}

impl FitConfig {
    pub fn new(d: usize) -> Self {
        FitConfig {
            d,
            alpha: 1.0,
            tol: 1e-4,
            max_iter: 5000,
            mode: Mode::LineSearchAscent,
            step0: 1e-2,
            restarts: 3,
            seed: 0,
            init: Init::PcaWarmStart,
        }
    }

    pub fn validate(&self, p: usize) -> Result<()> {
        if self.d == 0 || self.d > p {
            return Err(Error::InvalidConfig(format!(
                "latent dimension d = {} must be in 1..={p}",
                self.d
            )));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "tol must be positive, got {}",
                self.tol
            )));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidConfig("max_iter must be at least 1".into()));
        }
        if !(self.step0 > 0.0 && self.step0.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "step0 must be positive, got {}",
                self.step0
            )));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "alpha must be nonnegative, got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: ModelParams,
    /// Column offsets subtracted from foreground and background before fitting.
    pub center_x: DVector<f64>,
    pub center_r: f64,
    /// Objective after every iteration of the selected restart, starting with
    /// the initial point.
    pub ll_trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub best_restart: usize,
    /// Final objective of every restart (`None` when a restart failed).
    pub restart_objectives: Vec<Option<f64>>,
    /// Sup-norm of the unconstrained gradient at the returned parameters.
    pub grad_norm_inf: f64,
    pub alpha: f64,
    pub seed: u64,
    pub wall_time_seconds: f64,
}

impl FitResult {
    pub fn final_ll(&self) -> f64 {
        *self
            .ll_trace
            .last()
            .expect("trace holds the initial objective")
    }

    /// Predictive distributions for raw (uncentered) rows.
    pub fn predict(&self, x: &DMatrix<f64>) -> Result<Vec<PredictiveDist>> {
        predict_centered(&self.params, &self.center_x, self.center_r, x)
    }

    pub fn predict_means(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        Ok(self.predict(x)?.into_iter().map(|d| d.mean).collect())
    }
}

/// Applies stored centering offsets around the model's predictive law.
pub fn predict_centered(
    params: &ModelParams,
    center_x: &DVector<f64>,
    center_r: f64,
    x: &DMatrix<f64>,
) -> Result<Vec<PredictiveDist>> {
    if x.ncols() != params.p() || center_x.len() != params.p() {
        return Err(Error::shape(format!(
            "input has {} columns, model has p = {}",
            x.ncols(),
            params.p()
        )));
    }
    let ws = build_workspace(params)?;
    let centered = DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] - center_x[j]);
    let means = ws.predict_rows(&centered)?;
    Ok(means
        .iter()
        .map(|&mu| PredictiveDist {
            mean: mu + center_r,
            variance: ws.pred_var,
        })
        .collect())
}

/// Foreground/background column means pooled with background weight `alpha`.
fn pooled_center(data: &Dataset, alpha: f64) -> DVector<f64> {
    let p = data.p();
    let weight = data.n() as f64
        + if alpha > 0.0 {
            alpha * data.m() as f64
        } else {
            0.0
        };
    let mut total = DVector::zeros(p);
    for row in data.x.row_iter() {
        total += row.transpose();
    }
    if alpha > 0.0 {
        for row in data.y.row_iter() {
            total += row.transpose() * alpha;
        }
    }
    if weight > 0.0 {
        total / weight
    } else {
        total
    }
}

fn center_rows(mat: &DMatrix<f64>, center: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(mat.nrows(), mat.ncols(), |i, j| mat[(i, j)] - center[j])
}

struct InitStats {
    /// Per-feature variance pooled over foreground and alpha-weighted background.
    pooled_var: f64,
    resp_var: f64,
}

fn init_stats(data: &Dataset, alpha: f64) -> Result<InitStats> {
    if data.n() == 0 {
        return Err(Error::DegenerateData("no foreground samples".into()));
    }
    let center = pooled_center(data, alpha);
    let use_bg = alpha > 0.0 && data.m() > 0;
    let weight = data.n() as f64 + if use_bg { alpha * data.m() as f64 } else { 0.0 };
    let mut ss = center_rows(&data.x, &center).norm_squared();
    if use_bg {
        ss += alpha * center_rows(&data.y, &center).norm_squared();
    }
    let pooled_var = ss / (weight * data.p() as f64);
    if !(pooled_var > 0.0) {
        return Err(Error::DegenerateData(
            "all feature columns are constant".into(),
        ));
    }
    let r_mean = data.r.mean();
    let resp_var = data.r.iter().map(|v| (v - r_mean).powi(2)).sum::<f64>() / data.n() as f64;
    Ok(InitStats {
        pooled_var,
        resp_var,
    })
}

fn top_right_singular(mat: &DMatrix<f64>, d: usize) -> (DMatrix<f64>, Vec<f64>) {
    let p = mat.ncols();
    // eigen-decomposition of the smaller Gram matrix
    let (vecs, vals) = if mat.nrows() >= p {
        let eig = (mat.transpose() * mat).symmetric_eigen();
        (eig.eigenvectors, eig.eigenvalues)
    } else {
        let eig = (mat * mat.transpose()).symmetric_eigen();
        let right = mat.transpose() * &eig.eigenvectors;
        (right, eig.eigenvalues)
    };
    let mut order: Vec<usize> = (0..vals.len()).collect();
    order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]).then(a.cmp(&b)));
    let mut basis = DMatrix::zeros(p, d);
    let mut singular = vec![0.0; d];
    let top = vals.iter().cloned().fold(0.0, f64::max);
    for (k, &idx) in order.iter().take(d).enumerate() {
        let sv = vals[idx].max(0.0).sqrt();
        if sv * sv <= 1e-12 * top || sv == 0.0 {
            continue;
        }
        let mut col = vecs.column(idx).into_owned();
        col /= col.norm();
        // deterministic sign: largest-magnitude entry positive
        let lead = col
            .iter()
            .cloned()
            .fold(0.0f64, |a, v| if v.abs() > a.abs() { v } else { a });
        if lead < 0.0 {
            col = -col;
        }
        basis.set_column(k, &col);
        singular[k] = sv;
    }
    (basis, singular)
}

fn pca_start(data: &Dataset, alpha: f64, d: usize, stats: &InitStats) -> ModelParams {
    let p = data.p();
    let center = pooled_center(data, alpha);
    let xc = center_rows(&data.x, &center);
    let use_bg = alpha > 0.0 && data.m() > 0;
    let pooled = if use_bg {
        let yc = center_rows(&data.y, &center) * alpha.sqrt();
        let mut stacked = DMatrix::zeros(xc.nrows() + yc.nrows(), p);
        stacked.rows_mut(0, xc.nrows()).copy_from(&xc);
        stacked.rows_mut(xc.nrows(), yc.nrows()).copy_from(&yc);
        stacked
    } else {
        xc.clone()
    };
    let weight = data.n() as f64 + if use_bg { alpha * data.m() as f64 } else { 0.0 };

    let (s_basis, s_sv) = top_right_singular(&pooled, d);
    let mut s = s_basis.clone();
    for (k, sv) in s_sv.iter().enumerate() {
        s.column_mut(k).scale_mut(sv / weight.sqrt());
    }
    let resid = &xc - (&xc * &s_basis) * s_basis.transpose();
    let (w_basis, w_sv) = top_right_singular(&resid, d);
    let mut w = w_basis;
    for (k, sv) in w_sv.iter().enumerate() {
        w.column_mut(k).scale_mut(sv / (data.n() as f64).sqrt());
    }
    ModelParams {
        s,
        w,
        beta: DVector::zeros(d),
        sigma2: 0.5 * stats.pooled_var,
        tau2: (0.5 * stats.resp_var).max(TAU2_FLOOR),
    }
}

fn random_start(rng: &mut ChaCha8Rng, p: usize, d: usize, stats: &InitStats) -> ModelParams {
    let s = normal_matrix(rng, p, d, INIT_SD);
    let w = normal_matrix(rng, p, d, INIT_SD);
    let beta = DVector::from_iterator(
        d,
        (0..d).map(|_| INIT_SD * rng.sample::<f64, _>(StandardNormal)),
    );
    ModelParams {
        s,
        w,
        beta,
        sigma2: 0.5 * stats.pooled_var,
        tau2: (0.5 * stats.resp_var).max(TAU2_FLOOR),
    }
}

fn restart_rng(seed: u64, restart: usize) -> ChaCha8Rng {
    let mut rng = rng_from_seed(seed);
    rng.set_stream(restart as u64);
    rng
}

/// Starting point for restart `restart`. Restart 0 is the configured
/// initializer; later warm-start restarts jitter the loadings.
fn initialize_restart(data: &Dataset, config: &FitConfig, restart: usize) -> Result<ModelParams> {
    config.validate(data.p())?;
    let stats = init_stats(data, config.alpha)?;
    let mut rng = restart_rng(config.seed, restart);
    let p = data.p();
    let d = config.d;
    Ok(match config.init {
        Init::RandomNormal => random_start(&mut rng, p, d, &stats),
        Init::PcaWarmStart => {
            let mut params = pca_start(data, config.alpha, d, &stats);
            if restart > 0 {
                let sd = INIT_SD * stats.pooled_var.sqrt();
                params.s += normal_matrix(&mut rng, p, d, sd);
                params.w += normal_matrix(&mut rng, p, d, sd);
                params.beta += normal_matrix(&mut rng, d, 1, INIT_SD).column(0);
            }
            params
        }
    })
}

/// Initial parameters for `data` under `config` (first restart).
pub fn initialize(data: &Dataset, config: &FitConfig) -> Result<ModelParams> {
    initialize_restart(data, config, 0)
}

struct RunOutcome {
    params: ModelParams,
    trace: Vec<f64>,
    converged: bool,
    iterations: usize,
    grad_norm_inf: f64,
}

fn relative_change(new: f64, old: f64) -> f64 {
    (new - old).abs() / (old.abs() + 1.0)
}

/// Largest step along `g` that keeps each log-variance within
/// `MAX_LOG_VAR_MOVE` and every loading within the current loading scale.
/// Coordinate ranges of S, W, beta and the two log-variances.
fn blocks(p: usize, d: usize) -> [std::ops::Range<usize>; 5] {
    let pd = p * d;
    let k = 2 * pd + d;
    [0..pd, pd..2 * pd, 2 * pd..k, k..k + 1, k + 1..k + 2]
}

/// Largest admissible step for one block: loadings move by at most their
/// current scale (or 1), log-variances by `MAX_LOG_VAR_MOVE`.
fn block_limit(
    u: &DVector<f64>,
    g: &DVector<f64>,
    range: std::ops::Range<usize>,
    var: bool,
) -> f64 {
    let g_scale = range.clone().map(|i| g[i].abs()).fold(0.0, f64::max);
    if g_scale == 0.0 {
        return f64::INFINITY;
    }
    if var {
        MAX_LOG_VAR_MOVE / g_scale
    } else {
        range.map(|i| u[i].abs()).fold(1.0, f64::max) / g_scale
    }
}

fn line_search_ascent(
    objective: &Objective,
    start: ModelParams,
    config: &FitConfig,
) -> Result<RunOutcome> {
    let (p, d) = (start.p(), start.d());
    let (mut f, grad) = objective.value_and_gradient(&start)?;
    if !f.is_finite() {
        return Err(Error::NonFiniteObjective { shrinks: 0 });
    }
    let ranges = blocks(p, d);
    let mut params = start;
    let mut u = params.to_unconstrained();
    let mut g = grad.to_unconstrained(&params);
    // one Barzilai-Borwein step per parameter block
    let mut steps = [config.step0; 5];
    let mut trace = vec![f];
    let mut converged = false;
    let mut iterations = 0;

    while iterations < config.max_iter {
        for (b, range) in ranges.iter().enumerate() {
            steps[b] = steps[b].min(block_limit(&u, &g, range.clone(), b >= 3));
        }
        let mut direction = g.clone();
        for (b, range) in ranges.iter().enumerate() {
            direction
                .rows_mut(range.start, range.len())
                .scale_mut(steps[b]);
        }
        let mut accepted = None;
        let mut shrink = 1.0;
        for _ in 0..=MAX_HALVINGS {
            let cand_u = &u + &direction * shrink;
            let cand = ModelParams::from_unconstrained(p, d, &cand_u);
            if let Ok(val) = objective.value(&cand) {
                if val.is_finite() && val > f {
                    accepted = Some((cand_u, cand));
                    break;
                }
            }
            shrink *= 0.5;
        }
        let Some((cand_u, cand)) = accepted else {
            // no ascent at floating-point resolution: stationary point
            converged = true;
            break;
        };
        let (val, grad) = objective.value_and_gradient(&cand)?;
        iterations += 1;
        let change = relative_change(val, f);
        let g_next = grad.to_unconstrained(&cand);
        let s_k = &cand_u - &u;
        let y_k = &g_next - &g;
        for (b, range) in ranges.iter().enumerate() {
            let s_b = s_k.rows(range.start, range.len());
            let y_b = y_k.rows(range.start, range.len());
            let sy = s_b.dot(&y_b);
            let ss = s_b.norm_squared();
            steps[b] = if sy < 0.0 && ss > 0.0 {
                ss / -sy
            } else {
                steps[b] * shrink * 2.0
            };
        }
        g = g_next;
        u = cand_u;
        params = cand;
        f = val;
        trace.push(f);
        if change < config.tol {
            converged = true;
            break;
        }
    }
    Ok(RunOutcome {
        grad_norm_inf: g.amax(),
        params,
        trace,
        converged,
        iterations,
    })
}

fn adaptive_moment(
    objective: &Objective,
    start: ModelParams,
    config: &FitConfig,
) -> Result<RunOutcome> {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;
    let (p, d) = (start.p(), start.d());
    let (mut f, grad) = objective.value_and_gradient(&start)?;
    if !f.is_finite() {
        return Err(Error::NonFiniteObjective { shrinks: 0 });
    }
    let mut params = start;
    let mut u = params.to_unconstrained();
    let mut g = grad.to_unconstrained(&params);
    let mut m1 = DVector::zeros(u.len());
    let mut m2 = DVector::zeros(u.len());
    let mut lr = config.step0;
    let mut shrinks = 0;
    let mut trace = vec![f];
    let mut converged = false;
    let mut iterations = 0;
    let mut t = 0i32;

    while iterations < config.max_iter {
        t += 1;
        let m1_next = &m1 * BETA1 + &g * (1.0 - BETA1);
        let m2_next = &m2 * BETA2 + g.component_mul(&g) * (1.0 - BETA2);
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        let update = m1_next.zip_map(&m2_next, |a, b| (a / c1) / ((b / c2).sqrt() + EPS));
        let cand_u = &u + update * lr;
        let cand = ModelParams::from_unconstrained(p, d, &cand_u);
        let eval = objective
            .value_and_gradient(&cand)
            .ok()
            .filter(|(v, gr)| v.is_finite() && gr.is_finite());
        let Some((val, grad)) = eval else {
            shrinks += 1;
            if shrinks > NONFINITE_SHRINKS {
                return Err(Error::NonFiniteObjective {
                    shrinks: NONFINITE_SHRINKS,
                });
            }
            lr *= 0.1;
            t -= 1;
            continue;
        };
        iterations += 1;
        m1 = m1_next;
        m2 = m2_next;
        let change = relative_change(val, f);
        g = grad.to_unconstrained(&cand);
        u = cand_u;
        params = cand;
        f = val;
        trace.push(f);
        if change < config.tol {
            converged = true;
            break;
        }
    }
    Ok(RunOutcome {
        grad_norm_inf: g.amax(),
        params,
        trace,
        converged,
        iterations,
    })
}

/// Fits the model by maximum likelihood.
///
/// Foreground and background are centered with the alpha-weighted pooled
/// column mean and the responses with their mean; the offsets are kept in
/// the result and applied by [`FitResult::predict`].
pub fn fit(data: &Dataset, config: &FitConfig) -> Result<FitResult> {
    let started = Instant::now();
    config.validate(data.p())?;
    if data.n() == 0 {
        return Err(Error::DegenerateData("no foreground samples".into()));
    }
    let center_x = pooled_center(data, config.alpha);
    let center_r = data.r.mean();
    let centered = Dataset {
        x: center_rows(&data.x, &center_x),
        r: data.r.add_scalar(-center_r),
        y: if config.alpha > 0.0 {
            center_rows(&data.y, &center_x)
        } else {
            DMatrix::zeros(0, data.p())
        },
        feature_names: None,
    };
    let objective = Objective::new(&centered, config.alpha)?;

    let runs: Vec<Result<RunOutcome>> = (0..=config.restarts)
        .into_par_iter()
        .map(|restart| {
            let start = initialize_restart(&centered, config, restart)?;
            match config.mode {
                Mode::LineSearchAscent => line_search_ascent(&objective, start, config),
                Mode::AdaptiveMoment => adaptive_moment(&objective, start, config),
            }
        })
        .collect();

    let restart_objectives: Vec<Option<f64>> = runs
        .iter()
        .map(|run| run.as_ref().ok().map(|o| *o.trace.last().unwrap()))
        .collect();
    let mut best: Option<usize> = None;
    for (i, obj) in restart_objectives.iter().enumerate() {
        if let Some(v) = obj {
            if best.is_none_or(|b| *v > restart_objectives[b].unwrap()) {
                best = Some(i);
            }
        }
    }
    let Some(best) = best else {
        let mut runs = runs;
        return Err(runs.swap_remove(0).err().expect("every restart failed"));
    };
    let outcome = runs
        .into_iter()
        .nth(best)
        .expect("best index in range")
        .expect("best restart succeeded");

    Ok(FitResult {
        params: outcome.params,
        center_x,
        center_r,
        ll_trace: outcome.trace,
        converged: outcome.converged,
        iterations: outcome.iterations,
        best_restart: best,
        restart_objectives,
        grad_norm_inf: outcome.grad_norm_inf,
        alpha: config.alpha,
        seed: config.seed,
        wall_time_seconds: started.elapsed().as_secs_f64(),
    })
}
