//! Synthetic data from the generative model, estimation-error metrics and
//! the corrupted-lines image analog.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{Dataset, LatentState, ModelParams};

pub const DEFAULT_SIGMA2: f64 = 0.25;
pub const DEFAULT_TAU2: f64 = 0.25;

#[derive(Debug, Clone)]
pub struct GenConfig {
    pub n: usize,
    pub m: usize,
    pub p: usize,
    pub d: usize,
    pub seed: u64,
    /// Ground truth. When absent it is drawn: S, W, beta entries ~ N(0, 1),
    /// sigma2 = tau2 = 0.25. Zero variances are accepted here.
    pub truth: Option<ModelParams>,
}

impl GenConfig {
    pub fn new(n: usize, m: usize, p: usize, d: usize, seed: u64) -> Self {
        GenConfig {
            n,
            m,
            p,
            d,
            seed,
            truth: None,
        }
    }
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub(crate) fn normal_matrix<R: Rng>(
    rng: &mut R,
    rows: usize,
    cols: usize,
    sd: f64,
) -> DMatrix<f64> {
    // fill row by row so the draw order is independent of storage order
    let mut out = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            out[(i, j)] = sd * rng.sample::<f64, _>(StandardNormal);
        }
    }
    out
}

fn normal_vector<R: Rng>(rng: &mut R, len: usize, sd: f64) -> DVector<f64> {
    DVector::from_iterator(
        len,
        (0..len).map(|_| sd * rng.sample::<f64, _>(StandardNormal)),
    )
}

/// Truth drawn the way [`generate`] draws it when none is supplied.
pub fn draw_truth<R: Rng>(rng: &mut R, p: usize, d: usize) -> ModelParams {
    let s = normal_matrix(rng, p, d, 1.0);
    let w = normal_matrix(rng, p, d, 1.0);
    let beta = normal_vector(rng, d, 1.0);
    ModelParams {
        s,
        w,
        beta,
        sigma2: DEFAULT_SIGMA2,
        tau2: DEFAULT_TAU2,
    }
}

fn draw_latent<R: Rng>(rng: &mut R, p: usize, d: usize, truth: &ModelParams) -> LatentState {
    let sd_eps = truth.sigma2.sqrt();
    LatentState {
        z_a: normal_vector(rng, d, 1.0),
        z_b: normal_vector(rng, d, 1.0),
        t: normal_vector(rng, d, 1.0),
        eps_a: normal_vector(rng, p, sd_eps),
        eps_b: normal_vector(rng, p, sd_eps),
        eta: truth.tau2.sqrt() * rng.sample::<f64, _>(StandardNormal),
    }
}

/// Draws `n` foreground and `m` background samples. Sample `i` consumes one
/// [`LatentState`] whose `z_a, t, eps_a, eta` feed the foreground (for
/// `i < n`) and whose `z_b, eps_b` feed the background (for `i < m`).
pub fn generate(config: &GenConfig) -> Result<(Dataset, ModelParams)> {
    let GenConfig {
        n, m, p, d, seed, ..
    } = *config;
    if p == 0 || d == 0 || d > p {
        return Err(Error::InvalidConfig(format!(
            "need 1 <= d <= p, got p = {p}, d = {d}"
        )));
    }
    let mut rng = rng_from_seed(seed);
    let truth = match &config.truth {
        Some(t) => {
            t.check_shapes()?;
            if t.p() != p || t.d() != d {
                return Err(Error::shape(format!(
                    "truth is p = {}, d = {} but config asks for p = {p}, d = {d}",
                    t.p(),
                    t.d()
                )));
            }
            if !(t.sigma2 >= 0.0 && t.tau2 >= 0.0) {
                return Err(Error::InvalidParams("truth variances must be >= 0".into()));
            }
            t.clone()
        }
        None => draw_truth(&mut rng, p, d),
    };

    let mut x = DMatrix::zeros(n, p);
    let mut r = DVector::zeros(n);
    let mut y = DMatrix::zeros(m, p);
    for i in 0..n.max(m) {
        let state = draw_latent(&mut rng, p, d, &truth);
        if i < n {
            let xi = &truth.s * &state.z_a + &truth.w * &state.t + &state.eps_a;
            x.row_mut(i).copy_from(&xi.transpose());
            r[i] = truth.beta.dot(&state.t) + state.eta;
        }
        if i < m {
            let yi = &truth.s * &state.z_b + &state.eps_b;
            y.row_mut(i).copy_from(&yi.transpose());
        }
    }
    let names = (1..=p).map(|j| format!("x{j}")).collect();
    let data = Dataset::new(x, r, y)?.with_feature_names(names)?;
    Ok((data, truth))
}

/// A random evaluation point and dataset for gradient checks. The data come
/// from [`generate`] under a drawn truth; the evaluation point is an
/// independent draw with variances uniform on [0.3, 2].
pub fn random_instance(
    p: usize,
    d: usize,
    n: usize,
    m: usize,
    seed: u64,
) -> Result<(ModelParams, Dataset)> {
    let (data, _) = generate(&GenConfig::new(n, m, p, d, seed))?;
    let mut rng = rng_from_seed(seed);
    rng.set_stream(1);
    let mut params = draw_truth(&mut rng, p, d);
    params.sigma2 = rng.random_range(0.3..2.0);
    params.tau2 = rng.random_range(0.3..2.0);
    Ok((params, data))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ErrorReport {
    /// `| |beta_hat| - |beta| |`
    pub beta_err: f64,
    /// signed, estimate minus truth
    pub sigma2_err: f64,
    pub tau2_err: f64,
    /// `|S_hat S_hat' - S S'|_F / |S S'|_F`
    pub s_err: f64,
    pub w_err: f64,
}

/// Relative Frobenius distance between `U_hat U_hat'` and `U U'`.
pub fn subspace_error(estimate: &DMatrix<f64>, truth: &DMatrix<f64>) -> f64 {
    let gram_hat = estimate * estimate.transpose();
    let gram = truth * truth.transpose();
    let num = (gram_hat - &gram).norm();
    let den = gram.norm();
    if den > 0.0 {
        num / den
    } else if num == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

pub fn estimation_errors(estimate: &ModelParams, truth: &ModelParams) -> Result<ErrorReport> {
    estimate.check_shapes()?;
    truth.check_shapes()?;
    if estimate.s.shape() != truth.s.shape() {
        return Err(Error::shape(format!(
            "estimate is {:?}, truth is {:?}",
            estimate.s.shape(),
            truth.s.shape()
        )));
    }
    Ok(ErrorReport {
        beta_err: (estimate.beta.norm() - truth.beta.norm()).abs(),
        sigma2_err: estimate.sigma2 - truth.sigma2,
        tau2_err: estimate.tau2 - truth.tau2,
        s_err: subspace_error(&estimate.s, &truth.s),
        w_err: subspace_error(&estimate.w, &truth.w),
    })
}

/// Coefficient of determination `1 - SS_res / SS_tot`.
pub fn r_squared(predictions: &[f64], truth: &[f64]) -> Result<f64> {
    if predictions.len() != truth.len() {
        return Err(Error::shape(format!(
            "{} predictions for {} targets",
            predictions.len(),
            truth.len()
        )));
    }
    if truth.len() < 2 {
        return Err(Error::TooFewSamples(format!(
            "R^2 needs at least 2 points, got {}",
            truth.len()
        )));
    }
    let mean = truth.iter().sum::<f64>() / truth.len() as f64;
    let ss_tot: f64 = truth.iter().map(|t| (t - mean).powi(2)).sum();
    if ss_tot <= 0.0 {
        return Err(Error::ConstantTruth);
    }
    let ss_res: f64 = predictions
        .iter()
        .zip(truth)
        .map(|(p, t)| (t - p).powi(2))
        .sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Corrupted-lines analog: square images built from a shared family of smooth
/// textures; foreground images additionally carry a vertical line whose
/// height is the response.
#[derive(Debug, Clone)]
pub struct LinesConfig {
    pub image_side: usize,
    pub n_fg: usize,
    pub n_bg: usize,
    /// Number of smooth texture patterns shared by both groups.
    pub background_rank: usize,
    pub noise_sd: f64,
    pub line_column: usize,
    /// Pixel increment along the line.
    pub intensity: f64,
    /// Standard deviation of each texture coefficient.
    pub texture_scale: f64,
    pub seed: u64,
}

impl Default for LinesConfig {
    fn default() -> Self {
        LinesConfig {
            image_side: 28,
            n_fg: 300,
            n_bg: 300,
            background_rank: 2,
            noise_sd: 0.1,
            line_column: 14,
            intensity: 1.0,
            texture_scale: 3.0,
            seed: 0,
        }
    }
}

/// Unit-RMS plane waves with low random frequencies, row-major pixels.
fn texture_patterns<R: Rng>(rng: &mut R, side: usize, rank: usize) -> Vec<DVector<f64>> {
    let tau = std::f64::consts::TAU;
    (0..rank)
        .map(|_| {
            let fx = rng.random_range(0..=3) as f64;
            let fy = rng.random_range(1..=3) as f64;
            let phase = rng.random_range(0.0..tau);
            let mut pattern = DVector::from_fn(side * side, |k, _| {
                let (row, col) = ((k / side) as f64, (k % side) as f64);
                (tau * (fx * col + fy * row) / side as f64 + phase).cos()
            });
            let rms = (pattern.norm_squared() / (side * side) as f64).sqrt();
            pattern /= rms;
            pattern
        })
        .collect()
}

pub fn generate_lines(config: &LinesConfig) -> Result<Dataset> {
    let side = config.image_side;
    if side == 0 || config.line_column >= side {
        return Err(Error::InvalidConfig(format!(
            "line column {} outside a {side}-pixel image",
            config.line_column
        )));
    }
    if !(config.noise_sd >= 0.0 && config.texture_scale >= 0.0) {
        return Err(Error::InvalidConfig("scales must be nonnegative".into()));
    }
    let p = side * side;
    let mut rng = rng_from_seed(config.seed);
    let patterns = texture_patterns(&mut rng, side, config.background_rank);

    let draw_image = |rng: &mut ChaCha8Rng| {
        let mut img = DVector::zeros(p);
        for pattern in &patterns {
            let c: f64 = config.texture_scale * rng.sample::<f64, _>(StandardNormal);
            img.axpy(c, pattern, 1.0);
        }
        if config.noise_sd > 0.0 {
            for v in img.iter_mut() {
                *v += config.noise_sd * rng.sample::<f64, _>(StandardNormal);
            }
        }
        img
    };

    let mut x = DMatrix::zeros(config.n_fg, p);
    let mut r = DVector::zeros(config.n_fg);
    for i in 0..config.n_fg {
        let mut img = draw_image(&mut rng);
        let height = rng.random_range(1..=side);
        // line grows upward from the bottom edge
        for row in side - height..side {
            img[row * side + config.line_column] += config.intensity;
        }
        x.row_mut(i).copy_from(&img.transpose());
        r[i] = height as f64;
    }
    let mut y = DMatrix::zeros(config.n_bg, p);
    for j in 0..config.n_bg {
        let img = draw_image(&mut rng);
        y.row_mut(j).copy_from(&img.transpose());
    }
    let names = (0..p)
        .map(|k| format!("px_{}_{}", k / side, k % side))
        .collect();
    Dataset::new(x, r, y)?.with_feature_names(names)
}
