//! Exact Gaussian-process regression with a squared-exponential ARD kernel.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cholesky_jittered, Factor};
use crate::optim::{minimize_box, LbfgsConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub signal_variance: f64,
    pub lengthscales: Vec<f64>,
}

impl KernelParams {
    pub fn new(signal_variance: f64, lengthscales: Vec<f64>) -> Self {
        KernelParams {
            signal_variance,
            lengthscales,
        }
    }

    pub fn isotropic(dim: usize, lengthscale: f64, signal_variance: f64) -> Self {
        Self::new(signal_variance, vec![lengthscale; dim])
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.signal_variance > 0.0) || self.lengthscales.iter().any(|l| !(*l > 0.0)) {
            return Err(Error::Config(format!("kernel parameters must be positive: {self:?}")));
        }
        Ok(())
    }

    #[inline]
    pub(crate) fn eval_unchecked(&self, a: &[f64], b: &[f64]) -> f64 {
        let mut r = 0.0;
        for j in 0..self.lengthscales.len() {
            let t = (a[j] - b[j]) / self.lengthscales[j];
            r += t * t;
        }
        self.signal_variance * (-0.5 * r).exp()
    }

    /// Gram matrix over the rows of `xs`.
    pub fn gram(&self, xs: &[Vec<f64>]) -> DMatrix<f64> {
        let n = xs.len();
        let mut k = DMatrix::zeros(n, n);
        for i in 0..n {
            k[(i, i)] = self.signal_variance;
            for j in 0..i {
                let v = self.eval_unchecked(&xs[i], &xs[j]);
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        k
    }

    /// Cross-covariance with `a` indexing rows and `b` columns.
    pub fn cross(&self, a: &[Vec<f64>], b: &[Vec<f64>]) -> DMatrix<f64> {
        DMatrix::from_fn(a.len(), b.len(), |i, j| self.eval_unchecked(&a[i], &b[j]))
    }
}

/// `signal_variance * exp(-0.5 * sum(((x - x2) / l)^2))`.
pub fn kernel_eval(params: &KernelParams, x: &[f64], x2: &[f64]) -> Result<f64> {
    let d = params.dim();
    for len in [x.len(), x2.len()] {
        if len != d {
            return Err(Error::DimensionMismatch { expected: d, got: len });
        }
    }
    Ok(params.eval_unchecked(x, x2))
}

fn check_rows(xs: &[Vec<f64>], d: usize) -> Result<()> {
    for row in xs {
        if row.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: row.len(),
            });
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite input".into()));
        }
    }
    Ok(())
}

/// Log marginal likelihood `-0.5 y^T (K + s I)^-1 y - 0.5 log|K + s I|`
/// (no `2 pi` constant).
pub fn log_marginal_likelihood(xs: &[Vec<f64>], y: &[f64], kernel: &KernelParams, noise_variance: f64) -> Result<f64> {
    lml_and_gradient(xs, y, kernel, noise_variance).map(|(v, _)| v)
}

/// Log marginal likelihood and its gradient with respect to
/// `(ln l_1, .., ln l_d, ln signal_variance, ln noise_variance)`.
pub fn lml_and_gradient(
    xs: &[Vec<f64>],
    y: &[f64],
    kernel: &KernelParams,
    noise_variance: f64,
) -> Result<(f64, Vec<f64>)> {
    if xs.is_empty() {
        return Err(Error::Empty("training data"));
    }
    if xs.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: xs.len(),
            got: y.len(),
        });
    }
    check_rows(xs, kernel.dim())?;
    let data = SqDist::new(xs);
    let mut p: Vec<f64> = kernel.lengthscales.iter().map(|l| l.ln()).collect();
    p.push(kernel.signal_variance.ln());
    p.push(noise_variance.ln());
    let y = DVector::from_column_slice(y);
    data.lml_grad(&y, &p, noise_variance)
}

/// Per-dimension squared differences of a fixed input set.
pub(crate) struct SqDist {
    pub n: usize,
    pub dims: Vec<DMatrix<f64>>,
}

impl SqDist {
    pub fn new(xs: &[Vec<f64>]) -> Self {
        let n = xs.len();
        let d = xs.first().map_or(0, |r| r.len());
        let dims = (0..d)
            .map(|j| DMatrix::from_fn(n, n, |a, b| (xs[a][j] - xs[b][j]).powi(2)))
            .collect();
        SqDist { n, dims }
    }

    /// Noise-free kernel matrix for log-lengthscales `loglen` and variance `sv`.
    pub fn kernel(&self, loglen: &[f64], sv: f64) -> DMatrix<f64> {
        let mut r: DMatrix<f64> = DMatrix::zeros(self.n, self.n);
        for (dj, &ll) in self.dims.iter().zip(loglen) {
            let inv = (-2.0 * ll).exp();
            r.zip_apply(dj, |acc, v| *acc += v * inv);
        }
        r.map(|v| sv * (-0.5 * v).exp())
    }

    /// LML and gradient for packed log-parameters `[ln l.., ln sv, ln noise]`.
    /// `noise` is passed separately so that an exact zero is representable.
    pub fn lml_grad(&self, y: &DVector<f64>, p: &[f64], noise: f64) -> Result<(f64, Vec<f64>)> {
        let d = self.dims.len();
        let sv = p[d].exp();
        let k = self.kernel(&p[..d], sv);
        let mut a = k.clone();
        for i in 0..self.n {
            a[(i, i)] += noise;
        }
        let factor = cholesky_jittered(&a)?;
        let alpha = factor.solve(y);
        let lml = -0.5 * y.dot(&alpha) - 0.5 * factor.log_det();
        // W = alpha alpha^T - A^-1
        let mut w = factor.inverse();
        w.neg_mut();
        w.ger(1.0, &alpha, &alpha, 1.0);
        let wk = w.component_mul(&k);
        let mut grad = Vec::with_capacity(d + 2);
        for (dj, &ll) in self.dims.iter().zip(&p[..d]) {
            grad.push(0.5 * wk.dot(dj) * (-2.0 * ll).exp());
        }
        grad.push(0.5 * wk.sum());
        grad.push(0.5 * noise * w.trace());
        Ok((lml, grad))
    }
}

/// How training targets are transformed before fitting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Standardize {
    /// Subtract the mean and divide by the standard deviation.
    Full,
    /// Subtract the mean only.
    Center,
    None,
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    /// Random restarts in addition to the heuristic start (and the warm start, if any).
    pub restarts: usize,
    pub seed: u64,
    pub lengthscale_bounds: (f64, f64),
    pub signal_bounds: (f64, f64),
    pub noise_bounds: (f64, f64),
    pub standardize: Standardize,
    pub warm_start: Option<(KernelParams, f64)>,
    pub lbfgs: LbfgsConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            restarts: 5,
            seed: 0,
            lengthscale_bounds: (1e-3, 1e3),
            signal_bounds: (1e-4, 1e2),
            noise_bounds: (1e-8, 1.0),
            standardize: Standardize::Full,
            warm_start: None,
            lbfgs: LbfgsConfig::default(),
        }
    }
}

impl TrainConfig {
    pub(crate) fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [
            ("lengthscale", self.lengthscale_bounds),
            ("signal", self.signal_bounds),
            ("noise", self.noise_bounds),
        ] {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return Err(Error::Config(format!("bad {name} bounds ({lo}, {hi})")));
            }
        }
        Ok(())
    }

    pub(crate) fn log_bounds(&self, d: usize) -> (Vec<f64>, Vec<f64>) {
        let mut lo = vec![self.lengthscale_bounds.0.ln(); d];
        let mut hi = vec![self.lengthscale_bounds.1.ln(); d];
        lo.push(self.signal_bounds.0.ln());
        hi.push(self.signal_bounds.1.ln());
        lo.push(self.noise_bounds.0.ln());
        hi.push(self.noise_bounds.1.ln());
        (lo, hi)
    }

    /// Starting points in packed log space: warm start, heuristic, random.
    pub(crate) fn start_points(&self, xs: &[Vec<f64>], target_var: f64) -> Vec<Vec<f64>> {
        let d = xs.first().map_or(0, |r| r.len());
        let (lo, hi) = self.log_bounds(d);
        let clampv = |mut v: Vec<f64>| {
            for i in 0..v.len() {
                v[i] = v[i].clamp(lo[i], hi[i]);
            }
            v
        };
        let ranges: Vec<f64> = (0..d)
            .map(|j| {
                let (mn, mx) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), r| {
                    (a.min(r[j]), b.max(r[j]))
                });
                (mx - mn).max(1e-2)
            })
            .collect();
        let sv0 = target_var.max(1e-3);
        let mut starts = Vec::new();
        if let Some((k, noise)) = &self.warm_start {
            if k.dim() == d {
                let mut p: Vec<f64> = k.lengthscales.iter().map(|l| l.ln()).collect();
                p.push(k.signal_variance.ln());
                p.push(noise.max(self.noise_bounds.0).ln());
                starts.push(clampv(p));
            }
        }
        let mut p: Vec<f64> = ranges.iter().map(|r| (0.5 * r).ln()).collect();
        p.push(sv0.ln());
        p.push((1e-2 * sv0).ln());
        starts.push(clampv(p));
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        for _ in 0..self.restarts.saturating_sub(1) {
            let mut p: Vec<f64> = ranges
                .iter()
                .map(|r| (r * rng.random_range(0.05..2.0f64)).ln())
                .collect();
            p.push((sv0 * rng.random_range(0.2..5.0f64)).ln());
            p.push(rng.random_range((1e-6f64).ln()..(1e-1f64).ln()) + sv0.ln());
            starts.push(clampv(p));
        }
        starts
    }
}

/// Maximizes the marginal likelihood over packed log-parameters.
/// Returns `(kernel, noise, lml)` of the best start.
pub(crate) fn optimize_hyper(
    data: &SqDist,
    y: &DVector<f64>,
    cfg: &TrainConfig,
    starts: &[Vec<f64>],
) -> Result<(KernelParams, f64, f64)> {
    let d = data.dims.len();
    let (lo, hi) = cfg.log_bounds(d);
    let objective = |p: &[f64]| {
        data.lml_grad(y, p, p[d + 1].exp())
            .ok()
            .map(|(v, g)| (-v, g.into_iter().map(|x| -x).collect()))
    };
    let mut best: Option<(Vec<f64>, f64)> = None;
    for s in starts {
        if let Some(m) = minimize_box(objective, s, &lo, &hi, &cfg.lbfgs) {
            if best.as_ref().is_none_or(|(_, f)| m.f < *f) {
                best = Some((m.x, m.f));
            }
        }
    }
    let (p, f) = best.ok_or_else(|| Error::Numerical("all hyperparameter starts failed".into()))?;
    let kernel = KernelParams::new(p[d].exp(), p[..d].iter().map(|v| v.exp()).collect());
    Ok((kernel, p[d + 1].exp(), -f))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct GpState {
    kernel: KernelParams,
    noise_variance: f64,
    train_inputs: Vec<Vec<f64>>,
    train_targets: Vec<f64>,
    #[serde(default)]
    y_mean: f64,
    #[serde(default = "one")]
    y_scale: f64,
}

fn one() -> f64 {
    1.0
}

/// A trained GP with its cached factorization.
///
/// Kernel and noise live on the transformed target scale
/// `(y - y_mean) / y_scale`; predictions are returned on the original scale.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "GpState", into = "GpState")]
pub struct GpModel {
    pub kernel: KernelParams,
    pub noise_variance: f64,
    pub train_inputs: Vec<Vec<f64>>,
    pub train_targets: Vec<f64>,
    pub y_mean: f64,
    pub y_scale: f64,
    factor: Factor,
    alpha: DVector<f64>,
}

pub type ForwardGpModel = GpModel;

impl From<GpModel> for GpState {
    fn from(m: GpModel) -> Self {
        GpState {
            kernel: m.kernel,
            noise_variance: m.noise_variance,
            train_inputs: m.train_inputs,
            train_targets: m.train_targets,
            y_mean: m.y_mean,
            y_scale: m.y_scale,
        }
    }
}

impl TryFrom<GpState> for GpModel {
    type Error = Error;

    fn try_from(s: GpState) -> Result<Self> {
        GpModel::with_transform(
            s.train_inputs,
            s.train_targets,
            s.kernel,
            s.noise_variance,
            s.y_mean,
            s.y_scale,
        )
    }
}

impl GpModel {
    /// Conditions a GP with fixed hyperparameters on raw targets.
    pub fn new(xs: Vec<Vec<f64>>, y: Vec<f64>, kernel: KernelParams, noise_variance: f64) -> Result<Self> {
        Self::with_transform(xs, y, kernel, noise_variance, 0.0, 1.0)
    }

    pub fn with_transform(
        xs: Vec<Vec<f64>>,
        y: Vec<f64>,
        kernel: KernelParams,
        noise_variance: f64,
        y_mean: f64,
        y_scale: f64,
    ) -> Result<Self> {
        if xs.is_empty() {
            return Err(Error::Empty("training data"));
        }
        if xs.len() != y.len() {
            return Err(Error::DimensionMismatch {
                expected: xs.len(),
                got: y.len(),
            });
        }
        kernel.validate()?;
        check_rows(&xs, kernel.dim())?;
        if !(noise_variance >= 0.0) || !(y_scale > 0.0) {
            return Err(Error::Config("noise must be >= 0 and scale > 0".into()));
        }
        let mut a = kernel.gram(&xs);
        for i in 0..xs.len() {
            a[(i, i)] += noise_variance;
        }
        let factor = cholesky_jittered(&a)?;
        let yt = DVector::from_iterator(y.len(), y.iter().map(|v| (v - y_mean) / y_scale));
        let alpha = factor.solve(&yt);
        Ok(GpModel {
            kernel,
            noise_variance,
            train_inputs: xs,
            train_targets: y,
            y_mean,
            y_scale,
            factor,
            alpha,
        })
    }

    pub fn dim(&self) -> usize {
        self.kernel.dim()
    }

    pub fn n(&self) -> usize {
        self.train_inputs.len()
    }

    pub fn factor(&self) -> &Factor {
        &self.factor
    }

    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    /// Lower Cholesky factor of `K + noise I` (plus any jitter).
    pub fn chol(&self) -> DMatrix<f64> {
        self.factor.l()
    }

    /// Posterior mean and latent variance for each row of `xs`.
    pub fn predict(&self, xs: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
        check_rows(xs, self.dim())?;
        if xs.is_empty() {
            return Ok((vec![], vec![]));
        }
        let kc = self.kernel.cross(&self.train_inputs, xs);
        let mean = kc.tr_mul(&self.alpha);
        let v = self
            .factor
            .chol
            .l_dirty()
            .solve_lower_triangular(&kc)
            .ok_or_else(|| Error::Numerical("triangular solve failed".into()))?;
        let s2 = self.y_scale * self.y_scale;
        let var = v
            .column_iter()
            .map(|c| clamp_variance(self.kernel.signal_variance - c.norm_squared()) * s2)
            .collect();
        let mean = mean.iter().map(|m| m * self.y_scale + self.y_mean).collect();
        Ok((mean, var))
    }

    pub fn predict_one(&self, x: &[f64]) -> Result<(f64, f64)> {
        let (m, v) = self.predict(std::slice::from_ref(&x.to_vec()))?;
        Ok((m[0], v[0]))
    }

    /// Marginal likelihood of the fitted hyperparameters on the transformed targets.
    pub fn log_marginal_likelihood(&self) -> f64 {
        let yt = DVector::from_iterator(
            self.n(),
            self.train_targets.iter().map(|v| (v - self.y_mean) / self.y_scale),
        );
        -0.5 * yt.dot(&self.alpha) - 0.5 * self.factor.log_det()
    }
}

pub(crate) fn clamp_variance(v: f64) -> f64 {
    v.max(0.0)
}

fn target_transform(y: &[f64], mode: Standardize) -> (f64, f64) {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    match mode {
        Standardize::None => (0.0, 1.0),
        Standardize::Center => (mean, 1.0),
        Standardize::Full => {
            let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let sd = var.sqrt();
            (mean, if sd > 1e-12 { sd } else { 1.0 })
        }
    }
}

/// Fits kernel and noise by multi-start L-BFGS on the marginal likelihood.
pub fn fit_gp(xs: &[Vec<f64>], y: &[f64], cfg: &TrainConfig) -> Result<GpModel> {
    if xs.len() < 2 {
        return Err(Error::Empty("need at least 2 training points"));
    }
    if xs.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: xs.len(),
            got: y.len(),
        });
    }
    let d = xs[0].len();
    check_rows(xs, d)?;
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("non-finite target".into()));
    }
    cfg.validate()?;
    let (y_mean, y_scale) = target_transform(y, cfg.standardize);
    let yt = DVector::from_iterator(y.len(), y.iter().map(|v| (v - y_mean) / y_scale));
    let tvar = yt.norm_squared() / yt.len() as f64;
    let data = SqDist::new(xs);
    let starts = cfg.start_points(xs, if tvar > 1e-12 { tvar } else { 1.0 });
    let (kernel, noise, _) = optimize_hyper(&data, &yt, cfg, &starts)?;
    GpModel::with_transform(xs.to_vec(), y.to_vec(), kernel, noise, y_mean, y_scale)
}
