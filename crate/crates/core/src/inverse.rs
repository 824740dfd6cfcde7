//! Inverse models: per-decision-variable GPs over preference vectors, with
//! optional transfer from a source task through a scaled cross-task kernel.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::InverseDataset;
use crate::decomposition::PreferenceVector;
use crate::error::{Error, Result};
use crate::gp::{clamp_variance, fit_gp, GpModel, KernelParams, SqDist, Standardize, TrainConfig};
use crate::linalg::{cholesky_jittered, Factor};
use crate::optim::{minimize_box, LbfgsConfig};

/// Noise floor on inverse-model standard deviations.
pub const DEFAULT_SIGMA0: f64 = 0.01;

/// Bound on the unconstrained correlation parameter; `tanh(4) ~ 0.9993`.
const RHO_BOUND: f64 = 4.0;
const SOURCE_NOISE_BOUNDS: (f64, f64) = (1e-6, 1.0);
/// Tolerance for preference vectors passed to predictions.
pub const QUERY_SIMPLEX_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum TrainingMode {
    /// Target-only kernel fit, then correlation and source noise on the joint likelihood.
    #[default]
    TwoStep,
    /// Everything at once on the joint likelihood.
    Joint,
}

/// Source-to-target variable correspondence (0-based indices).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<(usize, usize)>", into = "Vec<(usize, usize)>")]
pub struct OverlapMap {
    pairs: Vec<(usize, usize)>,
}

impl OverlapMap {
    /// `pairs` are `(source_index, target_index)`.
    pub fn new(pairs: Vec<(usize, usize)>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Config("overlap map needs at least one shared variable".into()));
        }
        let mut s: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let mut t: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        s.sort_unstable();
        t.sort_unstable();
        if s.windows(2).any(|w| w[0] == w[1]) || t.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("overlap indices must be unique on both sides".into()));
        }
        Ok(OverlapMap { pairs })
    }

    /// The first `q` variables of both tasks.
    pub fn leading(q: usize) -> Result<Self> {
        Self::new((0..q).map(|i| (i, i)).collect())
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn q(&self) -> usize {
        self.pairs.len()
    }

    pub fn source_for(&self, target: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.1 == target).map(|p| p.0)
    }

    pub fn validate_dims(&self, d_source: usize, d_target: usize) -> Result<()> {
        for &(s, t) in &self.pairs {
            if s >= d_source || t >= d_target {
                return Err(Error::Config(format!(
                    "overlap pair ({s}, {t}) outside source d = {d_source} / target d = {d_target}"
                )));
            }
        }
        Ok(())
    }
}

impl TryFrom<Vec<(usize, usize)>> for OverlapMap {
    type Error = Error;

    fn try_from(v: Vec<(usize, usize)>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<OverlapMap> for Vec<(usize, usize)> {
    fn from(o: OverlapMap) -> Self {
        o.pairs
    }
}

/// `[[K_SS, lambda K_ST], [lambda K_TS, K_TT]]`.
pub fn build_transfer_gram(
    kernel: &KernelParams,
    lambda: f64,
    ws: &[Vec<f64>],
    wt: &[Vec<f64>],
) -> Result<DMatrix<f64>> {
    if !(lambda.abs() <= 1.0) {
        return Err(Error::Config(format!("lambda = {lambda} outside [-1, 1]")));
    }
    let all: Vec<Vec<f64>> = ws.iter().chain(wt).cloned().collect();
    let mut k = kernel.gram(&all);
    let ns = ws.len();
    let n = all.len();
    for i in 0..ns {
        for j in ns..n {
            k[(i, j)] *= lambda;
            k[(j, i)] *= lambda;
        }
    }
    Ok(k)
}

fn check_simplex(w: &[f64], m: usize) -> Result<()> {
    if w.len() != m {
        return Err(Error::DimensionMismatch {
            expected: m,
            got: w.len(),
        });
    }
    PreferenceVector::within(w.to_vec(), QUERY_SIMPLEX_TOL).map(|_| ())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Inverse GP for one target decision variable, without transfer.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InverseGpModel {
    pub var_index: usize,
    pub gp: GpModel,
}

impl InverseGpModel {
    pub fn m(&self) -> usize {
        self.gp.dim()
    }

    pub fn noise_std(&self) -> f64 {
        self.gp.noise_variance.sqrt()
    }

    pub fn predict(&self, w: &[f64]) -> Result<(f64, f64)> {
        check_simplex(w, self.m())?;
        self.gp.predict_one(w)
    }
}

#[derive(Clone, Debug)]
pub struct InverseFitConfig {
    pub sigma0: f64,
    pub mode: TrainingMode,
    pub restarts: usize,
    pub seed: u64,
    /// Precision of a zero-mean Gaussian penalty on `atanh(lambda)` in the
    /// transfer step; 0 gives plain maximum likelihood.
    pub rho_prior_precision: f64,
}

impl Default for InverseFitConfig {
    fn default() -> Self {
        InverseFitConfig {
            sigma0: DEFAULT_SIGMA0,
            mode: TrainingMode::TwoStep,
            restarts: 5,
            seed: 0,
            rho_prior_precision: 1.0,
        }
    }
}

impl InverseFitConfig {
    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            restarts: self.restarts,
            seed: self.seed,
            noise_bounds: (self.sigma0 * self.sigma0, 1.0),
            standardize: Standardize::Center,
            ..TrainConfig::default()
        }
    }
}

fn validate_inputs(w: &[Vec<f64>], x: &[f64]) -> Result<usize> {
    if w.is_empty() {
        return Err(Error::Empty("inverse training data"));
    }
    if w.len() != x.len() {
        return Err(Error::DimensionMismatch {
            expected: w.len(),
            got: x.len(),
        });
    }
    let m = w[0].len();
    for row in w {
        check_simplex(row, m)?;
    }
    Ok(m)
}

/// Fits an inverse GP mapping preference vectors to variable `var_index`.
pub fn fit_inverse_gp(w: &[Vec<f64>], x: &[f64], var_index: usize, cfg: &InverseFitConfig) -> Result<InverseGpModel> {
    if !(cfg.sigma0 > 0.0) {
        return Err(Error::Config("sigma0 must be positive".into()));
    }
    let m = validate_inputs(w, x)?;
    let gp = if w.len() == 1 {
        // Nothing to learn hyperparameters from; condition on the point with defaults.
        GpModel::with_transform(
            w.to_vec(),
            x.to_vec(),
            KernelParams::isotropic(m, 0.5, 0.01),
            cfg.sigma0 * cfg.sigma0,
            x[0],
            1.0,
        )?
    } else {
        fit_gp(w, x, &cfg.train_config())?
    };
    Ok(InverseGpModel { var_index, gp })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct InvTgpState {
    var_index: usize,
    kernel: KernelParams,
    lambda: f64,
    noise_source: f64,
    noise_target: f64,
    mode: TrainingMode,
    source_w: Vec<Vec<f64>>,
    source_x: Vec<f64>,
    target_w: Vec<Vec<f64>>,
    target_x: Vec<f64>,
    source_mean: f64,
    target_mean: f64,
}

/// Inverse transfer GP for one overlapping target variable.
///
/// `noise_source` and `noise_target` are standard deviations. Each task's
/// outputs are centered on their own mean before conditioning.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "InvTgpState", into = "InvTgpState")]
pub struct InvTgpModel {
    pub var_index: usize,
    pub kernel: KernelParams,
    pub lambda: f64,
    pub noise_source: f64,
    pub noise_target: f64,
    pub mode: TrainingMode,
    pub source_w: Vec<Vec<f64>>,
    pub source_x: Vec<f64>,
    pub target_w: Vec<Vec<f64>>,
    pub target_x: Vec<f64>,
    pub source_mean: f64,
    pub target_mean: f64,
    factor: Factor,
    alpha: DVector<f64>,
}

impl From<InvTgpModel> for InvTgpState {
    fn from(m: InvTgpModel) -> Self {
        InvTgpState {
            var_index: m.var_index,
            kernel: m.kernel,
            lambda: m.lambda,
            noise_source: m.noise_source,
            noise_target: m.noise_target,
            mode: m.mode,
            source_w: m.source_w,
            source_x: m.source_x,
            target_w: m.target_w,
            target_x: m.target_x,
            source_mean: m.source_mean,
            target_mean: m.target_mean,
        }
    }
}

impl TryFrom<InvTgpState> for InvTgpModel {
    type Error = Error;

    fn try_from(s: InvTgpState) -> Result<Self> {
        InvTgpModel::condition(s)
    }
}

impl InvTgpModel {
    /// Builds a model with fixed parameters, centering each task on its own mean.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        var_index: usize,
        kernel: KernelParams,
        lambda: f64,
        noise_source: f64,
        noise_target: f64,
        source: (Vec<Vec<f64>>, Vec<f64>),
        target: (Vec<Vec<f64>>, Vec<f64>),
    ) -> Result<Self> {
        let source_mean = mean(&source.1);
        let target_mean = mean(&target.1);
        Self::condition(InvTgpState {
            var_index,
            kernel,
            lambda,
            noise_source,
            noise_target,
            mode: TrainingMode::TwoStep,
            source_w: source.0,
            source_x: source.1,
            target_w: target.0,
            target_x: target.1,
            source_mean,
            target_mean,
        })
    }

    fn condition(s: InvTgpState) -> Result<Self> {
        s.kernel.validate()?;
        if s.source_w.is_empty() || s.target_w.is_empty() {
            return Err(Error::Empty("transfer model needs source and target data"));
        }
        if s.source_w.len() != s.source_x.len() || s.target_w.len() != s.target_x.len() {
            return Err(Error::DimensionMismatch {
                expected: s.target_w.len(),
                got: s.target_x.len(),
            });
        }
        let m = s.kernel.dim();
        if let Some(r) = s.source_w.iter().chain(&s.target_w).find(|r| r.len() != m) {
            return Err(Error::DimensionMismatch {
                expected: m,
                got: r.len(),
            });
        }
        if !(s.noise_source > 0.0 && s.noise_target > 0.0) {
            return Err(Error::Config("noise terms must be positive".into()));
        }
        let mut a = build_transfer_gram(&s.kernel, s.lambda, &s.source_w, &s.target_w)?;
        let ns = s.source_w.len();
        for i in 0..a.nrows() {
            a[(i, i)] += if i < ns {
                s.noise_source * s.noise_source
            } else {
                s.noise_target * s.noise_target
            };
        }
        let factor = cholesky_jittered(&a)?;
        let y = DVector::from_iterator(
            a.nrows(),
            s.source_x
                .iter()
                .map(|v| v - s.source_mean)
                .chain(s.target_x.iter().map(|v| v - s.target_mean)),
        );
        let alpha = factor.solve(&y);
        Ok(InvTgpModel {
            var_index: s.var_index,
            kernel: s.kernel,
            lambda: s.lambda,
            noise_source: s.noise_source,
            noise_target: s.noise_target,
            mode: s.mode,
            source_w: s.source_w,
            source_x: s.source_x,
            target_w: s.target_w,
            target_x: s.target_x,
            source_mean: s.source_mean,
            target_mean: s.target_mean,
            factor,
            alpha,
        })
    }

    pub fn m(&self) -> usize {
        self.kernel.dim()
    }

    pub fn factor(&self) -> &Factor {
        &self.factor
    }

    fn cross_vector(&self, w: &[f64]) -> DVector<f64> {
        let ns = self.source_w.len();
        DVector::from_iterator(
            ns + self.target_w.len(),
            self.source_w
                .iter()
                .map(|s| self.lambda * self.kernel.eval_unchecked(s, w))
                .chain(self.target_w.iter().map(|t| self.kernel.eval_unchecked(t, w))),
        )
    }

    fn predict_unchecked(&self, w: &[f64]) -> (f64, f64) {
        let k = self.cross_vector(w);
        let mu = self.target_mean + k.dot(&self.alpha);
        let v = self.factor.solve_lower(&k);
        (mu, clamp_variance(self.kernel.signal_variance - v.norm_squared()))
    }
}

/// Posterior mean and variance of the target variable at `w`.
pub fn predict_invtgp(model: &InvTgpModel, w: &[f64]) -> Result<(f64, f64)> {
    check_simplex(w, model.m())?;
    Ok(model.predict_unchecked(w))
}

/// Fast joint likelihood in `(rho, ln sigma_S^2)` for a fixed target kernel.
///
/// With `K_SS = U D U^T` and `B = U^T K_ST`, the determinant and quadratic
/// form of the full covariance reduce to an `N_T x N_T` Schur complement.
struct StepTwo {
    d: DVector<f64>,
    b: DMatrix<f64>,
    ys: DVector<f64>,
    yt: DVector<f64>,
    ktt: DMatrix<f64>,
}

impl StepTwo {
    fn new(kernel: &KernelParams, ws: &[Vec<f64>], ys: &[f64], wt: &[Vec<f64>], yt: &[f64], noise_t: f64) -> Self {
        let kss = kernel.gram(ws);
        let eig = SymmetricEigen::new(kss);
        let kst = kernel.cross(ws, wt);
        let ut = eig.eigenvectors.transpose();
        let mut ktt = kernel.gram(wt);
        for i in 0..wt.len() {
            ktt[(i, i)] += noise_t;
        }
        StepTwo {
            d: eig.eigenvalues.map(|v| v.max(0.0)),
            b: &ut * kst,
            ys: &ut * DVector::from_column_slice(ys),
            yt: DVector::from_column_slice(yt),
            ktt,
        }
    }

    fn lml(&self, rho: f64, log_noise_s: f64) -> Option<f64> {
        let lambda = rho.tanh();
        let ns2 = log_noise_s.exp();
        let inv: DVector<f64> = self.d.map(|v| 1.0 / (v + ns2));
        let mut scaled_b = self.b.clone();
        for (i, mut row) in scaled_b.row_iter_mut().enumerate() {
            row *= inv[i];
        }
        let s = &self.ktt - (lambda * lambda) * self.b.tr_mul(&scaled_b);
        let f = cholesky_jittered(&s).ok()?;
        let r = &self.yt - lambda * scaled_b.tr_mul(&self.ys);
        let quad = self.ys.iter().zip(inv.iter()).map(|(y, i)| y * y * i).sum::<f64>() + r.dot(&f.solve(&r));
        let logdet = self.d.iter().map(|v| (v + ns2).ln()).sum::<f64>() + f.log_det();
        let v = -0.5 * quad - 0.5 * logdet;
        v.is_finite().then_some(v)
    }
}

fn central_difference<F: Fn(&[f64]) -> Option<f64>>(f: &F, p: &[f64]) -> Option<(f64, Vec<f64>)> {
    let v = f(p)?;
    let h = 1e-6;
    let mut g = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        let mut a = p.to_vec();
        let mut b = p.to_vec();
        a[i] += h;
        b[i] -= h;
        g.push((f(&a)? - f(&b)?) / (2.0 * h));
    }
    Some((v, g))
}

/// Joint log likelihood with the full analytic gradient in
/// `[ln l.., ln sv, ln sigma_T^2, rho, ln sigma_S^2]`.
fn joint_lml_grad(all: &SqDist, ns: usize, y: &DVector<f64>, p: &[f64]) -> Option<(f64, Vec<f64>)> {
    let m = all.dims.len();
    let sv = p[m].exp();
    let nt2 = p[m + 1].exp();
    let rho = p[m + 2];
    let lambda = rho.tanh();
    let ns2 = p[m + 3].exp();
    let n = all.n;
    let base = all.kernel(&p[..m], sv);
    let coreg = DMatrix::from_fn(n, n, |i, j| if (i < ns) == (j < ns) { 1.0 } else { lambda });
    let k = base.component_mul(&coreg);
    let mut a = k.clone();
    for i in 0..n {
        a[(i, i)] += if i < ns { ns2 } else { nt2 };
    }
    let f = cholesky_jittered(&a).ok()?;
    let alpha = f.solve(y);
    let lml = -0.5 * y.dot(&alpha) - 0.5 * f.log_det();
    let mut w = f.inverse();
    w.neg_mut();
    w.ger(1.0, &alpha, &alpha, 1.0);
    let wk = w.component_mul(&k);
    let mut g = Vec::with_capacity(m + 4);
    for (dj, &ll) in all.dims.iter().zip(&p[..m]) {
        g.push(0.5 * wk.dot(dj) * (-2.0 * ll).exp());
    }
    g.push(0.5 * wk.sum());
    g.push(0.5 * nt2 * (ns..n).map(|i| w[(i, i)]).sum::<f64>());
    let dlam = 1.0 - lambda * lambda;
    let mut cross = 0.0;
    for i in 0..ns {
        for j in ns..n {
            cross += w[(i, j)] * base[(i, j)];
        }
    }
    g.push(0.5 * 2.0 * cross * dlam);
    g.push(0.5 * ns2 * (0..ns).map(|i| w[(i, i)]).sum::<f64>());
    Some((lml, g))
}

/// Fits an inverse transfer GP for target variable `var_index`.
pub fn fit_invtgp(
    source: (&[Vec<f64>], &[f64]),
    target: (&[Vec<f64>], &[f64]),
    var_index: usize,
    cfg: &InverseFitConfig,
) -> Result<InvTgpModel> {
    if !(cfg.sigma0 > 0.0) {
        return Err(Error::Config("sigma0 must be positive".into()));
    }
    if target.0.len() < 2 {
        return Err(Error::Empty("transfer model needs at least 2 target points"));
    }
    let m = validate_inputs(target.0, target.1)?;
    let ms = validate_inputs(source.0, source.1)?;
    if ms != m {
        return Err(Error::DimensionMismatch { expected: m, got: ms });
    }
    let target_mean = mean(target.1);
    let source_mean = mean(source.1);
    let ys: Vec<f64> = source.1.iter().map(|v| v - source_mean).collect();
    let yt: Vec<f64> = target.1.iter().map(|v| v - target_mean).collect();

    // Step 1 (and the starting point of joint mode): target-only fit.
    let step1 = fit_inverse_gp(target.0, target.1, var_index, cfg)?;
    let kernel1 = step1.gp.kernel.clone();
    let noise_t2 = step1.gp.noise_variance;
    let ls = LbfgsConfig::default();

    let (kernel, noise_t2, rho, noise_s2) = match cfg.mode {
        TrainingMode::TwoStep => {
            let st = StepTwo::new(&kernel1, source.0, &ys, target.0, &yt, noise_t2);
            let prec = cfg.rho_prior_precision;
            let f = |p: &[f64]| st.lml(p[0], p[1]).map(|v| -v + 0.5 * prec * p[0] * p[0]);
            let lo = [-RHO_BOUND, SOURCE_NOISE_BOUNDS.0.ln()];
            let hi = [RHO_BOUND, SOURCE_NOISE_BOUNDS.1.ln()];
            // Correlation always starts at zero; source noise starts at the
            // target noise and at the full source variance.
            let src_var = ys.iter().map(|v| v * v).sum::<f64>() / ys.len() as f64;
            let obj = |p: &[f64]| central_difference(&f, p);
            let mut best: Option<(Vec<f64>, f64)> = None;
            for s0 in [noise_t2, src_var] {
                let ln0 = s0.clamp(SOURCE_NOISE_BOUNDS.0, SOURCE_NOISE_BOUNDS.1).ln();
                if let Some(r) = minimize_box(obj, &[0.0, ln0], &lo, &hi, &ls) {
                    if best.as_ref().is_none_or(|b| r.f < b.1) {
                        best = Some((r.x, r.f));
                    }
                }
            }
            let (p, _) = best.ok_or_else(|| Error::Numerical("transfer step failed at every start".into()))?;
            (kernel1, noise_t2, p[0], p[1].exp())
        }
        TrainingMode::Joint => {
            let all: Vec<Vec<f64>> = source.0.iter().chain(target.0).cloned().collect();
            let sq = SqDist::new(&all);
            let y = DVector::from_iterator(all.len(), ys.iter().chain(&yt).copied());
            let tc = cfg.train_config();
            let (mut lo, mut hi) = tc.log_bounds(m);
            lo.extend([-RHO_BOUND, SOURCE_NOISE_BOUNDS.0.ln()]);
            hi.extend([RHO_BOUND, SOURCE_NOISE_BOUNDS.1.ln()]);
            let mut start: Vec<f64> = kernel1.lengthscales.iter().map(|l| l.ln()).collect();
            start.push(kernel1.signal_variance.ln());
            start.push(noise_t2.ln());
            start.push(0.0);
            start.push(noise_t2.clamp(SOURCE_NOISE_BOUNDS.0, SOURCE_NOISE_BOUNDS.1).ln());
            let obj = |p: &[f64]| {
                joint_lml_grad(&sq, source.0.len(), &y, p).map(|(v, g)| (-v, g.into_iter().map(|x| -x).collect()))
            };
            let r = minimize_box(obj, &start, &lo, &hi, &ls)
                .ok_or_else(|| Error::Numerical("joint transfer fit failed".into()))?;
            let p = r.x;
            (
                KernelParams::new(p[m].exp(), p[..m].iter().map(|v| v.exp()).collect()),
                p[m + 1].exp(),
                p[m + 2],
                p[m + 3].exp(),
            )
        }
    };
    InvTgpModel::condition(InvTgpState {
        var_index,
        kernel,
        lambda: rho.tanh(),
        noise_source: noise_s2.sqrt(),
        noise_target: noise_t2.sqrt(),
        mode: cfg.mode,
        source_w: source.0.to_vec(),
        source_x: source.1.to_vec(),
        target_w: target.0.to_vec(),
        target_x: target.1.to_vec(),
        source_mean,
        target_mean,
    })
}

/// One per-variable inverse model of either kind.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InverseModel {
    Transfer(InvTgpModel),
    Plain(InverseGpModel),
}

impl InverseModel {
    pub fn var_index(&self) -> usize {
        match self {
            InverseModel::Transfer(t) => t.var_index,
            InverseModel::Plain(p) => p.var_index,
        }
    }

    pub fn m(&self) -> usize {
        match self {
            InverseModel::Transfer(t) => t.m(),
            InverseModel::Plain(p) => p.m(),
        }
    }

    pub fn lambda(&self) -> Option<f64> {
        match self {
            InverseModel::Transfer(t) => Some(t.lambda),
            InverseModel::Plain(_) => None,
        }
    }

    fn predict_unchecked(&self, w: &[f64]) -> Result<(f64, f64)> {
        match self {
            InverseModel::Transfer(t) => Ok(t.predict_unchecked(w)),
            InverseModel::Plain(p) => p.gp.predict_one(w),
        }
    }

    pub fn predict(&self, w: &[f64]) -> Result<(f64, f64)> {
        check_simplex(w, self.m())?;
        self.predict_unchecked(w)
    }
}

/// Stacks per-variable predictions into the factorized solution distribution.
///
/// `models` must cover variables `0..models.len()` exactly once (any order).
pub fn predict_solution_distribution(models: &[InverseModel], w: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = models.len();
    let mut slot: Vec<Option<&InverseModel>> = vec![None; d];
    for m in models {
        let j = m.var_index();
        if j >= d || slot[j].is_some() {
            return Err(Error::Config(format!("duplicate or out-of-range model index {j}")));
        }
        slot[j] = Some(m);
    }
    if let Some(first) = models.first() {
        check_simplex(w, first.m())?;
    }
    let mut mu = Vec::with_capacity(d);
    let mut var = Vec::with_capacity(d);
    for (j, s) in slot.into_iter().enumerate() {
        let model = s.ok_or(Error::MissingModel(j))?;
        let (a, b) = model.predict_unchecked(w)?;
        mu.push(a);
        var.push(b);
    }
    Ok((mu, var))
}

/// Per-variable models trained in unit-cube coordinates, with the box used
/// to map predictions back to decision-space units.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InverseModelSet {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub models: Vec<InverseModel>,
}

impl InverseModelSet {
    pub fn d(&self) -> usize {
        self.models.len()
    }

    pub fn m(&self) -> usize {
        self.models.first().map_or(0, |m| m.m())
    }

    /// Mean and variance of every decision variable in decision-space units.
    pub fn predict(&self, w: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let (mu, var) = predict_solution_distribution(&self.models, w)?;
        let mut out_mu = Vec::with_capacity(mu.len());
        let mut out_var = Vec::with_capacity(mu.len());
        for j in 0..mu.len() {
            let span = self.upper[j] - self.lower[j];
            out_mu.push(self.lower[j] + span * mu[j]);
            out_var.push(var[j] * span * span);
        }
        Ok((out_mu, out_var))
    }

    /// Predicted means clamped into the box, with per-variable clamp flags.
    pub fn predict_clamped(&self, w: &[f64]) -> Result<(Vec<f64>, Vec<f64>, Vec<bool>)> {
        let (mu, var) = self.predict(w)?;
        let mut flags = Vec::with_capacity(mu.len());
        let x = mu
            .iter()
            .enumerate()
            .map(|(j, &v)| {
                let c = v.clamp(self.lower[j], self.upper[j]);
                flags.push(c != v);
                c
            })
            .collect();
        Ok((x, var.into_iter().map(f64::sqrt).collect(), flags))
    }
}

fn var_seed(seed: u64, j: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(j as u64 + 1)
}

/// Fits one inverse model per target variable: transfer models where the
/// overlap map provides a source column, plain inverse GPs elsewhere.
///
/// `target_x` rows are full decision vectors. Fits run in parallel; each
/// variable gets its own seed derived from `cfg.seed`.
pub fn fit_inverse_models(
    target_w: &[Vec<f64>],
    target_x: &[Vec<f64>],
    source: Option<(&InverseDataset, &OverlapMap)>,
    cfg: &InverseFitConfig,
) -> Result<Vec<InverseModel>> {
    if target_x.is_empty() {
        return Err(Error::Empty("target inverse data"));
    }
    let d = target_x[0].len();
    if let Some((ds, ov)) = source {
        ov.validate_dims(ds.d, d)?;
        if ds.m != target_w[0].len() {
            return Err(Error::DimensionMismatch {
                expected: target_w[0].len(),
                got: ds.m,
            });
        }
    }
    let source_w: Option<Vec<Vec<f64>>> = source.map(|(ds, _)| ds.rows.iter().map(|r| r.w.clone()).collect());
    (0..d)
        .into_par_iter()
        .map(|j| {
            let col: Vec<f64> = target_x.iter().map(|x| x[j]).collect();
            let vcfg = InverseFitConfig {
                seed: var_seed(cfg.seed, j),
                ..cfg.clone()
            };
            match (source, &source_w) {
                (Some((ds, ov)), Some(sw)) if ov.source_for(j).is_some() => {
                    let s = ov.source_for(j).unwrap();
                    let sx: Vec<f64> = ds.rows.iter().map(|r| r.x[s]).collect();
                    fit_invtgp((sw, &sx), (target_w, &col), j, &vcfg).map(InverseModel::Transfer)
                }
                _ => fit_inverse_gp(target_w, &col, j, &vcfg).map(InverseModel::Plain),
            }
        })
        .collect()
}
