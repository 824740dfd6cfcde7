//! The inverse-model-guided optimization loop and its baselines.

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::InverseDataset;
use crate::decomposition::{
    generate_preference_set_with, preference_from_objectives, tchebycheff_unchecked, PreferenceMethod, PreferenceVector,
};
use crate::error::{Error, Result};
use crate::gp::{fit_gp, GpModel, TrainConfig};
use crate::inverse::{fit_inverse_models, InverseFitConfig, InverseModelSet, OverlapMap, TrainingMode, DEFAULT_SIGMA0};
use crate::nsga2::nondominated_indices;
use crate::problems::{ObjectiveNormalizer, Problem};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Inverse models with transfer on the overlapping variables.
    #[serde(rename = "InvTrEMO")]
    InvTrEmo,
    /// Inverse models without any source data.
    ZeroT,
    /// Forward model only; candidates from Latin hypercube plus perturbed
    /// nondominated points.
    ParegoUcb,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::InvTrEmo => "InvTrEMO",
            Variant::ZeroT => "ZeroT",
            Variant::ParegoUcb => "ParegoUcb",
        })
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "invtremo" | "invtr-emo" => Ok(Variant::InvTrEmo),
            "zerot" | "zero-t" => Ok(Variant::ZeroT),
            "paregoucb" | "parego-ucb" => Ok(Variant::ParegoUcb),
            _ => Err(Error::Config(format!("unknown variant {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub n_init: usize,
    pub budget: usize,
    pub n_offspring: usize,
    pub beta: f64,
    pub eta: f64,
    pub sigma0: f64,
    pub n_prefs: usize,
    pub variant: Variant,
    pub training_mode: TrainingMode,
    pub seed: u64,
    pub preference_method: PreferenceMethod,
    /// Random restarts for the forward model when no warm start exists.
    pub forward_restarts: usize,
    pub inverse_restarts: usize,
    pub rho_prior_precision: f64,
    /// Size of the Latin-hypercube probe used to record the maximum UCB
    /// over the whole space in the trace; 0 disables it.
    pub probe_size: usize,
    /// Spread of the Gaussian perturbations in the baseline, in unit-cube units.
    pub perturbation_std: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            n_init: 20,
            budget: 100,
            n_offspring: 10_000,
            beta: 0.5,
            eta: 0.05,
            sigma0: DEFAULT_SIGMA0,
            n_prefs: 50,
            variant: Variant::InvTrEmo,
            training_mode: TrainingMode::TwoStep,
            seed: 0,
            preference_method: PreferenceMethod::Riesz,
            forward_restarts: 5,
            inverse_restarts: 5,
            rho_prior_precision: 1.0,
            probe_size: 10_000,
            perturbation_std: 0.1,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_init < 2 {
            return Err(Error::Config("n_init must be at least 2".into()));
        }
        if self.budget < self.n_init {
            return Err(Error::Config(format!(
                "budget {} is below n_init {}",
                self.budget, self.n_init
            )));
        }
        if self.n_offspring == 0 || self.n_prefs == 0 || self.forward_restarts == 0 {
            return Err(Error::Config("counts must be positive".into()));
        }
        if !(self.beta >= 0.0 && self.eta >= 0.0 && self.sigma0 > 0.0 && self.perturbation_std > 0.0) {
            return Err(Error::Config("beta, eta must be >= 0 and sigma0 > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchiveEntry {
    pub x: Vec<f64>,
    pub f: Vec<f64>,
    /// 0 for initial samples, otherwise the iteration that produced it.
    pub iteration: usize,
}

/// Every true evaluation made during a run, in order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Archive {
    pub entries: Vec<ArchiveEntry>,
    pub normalizer: ObjectiveNormalizer,
}

const DUPLICATE_TOL: f64 = 1e-12;

impl Archive {
    pub fn new(m: usize) -> Self {
        Archive {
            entries: Vec::new(),
            normalizer: ObjectiveNormalizer::new(m),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.entries
            .iter()
            .any(|e| e.x.iter().zip(x).all(|(a, b)| (a - b).abs() <= DUPLICATE_TOL))
    }

    pub fn push(&mut self, x: Vec<f64>, f: Vec<f64>, iteration: usize) -> Result<()> {
        if self.contains(&x) {
            return Err(Error::Domain("duplicate decision vector in archive".into()));
        }
        self.normalizer.update(&f);
        self.entries.push(ArchiveEntry { x, f, iteration });
        Ok(())
    }

    pub fn objectives(&self) -> Vec<Vec<f64>> {
        self.entries.iter().map(|e| e.f.clone()).collect()
    }

    /// Indices of nondominated entries among the first `k` evaluations.
    pub fn nondominated_prefix(&self, k: usize) -> Vec<usize> {
        let fs: Vec<Vec<f64>> = self.entries[..k.min(self.len())].iter().map(|e| e.f.clone()).collect();
        nondominated_indices(&fs)
    }

    pub fn nondominated(&self) -> Vec<usize> {
        self.nondominated_prefix(self.len())
    }
}

/// One optimization iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Archive size after this iteration's evaluation.
    pub evaluations: usize,
    pub w: Vec<f64>,
    pub x: Vec<f64>,
    pub f: Vec<f64>,
    /// Index of the selected solution within this iteration's candidates.
    pub candidate_index: usize,
    pub n_candidates: usize,
    pub ucb: f64,
    pub mu: f64,
    pub sigma: f64,
    /// Maximum UCB over the Latin-hypercube probe, if enabled.
    pub max_ucb_probe: Option<f64>,
    /// Fitted correlation per decision variable (None for non-transfer models).
    pub lambdas: Vec<Option<f64>>,
    /// Candidates came from Latin-hypercube sampling because fewer than two
    /// nondominated points were available.
    pub fallback: bool,
    pub n_nondominated: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunResult {
    pub problem_id: String,
    pub config: OptimizerConfig,
    pub archive: Archive,
    /// Archive indices of the final nondominated set.
    pub nondominated: Vec<usize>,
    pub inverse_models: Option<InverseModelSet>,
    pub trace: Vec<IterationRecord>,
    pub preferences: Vec<PreferenceVector>,
}

impl RunResult {
    pub fn nondominated_points(&self) -> Vec<(Vec<f64>, Vec<f64>)> {
        self.nondominated
            .iter()
            .map(|&i| (self.archive.entries[i].x.clone(), self.archive.entries[i].f.clone()))
            .collect()
    }
}

/// A failed run together with whatever it completed before failing.
#[derive(Debug)]
pub struct RunError {
    pub error: Error,
    pub partial: Option<Box<RunResult>>,
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.error)?;
        if let Some(p) = &self.partial {
            write!(f, " (after {} evaluations)", p.archive.len())?;
        }
        Ok(())
    }
}

impl std::error::Error for RunError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

impl From<Error> for RunError {
    fn from(error: Error) -> Self {
        RunError { error, partial: None }
    }
}

/// Latin hypercube sample of `n` points in the box.
pub fn latin_hypercube(n: usize, lower: &[f64], upper: &[f64], rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let d = lower.len();
    let mut pts = vec![vec![0.0; d]; n];
    for j in 0..d {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(rng);
        for (i, p) in pts.iter_mut().enumerate() {
            let u = (perm[i] as f64 + rng.random::<f64>()) / n as f64;
            p[j] = lower[j] + u * (upper[j] - lower[j]);
        }
    }
    pts
}

/// `n` draws from independent Gaussians, clamped componentwise to the box.
pub fn sample_factorized(
    mu: &[f64],
    var: &[f64],
    n: usize,
    lower: &[f64],
    upper: &[f64],
    rng: &mut impl Rng,
) -> Vec<Vec<f64>> {
    let sd: Vec<f64> = var.iter().map(|v| v.max(0.0).sqrt()).collect();
    (0..n)
        .map(|_| {
            (0..mu.len())
                .map(|j| {
                    let z: f64 = StandardNormal.sample(rng);
                    (mu[j] + sd[j] * z).clamp(lower[j], upper[j])
                })
                .collect()
        })
        .collect()
}

/// Offspring drawn from the solution distribution the inverse models
/// predict for `w`, in decision-space units.
pub fn sample_offspring(models: &InverseModelSet, w: &PreferenceVector, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let (mu, var) = models.predict(w.as_slice())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sample_factorized(&mu, &var, n, &models.lower, &models.upper, &mut rng))
}

/// Index and score of the candidate maximizing `-mu + beta * sigma`; ties
/// go to the lowest index.
pub fn ucb_select(forward: &GpModel, candidates: &[Vec<f64>], beta: f64) -> Result<(usize, f64)> {
    let scores = ucb_scores(forward, candidates, beta)?;
    argmax_excluding(&scores, |_| false).ok_or(Error::Empty("candidate set"))
}

fn ucb_scores(forward: &GpModel, candidates: &[Vec<f64>], beta: f64) -> Result<Vec<f64>> {
    if candidates.is_empty() {
        return Err(Error::Empty("candidate set"));
    }
    let (mu, var) = forward.predict(candidates)?;
    Ok(mu.iter().zip(&var).map(|(m, v)| -m + beta * v.sqrt()).collect())
}

fn argmax_excluding(scores: &[f64], skip: impl Fn(usize) -> bool) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &s) in scores.iter().enumerate() {
        if skip(i) {
            continue;
        }
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best
}

/// Dominance filter over `(x, f)` pairs, keeping input order.
pub fn nondominated_filter(points: &[(Vec<f64>, Vec<f64>)]) -> Vec<(Vec<f64>, Vec<f64>)> {
    let fs: Vec<Vec<f64>> = points.iter().map(|p| p.1.clone()).collect();
    nondominated_indices(&fs)
        .into_iter()
        .map(|i| points[i].clone())
        .collect()
}

fn to_unit(x: &[f64], lower: &[f64], upper: &[f64]) -> Vec<f64> {
    x.iter()
        .enumerate()
        .map(|(j, v)| (v - lower[j]) / (upper[j] - lower[j]))
        .collect()
}

fn from_unit(u: &[f64], lower: &[f64], upper: &[f64]) -> Vec<f64> {
    u.iter()
        .enumerate()
        .map(|(j, v)| (lower[j] + v * (upper[j] - lower[j])).clamp(lower[j], upper[j]))
        .collect()
}

/// Independent random stream for a given purpose and iteration.
fn stream(seed: u64, purpose: u64, iteration: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (iteration as u64).wrapping_mul(0xD1B5_4A32_D192_ED03));
    rng.set_stream(purpose);
    rng
}

const STREAM_INIT: u64 = 1;
const STREAM_PREFS: u64 = 2;
const STREAM_OFFSPRING: u64 = 3;
const STREAM_PROBE: u64 = 4;
const STREAM_HYPER: u64 = 5;

/// Source data mapped into the unit cube of its own box.
fn unit_source(ds: &InverseDataset) -> InverseDataset {
    let mut out = ds.clone();
    for r in &mut out.rows {
        r.x = to_unit(&r.x, &ds.lower, &ds.upper);
    }
    out.lower = vec![0.0; ds.d];
    out.upper = vec![1.0; ds.d];
    out
}

struct Loop<'a> {
    problem: &'a Problem,
    cfg: &'a OptimizerConfig,
    source: Option<(InverseDataset, &'a OverlapMap)>,
    archive: Archive,
    trace: Vec<IterationRecord>,
    prefs: Vec<PreferenceVector>,
    forward_warm: Option<(crate::gp::KernelParams, f64)>,
}

impl<'a> Loop<'a> {
    fn unit_box(&self) -> (Vec<f64>, Vec<f64>) {
        (vec![0.0; self.problem.d()], vec![1.0; self.problem.d()])
    }

    fn evaluate(&mut self, x: Vec<f64>, iteration: usize) -> Result<Vec<f64>> {
        let f = self.problem.evaluate(&x)?;
        self.archive.push(x, f.clone(), iteration)?;
        Ok(f)
    }

    fn inverse_config(&self, iteration: usize) -> InverseFitConfig {
        InverseFitConfig {
            sigma0: self.cfg.sigma0,
            mode: self.cfg.training_mode,
            restarts: self.cfg.inverse_restarts,
            seed: stream(self.cfg.seed, STREAM_HYPER, iteration).random(),
            rho_prior_precision: self.cfg.rho_prior_precision,
        }
    }

    /// Inverse training data from the nondominated archive (unit-cube x).
    /// Objectives are normalized over the nondominated set itself, the same
    /// way source datasets are built.
    fn inverse_data(&self) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let nd = self.archive.nondominated();
        let norm = ObjectiveNormalizer::from_points(
            self.problem.m(),
            nd.iter().map(|&i| self.archive.entries[i].f.as_slice()),
        );
        let mut ws = Vec::with_capacity(nd.len());
        let mut xs = Vec::with_capacity(nd.len());
        for i in nd {
            let e = &self.archive.entries[i];
            let w = preference_from_objectives(&norm.normalize(&e.f))?;
            ws.push(w.into_vec());
            xs.push(to_unit(&e.x, self.problem.lower(), self.problem.upper()));
        }
        Ok((ws, xs))
    }

    fn fit_inverse(&self, iteration: usize) -> Result<Option<InverseModelSet>> {
        let (ws, xs) = self.inverse_data()?;
        if ws.len() < 2 {
            return Ok(None);
        }
        let src = match (self.cfg.variant, &self.source) {
            (Variant::InvTrEmo, Some((ds, ov))) => Some((ds, *ov)),
            _ => None,
        };
        let models = fit_inverse_models(&ws, &xs, src, &self.inverse_config(iteration))?;
        let (lower, upper) = self.unit_box();
        Ok(Some(InverseModelSet { lower, upper, models }))
    }

    fn fit_forward(&mut self, w: &PreferenceVector, iteration: usize) -> Result<GpModel> {
        let xs: Vec<Vec<f64>> = self
            .archive
            .entries
            .iter()
            .map(|e| to_unit(&e.x, self.problem.lower(), self.problem.upper()))
            .collect();
        let y: Vec<f64> = self
            .archive
            .entries
            .iter()
            .map(|e| tchebycheff_unchecked(&self.archive.normalizer.normalize(&e.f), w.as_slice(), self.cfg.eta))
            .collect();
        let tc = TrainConfig {
            restarts: if self.forward_warm.is_some() {
                1
            } else {
                self.cfg.forward_restarts
            },
            seed: stream(self.cfg.seed, STREAM_HYPER, iteration).random::<u64>() ^ 0x5555,
            warm_start: self.forward_warm.clone(),
            ..TrainConfig::default()
        };
        let gp = fit_gp(&xs, &y, &tc)?;
        self.forward_warm = Some((gp.kernel.clone(), gp.noise_variance));
        Ok(gp)
    }

    fn candidates(
        &self,
        models: Option<&InverseModelSet>,
        w: &PreferenceVector,
        iteration: usize,
    ) -> Result<(Vec<Vec<f64>>, bool)> {
        let (lower, upper) = self.unit_box();
        let mut rng = stream(self.cfg.seed, STREAM_OFFSPRING, iteration);
        let n = self.cfg.n_offspring;
        if self.cfg.variant == Variant::ParegoUcb {
            let nd = self.archive.nondominated();
            let n_perturb = n / 2;
            let mut c = latin_hypercube(n - n_perturb, &lower, &upper, &mut rng);
            for k in 0..n_perturb {
                let e = &self.archive.entries[nd[k % nd.len()]];
                let u = to_unit(&e.x, self.problem.lower(), self.problem.upper());
                c.push(
                    u.iter()
                        .map(|v| {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            (v + self.cfg.perturbation_std * z).clamp(0.0, 1.0)
                        })
                        .collect(),
                );
            }
            return Ok((c, false));
        }
        match models {
            Some(m) => {
                let (mu, var) = m.predict(w.as_slice())?;
                Ok((sample_factorized(&mu, &var, n, &lower, &upper, &mut rng), false))
            }
            None => Ok((latin_hypercube(n, &lower, &upper, &mut rng), true)),
        }
    }

    fn iterate(&mut self, iteration: usize, w: &PreferenceVector) -> Result<()> {
        let gp = self.fit_forward(w, iteration)?;
        let models = if self.cfg.variant == Variant::ParegoUcb {
            None
        } else {
            self.fit_inverse(iteration)?
        };
        let (cands, fallback) = self.candidates(models.as_ref(), w, iteration)?;
        let scores = ucb_scores(&gp, &cands, self.cfg.beta)?;
        let (lower, upper) = (self.problem.lower().to_vec(), self.problem.upper().to_vec());
        let raw: Vec<Vec<f64>> = cands.iter().map(|u| from_unit(u, &lower, &upper)).collect();
        // Highest score whose decision vector is not already in the archive.
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        let pick = order
            .into_iter()
            .find(|&i| !self.archive.contains(&raw[i]))
            .ok_or_else(|| Error::Numerical("every candidate duplicates an archived point".into()))?;
        let (mu, var) = gp.predict_one(&cands[pick])?;
        let max_ucb_probe = if self.cfg.probe_size > 0 {
            let (lo, hi) = self.unit_box();
            let probe = latin_hypercube(
                self.cfg.probe_size,
                &lo,
                &hi,
                &mut stream(self.cfg.seed, STREAM_PROBE, iteration),
            );
            let s = ucb_scores(&gp, &probe, self.cfg.beta)?;
            Some(s.into_iter().fold(f64::NEG_INFINITY, f64::max))
        } else {
            None
        };
        let lambdas = models
            .as_ref()
            .map(|m| m.models.iter().map(|im| im.lambda()).collect())
            .unwrap_or_default();
        let n_nondominated = self.archive.nondominated().len();
        let x = raw[pick].clone();
        let f = self.evaluate(x.clone(), iteration)?;
        self.trace.push(IterationRecord {
            iteration,
            evaluations: self.archive.len(),
            w: w.as_slice().to_vec(),
            x,
            f,
            candidate_index: pick,
            n_candidates: cands.len(),
            ucb: scores[pick],
            mu,
            sigma: var.sqrt(),
            max_ucb_probe,
            lambdas,
            fallback,
            n_nondominated,
        });
        Ok(())
    }

    fn into_result(self, inverse_models: Option<InverseModelSet>) -> RunResult {
        let nondominated = self.archive.nondominated();
        RunResult {
            problem_id: self.problem.id().to_string(),
            config: self.cfg.clone(),
            archive: self.archive,
            nondominated,
            inverse_models,
            trace: self.trace,
            preferences: self.prefs,
        }
    }
}

/// Runs one optimization.
///
/// `InvTrEmo` needs `source` and `overlap`; the other variants ignore them.
/// Everything is deterministic in `config.seed`.
pub fn run(
    problem: &Problem,
    source: Option<&InverseDataset>,
    overlap: Option<&OverlapMap>,
    config: &OptimizerConfig,
) -> std::result::Result<RunResult, RunError> {
    config.validate()?;
    let source = match config.variant {
        Variant::InvTrEmo => {
            let (ds, ov) = source.zip(overlap).ok_or_else(|| {
                Error::Config("the transfer variant needs a source dataset and an overlap map".into())
            })?;
            ds.validate()?;
            ov.validate_dims(ds.d, problem.d())?;
            if ds.m != problem.m() {
                return Err(Error::DimensionMismatch {
                    expected: problem.m(),
                    got: ds.m,
                }
                .into());
            }
            Some((unit_source(ds), ov))
        }
        _ => None,
    };
    let prefs = generate_preference_set_with(
        problem.m(),
        config.n_prefs.max(problem.m()),
        config.seed,
        config.preference_method,
    )?;
    let mut lp = Loop {
        problem,
        cfg: config,
        source,
        archive: Archive::new(problem.m()),
        trace: Vec::new(),
        prefs,
        forward_warm: None,
    };

    let init = latin_hypercube(
        config.n_init,
        problem.lower(),
        problem.upper(),
        &mut stream(config.seed, STREAM_INIT, 0),
    );
    for x in init {
        if let Err(e) = lp.evaluate(x, 0) {
            return Err(RunError {
                error: e,
                partial: Some(Box::new(lp.into_result(None))),
            });
        }
    }
    if config.budget == config.n_init {
        return Ok(lp.into_result(None));
    }

    let mut pref_rng = stream(config.seed, STREAM_PREFS, 0);
    let mut order: Vec<usize> = Vec::new();
    let mut iteration = 0;
    while lp.archive.len() < config.budget {
        iteration += 1;
        if order.is_empty() {
            order = (0..lp.prefs.len()).collect();
            order.shuffle(&mut pref_rng);
            order.reverse();
        }
        let w = lp.prefs[order.pop().unwrap()].clone();
        if let Err(e) = lp.iterate(iteration, &w) {
            return Err(RunError {
                error: e,
                partial: Some(Box::new(lp.into_result(None))),
            });
        }
    }
    let final_models = if config.variant == Variant::ParegoUcb {
        // The baseline has no inverse models during search; fit plain ones
        // at the end so every variant can be scored the same way.
        let mut plain = config.clone();
        plain.variant = Variant::ZeroT;
        let tmp = Loop {
            problem,
            cfg: &plain,
            source: None,
            archive: lp.archive.clone(),
            trace: Vec::new(),
            prefs: Vec::new(),
            forward_warm: None,
        };
        tmp.fit_inverse(iteration + 1)
    } else {
        lp.fit_inverse(iteration + 1)
    };
    match final_models {
        Ok(m) => Ok(lp.into_result(m)),
        Err(e) => Err(RunError {
            error: e,
            partial: Some(Box::new(lp.into_result(None))),
        }),
    }
}
