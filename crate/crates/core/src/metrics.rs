//! Quality indicators and cross-seed aggregation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::dataset::DatasetRow;
use crate::decomposition::{preference_from_objectives, tchebycheff_unchecked};
use crate::error::{Error, Result};
use crate::inverse::{InverseModelSet, OverlapMap};
use crate::nsga2::nondominated_indices;
use crate::optimizer::RunResult;
use crate::problems::{reference_front, MdtlzSpec, ObjectiveNormalizer, Problem};

/// Default reference-set size for IGD and the inverse-model test set.
pub const REFERENCE_SIZE: usize = 10_000;
pub const CHECKPOINTS: [usize; 4] = [25, 50, 75, 100];

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean distance from each reference point to its nearest approximation point.
pub fn igd(reference: &[Vec<f64>], approx: &[Vec<f64>]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Empty("reference set"));
    }
    if approx.is_empty() {
        return Err(Error::Empty("approximation set"));
    }
    let m = reference[0].len();
    for p in reference.iter().chain(approx) {
        if p.len() != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                got: p.len(),
            });
        }
    }
    let total: f64 = reference
        .iter()
        .map(|r| approx.iter().map(|a| dist(r, a)).fold(f64::INFINITY, f64::min))
        .sum();
    Ok(total / reference.len() as f64)
}

/// Test set of Pareto-optimal solutions paired with their preference
/// vectors (objectives normalized over the front).
pub fn rmse_test_set(spec: &MdtlzSpec, n: usize) -> Result<Vec<DatasetRow>> {
    let front = reference_front(spec, n)?;
    let norm = ObjectiveNormalizer::from_points(spec.m, front.iter().map(|p| p.f.as_slice()));
    front
        .into_iter()
        .map(|p| {
            let w = preference_from_objectives(&norm.normalize(&p.f))?;
            Ok(DatasetRow {
                w: w.into_vec(),
                x: p.x,
            })
        })
        .collect()
}

/// Objective-space root-mean-square error of the inverse models' mean
/// predictions (clamped into the box) against the test solutions.
pub fn rmse_inverse(models: &InverseModelSet, test_set: &[DatasetRow], problem: &Problem) -> Result<f64> {
    if test_set.is_empty() {
        return Err(Error::Empty("test set"));
    }
    if models.d() != problem.d() {
        return Err(Error::DimensionMismatch {
            expected: problem.d(),
            got: models.d(),
        });
    }
    let mut sq = 0.0;
    for row in test_set {
        let (x_pred, _, _) = models.predict_clamped(&row.w)?;
        let f_pred = problem.evaluate(&x_pred)?;
        let f_opt = problem.evaluate(&row.x)?;
        sq += f_pred.iter().zip(&f_opt).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok((sq / test_set.len() as f64).sqrt())
}

fn fnv1a(seed: u64, s: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if !(saa > 1e-300 && sbb > 1e-300) {
        return Err(Error::UndefinedCorrelation(
            "a scalarized sequence has zero variance".into(),
        ));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Pearson correlation between the two tasks' scalarized objectives.
///
/// Each sample shares one uniform value per overlap pair between the two
/// decision vectors; the remaining variables of each problem are filled from
/// a stream keyed by the seed and the problem id, so swapping the problems
/// (and the overlap pairs) gives the same value. Objectives are min-max
/// normalized per task over the sample, and both tasks use the same
/// uniformly drawn preference vector.
pub fn pearson_scalarized(
    source: &Problem,
    target: &Problem,
    overlap: &OverlapMap,
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    if n_samples < 100 {
        return Err(Error::Config(format!("need at least 100 samples, got {n_samples}")));
    }
    if source.m() != target.m() {
        return Err(Error::DimensionMismatch {
            expected: target.m(),
            got: source.m(),
        });
    }
    overlap.validate_dims(source.d(), target.d())?;
    let m = target.m();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fill_s = ChaCha8Rng::seed_from_u64(fnv1a(seed, source.id()));
    let mut fill_t = ChaCha8Rng::seed_from_u64(fnv1a(seed, target.id()));
    let place = |p: &Problem, j: usize, u: f64| p.lower()[j] + u * (p.upper()[j] - p.lower()[j]);

    let mut fs = Vec::with_capacity(n_samples);
    let mut ft = Vec::with_capacity(n_samples);
    let mut ws = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let shared: Vec<f64> = (0..overlap.q()).map(|_| rng.random()).collect();
        let e: Vec<f64> = (0..m).map(|_| Exp1.sample(&mut rng)).collect();
        let s: f64 = e.iter().sum();
        ws.push(e.into_iter().map(|v| v / s).collect::<Vec<f64>>());

        let mut xs: Vec<f64> = (0..source.d()).map(|j| place(source, j, fill_s.random())).collect();
        let mut xt: Vec<f64> = (0..target.d()).map(|j| place(target, j, fill_t.random())).collect();
        for (k, &(a, b)) in overlap.pairs().iter().enumerate() {
            xs[a] = place(source, a, shared[k]);
            xt[b] = place(target, b, shared[k]);
        }
        fs.push(source.evaluate(&xs)?);
        ft.push(target.evaluate(&xt)?);
    }
    let ns = ObjectiveNormalizer::from_points(m, fs.iter().map(|f| f.as_slice()));
    let nt = ObjectiveNormalizer::from_points(m, ft.iter().map(|f| f.as_slice()));
    let gs: Vec<f64> = fs
        .iter()
        .zip(&ws)
        .map(|(f, w)| tchebycheff_unchecked(&ns.normalize(f), w, 0.05))
        .collect();
    let gt: Vec<f64> = ft
        .iter()
        .zip(&ws)
        .map(|(f, w)| tchebycheff_unchecked(&nt.normalize(f), w, 0.05))
        .collect();
    pearson(&gs, &gt)
}

/// Median and quartiles (linear interpolation between order statistics).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quantiles {
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
}

fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

impl Quantiles {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("values"));
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Ok(Quantiles {
            median: quantile(&v, 0.5),
            q25: quantile(&v, 0.25),
            q75: quantile(&v, 0.75),
        })
    }
}

/// Reference data needed to score runs on one problem.
#[derive(Clone, Debug)]
pub struct Reference {
    pub problem: Problem,
    pub front: Vec<Vec<f64>>,
    pub test_set: Vec<DatasetRow>,
}

impl Reference {
    pub fn for_spec(spec: &MdtlzSpec, n: usize) -> Result<Self> {
        let problem = crate::problems::make_mdtlz(*spec)?;
        let test_set = rmse_test_set(spec, n)?;
        let front = test_set.iter().map(|r| spec.objectives(&r.x)).collect();
        Ok(Reference {
            problem,
            front,
            test_set,
        })
    }
}

/// Per-run values behind a report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub seed: u64,
    pub igd_by_checkpoint: BTreeMap<usize, f64>,
    pub rmse_final: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub problem_id: String,
    pub variant: String,
    pub seeds: usize,
    pub checkpoints: Vec<usize>,
    pub igd: BTreeMap<usize, Quantiles>,
    pub rmse_final: Option<Quantiles>,
    pub runs: Vec<RunMetrics>,
}

/// IGD of the dominance-filtered first `k` evaluations.
pub fn igd_at(run: &RunResult, front: &[Vec<f64>], k: usize) -> Result<f64> {
    let prefix: Vec<Vec<f64>> = run.archive.entries[..k.min(run.archive.len())]
        .iter()
        .map(|e| e.f.clone())
        .collect();
    let nd: Vec<Vec<f64>> = nondominated_indices(&prefix)
        .into_iter()
        .map(|i| prefix[i].clone())
        .collect();
    igd(front, &nd)
}

/// Scores one run at the checkpoints that fall inside `n_init..=budget`
/// (the final budget is always included).
pub fn run_metrics(run: &RunResult, reference: &Reference) -> Result<RunMetrics> {
    let mut igd_by_checkpoint = BTreeMap::new();
    for k in checkpoints_for(run.config.n_init, run.config.budget) {
        igd_by_checkpoint.insert(k, igd_at(run, &reference.front, k)?);
    }
    let rmse_final = match &run.inverse_models {
        Some(m) => Some(rmse_inverse(m, &reference.test_set, &reference.problem)?),
        None => None,
    };
    Ok(RunMetrics {
        seed: run.config.seed,
        igd_by_checkpoint,
        rmse_final,
    })
}

pub fn checkpoints_for(n_init: usize, budget: usize) -> Vec<usize> {
    let mut c: Vec<usize> = CHECKPOINTS
        .iter()
        .copied()
        .filter(|&k| k >= n_init && k <= budget)
        .collect();
    if c.last() != Some(&budget) {
        c.push(budget);
    }
    c
}

/// Aggregates runs of one problem and configuration (seeds may differ).
pub fn aggregate(runs: &[RunResult], reference: &Reference) -> Result<MetricReport> {
    let first = runs.first().ok_or(Error::Empty("runs"))?;
    for r in &runs[1..] {
        let mut a = r.config.clone();
        a.seed = first.config.seed;
        if r.problem_id != first.problem_id || a != first.config {
            return Err(Error::Incompatible(format!(
                "run with seed {} differs from run with seed {} in problem or configuration",
                r.config.seed, first.config.seed
            )));
        }
    }
    if reference.problem.id() != first.problem_id {
        return Err(Error::Incompatible(format!(
            "reference is for {}, runs are for {}",
            reference.problem.id(),
            first.problem_id
        )));
    }
    let per_run = runs
        .iter()
        .map(|r| run_metrics(r, reference))
        .collect::<Result<Vec<_>>>()?;
    report_from(first.problem_id.clone(), first.config.variant.to_string(), per_run)
}

/// Builds a report from already computed per-run metrics.
pub fn report_from(problem_id: String, variant: String, runs: Vec<RunMetrics>) -> Result<MetricReport> {
    let first = runs.first().ok_or(Error::Empty("runs"))?;
    let checkpoints: Vec<usize> = first.igd_by_checkpoint.keys().copied().collect();
    let mut igd_q = BTreeMap::new();
    for &k in &checkpoints {
        let vals = runs
            .iter()
            .map(|r| {
                r.igd_by_checkpoint
                    .get(&k)
                    .copied()
                    .ok_or_else(|| Error::Incompatible(format!("seed {} has no IGD at {k}", r.seed)))
            })
            .collect::<Result<Vec<_>>>()?;
        igd_q.insert(k, Quantiles::of(&vals)?);
    }
    let rmse: Vec<f64> = runs.iter().filter_map(|r| r.rmse_final).collect();
    let rmse_final = if rmse.len() == runs.len() {
        Some(Quantiles::of(&rmse)?)
    } else {
        None
    };
    Ok(MetricReport {
        problem_id,
        variant,
        seeds: runs.len(),
        checkpoints,
        igd: igd_q,
        rmse_final,
        runs,
    })
}

impl MetricReport {
    /// One row per metric, checkpoint and statistic.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("problem,variant,metric,evaluations,statistic,value\n");
        let mut row = |metric: &str, k: usize, q: &Quantiles| {
            for (name, v) in [("median", q.median), ("q25", q.q25), ("q75", q.q75)] {
                let _ = writeln!(s, "{},{},{metric},{k},{name},{v}", self.problem_id, self.variant);
            }
        };
        for (k, q) in &self.igd {
            row("igd", *k, q);
        }
        if let (Some(q), Some(k)) = (&self.rmse_final, self.checkpoints.last()) {
            row("rmse", *k, q);
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}
