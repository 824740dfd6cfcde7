//! Tchebycheff scalarization and preference-vector utilities.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problems::{lattice_size, spread_simplex_points, Problem};

/// Tolerance used when a caller hands over a vector that should already be
/// on the simplex.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// A point on the probability simplex.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct PreferenceVector {
    w: Vec<f64>,
}

impl PreferenceVector {
    /// Accepts `w` if it is on the simplex within [`SIMPLEX_TOL`].
    pub fn new(w: Vec<f64>) -> Result<Self> {
        Self::within(w, SIMPLEX_TOL)
    }

    /// Accepts `w` if every component is `>= -tol` and the sum is within `tol`
    /// of one, then clips and renormalizes exactly.
    pub fn within(w: Vec<f64>, tol: f64) -> Result<Self> {
        if w.is_empty() {
            return Err(Error::NotOnSimplex("empty vector".into()));
        }
        if let Some(i) = w.iter().position(|v| !v.is_finite() || *v < -tol) {
            return Err(Error::NotOnSimplex(format!("component {i} = {}", w[i])));
        }
        let s: f64 = w.iter().sum();
        if (s - 1.0).abs() > tol {
            return Err(Error::NotOnSimplex(format!("components sum to {s}")));
        }
        Ok(Self::renormalized(w))
    }

    fn renormalized(mut w: Vec<f64>) -> Self {
        w.iter_mut().for_each(|v| *v = v.max(0.0));
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= s);
        PreferenceVector { w }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.w
    }

    pub fn m(&self) -> usize {
        self.w.len()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.w
    }
}

impl TryFrom<Vec<f64>> for PreferenceVector {
    type Error = Error;

    fn try_from(w: Vec<f64>) -> Result<Self> {
        Self::within(w, 1e-6)
    }
}

impl From<PreferenceVector> for Vec<f64> {
    fn from(p: PreferenceVector) -> Self {
        p.w
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalarizationConfig {
    pub eta: f64,
}

impl Default for ScalarizationConfig {
    fn default() -> Self {
        ScalarizationConfig { eta: 0.05 }
    }
}

/// `max_i(w_i f_i) + eta * sum_i(w_i f_i)`.
pub fn augmented_tchebycheff(f_norm: &[f64], w: &PreferenceVector, cfg: ScalarizationConfig) -> Result<f64> {
    if f_norm.len() != w.m() {
        return Err(Error::DimensionMismatch {
            expected: w.m(),
            got: f_norm.len(),
        });
    }
    Ok(tchebycheff_unchecked(f_norm, w.as_slice(), cfg.eta))
}

#[inline]
pub(crate) fn tchebycheff_unchecked(f: &[f64], w: &[f64], eta: f64) -> f64 {
    let mut mx = f64::NEG_INFINITY;
    let mut sum = 0.0;
    for (a, b) in f.iter().zip(w) {
        let t = a * b;
        mx = mx.max(t);
        sum += t;
    }
    mx + eta * sum
}

/// Preference vector whose Tchebycheff subproblem is solved by `f_norm`:
/// `c_i = sum(f) / f_i`, `w = c / sum(c)`.
pub fn preference_from_objectives(f_norm: &[f64]) -> Result<PreferenceVector> {
    if f_norm.is_empty() {
        return Err(Error::Empty("objective vector"));
    }
    if let Some(i) = f_norm.iter().position(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::Domain(format!("objective {i} = {} must be positive", f_norm[i])));
    }
    let total: f64 = f_norm.iter().sum();
    let c: Vec<f64> = f_norm.iter().map(|f| total / f).collect();
    let cs: f64 = c.iter().sum();
    Ok(PreferenceVector {
        w: c.into_iter().map(|v| v / cs).collect(),
    })
}

/// All simplex points with coordinates in `{0, 1/h, .., 1}`; the first point
/// is `(1, 0, .., 0)`.
pub fn das_dennis(m: usize, h: usize) -> Vec<Vec<f64>> {
    fn rec(m: usize, left: usize, h: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<f64>>) {
        if cur.len() == m - 1 {
            cur.push(left);
            out.push(cur.iter().map(|&k| k as f64 / h as f64).collect());
            cur.pop();
            return;
        }
        for k in (0..=left).rev() {
            cur.push(k);
            rec(m, left - k, h, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    if m == 0 || h == 0 {
        return out;
    }
    rec(m, h, h, &mut Vec::with_capacity(m), &mut out);
    out
}

/// Euclidean projection onto the probability simplex.
pub fn project_to_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut css = 0.0;
    let mut theta = 0.0;
    for (i, &ui) in u.iter().enumerate() {
        css += ui;
        let t = (css - 1.0) / (i + 1) as f64;
        if ui - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|x| (x - theta).max(0.0)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum PreferenceMethod {
    #[default]
    Riesz,
    DasDennis,
}

/// A generated preference set with the settings that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferenceSet {
    pub method: PreferenceMethod,
    pub seed: u64,
    pub vectors: Vec<PreferenceVector>,
}

/// `n` well-spread simplex points.
///
/// Riesz mode starts from the largest simplex lattice with at most `n`
/// points, fills the rest with seeded random simplex points, and then runs
/// projected gradient descent on the Riesz `s`-energy with `s = m^2`.
pub fn generate_preference_set(m: usize, n: usize, seed: u64) -> Result<Vec<PreferenceVector>> {
    generate_preference_set_with(m, n, seed, PreferenceMethod::Riesz)
}

pub fn generate_preference_set_with(
    m: usize,
    n: usize,
    seed: u64,
    method: PreferenceMethod,
) -> Result<Vec<PreferenceVector>> {
    if m < 2 {
        return Err(Error::Config(format!("need m >= 2, got {m}")));
    }
    if n < m {
        return Err(Error::Config(format!("need n >= m, got n = {n}, m = {m}")));
    }
    let points = match method {
        PreferenceMethod::DasDennis => spread_simplex_points(m, n),
        PreferenceMethod::Riesz => riesz(m, n, seed),
    };
    Ok(points.into_iter().map(PreferenceVector::renormalized).collect())
}

fn riesz_log_energy(pts: &[Vec<f64>], s: f64) -> f64 {
    let mut terms = Vec::with_capacity(pts.len() * pts.len() / 2);
    for i in 0..pts.len() {
        for j in 0..i {
            let d2: f64 = pts[i].iter().zip(&pts[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            terms.push(-0.5 * s * d2.max(1e-300).ln());
        }
    }
    let mx = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    mx + terms.iter().map(|t| (t - mx).exp()).sum::<f64>().ln()
}

fn riesz(m: usize, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut h = 1;
    while lattice_size(m, h + 1) <= n {
        h += 1;
    }
    let mut pts = das_dennis(m, h);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    while pts.len() < n {
        let e: Vec<f64> = (0..m).map(|_| Exp1.sample(&mut rng)).collect();
        let s: f64 = e.iter().sum();
        pts.push(e.into_iter().map(|v| v / s).collect());
    }
    let s = (m * m) as f64;
    let mut energy = riesz_log_energy(&pts, s);
    let mut step = 0.1 / h as f64;
    for _ in 0..1000 {
        // Forces scaled relative to the largest pairwise term to avoid overflow.
        let mut min_d2 = f64::INFINITY;
        for i in 0..n {
            for j in 0..i {
                let d2: f64 = pts[i].iter().zip(&pts[j]).map(|(a, b)| (a - b) * (a - b)).sum();
                min_d2 = min_d2.min(d2);
            }
        }
        let dmin = min_d2.max(1e-300).sqrt();
        let mut force = vec![vec![0.0; m]; n];
        for i in 0..n {
            for j in 0..i {
                let diff: Vec<f64> = pts[i].iter().zip(&pts[j]).map(|(a, b)| a - b).collect();
                let d = diff.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
                let mag = (dmin / d).powf(s + 1.0) / d;
                for k in 0..m {
                    force[i][k] += mag * diff[k];
                    force[j][k] -= mag * diff[k];
                }
            }
        }
        let fmax = force
            .iter()
            .map(|f| f.iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max);
        if fmax == 0.0 {
            break;
        }
        let cand: Vec<Vec<f64>> = pts
            .iter()
            .zip(&force)
            .map(|(p, f)| {
                let moved: Vec<f64> = p.iter().zip(f).map(|(a, b)| a + step * b / fmax).collect();
                project_to_simplex(&moved)
            })
            .collect();
        let e = riesz_log_energy(&cand, s);
        if e < energy {
            pts = cand;
            energy = e;
            step *= 1.1;
        } else {
            step *= 0.5;
            if step < 1e-9 {
                break;
            }
        }
    }
    pts
}

/// With `eta = 0`, checks that the normalized objective vector `pareto_f`
/// minimizes the Tchebycheff function of its own preference vector over
/// `candidates_f`.
pub fn check_proposition1_objectives(pareto_f: &[f64], candidates_f: &[Vec<f64>]) -> Result<bool> {
    let w = preference_from_objectives(pareto_f)?;
    let cfg = ScalarizationConfig { eta: 0.0 };
    let own = augmented_tchebycheff(pareto_f, &w, cfg)?;
    for c in candidates_f {
        let v = augmented_tchebycheff(c, &w, cfg)?;
        if v < own * (1.0 - 1e-12) {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Evaluates `pareto_x` and `candidates` on `problem` (whose objectives are
/// assumed to lie in `(0, 1]`) and applies [`check_proposition1_objectives`].
pub fn check_proposition1(problem: &Problem, pareto_x: &[f64], candidates: &[Vec<f64>]) -> Result<bool> {
    let pf = problem.evaluate(pareto_x)?;
    let cf = candidates
        .iter()
        .map(|x| problem.evaluate(x))
        .collect::<Result<Vec<_>>>()?;
    check_proposition1_objectives(&pf, &cf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::sync::Arc;

    fn pv(w: &[f64]) -> PreferenceVector {
        PreferenceVector::new(w.to_vec()).unwrap()
    }

    #[test]
    fn tchebycheff_examples() {
        let cfg0 = ScalarizationConfig { eta: 0.0 };
        assert_eq!(augmented_tchebycheff(&[0.7, 0.2], &pv(&[1.0, 0.0]), cfg0).unwrap(), 0.7);
        let v = augmented_tchebycheff(&[0.4, 0.6], &pv(&[0.5, 0.5]), ScalarizationConfig::default()).unwrap();
        assert!((v - 0.325).abs() < 1e-15);
        assert!(augmented_tchebycheff(&[0.4], &pv(&[0.5, 0.5]), cfg0).is_err());
    }

    #[test]
    fn preference_examples() {
        assert_eq!(preference_from_objectives(&[0.5, 0.5]).unwrap().as_slice(), &[0.5, 0.5]);
        let w = preference_from_objectives(&[1.0 / 3.0; 3]).unwrap();
        assert!(w.as_slice().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        let w = preference_from_objectives(&[0.2, 0.8]).unwrap();
        assert!((w.as_slice()[0] - 0.8).abs() < 1e-15 && (w.as_slice()[1] - 0.2).abs() < 1e-15);
        assert!(matches!(preference_from_objectives(&[0.0, 1.0]), Err(Error::Domain(_))));
    }

    #[test]
    fn simplex_validation() {
        assert!(PreferenceVector::new(vec![0.6, 0.6]).is_err());
        assert!(PreferenceVector::new(vec![-0.1, 1.1]).is_err());
        assert!(PreferenceVector::within(vec![0.5, 0.5 + 1e-7], 1e-6).is_ok());
        let back: PreferenceVector = serde_json::from_str("[0.25,0.75]").unwrap();
        assert_eq!(back.as_slice(), &[0.25, 0.75]);
        assert!(serde_json::from_str::<PreferenceVector>("[0.6,0.6]").is_err());
    }

    #[test]
    fn lattice_counts_and_order() {
        let l = das_dennis(3, 4);
        assert_eq!(l.len(), 15);
        assert_eq!(l.len(), lattice_size(3, 4));
        assert_eq!(l[0], vec![1.0, 0.0, 0.0]);
        for p in &l {
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn riesz_segment_is_uniform() {
        let w = generate_preference_set(2, 3, 0).unwrap();
        let mut pts: Vec<Vec<f64>> = w.into_iter().map(|p| p.into_vec()).collect();
        pts.sort_by(|a, b| b[0].total_cmp(&a[0]));
        for (p, e) in pts.iter().zip([[1.0, 0.0], [0.5, 0.5], [0.0, 1.0]]) {
            assert!((p[0] - e[0]).abs() < 1e-6 && (p[1] - e[1]).abs() < 1e-6, "{pts:?}");
        }
    }

    fn min_pairwise(pts: &[Vec<f64>]) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..pts.len() {
            for j in 0..i {
                let d: f64 = pts[i].iter().zip(&pts[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
                best = best.min(d.sqrt());
            }
        }
        best
    }

    #[test]
    fn riesz_fifty_points_spread() {
        let w = generate_preference_set(3, 50, 1).unwrap();
        assert_eq!(w.len(), 50);
        let pts: Vec<Vec<f64>> = w.iter().map(|p| p.as_slice().to_vec()).collect();
        // The 45-point lattice is the closest lattice size not above 50.
        let lattice = min_pairwise(&das_dennis(3, 8));
        assert!(
            min_pairwise(&pts) >= 0.8 * lattice,
            "{} vs {}",
            min_pairwise(&pts),
            lattice
        );
        for p in &w {
            assert!((p.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(p.as_slice().iter().all(|v| *v >= 0.0));
        }
        for axis in 0..3 {
            assert!(pts.iter().any(|p| p[axis] > 1.0 - 1e-6), "vertex {axis} missing");
        }
        assert_eq!(w, generate_preference_set(3, 50, 1).unwrap());
    }

    #[test]
    fn preference_set_errors_and_fallback() {
        assert!(generate_preference_set(3, 2, 0).is_err());
        let dd = generate_preference_set_with(3, 15, 0, PreferenceMethod::DasDennis).unwrap();
        assert_eq!(dd.len(), 15);
    }

    #[test]
    fn proposition1_examples() {
        let set = vec![vec![0.2, 0.8], vec![0.5, 0.5], vec![0.8, 0.2]];
        assert!(check_proposition1_objectives(&[0.5, 0.5], &set).unwrap());
        assert!(check_proposition1_objectives(&[0.3, 0.4], &[vec![0.3, 0.4]]).unwrap());
        // A dominated point can be beaten.
        assert!(!check_proposition1_objectives(&[0.6, 0.6], &[vec![0.5, 0.5]]).unwrap());
    }

    #[test]
    fn proposition1_through_problem() {
        let table = vec![vec![0.2, 0.8], vec![0.5, 0.5], vec![0.8, 0.2]];
        let t = table.clone();
        let obj: Arc<dyn crate::problems::Objective> = Arc::new(move |x: &[f64]| Ok(t[x[0].round() as usize].clone()));
        let p = Problem::new("table", 2, vec![0.0], vec![2.0], obj).unwrap();
        let cands = vec![vec![0.0], vec![2.0]];
        assert!(check_proposition1(&p, &[1.0], &cands).unwrap());
    }

    proptest! {
        #[test]
        fn preference_scale_invariant(f in prop::collection::vec(0.01f64..1.0, 2..6), k in 0.1f64..10.0) {
            let a = preference_from_objectives(&f).unwrap();
            let g: Vec<f64> = f.iter().map(|v| v * k).collect();
            let b = preference_from_objectives(&g).unwrap();
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn projection_lands_on_simplex(v in prop::collection::vec(-2.0f64..2.0, 2..7)) {
            let p = project_to_simplex(&v);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|x| *x >= 0.0));
        }

        #[test]
        fn own_preference_argmin_homogeneous(
            cands in prop::collection::vec(prop::collection::vec(0.01f64..1.0, 3), 1..10),
            w in prop::collection::vec(0.01f64..1.0, 3),
            k in 0.1f64..10.0,
        ) {
            let s: f64 = w.iter().sum();
            let w1 = pv(&w.iter().map(|v| v / s).collect::<Vec<_>>());
            let scaled: Vec<f64> = w.iter().map(|v| v * k).collect();
            let s2: f64 = scaled.iter().sum();
            let w2 = pv(&scaled.iter().map(|v| v / s2).collect::<Vec<_>>());
            let cfg = ScalarizationConfig::default();
            let argmin = |w: &PreferenceVector| {
                cands.iter().enumerate()
                    .map(|(i, c)| (augmented_tchebycheff(c, w, cfg).unwrap(), i))
                    .fold((f64::INFINITY, 0), |a, b| if b.0 < a.0 { b } else { a }).1
            };
            prop_assert_eq!(argmin(&w1), argmin(&w2));
        }
    }
}
