//! Box-bounded multiobjective problems and the modified DTLZ benchmark family.
//!
//! Every mDTLZ instance splits its decision vector into a position part
//! `x_I = (x_1, .., x_{m-1})`, which selects a point on the Pareto front, and
//! a distance part `x_II = (x_m, .., x_d)`, which is optimal at `0.5 + delta2`.
//! `delta1` bends the map from `x_I` to the front without changing the front
//! itself; `delta2` shifts the Pareto set inside the box.

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::decomposition::das_dennis;
use crate::error::{Error, Result};

/// A deterministic vector-valued objective.
pub trait Objective: Send + Sync {
    fn evaluate(&self, x: &[f64]) -> Result<Vec<f64>>;
}

impl<F> Objective for F
where
    F: Fn(&[f64]) -> Result<Vec<f64>> + Send + Sync,
{
    fn evaluate(&self, x: &[f64]) -> Result<Vec<f64>> {
        self(x)
    }
}

/// A black-box minimization problem over a box.
#[derive(Clone)]
pub struct Problem {
    id: String,
    m: usize,
    lower: Vec<f64>,
    upper: Vec<f64>,
    objective: Arc<dyn Objective>,
    spec: Option<MdtlzSpec>,
}

impl fmt::Debug for Problem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Problem")
            .field("id", &self.id)
            .field("d", &self.d())
            .field("m", &self.m)
            .finish()
    }
}

impl Problem {
    pub fn new(
        id: impl Into<String>,
        m: usize,
        lower: Vec<f64>,
        upper: Vec<f64>,
        objective: Arc<dyn Objective>,
    ) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::DimensionMismatch {
                expected: lower.len(),
                got: upper.len(),
            });
        }
        if lower.is_empty() {
            return Err(Error::InvalidSpec("decision dimension must be positive".into()));
        }
        if m < 2 {
            return Err(Error::InvalidSpec(format!("need at least 2 objectives, got {m}")));
        }
        if let Some(j) = (0..lower.len()).find(|&j| !(lower[j] < upper[j])) {
            return Err(Error::InvalidSpec(format!(
                "lower[{j}] = {} is not below upper[{j}] = {}",
                lower[j], upper[j]
            )));
        }
        Ok(Problem {
            id: id.into(),
            m,
            lower,
            upper,
            objective,
            spec: None,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn d(&self) -> usize {
        self.lower.len()
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    /// The benchmark spec this problem was built from, if any.
    pub fn spec(&self) -> Option<&MdtlzSpec> {
        self.spec.as_ref()
    }

    pub fn check_bounds(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.d() {
            return Err(Error::DimensionMismatch {
                expected: self.d(),
                got: x.len(),
            });
        }
        for (j, &v) in x.iter().enumerate() {
            if !(v >= self.lower[j] && v <= self.upper[j]) {
                return Err(Error::OutOfBounds {
                    index: j,
                    value: v,
                    lower: self.lower[j],
                    upper: self.upper[j],
                });
            }
        }
        Ok(())
    }

    pub fn evaluate(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_bounds(x)?;
        let f = self.objective.evaluate(x)?;
        if f.len() != self.m {
            return Err(Error::Evaluation(format!(
                "{} returned {} objectives, expected {}",
                self.id,
                f.len(),
                self.m
            )));
        }
        if f.iter().any(|v| !v.is_finite()) {
            return Err(Error::Evaluation(format!("{} returned non-finite objectives", self.id)));
        }
        Ok(f)
    }

    /// Clamps `x` componentwise into the box.
    pub fn clamp(&self, x: &mut [f64]) {
        for (j, v) in x.iter_mut().enumerate() {
            *v = v.clamp(self.lower[j], self.upper[j]);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    #[serde(rename = "DTLZ1")]
    Dtlz1,
    #[serde(rename = "DTLZ2")]
    Dtlz2,
    #[serde(rename = "DTLZ3")]
    Dtlz3,
    #[serde(rename = "DTLZ4")]
    Dtlz4,
}

impl Family {
    fn number(self) -> u8 {
        match self {
            Family::Dtlz1 => 1,
            Family::Dtlz2 => 2,
            Family::Dtlz3 => 3,
            Family::Dtlz4 => 4,
        }
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().trim_start_matches('M') {
            "DTLZ1" => Ok(Family::Dtlz1),
            "DTLZ2" => Ok(Family::Dtlz2),
            "DTLZ3" => Ok(Family::Dtlz3),
            "DTLZ4" => Ok(Family::Dtlz4),
            other => Err(Error::InvalidSpec(format!("unknown family {other:?}"))),
        }
    }
}

/// Parameters of one mDTLZ / inverted-mDTLZ instance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MdtlzSpec {
    pub family: Family,
    pub inverted: bool,
    pub delta1: f64,
    pub delta2: f64,
    pub d: usize,
    pub m: usize,
}

impl MdtlzSpec {
    pub fn new(family: Family, inverted: bool, delta1: f64, delta2: f64, d: usize, m: usize) -> Self {
        MdtlzSpec {
            family,
            inverted,
            delta1,
            delta2,
            d,
            m,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m < 2 {
            return Err(Error::InvalidSpec(format!("m must be >= 2, got {}", self.m)));
        }
        if self.d < self.m {
            return Err(Error::InvalidSpec(format!(
                "d = {} leaves no distance variable for m = {}",
                self.d, self.m
            )));
        }
        if !(self.delta1 > 0.0 && self.delta1 <= 1.0) {
            return Err(Error::InvalidSpec(format!("delta1 = {} not in (0, 1]", self.delta1)));
        }
        if !(self.delta2 >= 0.0 && self.delta2 < 0.5) {
            return Err(Error::InvalidSpec(format!("delta2 = {} not in [0, 0.5)", self.delta2)));
        }
        Ok(())
    }

    pub fn id(&self) -> String {
        format!(
            "mDTLZ{}{}-({},{})-d{}-m{}",
            self.family.number(),
            if self.inverted { "^-1" } else { "" },
            self.delta1,
            self.delta2,
            self.d,
            self.m
        )
    }

    /// Optimal value of every distance variable.
    pub fn optimal_distance_value(&self) -> f64 {
        0.5 + self.delta2
    }

    fn distance(&self, x: &[f64]) -> f64 {
        let k = (self.d - self.m + 1) as f64;
        let z = x[self.m - 1..].iter().map(|&v| v - 0.5 - self.delta2);
        match self.family {
            Family::Dtlz1 => k + z.map(|z| z * z - (2.0 * std::f64::consts::PI * z).cos()).sum::<f64>(),
            Family::Dtlz3 => {
                0.1 * k
                    + z.map(|z| z * z - 0.1 * (2.0 * std::f64::consts::PI * z).cos())
                        .sum::<f64>()
            }
            Family::Dtlz2 | Family::Dtlz4 => z.map(|z| z * z).sum(),
        }
    }

    fn position_exponent(&self) -> f64 {
        match self.family {
            Family::Dtlz4 => 2.0 * self.delta1,
            _ => self.delta1,
        }
    }

    /// Shape terms `h_i(x_I)` such that `f_i = (1 + g) h_i` (or `-(1 - g) h_i`).
    fn shape(&self, x: &[f64]) -> Vec<f64> {
        let m = self.m;
        let alpha = self.position_exponent();
        let y: Vec<f64> = x[..m - 1].iter().map(|&v| v.powf(alpha)).collect();
        (0..m)
            .map(|i| match self.family {
                Family::Dtlz1 => {
                    let mut h = 0.5 * y[..m - 1 - i].iter().product::<f64>();
                    if i > 0 {
                        h *= 1.0 - y[m - 1 - i];
                    }
                    h
                }
                _ => {
                    let mut h: f64 = y[..m - 1 - i].iter().map(|&v| (FRAC_PI_2 * v).cos()).product();
                    if i > 0 {
                        h *= (FRAC_PI_2 * y[m - 1 - i]).sin();
                    }
                    h
                }
            })
            .collect()
    }

    /// Objective vector without bounds checking.
    pub fn objectives(&self, x: &[f64]) -> Vec<f64> {
        let g = self.distance(x);
        let h = self.shape(x);
        if self.inverted {
            h.into_iter().map(|h| -(1.0 - g) * h).collect()
        } else {
            h.into_iter().map(|h| (1.0 + g) * h).collect()
        }
    }

    /// Position variables `x_I` reaching the front point in direction `u`
    /// (a simplex point).
    pub fn position_for(&self, u: &[f64]) -> Vec<f64> {
        let m = self.m;
        let inv_alpha = 1.0 / self.position_exponent();
        let y: Vec<f64> = match self.family {
            Family::Dtlz1 => {
                let total: f64 = u.iter().sum();
                let mut prev = 1.0;
                (1..m)
                    .map(|k| {
                        let p: f64 = u[..m - k].iter().sum::<f64>() / total;
                        let yk = if prev > 0.0 { p / prev } else { 0.0 };
                        prev = p;
                        yk
                    })
                    .collect()
            }
            _ => (1..m)
                .map(|k| {
                    let r = u[..m - k].iter().map(|v| v * v).sum::<f64>().sqrt();
                    u[m - k].atan2(r) / FRAC_PI_2
                })
                .collect(),
        };
        y.into_iter()
            .map(|v| v.clamp(0.0, 1.0).powf(inv_alpha).clamp(0.0, 1.0))
            .collect()
    }
}

/// Builds the benchmark problem for `spec` on `[0, 1]^d`.
pub fn make_mdtlz(spec: MdtlzSpec) -> Result<Problem> {
    spec.validate()?;
    let objective: Arc<dyn Objective> = Arc::new(move |x: &[f64]| Ok(spec.objectives(x)));
    let mut p = Problem::new(spec.id(), spec.m, vec![0.0; spec.d], vec![1.0; spec.d], objective)?;
    p.spec = Some(spec);
    Ok(p)
}

/// A Pareto-optimal point with its objective vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrontPoint {
    pub x: Vec<f64>,
    pub f: Vec<f64>,
}

/// `n` analytically Pareto-optimal points spread over the front.
///
/// Directions come from the smallest simplex lattice with at least `n`
/// points; when that lattice is larger than `n` it is thinned by greedy
/// farthest-point selection starting from the first vertex.
pub fn reference_front(spec: &MdtlzSpec, n: usize) -> Result<Vec<FrontPoint>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Empty("reference front size"));
    }
    let dirs = spread_simplex_points(spec.m, n);
    let xd = spec.optimal_distance_value();
    Ok(dirs
        .iter()
        .map(|u| {
            let mut x = spec.position_for(u);
            x.resize(spec.d, xd);
            let f = spec.objectives(&x);
            FrontPoint { x, f }
        })
        .collect())
}

/// Exactly `n` well-spread simplex points (lattice plus farthest-point thinning).
pub fn spread_simplex_points(m: usize, n: usize) -> Vec<Vec<f64>> {
    let mut h = 1;
    while lattice_size(m, h) < n {
        h += 1;
    }
    let lattice = das_dennis(m, h);
    if lattice.len() == n {
        return lattice;
    }
    farthest_point_subset(&lattice, n)
}

pub(crate) fn lattice_size(m: usize, h: usize) -> usize {
    // C(h + m - 1, m - 1)
    let mut c: u128 = 1;
    for i in 1..m as u128 {
        c = c * (h as u128 + i) / i;
    }
    c.min(usize::MAX as u128) as usize
}

fn farthest_point_subset(points: &[Vec<f64>], n: usize) -> Vec<Vec<f64>> {
    let mut chosen = Vec::with_capacity(n);
    let mut dist = vec![f64::INFINITY; points.len()];
    let mut next = 0;
    for _ in 0..n {
        chosen.push(points[next].clone());
        dist[next] = -1.0;
        let c = &points[next];
        let mut best = (f64::NEG_INFINITY, 0);
        for (i, p) in points.iter().enumerate() {
            if dist[i] < 0.0 {
                continue;
            }
            let d2: f64 = p.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
            if d2 < dist[i] {
                dist[i] = d2;
            }
            if dist[i] > best.0 {
                best = (dist[i], i);
            }
        }
        next = best.1;
    }
    chosen
}

/// Running min/max normalization of objective vectors into `(0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveNormalizer {
    pub ideal: Vec<f64>,
    pub nadir: Vec<f64>,
    pub epsilon: f64,
    /// Set when some axis has `nadir == ideal`; that axis maps to 1.
    #[serde(default)]
    pub degenerate: bool,
}

pub const NORMALIZER_EPSILON: f64 = 1e-6;

impl ObjectiveNormalizer {
    pub fn new(m: usize) -> Self {
        ObjectiveNormalizer {
            ideal: vec![f64::INFINITY; m],
            nadir: vec![f64::NEG_INFINITY; m],
            epsilon: NORMALIZER_EPSILON,
            degenerate: true,
        }
    }

    pub fn from_points<'a, I>(m: usize, points: I) -> Self
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let mut n = Self::new(m);
        for f in points {
            n.update(f);
        }
        n
    }

    pub fn update(&mut self, f: &[f64]) {
        for (i, &v) in f.iter().enumerate() {
            self.ideal[i] = self.ideal[i].min(v);
            self.nadir[i] = self.nadir[i].max(v);
        }
        self.degenerate = self.ideal.iter().zip(&self.nadir).any(|(lo, hi)| !(hi > lo));
    }

    pub fn normalize(&self, f: &[f64]) -> Vec<f64> {
        f.iter()
            .enumerate()
            .map(|(i, &v)| {
                let range = self.nadir[i] - self.ideal[i];
                if range > 0.0 && range.is_finite() {
                    ((v - self.ideal[i]) / range).clamp(self.epsilon, 1.0)
                } else {
                    1.0
                }
            })
            .collect()
    }
}
