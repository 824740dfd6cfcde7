//! Elitist genetic search (nondominated sorting with crowding distance,
//! SBX crossover, polynomial mutation) used to build source datasets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{DatasetRow, InverseDataset, Provenance};
use crate::decomposition::preference_from_objectives;
use crate::error::{Error, Result};
use crate::problems::{ObjectiveNormalizer, Problem};

/// `a` Pareto-dominates `b` (minimization).
pub fn dominates(a: &[f64], b: &[f64]) -> bool {
    let mut strictly = false;
    for (x, y) in a.iter().zip(b) {
        if x > y {
            return false;
        }
        if x < y {
            strictly = true;
        }
    }
    strictly
}

/// Indices of the points not dominated by any other point, in input order.
pub fn nondominated_indices(fs: &[Vec<f64>]) -> Vec<usize> {
    (0..fs.len())
        .filter(|&i| !fs.iter().enumerate().any(|(j, g)| j != i && dominates(g, &fs[i])))
        .collect()
}

/// Fast nondominated sort; returns fronts of indices, best first.
pub fn nondominated_sort(fs: &[Vec<f64>]) -> Vec<Vec<usize>> {
    let n = fs.len();
    let mut dominated_by: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut count = vec![0usize; n];
    for i in 0..n {
        for j in 0..n {
            if i != j && dominates(&fs[i], &fs[j]) {
                dominated_by[i].push(j);
            } else if i != j && dominates(&fs[j], &fs[i]) {
                count[i] += 1;
            }
        }
    }
    let mut fronts = Vec::new();
    let mut current: Vec<usize> = (0..n).filter(|&i| count[i] == 0).collect();
    while !current.is_empty() {
        let mut next = Vec::new();
        for &i in &current {
            for &j in &dominated_by[i] {
                count[j] -= 1;
                if count[j] == 0 {
                    next.push(j);
                }
            }
        }
        next.sort_unstable();
        fronts.push(current);
        current = next;
    }
    fronts
}

/// Crowding distance of each member of `front` (same order).
pub fn crowding_distance(fs: &[Vec<f64>], front: &[usize]) -> Vec<f64> {
    let n = front.len();
    let mut dist = vec![0.0; n];
    if n <= 2 {
        return vec![f64::INFINITY; n];
    }
    let m = fs[front[0]].len();
    for k in 0..m {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| fs[front[a]][k].total_cmp(&fs[front[b]][k]).then(a.cmp(&b)));
        let lo = fs[front[order[0]]][k];
        let hi = fs[front[order[n - 1]]][k];
        dist[order[0]] = f64::INFINITY;
        dist[order[n - 1]] = f64::INFINITY;
        if hi > lo {
            for w in 1..n - 1 {
                dist[order[w]] += (fs[front[order[w + 1]]][k] - fs[front[order[w - 1]]][k]) / (hi - lo);
            }
        }
    }
    dist
}

/// Picks `keep` indices from `fs` by front rank, then crowding distance.
pub fn environmental_selection(fs: &[Vec<f64>], keep: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(keep);
    for front in nondominated_sort(fs) {
        if out.len() + front.len() <= keep {
            out.extend(front);
            continue;
        }
        let mut f = front;
        // Drop the most crowded member one at a time so distances stay current.
        while out.len() + f.len() > keep {
            let d = crowding_distance(fs, &f);
            let worst = (0..f.len())
                .min_by(|&a, &b| d[a].total_cmp(&d[b]).then(b.cmp(&a)))
                .unwrap();
            f.remove(worst);
        }
        out.extend(f);
        break;
    }
    out
}

#[derive(Clone, Debug)]
pub struct EaConfig {
    pub pop_size: usize,
    pub generations: usize,
    pub eta_crossover: f64,
    pub eta_mutation: f64,
    pub crossover_prob: f64,
    pub seed: u64,
}

impl Default for EaConfig {
    fn default() -> Self {
        EaConfig {
            pop_size: 100,
            generations: 500,
            eta_crossover: 20.0,
            eta_mutation: 20.0,
            crossover_prob: 0.9,
            seed: 0,
        }
    }
}

fn sbx(a: f64, b: f64, lo: f64, hi: f64, eta: f64, rng: &mut ChaCha8Rng) -> (f64, f64) {
    if (a - b).abs() < 1e-14 {
        return (a, b);
    }
    let u: f64 = rng.random();
    let beta = if u <= 0.5 {
        (2.0 * u).powf(1.0 / (eta + 1.0))
    } else {
        (1.0 / (2.0 * (1.0 - u))).powf(1.0 / (eta + 1.0))
    };
    let c1 = 0.5 * ((1.0 + beta) * a + (1.0 - beta) * b);
    let c2 = 0.5 * ((1.0 - beta) * a + (1.0 + beta) * b);
    (c1.clamp(lo, hi), c2.clamp(lo, hi))
}

fn poly_mutation(x: f64, lo: f64, hi: f64, eta: f64, rng: &mut ChaCha8Rng) -> f64 {
    let span = hi - lo;
    let d1 = (x - lo) / span;
    let d2 = (hi - x) / span;
    let u: f64 = rng.random();
    let p = 1.0 / (eta + 1.0);
    let dq = if u < 0.5 {
        (2.0 * u + (1.0 - 2.0 * u) * (1.0 - d1).powf(eta + 1.0)).powf(p) - 1.0
    } else {
        1.0 - (2.0 * (1.0 - u) + 2.0 * (u - 0.5) * (1.0 - d2).powf(eta + 1.0)).powf(p)
    };
    (x + dq * span).clamp(lo, hi)
}

/// Runs the EA and returns the final population with objective values.
pub fn evolve(problem: &Problem, cfg: &EaConfig) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    if cfg.pop_size < 4 {
        return Err(Error::Config("population must have at least 4 members".into()));
    }
    let d = problem.d();
    let (lo, hi) = (problem.lower().to_vec(), problem.upper().to_vec());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut xs: Vec<Vec<f64>> = (0..cfg.pop_size)
        .map(|_| (0..d).map(|j| rng.random_range(lo[j]..=hi[j])).collect())
        .collect();
    let mut fs = xs.iter().map(|x| problem.evaluate(x)).collect::<Result<Vec<_>>>()?;
    let pm = 1.0 / d as f64;
    for _ in 0..cfg.generations {
        // Rank and crowding for binary tournaments.
        let mut rank = vec![0usize; xs.len()];
        let mut crowd = vec![0.0; xs.len()];
        for (r, front) in nondominated_sort(&fs).into_iter().enumerate() {
            let cd = crowding_distance(&fs, &front);
            for (k, &i) in front.iter().enumerate() {
                rank[i] = r;
                crowd[i] = cd[k];
            }
        }
        let tournament = |rng: &mut ChaCha8Rng| {
            let a = rng.random_range(0..xs.len());
            let b = rng.random_range(0..xs.len());
            if rank[a] < rank[b] || rank[a] == rank[b] && crowd[a] > crowd[b] {
                a
            } else {
                b
            }
        };
        let mut children = Vec::with_capacity(cfg.pop_size);
        while children.len() < cfg.pop_size {
            let p1 = xs[tournament(&mut rng)].clone();
            let p2 = xs[tournament(&mut rng)].clone();
            let (mut c1, mut c2) = (p1.clone(), p2.clone());
            if rng.random::<f64>() < cfg.crossover_prob {
                for j in 0..d {
                    if rng.random::<f64>() < 0.5 {
                        let (a, b) = sbx(p1[j], p2[j], lo[j], hi[j], cfg.eta_crossover, &mut rng);
                        c1[j] = a;
                        c2[j] = b;
                    }
                }
            }
            for c in [&mut c1, &mut c2] {
                for j in 0..d {
                    if rng.random::<f64>() < pm {
                        c[j] = poly_mutation(c[j], lo[j], hi[j], cfg.eta_mutation, &mut rng);
                    }
                }
            }
            children.push(c1);
            if children.len() < cfg.pop_size {
                children.push(c2);
            }
        }
        let child_f = children
            .iter()
            .map(|x| problem.evaluate(x))
            .collect::<Result<Vec<_>>>()?;
        xs.extend(children);
        fs.extend(child_f);
        let keep = environmental_selection(&fs, cfg.pop_size);
        xs = keep.iter().map(|&i| xs[i].clone()).collect();
        fs = keep.iter().map(|&i| fs[i].clone()).collect();
    }
    Ok((xs, fs))
}

/// Optimizes `problem` with the EA and converts up to `keep` nondominated
/// solutions into preference/solution pairs (objectives normalized over the
/// kept set).
pub fn generate_source_dataset(
    problem: &Problem,
    pop_size: usize,
    generations: usize,
    keep: usize,
    seed: u64,
) -> Result<InverseDataset> {
    if keep == 0 || pop_size < keep {
        return Err(Error::Config(format!(
            "need 0 < keep <= pop_size, got keep = {keep}, pop = {pop_size}"
        )));
    }
    let cfg = EaConfig {
        pop_size,
        generations,
        seed,
        ..Default::default()
    };
    let (xs, fs) = evolve(problem, &cfg)?;
    let nd = nondominated_indices(&fs);
    let nd_f: Vec<Vec<f64>> = nd.iter().map(|&i| fs[i].clone()).collect();
    let chosen: Vec<usize> = environmental_selection(&nd_f, keep)
        .into_iter()
        .map(|k| nd[k])
        .collect();
    let mut order = chosen;
    order.sort_unstable();
    let norm = ObjectiveNormalizer::from_points(problem.m(), order.iter().map(|&i| fs[i].as_slice()));
    let rows = order
        .iter()
        .map(|&i| {
            let w = preference_from_objectives(&norm.normalize(&fs[i]))?;
            Ok(DatasetRow {
                w: w.into_vec(),
                x: xs[i].clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(InverseDataset {
        m: problem.m(),
        d: problem.d(),
        lower: problem.lower().to_vec(),
        upper: problem.upper().to_vec(),
        nondominated: true,
        provenance: Provenance {
            problem_id: problem.id().to_string(),
            generator: format!("nsga2(pop={pop_size},gens={generations})"),
            seed,
        },
        rows,
    })
}
