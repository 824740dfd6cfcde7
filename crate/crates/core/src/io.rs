//! Experiment configuration, run directories and the experiment driver.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::InverseDataset;
use crate::decomposition::{PreferenceMethod, PreferenceVector};
use crate::error::{Error, Result};
use crate::inverse::{InverseModelSet, OverlapMap};
use crate::metrics::{report_from, run_metrics, MetricReport, Reference, RunMetrics, REFERENCE_SIZE};
use crate::nsga2::generate_source_dataset;
use crate::optimizer::{run, Archive, ArchiveEntry, IterationRecord, OptimizerConfig, RunResult, Variant};
use crate::problems::{make_mdtlz, Family, MdtlzSpec, Objective, Problem};

pub const EXPERIMENT_FORMAT: &str = "invtransfer.experiment";
pub const RUN_FORMAT: &str = "invtransfer.run";
pub const MODELS_FORMAT: &str = "invtransfer.models";
pub const FORMAT_VERSION: u32 = 1;
/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "INVTRANSFER_OUTPUT_ROOT";
pub const PREFERENCE_SAMPLING: &str = "cycle-without-replacement";

/// Source-task presets: high, medium and low correlation with the
/// unshifted target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SourceLevel {
    HS,
    MS,
    LS,
}

impl SourceLevel {
    pub fn deltas(self) -> (f64, f64) {
        match self {
            SourceLevel::HS => (0.9, 0.05),
            SourceLevel::MS => (0.7, 0.25),
            SourceLevel::LS => (0.3, 0.4),
        }
    }

    pub fn spec(self, family: Family, inverted: bool, d: usize, m: usize) -> MdtlzSpec {
        let (d1, d2) = self.deltas();
        MdtlzSpec::new(family, inverted, d1, d2, d, m)
    }
}

impl std::str::FromStr for SourceLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "HS" => Ok(SourceLevel::HS),
            "MS" => Ok(SourceLevel::MS),
            "LS" => Ok(SourceLevel::LS),
            _ => Err(Error::Config(format!("unknown source level {s:?} (HS, MS or LS)"))),
        }
    }
}

/// Problem definition stored in configs and run metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemRef {
    Mdtlz(MdtlzSpec),
    /// A problem evaluated by an external program: it receives the decision
    /// vector as a JSON array on stdin and prints the objective vector as a
    /// JSON array on stdout.
    External {
        id: String,
        m: usize,
        lower: Vec<f64>,
        upper: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        command: Option<Vec<String>>,
    },
}

struct CommandObjective {
    argv: Vec<String>,
}

impl Objective for CommandObjective {
    fn evaluate(&self, x: &[f64]) -> Result<Vec<f64>> {
        let fail = |msg: String| Error::Evaluation(format!("{}: {msg}", self.argv[0]));
        let mut child = Command::new(&self.argv[0])
            .args(&self.argv[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| fail(e.to_string()))?;
        let input = serde_json::to_string(x)?;
        child
            .stdin
            .take()
            .expect("stdin is piped")
            .write_all(input.as_bytes())
            .map_err(|e| fail(e.to_string()))?;
        let out = child.wait_with_output().map_err(|e| fail(e.to_string()))?;
        if !out.status.success() {
            return Err(fail(format!(
                "exited with {}: {}",
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        serde_json::from_slice(&out.stdout).map_err(|e| fail(format!("bad output: {e}")))
    }
}

impl ProblemRef {
    pub fn id(&self) -> String {
        match self {
            ProblemRef::Mdtlz(s) => s.id(),
            ProblemRef::External { id, .. } => id.clone(),
        }
    }

    pub fn is_builtin(&self) -> bool {
        matches!(self, ProblemRef::Mdtlz(_))
    }

    /// An evaluable problem. External problems without a command cannot be
    /// built.
    pub fn build(&self) -> Result<Problem> {
        match self {
            ProblemRef::Mdtlz(s) => make_mdtlz(*s),
            ProblemRef::External {
                id,
                m,
                lower,
                upper,
                command,
            } => {
                let argv = command
                    .clone()
                    .filter(|c| !c.is_empty())
                    .ok_or_else(|| Error::Config(format!("external problem {id} has no command")))?;
                Problem::new(
                    id.clone(),
                    *m,
                    lower.clone(),
                    upper.clone(),
                    Arc::new(CommandObjective { argv }),
                )
            }
        }
    }

    pub fn reference(&self, n: usize) -> Option<Result<Reference>> {
        match self {
            ProblemRef::Mdtlz(s) => Some(Reference::for_spec(s, n)),
            ProblemRef::External { .. } => None,
        }
    }
}

fn default_seeds() -> usize {
    1
}

fn default_reference_size() -> usize {
    REFERENCE_SIZE
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub target: ProblemRef,
    /// Relative paths are resolved against the config file's directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_dataset: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overlap: Option<OverlapMap>,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_seeds")]
    pub n_seeds: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Reference-front size for IGD and the inverse-model test set.
    #[serde(default = "default_reference_size")]
    pub reference_size: usize,
}

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    format: String,
    version: u32,
    #[serde(flatten)]
    body: T,
}

#[derive(Deserialize)]
struct Header {
    format: Option<String>,
    version: Option<u32>,
}

fn envelope_json<T: Serialize>(format: &str, body: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(&Envelope {
        format: format.to_string(),
        version: FORMAT_VERSION,
        body,
    })?;
    s.push('\n');
    Ok(s)
}

fn parse_envelope<T: serde::de::DeserializeOwned>(text: &str, format: &str, path: &Path) -> Result<T> {
    let perr = |message: String| Error::Parse {
        path: path.to_path_buf(),
        message,
    };
    let mut value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| perr(format!("line {} column {}: {e}", e.line(), e.column())))?;
    let header: Header = serde_json::from_value(value.clone()).map_err(|e| perr(e.to_string()))?;
    if header.format.as_deref() != Some(format) {
        return Err(perr(format!("expected format {format:?}, found {:?}", header.format)));
    }
    let version = header.version.unwrap_or(0);
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.to_path_buf(),
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    // Flattened bodies lose integer map keys, so strip the header and
    // deserialize the rest directly.
    if let Some(obj) = value.as_object_mut() {
        obj.remove("format");
        obj.remove("version");
    }
    serde_json::from_value(value).map_err(|e| perr(e.to_string()))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

impl ExperimentConfig {
    /// Loads a config and resolves relative paths against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut cfg: ExperimentConfig = parse_envelope(&read(path)?, EXPERIMENT_FORMAT, path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(p) = &cfg.source_dataset {
            if p.is_relative() {
                cfg.source_dataset = Some(base.join(p));
            }
        }
        if let Some(p) = &cfg.output_dir {
            if p.is_relative() {
                cfg.output_dir = Some(base.join(p));
            }
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        envelope_json(EXPERIMENT_FORMAT, self)
    }

    /// Checks everything that can be checked before the first evaluation.
    pub fn validate(&self) -> Result<()> {
        if self.n_seeds == 0 {
            return Err(Error::Config("n_seeds must be at least 1".into()));
        }
        if self.reference_size == 0 {
            return Err(Error::Config("reference_size must be positive".into()));
        }
        self.optimizer.validate()?;
        if let ProblemRef::Mdtlz(s) = &self.target {
            s.validate()?;
        }
        if self.optimizer.variant == Variant::InvTrEmo {
            let p = self
                .source_dataset
                .as_ref()
                .ok_or_else(|| Error::Config("variant InvTrEMO needs source_dataset".into()))?;
            if !p.is_file() {
                return Err(Error::Config(format!("source dataset {} does not exist", p.display())));
            }
            if self.overlap.is_none() {
                return Err(Error::Config("variant InvTrEMO needs an overlap map".into()));
            }
        }
        Ok(())
    }

    /// Output directory: the config value, else the environment default,
    /// else `runs`.
    pub fn resolved_output_dir(&self) -> PathBuf {
        self.output_dir.clone().unwrap_or_else(default_output_root)
    }
}

pub fn default_output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// Everything in `meta.json` besides the envelope.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub problem_id: String,
    pub problem: ProblemRef,
    pub variant: Variant,
    pub seed: u64,
    pub config: OptimizerConfig,
    pub evaluations: usize,
    pub nondominated: Vec<usize>,
    pub preference_sampling: String,
    pub preference_method: PreferenceMethod,
    pub preferences: Vec<PreferenceVector>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_dataset: Option<SourceInfo>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overlap: Option<OverlapMap>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<RunMetrics>,
    /// Set when the run stopped early; the directory then holds a partial run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceInfo {
    pub problem_id: String,
    pub rows: usize,
    pub d: usize,
}

/// A run directory read back from disk.
#[derive(Clone, Debug)]
pub struct LoadedRun {
    pub dir: PathBuf,
    pub meta: RunMeta,
    pub result: RunResult,
}

pub fn archive_csv(result: &RunResult, d: usize, m: usize) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
    header.extend((0..m).map(|i| format!("f{i}")));
    header.push("iteration".into());
    w.write_record(&header).map_err(csv_err)?;
    for e in &result.archive.entries {
        let mut rec: Vec<String> = e.x.iter().chain(&e.f).map(|v| v.to_string()).collect();
        rec.push(e.iteration.to_string());
        w.write_record(&rec).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Numerical(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Numerical(format!("csv: {e}"))
}

fn parse_archive(path: &Path, d: usize, m: usize) -> Result<Archive> {
    let perr = |msg: String| Error::Parse {
        path: path.to_path_buf(),
        message: msg,
    };
    let mut rdr = csv::Reader::from_path(path).map_err(|e| perr(e.to_string()))?;
    let mut archive = Archive::new(m);
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| perr(e.to_string()))?;
        if rec.len() != d + m + 1 {
            return Err(perr(format!(
                "row {}: expected {} fields, got {}",
                i + 1,
                d + m + 1,
                rec.len()
            )));
        }
        let nums = rec
            .iter()
            .take(d + m)
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| perr(format!("row {}: {e}", i + 1)))?;
        let iteration = rec[d + m].parse().map_err(|e| perr(format!("row {}: {e}", i + 1)))?;
        archive.normalizer.update(&nums[d..]);
        archive.entries.push(ArchiveEntry {
            x: nums[..d].to_vec(),
            f: nums[d..].to_vec(),
            iteration,
        });
    }
    Ok(archive)
}

fn problem_dims(p: &ProblemRef) -> (usize, usize) {
    match p {
        ProblemRef::Mdtlz(s) => (s.d, s.m),
        ProblemRef::External { m, lower, .. } => (lower.len(), *m),
    }
}

#[derive(Serialize, Deserialize)]
struct ModelsBody {
    models: Option<InverseModelSet>,
}

/// Writes `archive.csv`, `trace.jsonl`, `models.json` and `meta.json`.
pub fn write_run_dir(dir: &Path, result: &RunResult, meta: &RunMeta) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (d, m) = problem_dims(&meta.problem);
    write(&dir.join("archive.csv"), archive_csv(result, d, m)?)?;
    let mut trace = String::new();
    for rec in &result.trace {
        trace.push_str(&serde_json::to_string(rec)?);
        trace.push('\n');
    }
    write(&dir.join("trace.jsonl"), trace)?;
    write(
        &dir.join("models.json"),
        envelope_json(
            MODELS_FORMAT,
            &ModelsBody {
                models: result.inverse_models.clone(),
            },
        )?,
    )?;
    write(&dir.join("meta.json"), envelope_json(RUN_FORMAT, meta)?)
}

pub fn read_meta(dir: &Path) -> Result<RunMeta> {
    let p = dir.join("meta.json");
    parse_envelope(&read(&p)?, RUN_FORMAT, &p)
}

pub fn load_run_dir(dir: impl AsRef<Path>) -> Result<LoadedRun> {
    let dir = dir.as_ref();
    let meta = read_meta(dir)?;
    let (d, m) = problem_dims(&meta.problem);
    let archive = parse_archive(&dir.join("archive.csv"), d, m)?;
    let tp = dir.join("trace.jsonl");
    let trace = read(&tp)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str::<IterationRecord>(l).map_err(|e| Error::Parse {
                path: tp.clone(),
                message: format!("line {}: {e}", i + 1),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mp = dir.join("models.json");
    let models: ModelsBody = parse_envelope(&read(&mp)?, MODELS_FORMAT, &mp)?;
    if let Some(ms) = &models.models {
        if ms.d() != d {
            return Err(Error::Validation {
                path: mp,
                problems: vec![format!("{} models for d = {d}", ms.d())],
            });
        }
    }
    let result = RunResult {
        problem_id: meta.problem_id.clone(),
        config: meta.config.clone(),
        archive,
        nondominated: meta.nondominated.clone(),
        inverse_models: models.models,
        trace,
        preferences: meta.preferences.clone(),
    };
    Ok(LoadedRun {
        dir: dir.to_path_buf(),
        meta,
        result,
    })
}

/// Every directory under `root` (inclusive) that holds a `meta.json`,
/// sorted by path.
pub fn find_run_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        if dir.join("meta.json").is_file() {
            out.push(dir.clone());
        }
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let entry = entry.map_err(|e| Error::io(&dir, e))?;
            let p = entry.path();
            let hidden = p
                .file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with('.'));
            if p.is_dir() && !hidden {
                stack.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Overrides applied on top of a loaded config.
#[derive(Clone, Debug, Default)]
pub struct RunOverrides {
    pub n_seeds: Option<usize>,
    pub output_dir: Option<PathBuf>,
    pub variant: Option<Variant>,
    pub budget: Option<usize>,
}

impl RunOverrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(n) = self.n_seeds {
            cfg.n_seeds = n;
        }
        if let Some(o) = &self.output_dir {
            cfg.output_dir = Some(o.clone());
        }
        if let Some(v) = self.variant {
            cfg.optimizer.variant = v;
        }
        if let Some(b) = self.budget {
            cfg.optimizer.budget = b;
        }
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub output_dir: PathBuf,
    pub run_dirs: Vec<PathBuf>,
    pub report: Option<MetricReport>,
    /// `(seed, message)` for every run that failed.
    pub failures: Vec<(u64, String)>,
}

fn seed_dir(out: &Path, variant: Variant, seed: u64) -> PathBuf {
    out.join(variant.to_string()).join(format!("seed-{seed}"))
}

/// Runs every seed of an experiment (in parallel), writing one run
/// directory per seed plus `report.json` / `report.csv`. Failed runs keep
/// their partial directories and are listed in the outcome.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let problem = cfg.target.build()?;
    let source = match (cfg.optimizer.variant, &cfg.source_dataset) {
        (Variant::InvTrEmo, Some(p)) => Some(InverseDataset::load(p)?),
        _ => None,
    };
    if let (Some(ds), Some(ov)) = (&source, &cfg.overlap) {
        ov.validate_dims(ds.d, problem.d())?;
    }
    let reference = cfg.target.reference(cfg.reference_size).transpose()?;
    let out = cfg.resolved_output_dir();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let base = cfg.optimizer.seed;
    let variant = cfg.optimizer.variant;
    let per_seed: Vec<(PathBuf, Result<Option<RunMetrics>>)> = (0..cfg.n_seeds as u64)
        .into_par_iter()
        .map(|i| {
            let seed = base + i;
            let oc = OptimizerConfig {
                seed,
                ..cfg.optimizer.clone()
            };
            let dir = seed_dir(&out, variant, seed);
            let overlap = if variant == Variant::InvTrEmo {
                cfg.overlap.as_ref()
            } else {
                None
            };
            let (result, error) = match run(&problem, source.as_ref(), overlap, &oc) {
                Ok(r) => (Some(r), None),
                Err(e) => (e.partial.map(|b| *b), Some(e.error)),
            };
            let Some(result) = result else {
                return (dir, Err(error.expect("failed run has an error")));
            };
            let metrics = match (&reference, &error) {
                (Some(r), None) => match run_metrics(&result, r) {
                    Ok(m) => Some(m),
                    Err(e) => return (dir, Err(e)),
                },
                _ => None,
            };
            let meta = RunMeta {
                problem_id: result.problem_id.clone(),
                problem: cfg.target.clone(),
                variant,
                seed,
                config: oc.clone(),
                evaluations: result.archive.len(),
                nondominated: result.nondominated.clone(),
                preference_sampling: PREFERENCE_SAMPLING.into(),
                preference_method: oc.preference_method,
                preferences: result.preferences.clone(),
                source_dataset: source.as_ref().map(|ds| SourceInfo {
                    problem_id: ds.provenance.problem_id.clone(),
                    rows: ds.len(),
                    d: ds.d,
                }),
                overlap: overlap.cloned(),
                metrics: metrics.clone(),
                error: error.as_ref().map(|e| e.to_string()),
            };
            if let Err(e) = write_run_dir(&dir, &result, &meta) {
                return (dir, Err(e));
            }
            match error {
                Some(e) => (dir, Err(e)),
                None => (dir, Ok(metrics)),
            }
        })
        .collect();

    let mut run_dirs = Vec::new();
    let mut failures = Vec::new();
    let mut metrics = Vec::new();
    for (i, (dir, res)) in per_seed.into_iter().enumerate() {
        match res {
            Ok(m) => {
                run_dirs.push(dir);
                metrics.extend(m);
            }
            Err(e) => failures.push((base + i as u64, e.to_string())),
        }
    }
    let report = if failures.is_empty() && !metrics.is_empty() {
        let rep = report_from(problem.id().to_string(), variant.to_string(), metrics)?;
        write(&out.join("report.json"), rep.to_json()?)?;
        write(&out.join("report.csv"), rep.to_csv())?;
        Some(rep)
    } else {
        None
    };
    Ok(ExperimentOutcome {
        output_dir: out,
        run_dirs,
        report,
        failures,
    })
}

/// Settings for building a source dataset with the evolutionary solver.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceGenConfig {
    pub spec: MdtlzSpec,
    pub pop_size: usize,
    pub generations: usize,
    pub keep: usize,
    pub seed: u64,
}

pub fn gen_source(cfg: &SourceGenConfig, out: &Path) -> Result<InverseDataset> {
    let p = make_mdtlz(cfg.spec)?;
    let ds = generate_source_dataset(&p, cfg.pop_size, cfg.generations, cfg.keep, cfg.seed)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    ds.save(out)?;
    Ok(ds)
}

/// Aggregated tables over a set of run directories.
#[derive(Clone, Debug)]
pub struct Report {
    pub reports: Vec<MetricReport>,
    /// Checkpoint rows, one column per variant (medians with quartiles).
    pub table_csv: String,
    /// One row per iteration of every run.
    pub trace_csv: String,
}

/// Groups runs by problem and variant, aggregates them, and renders the
/// comparison tables. Metrics stored in `meta.json` are reused; missing ones
/// are recomputed for built-in problems.
pub fn build_report(dirs: &[PathBuf], reference_size: usize) -> Result<Report> {
    if dirs.is_empty() {
        return Err(Error::Empty("run directories"));
    }
    let runs = dirs.iter().map(load_run_dir).collect::<Result<Vec<_>>>()?;
    let problem = runs[0].meta.problem.clone();
    if let Some(r) = runs.iter().find(|r| r.meta.problem != problem) {
        return Err(Error::Incompatible(format!(
            "{} is for {}, {} is for {}",
            r.dir.display(),
            r.meta.problem_id,
            runs[0].dir.display(),
            runs[0].meta.problem_id
        )));
    }
    let mut reference: Option<Reference> = None;
    let mut groups: Vec<(Variant, Vec<&LoadedRun>)> = Vec::new();
    for r in &runs {
        if let Some(e) = &r.meta.error {
            return Err(Error::Incompatible(format!("{} is a failed run: {e}", r.dir.display())));
        }
        match groups.iter_mut().find(|g| g.0 == r.meta.variant) {
            Some(g) => g.1.push(r),
            None => groups.push((r.meta.variant, vec![r])),
        }
    }
    let mut reports = Vec::new();
    for (variant, members) in &groups {
        let first = &members[0].meta.config;
        let mut metrics = Vec::new();
        for r in members {
            let mut c = r.meta.config.clone();
            c.seed = first.seed;
            if &c != first {
                return Err(Error::Incompatible(format!(
                    "{} uses a different {variant} configuration",
                    r.dir.display()
                )));
            }
            let m = match &r.meta.metrics {
                Some(m) => m.clone(),
                None => {
                    if reference.is_none() {
                        reference = Some(problem.reference(reference_size).ok_or_else(|| {
                            Error::Incompatible(format!("no reference front for external problem {}", problem.id()))
                        })??);
                    }
                    run_metrics(&r.result, reference.as_ref().unwrap())?
                }
            };
            metrics.push(m);
        }
        reports.push(report_from(problem.id(), variant.to_string(), metrics)?);
    }
    reports.sort_by(|a, b| a.variant.cmp(&b.variant));
    Ok(Report {
        table_csv: comparison_table(&reports),
        trace_csv: trace_table(&runs),
        reports,
    })
}

fn comparison_table(reports: &[MetricReport]) -> String {
    let mut s = String::from("problem,metric,evaluations,statistic");
    for r in reports {
        s.push(',');
        s.push_str(&r.variant);
    }
    s.push('\n');
    let mut checkpoints: Vec<usize> = reports.iter().flat_map(|r| r.checkpoints.iter().copied()).collect();
    checkpoints.sort_unstable();
    checkpoints.dedup();
    let problem = reports.first().map_or("", |r| r.problem_id.as_str());
    let cell = |q: Option<&crate::metrics::Quantiles>, stat: &str| match q {
        Some(q) => match stat {
            "median" => q.median.to_string(),
            "q25" => q.q25.to_string(),
            _ => q.q75.to_string(),
        },
        None => String::new(),
    };
    for &k in &checkpoints {
        for stat in ["median", "q25", "q75"] {
            s.push_str(&format!("\"{problem}\",igd,{k},{stat}"));
            for r in reports {
                s.push(',');
                s.push_str(&cell(r.igd.get(&k), stat));
            }
            s.push('\n');
        }
    }
    for stat in ["median", "q25", "q75"] {
        let k = checkpoints.last().copied().unwrap_or(0);
        s.push_str(&format!("\"{problem}\",rmse,{k},{stat}"));
        for r in reports {
            s.push(',');
            s.push_str(&cell(r.rmse_final.as_ref(), stat));
        }
        s.push('\n');
    }
    s
}

fn trace_table(runs: &[LoadedRun]) -> String {
    let mut s = String::from("variant,seed,iteration,evaluations,ucb,max_ucb_probe,mu,sigma,n_nondominated,fallback\n");
    for r in runs {
        for t in &r.result.trace {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.meta.variant,
                r.meta.seed,
                t.iteration,
                t.evaluations,
                t.ucb,
                t.max_ucb_probe.map(|v| v.to_string()).unwrap_or_default(),
                t.mu,
                t.sigma,
                t.n_nondominated,
                t.fallback
            ));
        }
    }
    s
}

/// Writes `summary.csv`, `summary.json` and `trace.csv` into `out`, only
/// after the whole report has been built.
pub fn write_report(report: &Report, out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut json = serde_json::to_string_pretty(&report.reports)?;
    json.push('\n');
    write(&out.join("summary.csv"), &report.table_csv)?;
    write(&out.join("summary.json"), json)?;
    write(&out.join("trace.csv"), &report.trace_csv)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(dir: &Path, variant: Variant) -> ExperimentConfig {
        ExperimentConfig {
            target: ProblemRef::Mdtlz(MdtlzSpec::new(Family::Dtlz2, false, 1.0, 0.0, 5, 2)),
            source_dataset: None,
            overlap: None,
            optimizer: OptimizerConfig {
                n_init: 10,
                budget: 14,
                n_offspring: 300,
                n_prefs: 6,
                probe_size: 50,
                variant,
                ..Default::default()
            },
            n_seeds: 2,
            output_dir: Some(dir.to_path_buf()),
            reference_size: 200,
        }
    }

    #[test]
    fn config_roundtrip_and_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_config(Path::new("out"), Variant::InvTrEmo);
        cfg.source_dataset = Some("src.json".into());
        cfg.overlap = Some(OverlapMap::leading(3).unwrap());
        let p = dir.path().join("exp.json");
        fs::write(&p, cfg.to_json().unwrap()).unwrap();
        let back = ExperimentConfig::load(&p).unwrap();
        assert_eq!(back.source_dataset.unwrap(), dir.path().join("src.json"));
        assert_eq!(back.output_dir.unwrap(), dir.path().join("out"));
        // The source file does not exist yet.
        assert!(matches!(
            ExperimentConfig::load(&p).unwrap().validate(),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn rejects_unknown_version() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(Path::new("out"), Variant::ZeroT);
        let p = dir.path().join("exp.json");
        fs::write(&p, cfg.to_json().unwrap().replace("\"version\": 1", "\"version\": 2")).unwrap();
        assert!(matches!(
            ExperimentConfig::load(&p),
            Err(Error::UnsupportedVersion { found: 2, .. })
        ));
    }

    #[test]
    fn run_dirs_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(dir.path(), Variant::ZeroT);
        let out = run_experiment(&cfg).unwrap();
        assert!(out.failures.is_empty());
        assert_eq!(out.run_dirs.len(), 2);
        assert!(dir.path().join("report.json").is_file());
        let loaded = load_run_dir(&out.run_dirs[0]).unwrap();
        assert_eq!(loaded.meta.seed, 0);
        assert_eq!(loaded.result.archive.len(), 14);
        assert_eq!(loaded.result.trace.len(), 4);
        // Re-serializing what was read gives the same files.
        let again = dir.path().join("copy");
        write_run_dir(&again, &loaded.result, &loaded.meta).unwrap();
        for f in ["archive.csv", "trace.jsonl", "models.json", "meta.json"] {
            assert_eq!(
                fs::read(out.run_dirs[0].join(f)).unwrap(),
                fs::read(again.join(f)).unwrap(),
                "{f}"
            );
        }
        assert_eq!(find_run_dirs(dir.path()).unwrap().len(), 3);
    }

    #[test]
    fn report_over_two_variants() {
        let dir = tempfile::tempdir().unwrap();
        let a = run_experiment(&small_config(&dir.path().join("a"), Variant::ZeroT)).unwrap();
        let b = run_experiment(&small_config(&dir.path().join("b"), Variant::ParegoUcb)).unwrap();
        let dirs: Vec<PathBuf> = a.run_dirs.into_iter().chain(b.run_dirs).collect();
        let rep = build_report(&dirs, 200).unwrap();
        assert_eq!(rep.reports.len(), 2);
        let header = rep.table_csv.lines().next().unwrap();
        assert_eq!(header, "problem,metric,evaluations,statistic,ParegoUcb,ZeroT");
        assert_eq!(rep.trace_csv.lines().count(), 1 + 4 * 4);
        assert!(build_report(&[], 200).is_err());
    }

    #[test]
    fn external_problem_command() {
        let p = ProblemRef::External {
            id: "ext".into(),
            m: 2,
            lower: vec![0.0; 2],
            upper: vec![1.0; 2],
            command: Some(vec![
                "python3".into(),
                "-c".into(),
                "import json,sys; x=json.load(sys.stdin); print(json.dumps([x[0], 1-x[0]+x[1]]))".into(),
            ]),
        };
        let prob = p.build().unwrap();
        assert_eq!(prob.evaluate(&[0.25, 0.5]).unwrap(), vec![0.25, 1.25]);
        assert!(p.reference(10).is_none());
        let q = ProblemRef::External {
            id: "ext".into(),
            m: 2,
            lower: vec![0.0; 2],
            upper: vec![1.0; 2],
            command: None,
        };
        assert!(q.build().is_err());
    }
}
