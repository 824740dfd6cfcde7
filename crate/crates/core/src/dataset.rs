//! Preference/solution pair datasets used to train inverse models.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inverse::OverlapMap;

pub const DATASET_FORMAT: &str = "invtransfer.inverse_dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRow {
    pub w: Vec<f64>,
    pub x: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub problem_id: String,
    pub generator: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InverseDataset {
    pub m: usize,
    pub d: usize,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Whether the rows were mutually nondominated when generated.
    pub nondominated: bool,
    pub provenance: Provenance,
    pub rows: Vec<DatasetRow>,
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

impl InverseDataset {
    /// Every violated invariant, one message per offending row or field.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.m < 2 {
            out.push(format!("m = {} must be at least 2", self.m));
        }
        if self.lower.len() != self.d || self.upper.len() != self.d {
            out.push(format!("bounds must have length d = {}", self.d));
        }
        for (i, r) in self.rows.iter().enumerate() {
            if r.w.len() != self.m {
                out.push(format!("row {i}: w has {} components, expected {}", r.w.len(), self.m));
            } else {
                let s: f64 = r.w.iter().sum();
                if r.w.iter().any(|v| !(*v >= -1e-6)) || (s - 1.0).abs() > 1e-6 {
                    out.push(format!("row {i}: w = {:?} is not on the simplex (sum {s})", r.w));
                }
            }
            if r.x.len() != self.d {
                out.push(format!("row {i}: x has {} components, expected {}", r.x.len(), self.d));
            } else if self.lower.len() == self.d && self.upper.len() == self.d {
                if let Some(j) = (0..self.d).find(|&j| !(r.x[j] >= self.lower[j] && r.x[j] <= self.upper[j])) {
                    out.push(format!(
                        "row {i}: x[{j}] = {} outside [{}, {}]",
                        r.x[j], self.lower[j], self.upper[j]
                    ));
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation {
                path: "<memory>".into(),
                problems: p,
            })
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn preferences(&self) -> Vec<Vec<f64>> {
        self.rows.iter().map(|r| r.w.clone()).collect()
    }

    /// Preference vectors plus the source columns named by `overlap`, in
    /// overlap order.
    pub fn project(&self, overlap: &OverlapMap) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        if let Some(&(s, _)) = overlap.pairs().iter().find(|p| p.0 >= self.d) {
            return Err(Error::Config(format!("source index {s} outside d = {}", self.d)));
        }
        let cols = overlap
            .pairs()
            .iter()
            .map(|&(s, _)| self.rows.iter().map(|r| r.x[s]).collect())
            .collect();
        Ok((self.preferences(), cols))
    }

    pub fn to_json(&self) -> Result<String> {
        let env = Envelope {
            format: DATASET_FORMAT.to_string(),
            version: DATASET_VERSION,
            body: self,
        };
        let mut s = serde_json::to_string_pretty(&env)?;
        s.push('\n');
        Ok(s)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.validate().map_err(|e| match e {
            Error::Validation { problems, .. } => Error::Validation {
                path: path.to_path_buf(),
                problems,
            },
            other => other,
        })?;
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text, path)
    }

    pub fn from_json_str(text: &str, path: &Path) -> Result<Self> {
        let parse_err = |e: serde_json::Error| Error::Parse {
            path: path.to_path_buf(),
            message: format!("line {} column {}: {e}", e.line(), e.column()),
        };
        let header: Header = serde_json::from_str(text).map_err(parse_err)?;
        if header.format.as_deref() != Some(DATASET_FORMAT) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                message: format!("expected format {DATASET_FORMAT:?}, found {:?}", header.format),
            });
        }
        let version = header.version.unwrap_or(0);
        if version != DATASET_VERSION {
            return Err(Error::UnsupportedVersion {
                path: path.to_path_buf(),
                found: version,
                expected: DATASET_VERSION,
            });
        }
        let env: Envelope<InverseDataset> = serde_json::from_str(text).map_err(parse_err)?;
        let ds = env.body;
        let problems = ds.problems();
        if !problems.is_empty() {
            return Err(Error::Validation {
                path: path.to_path_buf(),
                problems,
            });
        }
        Ok(ds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample(n: usize, m: usize, d: usize) -> InverseDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows = (0..n)
            .map(|_| {
                let raw: Vec<f64> = (0..m).map(|_| rng.random::<f64>() + 1e-3).collect();
                let s: f64 = raw.iter().sum();
                DatasetRow {
                    w: raw.into_iter().map(|v| v / s).collect(),
                    x: (0..d).map(|_| rng.random()).collect(),
                }
            })
            .collect();
        InverseDataset {
            m,
            d,
            lower: vec![0.0; d],
            upper: vec![1.0; d],
            nondominated: true,
            provenance: Provenance {
                problem_id: "p".into(),
                generator: "test".into(),
                seed: 5,
            },
            rows,
        }
    }

    #[test]
    fn roundtrip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let ds = sample(100, 3, 6);
        let p = dir.path().join("a.json");
        ds.save(&p).unwrap();
        let back = InverseDataset::load(&p).unwrap();
        assert_eq!(back, ds);
        let q = dir.path().join("b.json");
        back.save(&q).unwrap();
        assert_eq!(fs::read(&p).unwrap(), fs::read(&q).unwrap());
        let (w, cols) = back.project(&OverlapMap::leading(6).unwrap()).unwrap();
        assert_eq!(w.len(), 100);
        assert_eq!(cols.len(), 6);
    }

    #[test]
    fn invalid_row_is_named() {
        let mut ds = sample(3, 2, 2);
        ds.rows[1].w = vec![0.6, 0.6];
        let text = serde_json::to_string(&Envelope {
            format: DATASET_FORMAT.into(),
            version: DATASET_VERSION,
            body: &ds,
        })
        .unwrap();
        match InverseDataset::from_json_str(&text, Path::new("x.json")) {
            Err(Error::Validation { problems, .. }) => {
                assert_eq!(problems.len(), 1);
                assert!(problems[0].starts_with("row 1:"), "{problems:?}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn version_and_syntax_errors() {
        let ds = sample(2, 2, 2);
        let text = ds.to_json().unwrap().replace("\"version\": 1", "\"version\": 7");
        assert!(matches!(
            InverseDataset::from_json_str(&text, Path::new("v.json")),
            Err(Error::UnsupportedVersion { found: 7, .. })
        ));
        match InverseDataset::from_json_str("{\n  \"format\": ", Path::new("s.json")) {
            Err(Error::Parse { message, .. }) => assert!(message.contains("line 2"), "{message}"),
            other => panic!("{other:?}"),
        }
    }
}
