//! Labeled dataset container and line-delimited JSON serialization.
//!
//! File layout: one header line carrying dataset metadata, then one record
//! per line with fields {schema_version, kind, id, coords|edges, label_bits,
//! label_cost, provenance}. Label bits are stored as an index list of the set
//! positions. Writes are atomic (temp file + rename).

use super::{check_feasible, cost, exact_solve, Instance, MisInstance, ProblemKind, Solution, TspInstance};
use crate::decoders::two_opt;
use crate::error::{Error, Result};
use crate::rng::{derive_rng, tag};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::Write as _;
use std::path::Path;

pub const DATASET_SCHEMA_VERSION: u32 = 1;

/// Where the labels came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LabelProvenance {
    #[serde(rename = "exact")]
    Exact,
    #[serde(rename = "suboptimal-budgeted")]
    SuboptimalBudgeted,
}

/// One labeled instance.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub instance: Instance,
    pub label: Solution,
    pub label_cost: f64,
}

/// A list of instances with per-instance label solutions and costs.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub examples: Vec<LabeledExample>,
    pub generator_seed: u64,
    pub provenance: LabelProvenance,
}

impl LabeledDataset {
    /// Labels every instance with the exact oracle.
    pub fn with_exact_labels(instances: Vec<Instance>, generator_seed: u64) -> Result<Self> {
        let examples: Result<Vec<LabeledExample>> = instances
            .into_par_iter()
            .map(|instance| {
                let label = exact_solve(&instance)?;
                let label_cost = cost(&instance, &label)?;
                Ok(LabeledExample {
                    instance,
                    label,
                    label_cost,
                })
            })
            .collect();
        Ok(Self {
            examples: examples?,
            generator_seed,
            provenance: LabelProvenance::Exact,
        })
    }

    pub fn from_parts(
        examples: Vec<LabeledExample>,
        generator_seed: u64,
        provenance: LabelProvenance,
    ) -> Result<Self> {
        let ds = Self {
            examples,
            generator_seed,
            provenance,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn kind(&self) -> Option<ProblemKind> {
        self.examples.first().map(|e| e.instance.kind())
    }

    /// Every label is feasible and every stored cost equals the recomputed
    /// cost exactly.
    pub fn validate(&self) -> Result<()> {
        for (i, ex) in self.examples.iter().enumerate() {
            let verdict = check_feasible(&ex.instance, &ex.label)?;
            if !verdict.is_feasible() {
                return Err(Error::Infeasible(format!(
                    "label {i} ({}) infeasible: {verdict:?}",
                    ex.instance.id()
                )));
            }
            let c = cost(&ex.instance, &ex.label)?;
            if c != ex.label_cost {
                return Err(Error::InvalidInstance(format!(
                    "label {i} ({}) cost mismatch: stored {} recomputed {c}",
                    ex.instance.id(),
                    ex.label_cost
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct HeaderLine {
    schema_version: u32,
    dataset_header: bool,
    kind: ProblemKind,
    generator_seed: u64,
    provenance: LabelProvenance,
    count: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct RecordLine {
    schema_version: u32,
    kind: ProblemKind,
    id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    coords: Option<Vec<[f64; 2]>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    n: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    edges: Option<Vec<(u32, u32)>>,
    /// Index list of set bits in the label.
    label_bits: Vec<u32>,
    label_cost: f64,
    provenance: LabelProvenance,
}

fn dataset_to_jsonl(ds: &LabeledDataset) -> Result<String> {
    let kind = ds.kind().ok_or_else(|| Error::InvalidInstance("empty dataset".into()))?;
    let mut out = String::new();
    let header = HeaderLine {
        schema_version: DATASET_SCHEMA_VERSION,
        dataset_header: true,
        kind,
        generator_seed: ds.generator_seed,
        provenance: ds.provenance,
        count: ds.len(),
    };
    out.push_str(&serde_json::to_string(&header).map_err(|e| Error::Config(e.to_string()))?);
    out.push('\n');
    for ex in &ds.examples {
        let (coords, n, edges) = match &ex.instance {
            Instance::Tsp(t) => (Some(t.coords.clone()), None, None),
            Instance::Mis(m) => (None, Some(m.n), Some(m.edges.clone())),
        };
        let rec = RecordLine {
            schema_version: DATASET_SCHEMA_VERSION,
            kind,
            id: ex.instance.id().to_string(),
            coords,
            n,
            edges,
            label_bits: ex
                .label
                .bits
                .iter()
                .enumerate()
                .filter(|(_, &b)| b == 1)
                .map(|(i, _)| i as u32)
                .collect(),
            label_cost: ex.label_cost,
            provenance: ds.provenance,
        };
        out.push_str(&serde_json::to_string(&rec).map_err(|e| Error::Config(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

/// Writes a dataset as line-delimited JSON, atomically.
pub fn save_dataset(path: impl AsRef<Path>, ds: &LabeledDataset) -> Result<()> {
    let path = path.as_ref();
    let body = dataset_to_jsonl(ds)?;
    atomic_write(path, body.as_bytes())
}

/// Atomic file write: temp file in the same directory, then rename.
pub(crate) fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    }
    let tmp = path.with_extension(format!("tmp.{}", std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(tmp.display().to_string(), e))?;
        f.write_all(bytes).map_err(|e| Error::io(tmp.display().to_string(), e))?;
        f.sync_all().map_err(|e| Error::io(tmp.display().to_string(), e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Loads and fully revalidates a dataset written by [`save_dataset`].
pub fn load_dataset(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let pstr = path.display().to_string();
    let mut lines = text.lines().enumerate();

    let (_, first) = lines.next().ok_or_else(|| Error::Parse {
        path: pstr.clone(),
        line: 1,
        msg: "empty file".into(),
    })?;
    let header: HeaderLine = serde_json::from_str(first).map_err(|e| Error::Parse {
        path: pstr.clone(),
        line: 1,
        msg: format!("bad header: {e}"),
    })?;
    if header.schema_version != DATASET_SCHEMA_VERSION {
        return Err(Error::SchemaVersion {
            found: header.schema_version,
            expected: DATASET_SCHEMA_VERSION,
        });
    }

    let mut examples = Vec::with_capacity(header.count);
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let rec: RecordLine = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: pstr.clone(),
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        if rec.schema_version != DATASET_SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                found: rec.schema_version,
                expected: DATASET_SCHEMA_VERSION,
            });
        }
        let instance = match rec.kind {
            ProblemKind::Tsp => {
                let coords = rec.coords.ok_or_else(|| Error::Parse {
                    path: pstr.clone(),
                    line: lineno + 1,
                    msg: "tsp record missing coords".into(),
                })?;
                Instance::Tsp(TspInstance::new(rec.id, coords)?)
            }
            ProblemKind::Mis => {
                let n = rec.n.ok_or_else(|| Error::Parse {
                    path: pstr.clone(),
                    line: lineno + 1,
                    msg: "mis record missing n".into(),
                })?;
                let edges = rec.edges.ok_or_else(|| Error::Parse {
                    path: pstr.clone(),
                    line: lineno + 1,
                    msg: "mis record missing edges".into(),
                })?;
                Instance::Mis(MisInstance::new(rec.id, n, edges)?)
            }
        };
        let mut bits = vec![0u8; instance.num_vars()];
        for &b in &rec.label_bits {
            let b = b as usize;
            if b >= bits.len() {
                return Err(Error::Parse {
                    path: pstr.clone(),
                    line: lineno + 1,
                    msg: format!("label bit index {b} out of range"),
                });
            }
            bits[b] = 1;
        }
        let label = Solution::new(rec.kind, instance.n(), bits)?;
        examples.push(LabeledExample {
            instance,
            label,
            label_cost: rec.label_cost,
        });
    }
    if examples.len() != header.count {
        return Err(Error::Parse {
            path: pstr,
            line: text.lines().count(),
            msg: format!("header count {} but {} records", header.count, examples.len()),
        });
    }
    LabeledDataset::from_parts(examples, header.generator_seed, header.provenance)
}

/// SHA-256 hash of the canonical serialized form, as a hex string.
pub fn dataset_content_hash(ds: &LabeledDataset) -> Result<String> {
    let body = dataset_to_jsonl(ds)?;
    let digest = Sha256::digest(body.as_bytes());
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Outcome of [`make_suboptimal_labels`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuboptimalReport {
    pub iteration_budget: usize,
    /// Mean percentage drop of the new labels relative to the input labels.
    pub mean_drop_pct: f64,
    pub per_instance_drop_pct: Vec<f64>,
}

/// Replaces TSP labels by budget-capped local search: a random tour followed
/// by at most `iteration_budget` improving 2-opt exchanges. Reports the
/// realized drop relative to the input labels.
pub fn make_suboptimal_labels(
    ds: &LabeledDataset,
    iteration_budget: usize,
    seed: u64,
) -> Result<(LabeledDataset, SuboptimalReport)> {
    if ds.kind() != Some(ProblemKind::Tsp) {
        return Err(Error::Unsupported(
            "suboptimal label construction is defined for TSP datasets only".into(),
        ));
    }
    let t = tag("subopt-labels");
    let relabeled: Result<Vec<(LabeledExample, f64)>> = ds
        .examples
        .par_iter()
        .enumerate()
        .map(|(k, ex)| {
            let tsp = ex.instance.as_tsp().expect("kind checked above");
            let n = tsp.n();
            let mut rng = derive_rng(seed, &[t, k as u64]);
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let start = Solution::from_tour(n, &order)?;
            let label = two_opt(tsp, &start, iteration_budget)?;
            let label_cost = cost(&ex.instance, &label)?;
            let drop = (label_cost - ex.label_cost) / ex.label_cost.abs() * 100.0;
            Ok((
                LabeledExample {
                    instance: ex.instance.clone(),
                    label,
                    label_cost,
                },
                drop,
            ))
        })
        .collect();
    let relabeled = relabeled?;
    let per_instance_drop_pct: Vec<f64> = relabeled.iter().map(|(_, d)| *d).collect();
    let mean_drop_pct = per_instance_drop_pct.iter().sum::<f64>() / per_instance_drop_pct.len() as f64;
    let examples = relabeled.into_iter().map(|(ex, _)| ex).collect();
    Ok((
        LabeledDataset::from_parts(examples, ds.generator_seed, LabelProvenance::SuboptimalBudgeted)?,
        SuboptimalReport {
            iteration_budget,
            mean_drop_pct,
            per_instance_drop_pct,
        },
    ))
}
