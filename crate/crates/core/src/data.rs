//! Synthetic domains, non-IID partitioning and CSV ingestion.
//!
//! A [`DomainRecipe`] describes a Gaussian class-conditional distribution:
//! a label is drawn from `label_prior`, then the features of class `k` are
//! drawn from `N(class_means[k] + mean_shift, scale^2 * I)`. The three
//! built-in recipes (`medical`, `financial`, `user`) share class means and
//! differ in shift, spread and label prior.
//!
//! Partitioning is either IID (shuffle and deal contiguous chunks) or
//! Dirichlet label skew: for every class, client proportions are drawn from
//! `Dir(alpha)` and the shuffled class members are cut at the cumulative
//! proportions. Clients that end up below `min_samples_per_client` are topped
//! up one example at a time from the largest shard.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use rand::RngCore;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Example, ModelError};
use crate::rng::{self, Stream};
use crate::Dataset;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("degenerate label prior: all weights are zero")]
    DegeneratePrior,
    #[error("invalid recipe `{recipe}`: {reason}")]
    InvalidRecipe { recipe: String, reason: String },
    #[error("unknown built-in recipe `{0}` (expected medical, financial or user)")]
    UnknownRecipe(String),
    #[error("invalid partition plan: {0}")]
    InvalidPlan(String),
    #[error("insufficient samples: {available} examples for {clients} clients x {min} minimum")]
    InsufficientSamples {
        available: usize,
        clients: usize,
        min: usize,
    },
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("line {line}: column `{column}` value `{value}` is not a finite number")]
    NonNumeric {
        line: u64,
        column: String,
        value: String,
    },
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Class-conditional Gaussian generator for one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainRecipe {
    pub domain_id: String,
    pub class_means: Vec<Vec<f64>>,
    pub class_covariance_scale: f64,
    pub mean_shift: Vec<f64>,
    pub label_prior: Vec<f64>,
}

/// Names accepted by [`DomainRecipe::builtin`].
pub const BUILTIN_RECIPES: [&str; 3] = ["medical", "financial", "user"];

/// Separation of the built-in class means from the origin.
const BUILTIN_MEAN_NORM: f64 = 2.0;

impl DomainRecipe {
    /// Built-in recipe for `feature_dim` features and `class_count` classes.
    ///
    /// Class `k` is centred on `2 * e_k`, so `feature_dim >= class_count` is required.
    pub fn builtin(name: &str, feature_dim: usize, class_count: usize) -> Result<Self, DataError> {
        if feature_dim < class_count {
            return Err(DataError::InvalidRecipe {
                recipe: name.to_string(),
                reason: format!(
                    "built-in recipes need feature_dim >= class_count ({feature_dim} < {class_count})"
                ),
            });
        }
        let class_means = (0..class_count)
            .map(|k| {
                let mut m = vec![0.0; feature_dim];
                m[k] = BUILTIN_MEAN_NORM;
                m
            })
            .collect();
        let (shift, scale, raw_prior): (Vec<f64>, f64, Vec<f64>) = match name {
            "medical" => (
                vec![0.0; feature_dim],
                1.0,
                vec![1.0; class_count],
            ),
            "financial" => (
                vec![0.4; feature_dim],
                1.1,
                (0..class_count).map(|k| (class_count - k) as f64).collect(),
            ),
            "user" => (
                (0..feature_dim)
                    .map(|j| if j % 2 == 0 { 0.6 } else { -0.6 })
                    .collect(),
                1.25,
                (0..class_count).map(|k| (k + 1) as f64).collect(),
            ),
            other => return Err(DataError::UnknownRecipe(other.to_string())),
        };
        let total: f64 = raw_prior.iter().sum();
        let recipe = Self {
            domain_id: name.to_string(),
            class_means,
            class_covariance_scale: scale,
            mean_shift: shift,
            label_prior: raw_prior.iter().map(|p| p / total).collect(),
        };
        recipe.validate(feature_dim, class_count)?;
        Ok(recipe)
    }

    pub fn validate(&self, feature_dim: usize, class_count: usize) -> Result<(), DataError> {
        let bad = |reason: String| DataError::InvalidRecipe {
            recipe: self.domain_id.clone(),
            reason,
        };
        if self.class_means.len() != class_count || self.label_prior.len() != class_count {
            return Err(bad(format!(
                "expected {class_count} class means and prior entries, got {} and {}",
                self.class_means.len(),
                self.label_prior.len()
            )));
        }
        if self.mean_shift.len() != feature_dim
            || self.class_means.iter().any(|m| m.len() != feature_dim)
        {
            return Err(bad(format!("means and shift must have length {feature_dim}")));
        }
        let all_values = self
            .class_means
            .iter()
            .flatten()
            .chain(&self.mean_shift)
            .chain(&self.label_prior);
        if all_values.clone().any(|v| !v.is_finite()) {
            return Err(bad("non-finite value".into()));
        }
        if !(self.class_covariance_scale > 0.0 && self.class_covariance_scale.is_finite()) {
            return Err(bad("class_covariance_scale must be positive".into()));
        }
        if self.label_prior.iter().any(|&p| p < 0.0) {
            return Err(bad("label_prior entries must be non-negative".into()));
        }
        let total: f64 = self.label_prior.iter().sum();
        if total == 0.0 {
            return Err(DataError::DegeneratePrior);
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(bad(format!("label_prior sums to {total}, expected 1")));
        }
        Ok(())
    }
}

/// Draw `n` examples from `recipe`. Same `(recipe, n, seed)` gives the same dataset.
pub fn synthesize(recipe: &DomainRecipe, n: usize, seed: u64) -> Result<Dataset, DataError> {
    let feature_dim = recipe.mean_shift.len();
    let class_count = recipe.label_prior.len();
    recipe.validate(feature_dim, class_count)?;
    if n == 0 {
        return Err(DataError::EmptyDataset);
    }
    let mut rng = rng::stream(seed, Stream::Synthesize, &[]);
    let mut cumulative = Vec::with_capacity(class_count);
    let mut acc = 0.0;
    for p in &recipe.label_prior {
        acc += p;
        cumulative.push(acc);
    }
    let last_positive = recipe.label_prior.iter().rposition(|&p| p > 0.0).unwrap_or(0);

    let mut examples = Vec::with_capacity(n);
    for _ in 0..n {
        let u = rng::unit_f64(&mut rng) * acc;
        let label = cumulative
            .iter()
            .position(|&c| u < c)
            .unwrap_or(last_positive)
            .min(last_positive);
        let features = recipe.class_means[label]
            .iter()
            .zip(&recipe.mean_shift)
            .map(|(m, s)| {
                let z: f64 = StandardNormal.sample(&mut rng);
                m + s + recipe.class_covariance_scale * z
            })
            .collect();
        examples.push(Example::new(features, label));
    }
    Ok(Dataset::new(examples, feature_dim, class_count)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionScheme {
    Iid,
    DirichletLabelSkew,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub client_count: usize,
    pub scheme: PartitionScheme,
    pub dirichlet_alpha: f64,
    pub min_samples_per_client: usize,
    pub seed: u64,
}

impl PartitionPlan {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.client_count == 0 {
            return Err(DataError::InvalidPlan("client_count must be at least 1".into()));
        }
        if !(self.dirichlet_alpha > 0.0 && self.dirichlet_alpha.is_finite()) {
            return Err(DataError::InvalidPlan("dirichlet_alpha must be positive".into()));
        }
        if self.min_samples_per_client == 0 {
            return Err(DataError::InvalidPlan(
                "min_samples_per_client must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Assign every index of `labels` to exactly one client. Each shard is sorted ascending.
pub fn partition_indices(
    labels: &[usize],
    class_count: usize,
    plan: &PartitionPlan,
) -> Result<Vec<Vec<usize>>, DataError> {
    plan.validate()?;
    let n = labels.len();
    let clients = plan.client_count;
    if n < clients * plan.min_samples_per_client {
        return Err(DataError::InsufficientSamples {
            available: n,
            clients,
            min: plan.min_samples_per_client,
        });
    }
    let mut rng = rng::stream(plan.seed, Stream::Partition, &[]);
    let mut shards: Vec<Vec<usize>> = vec![Vec::new(); clients];

    match plan.scheme {
        PartitionScheme::Iid => {
            let mut order: Vec<usize> = (0..n).collect();
            rng::shuffle(&mut rng, &mut order);
            let base = n / clients;
            let extra = n % clients;
            let mut start = 0;
            for (c, shard) in shards.iter_mut().enumerate() {
                let len = base + usize::from(c < extra);
                shard.extend_from_slice(&order[start..start + len]);
                start += len;
            }
        }
        PartitionScheme::DirichletLabelSkew => {
            let gamma = Gamma::new(plan.dirichlet_alpha, 1.0)
                .map_err(|e| DataError::InvalidPlan(e.to_string()))?;
            for class in 0..class_count {
                let mut members: Vec<usize> = (0..n).filter(|&i| labels[i] == class).collect();
                if members.is_empty() {
                    continue;
                }
                rng::shuffle(&mut rng, &mut members);
                let proportions = dirichlet(&mut rng, &gamma, clients);
                let mut start = 0usize;
                let mut cumulative = 0.0;
                for (c, p) in proportions.iter().enumerate() {
                    cumulative += p;
                    let end = if c + 1 == clients {
                        members.len()
                    } else {
                        ((cumulative * members.len() as f64) as usize).clamp(start, members.len())
                    };
                    shards[c].extend_from_slice(&members[start..end]);
                    start = end;
                }
            }
            top_up(&mut rng, &mut shards, plan.min_samples_per_client);
        }
    }
    for shard in &mut shards {
        shard.sort_unstable();
    }
    Ok(shards)
}

fn dirichlet<R: RngCore>(rng: &mut R, gamma: &Gamma<f64>, k: usize) -> Vec<f64> {
    let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 && total.is_finite() {
        draws.iter().map(|g| g / total).collect()
    } else {
        // Every gamma draw underflowed (tiny alpha): the mass goes to one client.
        let mut p = vec![0.0; k];
        p[rng::below(rng, k)] = 1.0;
        p
    }
}

fn top_up<R: RngCore>(rng: &mut R, shards: &mut [Vec<usize>], min: usize) {
    while let Some(needy) = shards.iter().position(|s| s.len() < min) {
        let donor = (0..shards.len())
            .max_by(|&a, &b| shards[a].len().cmp(&shards[b].len()).then(b.cmp(&a)))
            .expect("at least one shard");
        let pick = rng::below(rng, shards[donor].len());
        let moved = shards[donor].swap_remove(pick);
        shards[needy].push(moved);
    }
}

/// Split `data` into `plan.client_count` disjoint shards covering it.
pub fn partition(data: &Dataset, plan: &PartitionPlan) -> Result<Vec<Dataset>, DataError> {
    let labels: Vec<usize> = data.examples().iter().map(|e| e.label).collect();
    partition_indices(&labels, data.class_count(), plan)?
        .iter()
        .map(|idx| Ok(data.subset(idx)?))
        .collect()
}

/// Column selection for CSV ingestion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub features: Vec<String>,
    pub label: String,
}

/// Read a comma-separated file with a header row.
///
/// Labels are arbitrary strings; the sorted distinct labels map to `0..K`.
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset, DataError> {
    let file = std::fs::File::open(path)?;
    read_csv(file, schema)
}

pub fn read_csv<R: Read>(reader: R, schema: &CsvSchema) -> Result<Dataset, DataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::None)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| csv_error(&e, 1))?
        .clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };
    let feature_cols = schema
        .features
        .iter()
        .map(|f| column(f))
        .collect::<Result<Vec<_>, _>>()?;
    let label_col = column(&schema.label)?;

    let mut rows: Vec<(Vec<f64>, String)> = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| csv_error(&e, rows.len() as u64 + 2))?;
        let line = record.position().map_or(rows.len() as u64 + 2, |p| p.line());
        let mut features = Vec::with_capacity(feature_cols.len());
        for (&col, name) in feature_cols.iter().zip(&schema.features) {
            let raw = record.get(col).unwrap_or("");
            match raw.parse::<f64>() {
                Ok(v) if v.is_finite() => features.push(v),
                _ => {
                    return Err(DataError::NonNumeric {
                        line,
                        column: name.clone(),
                        value: raw.to_string(),
                    })
                }
            }
        }
        let label = record
            .get(label_col)
            .ok_or_else(|| DataError::Parse {
                line,
                message: format!("missing label column `{}`", schema.label),
            })?
            .to_string();
        rows.push((features, label));
    }
    if rows.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    let names: Vec<String> = rows
        .iter()
        .map(|(_, l)| l.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let class_count = names.len().max(2);
    let examples = rows
        .into_iter()
        .map(|(f, l)| {
            let label = names.binary_search(&l).expect("label collected above");
            Example::new(f, label)
        })
        .collect();
    Ok(Dataset::new(examples, schema.features.len(), class_count)?)
}

fn csv_error(e: &csv::Error, fallback_line: u64) -> DataError {
    let line = e
        .position()
        .map_or(fallback_line, |p| p.line());
    DataError::Parse {
        line,
        message: e.to_string(),
    }
}

/// Write `data` with a header row. Labels are written zero-padded so that the
/// sorted-string mapping of [`read_csv`] restores the same indices.
pub fn write_csv<W: Write>(writer: W, data: &Dataset, schema: &CsvSchema) -> Result<(), DataError> {
    if schema.features.len() != data.feature_dim() {
        return Err(ModelError::DimensionMismatch {
            expected: data.feature_dim(),
            actual: schema.features.len(),
        }
        .into());
    }
    let width = (data.class_count().saturating_sub(1)).to_string().len();
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header: Vec<&str> = schema.features.iter().map(String::as_str).collect();
    header.push(&schema.label);
    wtr.write_record(&header).map_err(|e| csv_error(&e, 1))?;
    for ex in data.examples() {
        let mut row: Vec<String> = ex.features.iter().map(|v| format!("{v:?}")).collect();
        row.push(format!("{:0width$}", ex.label));
        wtr.write_record(&row).map_err(|e| csv_error(&e, 0))?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plan(n: usize, scheme: PartitionScheme, alpha: f64, seed: u64) -> PartitionPlan {
        PartitionPlan {
            client_count: n,
            scheme,
            dirichlet_alpha: alpha,
            min_samples_per_client: 1,
            seed,
        }
    }

    #[test]
    fn synthesize_is_deterministic() {
        let r = DomainRecipe::builtin("financial", 5, 3).unwrap();
        assert_eq!(synthesize(&r, 200, 11).unwrap(), synthesize(&r, 200, 11).unwrap());
        assert_ne!(synthesize(&r, 200, 11).unwrap(), synthesize(&r, 200, 12).unwrap());
    }

    #[test]
    fn one_hot_prior_gives_single_class() {
        let mut r = DomainRecipe::builtin("medical", 3, 3).unwrap();
        r.label_prior = vec![1.0, 0.0, 0.0];
        let d = synthesize(&r, 500, 1).unwrap();
        assert!(d.examples().iter().all(|e| e.label == 0));
    }

    #[test]
    fn degenerate_prior_rejected() {
        let mut r = DomainRecipe::builtin("medical", 3, 3).unwrap();
        r.label_prior = vec![0.0; 3];
        assert!(matches!(synthesize(&r, 5, 1), Err(DataError::DegeneratePrior)));
    }

    #[test]
    fn uniform_binary_prior_is_balanced() {
        let r = DomainRecipe::builtin("medical", 2, 2).unwrap();
        let d = synthesize(&r, 10_000, 5).unwrap();
        let frac = d.label_counts()[0] as f64 / 10_000.0;
        assert!((frac - 0.5).abs() < 0.02, "class-0 fraction {frac}");
    }

    #[test]
    fn builtins_need_enough_features() {
        assert!(DomainRecipe::builtin("user", 2, 4).is_err());
        assert!(matches!(
            DomainRecipe::builtin("retail", 4, 4),
            Err(DataError::UnknownRecipe(_))
        ));
    }

    #[test]
    fn single_iid_client_keeps_everything_in_order() {
        let r = DomainRecipe::builtin("user", 4, 2).unwrap();
        let d = synthesize(&r, 50, 2).unwrap();
        let shards = partition(&d, &plan(1, PartitionScheme::Iid, 1.0, 0)).unwrap();
        assert_eq!(shards, vec![d]);
    }

    #[test]
    fn insufficient_samples_rejected() {
        let labels = vec![0; 10];
        let mut p = plan(4, PartitionScheme::Iid, 1.0, 0);
        p.min_samples_per_client = 3;
        assert!(matches!(
            partition_indices(&labels, 2, &p),
            Err(DataError::InsufficientSamples { available: 10, clients: 4, min: 3 })
        ));
    }

    #[test]
    fn top_up_reaches_minimum_under_heavy_skew() {
        let labels: Vec<usize> = (0..400).map(|i| i % 4).collect();
        let mut p = plan(8, PartitionScheme::DirichletLabelSkew, 0.05, 17);
        p.min_samples_per_client = 20;
        let shards = partition_indices(&labels, 4, &p).unwrap();
        assert!(shards.iter().all(|s| s.len() >= 20));
        assert_eq!(shards.iter().map(Vec::len).sum::<usize>(), 400);
    }

    #[test]
    fn csv_header_only_is_empty() {
        let schema = CsvSchema { features: vec!["a".into()], label: "y".into() };
        let err = read_csv("a,y\n".as_bytes(), &schema).unwrap_err();
        assert_eq!(err.to_string(), "empty dataset");
    }

    #[test]
    fn csv_three_rows() {
        let schema = CsvSchema { features: vec!["a".into(), "b".into()], label: "y".into() };
        let text = "b,a,y\n1.5,2,dog\n0,-1,cat\n3e-1,4,dog\n";
        let d = read_csv(text.as_bytes(), &schema).unwrap();
        assert_eq!(d.len(), 3);
        // sorted labels: cat -> 0, dog -> 1; columns follow the schema order
        assert_eq!(d.examples()[0], Example::new(vec![2.0, 1.5], 1));
        assert_eq!(d.examples()[1], Example::new(vec![-1.0, 0.0], 0));
    }

    #[test]
    fn csv_errors_name_line_and_column() {
        let schema = CsvSchema { features: vec!["a".into()], label: "y".into() };
        let err = read_csv("a,y\n1,0\nx,1\n".as_bytes(), &schema).unwrap_err();
        match err {
            DataError::NonNumeric { line, column, value } => {
                assert_eq!((line, column.as_str(), value.as_str()), (3, "a", "x"));
            }
            other => panic!("unexpected {other:?}"),
        }
        let err = read_csv("a,z\n1,0\n".as_bytes(), &schema).unwrap_err();
        assert!(matches!(err, DataError::MissingColumn(c) if c == "y"));
        let err = read_csv("a,y\n1,0\n2,1,7\n".as_bytes(), &schema).unwrap_err();
        assert!(matches!(err, DataError::Parse { line: 3, .. }), "{err:?}");
    }
}
