//! Turning a validated config into data, clients and a coordinator.
//!
//! Seeds per domain `i`: training data `derive(seed, Synthesize, [i, 0])`,
//! test data `[i, 1]`, partition `derive(seed, Partition, [i])`, CSV split
//! `derive(seed, TestSplit, [i])`.

use super::config::{ConfigError, DomainConfig, ExperimentConfig, PolicyChoice};
use super::RunError;
use crate::data::{self, CsvSchema, DomainRecipe, PartitionPlan};
use crate::federation::{
    derive_privacy_weights, AggregationPolicy, ClientState, Coordinator, Evaluator, Federation, RosterEntry,
    SecureAggregation,
};
use crate::rng::{self, Stream};
use crate::secure_sum::FixedPointCodec;
use crate::Dataset;

/// One domain's train and held-out data.
#[derive(Debug, Clone)]
pub struct DomainData {
    pub name: String,
    pub train: Dataset,
    pub test: Dataset,
}

fn recipe_of(cfg: &ExperimentConfig, d: &DomainConfig) -> Result<DomainRecipe, RunError> {
    let spec = &cfg.model;
    match (&d.recipe, &d.inline) {
        (Some(name), _) => Ok(DomainRecipe::builtin(name, spec.feature_dim, spec.class_count)?),
        (_, Some(inline)) => Ok(inline.clone()),
        _ => unreachable!("validated: synthetic domain has a recipe"),
    }
}

/// Synthesize or load domain `index`.
pub fn load_domain(cfg: &ExperimentConfig, index: usize) -> Result<DomainData, RunError> {
    let d = &cfg.domains[index];
    let spec = &cfg.model;
    let i = index as u64;
    let (train, test) = match &d.csv {
        None => {
            let recipe = recipe_of(cfg, d)?;
            let train = data::synthesize(&recipe, d.train_samples, rng::derive_seed(cfg.seed, Stream::Synthesize, &[i, 0]))?;
            let test = data::synthesize(&recipe, d.test_samples, rng::derive_seed(cfg.seed, Stream::Synthesize, &[i, 1]))?;
            (train, test)
        }
        Some(src) => {
            let key = format!("domains.{index}.csv");
            let schema = CsvSchema { features: src.features.clone(), label: src.label.clone() };
            let all = data::load_csv(cfg.resolve(&src.path), &schema)
                .map_err(|e| ConfigError::new(key.as_str(), e))?;
            let all = all
                .with_class_count(spec.class_count)
                .map_err(|e| ConfigError::new(key.as_str(), e))?;
            let n = all.len();
            if n < 2 {
                return Err(ConfigError::new(key, "at least two rows are needed for a train/test split").into());
            }
            let mut order: Vec<usize> = (0..n).collect();
            rng::shuffle(&mut rng::stream(cfg.seed, Stream::TestSplit, &[i]), &mut order);
            let n_test = ((src.test_fraction * n as f64).round() as usize).clamp(1, n - 1);
            let (test_idx, train_idx) = order.split_at_mut(n_test);
            test_idx.sort_unstable();
            train_idx.sort_unstable();
            (all.subset(train_idx)?, all.subset(test_idx)?)
        }
    };
    Ok(DomainData { name: d.name.clone(), train, test })
}

/// Split domain `index`'s training data among its clients.
pub fn client_shards(cfg: &ExperimentConfig, index: usize, train: &Dataset) -> Result<Vec<Dataset>, RunError> {
    let plan = PartitionPlan {
        client_count: cfg.domains[index].clients,
        scheme: cfg.partition.scheme,
        dirichlet_alpha: cfg.partition.dirichlet_alpha,
        min_samples_per_client: cfg.partition.min_samples_per_client,
        seed: rng::derive_seed(cfg.seed, Stream::Partition, &[index as u64]),
    };
    data::partition(train, &plan).map_err(|e| ConfigError::new(format!("domains.{index}"), e).into())
}

pub fn secure_aggregation(cfg: &ExperimentConfig) -> Result<Option<SecureAggregation>, RunError> {
    if !cfg.secure_aggregation {
        return Ok(None);
    }
    let codec = FixedPointCodec::new(cfg.fixed_point_bits).map_err(|e| ConfigError::new("fixed_point_bits", e))?;
    Ok(Some(SecureAggregation::new(cfg.seed, cfg.client_count(), codec)))
}

pub fn evaluator(cfg: &ExperimentConfig, domains: &[DomainData]) -> Result<Evaluator, RunError> {
    let tests = domains.iter().map(|d| (d.name.clone(), d.test.clone())).collect();
    Ok(Evaluator::new(tests, cfg.tracked_indices.clone())?)
}

pub fn roster(cfg: &ExperimentConfig, sample_counts: &[u64]) -> Vec<RosterEntry> {
    sample_counts
        .iter()
        .enumerate()
        .map(|(id, &n)| {
            let id = id as u32;
            let domain = cfg.domain_of(id).expect("client id within range");
            RosterEntry {
                client_id: id,
                domain: cfg.domains[domain].name.clone(),
                sample_count: n,
                budget: cfg.privacy.budget_for(id),
            }
        })
        .collect()
}

pub fn policy(cfg: &ExperimentConfig, roster: &[RosterEntry]) -> AggregationPolicy {
    match cfg.policy.kind {
        PolicyChoice::Uniform => AggregationPolicy::uniform(),
        PolicyChoice::SizeWeighted => AggregationPolicy::size_weighted(),
        PolicyChoice::CustomWeighted => {
            AggregationPolicy::custom(cfg.policy.weights.iter().enumerate().map(|(i, &w)| (i as u32, w)).collect())
        }
        PolicyChoice::PrivacyWeighted => AggregationPolicy::custom(derive_privacy_weights(roster, cfg.policy.epsilon_cap)),
    }
}

/// Coordinator for clients announcing `sample_counts` (indexed by client id).
pub fn coordinator(cfg: &ExperimentConfig, sample_counts: &[u64], evaluator: Evaluator) -> Result<Coordinator, RunError> {
    let roster = roster(cfg, sample_counts);
    let policy = policy(cfg, &roster);
    Ok(Coordinator::new(
        cfg.model.clone(),
        cfg.schedule.clone(),
        policy,
        secure_aggregation(cfg)?,
        cfg.seed,
        roster,
        evaluator,
    )?)
}

fn client_state(cfg: &ExperimentConfig, id: u32, domain: usize, data: Dataset) -> ClientState {
    ClientState {
        client_id: id,
        domain: cfg.domains[domain].name.clone(),
        data,
        budget: cfg.privacy.budget_for(id),
        weight_override: match cfg.policy.kind {
            PolicyChoice::CustomWeighted => Some(cfg.policy.weights[id as usize]),
            _ => None,
        },
    }
}

/// The whole federation in one process, plus every domain's data.
pub fn federation(cfg: &ExperimentConfig) -> Result<(Federation, Vec<DomainData>), RunError> {
    let domains = (0..cfg.domains.len())
        .map(|i| load_domain(cfg, i))
        .collect::<Result<Vec<_>, _>>()?;
    let mut clients = Vec::new();
    for (i, d) in domains.iter().enumerate() {
        for shard in client_shards(cfg, i, &d.train)? {
            clients.push(client_state(cfg, clients.len() as u32, i, shard));
        }
    }
    let sizes: Vec<u64> = clients.iter().map(|c| c.data.len() as u64).collect();
    let co = coordinator(cfg, &sizes, evaluator(cfg, &domains)?)?;
    Ok((Federation::new(co, clients)?, domains))
}

/// Client `id` with its private shard, as a separate process would build it.
pub fn single_client(cfg: &ExperimentConfig, id: u32) -> Result<ClientState, RunError> {
    let domain = cfg.domain_of(id).ok_or_else(|| {
        ConfigError::new("--client-id", format!("client {id} does not exist ({} clients)", cfg.client_count()))
    })?;
    let d = load_domain(cfg, domain)?;
    let first = cfg.client_ranges()[domain].start;
    let shard = client_shards(cfg, domain, &d.train)?.swap_remove((id - first) as usize);
    Ok(client_state(cfg, id, domain, shard))
}
