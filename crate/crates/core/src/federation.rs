//! The round engine.
//!
//! One round `r` (1-based) runs as follows:
//!
//! 1. The coordinator samples `ceil(fraction * N)` participants and fixes the
//!    learning rate `eta * decay^(r-1)` and each participant's aggregation
//!    coefficient `a_i` (uniform, dataset-size or custom weights, normalized).
//! 2. Each participant starts from the global model, runs `E` local epochs of
//!    gradient descent and privatizes its delta
//!    `d = theta_local - theta_global`. It releases the parameters
//!    `theta_local + (privatize(d) - d)`, which equal
//!    `theta_global + privatize(d)` and are exactly `theta_local` when
//!    privatization is disabled.
//! 3. The coordinator sets `theta <- sum_i a_i * theta_i`, summing in
//!    client-id order. With secure aggregation every client submits a masked
//!    fixed-point encoding of `a_i * theta_i` and the coordinator only sees
//!    the sum.
//! 4. The new model is evaluated on every domain's held-out split.
//!
//! Because the coefficients sum to one, this is the same as moving the global
//! model by the weighted mean of the privatized deltas. Releasing parameters
//! rather than deltas keeps a lone participant's model bit for bit: in
//! floating point `global + (local - global)` is not always `local`.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{self, ClientRecord, EvalError, ParamTrace, RoundReport};
use crate::model::{ModelError, ModelSpec};
use crate::privacy::{self, NoiseReceipt, PrivacyBudget, PrivacyError};
use crate::rng::{self, Stream};
use crate::secure_sum::{self, FixedPointCodec, MaskedShare, PairwiseSeedMatrix, SecureSumError};
use crate::{Dataset, ParamVector};

#[derive(Debug, Error)]
pub enum FederationError {
    #[error("every update in round {0} was flagged as diverged")]
    AllFlagged(u32),
    #[error("aggregation weights sum to zero")]
    ZeroTotalWeight,
    #[error("no aggregation weight for client {0}")]
    MissingWeight(u32),
    #[error("invalid aggregation weight {weight} for client {client}")]
    InvalidWeight { client: u32, weight: f64 },
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("invalid federation: {0}")]
    Invalid(String),
    #[error("round {round} aborted: {reason}")]
    RoundAborted { round: u32, reason: String },
    #[error(transparent)]
    SecureSum(#[from] SecureSumError),
    #[error(transparent)]
    Privacy(#[from] PrivacyError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// A client and its private shard.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub client_id: u32,
    pub domain: String,
    pub data: Dataset,
    pub budget: PrivacyBudget,
    pub weight_override: Option<f64>,
}

/// A client's released contribution for one round.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: u32,
    pub round: u32,
    /// Released parameters `theta_global + privatize(theta_local - theta_global)`;
    /// the global model itself when flagged.
    pub params: ParamVector,
    pub sample_count: u64,
    pub loss_before: f64,
    pub loss_after: f64,
    pub receipt: NoiseReceipt,
    /// Local training diverged; the update is excluded from aggregation.
    pub flagged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Uniform,
    SizeWeighted,
    CustomWeighted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregationPolicy {
    pub kind: PolicyKind,
    pub weights: BTreeMap<u32, f64>,
}

impl AggregationPolicy {
    pub fn uniform() -> Self {
        Self { kind: PolicyKind::Uniform, weights: BTreeMap::new() }
    }

    pub fn size_weighted() -> Self {
        Self { kind: PolicyKind::SizeWeighted, weights: BTreeMap::new() }
    }

    pub fn custom(weights: BTreeMap<u32, f64>) -> Self {
        Self { kind: PolicyKind::CustomWeighted, weights }
    }

    /// Convex-combination coefficients for `(client_id, sample_count)` pairs,
    /// returned in the input order.
    pub fn coefficients(&self, members: &[(u32, u64)]) -> Result<Vec<f64>, FederationError> {
        if members.is_empty() {
            return Err(FederationError::ZeroTotalWeight);
        }
        let raw: Vec<f64> = match self.kind {
            PolicyKind::Uniform => return Ok(vec![1.0 / members.len() as f64; members.len()]),
            PolicyKind::SizeWeighted => members.iter().map(|&(_, n)| n as f64).collect(),
            PolicyKind::CustomWeighted => members
                .iter()
                .map(|&(id, _)| {
                    let w = *self.weights.get(&id).ok_or(FederationError::MissingWeight(id))?;
                    if !(w >= 0.0 && w.is_finite()) {
                        return Err(FederationError::InvalidWeight { client: id, weight: w });
                    }
                    Ok(w)
                })
                .collect::<Result<_, _>>()?,
        };
        let total: f64 = raw.iter().sum();
        if total.is_nan() || total <= 0.0 {
            return Err(FederationError::ZeroTotalWeight);
        }
        Ok(raw.iter().map(|w| w / total).collect())
    }
}

/// Default cap used by [`derive_privacy_weights`].
pub const DEFAULT_EPSILON_CAP: f64 = 8.0;

/// Weights `w_i ∝ |D_i| * min(eps_i, cap) / cap`, normalized to sum to one.
/// Disabled budgets count as `cap`, so clients with tighter budgets contribute less.
pub fn derive_privacy_weights(clients: &[RosterEntry], epsilon_cap: f64) -> BTreeMap<u32, f64> {
    let raw: Vec<(u32, f64)> = clients
        .iter()
        .map(|c| {
            let eps = if c.budget.enabled { c.budget.epsilon.min(epsilon_cap) } else { epsilon_cap };
            (c.client_id, c.sample_count as f64 * eps / epsilon_cap)
        })
        .collect();
    let total: f64 = raw.iter().map(|(_, w)| w).sum();
    if !(total > 0.0 && total.is_finite()) {
        log::warn!("privacy-derived weights are degenerate; falling back to uniform");
        let n = clients.len() as f64;
        return clients.iter().map(|c| (c.client_id, 1.0 / n)).collect();
    }
    raw.into_iter().map(|(id, w)| (id, w / total)).collect()
}

/// Local optimization and participation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSchedule {
    pub rounds: u32,
    pub local_epochs: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub participation_fraction: f64,
}

impl Default for TrainingSchedule {
    fn default() -> Self {
        Self {
            rounds: 100,
            local_epochs: 5,
            batch_size: None,
            learning_rate: 0.1,
            lr_decay: 0.99,
            participation_fraction: 1.0,
        }
    }
}

impl TrainingSchedule {
    pub fn validate(&self) -> Result<(), FederationError> {
        let bad = |m: &str| Err(FederationError::InvalidSchedule(m.to_string()));
        if self.rounds == 0 {
            return bad("rounds must be at least 1");
        }
        if self.local_epochs == 0 {
            return bad("local_epochs must be at least 1");
        }
        if self.batch_size == Some(0) {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay must lie in (0, 1]");
        }
        if !(self.participation_fraction > 0.0 && self.participation_fraction <= 1.0) {
            return bad("participation_fraction must lie in (0, 1]");
        }
        Ok(())
    }

    /// Step size used throughout round `round` (1-based).
    pub fn learning_rate_at(&self, round: u32) -> f64 {
        self.learning_rate * self.lr_decay.powi(round as i32 - 1)
    }
}

/// `E` local epochs of gradient descent from `start` on `data`.
///
/// Full-batch unless `batch_size` is set, in which case every epoch visits a
/// fresh seeded permutation in chunks of `batch_size`. Returns `None` as soon
/// as the iterate stops being finite.
pub fn gradient_descent(
    spec: &ModelSpec,
    start: &[f64],
    data: &Dataset,
    learning_rate: f64,
    epochs: u32,
    batch_size: Option<usize>,
    batch_seed: u64,
) -> Option<Vec<f64>> {
    let mut theta = start.to_vec();
    let mut grad = vec![0.0; theta.len()];
    let step = |theta: &mut Vec<f64>, grad: &[f64]| {
        for (t, g) in theta.iter_mut().zip(grad) {
            *t -= learning_rate * g;
        }
        theta.iter().all(|v| v.is_finite())
    };
    match batch_size {
        None => {
            for _ in 0..epochs {
                spec.gradient_raw(&theta, data.examples(), &mut grad);
                if !step(&mut theta, &grad) {
                    return None;
                }
            }
        }
        Some(b) => {
            let mut rng = rng::rng_from(batch_seed);
            let mut order: Vec<usize> = (0..data.len()).collect();
            for _ in 0..epochs {
                rng::shuffle(&mut rng, &mut order);
                for chunk in order.chunks(b) {
                    let batch = chunk.iter().map(|&i| &data.examples()[i]);
                    spec.gradient_raw(&theta, batch, &mut grad);
                    if !step(&mut theta, &grad) {
                        return None;
                    }
                }
            }
        }
    }
    Some(theta)
}

/// Seed of `client`'s mini-batch order in `round`.
pub fn batch_seed(experiment_seed: u64, client_id: u32, round: u32) -> u64 {
    rng::derive_seed(experiment_seed, Stream::Batching, &[client_id as u64, round as u64])
}

impl ClientState {
    /// Train from `global` for one round and release the privatized delta.
    pub fn local_train(
        &self,
        spec: &ModelSpec,
        global: &ParamVector,
        schedule: &TrainingSchedule,
        round: u32,
        learning_rate: f64,
        experiment_seed: u64,
    ) -> Result<ClientUpdate, FederationError> {
        if global.dim() != spec.param_dim() {
            return Err(ModelError::DimensionMismatch {
                expected: spec.param_dim(),
                actual: global.dim(),
            }
            .into());
        }
        let loss_before = spec.loss_raw(global.as_slice(), self.data.examples());
        let trained = gradient_descent(
            spec,
            global.as_slice(),
            &self.data,
            learning_rate,
            schedule.local_epochs,
            schedule.batch_size,
            batch_seed(experiment_seed, self.client_id, round),
        );
        let flagged_update = |loss_after: f64| ClientUpdate {
            client_id: self.client_id,
            round,
            params: global.clone(),
            sample_count: self.data.len() as u64,
            loss_before,
            loss_after,
            receipt: NoiseReceipt::none(f64::NAN),
            flagged: true,
        };
        let Some(local) = trained else {
            log::warn!("client {} diverged in round {round}", self.client_id);
            return Ok(flagged_update(f64::NAN));
        };
        let loss_after = spec.loss_raw(&local, self.data.examples());
        if !loss_after.is_finite() {
            log::warn!("client {} produced a non-finite loss in round {round}", self.client_id);
            return Ok(flagged_update(loss_after));
        }
        let raw: Vec<f64> = local.iter().zip(global.iter()).map(|(l, g)| l - g).collect();
        let raw = ParamVector::new(raw)?;
        let seed = privacy::noise_seed(experiment_seed, self.client_id, round);
        let (private, receipt) = privacy::privatize(&raw, &self.budget, seed)?;
        let released = local
            .iter()
            .zip(private.iter().zip(raw.iter()))
            .map(|(l, (p, d))| l + (p - d))
            .collect();
        Ok(ClientUpdate {
            client_id: self.client_id,
            round,
            params: ParamVector::new(released)?,
            sample_count: self.data.len() as u64,
            loss_before,
            loss_after,
            receipt,
            flagged: false,
        })
    }
}

/// `sum_i a_i * theta_i` over the non-flagged updates, summed in client-id
/// order so that the input order never matters. `global` fixes the dimension.
pub fn aggregate(
    updates: &[ClientUpdate],
    policy: &AggregationPolicy,
    global: &ParamVector,
) -> Result<ParamVector, FederationError> {
    let mut kept: Vec<&ClientUpdate> = updates.iter().filter(|u| !u.flagged).collect();
    if kept.is_empty() {
        return Err(FederationError::AllFlagged(updates.first().map_or(0, |u| u.round)));
    }
    kept.sort_by_key(|u| u.client_id);
    let members: Vec<(u32, u64)> = kept.iter().map(|u| (u.client_id, u.sample_count)).collect();
    let coefs = policy.coefficients(&members)?;
    let mut sum = vec![0.0; global.dim()];
    for (u, a) in kept.iter().zip(&coefs) {
        if u.params.dim() != global.dim() {
            return Err(ModelError::DimensionMismatch {
                expected: global.dim(),
                actual: u.params.dim(),
            }
            .into());
        }
        for (s, p) in sum.iter_mut().zip(u.params.iter()) {
            *s += a * p;
        }
    }
    Ok(ParamVector::new(sum)?)
}

/// `ceil(fraction * n)` clients chosen by a seeded Fisher-Yates pass, sorted.
pub fn select_participants(experiment_seed: u64, clients: u32, fraction: f64, round: u32) -> Vec<u32> {
    let m = ((fraction * clients as f64).ceil() as u32).clamp(1, clients.max(1));
    let mut ids: Vec<u32> = (0..clients).collect();
    if m < clients {
        let mut rng = rng::stream(experiment_seed, Stream::Sampling, &[round as u64]);
        rng::shuffle(&mut rng, &mut ids);
        ids.truncate(m as usize);
        ids.sort_unstable();
    }
    ids
}

/// Secure-aggregation settings shared by the coordinator and the clients.
#[derive(Debug, Clone, PartialEq)]
pub struct SecureAggregation {
    pub codec: FixedPointCodec,
    pub seeds: PairwiseSeedMatrix,
}

impl SecureAggregation {
    pub fn new(experiment_seed: u64, clients: u32, codec: FixedPointCodec) -> Self {
        Self {
            codec,
            seeds: PairwiseSeedMatrix::derive(experiment_seed, clients),
        }
    }

    /// Mask `coefficient * params` for the round's participants.
    pub fn mask_update(
        &self,
        update: &ClientUpdate,
        coefficient: f64,
        participants: &[u32],
    ) -> Result<MaskedShare, FederationError> {
        let scaled = ParamVector::new(update.params.iter().map(|p| coefficient * p).collect())?;
        let encoded = self.codec.encode(&scaled)?;
        Ok(secure_sum::mask(&encoded, update.client_id, &self.seeds, participants, update.round)?)
    }
}

/// What the coordinator publishes to the participants of a round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundPlan {
    pub round: u32,
    pub learning_rate: f64,
    pub participants: Vec<u32>,
    /// Coefficient per participant, aligned with `participants`.
    pub coefficients: Vec<f64>,
}

impl RoundPlan {
    pub fn coefficient_of(&self, client: u32) -> Option<f64> {
        self.participants
            .iter()
            .position(|&p| p == client)
            .map(|i| self.coefficients[i])
    }
}

/// Public facts the coordinator knows about a client.
#[derive(Debug, Clone, PartialEq)]
pub struct RosterEntry {
    pub client_id: u32,
    pub domain: String,
    pub sample_count: u64,
    pub budget: PrivacyBudget,
}

/// Held-out data and tracked coordinates used to evaluate the global model.
#[derive(Debug, Clone)]
pub struct Evaluator {
    pub domains: Vec<(String, Dataset)>,
    pub pooled: Dataset,
    pub tracked_indices: Vec<usize>,
}

impl Evaluator {
    pub fn new(domains: Vec<(String, Dataset)>, tracked_indices: Vec<usize>) -> Result<Self, FederationError> {
        let parts: Vec<&Dataset> = domains.iter().map(|(_, d)| d).collect();
        let pooled = Dataset::concat(&parts)?;
        Ok(Self { domains, pooled, tracked_indices })
    }
}

/// Server-side state: roster, policy, global model and evaluation.
#[derive(Debug, Clone)]
pub struct Coordinator {
    pub spec: ModelSpec,
    pub schedule: TrainingSchedule,
    pub policy: AggregationPolicy,
    pub secure: Option<SecureAggregation>,
    pub seed: u64,
    pub roster: Vec<RosterEntry>,
    pub evaluator: Evaluator,
    theta: ParamVector,
    completed: u32,
}

impl Coordinator {
    pub fn new(
        spec: ModelSpec,
        schedule: TrainingSchedule,
        policy: AggregationPolicy,
        secure: Option<SecureAggregation>,
        seed: u64,
        roster: Vec<RosterEntry>,
        evaluator: Evaluator,
    ) -> Result<Self, FederationError> {
        spec.validate()?;
        schedule.validate()?;
        if roster.is_empty() {
            return Err(FederationError::Invalid("no clients".into()));
        }
        for (i, entry) in roster.iter().enumerate() {
            if entry.client_id != i as u32 {
                return Err(FederationError::Invalid(format!(
                    "client ids must be 0..N in order; position {i} has id {}",
                    entry.client_id
                )));
            }
            if entry.sample_count == 0 {
                return Err(FederationError::Invalid(format!("client {i} has no data")));
            }
            entry.budget.validate()?;
        }
        for &idx in &evaluator.tracked_indices {
            if idx >= spec.param_dim() {
                return Err(EvalError::IndexOutOfRange { index: idx, dim: spec.param_dim() }.into());
            }
        }
        if policy.kind == PolicyKind::CustomWeighted {
            let members: Vec<(u32, u64)> = roster.iter().map(|r| (r.client_id, r.sample_count)).collect();
            policy.coefficients(&members)?;
        }
        let theta = ParamVector::zeros(spec.param_dim());
        Ok(Self {
            spec,
            schedule,
            policy,
            secure,
            seed,
            roster,
            evaluator,
            theta,
            completed: 0,
        })
    }

    pub fn theta(&self) -> &ParamVector {
        &self.theta
    }

    pub fn completed_rounds(&self) -> u32 {
        self.completed
    }

    pub fn client_count(&self) -> u32 {
        self.roster.len() as u32
    }

    pub fn plan_round(&self, round: u32) -> Result<RoundPlan, FederationError> {
        let participants = select_participants(
            self.seed,
            self.client_count(),
            self.schedule.participation_fraction,
            round,
        );
        let members: Vec<(u32, u64)> = participants
            .iter()
            .map(|&id| (id, self.roster[id as usize].sample_count))
            .collect();
        let coefficients = self.policy.coefficients(&members)?;
        Ok(RoundPlan {
            round,
            learning_rate: self.schedule.learning_rate_at(round),
            participants,
            coefficients,
        })
    }

    /// Model after applying plaintext updates. Does not commit.
    pub fn aggregate_plain(&self, updates: &[ClientUpdate]) -> Result<ParamVector, FederationError> {
        aggregate(updates, &self.policy, &self.theta)
    }

    /// Model given by the unmasked sum of `shares`. Does not commit.
    pub fn aggregate_secure(
        &self,
        plan: &RoundPlan,
        shares: &[MaskedShare],
    ) -> Result<ParamVector, FederationError> {
        let secure = self
            .secure
            .as_ref()
            .ok_or_else(|| FederationError::Invalid("secure aggregation is not enabled".into()))?;
        let sum = secure_sum::unmask_sum(shares, &plan.participants, plan.round, &secure.codec)?;
        if sum.dim() != self.theta.dim() {
            return Err(ModelError::DimensionMismatch { expected: self.theta.dim(), actual: sum.dim() }.into());
        }
        Ok(sum)
    }

    /// Install the new global model and evaluate it.
    pub fn commit(
        &mut self,
        plan: &RoundPlan,
        theta: ParamVector,
        updates: &[UpdateSummary],
    ) -> Result<RoundReport, FederationError> {
        self.theta = theta;
        self.completed = plan.round;
        self.evaluate(plan, updates)
    }

    fn evaluate(&self, plan: &RoundPlan, updates: &[UpdateSummary]) -> Result<RoundReport, FederationError> {
        let spec = &self.spec;
        let theta = &self.theta;
        let domain_losses = self
            .evaluator
            .domains
            .iter()
            .map(|(name, data)| Ok((name.clone(), spec.loss(theta, data)?)))
            .collect::<Result<Vec<_>, ModelError>>()?;
        let cm = eval::confusion(spec, theta, &self.evaluator.pooled)?;
        let metrics = eval::metrics(&cm)?;

        let tracked = &self.evaluator.tracked_indices;
        let mut param_traces = vec![ParamTrace {
            tag: "global".into(),
            values: eval::trace_parameters(theta, tracked)?,
        }];
        for (name, data) in &self.evaluator.domains {
            // Where this domain's data would pull the new global model in one local round.
            let view = gradient_descent(
                spec,
                theta.as_slice(),
                data,
                plan.learning_rate,
                self.schedule.local_epochs,
                None,
                0,
            )
            .unwrap_or_else(|| vec![f64::NAN; theta.dim()]);
            param_traces.push(ParamTrace {
                tag: name.clone(),
                values: tracked.iter().map(|&i| view[i]).collect(),
            });
        }

        let clients = self
            .roster
            .iter()
            .map(|entry| {
                let summary = updates.iter().find(|u| u.client_id == entry.client_id);
                ClientRecord {
                    client_id: entry.client_id,
                    domain: entry.domain.clone(),
                    participated: summary.is_some(),
                    flagged: summary.is_some_and(|s| s.flagged),
                    sample_count: entry.sample_count,
                    loss_before: summary.map_or(f64::NAN, |s| s.loss_before),
                    loss_after: summary.map_or(f64::NAN, |s| s.loss_after),
                    epsilon: entry.budget.epsilon,
                    delta: entry.budget.delta,
                    receipt: summary.map(|s| s.receipt),
                }
            })
            .collect();

        Ok(RoundReport {
            round: plan.round,
            learning_rate: plan.learning_rate,
            domain_losses,
            metrics,
            tracked_indices: tracked.clone(),
            param_traces,
            clients,
        })
    }
}

/// The non-secret part of a client's contribution, reported in both modes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateSummary {
    pub client_id: u32,
    pub sample_count: u64,
    pub loss_before: f64,
    pub loss_after: f64,
    pub receipt: NoiseReceipt,
    pub flagged: bool,
}

impl From<&ClientUpdate> for UpdateSummary {
    fn from(u: &ClientUpdate) -> Self {
        Self {
            client_id: u.client_id,
            sample_count: u.sample_count,
            loss_before: u.loss_before,
            loss_after: u.loss_after,
            receipt: u.receipt,
            flagged: u.flagged,
        }
    }
}

/// What a client sends back for a round.
#[derive(Debug, Clone, PartialEq)]
pub enum Contribution {
    Plain(ClientUpdate),
    Masked { summary: UpdateSummary, share: MaskedShare },
    /// Diverged under secure aggregation: no share can be produced.
    Withheld(UpdateSummary),
}

impl ClientState {
    /// Train and package the result the way the round requires.
    pub fn contribute(
        &self,
        spec: &ModelSpec,
        global: &ParamVector,
        schedule: &TrainingSchedule,
        plan: &RoundPlan,
        secure: Option<&SecureAggregation>,
        experiment_seed: u64,
    ) -> Result<Contribution, FederationError> {
        let update = self.local_train(spec, global, schedule, plan.round, plan.learning_rate, experiment_seed)?;
        let Some(secure) = secure else {
            return Ok(Contribution::Plain(update));
        };
        let summary = UpdateSummary::from(&update);
        if update.flagged {
            return Ok(Contribution::Withheld(summary));
        }
        let coefficient = plan
            .coefficient_of(self.client_id)
            .ok_or(SecureSumError::NotParticipant(self.client_id))?;
        let share = secure.mask_update(&update, coefficient, &plan.participants)?;
        Ok(Contribution::Masked { summary, share })
    }
}

impl Contribution {
    pub fn summary(&self) -> UpdateSummary {
        match self {
            Contribution::Plain(u) => UpdateSummary::from(u),
            Contribution::Masked { summary, .. } | Contribution::Withheld(summary) => *summary,
        }
    }
}

/// Aggregate one round's contributions. Any secure-sum failure is reported as
/// an abort; nothing is committed.
pub fn combine(
    coordinator: &Coordinator,
    plan: &RoundPlan,
    contributions: &[Contribution],
) -> Result<ParamVector, FederationError> {
    let abort = |reason: String| FederationError::RoundAborted { round: plan.round, reason };
    if coordinator.secure.is_some() {
        let shares: Vec<MaskedShare> = contributions
            .iter()
            .filter_map(|c| match c {
                Contribution::Masked { share, .. } => Some(share.clone()),
                _ => None,
            })
            .collect();
        coordinator
            .aggregate_secure(plan, &shares)
            .map_err(|e| abort(e.to_string()))
    } else {
        let updates: Vec<ClientUpdate> = contributions
            .iter()
            .filter_map(|c| match c {
                Contribution::Plain(u) => Some(u.clone()),
                _ => None,
            })
            .collect();
        match coordinator.aggregate_plain(&updates) {
            Err(e @ FederationError::AllFlagged(_)) => Err(abort(e.to_string())),
            other => other,
        }
    }
}

/// In-process federation: a coordinator plus every client.
#[derive(Debug, Clone)]
pub struct Federation {
    pub coordinator: Coordinator,
    pub clients: Vec<ClientState>,
}

impl Federation {
    pub fn new(coordinator: Coordinator, clients: Vec<ClientState>) -> Result<Self, FederationError> {
        if clients.len() != coordinator.roster.len() {
            return Err(FederationError::Invalid("roster and client list differ in length".into()));
        }
        for (c, r) in clients.iter().zip(&coordinator.roster) {
            if c.client_id != r.client_id || c.data.len() as u64 != r.sample_count {
                return Err(FederationError::Invalid(format!(
                    "client {} does not match its roster entry",
                    c.client_id
                )));
            }
        }
        Ok(Self { coordinator, clients })
    }

    pub fn theta(&self) -> &ParamVector {
        self.coordinator.theta()
    }

    /// Run round `completed + 1`. A failed aggregation is retried once with
    /// the same participants before the error is returned.
    pub fn run_round(&mut self) -> Result<RoundReport, FederationError> {
        let round = self.coordinator.completed_rounds() + 1;
        let plan = self.coordinator.plan_round(round)?;
        let mut last_err = None;
        for attempt in 0..2 {
            let contributions = self.collect(&plan)?;
            match combine(&self.coordinator, &plan, &contributions) {
                Ok(theta) => {
                    let summaries: Vec<UpdateSummary> = contributions.iter().map(Contribution::summary).collect();
                    return self.coordinator.commit(&plan, theta, &summaries);
                }
                Err(e) => {
                    log::warn!("round {round} attempt {} failed: {e}", attempt + 1);
                    last_err = Some(e);
                }
            }
        }
        Err(last_err.expect("two failed attempts"))
    }

    /// Run every remaining scheduled round.
    pub fn run(&mut self) -> Result<Vec<RoundReport>, FederationError> {
        let mut reports = Vec::new();
        while self.coordinator.completed_rounds() < self.coordinator.schedule.rounds {
            reports.push(self.run_round()?);
        }
        Ok(reports)
    }

    fn collect(&self, plan: &RoundPlan) -> Result<Vec<Contribution>, FederationError> {
        let co = &self.coordinator;
        plan.participants
            .par_iter()
            .map(|&id| {
                self.clients[id as usize].contribute(
                    &co.spec,
                    co.theta(),
                    &co.schedule,
                    plan,
                    co.secure.as_ref(),
                    co.seed,
                )
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Example;
    use crate::privacy::Mechanism;

    fn update(id: u32, params: &[f64], n: u64) -> ClientUpdate {
        ClientUpdate {
            client_id: id,
            round: 1,
            params: ParamVector::new(params.to_vec()).unwrap(),
            sample_count: n,
            loss_before: 1.0,
            loss_after: 0.5,
            receipt: NoiseReceipt::none(0.0),
            flagged: false,
        }
    }

    fn client(id: u32, n: usize, budget: PrivacyBudget) -> ClientState {
        let examples = (0..n).map(|i| Example::new(vec![i as f64], i % 2)).collect();
        ClientState {
            client_id: id,
            domain: "d".into(),
            data: Dataset::new(examples, 1, 2).unwrap(),
            budget,
            weight_override: None,
        }
    }

    fn entry(id: u32, n: u64, budget: PrivacyBudget) -> RosterEntry {
        RosterEntry { client_id: id, domain: "d".into(), sample_count: n, budget }
    }

    fn eps(e: f64) -> PrivacyBudget {
        PrivacyBudget { epsilon: e, delta: 1e-5, clip_norm: 1.0, enabled: true }
    }

    #[test]
    fn size_weighted_example() {
        let g = ParamVector::zeros(2);
        let ups = [update(0, &[2.0, 0.0], 1), update(1, &[0.0, 2.0], 3)];
        let out = aggregate(&ups, &AggregationPolicy::size_weighted(), &g).unwrap();
        assert_eq!(out.as_slice(), &[0.5, 1.5]);
    }

    #[test]
    fn identical_deltas_move_by_that_delta() {
        let g = ParamVector::new(vec![1.0, -1.0]).unwrap();
        let ups: Vec<_> = (0..3).map(|i| update(i, &[1.25, -0.5], 1 + i as u64)).collect();
        let custom = AggregationPolicy::custom([(0, 1.0), (1, 2.0), (2, 5.0)].into());
        for policy in [AggregationPolicy::uniform(), AggregationPolicy::size_weighted(), custom] {
            let out = aggregate(&ups, &policy, &g).unwrap();
            assert!((out[0] - 1.25).abs() < 1e-15 && (out[1] + 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn flagged_updates_are_excluded() {
        let g = ParamVector::zeros(1);
        let mut bad = update(0, &[0.0], 10);
        bad.flagged = true;
        bad.params = g.clone();
        let ups = [bad.clone(), update(1, &[4.0], 10)];
        assert_eq!(aggregate(&ups, &AggregationPolicy::uniform(), &g).unwrap()[0], 4.0);
        assert!(matches!(
            aggregate(&[bad], &AggregationPolicy::uniform(), &g),
            Err(FederationError::AllFlagged(1))
        ));
    }

    #[test]
    fn zero_custom_weights_rejected() {
        let g = ParamVector::zeros(1);
        let ups = [update(0, &[1.0], 1)];
        let p = AggregationPolicy::custom([(0, 0.0)].into());
        assert!(matches!(aggregate(&ups, &p, &g), Err(FederationError::ZeroTotalWeight)));
        let p = AggregationPolicy::custom(BTreeMap::new());
        assert!(matches!(aggregate(&ups, &p, &g), Err(FederationError::MissingWeight(0))));
    }

    #[test]
    fn privacy_weights_mixed_case() {
        let mut disabled = eps(1.0);
        disabled.enabled = false;
        let clients = [entry(0, 100, eps(1.0)), entry(1, 100, eps(8.0)), entry(2, 100, disabled)];
        let w = derive_privacy_weights(&clients, DEFAULT_EPSILON_CAP);
        assert!((w[&0] - 0.0588).abs() < 1e-4);
        assert!((w[&1] - 0.4706).abs() < 1e-4);
        assert!((w[&2] - 0.4706).abs() < 1e-4);
    }

    #[test]
    fn privacy_weights_equal_budgets_reduce_to_size() {
        let clients = [entry(0, 30, eps(2.0)), entry(1, 90, eps(2.0))];
        let w = derive_privacy_weights(&clients, DEFAULT_EPSILON_CAP);
        assert!((w[&0] - 0.25).abs() < 1e-15 && (w[&1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn privacy_weight_vanishes_with_epsilon() {
        let clients = [entry(0, 100, eps(1e-9)), entry(1, 100, eps(8.0))];
        let w = derive_privacy_weights(&clients, DEFAULT_EPSILON_CAP);
        assert!(w[&0] < 1e-9);
    }

    #[test]
    fn zero_learning_rate_gives_zero_delta() {
        let spec = ModelSpec::new(1, 2, 0.0).unwrap();
        let schedule = TrainingSchedule { learning_rate: 0.0, ..TrainingSchedule::default() };
        let mut b = eps(1.0);
        b.enabled = false;
        let c = client(0, 10, b);
        let global = ParamVector::new(vec![0.1, -0.3, 2.0, 0.7]).unwrap();
        let u = c.local_train(&spec, &global, &schedule, 1, 0.0, 7).unwrap();
        assert_eq!(u.params, global);
        assert_eq!(u.receipt.mechanism, Mechanism::None);

        let c = client(0, 10, eps(1.0));
        let u = c.local_train(&spec, &global, &schedule, 1, 0.0, 7).unwrap();
        assert_ne!(u.params, global);
        assert_eq!(u.receipt.mechanism, Mechanism::Gaussian);
    }

    #[test]
    fn divergence_is_flagged() {
        let spec = ModelSpec::new(1, 2, 0.0).unwrap();
        let schedule = TrainingSchedule::default();
        let examples = vec![Example::new(vec![1e300], 0), Example::new(vec![-1e300], 1)];
        let c = ClientState {
            client_id: 0,
            domain: "d".into(),
            data: Dataset::new(examples, 1, 2).unwrap(),
            budget: PrivacyBudget::disabled(),
            weight_override: None,
        };
        let u = c.local_train(&spec, &ParamVector::zeros(4), &schedule, 1, 1e10, 7).unwrap();
        assert!(u.flagged);
        assert_eq!(u.params, ParamVector::zeros(4));
    }

    #[test]
    fn participant_sampling() {
        assert_eq!(select_participants(1, 5, 1.0, 3), vec![0, 1, 2, 3, 4]);
        let a = select_participants(1, 10, 0.35, 3);
        assert_eq!(a.len(), 4);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(a, select_participants(1, 10, 0.35, 3));
        assert_eq!(select_participants(1, 10, 0.01, 3).len(), 1);
    }

    #[test]
    fn schedule_validation() {
        assert!(TrainingSchedule::default().validate().is_ok());
        let bad = TrainingSchedule { lr_decay: 0.0, ..TrainingSchedule::default() };
        assert!(bad.validate().is_err());
        let bad = TrainingSchedule { participation_fraction: 1.5, ..TrainingSchedule::default() };
        assert!(bad.validate().is_err());
        let s = TrainingSchedule { learning_rate: 0.5, lr_decay: 0.5, ..TrainingSchedule::default() };
        assert_eq!(s.learning_rate_at(1), 0.5);
        assert_eq!(s.learning_rate_at(3), 0.125);
    }

    #[test]
    fn minibatch_covers_every_example_each_epoch() {
        // With learning rate 0, the iterate never moves but every batch must be well-formed.
        let spec = ModelSpec::new(1, 2, 0.0).unwrap();
        let c = client(0, 7, PrivacyBudget::disabled());
        let out = gradient_descent(&spec, &[0.0; 4], &c.data, 0.0, 3, Some(3), 1).unwrap();
        assert_eq!(out, vec![0.0; 4]);
        let a = gradient_descent(&spec, &[0.0; 4], &c.data, 0.1, 3, Some(3), 1).unwrap();
        let b = gradient_descent(&spec, &[0.0; 4], &c.data, 0.1, 3, Some(3), 2).unwrap();
        assert_ne!(a, b);
    }
}
