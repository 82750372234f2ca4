//! Round-synchronous FedAvg with a quantized uplink.
//!
//! Each round the server broadcasts `X_m`, every selected client runs `τ`
//! local SGD steps and uploads `Q(X_{m,τ}^i − X_m)` as an encoded frame, and
//! the server applies `X_{m+1} = X_m + Σ p_i · Q(ΔX_m^i)`.
//!
//! All randomness is drawn from streams keyed by `(seed, round, client,
//! purpose)`, so client tasks may run in any order or in parallel.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{self, DatasetShard, ModelSpec, NumericsError, ParamVector, SgdConfig};
use crate::policy::{full_precision_bits, BitPolicy, PolicyConfig, PolicyError, Precision};
use crate::quantizer::{self, compute_range, CodecError, QuantizeError, QuantizedPayload};
use crate::rng::{Purpose, RandomStream, SERVER};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FederationError {
    #[error("invalid federation config: {0}")]
    Config(String),
    #[error("dataset has {have} examples, need at least {need}")]
    DatasetTooSmall { have: usize, need: usize },
    #[error("client {client} diverged in round {round}: {what}")]
    Diverged { client: usize, round: usize, what: String },
    #[error("global model diverged in round {round}")]
    GlobalDiverged { round: usize },
    #[error("client weights sum to {0}, expected 1")]
    WeightSum(f64),
    #[error("update of length {actual} does not match model dimension {expected}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Quantize(#[from] QuantizeError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(from = "PartitionRepr", into = "PartitionRepr")]
pub enum Partition {
    #[default]
    Iid,
    /// Sort by label, cut into `n · shards_per_client` contiguous shards and
    /// deal `shards_per_client` random shards to each client.
    LabelSkew { shards_per_client: usize },
}

// Unit variants of internally tagged enums ignore `deny_unknown_fields`.
#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
enum PartitionRepr {
    Iid {},
    LabelSkew { shards_per_client: usize },
}

impl From<PartitionRepr> for Partition {
    fn from(r: PartitionRepr) -> Self {
        match r {
            PartitionRepr::Iid {} => Partition::Iid,
            PartitionRepr::LabelSkew { shards_per_client } => Partition::LabelSkew { shards_per_client },
        }
    }
}

impl From<Partition> for PartitionRepr {
    fn from(p: Partition) -> Self {
        match p {
            Partition::Iid => PartitionRepr::Iid {},
            Partition::LabelSkew { shards_per_client } => PartitionRepr::LabelSkew { shards_per_client },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Execution {
    #[default]
    Sequential,
    Parallel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederationConfig {
    pub n_clients: usize,
    pub r_selected: usize,
    pub rounds: usize,
    pub sgd: SgdConfig,
    pub seed: u64,
    pub partition: Partition,
    pub execution: Execution,
    /// Record `∇f(X̄_{m,t})` and global losses each round. Diagnostic only;
    /// never feeds back into training.
    pub verification: bool,
}

impl FederationConfig {
    pub fn validate(&self) -> Result<(), FederationError> {
        let bad = |m: String| Err(FederationError::Config(m));
        if self.n_clients == 0 {
            return bad("n_clients must be positive".into());
        }
        if self.r_selected == 0 || self.r_selected > self.n_clients {
            return bad(format!("r_selected must be in [1, {}], got {}", self.n_clients, self.r_selected));
        }
        if self.rounds == 0 {
            return bad("rounds must be positive".into());
        }
        if let Partition::LabelSkew { shards_per_client: 0 } = self.partition {
            return bad("shards_per_client must be positive".into());
        }
        self.sgd.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub id: usize,
    pub shard: DatasetShard,
    /// Share of this client's data among all clients.
    pub weight: f64,
}

/// Split `dataset` into disjoint client shards covering every row.
pub fn partition(dataset: &DatasetShard, cfg: &FederationConfig) -> Result<Vec<ClientState>, FederationError> {
    let n = cfg.n_clients;
    if n == 0 {
        return Err(FederationError::Config("n_clients must be positive".into()));
    }
    let total = dataset.len();
    let mut rng = RandomStream::keyed(cfg.seed, 0, SERVER, Purpose::Partition);
    let groups: Vec<Vec<usize>> = match cfg.partition {
        Partition::Iid => {
            if total < n {
                return Err(FederationError::DatasetTooSmall { have: total, need: n });
            }
            let mut order: Vec<usize> = (0..total).collect();
            rng.shuffle(&mut order);
            split_even(&order, n)
        }
        Partition::LabelSkew { shards_per_client } => {
            let k = n * shards_per_client;
            if shards_per_client == 0 {
                return Err(FederationError::Config("shards_per_client must be positive".into()));
            }
            if total < k {
                return Err(FederationError::DatasetTooSmall { have: total, need: k });
            }
            let mut order: Vec<usize> = (0..total).collect();
            let labels = dataset.labels();
            order.sort_by(|&a, &b| labels[a].total_cmp(&labels[b]).then(a.cmp(&b)));
            let shards = split_even(&order, k);
            let mut deal: Vec<usize> = (0..k).collect();
            rng.shuffle(&mut deal);
            deal.chunks(shards_per_client)
                .map(|ids| ids.iter().flat_map(|&s| shards[s].iter().copied()).collect())
                .collect()
        }
    };
    Ok(groups
        .into_iter()
        .enumerate()
        .map(|(id, rows)| ClientState {
            id,
            weight: rows.len() as f64 / total as f64,
            shard: dataset.select(&rows),
        })
        .collect())
}

fn split_even(order: &[usize], parts: usize) -> Vec<Vec<usize>> {
    let base = order.len() / parts;
    let extra = order.len() % parts;
    let mut out = Vec::with_capacity(parts);
    let mut at = 0;
    for p in 0..parts {
        let len = base + usize::from(p < extra);
        out.push(order[at..at + len].to_vec());
        at += len;
    }
    out
}

/// Normalised weights `p_i = |D_i| / Σ_selected |D_j|`.
pub fn selection_weights(clients: &[&ClientState]) -> Vec<f64> {
    let total: usize = clients.iter().map(|c| c.shard.len()).sum();
    clients.iter().map(|c| c.shard.len() as f64 / total as f64).collect()
}

/// Result of one client's local training.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalOutcome {
    pub delta: ParamVector,
    pub loss_before: f64,
    pub loss_after: f64,
    /// `X_{m,t}` for `t = 0..τ`, when requested.
    pub iterates: Option<Vec<ParamVector>>,
}

/// `τ` SGD steps from `global`; returns `X_{m,τ} − X_m` and the local losses.
pub fn local_round(
    model: &ModelSpec,
    client: &ClientState,
    global: &ParamVector,
    sgd: &SgdConfig,
    round: usize,
    rng: &mut RandomStream,
    keep_iterates: bool,
) -> Result<LocalOutcome, FederationError> {
    let diverged = |what: String| FederationError::Diverged {
        client: client.id,
        round,
        what,
    };
    let wrap = |e: NumericsError| match e {
        NumericsError::NonFinite(w) => diverged(w.to_string()),
        other => FederationError::Numerics(other),
    };
    let loss_before = numerics::loss(model, global, &client.shard).map_err(wrap)?;
    let mut x = global.clone();
    let mut iterates = keep_iterates.then(|| Vec::with_capacity(sgd.tau));
    for _ in 0..sgd.tau {
        if let Some(it) = iterates.as_mut() {
            it.push(x.clone());
        }
        let g = numerics::gradient(model, &x, &client.shard, sgd.batch_size, rng).map_err(wrap)?;
        x = numerics::sgd_step(&x, &g, sgd.eta)?;
        if !x.is_finite() {
            return Err(diverged("parameters".into()));
        }
    }
    let loss_after = numerics::loss(model, &x, &client.shard).map_err(wrap)?;
    let delta = x.sub(global)?;
    if !delta.is_finite() {
        return Err(diverged("update".into()));
    }
    Ok(LocalOutcome {
        delta,
        loss_before,
        loss_after,
        iterates,
    })
}

/// What the server receives from one client.
#[derive(Debug, Clone, PartialEq)]
pub enum Update {
    Quantized(QuantizedPayload),
    Raw(ParamVector),
}

impl Update {
    fn len(&self) -> usize {
        match self {
            Update::Quantized(p) => p.count as usize,
            Update::Raw(v) => v.len(),
        }
    }
}

/// `X_{m+1} = X_m + Σ p_i · update_i`.
pub fn aggregate(global: &ParamVector, updates: &[(f64, Update)]) -> Result<ParamVector, FederationError> {
    let wsum: f64 = updates.iter().map(|(p, _)| p).sum();
    if !((wsum - 1.0).abs() <= 1e-9) {
        return Err(FederationError::WeightSum(wsum));
    }
    let mut next = global.clone();
    for (p, u) in updates {
        if u.len() != global.len() {
            return Err(FederationError::LengthMismatch {
                expected: global.len(),
                actual: u.len(),
            });
        }
        match u {
            Update::Quantized(q) => next.axpy(*p, &quantizer::dequantize(q)?)?,
            Update::Raw(v) => next.axpy(*p, v)?,
        }
    }
    Ok(next)
}

/// Per-client line of a [`RoundReport`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClientRoundStats {
    pub client_id: usize,
    pub weight: f64,
    pub range: f64,
    /// Index bits actually sent (0 for a constant update); 64 for full precision.
    pub bits: u8,
    /// Quantization level `2^bits − 1`; `None` for full precision.
    pub levels: Option<u64>,
    pub paper_bits: u64,
    pub wire_bits: u64,
    pub loss_before: f64,
    pub loss_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundReport {
    pub round: usize,
    pub selected: Vec<usize>,
    pub clients: Vec<ClientRoundStats>,
    /// `Σ p_i` times each client's loss after local training.
    pub avg_train_loss: f64,
    pub eval_loss: f64,
    pub eval_accuracy: Option<f64>,
    pub paper_bits_round: u64,
    pub wire_bits_round: u64,
    pub cumulative_paper_bits: u64,
    pub cumulative_wire_bits: u64,
    /// `‖X_{m+1} − X_m‖²`.
    pub update_norm_sq: f64,
    /// Verification mode: `(1/τ) Σ_t ‖∇f(X̄_{m,t})‖²` with the exact global gradient.
    pub grad_norm_sq: Option<f64>,
    /// Verification mode: `f(X_m)` on the whole training set.
    pub global_loss_before: Option<f64>,
    /// Verification mode: `f(X_{m+1})` on the whole training set.
    pub global_loss_after: Option<f64>,
}

impl RoundReport {
    pub fn bits(&self) -> impl Iterator<Item = u8> + '_ {
        self.clients.iter().map(|c| c.bits)
    }

    pub fn avg_bits(&self) -> f64 {
        self.bits().map(f64::from).sum::<f64>() / self.clients.len() as f64
    }

    pub fn mean_range(&self) -> f64 {
        self.clients.iter().map(|c| c.range).sum::<f64>() / self.clients.len() as f64
    }
}

/// Completed run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub reports: Vec<RoundReport>,
    pub final_params: ParamVector,
}

/// A run stopped early; carries the rounds that did complete.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("run aborted after {} complete rounds: {error}", partial.len())]
pub struct RunAborted {
    pub partial: Vec<RoundReport>,
    pub error: FederationError,
}

/// Starting model for a run: the model's seeded initialisation.
pub fn initial_params(model: &ModelSpec, fed: &FederationConfig) -> ParamVector {
    model.init_params(fed.seed)
}

struct Transmission {
    frame: Option<Vec<u8>>,
    raw: Option<ParamVector>,
    bits: u8,
    levels: Option<u64>,
    paper_bits: u64,
    wire_bits: u64,
}

fn transmit(
    delta: &ParamVector,
    precision: Precision,
    seed: u64,
    round: usize,
    client: usize,
) -> Result<Transmission, FederationError> {
    let d = delta.len() as u64;
    match precision {
        Precision::Full => Ok(Transmission {
            frame: None,
            raw: Some(delta.clone()),
            bits: 64,
            levels: None,
            paper_bits: full_precision_bits(d),
            wire_bits: full_precision_bits(d),
        }),
        Precision::Bits(n) => {
            let mut rng = RandomStream::keyed(seed, round as u64, client as u64, Purpose::Quantize);
            let payload = quantizer::quantize(delta, n, &mut rng)?;
            let frame = quantizer::encode(&payload)?;
            let sent = payload.bit_width;
            Ok(Transmission {
                wire_bits: 8 * frame.len() as u64,
                paper_bits: payload.paper_bits(),
                frame: Some(frame),
                raw: None,
                bits: sent,
                levels: Some(payload.levels() as u64),
            })
        }
    }
}

fn map_indexed<T, F>(exec: Execution, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match exec {
        Execution::Sequential => (0..n).map(f).collect(),
        Execution::Parallel => (0..n).into_par_iter().map(f).collect(),
    }
}

/// Run `fed.rounds` rounds of quantized FedAvg from the model's initial point.
pub fn run_experiment(
    model: &ModelSpec,
    train: &DatasetShard,
    fed: &FederationConfig,
    policy: &PolicyConfig,
    eval_set: &DatasetShard,
) -> Result<RunOutput, RunAborted> {
    let abort = |partial: Vec<RoundReport>, error: FederationError| RunAborted { partial, error };
    let setup = (|| {
        fed.validate()?;
        model.validate()?;
        let clients = partition(train, fed)?;
        let policy = BitPolicy::new(policy.clone())?;
        Ok::<_, FederationError>((clients, policy))
    })();
    let (clients, mut policy) = setup.map_err(|e| abort(Vec::new(), e))?;
    let mut global = initial_params(model, fed);
    let mut reports: Vec<RoundReport> = Vec::with_capacity(fed.rounds);
    let (mut cum_paper, mut cum_wire) = (0u64, 0u64);
    let mut prev_train_loss: Option<f64> = None;

    for m in 0..fed.rounds {
        let selected: Vec<usize> = if fed.r_selected < fed.n_clients {
            let mut rng = RandomStream::keyed(fed.seed, m as u64, SERVER, Purpose::Select);
            let mut s = rng.sample_indices(fed.n_clients, fed.r_selected);
            s.sort_unstable();
            s
        } else {
            (0..fed.n_clients).collect()
        };
        let chosen: Vec<&ClientState> = selected.iter().map(|&i| &clients[i]).collect();
        let weights = selection_weights(&chosen);

        let round = (|| {
            let outcomes: Vec<LocalOutcome> = map_indexed(fed.execution, chosen.len(), |k| {
                let c = chosen[k];
                let mut rng = RandomStream::keyed(fed.seed, m as u64, c.id as u64, Purpose::Batch);
                local_round(model, c, &global, &fed.sgd, m, &mut rng, fed.verification)
            })
            .into_iter()
            .collect::<Result<_, _>>()?;

            let ranges: Vec<(usize, f64)> = chosen
                .iter()
                .zip(&outcomes)
                .map(|(c, o)| Ok((c.id, compute_range(&o.delta)?.range)))
                .collect::<Result<_, FederationError>>()?;
            let policy_loss = prev_train_loss.unwrap_or_else(|| weights.iter().zip(&outcomes).map(|(p, o)| p * o.loss_before).sum());
            let decisions = policy.decide_round(m, &ranges, policy_loss)?;

            let sent: Vec<Transmission> = map_indexed(fed.execution, chosen.len(), |k| {
                transmit(&outcomes[k].delta, decisions[k].precision, fed.seed, m, chosen[k].id)
            })
            .into_iter()
            .collect::<Result<_, _>>()?;

            // server side: decode every frame before aggregation
            let updates: Vec<(f64, Update)> = sent
                .iter()
                .zip(&weights)
                .map(|(t, &p)| {
                    let u = match (&t.frame, &t.raw) {
                        (Some(frame), _) => Update::Quantized(quantizer::decode(frame)?),
                        (None, Some(raw)) => Update::Raw(raw.clone()),
                        (None, None) => unreachable!("transmission carries a frame or raw update"),
                    };
                    Ok((p, u))
                })
                .collect::<Result<_, FederationError>>()?;
            let next = aggregate(&global, &updates)?;
            if !next.is_finite() {
                return Err(FederationError::GlobalDiverged { round: m });
            }

            let (grad_norm_sq, global_loss_before, global_loss_after) = if fed.verification {
                let tau = fed.sgd.tau;
                let mut acc = 0.0;
                for t in 0..tau {
                    let mut mean = ParamVector::zeros(global.len());
                    for o in &outcomes {
                        mean.axpy(1.0, &o.iterates.as_ref().expect("iterates kept in verification mode")[t])?;
                    }
                    mean.scale(1.0 / outcomes.len() as f64);
                    acc += numerics::full_gradient(model, &mean, train)?.norm_sq();
                }
                (
                    Some(acc / tau as f64),
                    Some(numerics::loss(model, &global, train)?),
                    Some(numerics::loss(model, &next, train)?),
                )
            } else {
                (None, None, None)
            };

            let eval_loss = numerics::loss(model, &next, eval_set)?;
            let eval_accuracy = numerics::accuracy(model, &next, eval_set)?;
            let avg_train_loss: f64 = weights.iter().zip(&outcomes).map(|(p, o)| p * o.loss_after).sum();
            let stats: Vec<ClientRoundStats> = chosen
                .iter()
                .zip(&outcomes)
                .zip(&sent)
                .zip(&weights)
                .zip(&ranges)
                .map(|((((c, o), t), &w), &(_, range))| ClientRoundStats {
                    client_id: c.id,
                    weight: w,
                    range,
                    bits: t.bits,
                    levels: t.levels,
                    paper_bits: t.paper_bits,
                    wire_bits: t.wire_bits,
                    loss_before: o.loss_before,
                    loss_after: o.loss_after,
                })
                .collect();
            let paper_round: u64 = stats.iter().map(|s| s.paper_bits).sum();
            let wire_round: u64 = stats.iter().map(|s| s.wire_bits).sum();
            let update_norm_sq = next.sub(&global)?.norm_sq();
            Ok((
                next,
                RoundReport {
                    round: m,
                    selected: selected.clone(),
                    clients: stats,
                    avg_train_loss,
                    eval_loss,
                    eval_accuracy,
                    paper_bits_round: paper_round,
                    wire_bits_round: wire_round,
                    cumulative_paper_bits: cum_paper + paper_round,
                    cumulative_wire_bits: cum_wire + wire_round,
                    update_norm_sq,
                    grad_norm_sq,
                    global_loss_before,
                    global_loss_after,
                },
            ))
        })();

        match round {
            Ok((next, report)) => {
                global = next;
                cum_paper = report.cumulative_paper_bits;
                cum_wire = report.cumulative_wire_bits;
                prev_train_loss = Some(report.avg_train_loss);
                reports.push(report);
            }
            Err(e) => return Err(abort(reports, e)),
        }
    }
    Ok(RunOutput {
        reports,
        final_params: global,
    })
}
