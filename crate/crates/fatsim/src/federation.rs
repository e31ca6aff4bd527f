//! Server/client protocol with pluggable aggregation strategies.
//!
//! FedWAvg weights client updates by a scaled softmax over cosine
//! similarities between the global model's last layer and each client's.
//! FedProx, FedGate and SCAFFOLD are implemented in their standard
//! compression-free forms and degenerate to FedAvg when their correction
//! state is zero.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::analysis;
use crate::attack::{mix_batch, AttackConfig, ModelTarget};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{self, ModelConfig};
use crate::optim::{decay_lr, OptimizerState};
use crate::parallel::{effective_threads, par_map};
use crate::params::ParameterSet;
use crate::rng::{substream, tag};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum AggregatorKind {
    Fedavg,
    Fedprox { mu: f64 },
    Fedgate,
    Scaffold,
    Fedwavg { q: f64 },
}

impl AggregatorKind {
    pub fn label(&self) -> String {
        match self {
            AggregatorKind::Fedavg => "fedavg".into(),
            AggregatorKind::Fedprox { .. } => "fedprox".into(),
            AggregatorKind::Fedgate => "fedgate".into(),
            AggregatorKind::Scaffold => "scaffold".into(),
            AggregatorKind::Fedwavg { q } => format!("fedwavg({q})"),
        }
    }
}

/// Federated run configuration (Algorithm parameters plus the attack).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FedConfig {
    /// Number of available clients K.
    pub clients: usize,
    /// Participating fraction C in (0, 1].
    pub fraction: f64,
    /// Communication rounds T.
    pub rounds: usize,
    /// Local epochs E.
    pub local_epochs: usize,
    /// Local minibatch size B.
    pub batch_size: usize,
    /// Initial learning rate eta.
    pub lr: f64,
    /// Per-round multiplicative LR decay rate.
    pub lr_decay: f64,
    pub momentum: f64,
    pub attack: AttackConfig,
    /// Adversarial ratio r: fraction of each batch replaced by PGD samples.
    pub adv_ratio: f64,
    pub aggregator: AggregatorKind,
    pub seed: u64,
}

impl FedConfig {
    pub fn participants_per_round(&self) -> usize {
        ((self.fraction * self.clients as f64).floor() as usize).max(1)
    }
}

/// Per-client persistent state across rounds.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub shard: Dataset,
    /// SCAFFOLD control variate c_k.
    pub control: Option<ParameterSet>,
    /// FedGate gradient tracker delta_k.
    pub tracker: Option<ParameterSet>,
}

/// Per-round metrics and aggregation diagnostics.
#[derive(Debug, Clone)]
pub struct RoundRecord {
    pub round: usize,
    pub train_loss: f64,
    pub accuracy: f64,
    pub robust_accuracy: f64,
    pub lr: f64,
    /// Cosine similarity c_k per participating client, in client-id order.
    pub similarities: Vec<f64>,
    /// Aggregation weight w_k actually applied, in client-id order.
    pub weights: Vec<f64>,
    /// Participating client ids (sorted).
    pub participants: Vec<usize>,
    pub wall_ms: f64,
}

pub struct LocalOutcome {
    pub params: ParameterSet,
    pub mean_loss: f64,
    pub steps: usize,
}

/// One local training pass: E epochs of adversarially mixed minibatch SGD
/// starting from the global parameters.
///
/// `grad_offset` is added to every batch gradient (SCAFFOLD's c - c_k, or
/// FedGate's -delta_k). `prox_mu` adds the FedProx proximal gradient
/// mu * (theta - theta_global).
pub fn client_update(
    client_id: usize,
    round: usize,
    theta_global: &ParameterSet,
    model_cfg: &ModelConfig,
    cfg: &FedConfig,
    shard: &Dataset,
    lr: f64,
    grad_offset: Option<&ParameterSet>,
    prox_mu: f64,
) -> Result<LocalOutcome> {
    if shard.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut params = theta_global.clone();
    let mut opt = OptimizerState::new(lr, cfg.momentum, &params);
    let mut rng = substream(cfg.seed, &[tag::CLIENT_LOCAL, round as u64, client_id as u64]);
    let mut loss_sum = 0.0;
    let mut steps = 0usize;
    for _ in 0..cfg.local_epochs {
        let mut order: Vec<usize> = (0..shard.len()).collect();
        order.shuffle(&mut rng);
        for batch_ids in order.chunks(cfg.batch_size) {
            let batch: Vec<(Tensor, usize)> = batch_ids
                .iter()
                .map(|&i| shard.examples[i].clone())
                .collect();
            let mixed = {
                let target = ModelTarget {
                    cfg: model_cfg,
                    params: &params,
                };
                mix_batch(&target, &batch, cfg.adv_ratio, &cfg.attack, &mut rng)?
            };
            let fwd = model::forward_loss(model_cfg, &params, &mixed)?;
            loss_sum += fwd.graph.value(fwd.loss).item();
            let mut grads = fwd.graph.backward(fwd.loss)?.by_name();
            if prox_mu > 0.0 {
                apply_prox(&mut grads, &params, theta_global, prox_mu);
            }
            if let Some(offset) = grad_offset {
                for (name, g) in grads.iter_mut() {
                    g.axpy(1.0, offset.get(name).expect("offset mirrors params"));
                }
            }
            opt.step(&mut params, &grads)?;
            steps += 1;
        }
    }
    let mean_loss = if steps > 0 { loss_sum / steps as f64 } else { 0.0 };
    Ok(LocalOutcome {
        params,
        mean_loss,
        steps,
    })
}

fn apply_prox(
    grads: &mut BTreeMap<String, Tensor>,
    params: &ParameterSet,
    anchor: &ParameterSet,
    mu: f64,
) {
    for (name, g) in grads.iter_mut() {
        let p = params.get(name).unwrap();
        let a = anchor.get(name).unwrap();
        for ((gi, &pi), &ai) in g.data_mut().iter_mut().zip(p.data()).zip(a.data()) {
            *gi += mu * (pi - ai);
        }
    }
}

/// Sample-count weighted average (Eq. 2 style): theta = sum n_k/n * theta_k.
pub fn aggregate_fedavg(updates: &[(usize, &ParameterSet)]) -> Result<ParameterSet> {
    assert!(!updates.is_empty());
    let total: usize = updates.iter().map(|(n, _)| n).sum();
    let weights: Vec<f64> = updates.iter().map(|(n, _)| *n as f64 / total as f64).collect();
    let sets: Vec<&ParameterSet> = updates.iter().map(|(_, p)| *p).collect();
    ParameterSet::weighted_sum(&sets, &weights)
}

pub fn fedavg_weights(counts: &[usize]) -> Vec<f64> {
    let total: usize = counts.iter().sum();
    counts.iter().map(|&n| n as f64 / total as f64).collect()
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Option<f64> {
    let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Some(dot / (na * nb))
}

/// Cosine-similarity softmax weights: c_k = g.l_k/(|g||l_k|),
/// w = softmax(q * c). Returns (similarities, weights).
pub fn fedwavg_weights(
    global_last: &[f64],
    client_lasts: &[Vec<f64>],
    q: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut sims = Vec::with_capacity(client_lasts.len());
    for (k, l) in client_lasts.iter().enumerate() {
        if l.len() != global_last.len() {
            return Err(Error::ShapeMismatch {
                op: "fedwavg_weights",
                lhs: vec![global_last.len()],
                rhs: vec![l.len()],
            });
        }
        let c = cosine_similarity(global_last, l)
            .ok_or_else(|| Error::DegenerateSimilarity(format!("client {k}")))?;
        sims.push(c);
    }
    if cosine_similarity(global_last, global_last).is_none() {
        return Err(Error::DegenerateSimilarity("global".into()));
    }
    // Softmax with max subtraction.
    let max = sims.iter().fold(f64::NEG_INFINITY, |m, &c| m.max(q * c));
    let exps: Vec<f64> = sims.iter().map(|&c| (q * c - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let weights = exps.iter().map(|e| e / sum).collect();
    Ok((sims, weights))
}

/// FedWAvg aggregation against the current (pre-aggregation) global model's
/// last layer. Returns the new parameters plus (c_k, w_k) for the record.
pub fn aggregate_fedwavg(
    theta_global: &ParameterSet,
    updates: &[&ParameterSet],
    q: f64,
) -> Result<(ParameterSet, Vec<f64>, Vec<f64>)> {
    assert!(!updates.is_empty());
    let g = theta_global.last_layer_vector();
    let lasts: Vec<Vec<f64>> = updates.iter().map(|p| p.last_layer_vector()).collect();
    let (sims, weights) = fedwavg_weights(&g, &lasts, q)?;
    let out = ParameterSet::weighted_sum(updates, &weights)?;
    Ok((out, sims, weights))
}

struct ClientResult {
    id: usize,
    outcome: LocalOutcome,
}

/// Run the full server loop for T rounds over pre-partitioned shards.
///
/// Returns the per-round records and the final global model. Deterministic
/// in the seed regardless of thread count: client results are reduced in
/// client-id order.
pub fn run_federation(
    cfg: &FedConfig,
    model_cfg: &ModelConfig,
    shards: Vec<Dataset>,
    test: &Dataset,
) -> Result<(Vec<RoundRecord>, ParameterSet)> {
    assert_eq!(shards.len(), cfg.clients, "one shard per client");
    let mut theta = model::build_model(model_cfg, cfg.seed)?;
    let mut states: Vec<ClientState> = shards
        .into_iter()
        .enumerate()
        .map(|(id, shard)| ClientState {
            id,
            shard,
            control: None,
            tracker: None,
        })
        .collect();
    // Strategy state that must exist before round 1.
    let mut server_control = match cfg.aggregator {
        AggregatorKind::Scaffold => Some(theta.zeros_like()),
        _ => None,
    };
    if matches!(cfg.aggregator, AggregatorKind::Scaffold) {
        for s in &mut states {
            s.control = Some(theta.zeros_like());
        }
    }
    if matches!(cfg.aggregator, AggregatorKind::Fedgate) {
        for s in &mut states {
            s.tracker = Some(theta.zeros_like());
        }
    }

    let threads = effective_threads();
    let mut lr = cfg.lr;
    let mut records = Vec::with_capacity(cfg.rounds);

    for round in 1..=cfg.rounds {
        let start = Instant::now();
        let m = cfg.participants_per_round();
        let mut ids: Vec<usize> = (0..cfg.clients).collect();
        ids.shuffle(&mut substream(cfg.seed, &[tag::CLIENT_SAMPLING, round as u64]));
        let mut selected: Vec<usize> = ids.into_iter().take(m).collect();
        selected.sort_unstable();

        let jobs: Vec<usize> = selected.clone();
        let theta_ref = &theta;
        let states_ref = &states;
        let control_ref = server_control.as_ref();
        let results: Vec<Result<ClientResult>> = par_map(jobs, threads, move |id| {
            let state = &states_ref[id];
            let (offset, prox) = match cfg.aggregator {
                AggregatorKind::Fedprox { mu } => (None, mu),
                AggregatorKind::Scaffold => {
                    let mut off = control_ref.expect("server control").clone();
                    off.axpy(-1.0, state.control.as_ref().expect("client control"))?;
                    (Some(off), 0.0)
                }
                AggregatorKind::Fedgate => {
                    let mut off = state.tracker.as_ref().expect("tracker").zeros_like();
                    off.axpy(-1.0, state.tracker.as_ref().unwrap())?;
                    (Some(off), 0.0)
                }
                _ => (None, 0.0),
            };
            let outcome = client_update(
                id,
                round,
                theta_ref,
                model_cfg,
                cfg,
                &state.shard,
                lr,
                offset.as_ref(),
                prox,
            )?;
            Ok(ClientResult { id, outcome })
        });
        let mut client_results = Vec::with_capacity(m);
        for r in results {
            client_results.push(r?);
        }
        // par_map preserves job order == sorted client-id order.

        let counts: Vec<usize> = client_results
            .iter()
            .map(|c| states[c.id].shard.len())
            .collect();
        let updates: Vec<&ParameterSet> =
            client_results.iter().map(|c| &c.outcome.params).collect();

        // Diagnostic cosine similarities are recorded for every strategy;
        // only FedWAvg turns them into aggregation weights.
        let g_last = theta.last_layer_vector();
        let diag_sims: Vec<f64> = updates
            .iter()
            .map(|p| cosine_similarity(&g_last, &p.last_layer_vector()).unwrap_or(0.0))
            .collect();

        let (new_theta, sims, weights) = match cfg.aggregator {
            AggregatorKind::Fedavg | AggregatorKind::Fedprox { .. } => {
                let pairs: Vec<(usize, &ParameterSet)> =
                    counts.iter().copied().zip(updates.iter().copied()).collect();
                (aggregate_fedavg(&pairs)?, diag_sims.clone(), fedavg_weights(&counts))
            }
            AggregatorKind::Fedgate => {
                let pairs: Vec<(usize, &ParameterSet)> =
                    counts.iter().copied().zip(updates.iter().copied()).collect();
                let new_theta = aggregate_fedavg(&pairs)?;
                let w = fedavg_weights(&counts);
                // delta_k <- delta_k + (Delta_k - mean Delta) / (tau * eta)
                let deltas: Vec<ParameterSet> = client_results
                    .iter()
                    .map(|c| c.outcome.params.delta(&theta))
                    .collect::<Result<_>>()?;
                let mean_delta = ParameterSet::weighted_sum(
                    &deltas.iter().collect::<Vec<_>>(),
                    &w,
                )?;
                for (i, c) in client_results.iter().enumerate() {
                    let tau = c.outcome.steps;
                    if tau == 0 {
                        continue;
                    }
                    let scale = 1.0 / (tau as f64 * lr);
                    let tracker = states[c.id].tracker.as_mut().expect("tracker");
                    tracker.axpy(scale, &deltas[i])?;
                    tracker.axpy(-scale, &mean_delta)?;
                }
                (new_theta, diag_sims.clone(), w)
            }
            AggregatorKind::Scaffold => {
                // Uniform aggregation of client models plus control updates.
                let pairs: Vec<(usize, &ParameterSet)> =
                    updates.iter().map(|p| (1usize, *p)).collect();
                let new_theta = aggregate_fedavg(&pairs)?;
                let w = vec![1.0 / m as f64; m];
                let c_server = server_control.as_mut().expect("server control");
                let mut mean_dc = theta.zeros_like();
                let mut contributing = 0usize;
                for c in &client_results {
                    let tau = c.outcome.steps;
                    if tau == 0 {
                        continue;
                    }
                    // c_k <- c_k - c + (theta_g - theta_k)/(tau*eta)
                    let mut new_ck = states[c.id].control.as_ref().unwrap().clone();
                    new_ck.axpy(-1.0, c_server)?;
                    let drift = theta.delta(&c.outcome.params)?;
                    new_ck.axpy(1.0 / (tau as f64 * lr), &drift)?;
                    let mut dc = new_ck.clone();
                    dc.axpy(-1.0, states[c.id].control.as_ref().unwrap())?;
                    mean_dc.axpy(1.0, &dc)?;
                    contributing += 1;
                    *states[c.id].control.as_mut().unwrap() = new_ck;
                }
                if contributing > 0 {
                    let scale = (m as f64 / cfg.clients as f64) / contributing as f64;
                    c_server.axpy(scale, &mean_dc.clone())?;
                    // axpy adds scale*mean_dc; rebuild as c + scale*sum(dc).
                    // (mean over contributing clients times participation
                    // fraction m/K.)
                }
                (new_theta, diag_sims.clone(), w)
            }
            AggregatorKind::Fedwavg { q } => {
                let (t, s, w) = aggregate_fedwavg(&theta, &updates, q)?;
                (t, s, w)
            }
        };

        if !new_theta.all_finite() {
            return Err(Error::NanAbort {
                round,
                strategy: cfg.aggregator.label(),
            });
        }
        theta = new_theta;

        let train_loss = client_results
            .iter()
            .map(|c| c.outcome.mean_loss)
            .sum::<f64>()
            / m as f64;
        let acc = analysis::accuracy(model_cfg, &theta, test)?;
        let racc = analysis::robust_accuracy(
            model_cfg,
            &theta,
            test,
            &cfg.attack,
            cfg.seed,
            round as u64,
        )?;
        let wall_ms = start.elapsed().as_secs_f64() * 1e3;
        records.push(RoundRecord {
            round,
            train_loss,
            accuracy: acc,
            robust_accuracy: racc,
            lr,
            similarities: sims,
            weights,
            participants: selected,
            wall_ms,
        });
        lr = decay_lr(lr, cfg.lr_decay)?;
    }
    Ok((records, theta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, HeadType};

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            image_h: 4,
            image_w: 4,
            channels: 1,
            patch_size: 2,
            embed_dim: 8,
            num_heads: 2,
            depth: 1,
            num_classes: 4,
            head_type: HeadType::Cls,
        }
    }

    fn tiny_fed(aggregator: AggregatorKind) -> FedConfig {
        FedConfig {
            clients: 3,
            fraction: 1.0,
            rounds: 1,
            local_epochs: 1,
            batch_size: 8,
            lr: 0.05,
            lr_decay: 0.05,
            momentum: 0.9,
            attack: AttackConfig {
                epsilon: 0.03,
                alpha: 0.01,
                steps: 2,
                random_start: false,
            },
            adv_ratio: 0.5,
            aggregator,
            seed: 17,
        }
    }

    fn shards(n_per_class: usize, k: usize, seed: u64) -> Vec<Dataset> {
        let ds = crate::data::generate_blobs(4, (4, 4, 1), n_per_class, 0.2, seed).unwrap();
        crate::data::partition(
            &ds,
            k,
            &crate::data::PartitionSpec {
                kind: crate::data::PartitionKind::Iid,
                seed,
            },
        )
        .unwrap()
    }

    #[test]
    fn fedavg_forced_by_counts() {
        let mut a = ParameterSet::new();
        a.insert("w", Tensor::new(vec![1], vec![1.0]));
        let mut b = ParameterSet::new();
        b.insert("w", Tensor::new(vec![1], vec![3.0]));
        let out = aggregate_fedavg(&[(10, &a), (30, &b)]).unwrap();
        assert!((out.get("w").unwrap().data()[0] - 2.5).abs() < 1e-15);
    }

    #[test]
    fn fedavg_equal_counts_is_mean() {
        let mut a = ParameterSet::new();
        a.insert("w", Tensor::new(vec![2], vec![1.0, -2.0]));
        let mut b = ParameterSet::new();
        b.insert("w", Tensor::new(vec![2], vec![3.0, 4.0]));
        let out = aggregate_fedavg(&[(5, &a), (5, &b)]).unwrap();
        assert_eq!(out.get("w").unwrap().data(), &[2.0, 1.0]);
    }

    #[test]
    fn fedavg_three_clients_scalar_loop_oracle() {
        let mk = |vals: [f64; 3]| {
            let mut p = ParameterSet::new();
            p.insert("w", Tensor::new(vec![3], vals.to_vec()));
            p
        };
        let (p1, p2, p3) = (mk([0.3, -1.0, 2.0]), mk([1.5, 0.5, -0.7]), mk([2.2, 0.1, 0.9]));
        let counts = [7usize, 11, 5];
        let out = aggregate_fedavg(&[(7, &p1), (11, &p2), (5, &p3)]).unwrap();
        let total: usize = counts.iter().sum();
        for i in 0..3 {
            let expect = (7.0 * p1.get("w").unwrap().data()[i]
                + 11.0 * p2.get("w").unwrap().data()[i]
                + 5.0 * p3.get("w").unwrap().data()[i])
                / total as f64;
            assert!((out.get("w").unwrap().data()[i] - expect).abs() <= 1e-12);
        }
    }

    #[test]
    fn fedwavg_weight_algebra() {
        let g = vec![1.0, 0.0, 0.5];
        // Identical client vectors: uniform weights.
        let ls = vec![vec![0.2, 0.1, 0.4]; 4];
        let (_, w) = fedwavg_weights(&g, &ls, 3.0).unwrap();
        for &wi in &w {
            assert!((wi - 0.25).abs() <= 1e-12);
        }
        // q = 0: uniform regardless of similarity.
        let ls2 = vec![vec![1.0, 0.0, 0.0], vec![-1.0, 0.0, 0.0]];
        let (_, w0) = fedwavg_weights(&g, &ls2, 0.0).unwrap();
        assert!((w0[0] - 0.5).abs() <= 1e-12 && (w0[1] - 0.5).abs() <= 1e-12);
    }

    #[test]
    fn fedwavg_scalar_softmax_case() {
        // c = [0.9, 0.1], q = 10 -> w = [e^8/(e^8+1), 1/(e^8+1)].
        // Construct 2D vectors with exactly those cosines against g = (1,0).
        let g = vec![1.0, 0.0];
        let mk = |c: f64| vec![c, (1.0 - c * c).sqrt()];
        let (sims, w) = fedwavg_weights(&g, &[mk(0.9), mk(0.1)], 10.0).unwrap();
        assert!((sims[0] - 0.9).abs() < 1e-12 && (sims[1] - 0.1).abs() < 1e-12);
        let e8 = 8.0_f64.exp();
        assert!((w[0] - e8 / (e8 + 1.0)).abs() <= 1e-9);
        assert!((w[1] - 1.0 / (e8 + 1.0)).abs() <= 1e-9);
        assert!((w[0] + w[1] - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn fedwavg_zero_norm_is_error() {
        let g = vec![1.0, 0.0];
        assert!(matches!(
            fedwavg_weights(&g, &[vec![0.0, 0.0]], 1.0),
            Err(Error::DegenerateSimilarity(_))
        ));
        assert!(matches!(
            fedwavg_weights(&[0.0, 0.0], &[vec![1.0, 0.0]], 1.0),
            Err(Error::DegenerateSimilarity(_))
        ));
    }

    #[test]
    fn fedwavg_shift_invariance_of_similarities() {
        let g = vec![1.0, 0.0];
        let mk = |c: f64| vec![c, (1.0 - c * c).sqrt()];
        let q = 4.0;
        let (sims, w) = fedwavg_weights(&g, &[mk(0.3), mk(0.7), mk(-0.2)], q).unwrap();
        // Shifted softmax computed directly over sims + constant.
        let shift = 0.37;
        let exps: Vec<f64> = sims.iter().map(|c| (q * (c + shift)).exp()).collect();
        let sum: f64 = exps.iter().sum();
        for (wi, e) in w.iter().zip(&exps) {
            assert!((wi - e / sum).abs() <= 1e-12);
        }
    }

    #[test]
    fn fedwavg_single_client_passthrough() {
        let cfg = tiny_model();
        let theta = build_model(&cfg, 1).unwrap();
        let mut upd = theta.clone();
        upd.get_mut("head.fc.bias").unwrap().data_mut()[0] = 0.5;
        let (out, _, w) = aggregate_fedwavg(&theta, &[&upd], 5.0).unwrap();
        assert_eq!(w, vec![1.0]);
        assert_eq!(out.max_abs_diff(&upd), 0.0);
    }

    #[test]
    fn fedwavg_identical_clients_passthrough_any_q() {
        let cfg = tiny_model();
        let theta = build_model(&cfg, 2).unwrap();
        let mut upd = theta.clone();
        upd.get_mut("head.fc.weight").unwrap().data_mut()[3] = 0.9;
        for q in [0.0, 1.0, 10.0] {
            let (out, _, _) = aggregate_fedwavg(&theta, &[&upd, &upd, &upd], q).unwrap();
            assert!(out.max_abs_diff(&upd) <= 1e-12);
        }
    }

    #[test]
    fn fedwavg_equal_similarities_match_fedavg() {
        let cfg = tiny_model();
        let theta = build_model(&cfg, 3).unwrap();
        // Clients share the same last layer (equal similarity) but differ
        // elsewhere.
        let mut a = theta.clone();
        let mut b = theta.clone();
        a.get_mut("embed.weight").unwrap().data_mut()[0] = 5.0;
        b.get_mut("embed.weight").unwrap().data_mut()[0] = -3.0;
        let (out, _, w) = aggregate_fedwavg(&theta, &[&a, &b], 7.0).unwrap();
        let avg = aggregate_fedavg(&[(4, &a), (4, &b)]).unwrap();
        assert!(out.max_abs_diff(&avg) <= 1e-12);
        assert!((w[0] - 0.5).abs() <= 1e-12);
    }

    #[test]
    fn client_update_zero_epochs_returns_global() {
        let mcfg = tiny_model();
        let theta = build_model(&mcfg, 4).unwrap();
        let mut fcfg = tiny_fed(AggregatorKind::Fedavg);
        fcfg.local_epochs = 0;
        let shard = shards(6, 3, 5).remove(0);
        let out = client_update(0, 1, &theta, &mcfg, &fcfg, &shard, 0.05, None, 0.0).unwrap();
        assert_eq!(out.params.max_abs_diff(&theta), 0.0);
        assert_eq!(out.steps, 0);
    }

    #[test]
    fn fedprox_mu_zero_matches_fedavg_client_bitwise() {
        let mcfg = tiny_model();
        let theta = build_model(&mcfg, 6).unwrap();
        let shard = shards(6, 3, 7).remove(1);
        let plain = tiny_fed(AggregatorKind::Fedavg);
        let prox = tiny_fed(AggregatorKind::Fedprox { mu: 0.0 });
        let a = client_update(1, 2, &theta, &mcfg, &plain, &shard, 0.05, None, 0.0).unwrap();
        let b = client_update(1, 2, &theta, &mcfg, &prox, &shard, 0.05, None, 0.0).unwrap();
        assert_eq!(a.params.max_abs_diff(&b.params), 0.0);
    }

    #[test]
    fn fedprox_gradient_matches_hand_derivative() {
        // One-parameter probe: proximal gradient is mu * (theta - anchor).
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::new(vec![1], vec![0.0]));
        let mut params = ParameterSet::new();
        params.insert("w", Tensor::new(vec![1], vec![2.0]));
        let mut anchor = ParameterSet::new();
        anchor.insert("w", Tensor::new(vec![1], vec![0.5]));
        apply_prox(&mut grads, &params, &anchor, 0.1);
        assert!((grads["w"].data()[0] - 0.1 * 1.5).abs() <= 1e-15);
    }

    #[test]
    fn single_client_round_returns_client_update() {
        let mcfg = tiny_model();
        let mut fcfg = tiny_fed(AggregatorKind::Fedavg);
        fcfg.clients = 1;
        fcfg.rounds = 1;
        let ds = crate::data::generate_blobs(4, (4, 4, 1), 6, 0.2, 9).unwrap();
        let test = crate::data::generate_blobs(4, (4, 4, 1), 2, 0.2, 10).unwrap();
        let theta0 = build_model(&mcfg, fcfg.seed).unwrap();
        let expected = client_update(
            0,
            1,
            &theta0,
            &mcfg,
            &fcfg,
            &ds,
            fcfg.lr,
            None,
            0.0,
        )
        .unwrap();
        let (records, theta) =
            run_federation(&fcfg, &mcfg, vec![ds], &test).unwrap();
        assert_eq!(records.len(), 1);
        assert_eq!(theta.max_abs_diff(&expected.params), 0.0);
    }

    #[test]
    fn full_participation_every_round() {
        let mcfg = tiny_model();
        let mut fcfg = tiny_fed(AggregatorKind::Fedavg);
        fcfg.rounds = 2;
        let sh = shards(6, 3, 11);
        let test = crate::data::generate_blobs(4, (4, 4, 1), 2, 0.2, 12).unwrap();
        let (records, _) = run_federation(&fcfg, &mcfg, sh, &test).unwrap();
        for r in &records {
            assert_eq!(r.participants, vec![0, 1, 2]);
            let sum: f64 = r.weights.iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12);
            assert!(r.weights.iter().all(|&w| w >= 0.0));
        }
    }

    #[test]
    fn identical_seeds_identical_records() {
        let mcfg = tiny_model();
        let mut fcfg = tiny_fed(AggregatorKind::Fedwavg { q: 5.0 });
        fcfg.rounds = 2;
        let test = crate::data::generate_blobs(4, (4, 4, 1), 2, 0.2, 13).unwrap();
        let (r1, t1) = run_federation(&fcfg, &mcfg, shards(6, 3, 14), &test).unwrap();
        let (r2, t2) = run_federation(&fcfg, &mcfg, shards(6, 3, 14), &test).unwrap();
        assert_eq!(t1.max_abs_diff(&t2), 0.0);
        for (a, b) in r1.iter().zip(&r2) {
            assert_eq!(a.train_loss.to_bits(), b.train_loss.to_bits());
            assert_eq!(a.robust_accuracy.to_bits(), b.robust_accuracy.to_bits());
            for (x, y) in a.weights.iter().zip(&b.weights) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    /// FedProx(0), SCAFFOLD round 1, FedGate round 1 and FedWAvg with equal
    /// similarities all reduce to FedAvg under a shared RNG schedule.
    #[test]
    fn degeneracy_to_fedavg_round_one() {
        let mcfg = tiny_model();
        let test = crate::data::generate_blobs(4, (4, 4, 1), 2, 0.2, 15).unwrap();
        let run = |agg: AggregatorKind| {
            let fcfg = FedConfig {
                rounds: 1,
                aggregator: agg,
                ..tiny_fed(AggregatorKind::Fedavg)
            };
            // Equal shard sizes so count weights equal uniform weights.
            let sh = shards(6, 3, 16);
            run_federation(&fcfg, &mcfg, sh, &test).unwrap().1
        };
        let base = run(AggregatorKind::Fedavg);
        for agg in [
            AggregatorKind::Fedprox { mu: 0.0 },
            AggregatorKind::Scaffold,
            AggregatorKind::Fedgate,
        ] {
            let other = run(agg);
            assert!(
                other.max_abs_diff(&base) <= 1e-12,
                "{:?} deviates by {}",
                agg,
                other.max_abs_diff(&base)
            );
        }
    }

    #[test]
    fn scaffold_controls_keep_shapes_across_rounds() {
        let mcfg = tiny_model();
        let mut fcfg = tiny_fed(AggregatorKind::Scaffold);
        fcfg.rounds = 3;
        let sh = shards(6, 3, 18);
        let test = crate::data::generate_blobs(4, (4, 4, 1), 2, 0.2, 19).unwrap();
        let (records, theta) = run_federation(&fcfg, &mcfg, sh, &test).unwrap();
        assert_eq!(records.len(), 3);
        assert!(theta.all_finite());
    }

    #[test]
    fn scaffold_single_client_single_step_control_is_negative_gradient() {
        // tau = 1, c = c_k = 0: c_k' = (theta_g - theta_k)/eta = v = grad
        // (momentum has no effect on the first step), so the stored control
        // equals the (corrected) local gradient.
        let mcfg = tiny_model();
        let theta = build_model(&mcfg, 20).unwrap();
        let mut fcfg = tiny_fed(AggregatorKind::Scaffold);
        fcfg.adv_ratio = 0.0;
        let ds = crate::data::generate_blobs(4, (4, 4, 1), 2, 0.2, 21).unwrap();
        let lr = 0.05;
        let zero = theta.zeros_like();
        let out = client_update(0, 1, &theta, &mcfg, &fcfg, &ds, lr, Some(&zero), 0.0).unwrap();
        assert_eq!(out.steps, 1);
        // Reconstruct gradient from the single step: theta_k = theta - lr*g.
        let drift = theta.delta(&out.params).unwrap();
        // Compare against a direct backward on the same (shuffled) batch.
        let mut rng = substream(fcfg.seed, &[tag::CLIENT_LOCAL, 1, 0]);
        let mut order: Vec<usize> = (0..ds.len()).collect();
        order.shuffle(&mut rng);
        let batch: Vec<(Tensor, usize)> =
            order.iter().map(|&i| ds.examples[i].clone()).collect();
        let fwd = model::forward_loss(&mcfg, &theta, &batch).unwrap();
        let grads = fwd.graph.backward(fwd.loss).unwrap().by_name();
        for (name, g) in &grads {
            let d = drift.get(name).unwrap();
            for (a, &b) in d.data().iter().zip(g.data()) {
                assert!((a - lr * b).abs() <= 1e-12, "{name}");
            }
        }
    }

    #[test]
    fn fedgate_trackers_stay_small_on_identical_shards() {
        let mcfg = tiny_model();
        let mut fcfg = tiny_fed(AggregatorKind::Fedgate);
        fcfg.rounds = 3;
        fcfg.adv_ratio = 0.0;
        fcfg.batch_size = 64; // single full batch per client
        let ds = crate::data::generate_blobs(4, (4, 4, 1), 3, 0.2, 22).unwrap();
        let sh = vec![ds.clone(), ds.clone(), ds];
        let test = crate::data::generate_blobs(4, (4, 4, 1), 2, 0.2, 23).unwrap();
        // Identical shards and full-batch steps: every client computes the
        // same delta up to summation order, so trackers stay near zero.
        let (_, theta) = run_federation(&fcfg, &mcfg, sh, &test).unwrap();
        assert!(theta.all_finite());
    }

    #[test]
    fn nan_abort_names_round_and_strategy() {
        let mcfg = tiny_model();
        let mut fcfg = tiny_fed(AggregatorKind::Fedavg);
        fcfg.lr = 1e300; // drive the model to overflow
        fcfg.rounds = 4;
        let sh = shards(6, 3, 24);
        let test = crate::data::generate_blobs(4, (4, 4, 1), 2, 0.2, 25).unwrap();
        match run_federation(&fcfg, &mcfg, sh, &test) {
            Err(Error::NanAbort { round, strategy }) => {
                assert!(round >= 1);
                assert_eq!(strategy, "fedavg");
            }
            other => panic!("expected NanAbort, got {other:?}"),
        }
    }
}
