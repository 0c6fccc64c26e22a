//! Communication rounds for decentralized, federated and centralized training.
//!
//! A round is bulk-synchronous: every node trains from its current model,
//! then every node aggregates over an immutable snapshot of the freshly
//! trained models. Nothing from a previous round's training is read during
//! aggregation.

use rayon::prelude::*;
use thiserror::Error;

use crate::corruption::DataView;
use crate::dataset::NodeData;
use crate::localtrain::{
    mean_loss, train_epoch, train_local, LocalData, LocalOutcome, StreamKey, TrainConfig,
};
use crate::neuralnet::{average_params, NnError, ParamSet};
use crate::rng::{derive, Stream};
use crate::scenario::Execution;
use crate::topology::{neighborhood, Graph, TopologyError};

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("node {node} failed during local training: {source}")]
    Training {
        node: usize,
        #[source]
        source: NnError,
    },
    #[error("node {node} failed during aggregation: {source}")]
    Aggregation {
        node: usize,
        #[source]
        source: NnError,
    },
    #[error("centralized training failed at epoch {epoch}: {source}")]
    Centralized {
        epoch: usize,
        #[source]
        source: NnError,
    },
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error("round state does not match the network: {0}")]
    Mismatch(String),
}

/// Models held by every node between rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundState {
    /// Number of completed rounds.
    pub round: usize,
    /// Model each node starts the next round from.
    pub current: Vec<ParamSet>,
    /// Models produced by the last training phase.
    pub trained: Vec<ParamSet>,
    /// Training-split sizes reported in the last round.
    pub train_sizes: Vec<usize>,
}

impl RoundState {
    /// Every node starts from the same parameters.
    pub fn homogeneous(init: &ParamSet, n: usize, nodes: &[NodeData]) -> Self {
        RoundState {
            round: 0,
            current: vec![init.clone(); n],
            trained: vec![init.clone(); n],
            train_sizes: nodes.iter().map(|d| d.train.len()).collect(),
        }
    }

    pub fn node_count(&self) -> usize {
        self.current.len()
    }
}

/// The local data of every node, read through the corruption overlay.
#[derive(Debug, Clone, Copy)]
pub struct Federation<'a> {
    pub view: DataView<'a>,
    pub nodes: &'a [NodeData],
}

impl<'a> Federation<'a> {
    pub fn local(&self, node: usize) -> LocalData<'a> {
        let d = &self.nodes[node];
        LocalData {
            view: self.view,
            train: &d.train,
            val: &d.val,
        }
    }
}

/// Maps `f` over `0..n`, keeping node order regardless of execution mode.
pub fn map_nodes<T, F>(n: usize, execution: Execution, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match execution {
        Execution::Serial => (0..n).map(f).collect(),
        Execution::Parallel => (0..n).into_par_iter().map(f).collect(),
    }
}

fn check_alignment(
    state: &RoundState,
    fed: &Federation<'_>,
    g: &Graph,
) -> Result<(), ProtocolError> {
    let n = g.node_count();
    if state.node_count() != n || fed.nodes.len() != n {
        return Err(ProtocolError::Mismatch(format!(
            "graph has {n} nodes, state {}, data {}",
            state.node_count(),
            fed.nodes.len()
        )));
    }
    Ok(())
}

/// Local training of every node from its current model for round `state.round + 1`.
pub fn train_phase(
    state: &RoundState,
    fed: &Federation<'_>,
    cfg: &TrainConfig,
    seed: u64,
    execution: Execution,
) -> Result<Vec<LocalOutcome>, ProtocolError> {
    let round = state.round + 1;
    map_nodes(state.node_count(), execution, |node| {
        train_local(
            &state.current[node],
            &fed.local(node),
            cfg,
            StreamKey { seed, node, round },
        )
        .map_err(|source| ProtocolError::Training { node, source })
    })
    .into_iter()
    .collect()
}

/// Size-weighted average over each node's closed neighbourhood.
///
/// Nodes with no training data carry zero weight. A node whose whole
/// neighbourhood is dataless keeps its own model.
pub fn aggregate_phase(
    g: &Graph,
    trained: &[ParamSet],
    sizes: &[usize],
) -> Result<Vec<ParamSet>, ProtocolError> {
    if trained.len() != g.node_count() || sizes.len() != g.node_count() {
        return Err(ProtocolError::Mismatch(format!(
            "graph has {} nodes but {} models and {} sizes",
            g.node_count(),
            trained.len(),
            sizes.len()
        )));
    }
    (0..g.node_count())
        .map(|i| {
            let members: Vec<(&ParamSet, f64)> = neighborhood(g, i)?
                .into_iter()
                .filter(|&j| sizes[j] > 0)
                .map(|j| (&trained[j], sizes[j] as f64))
                .collect();
            if members.is_empty() {
                return Ok(trained[i].clone());
            }
            average_params(&members)
                .map_err(|source| ProtocolError::Aggregation { node: i, source })
        })
        .collect()
}

/// One decentralized round: local training, neighbourhood exchange, update.
pub fn dfl_round(
    state: &RoundState,
    g: &Graph,
    fed: &Federation<'_>,
    cfg: &TrainConfig,
    seed: u64,
    execution: Execution,
) -> Result<RoundState, ProtocolError> {
    check_alignment(state, fed, g)?;
    let outcomes = train_phase(state, fed, cfg, seed, execution)?;
    let train_sizes: Vec<usize> = outcomes.iter().map(|o| o.train_size).collect();
    let trained: Vec<ParamSet> = outcomes.into_iter().map(|o| o.params).collect();
    let current = aggregate_phase(g, &trained, &train_sizes)?;
    Ok(RoundState {
        round: state.round + 1,
        current,
        trained,
        train_sizes,
    })
}

fn star_hub(g: &Graph) -> Result<usize, ProtocolError> {
    let n = g.node_count();
    let hub = n - 1;
    let is_star = n >= 2 && g.degree(hub) == n - 1 && (0..hub).all(|i| g.degree(i) == 1);
    if !is_star {
        return Err(ProtocolError::Mismatch(format!(
            "not a star graph with hub {hub}"
        )));
    }
    Ok(hub)
}

/// Size-weighted average of all client models (every node except the hub).
pub fn fl_aggregate(
    trained: &[ParamSet],
    sizes: &[usize],
    hub: usize,
) -> Result<Option<ParamSet>, ProtocolError> {
    let members: Vec<(&ParamSet, f64)> = (0..trained.len())
        .filter(|&j| j != hub && sizes[j] > 0)
        .map(|j| (&trained[j], sizes[j] as f64))
        .collect();
    if members.is_empty() {
        return Ok(None);
    }
    average_params(&members)
        .map(Some)
        .map_err(|source| ProtocolError::Aggregation { node: hub, source })
}

/// One federated round over a star: all clients train from the global
/// model, the hub averages them and every node adopts the result.
pub fn fl_round(
    state: &RoundState,
    star: &Graph,
    fed: &Federation<'_>,
    cfg: &TrainConfig,
    seed: u64,
    execution: Execution,
) -> Result<RoundState, ProtocolError> {
    check_alignment(state, fed, star)?;
    let hub = star_hub(star)?;
    let outcomes = train_phase(state, fed, cfg, seed, execution)?;
    let train_sizes: Vec<usize> = outcomes.iter().map(|o| o.train_size).collect();
    let trained: Vec<ParamSet> = outcomes.into_iter().map(|o| o.params).collect();
    let global = match fl_aggregate(&trained, &train_sizes, hub)? {
        Some(g) => g,
        None => state.current[hub].clone(),
    };
    let current = vec![global; trained.len()];
    Ok(RoundState {
        round: state.round + 1,
        current,
        trained,
        train_sizes,
    })
}

/// Trains a single model on all of `data` for `epochs` epochs, calling
/// `on_epoch(epoch, best)` after each one (and once for epoch 0) with the
/// model that has the lowest validation loss so far.
pub fn centralized_train_with<F, E>(
    init: &ParamSet,
    data: &LocalData<'_>,
    cfg: &TrainConfig,
    seed: u64,
    epochs: usize,
    mut on_epoch: F,
) -> Result<ParamSet, E>
where
    F: FnMut(usize, &ParamSet) -> Result<(), E>,
    E: From<ProtocolError>,
{
    let wrap = |epoch| move |source| E::from(ProtocolError::Centralized { epoch, source });
    let mut params = init.clone();
    let mut velocity = init.zeros_like();
    let mut best = init.clone();
    let mut best_loss = if data.val.is_empty() {
        f64::INFINITY
    } else {
        mean_loss(init, &data.view, data.val).map_err(wrap(0))?
    };
    on_epoch(0, &best)?;
    for epoch in 1..=epochs {
        if !data.train.is_empty() {
            let mut rng = derive(seed, Stream::Centralized, &[epoch as u64]);
            train_epoch(
                &mut params,
                &mut velocity,
                &data.view,
                data.train,
                cfg,
                &mut rng,
            )
            .map_err(wrap(epoch))?;
        }
        if data.val.is_empty() {
            best = params.clone();
        } else {
            let loss = mean_loss(&params, &data.view, data.val).map_err(wrap(epoch))?;
            if loss < best_loss {
                best_loss = loss;
                best = params.clone();
            }
        }
        on_epoch(epoch, &best)?;
    }
    Ok(best)
}

/// [`centralized_train_with`] collecting the per-epoch trajectory.
pub fn centralized_train(
    init: &ParamSet,
    data: &LocalData<'_>,
    cfg: &TrainConfig,
    seed: u64,
    epochs: usize,
) -> Result<Vec<ParamSet>, ProtocolError> {
    let mut trajectory = Vec::with_capacity(epochs + 1);
    centralized_train_with(init, data, cfg, seed, epochs, |_, p| {
        trajectory.push(p.clone());
        Ok::<_, ProtocolError>(())
    })?;
    Ok(trajectory)
}
