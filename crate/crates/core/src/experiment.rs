//! Builds and runs one scenario end to end: topology, allocation,
//! corruption, homogeneous initialisation, the round loop and evaluation.

use std::fs;
use std::io::BufWriter;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::corruption::{
    corrupt_assignment, CorruptionError, CorruptionOverlay, CorruptionSpec, DataView,
};
use crate::dataset::{
    build_assignment, ceil_fraction, split_validation, AllocationScheme, DatasetError,
    FederatedAssignment, LabeledDataset, NodeData,
};
use crate::metrics::{clean_neighbor_flags, evaluate, ConfusionMatrix, RoundRecord};
use crate::neuralnet::{init_params, write_checkpoint, NnError, ParamSet};
use crate::protocol::{
    centralized_train_with, dfl_round, fl_round, map_nodes, Federation, ProtocolError, RoundState,
};
use crate::rng::{derive, Stream};
use crate::scenario::{Paradigm, Scenario};
use crate::topology::{
    centrality_ranking, generate_ba, generate_star, CentralityRanking, Graph, TopologyError,
};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Corruption(#[from] CorruptionError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("evaluation failed: {0}")]
    Evaluation(#[source] NnError),
    #[error("writing checkpoint {path}: {source}")]
    Checkpoint {
        path: PathBuf,
        #[source]
        source: NnError,
    },
    #[error("record sink: {0}")]
    Sink(String),
}

/// Everything a run derives from its seeds before training starts.
#[derive(Debug, Clone)]
pub struct Setup {
    /// DFL graph, FL star (hub last), or a single isolated node.
    pub graph: Graph,
    pub assignment: FederatedAssignment,
    pub overlay: CorruptionOverlay,
}

impl Setup {
    /// Ids of the nodes whose metrics are reported (FL excludes its hub).
    pub fn reported_nodes(&self, paradigm: Paradigm) -> std::ops::Range<usize> {
        match paradigm {
            Paradigm::Fl => 0..self.graph.node_count() - 1,
            _ => 0..self.graph.node_count(),
        }
    }
}

fn corruption_spec(s: &Scenario) -> CorruptionSpec {
    CorruptionSpec {
        target_class: s.target_class,
        collateral_class: s.collateral_class,
        alpha: s.alpha,
        fraction: s.effective_p(),
        mode: s.mode,
    }
}

/// Centralized allocation: one node holding everything, with `ceil(p * n_target)`
/// random target-class samples flagged.
fn centralized_assignment(
    ds: &LabeledDataset,
    target_class: u8,
    p: f64,
    seed: u64,
) -> Result<FederatedAssignment, DatasetError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(DatasetError::Parameter(format!(
            "fraction {p} outside [0, 1]"
        )));
    }
    let mut targets = ds.indices_of(target_class);
    targets.shuffle(&mut derive(seed, Stream::Allocation, &[]));
    let k = ceil_fraction(p, targets.len());
    let node = NodeData {
        train: (0..ds.len()).collect(),
        val: Vec::new(),
        corrupt: targets[..k].iter().copied().collect(),
    };
    Ok(FederatedAssignment {
        nodes: vec![node],
        target_class,
        scheme: AllocationScheme::Balanced,
    })
}

/// Topology, allocation with validation split, and corruption overlay.
pub fn prepare(s: &Scenario, train: &LabeledDataset) -> Result<Setup, ExperimentError> {
    let run = s.replicate.run;
    let p = s.effective_p();
    let (graph, assignment) = match s.paradigm {
        Paradigm::Dfl => {
            let graph = generate_ba(
                s.n_nodes,
                1,
                &mut derive(s.replicate.graph, Stream::Graph, &[]),
            )?;
            let ranking = centrality_ranking(&graph);
            let a = build_assignment(
                train,
                &ranking,
                s.scheme.allocation(),
                s.target_class,
                p,
                &mut derive(run, Stream::Allocation, &[]),
            )?;
            (graph, a)
        }
        Paradigm::Fl => {
            let graph = generate_star(s.n_nodes + 1)?;
            // every client has degree one, so centrality order is id order
            let ranking = CentralityRanking::from_order((0..s.n_nodes).collect())?;
            let mut a = build_assignment(
                train,
                &ranking,
                s.scheme.allocation(),
                s.target_class,
                p,
                &mut derive(run, Stream::Allocation, &[]),
            )?;
            a.nodes.push(NodeData::default());
            (graph, a)
        }
        Paradigm::Centralized => (
            Graph::empty(1),
            centralized_assignment(train, s.target_class, p, run)?,
        ),
    };
    let assignment = split_validation(
        train,
        &assignment,
        s.train.val_fraction,
        &mut derive(run, Stream::Validation, &[]),
    )?;
    assignment.validate(train)?;
    let overlay = corrupt_assignment(
        train,
        &assignment,
        &corruption_spec(s),
        &mut derive(run, Stream::Corruption, &[]),
    )?;
    Ok(Setup {
        graph,
        assignment,
        overlay,
    })
}

fn write_checkpoints(
    s: &Scenario,
    round: usize,
    models: &[(String, &ParamSet)],
) -> Result<(), ExperimentError> {
    let Some(plan) = &s.checkpoints else {
        return Ok(());
    };
    if plan.every == 0 || round == 0 || !round.is_multiple_of(plan.every) {
        return Ok(());
    }
    for (label, p) in models {
        let path = plan.dir.join(format!(
            "seed{}_round{round:05}_{label}.ckpt",
            s.replicate.run
        ));
        let file = fs::File::create(&path).map_err(|e| ExperimentError::Checkpoint {
            path: path.clone(),
            source: e.into(),
        })?;
        write_checkpoint(p, BufWriter::new(file))
            .map_err(|source| ExperimentError::Checkpoint { path, source })?;
    }
    Ok(())
}

/// Runs `s` and feeds every evaluation record to `sink` in (round, node) order.
///
/// `train` must already be subsampled; `test` is the shared evaluation set.
pub fn run_experiment<F>(
    s: &Scenario,
    train: &LabeledDataset,
    test: &LabeledDataset,
    mut sink: F,
) -> Result<Setup, ExperimentError>
where
    F: FnMut(RoundRecord) -> Result<(), String>,
{
    let setup = prepare(s, train)?;
    let init = init_params(&s.arch, &mut derive(s.replicate.run, Stream::Init, &[]))
        .map_err(ExperimentError::Evaluation)?;
    let view = DataView::new(train, Some(&setup.overlay));
    let test_view = DataView::pristine(test);
    let nodes = &setup.assignment.nodes;
    let holds: Vec<bool> = nodes.iter().map(NodeData::holds_corrupt).collect();
    let clean = (s.paradigm == Paradigm::Dfl)
        .then(|| clean_neighbor_flags(&setup.graph, &setup.assignment));
    let seed = s.replicate.run;

    let mut emit = |round: usize, cms: &[ConfusionMatrix]| -> Result<(), ExperimentError> {
        for (node, cm) in cms.iter().enumerate() {
            let mut r = RoundRecord::from_confusion(seed, round, node, cm);
            r.holds_corrupt = holds[node];
            r.has_clean_neighbor = clean.as_ref().map(|c| c[node]);
            sink(r).map_err(ExperimentError::Sink)?;
        }
        Ok(())
    };

    match s.paradigm {
        Paradigm::Centralized => {
            let data = Federation { view, nodes }.local(0);
            centralized_train_with(&init, &data, &s.train, seed, s.rounds, |epoch, best| {
                if s.is_eval_round(epoch) {
                    emit(
                        epoch,
                        &[evaluate(best, &test_view).map_err(ExperimentError::Evaluation)?],
                    )?;
                }
                write_checkpoints(s, epoch, &[("central".into(), best)])
            })?;
        }
        Paradigm::Dfl | Paradigm::Fl => {
            let fed = Federation { view, nodes };
            let reported = setup.reported_nodes(s.paradigm).len();
            let mut state = RoundState::homogeneous(&init, setup.graph.node_count(), nodes);
            let evaluate_state =
                |state: &RoundState| -> Result<Vec<ConfusionMatrix>, ExperimentError> {
                    if s.paradigm == Paradigm::Fl {
                        // every client holds the global model
                        let cm = evaluate(&state.current[0], &test_view)
                            .map_err(ExperimentError::Evaluation)?;
                        return Ok(vec![cm; reported]);
                    }
                    map_nodes(reported, s.execution, |i| {
                        evaluate(&state.current[i], &test_view)
                    })
                    .into_iter()
                    .collect::<Result<_, _>>()
                    .map_err(ExperimentError::Evaluation)
                };
            emit(0, &evaluate_state(&state)?)?;
            for round in 1..=s.rounds {
                state = match s.paradigm {
                    Paradigm::Dfl => {
                        dfl_round(&state, &setup.graph, &fed, &s.train, seed, s.execution)?
                    }
                    _ => fl_round(&state, &setup.graph, &fed, &s.train, seed, s.execution)?,
                };
                if s.is_eval_round(round) {
                    emit(round, &evaluate_state(&state)?)?;
                }
                let labelled: Vec<(String, &ParamSet)> = match s.paradigm {
                    Paradigm::Fl => vec![("global".into(), &state.current[0])],
                    _ => state
                        .current
                        .iter()
                        .enumerate()
                        .map(|(i, p)| (format!("node{i:03}"), p))
                        .collect(),
                };
                write_checkpoints(s, round, &labelled)?;
            }
        }
    }
    Ok(setup)
}
