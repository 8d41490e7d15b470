//! The budgeted expansion controller: detection-seeded initialization,
//! importance-driven growth of the active set, the unrolled forward with its
//! tape, the matching backward, and hop-distance importance supervision.
//!
//! The all-nodes dense baseline lives in [`dense`]; the classification
//! pipeline and training loop in [`pipeline`].

mod dense;
mod pipeline;

pub use dense::{dense_backward, run_dense_ggnn, run_dense_with_tables, DenseRun, DenseTables};
pub use pipeline::{
    assemble_features, classify, load_dataset, save_dataset, train, train_step, ClassifyTape,
    Dataset, Example, ExampleTape, ModelKind, Pipeline, StepLosses, TrainLog, TrainSettings,
};

use std::collections::VecDeque;

use thiserror::Error;

use crate::kgraph::{GraphError, KnowledgeGraph, NodeId};
use crate::numeric::{NumericError, ParameterSet};
use crate::propagation::{
    node_importance, node_importance_backward, node_output, node_output_backward, propagate_step,
    propagate_step_backward, ActiveSubgraph, NodeStatus, PropagationParams, StepTape,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("data error: {0}")]
    Data(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Controller hyperparameters. Defaults: threshold 0.5, expand 5 per round,
/// 3 steps, hidden size 10, 5 output dims per node, discount 0.3.
#[derive(Debug, Clone)]
pub struct GsnnConfig {
    pub detection_threshold: f64,
    pub expand_per_step: usize,
    pub steps: usize,
    pub hidden_dim: usize,
    pub annot_dim: usize,
    pub out_dim: usize,
    pub importance_discount: f64,
    pub importance_weight: f64,
    pub importance_max_hops: usize,
    pub dropout_rate: f64,
    pub binarize_annotations: bool,
    /// Number of expansion rounds; `None` means one after every step but the
    /// last. Never exceeds `steps - 1`.
    pub expansion_rounds: Option<usize>,
}

impl Default for GsnnConfig {
    fn default() -> Self {
        GsnnConfig {
            detection_threshold: 0.5,
            expand_per_step: 5,
            steps: 3,
            hidden_dim: 10,
            annot_dim: 1,
            out_dim: 5,
            importance_discount: 0.3,
            importance_weight: 1.0,
            importance_max_hops: 5,
            dropout_rate: 0.5,
            binarize_annotations: false,
            expansion_rounds: None,
        }
    }
}

impl GsnnConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.importance_discount && self.importance_discount < 1.0) {
            return Err(ModelError::Data(format!(
                "importance_discount must be in (0, 1), got {}",
                self.importance_discount
            )));
        }
        if self.expand_per_step == 0 || self.steps == 0 {
            return Err(ModelError::Data(
                "expand_per_step and steps must be at least 1".into(),
            ));
        }
        if self.annot_dim == 0 || self.annot_dim > self.hidden_dim {
            return Err(ModelError::Data(format!(
                "annot_dim must be in 1..=hidden_dim, got {} vs {}",
                self.annot_dim, self.hidden_dim
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(ModelError::Data(format!(
                "dropout_rate must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    /// Effective number of expansion rounds for this schedule.
    pub fn rounds(&self) -> usize {
        self.expansion_rounds
            .unwrap_or(self.steps - 1)
            .min(self.steps - 1)
    }
}

/// Importance scores logged at one expansion round, over the nodes that were
/// active when the round ran (`order[..n_scored]`).
#[derive(Debug, Clone)]
pub struct RoundLog {
    pub n_scored: usize,
    pub scores: Vec<f64>,
    pub selected: Vec<NodeId>,
}

/// Complete forward tape of one controller run.
#[derive(Debug, Clone)]
pub struct GsnnTrace {
    pub order: Vec<NodeId>,
    pub initial_expanded: Vec<NodeId>,
    pub annotations: Vec<f64>,
    pub steps: Vec<StepTape>,
    pub rounds: Vec<RoundLog>,
}

/// Outputs plus the tape needed to run backward.
#[derive(Debug, Clone)]
pub struct GsnnRun {
    pub trace: GsnnTrace,
    /// `n_active * out_dim`, aligned with `trace.order`.
    pub outputs: Vec<f64>,
}

impl GsnnRun {
    pub fn n_active(&self) -> usize {
        self.trace.order.len()
    }

    /// The discrete choices this run made, replayable via
    /// [`ForwardHooks::forced`].
    pub fn expansion_trace(&self) -> ExpansionTrace {
        ExpansionTrace {
            initial: self.trace.initial_expanded.clone(),
            rounds: self.trace.rounds.iter().map(|r| r.selected.clone()).collect(),
        }
    }

    /// Output vector of a node, if it was active.
    pub fn output_of(&self, out_dim: usize, node: NodeId) -> Option<&[f64]> {
        let p = self.trace.order.iter().position(|&v| v == node)?;
        Some(&self.outputs[p * out_dim..(p + 1) * out_dim])
    }
}

/// Frozen discrete choices: the initially expanded nodes and the selection
/// of every round.
#[derive(Debug, Clone, Default)]
pub struct ExpansionTrace {
    pub initial: Vec<NodeId>,
    pub rounds: Vec<Vec<NodeId>>,
}

/// Additive perturbation of one hidden-state entry at a given state index
/// (0 = after initialization, `t` = entering step `t+1`, `steps` = final).
#[derive(Debug, Clone, Copy)]
pub struct StatePerturbation {
    pub state: usize,
    pub node: NodeId,
    pub dim: usize,
    pub delta: f64,
}

/// Test and analysis hooks: replay a fixed expansion trace and/or perturb
/// one hidden state mid-run.
#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardHooks<'a> {
    pub forced: Option<&'a ExpansionTrace>,
    pub perturb: Option<StatePerturbation>,
}

/// The detection-thresholded seed set as `(node, score)` pairs. Falls back
/// to the single best detection when nothing clears the threshold.
pub fn detected_nodes(
    graph: &KnowledgeGraph,
    detections: &[f64],
    threshold: f64,
) -> Result<Vec<(NodeId, f64)>> {
    let detectable = graph.detectable_nodes();
    if detections.len() != detectable.len() {
        return Err(ModelError::Data(format!(
            "expected {} detection scores, got {}",
            detectable.len(),
            detections.len()
        )));
    }
    if detectable.is_empty() {
        return Err(ModelError::Data(
            "graph declares no detectable concepts".into(),
        ));
    }
    let mut out: Vec<(NodeId, f64)> = detectable
        .iter()
        .zip(detections.iter())
        .filter(|(_, &s)| s >= threshold)
        .map(|(&v, &s)| (v, s))
        .collect();
    if out.is_empty() {
        // Degenerate case: nothing clears the threshold. Seed with the single
        // highest-scoring detection, ties to the lowest detector index.
        let (best, score) = detectable
            .iter()
            .zip(detections.iter())
            .max_by(|(_, a), (_, b)| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal))
            .map(|(&v, &s)| (v, s))
            .expect("non-empty detectable set");
        out.push((best, score));
    }
    Ok(out)
}

/// Seed the subgraph: detected nodes become active and expanded carrying
/// their score as annotation; their neighbors become active with zeros.
pub fn initialize_subgraph<'g>(
    graph: &'g KnowledgeGraph,
    detections: &[f64],
    cfg: &GsnnConfig,
    forced_initial: Option<&[NodeId]>,
) -> Result<ActiveSubgraph<'g>> {
    let seeds: Vec<(NodeId, f64)> = match forced_initial {
        Some(nodes) => {
            let detectable = graph.detectable_nodes();
            nodes
                .iter()
                .map(|&v| {
                    let score = detectable
                        .iter()
                        .position(|&d| d == v)
                        .map(|i| detections[i])
                        .ok_or_else(|| {
                            ModelError::Data(format!("forced seed {v} is not detectable"))
                        })?;
                    Ok((v, score))
                })
                .collect::<Result<_>>()?
        }
        None => detected_nodes(graph, detections, cfg.detection_threshold)?,
    };
    let mut sub = ActiveSubgraph::new(graph, cfg.hidden_dim, cfg.annot_dim);
    for &(v, score) in &seeds {
        let value = if cfg.binarize_annotations {
            f64::from(score >= cfg.detection_threshold)
        } else {
            score
        };
        let mut annot = vec![0.0; cfg.annot_dim];
        annot[0] = value;
        sub.activate_annotated(v, &annot)?;
    }
    for &(v, _) in &seeds {
        sub.expand(v);
    }
    Ok(sub)
}

/// Score every active node, expand the top `P` never-expanded ones (ties to
/// the lower node id), and activate their neighbors.
pub fn expansion_round(
    sub: &mut ActiveSubgraph,
    ps: &ParameterSet,
    prop: &PropagationParams,
    cfg: &GsnnConfig,
    forced: Option<&[NodeId]>,
) -> Result<RoundLog> {
    let n = sub.n_active();
    let mut scores = Vec::with_capacity(n);
    for p in 0..n {
        scores.push(node_importance(ps, prop, sub.hidden_of(p), sub.annot_of(p))?);
    }
    let selected: Vec<NodeId> = match forced {
        Some(nodes) => nodes.to_vec(),
        None => {
            let mut candidates: Vec<(usize, NodeId)> = sub
                .order()
                .iter()
                .enumerate()
                .filter(|&(_, &v)| sub.status(v) == NodeStatus::Active)
                .map(|(p, &v)| (p, v))
                .collect();
            candidates.sort_by(|&(pa, va), &(pb, vb)| {
                scores[pb]
                    .partial_cmp(&scores[pa])
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(va.cmp(&vb))
            });
            candidates
                .into_iter()
                .take(cfg.expand_per_step)
                .map(|(_, v)| v)
                .collect()
        }
    };
    for &v in &selected {
        sub.expand(v);
    }
    Ok(RoundLog {
        n_scored: n,
        scores,
        selected,
    })
}

/// The full unrolled forward: initialize, then per step propagate and (after
/// every step but the last) expand. Outputs cover every active node.
pub fn run_gsnn(
    graph: &KnowledgeGraph,
    detections: &[f64],
    ps: &ParameterSet,
    prop: &PropagationParams,
    cfg: &GsnnConfig,
) -> Result<GsnnRun> {
    run_gsnn_with_hooks(graph, detections, ps, prop, cfg, ForwardHooks::default())
}

fn apply_perturbation(
    sub: &mut ActiveSubgraph,
    hooks: &ForwardHooks,
    state: usize,
    hidden_dim: usize,
) -> Result<()> {
    if let Some(p) = hooks.perturb {
        if p.state == state {
            let pos = sub.position(p.node).ok_or_else(|| {
                ModelError::Data(format!("perturbed node {} inactive at state {state}", p.node))
            })?;
            sub.hidden_flat_mut()[pos * hidden_dim + p.dim] += p.delta;
        }
    }
    Ok(())
}

pub fn run_gsnn_with_hooks(
    graph: &KnowledgeGraph,
    detections: &[f64],
    ps: &ParameterSet,
    prop: &PropagationParams,
    cfg: &GsnnConfig,
    hooks: ForwardHooks,
) -> Result<GsnnRun> {
    cfg.validate()?;
    let mut sub = initialize_subgraph(
        graph,
        detections,
        cfg,
        hooks.forced.map(|t| t.initial.as_slice()),
    )?;
    let initial_expanded = sub.expanded().to_vec();
    apply_perturbation(&mut sub, &hooks, 0, cfg.hidden_dim)?;

    let n_rounds = cfg.rounds();
    let mut steps = Vec::with_capacity(cfg.steps);
    let mut rounds = Vec::with_capacity(n_rounds);
    for s in 0..cfg.steps {
        steps.push(propagate_step(&mut sub, ps, prop)?);
        if s < n_rounds {
            let forced_round = hooks.forced.map(|t| {
                t.rounds
                    .get(s)
                    .map(|r| r.as_slice())
                    .unwrap_or(&[])
            });
            rounds.push(expansion_round(&mut sub, ps, prop, cfg, forced_round)?);
        }
        apply_perturbation(&mut sub, &hooks, s + 1, cfg.hidden_dim)?;
    }

    let n = sub.n_active();
    let mut outputs = Vec::with_capacity(n * cfg.out_dim);
    for p in 0..n {
        let o = node_output(ps, prop, sub.hidden_of(p), sub.annot_of(p), sub.order()[p])?;
        outputs.extend_from_slice(&o);
    }
    Ok(GsnnRun {
        trace: GsnnTrace {
            order: sub.order().to_vec(),
            initial_expanded,
            annotations: sub.annot_flat().to_vec(),
            steps,
            rounds,
        },
        outputs,
    })
}

/// What a backward pass should additionally report.
#[derive(Debug, Clone, Copy, Default)]
pub struct BackwardOptions {
    pub want_state_grads: bool,
    pub want_detection_grads: bool,
}

/// Input-side gradients of one controller run.
#[derive(Debug, Clone, Default)]
pub struct GsnnBackward {
    /// Gradient w.r.t. the detection-score vector (annotation path only).
    pub d_detections: Vec<f64>,
    /// Per state 0..=steps: gradient w.r.t. the hidden states at that state,
    /// sized `n_active_at_state * hidden_dim`.
    pub d_states: Option<Vec<Vec<f64>>>,
}

/// Backward through a taped run. `d_outputs` aligns with `run.outputs`;
/// `d_scores`, when given, aligns with each round's logged scores. Parameter
/// gradients accumulate into `ps`; discrete expansion choices are constants.
#[allow(clippy::too_many_arguments)]
pub fn run_gsnn_backward(
    run: &GsnnRun,
    graph: &KnowledgeGraph,
    ps: &mut ParameterSet,
    prop: &PropagationParams,
    cfg: &GsnnConfig,
    d_outputs: &[f64],
    d_scores: Option<&[Vec<f64>]>,
    opts: BackwardOptions,
) -> Result<GsnnBackward> {
    let trace = &run.trace;
    let t_steps = trace.steps.len();
    let hd = prop.hidden_dim;
    let ad = prop.annot_dim;
    let od = prop.out_dim;
    let n_final = trace.order.len();
    if d_outputs.len() != n_final * od {
        return Err(ModelError::Data(format!(
            "d_outputs length {} does not match {} outputs",
            d_outputs.len(),
            n_final * od
        )));
    }

    let mut d_states: Vec<Vec<f64>> = vec![Vec::new(); t_steps + 1];
    let mut d_h = vec![0.0; n_final * hd];
    let mut d_x = vec![0.0; n_final * ad];

    // Output network reads the final hidden states.
    let final_tape = &trace.steps[t_steps - 1];
    for p in 0..n_final {
        let h = &final_tape.h_next[p * hd..(p + 1) * hd];
        let x = &trace.annotations[p * ad..(p + 1) * ad];
        let out = &run.outputs[p * od..(p + 1) * od];
        let d_out = &d_outputs[p * od..(p + 1) * od];
        node_output_backward(
            ps,
            prop,
            h,
            x,
            trace.order[p],
            out,
            d_out,
            &mut d_h[p * hd..(p + 1) * hd],
            &mut d_x[p * ad..(p + 1) * ad],
        );
    }
    if opts.want_state_grads {
        d_states[t_steps] = d_h.clone();
    }

    for s in (0..t_steps).rev() {
        let tape = &trace.steps[s];
        let m = tape.n_active;
        if opts.want_state_grads && s + 1 < t_steps {
            // Gradient w.r.t. the states entering step s+1, including the
            // zero-initialized nodes activated at round s.
            d_states[s + 1] = d_h.clone();
        }
        // Nodes activated after step s were zero-constants at this point.
        d_h.truncate(m * hd);
        if s < trace.rounds.len() {
            if let Some(ds) = d_scores {
                let round = &trace.rounds[s];
                debug_assert_eq!(round.n_scored, m);
                let d_round = &ds[s];
                if d_round.len() != round.scores.len() {
                    return Err(ModelError::Data(format!(
                        "round {s} has {} scores but {} gradients",
                        round.scores.len(),
                        d_round.len()
                    )));
                }
                for p in 0..m {
                    if d_round[p] == 0.0 {
                        continue;
                    }
                    let h = &tape.h_next[p * hd..(p + 1) * hd];
                    let x = &trace.annotations[p * ad..(p + 1) * ad];
                    node_importance_backward(
                        ps,
                        prop,
                        h,
                        x,
                        round.scores[p],
                        d_round[p],
                        &mut d_h[p * hd..(p + 1) * hd],
                        &mut d_x[p * ad..(p + 1) * ad],
                    );
                }
            }
        }
        d_h = propagate_step_backward(tape, ps, prop, &d_h);
    }
    if opts.want_state_grads {
        d_states[0] = d_h.clone();
    }

    // Initial hidden states embed the annotations in their leading entries.
    let n0 = trace.steps[0].n_active;
    for p in 0..n0 {
        for k in 0..ad {
            d_x[p * ad + k] += d_h[p * hd + k];
        }
    }

    let mut result = GsnnBackward {
        d_detections: Vec::new(),
        d_states: opts.want_state_grads.then_some(d_states),
    };
    if opts.want_detection_grads {
        let detectable = graph.detectable_nodes();
        let mut d_det = vec![0.0; detectable.len()];
        if !cfg.binarize_annotations {
            for &v in &trace.initial_expanded {
                if let Some(di) = detectable.iter().position(|&d| d == v) {
                    let p = trace
                        .order
                        .iter()
                        .position(|&o| o == v)
                        .expect("seed node is active");
                    d_det[di] += d_x[p * ad];
                }
            }
        }
        result.d_detections = d_det;
    }
    Ok(result)
}

/// Hop-discounted supervision targets: `gamma^d` for the undirected hop
/// distance `d` to the nearest label node, zero beyond `max_hops`.
pub fn importance_targets(
    graph: &KnowledgeGraph,
    label_nodes: &[NodeId],
    gamma: f64,
    max_hops: usize,
) -> Result<Vec<f64>> {
    if label_nodes.is_empty() {
        return Err(ModelError::Data(
            "importance targets need at least one label node".into(),
        ));
    }
    let n = graph.node_count();
    let mut dist = vec![usize::MAX; n];
    let mut queue = VecDeque::new();
    for &v in label_nodes {
        if v as usize >= n {
            return Err(ModelError::Graph(GraphError::InvalidNode(v)));
        }
        if dist[v as usize] != 0 {
            dist[v as usize] = 0;
            queue.push_back(v);
        }
    }
    while let Some(v) = queue.pop_front() {
        let d = dist[v as usize];
        if d >= max_hops {
            continue;
        }
        for &(u, _) in graph.outgoing(v).iter().chain(graph.incoming(v).iter()) {
            if dist[u as usize] == usize::MAX {
                dist[u as usize] = d + 1;
                queue.push_back(u);
            }
        }
    }
    Ok(dist
        .into_iter()
        .map(|d| {
            if d == usize::MAX || d > max_hops {
                0.0
            } else {
                discount_pow(gamma, d)
            }
        })
        .collect())
}

/// `gamma^d` by repeated multiplication, so every call site agrees bitwise.
pub fn discount_pow(gamma: f64, d: usize) -> f64 {
    let mut v = 1.0;
    for _ in 0..d {
        v *= gamma;
    }
    v
}
