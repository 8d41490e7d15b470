//! The gated propagation core: typed-edge message aggregation, the
//! synchronous gated update over an active node subset, the per-node output
//! network with a learned node bias, and the importance scorer.
//!
//! Every forward entry point returns the tape its backward needs; discrete
//! subset membership is never differentiated.

use crate::kgraph::{KnowledgeGraph, NodeId};
use crate::numeric::{
    axpy, gru_backward, gru_forward_into, sigmoid, sigmoid_grad_from_output, GruGradAccum,
    GruWeights, NumericError, ParamId, ParameterSet, Result, Tensor2,
};
use rand::Rng;

/// Participation state of a graph node within one example's subgraph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeStatus {
    Inactive,
    Active,
    Expanded,
}

/// Handles to every learned tensor of the propagation, output and importance
/// networks, plus the per-node bias table.
#[derive(Debug, Clone)]
pub struct PropagationParams {
    pub hidden_dim: usize,
    pub annot_dim: usize,
    pub out_dim: usize,
    pub n_edge_types: usize,
    pub n_nodes: usize,
    pub msg_in: Vec<ParamId>,
    pub msg_out: Vec<ParamId>,
    pub msg_bias: ParamId,
    pub gate_wz: ParamId,
    pub gate_uz: ParamId,
    pub gate_wr: ParamId,
    pub gate_ur: ParamId,
    pub gate_wh: ParamId,
    pub gate_uh: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
    pub imp_w: ParamId,
    pub imp_b: ParamId,
    pub node_bias: ParamId,
}

impl PropagationParams {
    /// Register all tensors for `graph` in `ps`. Weights are drawn uniformly
    /// in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`; biases start at zero.
    pub fn init<R: Rng>(
        ps: &mut ParameterSet,
        graph: &KnowledgeGraph,
        hidden_dim: usize,
        annot_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let h = hidden_dim;
        let n_edge_types = graph.edge_types().len();
        let gate_wz = ps.register_uniform("prop.gate.wz", h, h, h, rng)?;
        let gate_uz = ps.register_uniform("prop.gate.uz", h, h, h, rng)?;
        let gate_wr = ps.register_uniform("prop.gate.wr", h, h, h, rng)?;
        let gate_ur = ps.register_uniform("prop.gate.ur", h, h, h, rng)?;
        let gate_wh = ps.register_uniform("prop.gate.wh", h, h, h, rng)?;
        let gate_uh = ps.register_uniform("prop.gate.uh", h, h, h, rng)?;
        let mut msg_in = Vec::with_capacity(n_edge_types);
        let mut msg_out = Vec::with_capacity(n_edge_types);
        for e in 0..n_edge_types {
            msg_in.push(ps.register_uniform(&format!("prop.msg.in.{e:02}"), h, h, h, rng)?);
            msg_out.push(ps.register_uniform(&format!("prop.msg.out.{e:02}"), h, h, h, rng)?);
        }
        let msg_bias = ps.register("prop.msg.bias", Tensor2::zeros(h, 1))?;
        let out_in_dim = h + annot_dim + 1;
        let out_w = ps.register_uniform("prop.out.w", out_dim, out_in_dim, out_in_dim, rng)?;
        let out_b = ps.register("prop.out.b", Tensor2::zeros(out_dim, 1))?;
        let imp_in_dim = h + annot_dim;
        let imp_w = ps.register_uniform("prop.imp.w", 1, imp_in_dim, imp_in_dim, rng)?;
        let imp_b = ps.register("prop.imp.b", Tensor2::zeros(1, 1))?;
        let node_bias =
            ps.register("prop.node_bias", Tensor2::zeros(graph.node_count().max(1), 1))?;
        Ok(PropagationParams {
            hidden_dim,
            annot_dim,
            out_dim,
            n_edge_types,
            n_nodes: graph.node_count(),
            msg_in,
            msg_out,
            msg_bias,
            gate_wz,
            gate_uz,
            gate_wr,
            gate_ur,
            gate_wh,
            gate_uh,
            out_w,
            out_b,
            imp_w,
            imp_b,
            node_bias,
        })
    }

    pub fn gru_weights<'a>(&self, ps: &'a ParameterSet) -> GruWeights<'a> {
        GruWeights {
            wz: ps.value(self.gate_wz),
            uz: ps.value(self.gate_uz),
            wr: ps.value(self.gate_wr),
            ur: ps.value(self.gate_ur),
            wh: ps.value(self.gate_wh),
            uh: ps.value(self.gate_uh),
        }
    }

    /// Every parameter this struct registered.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![
            self.gate_wz,
            self.gate_uz,
            self.gate_wr,
            self.gate_ur,
            self.gate_wh,
            self.gate_uh,
        ];
        for (a, b) in self.msg_in.iter().zip(self.msg_out.iter()) {
            ids.push(*a);
            ids.push(*b);
        }
        ids.extend([
            self.msg_bias,
            self.out_w,
            self.out_b,
            self.imp_w,
            self.imp_b,
            self.node_bias,
        ]);
        ids
    }
}

/// Hidden state initialization: the annotation occupies the leading entries,
/// the rest is zero.
pub fn init_hidden(annotation: &[f64], hidden_dim: usize) -> Result<Vec<f64>> {
    if annotation.len() > hidden_dim {
        return Err(NumericError::DimensionMismatch {
            op: "init_hidden",
            lhs: format!("annotation len {}", annotation.len()),
            rhs: format!("hidden dim {hidden_dim}"),
        });
    }
    let mut h = vec![0.0; hidden_dim];
    h[..annotation.len()].copy_from_slice(annotation);
    Ok(h)
}

/// Per-example mutable state: which nodes participate, their annotations and
/// hidden states. `order` is activation order; positions index the flat
/// `hidden`/`annot` buffers.
#[derive(Debug, Clone)]
pub struct ActiveSubgraph<'g> {
    graph: &'g KnowledgeGraph,
    hidden_dim: usize,
    annot_dim: usize,
    status: Vec<NodeStatus>,
    pos_of: Vec<u32>,
    order: Vec<NodeId>,
    hidden: Vec<f64>,
    annot: Vec<f64>,
    expanded: Vec<NodeId>,
}

const NO_POS: u32 = u32::MAX;

impl<'g> ActiveSubgraph<'g> {
    pub fn new(graph: &'g KnowledgeGraph, hidden_dim: usize, annot_dim: usize) -> Self {
        ActiveSubgraph {
            graph,
            hidden_dim,
            annot_dim,
            status: vec![NodeStatus::Inactive; graph.node_count()],
            pos_of: vec![NO_POS; graph.node_count()],
            order: Vec::new(),
            hidden: Vec::new(),
            annot: Vec::new(),
            expanded: Vec::new(),
        }
    }

    /// All nodes active with zero annotations; the dense baseline setup.
    pub fn with_all_active(graph: &'g KnowledgeGraph, hidden_dim: usize, annot_dim: usize) -> Self {
        let mut sub = Self::new(graph, hidden_dim, annot_dim);
        for id in 0..graph.node_count() as NodeId {
            sub.activate(id);
        }
        sub
    }

    pub fn graph(&self) -> &'g KnowledgeGraph {
        self.graph
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn annot_dim(&self) -> usize {
        self.annot_dim
    }

    pub fn n_active(&self) -> usize {
        self.order.len()
    }

    pub fn order(&self) -> &[NodeId] {
        &self.order
    }

    pub fn expanded(&self) -> &[NodeId] {
        &self.expanded
    }

    pub fn status(&self, v: NodeId) -> NodeStatus {
        self.status[v as usize]
    }

    pub fn is_active(&self, v: NodeId) -> bool {
        self.status[v as usize] != NodeStatus::Inactive
    }

    pub fn position(&self, v: NodeId) -> Option<usize> {
        let p = self.pos_of[v as usize];
        (p != NO_POS).then_some(p as usize)
    }

    pub fn hidden_flat(&self) -> &[f64] {
        &self.hidden
    }

    pub fn hidden_flat_mut(&mut self) -> &mut [f64] {
        &mut self.hidden
    }

    pub fn hidden_of(&self, pos: usize) -> &[f64] {
        &self.hidden[pos * self.hidden_dim..(pos + 1) * self.hidden_dim]
    }

    pub fn annot_flat(&self) -> &[f64] {
        &self.annot
    }

    pub fn annot_of(&self, pos: usize) -> &[f64] {
        &self.annot[pos * self.annot_dim..(pos + 1) * self.annot_dim]
    }

    /// Activate `v` with zero annotation and zero hidden state. Returns
    /// false if it was already active.
    pub fn activate(&mut self, v: NodeId) -> bool {
        if self.status[v as usize] != NodeStatus::Inactive {
            return false;
        }
        self.status[v as usize] = NodeStatus::Active;
        self.pos_of[v as usize] = self.order.len() as u32;
        self.order.push(v);
        self.hidden.resize(self.hidden.len() + self.hidden_dim, 0.0);
        self.annot.resize(self.annot.len() + self.annot_dim, 0.0);
        true
    }

    /// Activate `v` carrying an annotation; the hidden state is the
    /// annotation padded with zeros.
    pub fn activate_annotated(&mut self, v: NodeId, annotation: &[f64]) -> Result<()> {
        if annotation.len() != self.annot_dim {
            return Err(NumericError::DimensionMismatch {
                op: "activate_annotated",
                lhs: format!("annotation len {}", annotation.len()),
                rhs: format!("annot dim {}", self.annot_dim),
            });
        }
        let init = init_hidden(annotation, self.hidden_dim)?;
        if self.activate(v) {
            let p = self.pos_of[v as usize] as usize;
            self.hidden[p * self.hidden_dim..(p + 1) * self.hidden_dim].copy_from_slice(&init);
            self.annot[p * self.annot_dim..(p + 1) * self.annot_dim].copy_from_slice(annotation);
        }
        Ok(())
    }

    /// Mark an active node expanded and activate all of its neighbors, which
    /// keeps every neighbor of an expanded node active.
    pub fn expand(&mut self, v: NodeId) {
        debug_assert!(self.is_active(v), "expand requires an active node");
        if self.status[v as usize] == NodeStatus::Expanded {
            return;
        }
        self.status[v as usize] = NodeStatus::Expanded;
        self.expanded.push(v);
        let neighbors = self.graph.neighbors(v).expect("node validated active");
        for u in neighbors {
            self.activate(u);
        }
    }
}

/// One directed edge between active positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EdgeRef {
    pub src_pos: u32,
    pub dst_pos: u32,
    pub etype: u16,
}

/// Directed edges of the graph whose endpoints are both active, in
/// activation-then-adjacency order.
pub fn intra_edges(sub: &ActiveSubgraph) -> Vec<EdgeRef> {
    let mut edges = Vec::new();
    for (p, &v) in sub.order.iter().enumerate() {
        for &(u, etype) in sub.graph.outgoing(v) {
            if let Some(q) = sub.position(u) {
                edges.push(EdgeRef {
                    src_pos: p as u32,
                    dst_pos: q as u32,
                    etype,
                });
            }
        }
    }
    edges
}

/// Message aggregation over the listed edges:
/// `a_v = sum_in W_in[e] h_u + sum_out W_out[e] h_u + b` per active node.
pub(crate) fn aggregate_into(
    edges: &[EdgeRef],
    h_prev: &[f64],
    n_active: usize,
    hidden_dim: usize,
    ps: &ParameterSet,
    prop: &PropagationParams,
    agg: &mut [f64],
) {
    debug_assert_eq!(agg.len(), n_active * hidden_dim);
    let bias = ps.value(prop.msg_bias);
    for p in 0..n_active {
        agg[p * hidden_dim..(p + 1) * hidden_dim].copy_from_slice(bias.data());
    }
    for e in edges {
        let s = e.src_pos as usize * hidden_dim;
        let d = e.dst_pos as usize * hidden_dim;
        let h_src = &h_prev[s..s + hidden_dim];
        let h_dst = &h_prev[d..d + hidden_dim];
        // incoming message lands at dst, outgoing message lands at src
        ps.value(prop.msg_in[e.etype as usize])
            .matvec_accum(h_src, &mut agg[d..d + hidden_dim]);
        ps.value(prop.msg_out[e.etype as usize])
            .matvec_accum(h_dst, &mut agg[s..s + hidden_dim]);
    }
}

/// The aggregation entry point over the current hidden states.
pub fn aggregate_messages(
    sub: &ActiveSubgraph,
    ps: &ParameterSet,
    prop: &PropagationParams,
) -> Vec<f64> {
    let n = sub.n_active();
    let h = prop.hidden_dim;
    let edges = intra_edges(sub);
    let mut agg = vec![0.0; n * h];
    aggregate_into(&edges, sub.hidden_flat(), n, h, ps, prop, &mut agg);
    agg
}

/// Everything one propagation step saves for its backward pass.
#[derive(Debug, Clone)]
pub struct StepTape {
    pub n_active: usize,
    pub edges: Vec<EdgeRef>,
    pub h_prev: Vec<f64>,
    pub agg: Vec<f64>,
    pub z: Vec<f64>,
    pub r: Vec<f64>,
    pub hc: Vec<f64>,
    pub h_next: Vec<f64>,
}

/// One synchronous gated update over the active set. All messages read the
/// pre-step snapshot.
pub fn propagate_step(
    sub: &mut ActiveSubgraph,
    ps: &ParameterSet,
    prop: &PropagationParams,
) -> Result<StepTape> {
    let n = sub.n_active();
    let hd = prop.hidden_dim;
    let h_prev = sub.hidden_flat().to_vec();
    let edges = intra_edges(sub);
    let mut agg = vec![0.0; n * hd];
    aggregate_into(&edges, &h_prev, n, hd, ps, prop, &mut agg);

    let w = prop.gru_weights(ps);
    let mut z = vec![0.0; n * hd];
    let mut r = vec![0.0; n * hd];
    let mut hc = vec![0.0; n * hd];
    let mut h_next = vec![0.0; n * hd];
    for p in 0..n {
        let span = p * hd..(p + 1) * hd;
        gru_forward_into(
            &h_prev[span.clone()],
            &agg[span.clone()],
            w,
            &mut z[span.clone()],
            &mut r[span.clone()],
            &mut hc[span.clone()],
            &mut h_next[span.clone()],
        )?;
    }
    sub.hidden_flat_mut().copy_from_slice(&h_next);
    Ok(StepTape {
        n_active: n,
        edges,
        h_prev,
        agg,
        z,
        r,
        hc,
        h_next,
    })
}

/// Backward through one propagation step. `d_h_next` is the loss gradient
/// w.r.t. the post-step hidden states; returns the gradient w.r.t. the
/// pre-step snapshot. Weight gradients accumulate into `ps`.
pub fn propagate_step_backward(
    tape: &StepTape,
    ps: &mut ParameterSet,
    prop: &PropagationParams,
    d_h_next: &[f64],
) -> Vec<f64> {
    let n = tape.n_active;
    let hd = prop.hidden_dim;
    debug_assert_eq!(d_h_next.len(), n * hd);
    let mut d_h_prev = vec![0.0; n * hd];
    let mut d_agg = vec![0.0; n * hd];
    let mut acc = GruGradAccum::zeros(hd);
    {
        let w = prop.gru_weights(ps);
        let mut dh_rest = &mut d_h_prev[..];
        let mut da_rest = &mut d_agg[..];
        for p in 0..n {
            let span = p * hd..(p + 1) * hd;
            let (dh_s, dh_tail) = dh_rest.split_at_mut(hd);
            let (da_s, da_tail) = da_rest.split_at_mut(hd);
            gru_backward(
                &tape.h_prev[span.clone()],
                &tape.agg[span.clone()],
                w,
                &tape.z[span.clone()],
                &tape.r[span.clone()],
                &tape.hc[span.clone()],
                &d_h_next[span.clone()],
                &mut acc,
                dh_s,
                da_s,
            );
            dh_rest = dh_tail;
            da_rest = da_tail;
        }
    }
    ps.grad_mut(prop.gate_wz).add_scaled(&acc.dwz, 1.0);
    ps.grad_mut(prop.gate_uz).add_scaled(&acc.duz, 1.0);
    ps.grad_mut(prop.gate_wr).add_scaled(&acc.dwr, 1.0);
    ps.grad_mut(prop.gate_ur).add_scaled(&acc.dur, 1.0);
    ps.grad_mut(prop.gate_wh).add_scaled(&acc.dwh, 1.0);
    ps.grad_mut(prop.gate_uh).add_scaled(&acc.duh, 1.0);

    // Messages forward were: agg[dst] += W_in h_src, agg[src] += W_out h_dst.
    for e in &tape.edges {
        let s = e.src_pos as usize * hd;
        let d = e.dst_pos as usize * hd;
        let et = e.etype as usize;
        ps.grad_mut(prop.msg_in[et])
            .add_outer(&d_agg[d..d + hd], &tape.h_prev[s..s + hd]);
        ps.grad_mut(prop.msg_out[et])
            .add_outer(&d_agg[s..s + hd], &tape.h_prev[d..d + hd]);
        let mut dh_src = vec![0.0; hd];
        ps.value(prop.msg_in[et])
            .matvec_t_accum(&d_agg[d..d + hd], &mut dh_src);
        axpy(&mut d_h_prev[s..s + hd], 1.0, &dh_src);
        let mut dh_dst = vec![0.0; hd];
        ps.value(prop.msg_out[et])
            .matvec_t_accum(&d_agg[s..s + hd], &mut dh_dst);
        axpy(&mut d_h_prev[d..d + hd], 1.0, &dh_dst);
    }
    // Shared bias: every active node's aggregation starts from it.
    {
        let db = ps.grad_mut(prop.msg_bias);
        for p in 0..n {
            axpy(db.data_mut(), 1.0, &d_agg[p * hd..(p + 1) * hd]);
        }
    }
    d_h_prev
}

/// Per-node output: a single sigmoid layer over `[h, x, n_v]`.
pub fn node_output(
    ps: &ParameterSet,
    prop: &PropagationParams,
    h: &[f64],
    x: &[f64],
    node: NodeId,
) -> Result<Vec<f64>> {
    let w = ps.value(prop.out_w);
    let input = output_input(ps, prop, h, x, node)?;
    let mut pre = ps.value(prop.out_b).data().to_vec();
    w.matvec_accum(&input, &mut pre);
    Ok(pre.into_iter().map(sigmoid).collect())
}

fn output_input(
    ps: &ParameterSet,
    prop: &PropagationParams,
    h: &[f64],
    x: &[f64],
    node: NodeId,
) -> Result<Vec<f64>> {
    if h.len() != prop.hidden_dim || x.len() != prop.annot_dim {
        return Err(NumericError::DimensionMismatch {
            op: "node_output",
            lhs: format!("hidden {} annot {}", prop.hidden_dim, prop.annot_dim),
            rhs: format!("h len {} x len {}", h.len(), x.len()),
        });
    }
    let mut input = Vec::with_capacity(h.len() + x.len() + 1);
    input.extend_from_slice(h);
    input.extend_from_slice(x);
    input.push(ps.value(prop.node_bias).get(node as usize, 0));
    Ok(input)
}

/// Backward of [`node_output`]. `out` is the forward activation. Gradients
/// for the layer, the node bias and the inputs accumulate in place.
#[allow(clippy::too_many_arguments)]
pub fn node_output_backward(
    ps: &mut ParameterSet,
    prop: &PropagationParams,
    h: &[f64],
    x: &[f64],
    node: NodeId,
    out: &[f64],
    d_out: &[f64],
    d_h: &mut [f64],
    d_x: &mut [f64],
) {
    let d_pre: Vec<f64> = d_out
        .iter()
        .zip(out.iter())
        .map(|(&d, &o)| d * sigmoid_grad_from_output(o))
        .collect();
    let input = output_input(ps, prop, h, x, node).expect("validated in forward");
    ps.grad_mut(prop.out_w).add_outer(&d_pre, &input);
    axpy(ps.grad_mut(prop.out_b).data_mut(), 1.0, &d_pre);
    let mut d_input = vec![0.0; input.len()];
    ps.value(prop.out_w).matvec_t_accum(&d_pre, &mut d_input);
    let hd = prop.hidden_dim;
    axpy(d_h, 1.0, &d_input[..hd]);
    axpy(d_x, 1.0, &d_input[hd..hd + prop.annot_dim]);
    ps.grad_mut(prop.node_bias).data_mut()[node as usize] += d_input[hd + prop.annot_dim];
}

/// Importance score: a single sigmoid unit over `[h, x]`.
pub fn node_importance(
    ps: &ParameterSet,
    prop: &PropagationParams,
    h: &[f64],
    x: &[f64],
) -> Result<f64> {
    if h.len() != prop.hidden_dim || x.len() != prop.annot_dim {
        return Err(NumericError::DimensionMismatch {
            op: "node_importance",
            lhs: format!("hidden {} annot {}", prop.hidden_dim, prop.annot_dim),
            rhs: format!("h len {} x len {}", h.len(), x.len()),
        });
    }
    let w = ps.value(prop.imp_w);
    let mut pre = ps.value(prop.imp_b).get(0, 0);
    let row = w.row(0);
    for (a, b) in row[..h.len()].iter().zip(h.iter()) {
        pre += a * b;
    }
    for (a, b) in row[h.len()..].iter().zip(x.iter()) {
        pre += a * b;
    }
    Ok(sigmoid(pre))
}

/// Backward of [`node_importance`]; `score` is the forward activation.
#[allow(clippy::too_many_arguments)]
pub fn node_importance_backward(
    ps: &mut ParameterSet,
    prop: &PropagationParams,
    h: &[f64],
    x: &[f64],
    score: f64,
    d_score: f64,
    d_h: &mut [f64],
    d_x: &mut [f64],
) {
    let d_pre = d_score * sigmoid_grad_from_output(score);
    let mut input = Vec::with_capacity(h.len() + x.len());
    input.extend_from_slice(h);
    input.extend_from_slice(x);
    ps.grad_mut(prop.imp_w).add_outer(&[d_pre], &input);
    ps.grad_mut(prop.imp_b).data_mut()[0] += d_pre;
    let mut d_input = vec![0.0; input.len()];
    ps.value(prop.imp_w).matvec_t_accum(&[d_pre], &mut d_input);
    axpy(d_h, 1.0, &d_input[..h.len()]);
    axpy(d_x, 1.0, &d_input[h.len()..]);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_param_grads, max_rel_err, FD_STEP};
    use crate::kgraph::{build_graph, CooccurrenceRecord};
    use crate::rng::substream;

    fn rec(a: &str, rel: &str, b: &str) -> CooccurrenceRecord {
        CooccurrenceRecord {
            concept_a: a.into(),
            relation: rel.into(),
            concept_b: b.into(),
            count: 10,
        }
    }

    fn line_graph(n: usize) -> KnowledgeGraph {
        let records = (0..n - 1)
            .map(|i| rec(&format!("n{i:02}"), "link", &format!("n{:02}", i + 1)))
            .collect::<Vec<_>>();
        build_graph(records, 1).unwrap().0
    }

    fn init_model(
        graph: &KnowledgeGraph,
        hidden: usize,
        out: usize,
        seed: u64,
    ) -> (ParameterSet, PropagationParams) {
        let mut ps = ParameterSet::new();
        let mut rng = substream(seed, "init");
        let prop = PropagationParams::init(&mut ps, graph, hidden, 1, out, &mut rng).unwrap();
        (ps, prop)
    }

    #[test]
    fn init_hidden_pads_annotation() {
        assert_eq!(
            init_hidden(&[0.9], 10).unwrap(),
            vec![0.9, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]
        );
        assert_eq!(init_hidden(&[0.0], 4).unwrap(), vec![0.0; 4]);
        assert_eq!(init_hidden(&[0.5], 1).unwrap(), vec![0.5]);
        assert!(init_hidden(&[1.0, 2.0], 1).is_err());
    }

    #[test]
    fn isolated_node_aggregates_to_bias() {
        let graph = line_graph(3);
        let (mut ps, prop) = init_model(&graph, 4, 2, 1);
        ps.value_mut(prop.msg_bias)
            .data_mut()
            .copy_from_slice(&[0.1, 0.2, 0.3, 0.4]);
        let mut sub = ActiveSubgraph::new(&graph, 4, 1);
        sub.activate(0); // alone: no active neighbor
        let agg = aggregate_messages(&sub, &ps, &prop);
        assert_eq!(agg, vec![0.1, 0.2, 0.3, 0.4]);
    }

    #[test]
    fn two_node_identity_message() {
        // u -> v with W_in = I, everything else zero: a_v = h_u.
        let graph = line_graph(2);
        let (mut ps, prop) = init_model(&graph, 2, 2, 2);
        for id in prop.param_ids() {
            ps.value_mut(id).fill(0.0);
        }
        *ps.value_mut(prop.msg_in[0]) = Tensor2::identity(2);
        let mut sub = ActiveSubgraph::with_all_active(&graph, 2, 1);
        sub.hidden_flat_mut()[..2].copy_from_slice(&[1.0, 0.0]); // h of node 0
        let agg = aggregate_messages(&sub, &ps, &prop);
        assert_eq!(&agg[2..4], &[1.0, 0.0]); // node 1 receives h_0
        assert_eq!(&agg[0..2], &[0.0, 0.0]); // W_out is zero
    }

    #[test]
    fn aggregation_matches_edge_list_oracle() {
        // 5 nodes, 2 edge types; brute-force over graph.edges() directly.
        let records = vec![
            rec("a", "t1", "b"),
            rec("b", "t1", "c"),
            rec("c", "t2", "a"),
            rec("d", "t2", "b"),
            rec("a", "t2", "e"),
            rec("e", "t1", "d"),
        ];
        let (graph, _) = build_graph(records, 1).unwrap();
        let hd = 3;
        let (ps, prop) = init_model(&graph, hd, 2, 3);
        let mut sub = ActiveSubgraph::with_all_active(&graph, hd, 1);
        let mut rng = substream(9, "hidden");
        for v in sub.hidden_flat_mut() {
            *v = rand::Rng::random_range(&mut rng, -1.0..1.0);
        }
        let agg = aggregate_messages(&sub, &ps, &prop);

        let h = sub.hidden_flat().to_vec();
        let mut expect = vec![0.0; graph.node_count() * hd];
        for p in 0..graph.node_count() {
            expect[p * hd..(p + 1) * hd].copy_from_slice(ps.value(prop.msg_bias).data());
        }
        for e in graph.edges() {
            let sp = sub.position(e.src).unwrap();
            let dp = sub.position(e.dst).unwrap();
            let win = ps.value(prop.msg_in[e.edge_type as usize]);
            let wout = ps.value(prop.msg_out[e.edge_type as usize]);
            let m_in = win.matvec(&h[sp * hd..(sp + 1) * hd]).unwrap();
            let m_out = wout.matvec(&h[dp * hd..(dp + 1) * hd]).unwrap();
            for i in 0..hd {
                expect[dp * hd + i] += m_in[i];
                expect[sp * hd + i] += m_out[i];
            }
        }
        assert!(max_rel_err(&agg, &expect) < 1e-12);
    }

    #[test]
    fn zero_params_halve_every_hidden_state() {
        let graph = line_graph(4);
        let (mut ps, prop) = init_model(&graph, 3, 2, 4);
        for id in prop.param_ids() {
            ps.value_mut(id).fill(0.0);
        }
        let mut sub = ActiveSubgraph::with_all_active(&graph, 3, 1);
        let init: Vec<f64> = (0..sub.hidden_flat().len()).map(|i| i as f64 * 0.1).collect();
        sub.hidden_flat_mut().copy_from_slice(&init);
        propagate_step(&mut sub, &ps, &prop).unwrap();
        for (now, before) in sub.hidden_flat().iter().zip(init.iter()) {
            assert!((now - 0.5 * before).abs() < 1e-15);
        }
    }

    #[test]
    fn single_node_recurrence_matches_scalar_oracle() {
        // H = 1 makes every matrix a scalar; recompute the recurrence by hand.
        let graph = line_graph(2);
        let (mut ps, prop) = init_model(&graph, 1, 1, 5);
        let set = |ps: &mut ParameterSet, id: ParamId, v: f64| ps.value_mut(id).data_mut()[0] = v;
        set(&mut ps, prop.gate_wz, 0.3);
        set(&mut ps, prop.gate_uz, -0.2);
        set(&mut ps, prop.gate_wr, 0.7);
        set(&mut ps, prop.gate_ur, 0.1);
        set(&mut ps, prop.gate_wh, -0.4);
        set(&mut ps, prop.gate_uh, 0.6);
        set(&mut ps, prop.msg_bias, 0.25);
        let mut sub = ActiveSubgraph::new(&graph, 1, 1);
        sub.activate_annotated(0, &[0.8]).unwrap();

        let mut h = 0.8f64;
        for _ in 0..3 {
            propagate_step(&mut sub, &ps, &prop).unwrap();
            let a = 0.25; // isolated: bias only
            let z = sigmoid(0.3 * a - 0.2 * h);
            let r = sigmoid(0.7 * a + 0.1 * h);
            let hc = (-0.4 * a + 0.6 * (r * h)).tanh();
            h = (1.0 - z) * h + z * hc;
            assert!((sub.hidden_of(0)[0] - h).abs() < 1e-14);
        }
    }

    #[test]
    fn node_output_zero_weights_is_half() {
        let graph = line_graph(2);
        let (mut ps, prop) = init_model(&graph, 4, 5, 6);
        for id in prop.param_ids() {
            ps.value_mut(id).fill(0.0);
        }
        let out = node_output(&ps, &prop, &[0.3; 4], &[0.9], 1).unwrap();
        assert_eq!(out, vec![0.5; 5]);
    }

    #[test]
    fn node_importance_zero_weights_is_half_and_monotone() {
        let graph = line_graph(2);
        let (mut ps, prop) = init_model(&graph, 2, 2, 7);
        for id in prop.param_ids() {
            ps.value_mut(id).fill(0.0);
        }
        let h = [0.5, 0.25];
        assert_eq!(node_importance(&ps, &prop, &h, &[0.0]).unwrap(), 0.5);
        // positive weight on a positive hidden raises the score, negative lowers it
        ps.value_mut(prop.imp_w).set(0, 0, 1.0);
        assert!(node_importance(&ps, &prop, &h, &[0.0]).unwrap() > 0.5);
        ps.value_mut(prop.imp_w).set(0, 0, -1.0);
        assert!(node_importance(&ps, &prop, &h, &[0.0]).unwrap() < 0.5);
    }

    #[test]
    fn output_and_importance_gradients_match_finite_differences() {
        let graph = line_graph(3);
        let (mut ps, prop) = init_model(&graph, 3, 2, 8);
        let h = [0.4, -0.2, 0.7];
        let x = [0.6];
        let weights = [0.3, -0.8]; // fixed projection to a scalar proxy loss
        let node: NodeId = 1;

        ps.zero_grads();
        let out = node_output(&ps, &prop, &h, &x, node).unwrap();
        let d_out: Vec<f64> = weights.to_vec();
        let mut d_h = vec![0.0; 3];
        let mut d_x = vec![0.0; 1];
        node_output_backward(&mut ps, &prop, &h, &x, node, &out, &d_out, &mut d_h, &mut d_x);

        let ids = [prop.out_w, prop.out_b, prop.node_bias];
        let (err, name) = check_param_grads(
            &mut ps,
            &ids,
            |ps| {
                let o = node_output(ps, &prop, &h, &x, node).unwrap();
                o.iter().zip(weights.iter()).map(|(a, b)| a * b).sum()
            },
            FD_STEP,
        );
        assert!(err < 1e-5, "node_output grads off by {err} in {name}");

        // input gradients
        let mut h_var = h.to_vec();
        let num_dh = crate::gradcheck::central_diff_vec(
            &mut h_var,
            |hv| {
                let o = node_output(&ps, &prop, hv, &x, node).unwrap();
                o.iter().zip(weights.iter()).map(|(a, b)| a * b).sum()
            },
            FD_STEP,
        );
        assert!(max_rel_err(&d_h, &num_dh) < 1e-5);

        ps.zero_grads();
        let score = node_importance(&ps, &prop, &h, &x).unwrap();
        let mut d_h = vec![0.0; 3];
        let mut d_x = vec![0.0; 1];
        node_importance_backward(&mut ps, &prop, &h, &x, score, 1.0, &mut d_h, &mut d_x);
        let ids = [prop.imp_w, prop.imp_b];
        let (err, name) = check_param_grads(
            &mut ps,
            &ids,
            |ps| node_importance(ps, &prop, &h, &x).unwrap(),
            FD_STEP,
        );
        assert!(err < 1e-5, "node_importance grads off by {err} in {name}");
    }

    #[test]
    fn three_step_backward_matches_finite_differences() {
        // Full unrolled backward over T=3 steps on an 8-node graph.
        let records = vec![
            rec("a", "t1", "b"),
            rec("b", "t1", "c"),
            rec("c", "t2", "d"),
            rec("d", "t1", "e"),
            rec("e", "t2", "f"),
            rec("f", "t1", "g"),
            rec("g", "t2", "h"),
            rec("h", "t2", "a"),
            rec("a", "t1", "e"),
            rec("c", "t1", "g"),
        ];
        let (graph, _) = build_graph(records, 1).unwrap();
        let hd = 3;
        let (mut ps, prop) = init_model(&graph, hd, 2, 11);
        let annotations: Vec<f64> = (0..graph.node_count()).map(|i| 0.1 * i as f64).collect();

        let run = |ps: &ParameterSet| -> (f64, Vec<StepTape>) {
            let mut sub = ActiveSubgraph::new(&graph, hd, 1);
            for v in 0..graph.node_count() as NodeId {
                sub.activate_annotated(v, &[annotations[v as usize]]).unwrap();
            }
            let mut tapes = Vec::new();
            for _ in 0..3 {
                tapes.push(propagate_step(&mut sub, ps, &prop).unwrap());
            }
            // fixed projection of the final hidden states
            let loss = sub
                .hidden_flat()
                .iter()
                .enumerate()
                .map(|(i, v)| v * ((i % 5) as f64 - 2.0) * 0.3)
                .sum();
            (loss, tapes)
        };

        ps.zero_grads();
        let (_, tapes) = run(&ps);
        let n = tapes[2].n_active;
        let mut d_h: Vec<f64> = (0..n * hd).map(|i| ((i % 5) as f64 - 2.0) * 0.3).collect();
        for tape in tapes.iter().rev() {
            d_h = propagate_step_backward(tape, &mut ps, &prop, &d_h);
        }

        let ids = [
            prop.gate_wz,
            prop.gate_uz,
            prop.gate_wr,
            prop.gate_ur,
            prop.gate_wh,
            prop.gate_uh,
            prop.msg_in[0],
            prop.msg_in[1],
            prop.msg_out[0],
            prop.msg_out[1],
            prop.msg_bias,
        ];
        let (err, name) = check_param_grads(&mut ps, &ids, |ps| run(ps).0, FD_STEP);
        assert!(err < 1e-4, "unrolled grads off by {err} in {name}");
    }

    #[test]
    fn relabeling_nodes_permutes_states_identically() {
        // Same topology under two namings; outputs must match node-for-node.
        let records_a = vec![rec("a", "t", "b"), rec("b", "t", "c"), rec("c", "t", "a")];
        let records_b = vec![rec("q", "t", "p"), rec("p", "t", "r"), rec("r", "t", "q")];
        let (ga, _) = build_graph(records_a, 1).unwrap();
        let (gb, _) = build_graph(records_b, 1).unwrap();
        // a,b,c sort to ids 0,1,2 ; p,q,r sort to 0,1,2 but the cycle starts
        // at q: a->b->c->a maps to q->p->r->q, i.e. a=q(1), b=p(0), c=r(2).
        let map = [1u32, 0, 2];
        let hd = 3;
        let (ps_a, prop_a) = init_model(&ga, hd, 2, 12);
        let (mut ps_b, prop_b) = init_model(&gb, hd, 2, 12);
        for (ida, idb) in prop_a.param_ids().iter().zip(prop_b.param_ids().iter()) {
            if *ida == prop_a.node_bias {
                for v in 0..3 {
                    let bias = ps_a.value(prop_a.node_bias).get(v, 0);
                    ps_b.value_mut(prop_b.node_bias).set(map[v] as usize, 0, bias);
                }
            } else {
                let value = ps_a.value(*ida).clone();
                *ps_b.value_mut(*idb) = value;
            }
        }
        let mut sub_a = ActiveSubgraph::new(&ga, hd, 1);
        let mut sub_b = ActiveSubgraph::new(&gb, hd, 1);
        for v in 0..3u32 {
            sub_a.activate_annotated(v, &[0.2 + v as f64 * 0.3]).unwrap();
            sub_b.activate_annotated(map[v as usize], &[0.2 + v as f64 * 0.3]).unwrap();
        }
        for _ in 0..3 {
            propagate_step(&mut sub_a, &ps_a, &prop_a).unwrap();
            propagate_step(&mut sub_b, &ps_b, &prop_b).unwrap();
        }
        for v in 0..3u32 {
            let pa = sub_a.position(v).unwrap();
            let pb = sub_b.position(map[v as usize]).unwrap();
            let ha = sub_a.hidden_of(pa);
            let hb = sub_b.hidden_of(pb);
            assert!(max_rel_err(ha, hb) < 1e-12, "node {v}");
        }
    }

    #[test]
    fn distant_perturbation_cannot_reach_within_k_steps() {
        // Path n00-n01-...-n05; perturbing n05's start state cannot affect
        // n00 within 4 steps (distance 5).
        let graph = line_graph(6);
        let hd = 2;
        let (ps, prop) = init_model(&graph, hd, 2, 13);
        let run = |perturb: f64| {
            let mut sub = ActiveSubgraph::with_all_active(&graph, hd, 1);
            let n = sub.n_active();
            sub.hidden_flat_mut()[(n - 1) * hd] = perturb;
            let mut h0 = Vec::new();
            for _ in 0..4 {
                propagate_step(&mut sub, &ps, &prop).unwrap();
                h0.push(sub.hidden_of(0).to_vec());
            }
            h0
        };
        let base = run(0.0);
        let moved = run(0.9);
        for k in 0..4 {
            assert_eq!(base[k], moved[k], "leaked after {} steps", k + 1);
        }
    }

    #[test]
    fn deactivating_equals_deleting_incident_edges() {
        // Dropping node c from the active set must reproduce propagation on
        // the graph with c's incident edges removed.
        let records = vec![
            rec("a", "t", "b"),
            rec("b", "t", "c"),
            rec("c", "t", "d"),
            rec("a", "t", "d"),
        ];
        let (g_full, _) = build_graph(records, 1).unwrap();
        let records_cut = vec![rec("a", "t", "b"), rec("a", "t", "d")];
        let (g_cut, _) = build_graph_with_labels_for_test(records_cut);
        let hd = 2;
        let (ps, prop) = init_model(&g_full, hd, 2, 14);
        let (mut ps_cut, prop_cut) = init_model(&g_cut, hd, 2, 14);
        for (ida, idb) in prop.param_ids().iter().zip(prop_cut.param_ids().iter()) {
            let v = ps.value(*ida).clone();
            if v.shape() == ps_cut.value(*idb).shape() {
                *ps_cut.value_mut(*idb) = v;
            }
        }

        let c = g_full.node_by_name("c").unwrap().id;
        let mut sub = ActiveSubgraph::new(&g_full, hd, 1);
        for v in 0..g_full.node_count() as NodeId {
            if v != c {
                sub.activate_annotated(v, &[0.1 + v as f64 * 0.2]).unwrap();
            }
        }
        let mut sub_cut = ActiveSubgraph::new(&g_cut, hd, 1);
        for name in ["a", "b", "d"] {
            let vf = g_full.node_by_name(name).unwrap().id;
            let vc = g_cut.node_by_name(name).unwrap().id;
            sub_cut
                .activate_annotated(vc, &[0.1 + vf as f64 * 0.2])
                .unwrap();
        }
        for _ in 0..3 {
            propagate_step(&mut sub, &ps, &prop).unwrap();
            propagate_step(&mut sub_cut, &ps_cut, &prop_cut).unwrap();
        }
        for name in ["a", "b", "d"] {
            let vf = g_full.node_by_name(name).unwrap().id;
            let vc = g_cut.node_by_name(name).unwrap().id;
            let hf = sub.hidden_of(sub.position(vf).unwrap());
            let hc = sub_cut.hidden_of(sub_cut.position(vc).unwrap());
            assert!(max_rel_err(hf, hc) < 1e-12, "node {name}");
        }
    }

    fn build_graph_with_labels_for_test(
        records: Vec<CooccurrenceRecord>,
    ) -> (KnowledgeGraph, crate::kgraph::BuildReport) {
        // keep node "c" present (isolated) so names map across both graphs
        crate::kgraph::build_graph_with_labels(
            records,
            1,
            &[crate::kgraph::ConceptDecl {
                name: "c".into(),
                kind: crate::kgraph::ConceptKind::Object,
                is_detectable: false,
            }],
        )
        .unwrap()
    }
}
