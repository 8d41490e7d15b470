//! The all-nodes baseline: every node active and expanded from the start,
//! with the adjacency structure materialized as dense per-pair tables. This
//! is the reference the budgeted controller is checked against, and the
//! quadratic-cost subject of the scaling benchmark.

use super::{detected_nodes, GsnnConfig, ModelError, Result};
use crate::kgraph::{KnowledgeGraph, NodeId};
use crate::numeric::{
    axpy, gru_backward, gru_forward_into, GruGradAccum, ParameterSet,
};
use crate::propagation::{
    node_output, node_output_backward, PropagationParams,
};

/// Dense directed adjacency: `code = edge_type + 1`, zero when absent.
/// `incoming[v*n + u]` codes edge `u -> v`; `outgoing[v*n + u]` codes
/// `v -> u`, so both scans over `u` walk rows sequentially.
pub struct DenseTables {
    n: usize,
    incoming: Vec<u16>,
    outgoing: Vec<u16>,
}

/// Refuse to materialize tables beyond this many bytes.
const DENSE_TABLE_BYTE_LIMIT: usize = 2 << 30;

impl DenseTables {
    pub fn build(graph: &KnowledgeGraph) -> Result<Self> {
        let n = graph.node_count();
        let bytes = n
            .checked_mul(n)
            .and_then(|c| c.checked_mul(2 * std::mem::size_of::<u16>()))
            .ok_or_else(|| ModelError::Data("dense adjacency size overflow".into()))?;
        if bytes > DENSE_TABLE_BYTE_LIMIT {
            return Err(ModelError::Data(format!(
                "dense adjacency for {n} nodes needs {bytes} bytes"
            )));
        }
        let mut incoming = vec![0u16; n * n];
        let mut outgoing = vec![0u16; n * n];
        for e in graph.edges() {
            let code = e.edge_type + 1;
            incoming[e.dst as usize * n + e.src as usize] = code;
            outgoing[e.src as usize * n + e.dst as usize] = code;
        }
        Ok(DenseTables {
            n,
            incoming,
            outgoing,
        })
    }

    pub fn node_count(&self) -> usize {
        self.n
    }
}

/// Flat per-step tape over all `n` nodes.
#[derive(Debug, Clone)]
struct DenseStepTape {
    h_prev: Vec<f64>,
    agg: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    hc: Vec<f64>,
    h_next: Vec<f64>,
}

/// Forward result of the dense baseline; node `v`'s output occupies
/// `outputs[v*out_dim..]`.
pub struct DenseRun {
    pub outputs: Vec<f64>,
    pub annotations: Vec<f64>,
    steps: Vec<DenseStepTape>,
}

fn dense_aggregate(
    tables: &DenseTables,
    h_prev: &[f64],
    ps: &ParameterSet,
    prop: &PropagationParams,
    agg: &mut [f64],
) {
    let n = tables.n;
    let hd = prop.hidden_dim;
    let bias = ps.value(prop.msg_bias);
    for v in 0..n {
        agg[v * hd..(v + 1) * hd].copy_from_slice(bias.data());
    }
    for v in 0..n {
        let row_in = &tables.incoming[v * n..(v + 1) * n];
        let row_out = &tables.outgoing[v * n..(v + 1) * n];
        let dst = v * hd;
        for u in 0..n {
            let code = row_in[u];
            if code != 0 {
                let w = ps.value(prop.msg_in[(code - 1) as usize]);
                let h_u = &h_prev[u * hd..(u + 1) * hd];
                let mut msg = vec![0.0; hd];
                w.matvec_into(h_u, &mut msg);
                axpy(&mut agg[dst..dst + hd], 1.0, &msg);
            }
            let code = row_out[u];
            if code != 0 {
                let w = ps.value(prop.msg_out[(code - 1) as usize]);
                let h_u = &h_prev[u * hd..(u + 1) * hd];
                let mut msg = vec![0.0; hd];
                w.matvec_into(h_u, &mut msg);
                axpy(&mut agg[dst..dst + hd], 1.0, &msg);
            }
        }
    }
}

/// The gated recurrence over every node of the graph, annotations seeded
/// exactly like the budgeted controller seeds its detected nodes.
pub fn run_dense_ggnn(
    graph: &KnowledgeGraph,
    detections: &[f64],
    ps: &ParameterSet,
    prop: &PropagationParams,
    cfg: &GsnnConfig,
) -> Result<DenseRun> {
    let tables = DenseTables::build(graph)?;
    run_dense_with_tables(&tables, graph, detections, ps, prop, cfg)
}

/// [`run_dense_ggnn`] against prebuilt tables (benchmark path).
pub fn run_dense_with_tables(
    tables: &DenseTables,
    graph: &KnowledgeGraph,
    detections: &[f64],
    ps: &ParameterSet,
    prop: &PropagationParams,
    cfg: &GsnnConfig,
) -> Result<DenseRun> {
    cfg.validate()?;
    let n = graph.node_count();
    let hd = prop.hidden_dim;
    let ad = prop.annot_dim;
    let mut annotations = vec![0.0; n * ad];
    for (v, score) in detected_nodes(graph, detections, cfg.detection_threshold)? {
        annotations[v as usize * ad] = if cfg.binarize_annotations {
            f64::from(score >= cfg.detection_threshold)
        } else {
            score
        };
    }
    let mut hidden = vec![0.0; n * hd];
    for v in 0..n {
        for k in 0..ad {
            hidden[v * hd + k] = annotations[v * ad + k];
        }
    }

    let w = prop.gru_weights(ps);
    let mut steps = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let h_prev = hidden.clone();
        let mut agg = vec![0.0; n * hd];
        dense_aggregate(tables, &h_prev, ps, prop, &mut agg);
        let mut z = vec![0.0; n * hd];
        let mut r = vec![0.0; n * hd];
        let mut hc = vec![0.0; n * hd];
        for v in 0..n {
            let span = v * hd..(v + 1) * hd;
            gru_forward_into(
                &h_prev[span.clone()],
                &agg[span.clone()],
                w,
                &mut z[span.clone()],
                &mut r[span.clone()],
                &mut hc[span.clone()],
                &mut hidden[span.clone()],
            )?;
        }
        steps.push(DenseStepTape {
            h_prev,
            agg,
            z,
            r,
            hc,
            h_next: hidden.clone(),
        });
    }

    let od = prop.out_dim;
    let mut outputs = Vec::with_capacity(n * od);
    for v in 0..n {
        let o = node_output(
            ps,
            prop,
            &hidden[v * hd..(v + 1) * hd],
            &annotations[v * ad..(v + 1) * ad],
            v as NodeId,
        )?;
        outputs.extend_from_slice(&o);
    }
    Ok(DenseRun {
        outputs,
        annotations,
        steps,
    })
}

/// Backward through a dense run, seeding from `d_outputs`. Parameter
/// gradients accumulate into `ps`; input gradients are not reported.
pub fn dense_backward(
    tables: &DenseTables,
    run: &DenseRun,
    ps: &mut ParameterSet,
    prop: &PropagationParams,
    d_outputs: &[f64],
) -> Result<()> {
    let n = tables.n;
    let hd = prop.hidden_dim;
    let ad = prop.annot_dim;
    let od = prop.out_dim;
    if d_outputs.len() != n * od {
        return Err(ModelError::Data(format!(
            "d_outputs length {} does not match {} outputs",
            d_outputs.len(),
            n * od
        )));
    }
    let mut d_h = vec![0.0; n * hd];
    let mut d_x = vec![0.0; n * ad];
    let last = run.steps.last().expect("at least one step");
    for v in 0..n {
        node_output_backward(
            ps,
            prop,
            &last.h_next[v * hd..(v + 1) * hd],
            &run.annotations[v * ad..(v + 1) * ad],
            v as NodeId,
            &run.outputs[v * od..(v + 1) * od],
            &d_outputs[v * od..(v + 1) * od],
            &mut d_h[v * hd..(v + 1) * hd],
            &mut d_x[v * ad..(v + 1) * ad],
        );
    }

    for tape in run.steps.iter().rev() {
        let mut d_h_prev = vec![0.0; n * hd];
        let mut d_agg = vec![0.0; n * hd];
        let mut acc = GruGradAccum::zeros(hd);
        {
            let w = prop.gru_weights(ps);
            let mut dh_rest = &mut d_h_prev[..];
            let mut da_rest = &mut d_agg[..];
            for v in 0..n {
                let span = v * hd..(v + 1) * hd;
                let (dh_s, dh_tail) = dh_rest.split_at_mut(hd);
                let (da_s, da_tail) = da_rest.split_at_mut(hd);
                gru_backward(
                    &tape.h_prev[span.clone()],
                    &tape.agg[span.clone()],
                    w,
                    &tape.z[span.clone()],
                    &tape.r[span.clone()],
                    &tape.hc[span.clone()],
                    &d_h[span.clone()],
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

        // The quadratic scan again: each coded pair contributed one message.
        for v in 0..n {
            let row_in = &tables.incoming[v * n..(v + 1) * n];
            let row_out = &tables.outgoing[v * n..(v + 1) * n];
            let da_v = d_agg[v * hd..(v + 1) * hd].to_vec();
            for u in 0..n {
                let code = row_in[u];
                if code != 0 {
                    let et = (code - 1) as usize;
                    let h_u = &tape.h_prev[u * hd..(u + 1) * hd];
                    ps.grad_mut(prop.msg_in[et]).add_outer(&da_v, h_u);
                    let mut dh_u = vec![0.0; hd];
                    ps.value(prop.msg_in[et]).matvec_t_accum(&da_v, &mut dh_u);
                    axpy(&mut d_h_prev[u * hd..(u + 1) * hd], 1.0, &dh_u);
                }
                let code = row_out[u];
                if code != 0 {
                    let et = (code - 1) as usize;
                    let h_u = &tape.h_prev[u * hd..(u + 1) * hd];
                    ps.grad_mut(prop.msg_out[et]).add_outer(&da_v, h_u);
                    let mut dh_u = vec![0.0; hd];
                    ps.value(prop.msg_out[et]).matvec_t_accum(&da_v, &mut dh_u);
                    axpy(&mut d_h_prev[u * hd..(u + 1) * hd], 1.0, &dh_u);
                }
            }
        }
        {
            let db = ps.grad_mut(prop.msg_bias);
            for v in 0..n {
                axpy(db.data_mut(), 1.0, &d_agg[v * hd..(v + 1) * hd]);
            }
        }
        d_h = d_h_prev;
    }
    // Annotation path exists (initial hidden embeds annotations) but dense
    // runs are used as an oracle and benchmark; input grads are dropped.
    let _ = d_x;
    Ok(())
}
