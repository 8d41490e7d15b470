//! The classification pipeline: per-node graph outputs reordered into a
//! fixed-length feature vector, concatenated with the image feature and the
//! raw detection scores, then a dropout-regularized sigmoid classifier.
//! Includes the two graph-free baselines and the joint training loop.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;

use super::{
    importance_targets, run_gsnn, run_gsnn_backward, BackwardOptions, GsnnConfig, GsnnRun,
    ModelError, Result,
};
use crate::kgraph::{KnowledgeGraph, NodeId};
use crate::numeric::{
    axpy, bce_loss, dropout_backward, dropout_forward, mse_loss, optimizer_step, sigmoid,
    sigmoid_grad_from_output, DropoutMask, DropoutMode, OptimizerConfig, ParamId, ParameterSet,
    Tensor2,
};
use crate::propagation::PropagationParams;
use crate::rng::substream_indexed;

/// One sample: detector scores over the detectable concepts, a surrogate
/// image feature, and the binary label vector over output labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub detections: Vec<f64>,
    pub image_feature: Vec<f64>,
    pub labels: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub n_det: usize,
    pub d_img: usize,
    pub n_labels: usize,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

const DATA_HEADER: &str = "GSNN-DATA v1";

fn write_floats<W: Write>(w: &mut W, values: &[f64]) -> std::io::Result<()> {
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            write!(w, ",")?;
        }
        write!(w, "{v}")?;
    }
    Ok(())
}

/// One example per line: `detections|image_feature|labels`, comma-separated
/// values, after a version header and a dims line.
pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{DATA_HEADER}")?;
    writeln!(w, "dims\t{}\t{}\t{}", ds.n_det, ds.d_img, ds.n_labels)?;
    for ex in &ds.examples {
        write_floats(&mut w, &ex.detections)?;
        write!(w, "|")?;
        write_floats(&mut w, &ex.image_feature)?;
        write!(w, "|")?;
        write_floats(&mut w, &ex.labels)?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

fn parse_floats(s: &str, line: usize, what: &str) -> Result<Vec<f64>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|tok| {
            tok.parse::<f64>().map_err(|_| {
                ModelError::Data(format!("line {line}: bad {what} value {tok:?}"))
            })
        })
        .collect()
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines().enumerate();
    let header = lines
        .next()
        .ok_or_else(|| ModelError::Data("empty dataset file".into()))?
        .1?;
    if header != DATA_HEADER {
        return Err(ModelError::Data(format!(
            "unsupported dataset header {header:?}, expected {DATA_HEADER:?}"
        )));
    }
    let dims_line = lines
        .next()
        .ok_or_else(|| ModelError::Data("missing dims line".into()))?
        .1?;
    let dims: Vec<&str> = dims_line.split('\t').collect();
    if dims.len() != 4 || dims[0] != "dims" {
        return Err(ModelError::Data(format!("bad dims line {dims_line:?}")));
    }
    let parse = |s: &str| -> Result<usize> {
        s.parse()
            .map_err(|_| ModelError::Data(format!("bad dimension {s:?}")))
    };
    let (n_det, d_img, n_labels) = (parse(dims[1])?, parse(dims[2])?, parse(dims[3])?);
    let mut examples = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('|').collect();
        if parts.len() != 3 {
            return Err(ModelError::Data(format!(
                "line {line_no}: expected 3 |-separated sections"
            )));
        }
        let detections = parse_floats(parts[0], line_no, "detection")?;
        let image_feature = parse_floats(parts[1], line_no, "feature")?;
        let labels = parse_floats(parts[2], line_no, "label")?;
        if detections.len() != n_det || image_feature.len() != d_img || labels.len() != n_labels {
            return Err(ModelError::Data(format!(
                "line {line_no}: section lengths {}/{}/{} do not match dims {}/{}/{}",
                detections.len(),
                image_feature.len(),
                labels.len(),
                n_det,
                d_img,
                n_labels
            )));
        }
        if let Some(bad) = labels.iter().find(|l| **l != 0.0 && **l != 1.0) {
            return Err(ModelError::Data(format!(
                "line {line_no}: label {bad} is not a bit"
            )));
        }
        examples.push(Example {
            detections,
            image_feature,
            labels,
        });
    }
    Ok(Dataset {
        n_det,
        d_img,
        n_labels,
        examples,
    })
}

/// Which feature blocks feed the final classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    /// Graph outputs ++ image feature ++ detections.
    Gsnn,
    /// Image feature ++ detections.
    FeatureDet,
    /// Image feature only.
    FeatureOnly,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Gsnn => "gsnn",
            ModelKind::FeatureDet => "feature_det",
            ModelKind::FeatureOnly => "feature_only",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "gsnn" => Some(ModelKind::Gsnn),
            "feature_det" => Some(ModelKind::FeatureDet),
            "feature_only" => Some(ModelKind::FeatureOnly),
            _ => None,
        }
    }
}

/// Reorder per-node outputs into canonical node order, zero-filling inactive
/// nodes, then append the image feature and detection scores.
pub fn assemble_features(
    order: &[NodeId],
    outputs: &[f64],
    out_dim: usize,
    n_nodes: usize,
    image_feature: &[f64],
    detections: &[f64],
) -> Vec<f64> {
    let mut features = vec![0.0; n_nodes * out_dim + image_feature.len() + detections.len()];
    for (p, &v) in order.iter().enumerate() {
        features[v as usize * out_dim..(v as usize + 1) * out_dim]
            .copy_from_slice(&outputs[p * out_dim..(p + 1) * out_dim]);
    }
    let img_at = n_nodes * out_dim;
    features[img_at..img_at + image_feature.len()].copy_from_slice(image_feature);
    features[img_at + image_feature.len()..].copy_from_slice(detections);
    features
}

/// Dropout mask and post-dropout activations saved for backward.
#[derive(Debug, Clone)]
pub struct ClassifyTape {
    pub mask: DropoutMask,
    pub dropped: Vec<f64>,
    pub probs: Vec<f64>,
}

/// Final classifier: dropout (train mode), one linear layer, sigmoid.
pub fn classify<R: Rng>(
    ps: &ParameterSet,
    cls_w: ParamId,
    cls_b: ParamId,
    features: &[f64],
    dropout_rate: f64,
    mode: DropoutMode,
    rng: &mut R,
) -> Result<(Vec<f64>, ClassifyTape)> {
    let w = ps.value(cls_w);
    if features.len() != w.cols() {
        return Err(ModelError::Data(format!(
            "classifier expects {} features, got {}",
            w.cols(),
            features.len()
        )));
    }
    let (dropped, mask) = dropout_forward(features, dropout_rate, mode, rng)?;
    let mut pre = ps.value(cls_b).data().to_vec();
    w.matvec_accum(&dropped, &mut pre);
    let probs: Vec<f64> = pre.into_iter().map(sigmoid).collect();
    Ok((
        probs.clone(),
        ClassifyTape {
            mask,
            dropped,
            probs,
        },
    ))
}

/// Everything one forward pass saves.
#[derive(Debug, Clone)]
pub struct ExampleTape {
    pub run: Option<GsnnRun>,
    pub features: Vec<f64>,
    pub cls: ClassifyTape,
}

/// A complete model: graph, controller configuration, parameters and the
/// classifier head, for one of the three [`ModelKind`]s.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub kind: ModelKind,
    pub graph: KnowledgeGraph,
    pub cfg: GsnnConfig,
    pub d_img: usize,
    pub ps: ParameterSet,
    pub prop: Option<PropagationParams>,
    pub cls_w: ParamId,
    pub cls_b: ParamId,
}

impl Pipeline {
    pub fn new(
        kind: ModelKind,
        graph: KnowledgeGraph,
        cfg: GsnnConfig,
        d_img: usize,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParameterSet::new();
        let mut rng = crate::rng::substream(seed, "init");
        let prop = match kind {
            ModelKind::Gsnn => Some(PropagationParams::init(
                &mut ps,
                &graph,
                cfg.hidden_dim,
                cfg.annot_dim,
                cfg.out_dim,
                &mut rng,
            )?),
            _ => None,
        };
        let n_labels = graph.label_nodes().len();
        let n_det = graph.detectable_nodes().len();
        let feature_len = match kind {
            ModelKind::Gsnn => graph.node_count() * cfg.out_dim + d_img + n_det,
            ModelKind::FeatureDet => d_img + n_det,
            ModelKind::FeatureOnly => d_img,
        };
        if n_labels == 0 {
            return Err(ModelError::Data("graph has no output labels".into()));
        }
        let cls_w = ps.register_uniform("cls.w", n_labels, feature_len, feature_len, &mut rng)?;
        let cls_b = ps.register("cls.b", Tensor2::zeros(n_labels, 1))?;
        Ok(Pipeline {
            kind,
            graph,
            cfg,
            d_img,
            ps,
            prop,
            cls_w,
            cls_b,
        })
    }

    pub fn n_labels(&self) -> usize {
        self.graph.label_nodes().len()
    }

    pub fn n_detectable(&self) -> usize {
        self.graph.detectable_nodes().len()
    }

    pub fn feature_len(&self) -> usize {
        self.ps.value(self.cls_w).cols()
    }

    fn check_example(&self, ex: &Example) -> Result<()> {
        if ex.detections.len() != self.n_detectable()
            || ex.image_feature.len() != self.d_img
            || ex.labels.len() != self.n_labels()
        {
            return Err(ModelError::Data(format!(
                "example dims {}/{}/{} do not match model {}/{}/{}",
                ex.detections.len(),
                ex.image_feature.len(),
                ex.labels.len(),
                self.n_detectable(),
                self.d_img,
                self.n_labels()
            )));
        }
        Ok(())
    }

    fn features_for(&self, ex: &Example, run: Option<&GsnnRun>) -> Vec<f64> {
        match self.kind {
            ModelKind::Gsnn => {
                let run = run.expect("graph model forward produces a run");
                assemble_features(
                    &run.trace.order,
                    &run.outputs,
                    self.cfg.out_dim,
                    self.graph.node_count(),
                    &ex.image_feature,
                    &ex.detections,
                )
            }
            ModelKind::FeatureDet => {
                let mut f = ex.image_feature.clone();
                f.extend_from_slice(&ex.detections);
                f
            }
            ModelKind::FeatureOnly => ex.image_feature.clone(),
        }
    }

    pub fn forward<R: Rng>(
        &self,
        ex: &Example,
        mode: DropoutMode,
        rng: &mut R,
    ) -> Result<(Vec<f64>, ExampleTape)> {
        self.check_example(ex)?;
        let run = match self.kind {
            ModelKind::Gsnn => {
                let prop = self.prop.as_ref().expect("graph model has prop params");
                Some(run_gsnn(&self.graph, &ex.detections, &self.ps, prop, &self.cfg)?)
            }
            _ => None,
        };
        let features = self.features_for(ex, run.as_ref());
        let (probs, cls) = classify(
            &self.ps,
            self.cls_w,
            self.cls_b,
            &features,
            self.cfg.dropout_rate,
            mode,
            rng,
        )?;
        Ok((probs, ExampleTape { run, features, cls }))
    }

    /// Eval-mode probabilities; deterministic, no dropout.
    pub fn predict(&self, ex: &Example) -> Result<Vec<f64>> {
        let mut rng = crate::rng::substream(0, "eval");
        Ok(self.forward(ex, DropoutMode::Eval, &mut rng)?.0)
    }

    /// Backward from `d_probs` (and optional per-round importance-score
    /// gradients). Parameter gradients accumulate into the set; returns the
    /// input-side gradients the sensitivity analysis needs.
    pub fn backward(
        &mut self,
        ex: &Example,
        tape: &ExampleTape,
        d_probs: &[f64],
        d_scores: Option<&[Vec<f64>]>,
        opts: BackwardOptions,
    ) -> Result<PipelineBackward> {
        let n_labels = self.n_labels();
        if d_probs.len() != n_labels {
            return Err(ModelError::Data(format!(
                "d_probs length {} does not match {n_labels} labels",
                d_probs.len()
            )));
        }
        let d_pre: Vec<f64> = d_probs
            .iter()
            .zip(tape.cls.probs.iter())
            .map(|(&d, &p)| d * sigmoid_grad_from_output(p))
            .collect();
        self.ps.grad_mut(self.cls_w).add_outer(&d_pre, &tape.cls.dropped);
        axpy(self.ps.grad_mut(self.cls_b).data_mut(), 1.0, &d_pre);
        let mut d_dropped = vec![0.0; tape.cls.dropped.len()];
        self.ps
            .value(self.cls_w)
            .matvec_t_accum(&d_pre, &mut d_dropped);
        let d_features = dropout_backward(&tape.cls.mask, &d_dropped);

        let mut out = PipelineBackward {
            d_detections: vec![0.0; self.n_detectable()],
            d_states: None,
        };
        match self.kind {
            ModelKind::FeatureOnly => {}
            ModelKind::FeatureDet => {
                if opts.want_detection_grads {
                    out.d_detections
                        .copy_from_slice(&d_features[self.d_img..]);
                }
            }
            ModelKind::Gsnn => {
                let run = tape.run.as_ref().ok_or_else(|| {
                    ModelError::Data("tape is missing the controller run".into())
                })?;
                let od = self.cfg.out_dim;
                let mut d_outputs = vec![0.0; run.n_active() * od];
                for (p, &v) in run.trace.order.iter().enumerate() {
                    d_outputs[p * od..(p + 1) * od]
                        .copy_from_slice(&d_features[v as usize * od..(v as usize + 1) * od]);
                }
                let prop = self.prop.clone().expect("graph model has prop params");
                let gb = run_gsnn_backward(
                    run,
                    &self.graph,
                    &mut self.ps,
                    &prop,
                    &self.cfg,
                    &d_outputs,
                    d_scores,
                    opts,
                )?;
                if opts.want_detection_grads {
                    let det_at = self.graph.node_count() * od + self.d_img;
                    for (i, d) in out.d_detections.iter_mut().enumerate() {
                        *d = d_features[det_at + i] + gb.d_detections[i];
                    }
                }
                out.d_states = gb.d_states;
            }
        }
        let _ = ex;
        Ok(out)
    }
}

/// Input-side gradients of one pipeline backward pass.
#[derive(Debug, Clone, Default)]
pub struct PipelineBackward {
    /// d loss / d detection scores, combining the direct feature block and
    /// the annotation path through the graph.
    pub d_detections: Vec<f64>,
    /// Per-state hidden gradients when requested (graph models only).
    pub d_states: Option<Vec<Vec<f64>>>,
}

/// Optimizer assignment and schedule for a training run.
#[derive(Debug, Clone)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    /// Applied to the propagation/output/importance parameters.
    pub adam: OptimizerConfig,
    /// Applied to the final classifier.
    pub sgd: OptimizerConfig,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            epochs: 20,
            batch_size: 16,
            adam: OptimizerConfig::adam_default(),
            sgd: OptimizerConfig::sgd_default(),
        }
    }
}

/// Mean losses over whatever unit they were aggregated on.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepLosses {
    pub bce: f64,
    pub importance: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub epoch_losses: Vec<StepLosses>,
}

/// One optimizer step over a batch: forward and backward per example,
/// gradients averaged, Adam on the graph-side parameters and SGD with
/// momentum on the classifier.
pub fn train_step<R: Rng>(
    pipe: &mut Pipeline,
    batch: &[Example],
    settings: &TrainSettings,
    epoch: usize,
    dropout_rng: &mut R,
) -> Result<StepLosses> {
    if batch.is_empty() {
        return Err(ModelError::Data("empty training batch".into()));
    }
    pipe.ps.zero_grads();
    let mut sums = StepLosses::default();
    for ex in batch {
        let (probs, tape) = pipe.forward(ex, DropoutMode::Train, dropout_rng)?;
        let (bce, d_probs) = bce_loss(&probs, &ex.labels)?;
        let mut imp_loss = 0.0;
        let mut d_scores: Option<Vec<Vec<f64>>> = None;
        if let (ModelKind::Gsnn, Some(run)) = (pipe.kind, tape.run.as_ref()) {
            let label_nodes: Vec<NodeId> = pipe
                .graph
                .label_nodes()
                .iter()
                .zip(ex.labels.iter())
                .filter(|(_, &l)| l == 1.0)
                .map(|(&v, _)| v)
                .collect();
            if !label_nodes.is_empty() && !run.trace.rounds.is_empty() {
                let targets = importance_targets(
                    &pipe.graph,
                    &label_nodes,
                    pipe.cfg.importance_discount,
                    pipe.cfg.importance_max_hops,
                )?;
                let lambda = pipe.cfg.importance_weight;
                let mut grads = Vec::with_capacity(run.trace.rounds.len());
                for round in &run.trace.rounds {
                    let wanted: Vec<f64> = run.trace.order[..round.n_scored]
                        .iter()
                        .map(|&v| targets[v as usize])
                        .collect();
                    let (l, mut g) = mse_loss(&round.scores, &wanted)?;
                    imp_loss += l;
                    for gi in &mut g {
                        *gi *= lambda;
                    }
                    grads.push(g);
                }
                d_scores = Some(grads);
            }
        }
        let total = bce + pipe.cfg.importance_weight * imp_loss;
        if !total.is_finite() {
            return Err(ModelError::Numeric(crate::numeric::NumericError::NonFinite {
                stage: "train_step loss",
            }));
        }
        sums.bce += bce;
        sums.importance += imp_loss;
        sums.total += total;
        pipe.backward(
            ex,
            &tape,
            &d_probs,
            d_scores.as_deref(),
            BackwardOptions::default(),
        )?;
    }
    let scale = 1.0 / batch.len() as f64;
    pipe.ps.scale_grads(scale);
    if let Some(prop) = pipe.prop.clone() {
        optimizer_step(&mut pipe.ps, &prop.param_ids(), &settings.adam, epoch)?;
    }
    optimizer_step(
        &mut pipe.ps,
        &[pipe.cls_w, pipe.cls_b],
        &settings.sgd,
        epoch,
    )?;
    Ok(StepLosses {
        bce: sums.bce * scale,
        importance: sums.importance * scale,
        total: sums.total * scale,
    })
}

/// Full training loop: seeded epoch shuffles, fixed-size batches, per-epoch
/// mean losses.
pub fn train(
    pipe: &mut Pipeline,
    data: &Dataset,
    settings: &TrainSettings,
    seed: u64,
) -> Result<TrainLog> {
    if data.is_empty() {
        return Err(ModelError::Data("empty training dataset".into()));
    }
    if settings.batch_size == 0 {
        return Err(ModelError::Data("batch_size must be at least 1".into()));
    }
    let mut log = TrainLog::default();
    let mut indices: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..settings.epochs {
        let mut shuffle_rng = substream_indexed(seed, "shuffle", epoch as u64);
        rand::seq::SliceRandom::shuffle(&mut indices[..], &mut shuffle_rng);
        let mut dropout_rng = substream_indexed(seed, "dropout", epoch as u64);
        let mut epoch_sums = StepLosses::default();
        let mut seen = 0usize;
        for chunk in indices.chunks(settings.batch_size) {
            let batch: Vec<Example> = chunk.iter().map(|&i| data.examples[i].clone()).collect();
            let losses = train_step(pipe, &batch, settings, epoch, &mut dropout_rng)?;
            epoch_sums.bce += losses.bce * batch.len() as f64;
            epoch_sums.importance += losses.importance * batch.len() as f64;
            epoch_sums.total += losses.total * batch.len() as f64;
            seen += batch.len();
        }
        let scale = 1.0 / seen as f64;
        log.epoch_losses.push(StepLosses {
            bce: epoch_sums.bce * scale,
            importance: epoch_sums.importance * scale,
            total: epoch_sums.total * scale,
        });
    }
    Ok(log)
}
