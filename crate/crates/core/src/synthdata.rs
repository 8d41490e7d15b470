//! Deterministic synthetic data: random typed graphs, a 316-concept graph
//! shaped like a detection vocabulary (80 detectable concepts), and a scene
//! model whose label correlations follow the graph edges so that graph
//! reasoning carries real signal.
//!
//! Reproducibility contract: `(model, seed)` fully determines every byte of
//! output. Each example draws from its own indexed substream, which makes
//! any shorter generated file a byte prefix of a longer one.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::kgraph::{ConceptKind, ConceptNode, KnowledgeGraph, NodeId, TypedEdge};
use crate::numeric::Tensor2;
use crate::rng::{substream, substream_indexed};
use crate::search::{save_dataset, Dataset, Example, ModelError, Result};

/// Scene generation parameters. Labels are seeded independently, then one
/// relaxation pass pulls in graph neighbors; detections are noisy, lossy
/// indicators over the detectable subset; the image feature is a fixed
/// random projection of the label vector plus noise.
#[derive(Debug, Clone)]
pub struct SceneModel {
    pub seed_concept_prob: f64,
    pub neighbor_inclusion_prob: f64,
    pub detection_noise: f64,
    pub detector_miss_rate: f64,
    pub feature_dim: usize,
    pub feature_noise: f64,
}

impl Default for SceneModel {
    fn default() -> Self {
        SceneModel {
            seed_concept_prob: 0.03,
            neighbor_inclusion_prob: 0.4,
            detection_noise: 0.08,
            detector_miss_rate: 0.15,
            feature_dim: 64,
            feature_noise: 2.0,
        }
    }
}

impl SceneModel {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("seed_concept_prob", self.seed_concept_prob),
            ("neighbor_inclusion_prob", self.neighbor_inclusion_prob),
            ("detector_miss_rate", self.detector_miss_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(ModelError::Data(format!(
                    "{name} must be a probability, got {p}"
                )));
            }
        }
        if self.feature_dim == 0 {
            return Err(ModelError::Data("feature_dim must be positive".into()));
        }
        if self.detection_noise < 0.0 || self.feature_noise < 0.0 {
            return Err(ModelError::Data("noise levels must be non-negative".into()));
        }
        Ok(())
    }
}

/// Precomputed lookup state for sampling scenes on one graph.
pub struct SceneContext {
    /// Label index -> indices of label-kind graph neighbors.
    label_neighbors: Vec<Vec<usize>>,
    /// Detector index -> label index.
    pub detector_labels: Vec<usize>,
    /// `feature_dim x n_labels`, fixed per dataset seed.
    projection: Tensor2,
}

impl SceneContext {
    pub fn new(graph: &KnowledgeGraph, model: &SceneModel, dataset_seed: u64) -> Result<Self> {
        model.validate()?;
        let labels = graph.label_nodes();
        if labels.is_empty() {
            return Err(ModelError::Data("graph has no output labels".into()));
        }
        let mut label_index_of = vec![usize::MAX; graph.node_count()];
        for (i, &v) in labels.iter().enumerate() {
            label_index_of[v as usize] = i;
        }
        let mut label_neighbors = Vec::with_capacity(labels.len());
        for &v in labels {
            let nb: Vec<usize> = graph
                .neighbors(v)?
                .into_iter()
                .filter_map(|u| {
                    let i = label_index_of[u as usize];
                    (i != usize::MAX).then_some(i)
                })
                .collect();
            label_neighbors.push(nb);
        }
        let detector_labels = graph
            .detectable_nodes()
            .iter()
            .map(|&v| label_index_of[v as usize])
            .collect();
        let mut proj_rng = substream(dataset_seed, "projection");
        let mut projection = Tensor2::zeros(model.feature_dim, labels.len());
        for v in projection.data_mut() {
            *v = StandardNormal.sample(&mut proj_rng);
        }
        Ok(SceneContext {
            label_neighbors,
            detector_labels,
            projection,
        })
    }

    pub fn n_labels(&self) -> usize {
        self.label_neighbors.len()
    }

    pub fn n_detectors(&self) -> usize {
        self.detector_labels.len()
    }
}

/// Seed labels, then run the single relaxation pass. Returns the seeded set
/// and the final present set.
pub fn sample_labels<R: Rng>(
    ctx: &SceneContext,
    model: &SceneModel,
    rng: &mut R,
) -> (Vec<bool>, Vec<bool>) {
    let n = ctx.n_labels();
    let mut seeded = vec![false; n];
    for s in seeded.iter_mut() {
        *s = rng.random::<f64>() < model.seed_concept_prob;
    }
    let mut present = seeded.clone();
    for (i, _) in seeded.iter().enumerate().filter(|(_, &s)| s) {
        for &j in &ctx.label_neighbors[i] {
            if rng.random::<f64>() < model.neighbor_inclusion_prob {
                present[j] = true;
            }
        }
    }
    (seeded, present)
}

/// Draw one scene: labels, detections, image feature.
pub fn sample_scene<R: Rng>(ctx: &SceneContext, model: &SceneModel, rng: &mut R) -> Example {
    let (_, present) = sample_labels(ctx, model, rng);
    let labels: Vec<f64> = present.iter().map(|&p| f64::from(p)).collect();

    let mut detections = Vec::with_capacity(ctx.n_detectors());
    for &label_idx in &ctx.detector_labels {
        let hit = present[label_idx];
        let missed = rng.random::<f64>() < model.detector_miss_rate;
        let mut score = f64::from(hit && !missed);
        if model.detection_noise > 0.0 {
            let z: f64 = StandardNormal.sample(rng);
            score += model.detection_noise * z;
        }
        detections.push(score.clamp(0.0, 1.0));
    }

    let scale = 1.0 / (ctx.n_labels() as f64).sqrt();
    let mut image_feature = vec![0.0; model.feature_dim];
    ctx.projection.matvec_accum(&labels, &mut image_feature);
    for v in image_feature.iter_mut() {
        *v *= scale;
        if model.feature_noise > 0.0 {
            let z: f64 = StandardNormal.sample(rng);
            *v += model.feature_noise * z;
        }
    }

    Example {
        detections,
        image_feature,
        labels,
    }
}

/// Closed-form per-label marginal of the one-pass relaxation:
/// `P(B) = 1 - (1-s) * prod over neighbors (1 - s*q)`.
pub fn label_marginals(ctx: &SceneContext, model: &SceneModel) -> Vec<f64> {
    let s = model.seed_concept_prob;
    let q = model.neighbor_inclusion_prob;
    (0..ctx.n_labels())
        .map(|b| {
            let degree = ctx.label_neighbors[b].len() as i32;
            1.0 - (1.0 - s) * (1.0 - s * q).powi(degree)
        })
        .collect()
}

/// Paths produced by [`generate_dataset`].
#[derive(Debug, Clone)]
pub struct GeneratedDataset {
    pub train_path: PathBuf,
    pub test_path: PathBuf,
    pub manifest_path: PathBuf,
}

/// Write `<prefix>.train` / `<prefix>.test` plus a `<prefix>.manifest`
/// sidecar. Example `i` draws from substream (`seed`, "train"/"test", `i`),
/// so the first `k` train lines are identical across sizes for one seed.
pub fn generate_dataset(
    graph: &KnowledgeGraph,
    model: &SceneModel,
    n_train: usize,
    n_test: usize,
    seed: u64,
    prefix: &Path,
) -> Result<GeneratedDataset> {
    if n_train == 0 || n_test == 0 {
        return Err(ModelError::Data(
            "n_train and n_test must be at least 1".into(),
        ));
    }
    let ctx = SceneContext::new(graph, model, seed)?;
    let make = |stream: &str, count: usize| -> Dataset {
        let examples = (0..count)
            .map(|i| {
                let mut rng = substream_indexed(seed, stream, i as u64);
                sample_scene(&ctx, model, &mut rng)
            })
            .collect();
        Dataset {
            n_det: ctx.n_detectors(),
            d_img: model.feature_dim,
            n_labels: ctx.n_labels(),
            examples,
        }
    };
    let train = make("train", n_train);
    let test = make("test", n_test);

    let train_path = prefix.with_extension("train");
    let test_path = prefix.with_extension("test");
    save_dataset(&train, &train_path)?;
    save_dataset(&test, &test_path)?;

    let manifest_path = prefix.with_extension("manifest");
    let mut m = BufWriter::new(File::create(&manifest_path)?);
    writeln!(m, "format=gsnn-data-v1")?;
    writeln!(m, "seed={seed}")?;
    writeln!(m, "n_train={n_train}")?;
    writeln!(m, "n_test={n_test}")?;
    writeln!(m, "seed_concept_prob={}", model.seed_concept_prob)?;
    writeln!(m, "neighbor_inclusion_prob={}", model.neighbor_inclusion_prob)?;
    writeln!(m, "detection_noise={}", model.detection_noise)?;
    writeln!(m, "detector_miss_rate={}", model.detector_miss_rate)?;
    writeln!(m, "feature_dim={}", model.feature_dim)?;
    writeln!(m, "feature_noise={}", model.feature_noise)?;
    m.flush()?;
    Ok(GeneratedDataset {
        train_path,
        test_path,
        manifest_path,
    })
}

/// Random directed typed graph with the given expected undirected degree.
/// Every node is an output label; every fourth node is detectable.
pub fn random_graph(
    n: usize,
    expected_degree: f64,
    n_edge_types: usize,
    seed: u64,
) -> KnowledgeGraph {
    assert!(n > 0 && n_edge_types > 0);
    let width = (n.max(2) - 1).to_string().len();
    let nodes: Vec<ConceptNode> = (0..n)
        .map(|i| ConceptNode {
            id: i as NodeId,
            name: format!("n{i:0width$}"),
            kind: ConceptKind::Object,
            is_output_label: true,
            is_detectable: i % 4 == 0,
        })
        .collect();
    let mut rng = substream(seed, "graph");
    let p = if n > 1 {
        (expected_degree / (n - 1) as f64).min(1.0)
    } else {
        0.0
    };
    let mut edges = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            if rng.random::<f64>() < p {
                let etype = rng.random_range(0..n_edge_types) as u16;
                let (src, dst) = if rng.random::<bool>() {
                    (u as NodeId, v as NodeId)
                } else {
                    (v as NodeId, u as NodeId)
                };
                edges.push(TypedEdge {
                    src,
                    dst,
                    edge_type: etype,
                });
            }
        }
    }
    let edge_types = (0..n_edge_types).map(|e| format!("t{e:02}")).collect();
    KnowledgeGraph::from_parts(nodes, edges, edge_types).expect("construction is valid")
}

/// A graph shaped like the detection-vocabulary setting: 316 concepts
/// (216 objects, 100 attributes), 80 of them detectable, with typed
/// object-object relations and object-attribute edges.
pub fn vocab_graph(seed: u64) -> KnowledgeGraph {
    const N_OBJECTS: usize = 216;
    const N_ATTRIBUTES: usize = 100;
    const N_DETECTABLE: usize = 80;
    let mut rng = substream(seed, "vocab-graph");

    let mut nodes = Vec::with_capacity(N_OBJECTS + N_ATTRIBUTES);
    let mut detectable_left = N_DETECTABLE;
    for i in 0..N_OBJECTS {
        // spread detectors across the object range
        let detectable = detectable_left > 0 && i % (N_OBJECTS / N_DETECTABLE) == 0;
        if detectable {
            detectable_left -= 1;
        }
        nodes.push(ConceptNode {
            id: i as NodeId,
            name: format!("object_{i:03}"),
            kind: ConceptKind::Object,
            is_output_label: true,
            is_detectable: detectable,
        });
    }
    for i in 0..N_ATTRIBUTES {
        nodes.push(ConceptNode {
            id: (N_OBJECTS + i) as NodeId,
            name: format!("attribute_{i:02}"),
            kind: ConceptKind::Attribute,
            is_output_label: true,
            is_detectable: false,
        });
    }

    let relation_types = ["has_attribute", "holds", "near", "on", "wearing"];
    let mut seen = std::collections::BTreeSet::new();
    let mut edges = Vec::new();
    // object-object relations, expected degree about 4 among objects
    let target_oo = N_OBJECTS * 2;
    while edges.len() < target_oo {
        let a = rng.random_range(0..N_OBJECTS) as NodeId;
        let b = rng.random_range(0..N_OBJECTS) as NodeId;
        if a == b {
            continue;
        }
        let t = rng.random_range(1..relation_types.len()) as u16;
        if seen.insert((a, b, t)) {
            edges.push(TypedEdge {
                src: a,
                dst: b,
                edge_type: t,
            });
        }
    }
    // each attribute hangs off three random objects
    for i in 0..N_ATTRIBUTES {
        let attr = (N_OBJECTS + i) as NodeId;
        let mut placed = 0;
        while placed < 3 {
            let obj = rng.random_range(0..N_OBJECTS) as NodeId;
            if seen.insert((obj, attr, 0)) {
                edges.push(TypedEdge {
                    src: obj,
                    dst: attr,
                    edge_type: 0,
                });
                placed += 1;
            }
        }
    }
    let edge_types = relation_types.iter().map(|s| s.to_string()).collect();
    KnowledgeGraph::from_parts(nodes, edges, edge_types).expect("construction is valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn test_model() -> SceneModel {
        SceneModel {
            seed_concept_prob: 0.1,
            neighbor_inclusion_prob: 0.5,
            detection_noise: 0.05,
            detector_miss_rate: 0.1,
            feature_dim: 8,
            feature_noise: 0.5,
        }
    }

    #[test]
    fn zero_inclusion_keeps_labels_equal_to_seeds() {
        let g = random_graph(20, 4.0, 2, 1);
        let model = SceneModel {
            neighbor_inclusion_prob: 0.0,
            ..test_model()
        };
        let ctx = SceneContext::new(&g, &model, 7).unwrap();
        let mut rng = substream(7, "scene");
        for _ in 0..200 {
            let (seeded, present) = sample_labels(&ctx, &model, &mut rng);
            assert_eq!(seeded, present);
        }
    }

    #[test]
    fn noiseless_detections_equal_detectable_indicator() {
        let g = random_graph(16, 3.0, 2, 2);
        let model = SceneModel {
            detection_noise: 0.0,
            detector_miss_rate: 0.0,
            ..test_model()
        };
        let ctx = SceneContext::new(&g, &model, 3).unwrap();
        let mut rng = substream(3, "scene");
        for _ in 0..100 {
            let ex = sample_scene(&ctx, &model, &mut rng);
            for (d, &label_idx) in ex.detections.iter().zip(ctx.detector_labels.iter()) {
                assert_eq!(*d, ex.labels[label_idx]);
            }
        }
    }

    #[test]
    fn adjacent_labels_are_positively_correlated() {
        let g = random_graph(20, 4.0, 2, 4);
        let model = SceneModel {
            seed_concept_prob: 0.15,
            neighbor_inclusion_prob: 0.5,
            ..test_model()
        };
        let ctx = SceneContext::new(&g, &model, 5).unwrap();
        let (a, b) = {
            let e = g.edges().first().expect("has edges");
            (e.src as usize, e.dst as usize)
        };
        let mut rng = substream(5, "scene");
        let n = 10_000;
        let (mut cnt_b, mut cnt_a, mut cnt_ab) = (0usize, 0usize, 0usize);
        for _ in 0..n {
            let (_, present) = sample_labels(&ctx, &model, &mut rng);
            if present[b] {
                cnt_b += 1;
            }
            if present[a] {
                cnt_a += 1;
                if present[b] {
                    cnt_ab += 1;
                }
            }
        }
        let p_b = cnt_b as f64 / n as f64;
        let p_b_given_a = cnt_ab as f64 / cnt_a as f64;
        assert!(
            p_b_given_a > p_b + 0.05,
            "P(B|A) = {p_b_given_a:.3} vs P(B) = {p_b:.3}"
        );
    }

    #[test]
    fn marginals_match_closed_form() {
        let g = random_graph(12, 3.0, 2, 6);
        let model = SceneModel {
            seed_concept_prob: 0.12,
            neighbor_inclusion_prob: 0.5,
            ..test_model()
        };
        let ctx = SceneContext::new(&g, &model, 8).unwrap();
        let expect = label_marginals(&ctx, &model);
        let n = 100_000;
        let mut counts = vec![0usize; ctx.n_labels()];
        let mut rng = substream(8, "scene");
        for _ in 0..n {
            let (_, present) = sample_labels(&ctx, &model, &mut rng);
            for (c, &p) in counts.iter_mut().zip(present.iter()) {
                *c += usize::from(p);
            }
        }
        for (i, (&c, &e)) in counts.iter().zip(expect.iter()).enumerate() {
            let got = c as f64 / n as f64;
            assert!(
                (got - e).abs() < 0.02,
                "label {i}: sampled {got:.4}, closed form {e:.4}"
            );
        }
    }

    #[test]
    fn same_seed_produces_identical_bytes() {
        let g = random_graph(10, 3.0, 2, 9);
        let model = test_model();
        let dir = tempfile::tempdir().unwrap();
        let g1 = generate_dataset(&g, &model, 20, 5, 77, &dir.path().join("one")).unwrap();
        let g2 = generate_dataset(&g, &model, 20, 5, 77, &dir.path().join("two")).unwrap();
        assert_eq!(
            std::fs::read(&g1.train_path).unwrap(),
            std::fs::read(&g2.train_path).unwrap()
        );
        assert_eq!(
            std::fs::read(&g1.test_path).unwrap(),
            std::fs::read(&g2.test_path).unwrap()
        );
    }

    #[test]
    fn smaller_train_file_is_a_prefix_of_the_larger() {
        let g = random_graph(10, 3.0, 2, 10);
        let model = test_model();
        let dir = tempfile::tempdir().unwrap();
        let small = generate_dataset(&g, &model, 20, 5, 31, &dir.path().join("small")).unwrap();
        let large = generate_dataset(&g, &model, 50, 5, 31, &dir.path().join("large")).unwrap();
        let small_bytes = std::fs::read(&small.train_path).unwrap();
        let large_bytes = std::fs::read(&large.train_path).unwrap();
        assert!(large_bytes.starts_with(&small_bytes));
    }

    #[test]
    fn train_and_test_streams_differ() {
        let g = random_graph(10, 3.0, 2, 11);
        let model = test_model();
        let dir = tempfile::tempdir().unwrap();
        let out = generate_dataset(&g, &model, 3, 3, 13, &dir.path().join("ds")).unwrap();
        let train = crate::search::load_dataset(&out.train_path).unwrap();
        let test = crate::search::load_dataset(&out.test_path).unwrap();
        assert_ne!(train.examples[0], test.examples[0]);
    }

    #[test]
    fn vocab_graph_has_the_documented_shape() {
        let g = vocab_graph(1);
        assert_eq!(g.node_count(), 316);
        assert_eq!(g.label_nodes().len(), 316);
        assert_eq!(g.detectable_nodes().len(), 80);
        assert_eq!(
            g.nodes()
                .iter()
                .filter(|n| n.kind == ConceptKind::Attribute)
                .count(),
            100
        );
        assert!(g.edge_count() > 500);
        let save_dir = tempfile::tempdir().unwrap();
        let path = save_dir.path().join("vocab.graph");
        crate::kgraph::save_graph(&g, &path).unwrap();
        let loaded = crate::kgraph::load_graph(&path).unwrap();
        assert_eq!(loaded.node_count(), 316);
        assert_eq!(loaded, g);
    }
}
