//! Low-data sweep: train each model variant on nested prefixes of the
//! training set and tabulate eval mAP against training-set size.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::kgraph::KnowledgeGraph;
use crate::search::{train, Dataset, GsnnConfig, ModelError, ModelKind, Pipeline, Result, TrainSettings};

use super::evaluate;

#[derive(Debug, Clone)]
pub struct LowdataRow {
    pub size: usize,
    pub kind: ModelKind,
    pub map: f64,
}

/// Halvings of the full size, extended with the fixed small anchors.
pub fn default_lowdata_sizes(full: usize) -> Vec<usize> {
    let mut sizes = vec![full];
    let mut s = full / 2;
    while s >= 1000 {
        sizes.push(s);
        s /= 2;
    }
    for anchor in [1000usize, 500] {
        if anchor <= full {
            sizes.push(anchor);
        }
    }
    sizes.sort_unstable_by(|a, b| b.cmp(a));
    sizes.dedup();
    sizes
}

/// Train every `(size, kind)` combination from a fresh seeded initialization
/// on the first `size` examples, then evaluate on the test set.
///
/// Sizes must be descending and within the training set; the generator's
/// prefix guarantee makes each smaller set a subset of the larger ones.
#[allow(clippy::too_many_arguments)]
pub fn lowdata_sweep(
    graph: &KnowledgeGraph,
    train_data: &Dataset,
    test_data: &Dataset,
    sizes: &[usize],
    kinds: &[ModelKind],
    cfg: &GsnnConfig,
    settings: &TrainSettings,
    seed: u64,
) -> Result<Vec<LowdataRow>> {
    if sizes.is_empty() {
        return Err(ModelError::Data("no sizes requested".into()));
    }
    if sizes.windows(2).any(|w| w[0] <= w[1]) {
        return Err(ModelError::Data(
            "sizes must be strictly descending".into(),
        ));
    }
    if sizes[0] > train_data.len() {
        return Err(ModelError::Data(format!(
            "size {} exceeds the training set ({} examples)",
            sizes[0],
            train_data.len()
        )));
    }
    let mut rows = Vec::new();
    for &size in sizes {
        let subset = Dataset {
            n_det: train_data.n_det,
            d_img: train_data.d_img,
            n_labels: train_data.n_labels,
            examples: train_data.examples[..size].to_vec(),
        };
        for &kind in kinds {
            let mut pipe = Pipeline::new(kind, graph.clone(), cfg.clone(), train_data.d_img, seed)?;
            train(&mut pipe, &subset, settings, seed)?;
            let report = evaluate(&pipe, test_data)?;
            rows.push(LowdataRow {
                size,
                kind,
                map: report.map,
            });
        }
    }
    Ok(rows)
}

pub fn write_lowdata_report(rows: &[LowdataRow], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "size\tmodel\tmap")?;
    for r in rows {
        writeln!(w, "{}\t{}\t{:.6}", r.size, r.kind.as_str(), r.map)?;
    }
    w.flush()?;
    Ok(())
}
