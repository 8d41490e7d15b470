//! Scaling benchmark: forward+backward wall time of the dense all-nodes
//! recurrence versus the budgeted controller, over random graphs of growing
//! size with a fixed expansion budget, plus fitted growth exponents.
//!
//! Absolute times are hardware-bound and never asserted; the exponents are
//! the product.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use crate::numeric::ParameterSet;
use crate::propagation::PropagationParams;
use crate::search::{
    dense_backward, run_dense_with_tables, run_gsnn, run_gsnn_backward, BackwardOptions,
    DenseTables, GsnnConfig, ModelError, Result,
};
use crate::synthdata::random_graph;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchMode {
    Dense,
    Gsnn,
}

impl BenchMode {
    pub fn as_str(self) -> &'static str {
        match self {
            BenchMode::Dense => "dense",
            BenchMode::Gsnn => "gsnn",
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub sizes: Vec<usize>,
    pub modes: Vec<BenchMode>,
    pub trials: usize,
    pub warmup: usize,
    pub expected_degree: f64,
    pub n_edge_types: usize,
    /// How many detections seed each run; fixed so the budget is
    /// size-independent.
    pub n_detections: usize,
    pub seed: u64,
    pub gsnn: GsnnConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            sizes: vec![100, 250, 500, 1000, 2000, 5000],
            modes: vec![BenchMode::Dense, BenchMode::Gsnn],
            trials: 20,
            warmup: 3,
            expected_degree: 6.0,
            n_edge_types: 3,
            n_detections: 5,
            seed: 7,
            gsnn: GsnnConfig::default(),
        }
    }
}

/// One (size, mode) measurement. `capped` marks a configuration that was
/// skipped because the dense tables would not fit.
#[derive(Debug, Clone)]
pub struct TimingRecord {
    pub n: usize,
    pub mode: BenchMode,
    pub mean_s: f64,
    pub std_s: f64,
    pub median_s: f64,
    pub trials: usize,
    pub capped: bool,
}

/// Least-squares slopes of `ln t` against `ln n`, per mode.
#[derive(Debug, Clone, Default)]
pub struct GrowthFit {
    pub dense_exponent: Option<f64>,
    pub gsnn_exponent: Option<f64>,
}

fn fit_exponent(points: &[(usize, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let xs: Vec<f64> = points.iter().map(|&(n, _)| (n as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|&(_, t)| t.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in xs.iter().zip(ys.iter()) {
        num += (x - mx) * (y - my);
        den += (x - mx) * (x - mx);
    }
    (den > 0.0).then(|| num / den)
}

fn summarize(n: usize, mode: BenchMode, mut times: Vec<f64>) -> TimingRecord {
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let trials = times.len();
    let mean = times.iter().sum::<f64>() / trials as f64;
    let var = times.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / trials as f64;
    let median = if trials % 2 == 1 {
        times[trials / 2]
    } else {
        0.5 * (times[trials / 2 - 1] + times[trials / 2])
    };
    TimingRecord {
        n,
        mode,
        mean_s: mean,
        std_s: var.sqrt(),
        median_s: median,
        trials,
        capped: false,
    }
}

/// Time forward+backward per mode and size. Detections seed the same fixed
/// number of nodes at every size, so the budgeted mode's work is bounded by
/// its budget, not by the graph.
pub fn scaling_benchmark(cfg: &BenchConfig) -> Result<(Vec<TimingRecord>, GrowthFit)> {
    if cfg.trials == 0 || cfg.sizes.is_empty() {
        return Err(ModelError::Data("benchmark needs sizes and trials".into()));
    }
    let mut records = Vec::new();
    for &n in &cfg.sizes {
        let graph = random_graph(n, cfg.expected_degree, cfg.n_edge_types, cfg.seed ^ n as u64);
        let mut ps = ParameterSet::new();
        let mut rng = crate::rng::substream(cfg.seed, "bench-init");
        let prop = PropagationParams::init(
            &mut ps,
            &graph,
            cfg.gsnn.hidden_dim,
            cfg.gsnn.annot_dim,
            cfg.gsnn.out_dim,
            &mut rng,
        )?;
        let n_detectable = graph.detectable_nodes().len();
        let mut detections = vec![0.0; n_detectable];
        let stride = (n_detectable / cfg.n_detections.max(1)).max(1);
        for k in 0..cfg.n_detections.min(n_detectable) {
            detections[k * stride % n_detectable] = 0.9;
        }

        for &mode in &cfg.modes {
            match mode {
                BenchMode::Dense => {
                    let tables = match DenseTables::build(&graph) {
                        Ok(t) => t,
                        Err(_) => {
                            records.push(TimingRecord {
                                n,
                                mode,
                                mean_s: f64::NAN,
                                std_s: f64::NAN,
                                median_s: f64::NAN,
                                trials: 0,
                                capped: true,
                            });
                            continue;
                        }
                    };
                    let d_outputs = vec![1.0; n * cfg.gsnn.out_dim];
                    let mut times = Vec::with_capacity(cfg.trials);
                    for trial in 0..cfg.warmup + cfg.trials {
                        ps.zero_grads();
                        let start = Instant::now();
                        let run = run_dense_with_tables(
                            &tables,
                            &graph,
                            &detections,
                            &ps,
                            &prop,
                            &cfg.gsnn,
                        )?;
                        dense_backward(&tables, &run, &mut ps, &prop, &d_outputs)?;
                        let elapsed = start.elapsed().as_secs_f64();
                        if trial >= cfg.warmup {
                            times.push(elapsed);
                        }
                    }
                    records.push(summarize(n, mode, times));
                }
                BenchMode::Gsnn => {
                    let mut times = Vec::with_capacity(cfg.trials);
                    for trial in 0..cfg.warmup + cfg.trials {
                        ps.zero_grads();
                        let start = Instant::now();
                        let run = run_gsnn(&graph, &detections, &ps, &prop, &cfg.gsnn)?;
                        let d_outputs = vec![1.0; run.n_active() * cfg.gsnn.out_dim];
                        run_gsnn_backward(
                            &run,
                            &graph,
                            &mut ps,
                            &prop,
                            &cfg.gsnn,
                            &d_outputs,
                            None,
                            BackwardOptions::default(),
                        )?;
                        let elapsed = start.elapsed().as_secs_f64();
                        if trial >= cfg.warmup {
                            times.push(elapsed);
                        }
                    }
                    records.push(summarize(n, mode, times));
                }
            }
        }
    }
    let collect = |mode: BenchMode| -> Vec<(usize, f64)> {
        records
            .iter()
            .filter(|r| r.mode == mode && !r.capped)
            .map(|r| (r.n, r.median_s))
            .collect()
    };
    let fit = GrowthFit {
        dense_exponent: fit_exponent(&collect(BenchMode::Dense)),
        gsnn_exponent: fit_exponent(&collect(BenchMode::Gsnn)),
    };
    Ok((records, fit))
}

/// Tab-separated timing table plus a key=value summary with the exponents.
pub fn write_timing_report(
    records: &[TimingRecord],
    fit: &GrowthFit,
    table_path: &Path,
    summary_path: &Path,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(table_path)?);
    writeln!(w, "n\tmode\tmean_s\tstd_s\tmedian_s\ttrials\tcapped")?;
    for r in records {
        writeln!(
            w,
            "{}\t{}\t{:.6e}\t{:.6e}\t{:.6e}\t{}\t{}",
            r.n,
            r.mode.as_str(),
            r.mean_s,
            r.std_s,
            r.median_s,
            r.trials,
            u8::from(r.capped)
        )?;
    }
    w.flush()?;
    let mut s = BufWriter::new(File::create(summary_path)?);
    if let Some(e) = fit.dense_exponent {
        writeln!(s, "dense_exponent={e:.4}")?;
    }
    if let Some(e) = fit.gsnn_exponent {
        writeln!(s, "gsnn_exponent={e:.4}")?;
    }
    s.flush()?;
    Ok(())
}
