//! Bridge-variant and stacking-depth sweeps over a shared dataset.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::experiment::{csv_string, run_experiment, ExperimentConfig, RunReport};
use crate::error::{Error, Result};
use crate::fusion::BridgeVariant;

/// Worker count: `CONVFORMER_THREADS` if set and positive, else the
/// machine's parallelism.
pub fn worker_threads() -> usize {
    std::env::var("CONVFORMER_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

/// Runs every `(config, seed)` job on at most `threads` workers; results come
/// back in job order regardless of scheduling.
pub fn run_many(jobs: &[(ExperimentConfig, u64)], threads: usize) -> Result<Vec<RunReport>> {
    let data: Vec<_> = jobs.iter().map(|(c, _)| c.datasets()).collect::<Result<_>>()?;
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<RunReport>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..threads.clamp(1, jobs.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some((cfg, seed)) = jobs.get(i) else { break };
                let (train, eval) = &data[i];
                let r = run_experiment::<f32>(cfg, *seed, train, eval).map(|(_, r)| r);
                results.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .expect("worker panicked")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub depth: usize,
    pub bridge_variant: Option<BridgeVariant>,
    /// One entry per seed, in seed order.
    pub miou: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl AblationRow {
    fn new(label: &str, depth: usize, bridge_variant: Option<BridgeVariant>, miou: Vec<f64>) -> Self {
        let (mean, std) = mean_std(&miou);
        Self { label: label.into(), depth, bridge_variant, miou, mean, std }
    }
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BridgeAblation {
    pub seeds: Vec<u64>,
    /// Cross-attention, inner product, no-fusion baseline.
    pub rows: Vec<AblationRow>,
    /// Whether cross-attention matched or beat the inner-product bridge on mean mIoU.
    pub cross_attention_ge_inner_product: bool,
    pub reports: Vec<RunReport>,
}

impl BridgeAblation {
    /// Header `variant,depth,seed_<s>...,mean,std`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["variant".to_string(), "depth".into()];
        header.extend(self.seeds.iter().map(|s| format!("seed_{s}")));
        header.extend(["mean".into(), "std".into()]);
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.label.clone(), r.depth.to_string()];
            rec.extend(r.miou.iter().map(f64::to_string));
            rec.extend([r.mean.to_string(), r.std.to_string()]);
            w.write_record(&rec)?;
        }
        csv_string(w)
    }
}

fn check_seeds(seeds: &[u64], min: usize) -> Result<()> {
    if seeds.len() < min {
        return Err(Error::Config(format!("need at least {min} seeds, got {}", seeds.len())));
    }
    Ok(())
}

/// Trains the base config with each bridge variant and as a depth-0
/// baseline. The base depth is used for both fused variants.
pub fn ablate_bridge(base: &ExperimentConfig, seeds: &[u64], threads: usize) -> Result<BridgeAblation> {
    check_seeds(seeds, 2)?;
    if base.fusion.depth == 0 {
        return Err(Error::Config("bridge ablation needs fusion.depth >= 1".into()));
    }
    let variant = |v: BridgeVariant, depth: usize| {
        let mut c = base.clone();
        c.fusion.bridge_variant = v;
        c.fusion.depth = depth;
        c
    };
    let arms = [
        ("cross_attention", variant(BridgeVariant::CrossAttention, base.fusion.depth)),
        ("inner_product", variant(BridgeVariant::InnerProduct, base.fusion.depth)),
        ("no_fusion", variant(base.fusion.bridge_variant, 0)),
    ];
    let jobs: Vec<_> = arms.iter().flat_map(|(_, c)| seeds.iter().map(|&s| (c.clone(), s))).collect();
    let reports = run_many(&jobs, threads)?;
    let rows: Vec<AblationRow> = arms
        .iter()
        .zip(reports.chunks(seeds.len()))
        .map(|((label, c), rs)| {
            let variant = (c.fusion.depth > 0).then_some(c.fusion.bridge_variant);
            AblationRow::new(label, c.fusion.depth, variant, rs.iter().map(|r| r.miou).collect())
        })
        .collect();
    Ok(BridgeAblation {
        seeds: seeds.to_vec(),
        cross_attention_ge_inner_product: rows[0].mean >= rows[1].mean,
        rows,
        reports,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthPoint {
    pub depth: usize,
    pub mean_miou: f64,
    pub std: f64,
    pub macs: u64,
    pub miou: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthAblation {
    pub seeds: Vec<u64>,
    pub points: Vec<DepthPoint>,
    pub reports: Vec<RunReport>,
}

impl DepthAblation {
    /// Header `depth,mean_miou,std,macs`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["depth", "mean_miou", "std", "macs"])?;
        for p in &self.points {
            w.write_record([p.depth.to_string(), p.mean_miou.to_string(), p.std.to_string(), p.macs.to_string()])?;
        }
        csv_string(w)
    }
}

/// One run per `(depth, seed)`; MACs are the fusion plus score-map total.
pub fn ablate_depth(base: &ExperimentConfig, depths: &[usize], seeds: &[u64], threads: usize) -> Result<DepthAblation> {
    check_seeds(seeds, 1)?;
    if depths.is_empty() || depths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!("depths must be non-empty and strictly ascending, got {depths:?}")));
    }
    let configs: Vec<ExperimentConfig> = depths
        .iter()
        .map(|&d| {
            let mut c = base.clone();
            c.fusion.depth = d;
            c
        })
        .collect();
    let jobs: Vec<_> = configs.iter().flat_map(|c| seeds.iter().map(|&s| (c.clone(), s))).collect();
    let reports = run_many(&jobs, threads)?;
    let points = configs
        .iter()
        .zip(reports.chunks(seeds.len()))
        .map(|(c, rs)| {
            let miou: Vec<f64> = rs.iter().map(|r| r.miou).collect();
            let (mean_miou, std) = mean_std(&miou);
            DepthPoint { depth: c.fusion.depth, mean_miou, std, macs: c.macs().total, miou }
        })
        .collect();
    Ok(DepthAblation { seeds: seeds.to_vec(), points, reports })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_sample() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
        assert_eq!(mean_std(&[4.0]), (4.0, 0.0));
    }

    #[test]
    fn argument_checks() {
        let base = ExperimentConfig::default();
        assert!(ablate_bridge(&base, &[1], 1).is_err());
        assert!(ablate_depth(&base, &[2, 1], &[1], 1).is_err());
        assert!(ablate_depth(&base, &[], &[1], 1).is_err());
    }
}
