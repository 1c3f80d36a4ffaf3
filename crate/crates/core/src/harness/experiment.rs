use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::data::{class_names, generate_dataset, DatasetSpec, SyntheticDataset};
use super::train::{evaluate_miou, train, EvalPoint, TrainConfig};
use crate::error::{Error, Result};
use crate::fusion::{count_params, estimate_flops, ConvFormerConfig, MacTable, ParamCounts};
use crate::pipeline::{load_text_embeddings, stub_text_encoder, PipelineConfig, SegmentationPipeline, OUTPUT_STRIDE};
use crate::tensor::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Square image side, a multiple of 8 in `32..=128`.
    pub image_size: usize,
    pub train_count: usize,
    pub eval_count: usize,
    pub train_seed: u64,
    pub eval_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            image_size: 48,
            train_count: 400,
            eval_count: 100,
            train_seed: 42,
            eval_seed: 43,
        }
    }
}

/// Everything that determines a training run except the run seed.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub fusion: ConvFormerConfig,
    pub pipeline: PipelineConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    /// Store elapsed seconds in reports. Off makes reports byte-stable.
    pub record_wall_clock: bool,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.fusion.validate()?;
        self.pipeline.validate()?;
        self.train.validate()?;
        self.train_spec().validate()?;
        self.eval_spec().validate()
    }

    pub fn train_spec(&self) -> DatasetSpec {
        DatasetSpec {
            count: self.data.train_count,
            image_size: self.data.image_size,
            classes: self.fusion.classes,
            seed: self.data.train_seed,
        }
    }

    pub fn eval_spec(&self) -> DatasetSpec {
        DatasetSpec {
            count: self.data.eval_count,
            seed: self.data.eval_seed,
            ..self.train_spec()
        }
    }

    pub fn datasets(&self) -> Result<(SyntheticDataset, SyntheticDataset)> {
        Ok((generate_dataset(&self.train_spec())?, generate_dataset(&self.eval_spec())?))
    }

    /// Fusion cost at the score-map resolution of one image.
    pub fn macs(&self) -> MacTable {
        let side = self.data.image_size / OUTPUT_STRIDE;
        estimate_flops(&self.fusion, side, side, self.fusion.classes)
    }
}

/// Fresh pipeline for `cfg`, initialised from `seed`.
pub fn build_pipeline<T: Scalar>(cfg: &ExperimentConfig, seed: u64) -> Result<SegmentationPipeline<T>> {
    cfg.validate()?;
    let names = class_names(cfg.fusion.classes);
    let text = match &cfg.pipeline.text_embeddings {
        Some(path) => {
            let t = load_text_embeddings(Path::new(path))?;
            if t.class_names() != names.as_slice() {
                return Err(Error::Config(format!(
                    "embeddings file classes {:?} do not match dataset classes {names:?}",
                    t.class_names()
                )));
            }
            t
        }
        None => stub_text_encoder(&names, cfg.pipeline.text_channels, cfg.pipeline.text_seed)?,
    };
    SegmentationPipeline::new(&cfg.fusion, &cfg.pipeline, text, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub total: usize,
    pub backbone: usize,
    pub align: usize,
    pub fusion: usize,
    pub decoder: usize,
    /// Closed-form breakdown of the fusion stack.
    pub fusion_breakdown: ParamCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub class_names: Vec<String>,
    /// Mean batch loss per step, step 1 first.
    pub losses: Vec<f64>,
    pub evals: Vec<EvalPoint>,
    pub miou: f64,
    /// `null` for classes absent from both prediction and ground truth.
    pub per_class_iou: Vec<Option<f64>>,
    pub params: ParamSummary,
    /// Fusion and score-map multiply-accumulates per image; 1 MAC = 2 FLOPs.
    pub macs: MacTable,
    pub wall_clock_seconds: Option<f64>,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// `step,loss,miou`, one row per step; `miou` is filled on evaluated steps.
    pub fn loss_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["step", "loss", "miou"])?;
        let mut evals = self.evals.iter().peekable();
        for (i, l) in self.losses.iter().enumerate() {
            let step = i + 1;
            let miou = match evals.peek() {
                Some(e) if e.step == step => evals.next().map(|e| e.miou.to_string()).unwrap_or_default(),
                _ if step == self.losses.len() => self.miou.to_string(),
                _ => String::new(),
            };
            w.write_record([step.to_string(), l.to_string(), miou])?;
        }
        csv_string(w)
    }
}

pub(crate) fn csv_string(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv writer emits UTF-8"))
}

pub fn param_summary<T: Scalar>(p: &SegmentationPipeline<T>) -> ParamSummary {
    ParamSummary {
        total: p.store.numel(""),
        backbone: p.store.numel("backbone."),
        align: p.store.numel("align."),
        fusion: p.store.numel("fusion."),
        decoder: p.store.numel("decoder."),
        fusion_breakdown: count_params(&p.fusion_config),
    }
}

/// Trains one pipeline from `seed` on pre-generated data and evaluates it.
pub fn run_experiment<T: Scalar>(
    cfg: &ExperimentConfig,
    seed: u64,
    train_set: &SyntheticDataset,
    eval_set: &SyntheticDataset,
) -> Result<(SegmentationPipeline<T>, RunReport)> {
    let start = Instant::now();
    let mut p = build_pipeline::<T>(cfg, seed)?;
    let log = train(&mut p, train_set, Some(eval_set), &cfg.train, seed)?;
    let eval = evaluate_miou(&p, eval_set)?;
    let report = RunReport {
        config: cfg.clone(),
        seed,
        class_names: p.text().class_names().to_vec(),
        losses: log.losses,
        evals: log.evals,
        miou: eval.miou,
        per_class_iou: eval.per_class_iou,
        params: param_summary(&p),
        macs: cfg.macs(),
        wall_clock_seconds: cfg.record_wall_clock.then(|| start.elapsed().as_secs_f64()),
    };
    Ok((p, report))
}
