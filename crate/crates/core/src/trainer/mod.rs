//! Co-finetuning loop: tri-stream batching, fused loss, gradient
//! accumulation, AdamW with warmup and cosine decay, best-checkpoint
//! selection.

mod data;
mod optim;
mod pretrain;

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use data::{
    prepare_all, subsample_indices, subsample_labeled, PreparedSample, PreparedTitle, StreamSampler, TrainData, TriBatch,
    TriBatchSampler,
};
pub use optim::{lr_at, AdamW, AdamWConfig};
pub use pretrain::{pretrain_target, PretrainConfig, PretrainLog};

use crate::autograd::{Gradients, Graph, NodeId, Tensor};
use crate::datagen::Annotation;
use crate::eval::{evaluate, EvalConfig, EvalError, EvalReport};
use crate::loss::{
    co_supervised_node, image_detection_loss, ssl_loss, total_node, ImagePlan, LossBreakdown, LossConfig, LossError,
};
use crate::model::{CftModel, ModelConfig, ModelError, TargetEncoder};
use crate::preprocess::{sample_mask, MaskSpec, PreprocessError, Sample};
use crate::rng::stream_rng;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid schedule: step {step}, total {total}, warmup {warmup}")]
    Schedule { step: usize, total: usize, warmup: usize },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training diverged at step {step}: {what}")]
    Divergence { step: usize, what: String },
    #[error("{0} stream is empty")]
    EmptyStream(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("log: {0}")]
    Log(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub base_lr: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub per_step_batch: usize,
    pub accumulation_steps: usize,
    pub weight_decay: f64,
    pub masking_ratio: f64,
    pub csl_enabled: bool,
    pub ssl_enabled: bool,
    pub seed: u64,
    pub labeled_fraction: f64,
    /// Adds label-stripped training images of every title to the
    /// unlabeled pool.
    pub include_labeled_in_pool: bool,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub eval: EvalConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.4,
            beta: 0.2,
            lambda: 1.0,
            base_lr: 1e-4,
            epochs: 30,
            warmup_epochs: 10,
            per_step_batch: 10,
            accumulation_steps: 10,
            weight_decay: 5e-4,
            masking_ratio: 0.75,
            csl_enabled: true,
            ssl_enabled: true,
            seed: 0,
            labeled_fraction: 1.0,
            include_labeled_in_pool: false,
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn effective_batch(&self) -> usize {
        self.per_step_batch * self.accumulation_steps
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("lambda", self.lambda)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if self.epochs == 0 || self.warmup_epochs > self.epochs {
            return bad(format!("need 0 <= warmup_epochs <= epochs and epochs > 0, got {}/{}", self.warmup_epochs, self.epochs));
        }
        if self.per_step_batch == 0 || self.accumulation_steps == 0 {
            return bad("per_step_batch and accumulation_steps must be positive".into());
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if !(self.masking_ratio > 0.0 && self.masking_ratio <= 1.0) {
            return bad(format!("masking_ratio must lie in (0, 1], got {}", self.masking_ratio));
        }
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction <= 1.0) {
            return bad(format!("labeled_fraction must lie in (0, 1], got {}", self.labeled_fraction));
        }
        self.model.validate()?;
        self.eval.validate()?;
        Ok(())
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// Labeled network input.
#[derive(Clone, Debug)]
pub struct LabeledInput<'a> {
    pub patches: Tensor,
    pub annotations: &'a [Annotation],
}

/// Unlabeled network input with its frozen target latents.
#[derive(Clone, Debug)]
pub struct UnlabeledInput {
    pub patches: Tensor,
    pub latents: Tensor,
}

/// Inputs of one micro-batch; disabled streams are empty.
#[derive(Clone, Debug, Default)]
pub struct MicroBatch<'a> {
    pub downstream: Vec<LabeledInput<'a>>,
    pub cotitle: Vec<LabeledInput<'a>>,
    pub unlabeled: Vec<UnlabeledInput>,
}

/// Every random choice of one micro-batch objective. Replaying a plan makes
/// the objective a deterministic function of the parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepPlan {
    pub downstream: Vec<ImagePlan>,
    pub cotitle: Vec<ImagePlan>,
    pub masks: Vec<MaskSpec>,
}

/// Random streams consumed by the objective.
#[derive(Clone, Debug)]
pub struct StepRngs {
    pub downstream: ChaCha8Rng,
    pub cotitle: ChaCha8Rng,
    pub mask: ChaCha8Rng,
}

impl StepRngs {
    pub fn new(seed: u64) -> Self {
        Self {
            downstream: stream_rng(seed, "plan/downstream"),
            cotitle: stream_rng(seed, "plan/cotitle"),
            mask: stream_rng(seed, "mask"),
        }
    }
}

/// Built objective of one micro-batch.
pub struct StepGraph {
    pub graph: Graph,
    pub root: NodeId,
    pub losses: LossBreakdown,
    pub plan: StepPlan,
    pub mask_decoder_forwards: usize,
}

#[derive(Default)]
struct StageSums {
    cls_rpn: f64,
    loc_rpn: f64,
    cls_head: f64,
    loc_head: f64,
}

/// Mean per-image detection loss over one labeled stream.
#[allow(clippy::too_many_arguments)]
fn stream_loss(
    model: &CftModel,
    g: &mut Graph,
    b: &crate::autograd::Bound,
    inputs: &[LabeledInput],
    cfg: &TrainConfig,
    plans: Option<&[ImagePlan]>,
    rng: &mut ChaCha8Rng,
    used: &mut Vec<ImagePlan>,
    stages: &mut StageSums,
) -> Result<NodeId, TrainError> {
    if let Some(p) = plans {
        if p.len() != inputs.len() {
            return Err(TrainError::Config(format!("plan covers {} images, batch has {}", p.len(), inputs.len())));
        }
    }
    let mut sum = None;
    for (i, x) in inputs.iter().enumerate() {
        let plan = plans.map(|p| &p[i]);
        let (l, p) =
            image_detection_loss(model, g, b, x.patches.clone(), x.annotations, cfg.lambda, &cfg.loss, plan, rng)?;
        stages.cls_rpn += g.scalar(l.rpn.cls);
        stages.loc_rpn += g.scalar(l.rpn.loc);
        if let Some(h) = l.head {
            stages.cls_head += g.scalar(h.cls);
            stages.loc_head += g.scalar(h.loc);
        }
        used.push(p);
        sum = Some(match sum {
            None => l.total,
            Some(s) => g.add(s, l.total),
        });
    }
    let sum = sum.ok_or(TrainError::EmptyStream("labeled micro-batch"))?;
    Ok(g.scale(sum, 1.0 / inputs.len() as f64))
}

/// Builds `l_cft` for one micro-batch. With CSL off `l_co_sup` is the
/// downstream loss node itself and with SSL off `l_cft` is `l_co_sup`, so
/// the disabled terms add no computation at all.
pub fn build_step_graph(
    model: &CftModel,
    cfg: &TrainConfig,
    batch: &MicroBatch,
    plan: Option<&StepPlan>,
    rngs: &mut StepRngs,
) -> Result<StepGraph, TrainError> {
    let mut g = Graph::new();
    let b = g.bind(&model.params, true);
    let mut used = StepPlan::default();
    let mut stages = StageSums::default();
    let l_down = stream_loss(
        model,
        &mut g,
        &b,
        &batch.downstream,
        cfg,
        plan.map(|p| p.downstream.as_slice()),
        &mut rngs.downstream,
        &mut used.downstream,
        &mut stages,
    )?;
    let n = batch.downstream.len() as f64;
    let mut losses = LossBreakdown {
        l_cls_rpn: stages.cls_rpn / n,
        l_loc_rpn: stages.loc_rpn / n,
        l_cls_head: stages.cls_head / n,
        l_loc_head: stages.loc_head / n,
        l_od_downstream: g.scalar(l_down),
        alpha: cfg.alpha,
        beta: cfg.beta,
        lambda: cfg.lambda,
        ..LossBreakdown::default()
    };

    let l_co_sup = if cfg.csl_enabled {
        let l_co = stream_loss(
            model,
            &mut g,
            &b,
            &batch.cotitle,
            cfg,
            plan.map(|p| p.cotitle.as_slice()),
            &mut rngs.cotitle,
            &mut used.cotitle,
            &mut StageSums::default(),
        )?;
        losses.l_od_cotitle = g.scalar(l_co);
        co_supervised_node(&mut g, l_down, l_co, cfg.alpha)?
    } else {
        l_down
    };
    losses.l_co_sup = g.scalar(l_co_sup);

    let mut decoder_forwards = 0;
    let root = if cfg.ssl_enabled {
        if batch.unlabeled.is_empty() {
            return Err(TrainError::EmptyStream("unlabeled micro-batch"));
        }
        if let Some(p) = plan {
            if p.masks.len() != batch.unlabeled.len() {
                return Err(TrainError::Config("mask plan does not match the unlabeled batch".into()));
            }
        }
        let num_patches = cfg.model.student.num_patches();
        let mut sum = None;
        for (i, x) in batch.unlabeled.iter().enumerate() {
            let mask = match plan {
                Some(p) => p.masks[i].clone(),
                None => sample_mask(num_patches, cfg.masking_ratio, &mut rngs.mask)?,
            };
            let tokens = model.student_tokens(&mut g, &b, x.patches.clone(), Some(&mask.masked_indices))?;
            let pred = model.decoder.forward(&mut g, &b, tokens, &mask.masked_indices)?;
            decoder_forwards += 1;
            let mse = ssl_loss(&mut g, pred, &x.latents, &mask)?;
            used.masks.push(mask);
            sum = Some(match sum {
                None => mse,
                Some(s) => g.add(s, mse),
            });
        }
        let mse = g.scale(sum.expect("nonempty"), 1.0 / batch.unlabeled.len() as f64);
        losses.mse_ssl = g.scalar(mse);
        total_node(&mut g, l_co_sup, mse, cfg.beta)?
    } else {
        l_co_sup
    };
    losses.l_cft = g.scalar(root);
    Ok(StepGraph {
        graph: g,
        root,
        losses,
        plan: used,
        mask_decoder_forwards: decoder_forwards,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub micro_batches: usize,
    /// Means over the micro-batches of the update.
    pub losses: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub validation: EvalReport,
    pub is_best: bool,
    pub wall_clock_secs: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub best_epoch: usize,
    pub best_validation_map: f64,
    /// Graph operations by kind plus encoder/decoder forward counts.
    pub op_counts: BTreeMap<String, usize>,
    pub target_checksum_before: Option<String>,
    pub target_checksum_after: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub summary: RunSummary,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LogLine {
    Step(StepRecord),
    Epoch(EpochRecord),
    Summary(RunSummary),
}

impl TrainLog {
    /// Copy with wall-clock fields zeroed, for determinism comparisons.
    pub fn without_timing(&self) -> Self {
        let mut out = self.clone();
        out.epochs.iter_mut().for_each(|e| e.wall_clock_secs = 0.0);
        out
    }

    /// One JSON object per line, tagged by `kind`.
    pub fn write_jsonl(&self, path: &Path) -> Result<(), TrainError> {
        let mut buf = Vec::new();
        let lines = self
            .steps
            .iter()
            .cloned()
            .map(LogLine::Step)
            .chain(self.epochs.iter().cloned().map(LogLine::Epoch))
            .chain(std::iter::once(LogLine::Summary(self.summary.clone())));
        for line in lines {
            serde_json::to_writer(&mut buf, &line)?;
            buf.write_all(b"\n")?;
        }
        crate::fsutil::write_atomic(path, &buf)?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self, TrainError> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut log = TrainLog::default();
        for line in file.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str(&line)? {
                LogLine::Step(s) => log.steps.push(s),
                LogLine::Epoch(e) => log.epochs.push(e),
                LogLine::Summary(s) => log.summary = s,
            }
        }
        Ok(log)
    }
}

/// Best model by validation mAP, the final model and the log.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best: CftModel,
    pub last: CftModel,
    pub log: TrainLog,
}

fn merge_ops(into: &mut BTreeMap<String, usize>, g: &Graph) {
    for (k, v) in g.op_counts() {
        *into.entry((*k).to_string()).or_default() += v;
    }
}

fn check_finite(step: usize, losses: &LossBreakdown, grads: &Gradients) -> Result<(), TrainError> {
    if !losses.is_finite() {
        return Err(TrainError::Divergence {
            step,
            what: format!("non-finite loss (l_cft = {})", losses.l_cft),
        });
    }
    if !grads.grads.iter().all(Tensor::is_finite) {
        return Err(TrainError::Divergence {
            step,
            what: "non-finite gradient".into(),
        });
    }
    Ok(())
}

fn mean_breakdown(parts: &[LossBreakdown]) -> LossBreakdown {
    let k = parts.len() as f64;
    let mut m = LossBreakdown {
        alpha: parts[0].alpha,
        beta: parts[0].beta,
        lambda: parts[0].lambda,
        ..LossBreakdown::default()
    };
    for p in parts {
        m.l_cls_rpn += p.l_cls_rpn / k;
        m.l_loc_rpn += p.l_loc_rpn / k;
        m.l_cls_head += p.l_cls_head / k;
        m.l_loc_head += p.l_loc_head / k;
        m.l_od_downstream += p.l_od_downstream / k;
        m.l_od_cotitle += p.l_od_cotitle / k;
        m.l_co_sup += p.l_co_sup / k;
        m.mse_ssl += p.mse_ssl / k;
        m.l_cft += p.l_cft / k;
    }
    m
}

/// Optimizer-update counts shared by both training loops. Warmup covers
/// the first `warmup_epochs` epochs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Schedule {
    pub total: usize,
    pub warmup: usize,
}

impl Schedule {
    pub fn new(cfg: &TrainConfig, micro_batches_per_epoch: usize) -> Self {
        let updates_per_epoch = micro_batches_per_epoch.div_ceil(cfg.accumulation_steps);
        Self {
            total: updates_per_epoch * cfg.epochs,
            warmup: updates_per_epoch * cfg.warmup_epochs,
        }
    }
}

/// Per-epoch validation and best-model bookkeeping.
struct Validator {
    samples: Vec<Sample>,
    best: Option<(f64, usize, CftModel)>,
}

impl Validator {
    fn new(data: &TrainData) -> Result<Self, TrainError> {
        if data.validation.is_empty() {
            return Err(TrainError::EmptyStream("validation"));
        }
        Ok(Self {
            samples: data.validation.iter().map(PreparedSample::sample).collect(),
            best: None,
        })
    }

    fn run(&mut self, model: &CftModel, cfg: &TrainConfig, epoch: usize, started: Instant) -> Result<EpochRecord, TrainError> {
        let report = evaluate(model, &self.samples, &cfg.eval)?;
        let is_best = self.best.as_ref().is_none_or(|(m, _, _)| report.map > *m);
        if is_best {
            self.best = Some((report.map, epoch, model.clone()));
        }
        Ok(EpochRecord {
            epoch,
            validation: report,
            is_best,
            wall_clock_secs: started.elapsed().as_secs_f64(),
        })
    }
}

fn check_input_size(cfg: &TrainConfig, data: &TrainData) -> Result<(), TrainError> {
    let v = &cfg.model.student;
    let all = data.downstream.iter().chain(&data.validation).chain(&data.cotitle).chain(&data.unlabeled);
    for s in all {
        if (s.width, s.height) != (v.input_width, v.input_height) {
            return Err(TrainError::Config(format!(
                "{} is {}x{} but the model expects {}x{}",
                s.sequence_id, s.width, s.height, v.input_width, v.input_height
            )));
        }
    }
    Ok(())
}

/// Labeled inputs for the given sample indices.
pub fn labeled_inputs<'a>(samples: &'a [PreparedSample], idx: &[usize], cfg: &ModelConfig) -> Result<Vec<LabeledInput<'a>>, TrainError> {
    idx.iter()
        .map(|&i| {
            Ok(LabeledInput {
                patches: samples[i].patches(cfg)?,
                annotations: &samples[i].annotations,
            })
        })
        .collect()
}

/// Runs CFT on prepared data. `target` is required when SSL is enabled
/// and is only ever read.
pub fn train(cfg: &TrainConfig, data: &TrainData, target: Option<&TargetEncoder>) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    check_input_size(cfg, data)?;
    if cfg.ssl_enabled {
        let t = target.ok_or_else(|| TrainError::Config("SSL is enabled but no target encoder was given".into()))?;
        if t.cfg != cfg.model.target {
            return Err(TrainError::Config("target encoder layout differs from the model config".into()));
        }
    }
    let mut model = CftModel::new(cfg.model.clone(), cfg.seed)?;
    let mut sampler = TriBatchSampler::new(data, cfg)?;
    let sched = Schedule::new(cfg, sampler.micro_batches_per_epoch());
    let mut opt = AdamW::new(&model.params, cfg.adamw());
    let mut rngs = StepRngs::new(cfg.seed);
    let mut validator = Validator::new(data)?;
    let mut log = TrainLog::default();
    let mut ops = BTreeMap::new();
    let mut latents: HashMap<usize, Tensor> = HashMap::new();
    let mut target_forwards = 0usize;
    let mut decoder_forwards = 0usize;
    let target_ssl = target.filter(|_| cfg.ssl_enabled);
    let checksum_before = target.map(TargetEncoder::checksum);
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        for group in sampler.epoch().chunks(cfg.accumulation_steps) {
            let lr = lr_at(step, sched.total, sched.warmup, cfg.base_lr)?;
            let mut acc = Gradients::zeros_like(&model.params);
            let mut parts = Vec::with_capacity(group.len());
            for tb in group {
                let mut unlabeled = Vec::with_capacity(tb.unlabeled.len());
                if let Some(t) = target_ssl {
                    for &i in &tb.unlabeled {
                        let patches = data.unlabeled[i].patches(&cfg.model)?;
                        let lat = match latents.get(&i) {
                            Some(l) => l.clone(),
                            None => {
                                let l = t.encode_patches(patches.clone())?;
                                target_forwards += 1;
                                latents.insert(i, l.clone());
                                l
                            }
                        };
                        unlabeled.push(UnlabeledInput { patches, latents: lat });
                    }
                }
                let batch = MicroBatch {
                    downstream: labeled_inputs(&data.downstream, &tb.downstream, &cfg.model)?,
                    cotitle: labeled_inputs(&data.cotitle, &tb.cotitle, &cfg.model)?,
                    unlabeled,
                };
                let sg = build_step_graph(&model, cfg, &batch, None, &mut rngs)?;
                acc.accumulate(&sg.graph.backward(sg.root, &model.params));
                merge_ops(&mut ops, &sg.graph);
                decoder_forwards += sg.mask_decoder_forwards;
                parts.push(sg.losses);
            }
            acc.scale(1.0 / group.len() as f64);
            let losses = mean_breakdown(&parts);
            check_finite(step, &losses, &acc)?;
            opt.step(&mut model.params, &acc, lr);
            log.steps.push(StepRecord {
                step,
                epoch,
                lr,
                micro_batches: group.len(),
                losses,
            });
            step += 1;
        }
        log.epochs.push(validator.run(&model, cfg, epoch, started)?);
    }

    ops.insert("target_encoder_forward".into(), target_forwards);
    ops.insert("mask_decoder_forward".into(), decoder_forwards);
    let (best_map, best_epoch, best) = validator.best.expect("at least one epoch");
    log.summary = RunSummary {
        total_steps: sched.total,
        warmup_steps: sched.warmup,
        best_epoch,
        best_validation_map: best_map,
        op_counts: ops,
        target_checksum_before: checksum_before,
        target_checksum_after: target.map(TargetEncoder::checksum),
    };
    Ok(TrainOutcome { best, last: model, log })
}

/// Plain supervised detector training on the downstream stream only:
/// per-epoch shuffle, mean per-image detection loss, accumulation, AdamW.
pub fn train_supervised(cfg: &TrainConfig, data: &TrainData) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    check_input_size(cfg, data)?;
    if data.downstream.is_empty() {
        return Err(TrainError::EmptyStream("downstream training"));
    }
    let mut model = CftModel::new(cfg.model.clone(), cfg.seed)?;
    let n = data.downstream.len();
    let sched = Schedule::new(cfg, n.div_ceil(cfg.per_step_batch));
    let mut opt = AdamW::new(&model.params, cfg.adamw());
    let mut order_rng = stream_rng(cfg.seed, "batch/downstream");
    let mut plan_rng = stream_rng(cfg.seed, "plan/downstream");
    let mut validator = Validator::new(data)?;
    let mut log = TrainLog::default();
    let mut ops = BTreeMap::new();
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut order_rng);
        let micro: Vec<&[usize]> = order.chunks(cfg.per_step_batch).collect();
        for group in micro.chunks(cfg.accumulation_steps) {
            let lr = lr_at(step, sched.total, sched.warmup, cfg.base_lr)?;
            let mut acc = Gradients::zeros_like(&model.params);
            let mut parts = Vec::with_capacity(group.len());
            for idx in group {
                let mut g = Graph::new();
                let b = g.bind(&model.params, true);
                let mut sum = None;
                let mut stages = StageSums::default();
                for &i in *idx {
                    let s = &data.downstream[i];
                    let (l, _) = image_detection_loss(
                        &model,
                        &mut g,
                        &b,
                        s.patches(&cfg.model)?,
                        &s.annotations,
                        cfg.lambda,
                        &cfg.loss,
                        None,
                        &mut plan_rng,
                    )?;
                    stages.cls_rpn += g.scalar(l.rpn.cls);
                    stages.loc_rpn += g.scalar(l.rpn.loc);
                    if let Some(h) = l.head {
                        stages.cls_head += g.scalar(h.cls);
                        stages.loc_head += g.scalar(h.loc);
                    }
                    sum = Some(match sum {
                        None => l.total,
                        Some(s) => g.add(s, l.total),
                    });
                }
                let k = idx.len() as f64;
                let loss = g.scale(sum.expect("nonempty chunk"), 1.0 / k);
                acc.accumulate(&g.backward(loss, &model.params));
                merge_ops(&mut ops, &g);
                let v = g.scalar(loss);
                parts.push(LossBreakdown {
                    l_cls_rpn: stages.cls_rpn / k,
                    l_loc_rpn: stages.loc_rpn / k,
                    l_cls_head: stages.cls_head / k,
                    l_loc_head: stages.loc_head / k,
                    l_od_downstream: v,
                    l_co_sup: v,
                    l_cft: v,
                    alpha: cfg.alpha,
                    beta: cfg.beta,
                    lambda: cfg.lambda,
                    ..LossBreakdown::default()
                });
            }
            acc.scale(1.0 / group.len() as f64);
            let losses = mean_breakdown(&parts);
            check_finite(step, &losses, &acc)?;
            opt.step(&mut model.params, &acc, lr);
            log.steps.push(StepRecord {
                step,
                epoch,
                lr,
                micro_batches: group.len(),
                losses,
            });
            step += 1;
        }
        log.epochs.push(validator.run(&model, cfg, epoch, started)?);
    }

    let (best_map, best_epoch, best) = validator.best.expect("at least one epoch");
    ops.insert("target_encoder_forward".into(), 0);
    ops.insert("mask_decoder_forward".into(), 0);
    log.summary = RunSummary {
        total_steps: sched.total,
        warmup_steps: sched.warmup,
        best_epoch,
        best_validation_map: best_map,
        op_counts: ops,
        target_checksum_before: None,
        target_checksum_after: None,
    };
    Ok(TrainOutcome { best, last: model, log })
}

/// Writes `best/`, `last/` checkpoints and `train_log.jsonl` under `dir`.
pub fn save_outcome(outcome: &TrainOutcome, dir: &Path) -> Result<(), TrainError> {
    std::fs::create_dir_all(dir)?;
    let steps = outcome.log.steps.len() as u64;
    outcome.best.save(&dir.join("best"), steps)?;
    outcome.last.save(&dir.join("last"), steps)?;
    outcome.log.write_jsonl(&dir.join("train_log.jsonl"))
}

#[cfg(test)]
mod tests;
