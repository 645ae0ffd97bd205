//! Training loops: single-task, multi-task with temperature-based task
//! sampling, deterministic evaluation, and metrics rows. Module weights and
//! mask scores update at separate learning rates; masks are re-binarized
//! from the live scores on every step and frozen once after the loop.

pub mod ablation;
pub mod optim;

pub use ablation::{
    budget_match, budget_match_modes, run_ablation, sweep_size, sweep_sparsity, AblationMode,
    AblationReport, AblationRow, ModeBudget, SweepPoint, ALL_ABLATION_MODES,
};
pub use optim::{decays, Optimizer, OptimizerKind};

use crate::autodiff::Graph;
use crate::backbone::{
    encode, init_backbone, BackboneWeights, EncodeOptions, EncodeOut, MaskFeed, ParamRef,
    TransformerConfig,
};
use crate::error::{Error, Result};
use crate::masking::BinaryMask;
use crate::petl::{AttachMode, AttachmentPath, ProPetlAttachment};
use crate::tasks::{Example, Task, TaskSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

/// Seed for the one-off mask draw used when evaluating a random-mask model
/// that has not frozen its masks yet; keeps evaluation deterministic.
const EVAL_MASK_SEED: u64 = 0xE7A1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    Constant,
    Linear,
}

impl Schedule {
    /// Learning-rate factor at `step` of `total`.
    fn factor(self, step: usize, total: usize) -> f64 {
        match self {
            Schedule::Constant => 1.0,
            Schedule::Linear => 1.0 - step as f64 / total as f64,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Schedule::Constant => "constant",
            Schedule::Linear => "linear",
        }
    }
}

impl std::str::FromStr for Schedule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Schedule::Constant),
            "linear" => Ok(Schedule::Linear),
            other => Err(Error::config(format!("unknown schedule {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Learning rate for prototype weights, heads, and the backbone.
    pub lambda_p: f64,
    /// Learning rate for mask scores; zero freezes the masks at their
    /// initial top-k.
    pub lambda_m: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub schedule: Schedule,
    pub seed: u64,
    /// Evaluate on the validation split every this many steps; 0 evaluates
    /// only once after training.
    pub eval_every: usize,
    pub eval_batch: usize,
    /// Unfreeze the whole backbone (full fine-tuning).
    pub train_backbone: bool,
    /// Record wall-clock milliseconds in metrics rows; off by default so
    /// reruns produce byte-identical output.
    pub record_walltime: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_p: 1e-4,
            lambda_m: 3e-3,
            steps: 100,
            batch_size: 16,
            optimizer: OptimizerKind::adamw(),
            schedule: Schedule::Constant,
            seed: 0,
            eval_every: 0,
            eval_batch: 64,
            train_backbone: false,
            record_walltime: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_p.is_finite() && self.lambda_p > 0.0) {
            return Err(Error::config("lambda_p must be finite and > 0"));
        }
        if !(self.lambda_m.is_finite() && self.lambda_m >= 0.0) {
            return Err(Error::config("lambda_m must be finite and >= 0"));
        }
        if self.steps == 0 {
            return Err(Error::config("steps must be >= 1"));
        }
        if self.batch_size == 0 || self.eval_batch == 0 {
            return Err(Error::config("batch sizes must be >= 1"));
        }
        self.optimizer.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub task: usize,
    pub split: &'static str,
    pub loss: f64,
    pub accuracy: f64,
    /// Mean mask density per layer; 1.0 for mask-free runs.
    pub densities: Vec<f64>,
    pub wall_ms: u64,
}

pub const METRICS_VERSION_LINE: &str = "# metrics-v1";

pub fn metrics_csv(rows: &[MetricsRow], layers: usize) -> String {
    let mut out = String::new();
    out.push_str(METRICS_VERSION_LINE);
    out.push('\n');
    out.push_str("step,task,split,loss,accuracy");
    for l in 0..layers {
        write!(out, ",density_l{l}").unwrap();
    }
    out.push_str(",wall_ms\n");
    for r in rows {
        write!(out, "{},{},{},{},{}", r.step, r.task, r.split, r.loss, r.accuracy).unwrap();
        for l in 0..layers {
            let d = r.densities.get(l).copied().unwrap_or(1.0);
            write!(out, ",{d}").unwrap();
        }
        writeln!(out, ",{}", r.wall_ms).unwrap();
    }
    out
}

pub fn write_metrics(rows: &[MetricsRow], layers: usize, path: &Path) -> Result<()> {
    std::fs::write(path, metrics_csv(rows, layers))?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub rows: Vec<MetricsRow>,
    pub final_train_loss: f64,
    /// (loss, accuracy) of the retained best-validation snapshot.
    pub best_valid: Option<(f64, f64)>,
    /// (loss, accuracy) on the validation split after training, with the
    /// frozen final masks.
    pub final_valid: Option<(f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct MultiTrainReport {
    pub rows: Vec<MetricsRow>,
    pub best_mean_valid_acc: Option<f64>,
    /// Per-task (loss, accuracy) after training.
    pub final_valid: Vec<(f64, f64)>,
}

/// Weights blowing up mid-run surface as a divergence with the step index.
fn step_err(step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { op } => {
            Error::Divergence { step, msg: format!("non-finite values in {op}") }
        }
        other => other,
    }
}

fn nll_row(logits: &[f32], label: usize) -> f64 {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x as f64));
    let sum: f64 = logits.iter().map(|&x| (x as f64 - max).exp()).sum();
    sum.ln() - (logits[label] as f64 - max)
}

/// Ties resolve to the lowest index.
fn argmax_row(logits: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in logits.iter().enumerate().skip(1) {
        if x > logits[best] {
            best = i;
        }
    }
    best
}

fn batch_stats(logits: &[f32], classes: usize, labels: &[usize]) -> (f64, f64) {
    let mut nll = 0.0;
    let mut correct = 0usize;
    for (r, &label) in labels.iter().enumerate() {
        let row = &logits[r * classes..(r + 1) * classes];
        nll += nll_row(row, label);
        correct += (argmax_row(row) == label) as usize;
    }
    (nll / labels.len() as f64, correct as f64 / labels.len() as f64)
}

/// Fixed per-layer masks for inference, or `None` for mask-free modes.
fn inference_masks(
    att: &ProPetlAttachment,
    task: Option<usize>,
) -> Result<Option<Vec<Vec<BinaryMask>>>> {
    match att.mode {
        AttachMode::OnlyShare => Ok(None),
        AttachMode::RandomMask if att.frozen_layer_masks.is_none() => {
            let mut rng = ChaCha8Rng::seed_from_u64(EVAL_MASK_SEED);
            Ok(Some(att.sample_random_masks(&mut rng)))
        }
        _ => {
            let task = if att.num_tasks() > 0 { task } else { None };
            let mut per_layer = Vec::with_capacity(att.num_layers);
            for l in 0..att.num_layers {
                per_layer.push(
                    att.eval_masks(l, task)?
                        .expect("masked modes always yield inference masks"),
                );
            }
            Ok(Some(per_layer))
        }
    }
}

/// Mean loss and accuracy over `examples`, deterministic and independent of
/// `batch` because every sequence is encoded independently and per-example
/// losses accumulate in dataset order.
pub fn evaluate(
    backbone: &BackboneWeights,
    attachment: Option<&ProPetlAttachment>,
    task_id: usize,
    examples: &[Example],
    batch: usize,
) -> Result<(f64, f64)> {
    if examples.is_empty() {
        return Err(Error::invalid("evaluate", "no examples"));
    }
    if batch == 0 {
        return Err(Error::invalid("evaluate", "batch must be >= 1"));
    }
    let classes = *backbone
        .cfg
        .num_classes
        .get(task_id)
        .ok_or_else(|| Error::invalid("evaluate", "task id outside heads"))?;
    if let Some(&bad) = examples.iter().map(|e| &e.label).find(|&&l| l >= classes) {
        return Err(Error::invalid("evaluate", format!("label {bad} outside {classes} classes")));
    }
    let fixed = match attachment {
        Some(att) => inference_masks(att, Some(task_id))?,
        None => None,
    };
    let mut nll = 0.0f64;
    let mut correct = 0usize;
    for chunk in examples.chunks(batch) {
        let tokens: Vec<Vec<usize>> = chunk.iter().map(|e| e.tokens.clone()).collect();
        let feed = match &fixed {
            Some(per_layer) => MaskFeed::Fixed(per_layer),
            None => MaskFeed::Unmasked,
        };
        let out = encode(backbone, attachment, &tokens, &EncodeOptions::eval(task_id, feed))?;
        let logits = out.graph.value(out.logits);
        for (r, ex) in chunk.iter().enumerate() {
            let row = &logits[r * classes..(r + 1) * classes];
            nll += nll_row(row, ex.label);
            correct += (argmax_row(row) == ex.label) as usize;
        }
    }
    let n = examples.len() as f64;
    Ok((nll / n, correct as f64 / n))
}

/// Normalized sampling weights: size shares flattened by the temperature,
/// `q_i = p_i^(1/temperature) / sum_j p_j^(1/temperature)`.
pub fn task_probabilities(sizes: &[usize], temperature: f64) -> Result<Vec<f64>> {
    if sizes.is_empty() {
        return Err(Error::invalid("task_probabilities", "no tasks"));
    }
    if sizes.iter().any(|&s| s == 0) {
        return Err(Error::invalid("task_probabilities", "every task needs examples"));
    }
    if !(temperature.is_finite() && temperature >= 1.0) {
        return Err(Error::invalid("task_probabilities", "temperature must be >= 1"));
    }
    let total: f64 = sizes.iter().map(|&s| s as f64).sum();
    let mut q: Vec<f64> = sizes.iter().map(|&s| (s as f64 / total).powf(1.0 / temperature)).collect();
    let z: f64 = q.iter().sum();
    for v in &mut q {
        *v /= z;
    }
    Ok(q)
}

pub fn sample_task_index(probs: &[f64], rng: &mut impl Rng) -> usize {
    let r: f64 = rng.random();
    let mut cum = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        cum += p;
        if r < cum {
            return i;
        }
    }
    probs.len() - 1
}

fn mean_density(masks: &[BinaryMask]) -> f64 {
    let (ones, total) = masks
        .iter()
        .fold((0u64, 0u64), |(o, t), m| (o + m.popcount() as u64, t + m.numel() as u64));
    ones as f64 / total as f64
}

fn step_densities(
    att: Option<&ProPetlAttachment>,
    step_masks: Option<&Vec<Vec<BinaryMask>>>,
    layers: usize,
) -> Vec<f64> {
    match (att, step_masks) {
        (_, Some(per_layer)) => per_layer.iter().map(|m| mean_density(m)).collect(),
        (Some(a), None) if a.mode != AttachMode::OnlyShare => (0..a.num_layers)
            .map(|l| a.layer_masks(l).map(|m| mean_density(&m)).unwrap_or(1.0))
            .collect(),
        _ => vec![1.0; layers],
    }
}

/// Learning rate group for a parameter: mask scores move at `lambda_m`,
/// everything else at `lambda_p`.
fn base_lr(cfg: &TrainConfig, param: ParamRef) -> f64 {
    match param {
        ParamRef::Attach(AttachmentPath::LayerScore { .. })
        | ParamRef::Attach(AttachmentPath::TaskScore { .. }) => cfg.lambda_m,
        _ => cfg.lambda_p,
    }
}

fn apply_grads(
    backbone: &mut BackboneWeights,
    mut attachment: Option<&mut ProPetlAttachment>,
    graph: &Graph,
    params: &[(ParamRef, crate::autodiff::NodeId)],
    opt: &mut Optimizer,
    cfg: &TrainConfig,
    lr_scale: f64,
) -> Result<()> {
    for &(pref, node) in params {
        let Some(grad) = graph.grad(node) else { continue };
        let lr = base_lr(cfg, pref);
        if lr == 0.0 {
            continue;
        }
        let tensor = match pref {
            ParamRef::Backbone { idx } => backbone.tensor_mut(idx),
            ParamRef::HeadW { task } => &mut backbone.heads[task].w,
            ParamRef::HeadB { task } => &mut backbone.heads[task].b,
            ParamRef::Attach(path) => attachment
                .as_deref_mut()
                .expect("attachment parameter in a run without an attachment")
                .tensor_at_mut(path),
        };
        opt.step(pref, tensor, grad, lr * lr_scale, decays(pref))?;
    }
    Ok(())
}

struct Snapshot {
    att: Option<ProPetlAttachment>,
    heads: Vec<crate::backbone::ClassifierHead>,
    backbone: Option<BackboneWeights>,
}

fn take_snapshot(
    backbone: &BackboneWeights,
    attachment: Option<&ProPetlAttachment>,
    full: bool,
) -> Snapshot {
    Snapshot {
        att: attachment.cloned(),
        heads: backbone.heads.clone(),
        backbone: full.then(|| backbone.clone()),
    }
}

fn restore_snapshot(
    snap: Snapshot,
    backbone: &mut BackboneWeights,
    attachment: Option<&mut ProPetlAttachment>,
) {
    if let Some(full) = snap.backbone {
        *backbone = full;
    } else {
        backbone.heads = snap.heads;
    }
    if let (Some(dst), Some(src)) = (attachment, snap.att) {
        *dst = src;
    }
}

/// Train one task. `attachment: None` fine-tunes the backbone and head only
/// (set `cfg.train_backbone` for the full model). With an attachment, the
/// prototype, scores, and head train while the backbone stays frozen unless
/// `cfg.train_backbone` is set. Returns per-step metrics; the weights left
/// in place are the best-validation snapshot when periodic evaluation ran.
pub fn train_single_task(
    backbone: &mut BackboneWeights,
    mut attachment: Option<&mut ProPetlAttachment>,
    task_id: usize,
    task: &Task,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if let Some(att) = attachment.as_deref() {
        if att.num_tasks() > 0 {
            return Err(Error::config(
                "attachment carries task masks; use the multi-task trainer",
            ));
        }
    }
    let classes = *backbone
        .cfg
        .num_classes
        .get(task_id)
        .ok_or_else(|| Error::config(format!("task {task_id} has no classifier head")))?;
    if classes != task.num_classes {
        return Err(Error::config(format!(
            "head has {classes} classes, task {} has {}",
            task.name, task.num_classes
        )));
    }
    if task.train.is_empty() {
        return Err(Error::config("empty train split"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer)?;
    let layers = backbone.cfg.layers;
    let mut rows = Vec::new();
    let mut best: Option<(f64, f64, Snapshot)> = None; // (acc, loss, weights)
    let mut final_train_loss = f64::NAN;

    for step in 0..cfg.steps {
        let t0 = cfg.record_walltime.then(Instant::now);
        let idx: Vec<usize> =
            (0..cfg.batch_size).map(|_| rng.random_range(0..task.train.len())).collect();
        let tokens: Vec<Vec<usize>> = idx.iter().map(|&i| task.train[i].tokens.clone()).collect();
        let labels: Vec<usize> = idx.iter().map(|&i| task.train[i].label).collect();

        let step_masks = match attachment.as_deref() {
            Some(att) if att.mode == AttachMode::RandomMask => {
                Some(att.sample_random_masks(&mut rng))
            }
            _ => None,
        };
        let densities = step_densities(attachment.as_deref(), step_masks.as_ref(), layers);

        let feed = match (attachment.as_deref(), &step_masks) {
            (_, Some(masks)) => MaskFeed::Fixed(masks),
            (Some(att), None) if att.mode != AttachMode::OnlyShare => MaskFeed::FromScores,
            _ => MaskFeed::Unmasked,
        };
        let opts = EncodeOptions {
            task_id,
            masks: feed,
            train_modules: attachment.is_some(),
            train_head: true,
            train_backbone: cfg.train_backbone,
        };
        let EncodeOut { mut graph, logits, params } =
            encode(backbone, attachment.as_deref(), &tokens, &opts).map_err(|e| step_err(step, e))?;
        let loss_node = graph.cross_entropy(logits, &labels).map_err(|e| step_err(step, e))?;
        let loss = graph.scalar_f64(loss_node);
        if !loss.is_finite() {
            return Err(Error::Divergence { step, msg: format!("loss became {loss}") });
        }
        let (_, acc) = batch_stats(graph.value(logits), classes, &labels);
        graph.backward(loss_node).map_err(|e| step_err(step, e))?;
        apply_grads(
            backbone,
            attachment.as_deref_mut(),
            &graph,
            &params,
            &mut opt,
            cfg,
            cfg.schedule.factor(step, cfg.steps),
        )
        .map_err(|e| step_err(step, e))?;

        final_train_loss = loss;
        let wall_ms = t0.map(|t| t.elapsed().as_millis() as u64).unwrap_or(0);
        rows.push(MetricsRow {
            step,
            task: task_id,
            split: "train",
            loss,
            accuracy: acc,
            densities: densities.clone(),
            wall_ms,
        });

        if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 && !task.valid.is_empty() {
            let (vloss, vacc) =
                evaluate(backbone, attachment.as_deref(), task_id, &task.valid, cfg.eval_batch)?;
            rows.push(MetricsRow {
                step,
                task: task_id,
                split: "valid",
                loss: vloss,
                accuracy: vacc,
                densities,
                wall_ms: 0,
            });
            let better = match &best {
                None => true,
                Some((bacc, bloss, _)) => vacc > *bacc || (vacc == *bacc && vloss < *bloss),
            };
            if better {
                best = Some((
                    vacc,
                    vloss,
                    take_snapshot(backbone, attachment.as_deref(), cfg.train_backbone),
                ));
            }
        }
    }

    let best_valid = best.as_ref().map(|(acc, loss, _)| (*loss, *acc));
    if let Some((_, _, snap)) = best {
        restore_snapshot(snap, backbone, attachment.as_deref_mut());
    }
    if let Some(att) = attachment.as_deref_mut() {
        att.refresh_frozen_masks(&mut rng)?;
    }
    let final_valid = if task.valid.is_empty() {
        None
    } else {
        Some(evaluate(backbone, attachment.as_deref(), task_id, &task.valid, cfg.eval_batch)?)
    };
    Ok(TrainReport { rows, final_train_loss, best_valid, final_valid })
}

/// Train one shared prototype across several tasks. Steps sample a task by
/// temperature-flattened size share; the graph for task `t` contains only
/// `t`'s task scores and head, so updates cannot leak across tasks.
pub fn train_multi_task(
    backbone: &mut BackboneWeights,
    attachment: &mut ProPetlAttachment,
    set: &TaskSet,
    cfg: &TrainConfig,
) -> Result<MultiTrainReport> {
    cfg.validate()?;
    if attachment.mode != AttachMode::Propetl {
        return Err(Error::config(format!(
            "multi-task training needs propetl mode, got {}",
            attachment.mode
        )));
    }
    if attachment.num_tasks() != set.tasks.len() {
        return Err(Error::config(format!(
            "attachment has {} task mask sets for {} tasks",
            attachment.num_tasks(),
            set.tasks.len()
        )));
    }
    if backbone.cfg.num_classes.len() != set.tasks.len() {
        return Err(Error::config(format!(
            "backbone has {} heads for {} tasks",
            backbone.cfg.num_classes.len(),
            set.tasks.len()
        )));
    }
    for (t, task) in set.tasks.iter().enumerate() {
        if backbone.cfg.num_classes[t] != task.num_classes {
            return Err(Error::config(format!(
                "head {t} has {} classes, task {} has {}",
                backbone.cfg.num_classes[t], task.name, task.num_classes
            )));
        }
        if task.train.is_empty() {
            return Err(Error::config(format!("task {} has an empty train split", task.name)));
        }
    }

    let sizes: Vec<usize> = set.tasks.iter().map(|t| t.train.len()).collect();
    let probs = task_probabilities(&sizes, set.sampling_temperature)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer)?;
    let layers = backbone.cfg.layers;
    let mut rows = Vec::new();
    let mut best: Option<(f64, Snapshot)> = None;

    for step in 0..cfg.steps {
        let t0 = cfg.record_walltime.then(Instant::now);
        let tid = sample_task_index(&probs, &mut rng);
        let task = &set.tasks[tid];
        let idx: Vec<usize> =
            (0..cfg.batch_size).map(|_| rng.random_range(0..task.train.len())).collect();
        let tokens: Vec<Vec<usize>> = idx.iter().map(|&i| task.train[i].tokens.clone()).collect();
        let labels: Vec<usize> = idx.iter().map(|&i| task.train[i].label).collect();
        let densities = step_densities(Some(attachment), None, layers);

        let opts = EncodeOptions {
            task_id: tid,
            masks: MaskFeed::FromScores,
            train_modules: true,
            train_head: true,
            train_backbone: cfg.train_backbone,
        };
        let EncodeOut { mut graph, logits, params } =
            encode(backbone, Some(attachment), &tokens, &opts).map_err(|e| step_err(step, e))?;
        let loss_node = graph.cross_entropy(logits, &labels).map_err(|e| step_err(step, e))?;
        let loss = graph.scalar_f64(loss_node);
        if !loss.is_finite() {
            return Err(Error::Divergence { step, msg: format!("loss became {loss}") });
        }
        let (_, acc) = batch_stats(graph.value(logits), task.num_classes, &labels);
        graph.backward(loss_node).map_err(|e| step_err(step, e))?;
        apply_grads(
            backbone,
            Some(attachment),
            &graph,
            &params,
            &mut opt,
            cfg,
            cfg.schedule.factor(step, cfg.steps),
        )
        .map_err(|e| step_err(step, e))?;

        let wall_ms = t0.map(|t| t.elapsed().as_millis() as u64).unwrap_or(0);
        rows.push(MetricsRow {
            step,
            task: tid,
            split: "train",
            loss,
            accuracy: acc,
            densities: densities.clone(),
            wall_ms,
        });

        if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 {
            let mut accs = Vec::with_capacity(set.tasks.len());
            for (t, task) in set.tasks.iter().enumerate() {
                if task.valid.is_empty() {
                    continue;
                }
                let (vloss, vacc) =
                    evaluate(backbone, Some(attachment), t, &task.valid, cfg.eval_batch)?;
                accs.push(vacc);
                rows.push(MetricsRow {
                    step,
                    task: t,
                    split: "valid",
                    loss: vloss,
                    accuracy: vacc,
                    densities: densities.clone(),
                    wall_ms: 0,
                });
            }
            if !accs.is_empty() {
                let mean = accs.iter().sum::<f64>() / accs.len() as f64;
                if best.as_ref().map_or(true, |(b, _)| mean > *b) {
                    best = Some((
                        mean,
                        take_snapshot(backbone, Some(attachment), cfg.train_backbone),
                    ));
                }
            }
        }
    }

    let best_mean_valid_acc = best.as_ref().map(|(acc, _)| *acc);
    if let Some((_, snap)) = best {
        restore_snapshot(snap, backbone, Some(attachment));
    }
    attachment.refresh_frozen_masks(&mut rng)?;
    let mut final_valid = Vec::with_capacity(set.tasks.len());
    for (t, task) in set.tasks.iter().enumerate() {
        if task.valid.is_empty() {
            final_valid.push((f64::NAN, f64::NAN));
            continue;
        }
        final_valid.push(evaluate(backbone, Some(attachment), t, &task.valid, cfg.eval_batch)?);
    }
    Ok(MultiTrainReport { rows, best_mean_valid_acc, final_valid })
}

/// Fine-tune a fresh backbone on a held-out task, then transplant its body
/// (embeddings, blocks, final norm) onto a backbone with the requested
/// heads. Warm starts make small frozen-backbone experiments meaningful.
pub fn warmup_backbone(
    cfg: &TransformerConfig,
    task: &Task,
    steps: usize,
    lr: f64,
    seed: u64,
) -> Result<BackboneWeights> {
    let mut warm_cfg = cfg.clone();
    warm_cfg.num_classes = vec![task.num_classes];
    let mut warm = init_backbone(&warm_cfg, seed)?;
    let tcfg = TrainConfig {
        lambda_p: lr,
        steps,
        train_backbone: true,
        seed,
        ..TrainConfig::default()
    };
    train_single_task(&mut warm, None, 0, task, &tcfg)?;

    let mut out = init_backbone(cfg, seed)?;
    let count = out.tensors().len();
    for i in 0..count {
        let src = warm.tensors()[i].clone();
        *out.tensor_mut(i) = src;
    }
    Ok(out)
}

pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
