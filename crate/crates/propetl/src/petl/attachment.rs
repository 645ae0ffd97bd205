//! The attachment bundles everything a backbone needs to host the shared
//! module: the prototype weights, per-layer (and optionally per-task) mask
//! scores, and any frozen masks recomputed from those scores.

use super::{Prototype, Variant, VariantConfig};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::masking::{
    combine, init_scores, random_mask, threshold_topk, BinaryMask, CombineMode, MaskScores,
    Sparsity,
};
use rand::Rng;
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttachMode {
    /// One shared prototype, a learned binary mask per layer (and per task
    /// when multi-task), trained jointly.
    Propetl,
    /// One shared prototype used identically at every layer; no masks.
    OnlyShare,
    /// An independent prototype with its own learned mask at every layer.
    OnlyMask,
    /// One shared prototype with a fresh uniform-random mask drawn every
    /// forward pass; scores are never trained.
    RandomMask,
}

impl AttachMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            AttachMode::Propetl => "propetl",
            AttachMode::OnlyShare => "only_share",
            AttachMode::OnlyMask => "only_mask",
            AttachMode::RandomMask => "random_mask",
        }
    }
}

impl fmt::Display for AttachMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttachMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "propetl" => Ok(AttachMode::Propetl),
            "only_share" => Ok(AttachMode::OnlyShare),
            "only_mask" => Ok(AttachMode::OnlyMask),
            "random_mask" => Ok(AttachMode::RandomMask),
            other => Err(Error::invalid("mode", format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AttachmentSpec {
    pub variant_cfg: VariantConfig,
    pub mode: AttachMode,
    pub k: Sparsity,
    pub num_layers: usize,
    /// 0 means single-task (no task masks). Task masks exist only in
    /// `Propetl` mode.
    pub num_tasks: usize,
    pub combine: CombineMode,
}

#[derive(Debug, Clone)]
pub struct ProPetlAttachment {
    pub variant: Variant,
    pub mode: AttachMode,
    pub k: Sparsity,
    pub combine: CombineMode,
    pub num_layers: usize,
    /// One entry normally; `num_layers` entries in `OnlyMask` mode.
    pub prototypes: Vec<Prototype>,
    /// `[layer][slot]`; empty in `OnlyShare`/`RandomMask` modes.
    pub layer_scores: Vec<Vec<MaskScores>>,
    /// `[task][slot]`; non-empty only for multi-task `Propetl`.
    pub task_scores: Vec<Vec<MaskScores>>,
    /// Masks recomputed once from the final scores (or loaded from disk).
    pub frozen_layer_masks: Option<Vec<Vec<BinaryMask>>>,
    pub frozen_task_masks: Option<Vec<Vec<BinaryMask>>>,
}

impl ProPetlAttachment {
    pub fn build(spec: &AttachmentSpec, rng: &mut impl Rng) -> Result<Self> {
        if spec.num_layers == 0 {
            return Err(Error::config("attachment needs at least one layer"));
        }
        match spec.mode {
            AttachMode::OnlyShare => {
                if spec.k != Sparsity::FULL {
                    return Err(Error::config(
                        "only_share has no masks; a kept fraction k cannot be set",
                    ));
                }
                if spec.num_tasks > 0 {
                    return Err(Error::config("only_share does not take task masks"));
                }
            }
            AttachMode::OnlyMask | AttachMode::RandomMask => {
                if spec.num_tasks > 0 {
                    return Err(Error::config(format!(
                        "task masks are only supported in propetl mode, not {}",
                        spec.mode
                    )));
                }
            }
            AttachMode::Propetl => {}
        }

        // Deterministic init order: prototypes first, then layer scores
        // (layer-major, slot-minor), then task scores.
        let proto_count = if spec.mode == AttachMode::OnlyMask { spec.num_layers } else { 1 };
        let mut prototypes = Vec::with_capacity(proto_count);
        for _ in 0..proto_count {
            prototypes.push(Prototype::build(&spec.variant_cfg, rng)?);
        }

        let scored = matches!(spec.mode, AttachMode::Propetl | AttachMode::OnlyMask);
        let mut layer_scores = Vec::new();
        if scored {
            for layer in 0..spec.num_layers {
                let proto = &prototypes[if proto_count == 1 { 0 } else { layer }];
                let slots = proto
                    .mask_shapes()
                    .into_iter()
                    .map(|(slot, shape)| {
                        init_scores(format!("layer{layer}.{slot}"), shape, spec.k, rng)
                    })
                    .collect();
                layer_scores.push(slots);
            }
        }

        let mut task_scores = Vec::new();
        if spec.mode == AttachMode::Propetl {
            for task in 0..spec.num_tasks {
                let slots = prototypes[0]
                    .mask_shapes()
                    .into_iter()
                    .map(|(slot, shape)| {
                        init_scores(format!("task{task}.{slot}"), shape, spec.k, rng)
                    })
                    .collect();
                task_scores.push(slots);
            }
        }

        Ok(ProPetlAttachment {
            variant: spec.variant_cfg.variant(),
            mode: spec.mode,
            k: spec.k,
            combine: spec.combine,
            num_layers: spec.num_layers,
            prototypes,
            layer_scores,
            task_scores,
            frozen_layer_masks: None,
            frozen_task_masks: None,
        })
    }

    /// Rebuild from loaded weights and masks; scores are gone at this point.
    pub fn from_frozen(
        prototypes: Vec<Prototype>,
        mode: AttachMode,
        k: Sparsity,
        combine: CombineMode,
        num_layers: usize,
        frozen_layer_masks: Option<Vec<Vec<BinaryMask>>>,
        frozen_task_masks: Option<Vec<Vec<BinaryMask>>>,
    ) -> Result<Self> {
        if prototypes.is_empty() {
            return Err(Error::config("attachment needs a prototype"));
        }
        if mode == AttachMode::OnlyMask && prototypes.len() != num_layers {
            return Err(Error::config(format!(
                "only_mask wants {} prototypes, got {}",
                num_layers,
                prototypes.len()
            )));
        }
        if let Some(masks) = &frozen_layer_masks {
            if masks.len() != num_layers {
                return Err(Error::config(format!(
                    "{} layer mask sets for {} layers",
                    masks.len(),
                    num_layers
                )));
            }
        }
        let variant = prototypes[0].variant();
        Ok(ProPetlAttachment {
            variant,
            mode,
            k,
            combine,
            num_layers,
            prototypes,
            layer_scores: Vec::new(),
            task_scores: Vec::new(),
            frozen_layer_masks,
            frozen_task_masks,
        })
    }

    pub fn num_tasks(&self) -> usize {
        if !self.task_scores.is_empty() {
            self.task_scores.len()
        } else {
            self.frozen_task_masks.as_ref().map_or(0, |m| m.len())
        }
    }

    pub fn prototype(&self) -> &Prototype {
        &self.prototypes[0]
    }

    pub fn proto_index_for_layer(&self, layer: usize) -> usize {
        if self.prototypes.len() == 1 {
            0
        } else {
            layer
        }
    }

    pub fn proto_for_layer(&self, layer: usize) -> &Prototype {
        &self.prototypes[self.proto_index_for_layer(layer)]
    }

    pub fn mask_slots(&self) -> usize {
        self.prototype().mask_shapes().len()
    }

    /// Per-layer masks: frozen if present, else thresholded from the live
    /// scores. Mask-free modes have none to give.
    pub fn layer_masks(&self, layer: usize) -> Result<Vec<BinaryMask>> {
        if layer >= self.num_layers {
            return Err(Error::invalid(
                "layer_masks",
                format!("layer {layer} out of {}", self.num_layers),
            ));
        }
        if let Some(frozen) = &self.frozen_layer_masks {
            return Ok(frozen[layer].clone());
        }
        if let Some(scores) = self.layer_scores.get(layer) {
            return scores.iter().map(threshold_topk).collect();
        }
        Err(Error::invalid(
            "layer_masks",
            format!("mode {} has no deterministic layer masks", self.mode),
        ))
    }

    pub fn task_masks(&self, task: usize) -> Result<Vec<BinaryMask>> {
        if let Some(frozen) = &self.frozen_task_masks {
            return frozen
                .get(task)
                .cloned()
                .ok_or_else(|| Error::invalid("task_masks", format!("task {task} out of range")));
        }
        match self.task_scores.get(task) {
            Some(scores) => scores.iter().map(threshold_topk).collect(),
            None => Err(Error::invalid("task_masks", format!("task {task} out of range"))),
        }
    }

    /// Layer mask merged with the task mask slot by slot.
    pub fn hybrid_masks(&self, layer: usize, task: usize) -> Result<Vec<BinaryMask>> {
        let lm = self.layer_masks(layer)?;
        let tm = self.task_masks(task)?;
        lm.iter().zip(&tm).map(|(a, b)| combine(a, b, self.combine)).collect()
    }

    /// Masks to evaluate with: `None` for mask-free mode, the hybrid mask
    /// when a task is named and task masks exist.
    pub fn eval_masks(&self, layer: usize, task: Option<usize>) -> Result<Option<Vec<BinaryMask>>> {
        match self.mode {
            AttachMode::OnlyShare => Ok(None),
            _ => match task {
                Some(t) if self.num_tasks() > 0 => Ok(Some(self.hybrid_masks(layer, t)?)),
                _ => Ok(Some(self.layer_masks(layer)?)),
            },
        }
    }

    /// Fresh uniform-random masks for every layer, exact cardinality each.
    pub fn sample_random_masks(&self, rng: &mut impl Rng) -> Vec<Vec<BinaryMask>> {
        (0..self.num_layers)
            .map(|layer| {
                self.proto_for_layer(layer)
                    .mask_shapes()
                    .into_iter()
                    .map(|(slot, shape)| {
                        random_mask(format!("layer{layer}.{slot}"), &shape, self.k, rng)
                    })
                    .collect()
            })
            .collect()
    }

    /// Recompute and store the final masks: thresholded from scores for the
    /// learned modes, one last random draw for the random baseline, a no-op
    /// for only_share.
    pub fn refresh_frozen_masks(&mut self, rng: &mut impl Rng) -> Result<()> {
        match self.mode {
            AttachMode::OnlyShare => Ok(()),
            AttachMode::RandomMask => {
                self.frozen_layer_masks = Some(self.sample_random_masks(rng));
                Ok(())
            }
            AttachMode::Propetl | AttachMode::OnlyMask => {
                let mut per_layer = Vec::with_capacity(self.num_layers);
                for layer in 0..self.num_layers {
                    per_layer.push(
                        self.layer_scores[layer]
                            .iter()
                            .map(threshold_topk)
                            .collect::<Result<Vec<_>>>()?,
                    );
                }
                self.frozen_layer_masks = Some(per_layer);
                if !self.task_scores.is_empty() {
                    let mut per_task = Vec::with_capacity(self.task_scores.len());
                    for scores in &self.task_scores {
                        per_task
                            .push(scores.iter().map(threshold_topk).collect::<Result<Vec<_>>>()?);
                    }
                    self.frozen_task_masks = Some(per_task);
                }
                Ok(())
            }
        }
    }

    /// Matched-initialization ablation: the same prototype weights, attached
    /// mask-free. Scores are dropped; the clone trains as pure sharing.
    pub fn to_only_share(&self) -> Self {
        ProPetlAttachment {
            variant: self.variant,
            mode: AttachMode::OnlyShare,
            k: Sparsity::FULL,
            combine: self.combine,
            num_layers: self.num_layers,
            prototypes: vec![self.prototypes[0].clone()],
            layer_scores: Vec::new(),
            task_scores: Vec::new(),
            frozen_layer_masks: None,
            frozen_task_masks: None,
        }
    }

    /// Trainable-parameter count under the accounting convention that every
    /// mask's score set costs the full module size n (biases included):
    /// propetl is n*(L+T) + n, pure sharing is n, per-layer masking counts
    /// each layer's retained weights exactly (kept matrix entries plus all
    /// biases) plus one score set per layer.
    pub fn count_trainable(&self) -> u64 {
        let n = self.prototype().param_count();
        let l = self.num_layers as u64;
        match self.mode {
            AttachMode::Propetl => {
                let t = self.num_tasks() as u64;
                n * (l + t) + n
            }
            AttachMode::OnlyShare | AttachMode::RandomMask => n,
            AttachMode::OnlyMask => {
                let proto = self.prototype();
                let maskable: u64 = proto
                    .mask_shapes()
                    .iter()
                    .map(|(_, s)| s.iter().product::<usize>() as u64)
                    .sum();
                let unmaskable = n - maskable;
                let retained: u64 = proto
                    .mask_shapes()
                    .iter()
                    .map(|(_, s)| self.k.ones_count(s.iter().product()) as u64)
                    .sum::<u64>()
                    + unmaskable;
                l * retained + l * n
            }
        }
    }

    /// Stable enumeration of every trainable tensor the attachment owns, as
    /// (group, index-within-group) paths. Scores are listed after prototype
    /// tensors; layer scores before task scores.
    pub fn trainable_paths(&self) -> Vec<AttachmentPath> {
        let mut out = Vec::new();
        for (pi, proto) in self.prototypes.iter().enumerate() {
            for (ti, (_, t)) in proto.tensors().iter().enumerate() {
                if t.requires_grad() {
                    out.push(AttachmentPath::Proto { proto: pi, tensor: ti });
                }
            }
        }
        for (layer, slots) in self.layer_scores.iter().enumerate() {
            for slot in 0..slots.len() {
                out.push(AttachmentPath::LayerScore { layer, slot });
            }
        }
        for (task, slots) in self.task_scores.iter().enumerate() {
            for slot in 0..slots.len() {
                out.push(AttachmentPath::TaskScore { task, slot });
            }
        }
        out
    }

    pub fn tensor_at(&self, path: AttachmentPath) -> &Tensor {
        match path {
            AttachmentPath::Proto { proto, tensor } => self.prototypes[proto].tensors()[tensor].1,
            AttachmentPath::LayerScore { layer, slot } => &self.layer_scores[layer][slot].values,
            AttachmentPath::TaskScore { task, slot } => &self.task_scores[task][slot].values,
        }
    }

    pub fn tensor_at_mut(&mut self, path: AttachmentPath) -> &mut Tensor {
        match path {
            AttachmentPath::Proto { proto, tensor } => self.prototypes[proto].tensor_mut(tensor),
            AttachmentPath::LayerScore { layer, slot } => {
                &mut self.layer_scores[layer][slot].values
            }
            AttachmentPath::TaskScore { task, slot } => &mut self.task_scores[task][slot].values,
        }
    }
}

/// Address of one trainable tensor inside the attachment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum AttachmentPath {
    Proto { proto: usize, tensor: usize },
    LayerScore { layer: usize, slot: usize },
    TaskScore { task: usize, slot: usize },
}
