//! A small pre-norm transformer encoder for sequence classification, with
//! hooks for the shared-module attachment: LoRA updates on the query/value
//! projections, prefix rows on every attention head, or a bottleneck adapter
//! after each feed-forward block.

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::masking::BinaryMask;
use crate::petl::{
    adapter_forward, lora_forward, prefix_attention, AdapterNodes, AttachMode, AttachmentPath,
    ProPetlAttachment, Prototype,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct TransformerConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub vocab: usize,
    pub max_seq: usize,
    /// Output classes per task; one classifier head each.
    pub num_classes: Vec<usize>,
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0
            || self.hidden == 0
            || self.heads == 0
            || self.ffn == 0
            || self.vocab == 0
            || self.max_seq == 0
        {
            return Err(Error::config("transformer dimensions must be positive"));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::config(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if self.num_classes.is_empty() || self.num_classes.iter().any(|&c| c < 2) {
            return Err(Error::config("each task needs at least two classes"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

pub const TENSORS_PER_LAYER: usize = 16;

#[derive(Debug, Clone)]
pub struct ClassifierHead {
    pub w: Tensor, // hidden x classes
    pub b: Tensor, // classes
}

#[derive(Debug, Clone)]
pub struct BackboneWeights {
    pub cfg: TransformerConfig,
    pub tok_emb: Tensor, // vocab x hidden
    pub pos_emb: Tensor, // max_seq x hidden
    pub layers: Vec<LayerWeights>,
    pub ln_f_g: Tensor,
    pub ln_f_b: Tensor,
    pub heads: Vec<ClassifierHead>,
}

pub fn init_backbone(cfg: &TransformerConfig, seed: u64) -> Result<BackboneWeights> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.hidden;
    let normal = |shape: Vec<usize>, rng: &mut ChaCha8Rng| Tensor::normal(shape, 0.02, rng);
    let tok_emb = normal(vec![cfg.vocab, d], &mut rng);
    let pos_emb = normal(vec![cfg.max_seq, d], &mut rng);
    let mut layers = Vec::with_capacity(cfg.layers);
    for _ in 0..cfg.layers {
        layers.push(LayerWeights {
            ln1_g: Tensor::full(vec![d], 1.0),
            ln1_b: Tensor::zeros(vec![d]),
            wq: normal(vec![d, d], &mut rng),
            bq: Tensor::zeros(vec![d]),
            wk: normal(vec![d, d], &mut rng),
            bk: Tensor::zeros(vec![d]),
            wv: normal(vec![d, d], &mut rng),
            bv: Tensor::zeros(vec![d]),
            wo: normal(vec![d, d], &mut rng),
            bo: Tensor::zeros(vec![d]),
            ln2_g: Tensor::full(vec![d], 1.0),
            ln2_b: Tensor::zeros(vec![d]),
            w1: normal(vec![d, cfg.ffn], &mut rng),
            b1: Tensor::zeros(vec![cfg.ffn]),
            w2: normal(vec![cfg.ffn, d], &mut rng),
            b2: Tensor::zeros(vec![d]),
        });
    }
    let ln_f_g = Tensor::full(vec![d], 1.0);
    let ln_f_b = Tensor::zeros(vec![d]);
    let heads = cfg
        .num_classes
        .iter()
        .map(|&c| ClassifierHead { w: normal(vec![d, c], &mut rng), b: Tensor::zeros(vec![c]) })
        .collect();
    Ok(BackboneWeights { cfg: cfg.clone(), tok_emb, pos_emb, layers, ln_f_g, ln_f_b, heads })
}

impl BackboneWeights {
    /// Stable enumeration of backbone tensors (heads excluded): tok_emb,
    /// pos_emb, then per layer [ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo,
    /// bo, ln2_g, ln2_b, w1, b1, w2, b2], then ln_f_g, ln_f_b.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.tok_emb, &self.pos_emb];
        for l in &self.layers {
            out.extend([
                &l.ln1_g, &l.ln1_b, &l.wq, &l.bq, &l.wk, &l.bk, &l.wv, &l.bv, &l.wo, &l.bo,
                &l.ln2_g, &l.ln2_b, &l.w1, &l.b1, &l.w2, &l.b2,
            ]);
        }
        out.push(&self.ln_f_g);
        out.push(&self.ln_f_b);
        out
    }

    pub fn tensor_mut(&mut self, idx: usize) -> &mut Tensor {
        let layer_count = self.layers.len();
        match idx {
            0 => &mut self.tok_emb,
            1 => &mut self.pos_emb,
            i if i < 2 + TENSORS_PER_LAYER * layer_count => {
                let l = &mut self.layers[(i - 2) / TENSORS_PER_LAYER];
                match (i - 2) % TENSORS_PER_LAYER {
                    0 => &mut l.ln1_g,
                    1 => &mut l.ln1_b,
                    2 => &mut l.wq,
                    3 => &mut l.bq,
                    4 => &mut l.wk,
                    5 => &mut l.bk,
                    6 => &mut l.wv,
                    7 => &mut l.bv,
                    8 => &mut l.wo,
                    9 => &mut l.bo,
                    10 => &mut l.ln2_g,
                    11 => &mut l.ln2_b,
                    12 => &mut l.w1,
                    13 => &mut l.b1,
                    14 => &mut l.w2,
                    15 => &mut l.b2,
                    _ => unreachable!(),
                }
            }
            i if i == 2 + TENSORS_PER_LAYER * layer_count => &mut self.ln_f_g,
            i if i == 3 + TENSORS_PER_LAYER * layer_count => &mut self.ln_f_b,
            i => panic!("backbone tensor index {i} out of range"),
        }
    }

    /// Total backbone parameters, classifier heads included.
    pub fn param_count(&self) -> u64 {
        let body: u64 = self.tensors().iter().map(|t| t.numel() as u64).sum();
        let heads: u64 =
            self.heads.iter().map(|h| (h.w.numel() + h.b.numel()) as u64).sum();
        body + heads
    }
}

/// Where each layer's masks come from during a forward pass.
#[derive(Debug, Clone, Copy)]
pub enum MaskFeed<'a> {
    /// Binarize the live scores in-graph; gradients reach the scores through
    /// the straight-through estimator. Task scores (when present) are
    /// binarized once and merged into every layer's mask.
    FromScores,
    /// Fixed bits per layer, applied as constants.
    Fixed(&'a [Vec<BinaryMask>]),
    /// No masks at all (pure sharing, or no attachment).
    Unmasked,
}

#[derive(Debug, Clone)]
pub struct EncodeOptions<'a> {
    pub task_id: usize,
    pub masks: MaskFeed<'a>,
    /// Make prototype weights and mask scores trainable leaves.
    pub train_modules: bool,
    /// Make this task's classifier head trainable.
    pub train_head: bool,
    /// Make every backbone tensor trainable (full fine-tuning).
    pub train_backbone: bool,
}

impl<'a> EncodeOptions<'a> {
    pub fn eval(task_id: usize, masks: MaskFeed<'a>) -> Self {
        EncodeOptions {
            task_id,
            masks,
            train_modules: false,
            train_head: false,
            train_backbone: false,
        }
    }
}

/// Address of one trainable tensor anywhere in the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ParamRef {
    Backbone { idx: usize },
    Attach(AttachmentPath),
    HeadW { task: usize },
    HeadB { task: usize },
}

pub struct EncodeOut {
    pub graph: Graph,
    /// [batch, classes_of_task] classification logits.
    pub logits: NodeId,
    /// Every trainable leaf in this graph, in creation order.
    pub params: Vec<(ParamRef, NodeId)>,
}

/// Per-layer module nodes, already masked.
enum ModuleNodes {
    Adapter(AdapterNodes),
    Lora { q_down: NodeId, q_up: NodeId, v_down: NodeId, v_up: NodeId, alpha: f32 },
    Prefix { pk: NodeId, pv: NodeId },
}

fn tensor_leaf(g: &mut Graph, t: &Tensor, requires_grad: bool) -> NodeId {
    g.leaf_parts(t.shape().to_vec(), t.data().to_vec(), requires_grad)
}

fn mask_leaf(g: &mut Graph, m: &BinaryMask) -> NodeId {
    g.leaf_parts(m.shape().to_vec(), m.to_f32_vec(), false)
}

fn apply_mask(g: &mut Graph, x: NodeId, mask: Option<NodeId>) -> Result<NodeId> {
    match mask {
        Some(m) => g.mul(x, m),
        None => Ok(x),
    }
}

/// Run the encoder over a batch of equal-length token sequences and produce
/// classification logits for one task. The graph and the trainable leaf
/// handles are returned so the caller can attach a loss and step.
pub fn encode(
    backbone: &BackboneWeights,
    attachment: Option<&ProPetlAttachment>,
    tokens: &[Vec<usize>],
    opts: &EncodeOptions,
) -> Result<EncodeOut> {
    let cfg = &backbone.cfg;
    cfg.validate()?;
    if tokens.is_empty() {
        return Err(Error::invalid("encode", "empty batch"));
    }
    let s = tokens[0].len();
    if s == 0 || s > cfg.max_seq {
        return Err(Error::invalid(
            "encode",
            format!("sequence length {s} outside 1..={}", cfg.max_seq),
        ));
    }
    for (i, row) in tokens.iter().enumerate() {
        if row.len() != s {
            return Err(Error::invalid(
                "encode",
                format!("ragged batch: sequence {i} has length {} != {s}", row.len()),
            ));
        }
        if let Some(&bad) = row.iter().find(|&&t| t >= cfg.vocab) {
            return Err(Error::invalid(
                "encode",
                format!("token id {bad} outside vocab {}", cfg.vocab),
            ));
        }
    }
    if opts.task_id >= cfg.num_classes.len() {
        return Err(Error::invalid(
            "encode",
            format!("task {} outside {} heads", opts.task_id, cfg.num_classes.len()),
        ));
    }
    if let Some(att) = attachment {
        if att.prototype().d() != cfg.hidden {
            return Err(Error::ShapeMismatch {
                op: "encode",
                lhs: vec![cfg.hidden],
                rhs: vec![att.prototype().d()],
            });
        }
        if att.num_layers != cfg.layers {
            return Err(Error::config(format!(
                "attachment spans {} layers, backbone has {}",
                att.num_layers, cfg.layers
            )));
        }
    }
    match (&opts.masks, attachment) {
        (MaskFeed::Unmasked, Some(att)) if att.mode != AttachMode::OnlyShare => {
            return Err(Error::config(format!("mode {} requires masks", att.mode)));
        }
        (MaskFeed::FromScores, Some(att)) if att.layer_scores.is_empty() => {
            return Err(Error::config(format!("mode {} has no scores to binarize", att.mode)));
        }
        (MaskFeed::Fixed(per_layer), Some(att)) => {
            if per_layer.len() != cfg.layers {
                return Err(Error::config(format!(
                    "{} fixed mask sets for {} layers",
                    per_layer.len(),
                    cfg.layers
                )));
            }
            for (l, slots) in per_layer.iter().enumerate() {
                let want = att.proto_for_layer(l).mask_shapes();
                if slots.len() != want.len() {
                    return Err(Error::config(format!(
                        "layer {l}: {} masks for {} slots",
                        slots.len(),
                        want.len()
                    )));
                }
                for (m, (_, shape)) in slots.iter().zip(&want) {
                    if m.shape() != shape.as_slice() {
                        return Err(Error::ShapeMismatch {
                            op: "encode",
                            lhs: shape.clone(),
                            rhs: m.shape().to_vec(),
                        });
                    }
                }
            }
        }
        (MaskFeed::FromScores, None) | (MaskFeed::Fixed(_), None) => {
            return Err(Error::config("masks given but no attachment to apply them to"));
        }
        _ => {}
    }

    let (batch, d, n_heads, dh) = (tokens.len(), cfg.hidden, cfg.heads, cfg.head_dim());
    let mut g = Graph::new();
    let mut params: Vec<(ParamRef, NodeId)> = Vec::new();

    // Backbone leaves in enumeration order so ParamRef::Backbone { idx }
    // lines up with BackboneWeights::tensors().
    let bb_nodes: Vec<NodeId> = backbone
        .tensors()
        .iter()
        .map(|t| tensor_leaf(&mut g, t, opts.train_backbone))
        .collect();
    if opts.train_backbone {
        for (idx, &node) in bb_nodes.iter().enumerate() {
            params.push((ParamRef::Backbone { idx }, node));
        }
    }
    let head = &backbone.heads[opts.task_id];
    let head_w = tensor_leaf(&mut g, &head.w, opts.train_head);
    let head_b = tensor_leaf(&mut g, &head.b, opts.train_head);
    if opts.train_head {
        params.push((ParamRef::HeadW { task: opts.task_id }, head_w));
        params.push((ParamRef::HeadB { task: opts.task_id }, head_b));
    }

    // Prototype leaves: one set per stored prototype, created once and
    // reused by every layer so gradients accumulate on the shared weights.
    let mut proto_nodes: Vec<Vec<NodeId>> = Vec::new();
    // Derived (pk, pv) per prototype for the prefix variant.
    let mut prefix_kv: Vec<(NodeId, NodeId)> = Vec::new();
    if let Some(att) = attachment {
        for (pi, proto) in att.prototypes.iter().enumerate() {
            let mut nodes = Vec::new();
            for (ti, (_, t)) in proto.tensors().iter().enumerate() {
                let rg = opts.train_modules && t.requires_grad();
                let node = tensor_leaf(&mut g, t, rg);
                if rg {
                    params.push((
                        ParamRef::Attach(AttachmentPath::Proto { proto: pi, tensor: ti }),
                        node,
                    ));
                }
                nodes.push(node);
            }
            if let Prototype::Prefix(p) = proto {
                let (pk, pv) = match &p.params {
                    crate::petl::PrefixParams::Train { .. } => {
                        let prod = g.matmul(nodes[0], nodes[1])?;
                        (g.slice_cols(prod, 0, d)?, g.slice_cols(prod, d, d)?)
                    }
                    crate::petl::PrefixParams::Frozen { .. } => {
                        (g.slice_cols(nodes[0], 0, d)?, g.slice_cols(nodes[0], d, d)?)
                    }
                };
                prefix_kv.push((pk, pv));
            }
            proto_nodes.push(nodes);
        }
    }

    // Task mask, binarized once and merged into every layer's mask.
    let task_mask_nodes: Option<Vec<NodeId>> = match (&opts.masks, attachment) {
        (MaskFeed::FromScores, Some(att)) if !att.task_scores.is_empty() => {
            let scores = att.task_scores.get(opts.task_id).ok_or_else(|| {
                Error::invalid(
                    "encode",
                    format!("task {} has no mask scores", opts.task_id),
                )
            })?;
            let mut nodes = Vec::new();
            for (slot, sc) in scores.iter().enumerate() {
                let leaf = tensor_leaf(&mut g, &sc.values, opts.train_modules);
                if opts.train_modules {
                    params.push((
                        ParamRef::Attach(AttachmentPath::TaskScore {
                            task: opts.task_id,
                            slot,
                        }),
                        leaf,
                    ));
                }
                nodes.push(g.binarize_topk(leaf, sc.k)?);
            }
            Some(nodes)
        }
        _ => None,
    };

    // Token + positional embeddings over the flattened batch.
    let flat_ids: Vec<usize> = tokens.iter().flatten().copied().collect();
    let pos_ids: Vec<usize> = (0..batch).flat_map(|_| 0..s).collect();
    let tok = g.embedding_lookup(bb_nodes[0], &flat_ids)?;
    let pos = g.embedding_lookup(bb_nodes[1], &pos_ids)?;
    let mut x = g.add(tok, pos)?;

    for layer in 0..cfg.layers {
        let base = 2 + TENSORS_PER_LAYER * layer;
        let [ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2] =
            std::array::from_fn(|i| bb_nodes[base + i]);

        // This layer's mask nodes, one per maskable slot.
        let slot_masks: Option<Vec<NodeId>> = match (&opts.masks, attachment) {
            (MaskFeed::Unmasked, _) | (_, None) => None,
            (MaskFeed::FromScores, Some(att)) => {
                let mut nodes = Vec::new();
                for (slot, sc) in att.layer_scores[layer].iter().enumerate() {
                    let leaf = tensor_leaf(&mut g, &sc.values, opts.train_modules);
                    if opts.train_modules {
                        params.push((
                            ParamRef::Attach(AttachmentPath::LayerScore { layer, slot }),
                            leaf,
                        ));
                    }
                    let mut m = g.binarize_topk(leaf, sc.k)?;
                    if let Some(task_nodes) = &task_mask_nodes {
                        m = g.combine_masks(m, task_nodes[slot], att.combine)?;
                    }
                    nodes.push(m);
                }
                Some(nodes)
            }
            (MaskFeed::Fixed(per_layer), Some(_)) => {
                Some(per_layer[layer].iter().map(|m| mask_leaf(&mut g, m)).collect())
            }
        };

        // Masked module nodes for this layer.
        let module: Option<ModuleNodes> = match attachment {
            None => None,
            Some(att) => {
                let pi = att.proto_index_for_layer(layer);
                let nodes = &proto_nodes[pi];
                let m = |i: usize| slot_masks.as_ref().map(|v| v[i]);
                Some(match att.prototypes[pi] {
                    Prototype::Adapter(ref a) => ModuleNodes::Adapter(AdapterNodes {
                        w_down: apply_mask(&mut g, nodes[0], m(0))?,
                        b_down: nodes[1],
                        w_up: apply_mask(&mut g, nodes[2], m(1))?,
                        b_up: nodes[3],
                        nonlin: a.nonlin,
                    }),
                    Prototype::Lora(ref p) => ModuleNodes::Lora {
                        q_down: apply_mask(&mut g, nodes[0], m(0))?,
                        q_up: apply_mask(&mut g, nodes[1], m(1))?,
                        v_down: apply_mask(&mut g, nodes[2], m(2))?,
                        v_up: apply_mask(&mut g, nodes[3], m(3))?,
                        alpha: p.alpha,
                    },
                    Prototype::Prefix(_) => {
                        let (pk, pv) = prefix_kv[pi];
                        ModuleNodes::Prefix {
                            pk: apply_mask(&mut g, pk, m(0))?,
                            pv: apply_mask(&mut g, pv, m(1))?,
                        }
                    }
                })
            }
        };

        // Attention block.
        let xn = g.layer_norm(x, ln1_g, ln1_b)?;
        let mut q = g.matmul(xn, wq)?;
        q = g.add_bias(q, bq)?;
        let mut k = g.matmul(xn, wk)?;
        k = g.add_bias(k, bk)?;
        let mut v = g.matmul(xn, wv)?;
        v = g.add_bias(v, bv)?;
        if let Some(ModuleNodes::Lora { q_down, q_up, v_down, v_up, alpha }) = &module {
            q = lora_forward(&mut g, q, xn, *q_down, *q_up, *alpha)?;
            v = lora_forward(&mut g, v, xn, *v_down, *v_up, *alpha)?;
        }

        let mut batch_rows = Vec::with_capacity(batch);
        for b_i in 0..batch {
            let q_b = g.slice_rows(q, b_i * s, s)?;
            let k_b = g.slice_rows(k, b_i * s, s)?;
            let v_b = g.slice_rows(v, b_i * s, s)?;
            let mut head_outs = Vec::with_capacity(n_heads);
            for h_i in 0..n_heads {
                let q_bh = g.slice_cols(q_b, h_i * dh, dh)?;
                let k_bh = g.slice_cols(k_b, h_i * dh, dh)?;
                let v_bh = g.slice_cols(v_b, h_i * dh, dh)?;
                let (pk_h, pv_h) = match &module {
                    Some(ModuleNodes::Prefix { pk, pv }) => (
                        Some(g.slice_cols(*pk, h_i * dh, dh)?),
                        Some(g.slice_cols(*pv, h_i * dh, dh)?),
                    ),
                    _ => (None, None),
                };
                head_outs.push(prefix_attention(&mut g, q_bh, k_bh, v_bh, pk_h, pv_h)?);
            }
            batch_rows.push(g.concat_cols(&head_outs)?);
        }
        let merged = g.concat_rows(&batch_rows)?;
        let mut attn = g.matmul(merged, wo)?;
        attn = g.add_bias(attn, bo)?;
        x = g.add(x, attn)?;

        // Feed-forward block.
        let xn2 = g.layer_norm(x, ln2_g, ln2_b)?;
        let mut ff = g.matmul(xn2, w1)?;
        ff = g.add_bias(ff, b1)?;
        ff = g.gelu(ff)?;
        ff = g.matmul(ff, w2)?;
        ff = g.add_bias(ff, b2)?;
        x = g.add(x, ff)?;

        // Bottleneck adapter rides on the post-FFN activations.
        if let Some(ModuleNodes::Adapter(nodes)) = &module {
            x = adapter_forward(&mut g, x, nodes)?;
        }
    }

    let xf = g.layer_norm(x, bb_nodes[2 + TENSORS_PER_LAYER * cfg.layers], {
        bb_nodes[3 + TENSORS_PER_LAYER * cfg.layers]
    })?;
    let pooled = g.mean_pool(xf, s)?;
    let mut logits = g.matmul(pooled, head_w)?;
    logits = g.add_bias(logits, head_b)?;

    Ok(EncodeOut { graph: g, logits, params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::{CombineMode, Sparsity};
    use crate::petl::{AttachmentSpec, Nonlinearity, VariantConfig};

    fn tiny_cfg() -> TransformerConfig {
        TransformerConfig {
            layers: 2,
            hidden: 8,
            heads: 2,
            ffn: 16,
            vocab: 11,
            max_seq: 6,
            num_classes: vec![3],
        }
    }

    fn adapter_attachment(mode: AttachMode, k: Sparsity) -> ProPetlAttachment {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        ProPetlAttachment::build(
            &AttachmentSpec {
                variant_cfg: VariantConfig::Adapter { bn: 4, d: 8, nonlin: Nonlinearity::Relu },
                mode,
                k,
                num_layers: 2,
                num_tasks: 0,
                combine: CombineMode::Or,
            },
            &mut rng,
        )
        .unwrap()
    }

    fn batch() -> Vec<Vec<usize>> {
        vec![vec![1, 2, 3, 4], vec![5, 6, 7, 8], vec![9, 10, 0, 1]]
    }

    #[test]
    fn param_count_sums_enumerated_tensors() {
        let bb = init_backbone(&tiny_cfg(), 1).unwrap();
        // tok 11*8 + pos 6*8 + 2 layers * (2*8 + 4*(64+8) + 2*8 + 8*16+16 +
        // 16*8+8) + 2*8 + head (8*3+3).
        let per_layer = 16 + 4 * 72 + 16 + (8 * 16 + 16) + (16 * 8 + 8);
        let expect = 88 + 48 + 2 * per_layer + 16 + 27;
        assert_eq!(bb.param_count(), expect as u64);
        assert_eq!(bb.tensors().len(), 2 + 2 * TENSORS_PER_LAYER + 2);
    }

    #[test]
    fn tensor_mut_addresses_the_enumerated_tensor() {
        let mut bb = init_backbone(&tiny_cfg(), 1).unwrap();
        let shapes: Vec<Vec<usize>> =
            bb.tensors().iter().map(|t| t.shape().to_vec()).collect();
        for (i, shape) in shapes.iter().enumerate() {
            assert_eq!(bb.tensor_mut(i).shape(), shape.as_slice(), "index {i}");
        }
    }

    #[test]
    fn logits_are_deterministic_and_shaped() {
        let bb = init_backbone(&tiny_cfg(), 2).unwrap();
        let att = adapter_attachment(AttachMode::Propetl, Sparsity::ratio(1, 2).unwrap());
        let opts = EncodeOptions::eval(0, MaskFeed::FromScores);
        let one = encode(&bb, Some(&att), &batch(), &opts).unwrap();
        let two = encode(&bb, Some(&att), &batch(), &opts).unwrap();
        assert_eq!(one.graph.shape(one.logits), &[3, 3]);
        assert_eq!(one.graph.value(one.logits), two.graph.value(two.logits));
    }

    #[test]
    fn rejects_ragged_batches_bad_ids_and_bad_task() {
        let bb = init_backbone(&tiny_cfg(), 3).unwrap();
        let opts = EncodeOptions::eval(0, MaskFeed::Unmasked);
        let ragged = vec![vec![1, 2], vec![3]];
        assert!(encode(&bb, None, &ragged, &opts).is_err());
        let bad_id = vec![vec![1, 99]];
        assert!(encode(&bb, None, &bad_id, &opts).is_err());
        let bad_task = EncodeOptions::eval(1, MaskFeed::Unmasked);
        assert!(encode(&bb, None, &batch(), &bad_task).is_err());
        let too_long = vec![vec![1usize; 7]];
        assert!(encode(&bb, None, &too_long, &opts).is_err());
    }

    #[test]
    fn full_mask_matches_matched_init_pure_sharing_bitwise() {
        // With k = 1 every mask is all-ones, multiplying by exactly 1.0;
        // logits must equal the mask-free clone bit for bit.
        let bb = init_backbone(&tiny_cfg(), 4).unwrap();
        let att = adapter_attachment(AttachMode::Propetl, Sparsity::FULL);
        let share = att.to_only_share();
        let masked = encode(
            &bb,
            Some(&att),
            &batch(),
            &EncodeOptions::eval(0, MaskFeed::FromScores),
        )
        .unwrap();
        let plain = encode(
            &bb,
            Some(&share),
            &batch(),
            &EncodeOptions::eval(0, MaskFeed::Unmasked),
        )
        .unwrap();
        let a = masked.graph.value(masked.logits);
        let b = plain.graph.value(plain.logits);
        for (x, y) in a.iter().zip(b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn fixed_masks_reproduce_from_scores_forward() {
        let bb = init_backbone(&tiny_cfg(), 5).unwrap();
        let att = adapter_attachment(AttachMode::Propetl, Sparsity::ratio(3, 10).unwrap());
        let live = encode(
            &bb,
            Some(&att),
            &batch(),
            &EncodeOptions::eval(0, MaskFeed::FromScores),
        )
        .unwrap();
        let frozen: Vec<Vec<crate::masking::BinaryMask>> =
            (0..2).map(|l| att.layer_masks(l).unwrap()).collect();
        let fixed = encode(
            &bb,
            Some(&att),
            &batch(),
            &EncodeOptions::eval(0, MaskFeed::Fixed(&frozen)),
        )
        .unwrap();
        assert_eq!(live.graph.value(live.logits), fixed.graph.value(fixed.logits));
    }

    #[test]
    fn trainable_handles_cover_requested_groups() {
        let bb = init_backbone(&tiny_cfg(), 6).unwrap();
        let att = adapter_attachment(AttachMode::Propetl, Sparsity::ratio(1, 2).unwrap());
        let out = encode(
            &bb,
            Some(&att),
            &batch(),
            &EncodeOptions {
                task_id: 0,
                masks: MaskFeed::FromScores,
                train_modules: true,
                train_head: true,
                train_backbone: false,
            },
        )
        .unwrap();
        // 2 head tensors + 4 adapter tensors + 2 layers * 2 score slots.
        assert_eq!(out.params.len(), 2 + 4 + 4);
        let mut g = out.graph;
        let labels = vec![0usize, 1, 2];
        let loss = g.cross_entropy(out.logits, &labels).unwrap();
        g.backward(loss).unwrap();
        for (r, node) in &out.params {
            let grad = g.grad(*node).expect("trainable leaf got no gradient");
            assert!(
                grad.iter().any(|&v| v != 0.0),
                "all-zero gradient for {r:?}"
            );
        }
    }

    #[test]
    fn backbone_training_reaches_every_tensor() {
        let bb = init_backbone(&tiny_cfg(), 7).unwrap();
        let out = encode(
            &bb,
            None,
            &batch(),
            &EncodeOptions {
                task_id: 0,
                masks: MaskFeed::Unmasked,
                train_modules: false,
                train_head: true,
                train_backbone: true,
            },
        )
        .unwrap();
        assert_eq!(out.params.len(), bb.tensors().len() + 2);
        let mut g = out.graph;
        let loss = g.cross_entropy(out.logits, &[0, 1, 2]).unwrap();
        g.backward(loss).unwrap();
        // Spot-check a mid-stack projection and the embeddings.
        for (r, node) in &out.params {
            if matches!(r, ParamRef::Backbone { idx: 0 } | ParamRef::Backbone { idx: 4 }) {
                assert!(g.grad(*node).unwrap().iter().any(|&v| v != 0.0), "{r:?}");
            }
        }
    }

    #[test]
    fn prefix_variant_train_and_frozen_forms_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let spec = AttachmentSpec {
            variant_cfg: VariantConfig::Prefix { l: 3, r: None, d: 8 },
            mode: AttachMode::Propetl,
            k: Sparsity::ratio(1, 2).unwrap(),
            num_layers: 2,
            num_tasks: 0,
            combine: CombineMode::Or,
        };
        let att = ProPetlAttachment::build(&spec, &mut rng).unwrap();
        let bb = init_backbone(&tiny_cfg(), 8).unwrap();
        let masks: Vec<Vec<crate::masking::BinaryMask>> =
            (0..2).map(|l| att.layer_masks(l).unwrap()).collect();
        let live = encode(
            &bb,
            Some(&att),
            &batch(),
            &EncodeOptions::eval(0, MaskFeed::Fixed(&masks)),
        )
        .unwrap();

        // Materialize P = P' W exactly as a checkpoint would store it.
        let (l, d) = (3usize, 8usize);
        let p = if let Prototype::Prefix(pp) = att.prototype() {
            pp.derive_p()
        } else {
            unreachable!()
        };
        let frozen_proto = Prototype::Prefix(
            crate::petl::PrefixPrototype::from_materialized(p, l, d).unwrap(),
        );
        let frozen_att = ProPetlAttachment::from_frozen(
            vec![frozen_proto],
            AttachMode::Propetl,
            att.k,
            att.combine,
            2,
            Some(masks.clone()),
            None,
        )
        .unwrap();
        let loaded = encode(
            &bb,
            Some(&frozen_att),
            &batch(),
            &EncodeOptions::eval(0, MaskFeed::Fixed(&masks)),
        )
        .unwrap();
        assert_eq!(live.graph.value(live.logits), loaded.graph.value(loaded.logits));
    }

    #[test]
    fn lora_variant_runs_and_zero_up_matches_no_attachment() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let spec = AttachmentSpec {
            variant_cfg: VariantConfig::Lora { bn: 2, d: 8, alpha: 4.0 },
            mode: AttachMode::Propetl,
            k: Sparsity::ratio(1, 2).unwrap(),
            num_layers: 2,
            num_tasks: 0,
            combine: CombineMode::Or,
        };
        let att = ProPetlAttachment::build(&spec, &mut rng).unwrap();
        let bb = init_backbone(&tiny_cfg(), 9).unwrap();
        let with = encode(
            &bb,
            Some(&att),
            &batch(),
            &EncodeOptions::eval(0, MaskFeed::FromScores),
        )
        .unwrap();
        let without = encode(
            &bb,
            None,
            &batch(),
            &EncodeOptions::eval(0, MaskFeed::Unmasked),
        )
        .unwrap();
        // Up projections start at zero, so the update is exactly zero and
        // residual adds change nothing.
        assert_eq!(with.graph.value(with.logits), without.graph.value(without.logits));
    }

    #[test]
    fn multi_task_encode_registers_only_this_tasks_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let spec = AttachmentSpec {
            variant_cfg: VariantConfig::Adapter { bn: 4, d: 8, nonlin: Nonlinearity::Relu },
            mode: AttachMode::Propetl,
            k: Sparsity::ratio(3, 10).unwrap(),
            num_layers: 2,
            num_tasks: 2,
            combine: CombineMode::Or,
        };
        let att = ProPetlAttachment::build(&spec, &mut rng).unwrap();
        let cfg = TransformerConfig { num_classes: vec![3, 2], ..tiny_cfg() };
        let bb = init_backbone(&cfg, 10).unwrap();
        let out = encode(
            &bb,
            Some(&att),
            &batch(),
            &EncodeOptions {
                task_id: 1,
                masks: MaskFeed::FromScores,
                train_modules: true,
                train_head: true,
                train_backbone: false,
            },
        )
        .unwrap();
        let task_refs: Vec<_> = out
            .params
            .iter()
            .filter_map(|(r, _)| match r {
                ParamRef::Attach(AttachmentPath::TaskScore { task, .. }) => Some(*task),
                _ => None,
            })
            .collect();
        assert!(!task_refs.is_empty());
        assert!(task_refs.iter().all(|&t| t == 1));
        assert!(out
            .params
            .iter()
            .all(|(r, _)| !matches!(r, ParamRef::HeadW { task: 0 } | ParamRef::HeadB { task: 0 })));
    }

    #[test]
    fn mode_mask_feed_mismatches_are_rejected() {
        let bb = init_backbone(&tiny_cfg(), 11).unwrap();
        let share = adapter_attachment(AttachMode::OnlyShare, Sparsity::FULL);
        // Pure sharing cannot binarize scores it does not have.
        assert!(encode(
            &bb,
            Some(&share),
            &batch(),
            &EncodeOptions::eval(0, MaskFeed::FromScores)
        )
        .is_err());
        // A masked mode cannot run unmasked.
        let masked = adapter_attachment(AttachMode::Propetl, Sparsity::ratio(1, 2).unwrap());
        assert!(encode(
            &bb,
            Some(&masked),
            &batch(),
            &EncodeOptions::eval(0, MaskFeed::Unmasked)
        )
        .is_err());
        // Masks without an attachment make no sense.
        assert!(encode(&bb, None, &batch(), &EncodeOptions::eval(0, MaskFeed::FromScores))
            .is_err());
    }
}
