//! Parameter-efficient modules built around one shared prototype. A single
//! set of module weights serves every layer; what differs per layer (and
//! per task) is a binary mask that selects a sub-network of the prototype.

mod adapter;
mod attachment;
mod lora;
mod prefix;

pub use adapter::{adapter_forward, AdapterNodes, AdapterPrototype};
pub use attachment::{AttachMode, AttachmentPath, AttachmentSpec, ProPetlAttachment};
pub use lora::{lora_delta, lora_forward, LoraPrototype};
pub use prefix::{prefix_attention, PrefixParams, PrefixPrototype};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::masking::BinaryMask;
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Adapter,
    Lora,
    Prefix,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Adapter => "adapter",
            Variant::Lora => "lora",
            Variant::Prefix => "prefix",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "adapter" => Ok(Variant::Adapter),
            "lora" => Ok(Variant::Lora),
            "prefix" => Ok(Variant::Prefix),
            other => Err(Error::invalid("variant", format!("unknown variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Nonlinearity {
    Relu,
    Gelu,
}

impl Nonlinearity {
    pub fn as_str(&self) -> &'static str {
        match self {
            Nonlinearity::Relu => "relu",
            Nonlinearity::Gelu => "gelu",
        }
    }
}

impl FromStr for Nonlinearity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "relu" => Ok(Nonlinearity::Relu),
            "gelu" => Ok(Nonlinearity::Gelu),
            other => Err(Error::invalid("nonlinearity", format!("unknown {other:?}"))),
        }
    }
}

/// Construction-time description of one prototype module.
#[derive(Debug, Clone)]
pub enum VariantConfig {
    Adapter { bn: usize, d: usize, nonlin: Nonlinearity },
    Lora { bn: usize, d: usize, alpha: f32 },
    /// `r` is the reparameterization width; defaults to 2*l when None.
    Prefix { l: usize, r: Option<usize>, d: usize },
}

impl VariantConfig {
    pub fn variant(&self) -> Variant {
        match self {
            VariantConfig::Adapter { .. } => Variant::Adapter,
            VariantConfig::Lora { .. } => Variant::Lora,
            VariantConfig::Prefix { .. } => Variant::Prefix,
        }
    }
}

#[derive(Debug, Clone)]
pub enum Prototype {
    Adapter(AdapterPrototype),
    Lora(LoraPrototype),
    Prefix(PrefixPrototype),
}

impl Prototype {
    pub fn build(cfg: &VariantConfig, rng: &mut impl rand::Rng) -> Result<Prototype> {
        match cfg {
            VariantConfig::Adapter { bn, d, nonlin } => {
                Ok(Prototype::Adapter(AdapterPrototype::new(*bn, *d, *nonlin, rng)?))
            }
            VariantConfig::Lora { bn, d, alpha } => {
                Ok(Prototype::Lora(LoraPrototype::new(*bn, *d, *alpha, rng)?))
            }
            VariantConfig::Prefix { l, r, d } => {
                Ok(Prototype::Prefix(PrefixPrototype::new(*l, r.unwrap_or(2 * l), *d, rng)?))
            }
        }
    }

    pub fn variant(&self) -> Variant {
        match self {
            Prototype::Adapter(_) => Variant::Adapter,
            Prototype::Lora(_) => Variant::Lora,
            Prototype::Prefix(_) => Variant::Prefix,
        }
    }

    pub fn d(&self) -> usize {
        match self {
            Prototype::Adapter(p) => p.d,
            Prototype::Lora(p) => p.d,
            Prototype::Prefix(p) => p.d,
        }
    }

    /// Bottleneck width for adapter/LoRA, prefix length for prefix.
    pub fn size(&self) -> usize {
        match self {
            Prototype::Adapter(p) => p.bn,
            Prototype::Lora(p) => p.bn,
            Prototype::Prefix(p) => p.l,
        }
    }

    /// The parameter count n that one stored copy of the module costs:
    /// adapter 2*bn*d + bn + d, LoRA 4*bn*d (a down/up pair at each of the
    /// query and value projections), prefix 2*l*d (the reparameterized
    /// prefix that survives training).
    pub fn param_count(&self) -> u64 {
        match self {
            Prototype::Adapter(p) => {
                2 * (p.bn as u64) * (p.d as u64) + p.bn as u64 + p.d as u64
            }
            Prototype::Lora(p) => 4 * (p.bn as u64) * (p.d as u64),
            Prototype::Prefix(p) => 2 * (p.l as u64) * (p.d as u64),
        }
    }

    /// Shapes of the maskable slots, in canonical order. Biases are never
    /// masked; prefix masks sit on the derived key/value activations.
    pub fn mask_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        match self {
            Prototype::Adapter(p) => vec![
                ("w_down", vec![p.d, p.bn]),
                ("w_up", vec![p.bn, p.d]),
            ],
            Prototype::Lora(p) => vec![
                ("q_down", vec![p.d, p.bn]),
                ("q_up", vec![p.bn, p.d]),
                ("v_down", vec![p.d, p.bn]),
                ("v_up", vec![p.bn, p.d]),
            ],
            Prototype::Prefix(p) => vec![
                ("p_k", vec![p.l, p.d]),
                ("p_v", vec![p.l, p.d]),
            ],
        }
    }

    /// Trainable tensors in canonical order, for optimizers and storage.
    pub fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            Prototype::Adapter(p) => vec![
                ("w_down", &p.w_down),
                ("b_down", &p.b_down),
                ("w_up", &p.w_up),
                ("b_up", &p.b_up),
            ],
            Prototype::Lora(p) => vec![
                ("q_down", &p.q_down),
                ("q_up", &p.q_up),
                ("v_down", &p.v_down),
                ("v_up", &p.v_up),
            ],
            Prototype::Prefix(p) => match &p.params {
                PrefixParams::Train { p_prime, w } => {
                    vec![("p_prime", p_prime), ("w_reparam", w)]
                }
                PrefixParams::Frozen { p } => vec![("p", p)],
            },
        }
    }

    pub fn tensor_mut(&mut self, idx: usize) -> &mut Tensor {
        match self {
            Prototype::Adapter(p) => match idx {
                0 => &mut p.w_down,
                1 => &mut p.b_down,
                2 => &mut p.w_up,
                3 => &mut p.b_up,
                _ => panic!("adapter tensor index {idx}"),
            },
            Prototype::Lora(p) => match idx {
                0 => &mut p.q_down,
                1 => &mut p.q_up,
                2 => &mut p.v_down,
                3 => &mut p.v_up,
                _ => panic!("lora tensor index {idx}"),
            },
            Prototype::Prefix(p) => match (&mut p.params, idx) {
                (PrefixParams::Train { p_prime, .. }, 0) => p_prime,
                (PrefixParams::Train { w, .. }, 1) => w,
                (PrefixParams::Frozen { p }, 0) => p,
                _ => panic!("prefix tensor index {idx}"),
            },
        }
    }
}

/// Elementwise product of the prototype with one mask per maskable slot.
/// Biases pass through untouched; for prefix, the derived prefix is split
/// into its key and value halves and each half is masked.
pub fn materialize_subnetwork(proto: &Prototype, masks: &[BinaryMask]) -> Result<Vec<Tensor>> {
    let shapes = proto.mask_shapes();
    if masks.len() != shapes.len() {
        return Err(Error::invalid(
            "materialize_subnetwork",
            format!("{} masks for {} maskable slots", masks.len(), shapes.len()),
        ));
    }
    for ((name, shape), mask) in shapes.iter().zip(masks) {
        if mask.shape() != shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "materialize_subnetwork",
                lhs: shape.clone(),
                rhs: mask.shape().to_vec(),
            });
        }
        let _ = name;
    }
    let masked = |t: &Tensor, m: &BinaryMask| -> Result<Tensor> {
        let mv = Tensor::new(m.shape().to_vec(), m.to_f32_vec())?;
        t.mul_elementwise(&mv)
    };
    match proto {
        Prototype::Adapter(p) => Ok(vec![
            masked(&p.w_down, &masks[0])?,
            p.b_down.clone(),
            masked(&p.w_up, &masks[1])?,
            p.b_up.clone(),
        ]),
        Prototype::Lora(p) => Ok(vec![
            masked(&p.q_down, &masks[0])?,
            masked(&p.q_up, &masks[1])?,
            masked(&p.v_down, &masks[2])?,
            masked(&p.v_up, &masks[3])?,
        ]),
        Prototype::Prefix(p) => {
            let (pk, pv) = p.derive_kv();
            Ok(vec![masked(&pk, &masks[0])?, masked(&pv, &masks[1])?])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::Sparsity;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn param_counts_per_variant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Prototype::build(
            &VariantConfig::Adapter { bn: 64, d: 768, nonlin: Nonlinearity::Relu },
            &mut rng,
        )
        .unwrap();
        assert_eq!(a.param_count(), 99_136);
        let l = Prototype::build(&VariantConfig::Lora { bn: 32, d: 768, alpha: 48.0 }, &mut rng)
            .unwrap();
        assert_eq!(l.param_count(), 98_304);
        let p = Prototype::build(&VariantConfig::Prefix { l: 64, r: None, d: 768 }, &mut rng)
            .unwrap();
        assert_eq!(p.param_count(), 98_304);
        // Reparameterization width defaults to 2*l and never changes the
        // stored parameter count.
        if let Prototype::Prefix(pp) = &p {
            assert_eq!(pp.r, 128);
        } else {
            unreachable!()
        }
    }

    #[test]
    fn materialize_applies_masks_and_skips_biases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let proto = Prototype::build(
            &VariantConfig::Adapter { bn: 2, d: 1, nonlin: Nonlinearity::Relu },
            &mut rng,
        )
        .unwrap();
        // Overwrite with known values: w_down 1x2 = [1, 2], w_up 2x1 = [3, 4].
        let mut proto = proto;
        if let Prototype::Adapter(a) = &mut proto {
            a.w_down = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
            a.w_up = Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap();
            a.b_down = Tensor::new(vec![2], vec![5.0, 6.0]).unwrap();
        }
        let m0 = BinaryMask::from_bools("w_down", vec![1, 2], &[true, false]).unwrap();
        let m1 = BinaryMask::from_bools("w_up", vec![2, 1], &[false, true]).unwrap();
        let out = materialize_subnetwork(&proto, &[m0, m1]).unwrap();
        assert_eq!(out[0].data(), &[1.0, 0.0]);
        assert_eq!(out[1].data(), &[5.0, 6.0]); // bias untouched
        assert_eq!(out[2].data(), &[0.0, 4.0]);
    }

    #[test]
    fn materialize_with_full_mask_is_bitwise_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let proto = Prototype::build(
            &VariantConfig::Adapter { bn: 4, d: 6, nonlin: Nonlinearity::Gelu },
            &mut rng,
        )
        .unwrap();
        let masks: Vec<BinaryMask> = proto
            .mask_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let scores = Tensor::uniform(shape.clone(), -0.1, 0.1, &mut rng);
                crate::masking::threshold_topk_values(name, &shape, scores.data(), Sparsity::FULL)
                    .unwrap()
                    .rename(format!("{name}/{n}"))
            })
            .collect();
        let out = materialize_subnetwork(&proto, &masks).unwrap();
        if let Prototype::Adapter(a) = &proto {
            assert_eq!(out[0].data(), a.w_down.data());
            assert_eq!(out[2].data(), a.w_up.data());
        }
    }
}
