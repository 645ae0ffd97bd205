//! Prefix tuning: `l` learned key/value rows prepended to every attention
//! head's keys and values. During training the prefix is reparameterized as
//! `P = P' W` (l x r times r x 2d) for stability; the checkpoint keeps only
//! the materialized `P`, so the stored cost is 2*l*d regardless of `r`.

use crate::autodiff::{linalg, Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use rand::Rng;

#[derive(Debug, Clone)]
pub enum PrefixParams {
    /// Training form: P' (l x r) and W (r x 2d), both trainable.
    Train { p_prime: Tensor, w: Tensor },
    /// Loaded form: the materialized prefix P (l x 2d).
    Frozen { p: Tensor },
}

#[derive(Debug, Clone)]
pub struct PrefixPrototype {
    pub params: PrefixParams,
    pub l: usize,
    pub r: usize,
    pub d: usize,
}

impl PrefixPrototype {
    pub fn new(l: usize, r: usize, d: usize, rng: &mut impl Rng) -> Result<Self> {
        if l == 0 || r == 0 || d == 0 {
            return Err(Error::invalid("prefix", "l, r, d must be positive"));
        }
        let mut p_prime = Tensor::normal(vec![l, r], 0.02, rng);
        let mut w = Tensor::normal(vec![r, 2 * d], 0.02, rng);
        p_prime.set_requires_grad(true);
        w.set_requires_grad(true);
        Ok(PrefixPrototype { params: PrefixParams::Train { p_prime, w }, l, r, d })
    }

    pub fn from_materialized(p: Tensor, l: usize, d: usize) -> Result<Self> {
        if p.shape() != [l, 2 * d] {
            return Err(Error::ShapeMismatch {
                op: "prefix",
                lhs: vec![l, 2 * d],
                rhs: p.shape().to_vec(),
            });
        }
        Ok(PrefixPrototype { params: PrefixParams::Frozen { p }, l, r: 2 * l, d })
    }

    /// The materialized prefix P (l x 2d): recomputed from P' W in training
    /// form, a plain copy in frozen form.
    pub fn derive_p(&self) -> Tensor {
        match &self.params {
            PrefixParams::Train { p_prime, w } => {
                let out = linalg::matmul(p_prime.data(), w.data(), self.l, self.r, 2 * self.d);
                Tensor::new(vec![self.l, 2 * self.d], out).expect("prefix shape")
            }
            PrefixParams::Frozen { p } => p.clone(),
        }
    }

    /// P split into its key half and value half, each l x d.
    pub fn derive_kv(&self) -> (Tensor, Tensor) {
        let p = self.derive_p();
        let (l, d) = (self.l, self.d);
        let mut pk = vec![0.0f32; l * d];
        let mut pv = vec![0.0f32; l * d];
        for row in 0..l {
            pk[row * d..(row + 1) * d]
                .copy_from_slice(&p.data()[row * 2 * d..row * 2 * d + d]);
            pv[row * d..(row + 1) * d]
                .copy_from_slice(&p.data()[row * 2 * d + d..(row + 1) * 2 * d]);
        }
        (
            Tensor::new(vec![l, d], pk).expect("prefix key shape"),
            Tensor::new(vec![l, d], pv).expect("prefix value shape"),
        )
    }

    /// Graph nodes for the masked key/value prefix halves of one head slice,
    /// built from the training-form leaves so gradients reach P' and W.
    pub fn kv_nodes(
        &self,
        g: &mut Graph,
        p_prime: NodeId,
        w: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let p = g.matmul(p_prime, w)?;
        let pk = g.slice_cols(p, 0, self.d)?;
        let pv = g.slice_cols(p, self.d, self.d)?;
        Ok((pk, pv))
    }
}

/// Scaled dot-product attention for one head with optional prefix rows.
/// `q`,`k`,`v` are [S, dh]; `prefix_k`,`prefix_v` are [l, dh] and are
/// prepended to keys/values, so attention normalizes over S+l slots. The
/// query side is untouched: scores = q (concat(pk,k))^T / sqrt(dh).
pub fn prefix_attention(
    g: &mut Graph,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    prefix_k: Option<NodeId>,
    prefix_v: Option<NodeId>,
) -> Result<NodeId> {
    let (keys, vals) = match (prefix_k, prefix_v) {
        (Some(pk), Some(pv)) => (g.concat_rows(&[pk, k])?, g.concat_rows(&[pv, v])?),
        (None, None) => (k, v),
        _ => {
            return Err(Error::invalid(
                "prefix_attention",
                "prefix key and value must be given together",
            ))
        }
    };
    let dh = g.shape(q)[1];
    let logits = g.matmul_nt(q, keys)?;
    let scaled = g.scale(logits, 1.0 / (dh as f32).sqrt())?;
    let attn = g.softmax_lastdim(scaled)?;
    g.matmul(attn, vals)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn derive_p_is_the_product_and_split_halves_agree() {
        // l=1, r=2, d=1: P' = [1, 2], W = [[1, 2], [3, 4]] -> P = [7, 10].
        let p_prime = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let w = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let proto =
            PrefixPrototype { params: PrefixParams::Train { p_prime, w }, l: 1, r: 2, d: 1 };
        assert_eq!(proto.derive_p().data(), &[7.0, 10.0]);
        let (pk, pv) = proto.derive_kv();
        assert_eq!(pk.data(), &[7.0]);
        assert_eq!(pv.data(), &[10.0]);
    }

    #[test]
    fn hand_computed_single_slot_prefix() {
        // dh=1, S=1, l=1. q=[1], k=[1], v=[2], pk=[0], pv=[0].
        // Logits [q*pk, q*k] = [0, 1]; softmax = [1, e]/(1+e); output =
        // 0/(1+e) + 2e/(1+e) = 1.4621171572600098.
        let mut g = Graph::new();
        let q = g.leaf_parts(vec![1, 1], vec![1.0], false);
        let k = g.leaf_parts(vec![1, 1], vec![1.0], false);
        let v = g.leaf_parts(vec![1, 1], vec![2.0], false);
        let pk = g.leaf_parts(vec![1, 1], vec![0.0], true);
        let pv = g.leaf_parts(vec![1, 1], vec![0.0], true);
        let out = prefix_attention(&mut g, q, k, v, Some(pk), Some(pv)).unwrap();
        let got = g.value(out)[0] as f64;
        assert!((got - 1.462_117_157_260_009_8).abs() < 1e-6, "{got}");
    }

    #[test]
    fn zeroed_prefix_is_not_an_identity() {
        // Unlike adapter and LoRA, a fully pruned prefix still shifts the
        // output: the zero rows take softmax mass away from the real slots.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let qv = Tensor::uniform(vec![3, 4], -1.0, 1.0, &mut rng);
        let kv = Tensor::uniform(vec![3, 4], -1.0, 1.0, &mut rng);
        let vv = Tensor::uniform(vec![3, 4], -1.0, 1.0, &mut rng);
        let mut g = Graph::new();
        let q = g.leaf(&qv);
        let k = g.leaf(&kv);
        let v = g.leaf(&vv);
        let plain = prefix_attention(&mut g, q, k, v, None, None).unwrap();
        let pk = g.leaf_parts(vec![2, 4], vec![0.0; 8], false);
        let pv = g.leaf_parts(vec![2, 4], vec![0.0; 8], false);
        let with_zero_prefix = prefix_attention(&mut g, q, k, v, Some(pk), Some(pv)).unwrap();
        assert_ne!(g.value(plain), g.value(with_zero_prefix));
    }

    #[test]
    fn no_prefix_matches_scalar_reference_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let (s, dh, l) = (3, 4, 2);
        let qv = Tensor::uniform(vec![s, dh], -1.0, 1.0, &mut rng);
        let kv = Tensor::uniform(vec![s, dh], -1.0, 1.0, &mut rng);
        let vv = Tensor::uniform(vec![s, dh], -1.0, 1.0, &mut rng);
        let pkv = Tensor::uniform(vec![l, dh], -1.0, 1.0, &mut rng);
        let pvv = Tensor::uniform(vec![l, dh], -1.0, 1.0, &mut rng);

        // Scalar reference with the prefix rows prepended.
        let total = l + s;
        let mut keys = pkv.data().to_vec();
        keys.extend_from_slice(kv.data());
        let mut vals = pvv.data().to_vec();
        vals.extend_from_slice(vv.data());
        let scale = 1.0 / (dh as f64).sqrt();
        let mut expect = vec![0.0f64; s * dh];
        for i in 0..s {
            let mut logits = vec![0.0f64; total];
            for j in 0..total {
                let mut acc = 0.0f64;
                for c in 0..dh {
                    acc += qv.data()[i * dh + c] as f64 * keys[j * dh + c] as f64;
                }
                logits[j] = acc * scale;
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|&x| (x - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            for j in 0..total {
                let p = exps[j] / z;
                for c in 0..dh {
                    expect[i * dh + c] += p * vals[j * dh + c] as f64;
                }
            }
        }

        let mut g = Graph::new();
        let q = g.leaf(&qv);
        let k = g.leaf(&kv);
        let v = g.leaf(&vv);
        let pk = g.leaf(&pkv);
        let pv = g.leaf(&pvv);
        let out = prefix_attention(&mut g, q, k, v, Some(pk), Some(pv)).unwrap();
        for (a, e) in g.value(out).iter().zip(&expect) {
            assert!((*a as f64 - e).abs() < 1e-5, "{a} vs {e}");
        }
    }

    #[test]
    fn prefix_key_without_value_is_rejected() {
        let mut g = Graph::new();
        let q = g.leaf_parts(vec![1, 1], vec![1.0], false);
        let k = g.leaf_parts(vec![1, 1], vec![1.0], false);
        let v = g.leaf_parts(vec![1, 1], vec![1.0], false);
        let pk = g.leaf_parts(vec![1, 1], vec![0.0], false);
        assert!(prefix_attention(&mut g, q, k, v, Some(pk), None).is_err());
    }
}
