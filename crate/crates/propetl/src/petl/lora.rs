//! Low-rank residual updates on the attention query and value projections:
//! `h + alpha * x W_down W_up` with one down/up pair per projection.

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use rand::Rng;

#[derive(Debug, Clone)]
pub struct LoraPrototype {
    pub q_down: Tensor, // d x bn
    pub q_up: Tensor,   // bn x d
    pub v_down: Tensor, // d x bn
    pub v_up: Tensor,   // bn x d
    pub alpha: f32,
    pub bn: usize,
    pub d: usize,
}

impl LoraPrototype {
    /// Down projections ~ N(0, 0.02^2); up projections start at zero so the
    /// update is exactly zero before any training step.
    pub fn new(bn: usize, d: usize, alpha: f32, rng: &mut impl Rng) -> Result<Self> {
        if bn == 0 || d == 0 {
            return Err(Error::invalid("lora", "bn and d must be positive"));
        }
        if !alpha.is_finite() || alpha <= 0.0 {
            return Err(Error::invalid("lora", format!("alpha must be finite positive, got {alpha}")));
        }
        let mut q_down = Tensor::normal(vec![d, bn], 0.02, rng);
        let mut q_up = Tensor::zeros(vec![bn, d]);
        let mut v_down = Tensor::normal(vec![d, bn], 0.02, rng);
        let mut v_up = Tensor::zeros(vec![bn, d]);
        q_down.set_requires_grad(true);
        q_up.set_requires_grad(true);
        v_down.set_requires_grad(true);
        v_up.set_requires_grad(true);
        Ok(LoraPrototype { q_down, q_up, v_down, v_up, alpha, bn, d })
    }
}

/// The low-rank update `alpha * x W_down W_up`, shape [rows, d].
pub fn lora_delta(
    g: &mut Graph,
    x: NodeId,
    w_down: NodeId,
    w_up: NodeId,
    alpha: f32,
) -> Result<NodeId> {
    let z = g.matmul(x, w_down)?;
    let z = g.matmul(z, w_up)?;
    g.scale(z, alpha)
}

/// Residual form: `h + alpha * x W_down W_up`.
pub fn lora_forward(
    g: &mut Graph,
    h: NodeId,
    x: NodeId,
    w_down: NodeId,
    w_up: NodeId,
    alpha: f32,
) -> Result<NodeId> {
    let delta = lora_delta(g, x, w_down, w_up, alpha)?;
    g.add(h, delta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hand_computed_update() {
        // d=2, bn=1: x=[1,0], W_down=[[1],[0]], W_up=[[1,1]], alpha=2,
        // h=[0,0]. x W_down = [1], times W_up = [1,1], scaled = [2,2].
        let mut g = Graph::new();
        let h = g.leaf_parts(vec![1, 2], vec![0.0, 0.0], false);
        let x = g.leaf_parts(vec![1, 2], vec![1.0, 0.0], false);
        let wd = g.leaf_parts(vec![2, 1], vec![1.0, 0.0], true);
        let wu = g.leaf_parts(vec![1, 2], vec![1.0, 1.0], true);
        let out = lora_forward(&mut g, h, x, wd, wu, 2.0).unwrap();
        assert_eq!(g.value(out), &[2.0, 2.0]);
    }

    #[test]
    fn zero_up_projection_means_zero_update() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let proto = LoraPrototype::new(4, 8, 16.0, &mut rng).unwrap();
        assert!(proto.q_up.data().iter().all(|&v| v == 0.0));
        let hv = Tensor::uniform(vec![2, 8], -1.0, 1.0, &mut rng);
        let xv = Tensor::uniform(vec![2, 8], -1.0, 1.0, &mut rng);
        let mut g = Graph::new();
        let h = g.leaf(&hv);
        let x = g.leaf(&xv);
        let wd = g.leaf(&proto.q_down);
        let wu = g.leaf(&proto.q_up);
        let out = lora_forward(&mut g, h, x, wd, wu, proto.alpha).unwrap();
        assert_eq!(g.value(out), hv.data());
    }

    #[test]
    fn update_is_exactly_linear_in_alpha_under_power_of_two_scaling() {
        // Doubling alpha is an exact exponent bump in f32, so the deltas must
        // match bit for bit.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xv = Tensor::uniform(vec![3, 6], -1.0, 1.0, &mut rng);
        let wdv = Tensor::uniform(vec![6, 2], -0.5, 0.5, &mut rng);
        let wuv = Tensor::uniform(vec![2, 6], -0.5, 0.5, &mut rng);
        let run = |alpha: f32| -> Vec<f32> {
            let mut g = Graph::new();
            let x = g.leaf(&xv);
            let wd = g.leaf(&wdv);
            let wu = g.leaf(&wuv);
            let d = lora_delta(&mut g, x, wd, wu, alpha).unwrap();
            g.value(d).to_vec()
        };
        let base = run(2.0);
        let doubled = run(4.0);
        for (b, d) in base.iter().zip(&doubled) {
            assert_eq!((b * 2.0).to_bits(), d.to_bits());
        }
    }

    #[test]
    fn matches_scalar_reference_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (rows, d, bn) = (2, 6, 3);
        let alpha = 1.5f32;
        let hv = Tensor::uniform(vec![rows, d], -1.0, 1.0, &mut rng);
        let xv = Tensor::uniform(vec![rows, d], -1.0, 1.0, &mut rng);
        let wdv = Tensor::uniform(vec![d, bn], -0.5, 0.5, &mut rng);
        let wuv = Tensor::uniform(vec![bn, d], -0.5, 0.5, &mut rng);

        let mut expect = vec![0.0f32; rows * d];
        for r in 0..rows {
            let mut mid = vec![0.0f32; bn];
            for j in 0..bn {
                let mut acc = 0.0f64;
                for i in 0..d {
                    acc += xv.data()[r * d + i] as f64 * wdv.data()[i * bn + j] as f64;
                }
                mid[j] = acc as f32;
            }
            for i in 0..d {
                let mut acc = 0.0f64;
                for j in 0..bn {
                    acc += mid[j] as f64 * wuv.data()[j * d + i] as f64;
                }
                expect[r * d + i] = hv.data()[r * d + i] + alpha * acc as f32;
            }
        }

        let mut g = Graph::new();
        let h = g.leaf(&hv);
        let x = g.leaf(&xv);
        let wd = g.leaf(&wdv);
        let wu = g.leaf(&wuv);
        let out = lora_forward(&mut g, h, x, wd, wu, alpha).unwrap();
        for (a, e) in g.value(out).iter().zip(&expect) {
            assert!((a - e).abs() <= 1e-5, "{a} vs {e}");
        }
    }
}
