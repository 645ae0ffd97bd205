//! Bottleneck adapter: a residual two-layer MLP inserted after each
//! transformer feed-forward block. `h + f(h W_down + b_down) W_up + b_up`.

use super::Nonlinearity;
use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use rand::Rng;

#[derive(Debug, Clone)]
pub struct AdapterPrototype {
    pub w_down: Tensor, // d x bn
    pub b_down: Tensor, // bn
    pub w_up: Tensor,   // bn x d
    pub b_up: Tensor,   // d
    pub nonlin: Nonlinearity,
    pub bn: usize,
    pub d: usize,
}

impl AdapterPrototype {
    /// Weights ~ N(0, 0.02^2), biases zero, matching the backbone's own
    /// initialization scale.
    pub fn new(bn: usize, d: usize, nonlin: Nonlinearity, rng: &mut impl Rng) -> Result<Self> {
        if bn == 0 || d == 0 {
            return Err(Error::invalid("adapter", "bn and d must be positive"));
        }
        let mut w_down = Tensor::normal(vec![d, bn], 0.02, rng);
        let mut b_down = Tensor::zeros(vec![bn]);
        let mut w_up = Tensor::normal(vec![bn, d], 0.02, rng);
        let mut b_up = Tensor::zeros(vec![d]);
        w_down.set_requires_grad(true);
        b_down.set_requires_grad(true);
        w_up.set_requires_grad(true);
        b_up.set_requires_grad(true);
        Ok(AdapterPrototype { w_down, b_down, w_up, b_up, nonlin, bn, d })
    }
}

/// Graph handles to one materialized (already masked) adapter.
#[derive(Debug, Clone, Copy)]
pub struct AdapterNodes {
    pub w_down: NodeId,
    pub b_down: NodeId,
    pub w_up: NodeId,
    pub b_up: NodeId,
    pub nonlin: Nonlinearity,
}

/// Residual bottleneck applied to activations `h` of shape [rows, d].
pub fn adapter_forward(g: &mut Graph, h: NodeId, n: &AdapterNodes) -> Result<NodeId> {
    let z = g.matmul(h, n.w_down)?;
    let z = g.add_bias(z, n.b_down)?;
    let z = match n.nonlin {
        Nonlinearity::Relu => g.relu(z)?,
        Nonlinearity::Gelu => g.gelu(z)?,
    };
    let z = g.matmul(z, n.w_up)?;
    let z = g.add_bias(z, n.b_up)?;
    g.add(h, z)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(g: &mut Graph, shape: Vec<usize>, v: Vec<f32>) -> NodeId {
        g.leaf_parts(shape, v, true)
    }

    #[test]
    fn hand_computed_bottleneck() {
        // d=2, bn=1: h=[1,0], W_down=[[1],[0]], W_up=[[2,0]], zero biases,
        // relu. Down: 1*1+0*0 = 1, relu(1)=1, up: [2,0], residual: [3,0].
        let mut g = Graph::new();
        let h = leaf(&mut g, vec![1, 2], vec![1.0, 0.0]);
        let n = AdapterNodes {
            w_down: leaf(&mut g, vec![2, 1], vec![1.0, 0.0]),
            b_down: leaf(&mut g, vec![1], vec![0.0]),
            w_up: leaf(&mut g, vec![1, 2], vec![2.0, 0.0]),
            b_up: leaf(&mut g, vec![2], vec![0.0, 0.0]),
            nonlin: Nonlinearity::Relu,
        };
        let out = adapter_forward(&mut g, h, &n).unwrap();
        assert_eq!(g.value(out), &[3.0, 0.0]);
    }

    #[test]
    fn zeroed_weights_pass_input_through_unchanged() {
        // A fully pruned adapter (all-zero masked weights, zero biases) must
        // leave activations bitwise intact: the residual adds exact zeros.
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let hv = Tensor::uniform(vec![3, 4], 0.5, 1.5, &mut rng);
        let mut g = Graph::new();
        let h = g.leaf(&hv);
        let n = AdapterNodes {
            w_down: leaf(&mut g, vec![4, 2], vec![0.0; 8]),
            b_down: leaf(&mut g, vec![2], vec![0.0; 2]),
            w_up: leaf(&mut g, vec![2, 4], vec![0.0; 8]),
            b_up: leaf(&mut g, vec![4], vec![0.0; 4]),
            nonlin: Nonlinearity::Gelu,
        };
        let out = adapter_forward(&mut g, h, &n).unwrap();
        assert_eq!(g.value(out), hv.data());
    }

    #[test]
    fn matches_scalar_reference_loops() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let (rows, d, bn) = (3, 8, 4);
        let hv = Tensor::uniform(vec![rows, d], -1.0, 1.0, &mut rng);
        let wd = Tensor::uniform(vec![d, bn], -0.5, 0.5, &mut rng);
        let bd = Tensor::uniform(vec![bn], -0.1, 0.1, &mut rng);
        let wu = Tensor::uniform(vec![bn, d], -0.5, 0.5, &mut rng);
        let bu = Tensor::uniform(vec![d], -0.1, 0.1, &mut rng);

        let mut expect = vec![0.0f32; rows * d];
        for r in 0..rows {
            let mut mid = vec![0.0f32; bn];
            for j in 0..bn {
                let mut acc = 0.0f64;
                for i in 0..d {
                    acc += hv.data()[r * d + i] as f64 * wd.data()[i * bn + j] as f64;
                }
                let z = (acc as f32 + bd.data()[j]).max(0.0);
                mid[j] = z;
            }
            for i in 0..d {
                let mut acc = 0.0f64;
                for j in 0..bn {
                    acc += mid[j] as f64 * wu.data()[j * d + i] as f64;
                }
                expect[r * d + i] = hv.data()[r * d + i] + (acc as f32 + bu.data()[i]);
            }
        }

        let mut g = Graph::new();
        let h = g.leaf(&hv);
        let n = AdapterNodes {
            w_down: g.leaf(&wd),
            b_down: g.leaf(&bd),
            w_up: g.leaf(&wu),
            b_up: g.leaf(&bu),
            nonlin: Nonlinearity::Relu,
        };
        let out = adapter_forward(&mut g, h, &n).unwrap();
        for (a, e) in g.value(out).iter().zip(&expect) {
            assert!((a - e).abs() <= 1e-5, "{a} vs {e}");
        }
    }
}
