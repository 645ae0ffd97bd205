//! Parameter updates. AdamW keeps per-parameter moment state keyed by the
//! stable parameter handle, created lazily on first touch; all moment
//! arithmetic runs in f64 so update order never affects results.

use crate::autodiff::Tensor;
use crate::backbone::ParamRef;
use crate::error::{Error, Result};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    AdamW { beta1: f64, beta2: f64, eps: f64, weight_decay: f64 },
}

impl OptimizerKind {
    pub fn adamw() -> Self {
        OptimizerKind::AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }

    pub fn validate(&self) -> Result<()> {
        if let OptimizerKind::AdamW { beta1, beta2, eps, weight_decay } = *self {
            let ok = (0.0..1.0).contains(&beta1)
                && (0.0..1.0).contains(&beta2)
                && eps > 0.0
                && weight_decay >= 0.0;
            if !ok {
                return Err(Error::config(format!(
                    "bad AdamW hyperparameters: beta1={beta1} beta2={beta2} eps={eps} wd={weight_decay}"
                )));
            }
        }
        Ok(())
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adamw" => Ok(OptimizerKind::adamw()),
            other => Err(Error::config(format!("unknown optimizer {other:?}"))),
        }
    }
}

struct MomentState {
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

pub struct Optimizer {
    kind: OptimizerKind,
    state: BTreeMap<ParamRef, MomentState>,
}

/// Mask scores carry no weight decay; everything else does.
pub fn decays(param: ParamRef) -> bool {
    use crate::petl::AttachmentPath;
    !matches!(
        param,
        ParamRef::Attach(AttachmentPath::LayerScore { .. })
            | ParamRef::Attach(AttachmentPath::TaskScore { .. })
    )
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Result<Self> {
        kind.validate()?;
        Ok(Optimizer { kind, state: BTreeMap::new() })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    /// One update of `tensor` by `grad` at learning rate `lr`. Decoupled
    /// weight decay is applied only when `decay` is set.
    pub fn step(
        &mut self,
        param: ParamRef,
        tensor: &mut Tensor,
        grad: &[f32],
        lr: f64,
        decay: bool,
    ) -> Result<()> {
        if grad.len() != tensor.numel() {
            return Err(Error::invalid("optimizer", "gradient length mismatch"));
        }
        if !lr.is_finite() || lr < 0.0 {
            return Err(Error::invalid("optimizer", "learning rate must be finite and >= 0"));
        }
        match self.kind {
            OptimizerKind::Sgd => {
                let data = tensor.data_mut();
                for (p, &g) in data.iter_mut().zip(grad) {
                    *p = (*p as f64 - lr * g as f64) as f32;
                }
            }
            OptimizerKind::AdamW { beta1, beta2, eps, weight_decay } => {
                let n = tensor.numel();
                let st = self.state.entry(param).or_insert_with(|| MomentState {
                    t: 0,
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                });
                if st.m.len() != n {
                    return Err(Error::invalid("optimizer", "parameter size changed mid-run"));
                }
                st.t += 1;
                let bc1 = 1.0 - beta1.powi(st.t as i32);
                let bc2 = 1.0 - beta2.powi(st.t as i32);
                let data = tensor.data_mut();
                for i in 0..n {
                    let g = grad[i] as f64;
                    st.m[i] = beta1 * st.m[i] + (1.0 - beta1) * g;
                    st.v[i] = beta2 * st.v[i] + (1.0 - beta2) * g * g;
                    let m_hat = st.m[i] / bc1;
                    let v_hat = st.v[i] / bc2;
                    let mut p = data[i] as f64;
                    if decay {
                        p -= lr * weight_decay * p;
                    }
                    p -= lr * m_hat / (v_hat.sqrt() + eps);
                    data[i] = p as f32;
                }
            }
        }
        if !tensor.is_finite() {
            return Err(Error::NonFinite { op: "optimizer" });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tref() -> ParamRef {
        ParamRef::HeadW { task: 0 }
    }

    #[test]
    fn sgd_is_a_plain_scaled_subtraction() {
        let mut opt = Optimizer::new(OptimizerKind::Sgd).unwrap();
        let mut t = Tensor::new(vec![2], vec![1.0, -2.0]).unwrap();
        opt.step(tref(), &mut t, &[0.5, -1.0], 0.1, true).unwrap();
        assert_eq!(t.data(), &[0.95, -1.9]);
    }

    #[test]
    fn adamw_first_step_moves_by_lr_over_one_plus_eps_scale() {
        // With t=1 the bias-corrected m_hat/sqrt(v_hat) is g/|g|, so each
        // coordinate moves by lr * sign(g) up to the eps correction.
        let mut opt = Optimizer::new(OptimizerKind::adamw()).unwrap();
        let mut t = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
        opt.step(tref(), &mut t, &[0.5, -3.0], 0.01, false).unwrap();
        let expect = |g: f64| -0.01 * (g / (g.abs() + 1e-8));
        assert!((t.data()[0] as f64 - expect(0.5)).abs() < 1e-9);
        assert!((t.data()[1] as f64 - expect(-3.0)).abs() < 1e-9);
    }

    #[test]
    fn adamw_decay_is_decoupled_from_the_gradient() {
        // Zero gradient: only the decay term moves the weight, and only
        // when decay is enabled.
        let kind = OptimizerKind::adamw();
        let mut opt = Optimizer::new(kind).unwrap();
        let mut with = Tensor::new(vec![1], vec![2.0]).unwrap();
        opt.step(tref(), &mut with, &[0.0], 0.1, true).unwrap();
        let moved = 2.0 - 0.1 * 0.01 * 2.0;
        assert!((with.data()[0] as f64 - moved).abs() < 1e-7);

        let mut opt2 = Optimizer::new(kind).unwrap();
        let mut without = Tensor::new(vec![1], vec![2.0]).unwrap();
        opt2.step(tref(), &mut without, &[0.0], 0.1, false).unwrap();
        assert_eq!(without.data(), &[2.0]);
    }

    #[test]
    fn moment_state_is_tracked_per_parameter() {
        let mut opt = Optimizer::new(OptimizerKind::adamw()).unwrap();
        let mut a = Tensor::new(vec![1], vec![0.0]).unwrap();
        let mut b = Tensor::new(vec![1], vec![0.0]).unwrap();
        // Two steps on `a`, then one on `b`; if state leaked across handles
        // the b update would see t=3 bias correction instead of t=1.
        opt.step(ParamRef::HeadW { task: 0 }, &mut a, &[1.0], 0.01, false).unwrap();
        opt.step(ParamRef::HeadW { task: 0 }, &mut a, &[1.0], 0.01, false).unwrap();
        opt.step(ParamRef::HeadB { task: 0 }, &mut b, &[1.0], 0.01, false).unwrap();
        let first_step = -0.01 * (1.0 / (1.0 + 1e-8));
        assert!((b.data()[0] as f64 - first_step).abs() < 1e-9);
        assert!(a.data()[0] < b.data()[0]);
    }

    #[test]
    fn score_handles_skip_weight_decay() {
        use crate::petl::AttachmentPath;
        assert!(decays(ParamRef::Backbone { idx: 0 }));
        assert!(decays(ParamRef::HeadW { task: 1 }));
        assert!(decays(ParamRef::Attach(AttachmentPath::Proto { proto: 0, tensor: 0 })));
        assert!(!decays(ParamRef::Attach(AttachmentPath::LayerScore { layer: 0, slot: 1 })));
        assert!(!decays(ParamRef::Attach(AttachmentPath::TaskScore { task: 2, slot: 0 })));
    }

    #[test]
    fn mismatched_gradient_and_bad_lr_are_rejected() {
        let mut opt = Optimizer::new(OptimizerKind::Sgd).unwrap();
        let mut t = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        assert!(opt.step(tref(), &mut t, &[1.0], 0.1, false).is_err());
        assert!(opt.step(tref(), &mut t, &[1.0, 1.0], f64::NAN, false).is_err());
        assert!(opt.step(tref(), &mut t, &[1.0, 1.0], -0.1, false).is_err());
        assert!(Optimizer::new(OptimizerKind::AdamW {
            beta1: 1.5,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01
        })
        .is_err());
    }
}
