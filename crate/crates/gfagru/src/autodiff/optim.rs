use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

/// RMSProp with momentum.
///
/// Update per element: `v <- rho v + (1 - rho) g^2`,
/// `buf <- m buf + g / (sqrt(v) + eps)`, `theta <- theta - lr buf`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RmsPropConfig {
    pub lr: f64,
    pub rho: f64,
    pub momentum: f64,
    pub eps: f64,
}

impl RmsPropConfig {
    pub fn with_lr(lr: f64) -> Self {
        RmsPropConfig {
            lr,
            rho: 0.99,
            momentum: 0.2,
            eps: 1e-8,
        }
    }
}

/// Per-parameter optimizer state; slot order is fixed at construction.
#[derive(Debug, Clone)]
pub struct RmsProp {
    pub cfg: RmsPropConfig,
    v: Vec<Vec<f64>>,
    buf: Vec<Vec<f64>>,
}

impl RmsProp {
    pub fn new(cfg: RmsPropConfig, sizes: &[usize]) -> Self {
        RmsProp {
            cfg,
            v: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            buf: sizes.iter().map(|&s| vec![0.0; s]).collect(),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    /// One update over all parameter slots. `grads[i] = None` is a zero
    /// gradient. Rejects non-finite gradients before touching any state.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Option<&Tensor>]) -> Result<()> {
        if params.len() != self.v.len() || grads.len() != self.v.len() {
            return Err(Error::Shape {
                op: "rmsprop",
                detail: format!(
                    "expected {} slots, got {} params / {} grads",
                    self.v.len(),
                    params.len(),
                    grads.len()
                ),
            });
        }
        for (slot, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.len() != self.v[slot].len() {
                    return Err(Error::Shape {
                        op: "rmsprop",
                        detail: format!("gradient size mismatch in slot {slot}"),
                    });
                }
                if let Some(index) = g.first_nonfinite() {
                    return Err(Error::NonFinite {
                        op: "rmsprop",
                        node: slot,
                        index,
                    });
                }
            }
        }
        let RmsPropConfig {
            lr,
            rho,
            momentum,
            eps,
        } = self.cfg;
        for (slot, param) in params.iter_mut().enumerate() {
            let v = &mut self.v[slot];
            let buf = &mut self.buf[slot];
            let theta = param.data_mut();
            match grads[slot] {
                Some(g) => {
                    for e in 0..theta.len() {
                        let ge = g.data()[e];
                        v[e] = rho * v[e] + (1.0 - rho) * ge * ge;
                        buf[e] = momentum * buf[e] + ge / (v[e].sqrt() + eps);
                        theta[e] -= lr * buf[e];
                    }
                }
                None => {
                    for e in 0..theta.len() {
                        v[e] *= rho;
                        buf[e] *= momentum;
                        theta[e] -= lr * buf[e];
                    }
                }
            }
        }
        Ok(())
    }
}
