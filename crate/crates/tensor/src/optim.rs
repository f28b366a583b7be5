use std::collections::BTreeMap;

use crate::nn::Module;
use crate::tensor::Tensor;
use crate::var::Gradients;
use crate::TensorError;

/// Adam with bias correction. Moment buffers are keyed by parameter name
/// so they survive a checkpoint round-trip.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(lr: f64) -> Adam {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, moments: BTreeMap::new() }
    }

    pub fn with_betas(mut self, beta1: f64, beta2: f64) -> Adam {
        self.beta1 = beta1;
        self.beta2 = beta2;
        self
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates every trainable parameter of `module` that has a gradient.
    pub fn step(&mut self, module: &mut dyn Module, grads: &Gradients) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let moments = &mut self.moments;
        module.visit_mut("", &mut |name, p| {
            if !p.is_trainable() {
                return;
            }
            let Some(g) = grads.param(p) else { return };
            let (m, v) = moments
                .entry(name)
                .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            let gd = g.data();
            let md = m.data_mut();
            for (mi, gi) in md.iter_mut().zip(gd) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
            }
            let vd = v.data_mut();
            for (vi, gi) in vd.iter_mut().zip(gd) {
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            }
            let (md, vd) = (m.data(), v.data());
            let w = p.value_mut().data_mut();
            for i in 0..w.len() {
                let mh = md[i] / c1;
                let vh = vd[i] / c2;
                w[i] -= lr * mh / (vh.sqrt() + eps);
            }
        });
    }

    /// Moment buffers as `<name>.m` / `<name>.v` plus a `step` scalar.
    pub fn state(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (n, (m, v)) in &self.moments {
            out.insert(format!("{n}.m"), m.clone());
            out.insert(format!("{n}.v"), v.clone());
        }
        out.insert("step".into(), Tensor::scalar(self.step as f64));
        out
    }

    pub fn load_state(&mut self, state: &BTreeMap<String, Tensor>) -> Result<(), TensorError> {
        let step = state.get("step").ok_or_else(|| TensorError::MissingTensor("step".into()))?;
        self.step = step.item() as u64;
        self.moments.clear();
        for (k, m) in state {
            if let Some(name) = k.strip_suffix(".m") {
                let v = state
                    .get(&format!("{name}.v"))
                    .ok_or_else(|| TensorError::MissingTensor(format!("{name}.v")))?;
                self.moments.insert(name.to_string(), (m.clone(), v.clone()));
            }
        }
        Ok(())
    }
}
