//! Central-difference checks of backprop gradients on module parameters.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::nn::Module;
use crate::var::Var;

/// One parameter entry compared both ways.
#[derive(Clone, Debug)]
pub struct GradSample {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradSample {
    /// `|a − n| / max(|a|, |n|)`, zero when both vanish.
    pub fn rel_error(&self) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs());
        if scale == 0.0 {
            0.0
        } else {
            (self.analytic - self.numeric).abs() / scale
        }
    }
}

fn nudge<M: Module + ?Sized>(m: &mut M, name: &str, index: usize, delta: f64) {
    m.visit_mut("", &mut |n, p| {
        if n == name {
            p.value_mut().data_mut()[index] += delta;
        }
    });
}

/// Backpropagates `analytic(m)` once, then draws `count` trainable entries
/// whose gradient magnitude is at least `min_grad` and compares each with
/// `(f(θ + h) − f(θ − h)) / 2h` where `f = numeric`. `numeric` must compute
/// the same value as `analytic` with any stop-gradient operands held at
/// their unperturbed values.
pub fn check_params<M: Module + ?Sized, R: Rng>(
    m: &mut M,
    analytic: impl Fn(&M) -> Var,
    numeric: impl Fn(&M) -> f64,
    count: usize,
    h: f64,
    min_grad: f64,
    rng: &mut R,
) -> Vec<GradSample> {
    let grads = analytic(m).backward();
    let mut candidates = Vec::new();
    for (name, p) in m.named_params() {
        if !p.is_trainable() {
            continue;
        }
        if let Some(g) = grads.param(p) {
            for (i, &v) in g.data().iter().enumerate() {
                if v.abs() >= min_grad {
                    candidates.push((name.clone(), i, v));
                }
            }
        }
    }
    candidates.shuffle(rng);
    candidates.truncate(count);
    candidates
        .into_iter()
        .map(|(name, index, a)| {
            nudge(m, &name, index, h);
            let up = numeric(m);
            nudge(m, &name, index, -2.0 * h);
            let down = numeric(m);
            nudge(m, &name, index, h);
            GradSample { name, index, analytic: a, numeric: (up - down) / (2.0 * h) }
        })
        .collect()
}
