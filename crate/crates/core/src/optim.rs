use crate::autograd::{ParamGrads, ParamId, ParamStore};
use crate::tensor::Matrix;

/// Adaptive-moment descent with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    lr_scale: Vec<f64>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros = || store.iter().map(|(_, p)| Matrix::zeros(p.rows(), p.cols())).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
            lr_scale: vec![1.0; store.len()],
        }
    }

    /// Multiplies the learning rate of one parameter.
    pub fn set_lr_scale(&mut self, id: ParamId, scale: f64) {
        self.lr_scale[id.0] = scale;
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Descends along `grads`. Use [`Adam::ascend`] to maximise instead.
    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads) {
        self.update(store, grads, -1.0);
    }

    pub fn ascend(&mut self, store: &mut ParamStore, grads: &ParamGrads) {
        self.update(store, grads, 1.0);
    }

    fn update(&mut self, store: &mut ParamStore, grads: &ParamGrads, direction: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (id, g) in grads.iter() {
            let p = store.get_mut(id);
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let lr = self.lr * self.lr_scale[id.0];
            for i in 0..g.len() {
                let gi = g.data()[i];
                let mi = &mut m.data_mut()[i];
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                let vi = &mut v.data_mut()[i];
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let update = (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
                p.data_mut()[i] += direction * lr * update;
            }
        }
    }
}
