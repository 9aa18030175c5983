use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
    steps: u64,
}

/// Adam with decoupled weight decay. Parameters without a gradient in a step
/// are left untouched, including their decay.
pub struct AdamW<T: Scalar> {
    cfg: AdamWConfig,
    state: Vec<Option<Moments<T>>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self { cfg, state: Vec::new() }
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.cfg
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Option<Tensor<T>>]) {
        assert_eq!(grads.len(), params.len(), "one gradient slot per parameter");
        if self.state.len() < params.len() {
            self.state.resize_with(params.len(), || None);
        }
        let lr = self.cfg.lr;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let eps = T::from_f64_lossy(self.cfg.eps);
        for (id, grad) in params.ids().zip(grads) {
            let Some(grad) = grad else { continue };
            let p = params.get_mut(id);
            let st = self.state[id.index()].get_or_insert_with(|| Moments {
                m: vec![T::zero(); p.numel()],
                v: vec![T::zero(); p.numel()],
                steps: 0,
            });
            st.steps += 1;
            let t = st.steps as i32;
            let bc1 = 1.0 - b1.powi(t);
            let bc2 = 1.0 - b2.powi(t);
            let decay = T::from_f64_lossy(1.0 - lr * self.cfg.weight_decay);
            let step_size = T::from_f64_lossy(lr / bc1);
            let bc2_sqrt = T::from_f64_lossy(bc2.sqrt());
            let (b1t, b2t) = (T::from_f64_lossy(b1), T::from_f64_lossy(b2));
            let (ob1, ob2) = (T::one() - b1t, T::one() - b2t);
            for (((w, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(st.m.iter_mut())
                .zip(st.v.iter_mut())
            {
                *w *= decay;
                *m = b1t * *m + ob1 * g;
                *v = b2t * *v + ob2 * g * g;
                let denom = v.sqrt() / bc2_sqrt + eps;
                *w -= step_size * *m / denom;
            }
        }
    }
}
