use crate::numerics::{ParamId, ParamStore, Tensor};

/// AdamW with decoupled weight decay and a constant learning rate.
///
/// Each parameter keeps its own step count so that parameters which sit
/// out some steps (the router during warm-up) get correct bias correction
/// once they start training. Weight decay applies to matrices only.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    state: Vec<Option<Moments>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
    pub step: u64,
}

impl AdamW {
    pub fn new(num_params: usize, lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            state: vec![None; num_params],
        }
    }

    pub fn moments(&self, id: ParamId) -> Option<&Moments> {
        self.state[id.index()].as_ref()
    }

    pub(crate) fn moments_mut(&mut self, id: ParamId) -> Option<&mut Moments> {
        self.state[id.index()].as_mut()
    }

    /// Applies one update for every `(param, grad)` pair. Parameters not
    /// listed are left untouched, decay included.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)]) {
        for (id, g) in grads {
            let w = store.get_mut(*id);
            let decay = if w.shape().len() == 2 { self.weight_decay } else { 0.0 };
            let st = self.state[id.index()].get_or_insert_with(|| Moments {
                m: Tensor::zeros(w.shape()),
                v: Tensor::zeros(w.shape()),
                step: 0,
            });
            st.step += 1;
            let bc1 = 1.0 - self.beta1.powi(st.step as i32);
            let bc2 = 1.0 - self.beta2.powi(st.step as i32);
            let m = st.m.data_mut();
            let v = st.v.data_mut();
            for (((wi, &gi), mi), vi) in w.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let update = (*mi / bc1) / ((*vi / bc2).sqrt() + self.eps);
                *wi -= self.lr * (update + decay * *wi);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let a = store.insert("a", Tensor::vector(vec![1.0, -1.0])).unwrap();
        let b = store.insert("b", Tensor::vector(vec![5.0])).unwrap();
        let mut opt = AdamW::new(2, 0.1, 0.0);
        opt.step(&mut store, &[(a, Tensor::vector(vec![3.0, -0.5]))]);
        let w = store.get(a).data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6);
        assert_eq!(store.get(b).data(), &[5.0]);
        assert!(opt.moments(b).is_none());
        assert_eq!(opt.moments(a).unwrap().step, 1);
    }

    #[test]
    fn decay_only_on_matrices() {
        let mut store = ParamStore::new();
        let m = store.insert("m", Tensor::full(&[1, 1], 2.0)).unwrap();
        let v = store.insert("v", Tensor::vector(vec![2.0])).unwrap();
        let mut opt = AdamW::new(2, 0.1, 0.5);
        let zero = |s: &[usize]| Tensor::zeros(s);
        opt.step(&mut store, &[(m, zero(&[1, 1])), (v, zero(&[1]))]);
        assert!((store.get(m).data()[0] - 1.9).abs() < 1e-12);
        assert_eq!(store.get(v).data(), &[2.0]);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut store = ParamStore::new();
        let x = store.insert("x", Tensor::vector(vec![3.0])).unwrap();
        let mut opt = AdamW::new(1, 0.05, 0.0);
        for _ in 0..500 {
            let g = 2.0 * store.get(x).data()[0];
            opt.step(&mut store, &[(x, Tensor::vector(vec![g]))]);
        }
        assert!(store.get(x).data()[0].abs() < 1e-2);
    }
}
