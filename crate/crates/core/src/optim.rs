use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Warmup then inverse-square-root decay, peaking at `peak` after
/// `warmup` steps. `step` is 0-based.
pub fn learning_rate(step: u64, warmup: u64, peak: f64) -> f64 {
    let s = (step + 1) as f64;
    let w = warmup.max(1) as f64;
    peak * (s / w).min((w / s).sqrt())
}

/// Adam with per-parameter moment buffers. Parameters without a gradient in
/// a step are left untouched, moments included.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = || params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Buffers for parameters added after construction.
    pub fn sync(&mut self, params: &ParamStore) {
        for (id, _, t) in params.iter() {
            if id.index() >= self.m.len() {
                self.m.push(Tensor::zeros(t.shape()));
                self.v.push(Tensor::zeros(t.shape()));
            }
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let step = (lr * c2.sqrt() / c1) as f32;
        let eps = (self.eps * c2.sqrt()) as f32;
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let Some(g) = &grads[id.index()] else { continue };
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let p = params.get_mut(id);
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *w -= step * *mi / (vi.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_peaks_at_warmup() {
        assert!((learning_rate(99, 100, 1e-3) - 1e-3).abs() < 1e-15);
        assert!(learning_rate(0, 100, 1e-3) < learning_rate(50, 100, 1e-3));
        assert!((learning_rate(399, 100, 1e-3) - 0.5e-3).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::from_rows(&[&[1.0f32, -2.0]]).unwrap()).unwrap();
        let before = p.checksum(|_| true);
        let mut adam = Adam::new(&p);
        adam.step(&mut p, &[Some(Tensor::zeros(&[1, 2]))], 0.1);
        adam.step(&mut p, &[None], 0.1);
        assert_eq!(p.checksum(|_| true), before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::scalar(1.0f32)).unwrap();
        let mut adam = Adam::new(&p);
        adam.step(&mut p, &[Some(Tensor::scalar(3.0))], 0.01);
        assert!((p.get(p.id("w").unwrap()).item() - 0.99).abs() < 1e-6);
    }
}
