//! AdamW with per-parameter step counts and a warmup/linear-decay schedule.

use crate::tensor::{ParamId, Params};

#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: Vec<u64>,
}

impl AdamW {
    pub fn new(params: &Params, weight_decay: f64) -> Self {
        let zeros = |id| vec![0.0; params.value(id).numel()];
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: params.ids().map(zeros).collect(),
            v: params.ids().map(zeros).collect(),
            t: vec![0; params.len()],
        }
    }

    /// Updates only `ids`; every other parameter is left bit-identical.
    pub fn step(&mut self, params: &mut Params, ids: &[ParamId], lr: f64) {
        for &id in ids {
            let decay = params.value(id).shape().len() >= 2;
            let (value, grad) = params.value_and_grad_mut(id);
            self.t[id.0] += 1;
            let t = self.t[id.0] as i32;
            let bc1 = 1.0 - self.beta1.powi(t);
            let bc2 = 1.0 - self.beta2.powi(t);
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            for (((p, g), m), v) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                if decay {
                    *p -= lr * self.weight_decay * *p;
                }
                *p -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Linear warmup to `peak` over `warmup` steps, then linear decay to zero at `total`.
#[derive(Clone, Copy, Debug)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup: usize,
    pub total: usize,
}

impl LrSchedule {
    /// Learning rate for 0-based `step`.
    pub fn at(&self, step: usize) -> f64 {
        let s = step as f64 + 1.0;
        if step < self.warmup {
            return self.peak * s / self.warmup as f64;
        }
        let rest = self.total.saturating_sub(self.warmup).max(1) as f64;
        let done = (step - self.warmup) as f64;
        self.peak * (1.0 - done / rest).max(0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn schedule_shape() {
        let s = LrSchedule {
            peak: 1.0,
            warmup: 10,
            total: 110,
        };
        assert!((s.at(0) - 0.1).abs() < 1e-12);
        assert!((s.at(9) - 1.0).abs() < 1e-12);
        assert!((s.at(10) - 1.0).abs() < 1e-12);
        assert!((s.at(60) - 0.5).abs() < 1e-12);
        assert_eq!(s.at(500), 0.0);
    }

    #[test]
    fn untouched_params_stay_bit_identical() {
        let mut p = Params::new();
        let a = p.add("a", Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let b = p.add("b", Tensor::matrix(1, 2, vec![3.0, 4.0]).unwrap());
        let mut opt = AdamW::new(&p, 0.01);
        opt.step(&mut p, &[a], 0.1);
        assert_ne!(p.value(a).data(), &[1.0, 2.0]);
        assert_eq!(p.value(b).data(), &[3.0, 4.0]);
    }

    #[test]
    fn descends_a_quadratic() {
        let mut p = Params::new();
        let a = p.add("a", Tensor::vector(vec![5.0]));
        let mut opt = AdamW::new(&p, 0.0);
        for _ in 0..500 {
            p.zero_grad();
            let mut graph = crate::tensor::Graph::new();
            let v = graph.param(&p, a);
            let sq = graph.square(v);
            let l = graph.sum(sq);
            graph.backward(l, &mut p).unwrap();
            opt.step(&mut p, &[a], 0.05);
        }
        assert!(p.value(a).data()[0].abs() < 0.05);
    }
}
