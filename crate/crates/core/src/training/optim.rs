//! AdamW over named parameter tensors.
//!
//! Updates run in f64 and land back on the f32 grid (parameters and moments
//! both), so optimizer state round-trips bit-exactly through the 32-bit
//! checkpoint format. Decoupled weight decay skips biases, layer-norm
//! tensors, and the contrastive temperature.

use std::collections::{BTreeMap, BTreeSet};

use crate::tensor::Mat;

#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<String, Mat>,
    v: BTreeMap<String, Mat>,
}

fn decays(name: &str) -> bool {
    !(name.ends_with(".b")
        || name.ends_with(".bias")
        || name.ends_with(".gain")
        || name.ends_with("tau"))
}

impl AdamW {
    pub fn new(lr: f64, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1,
            beta2,
            weight_decay,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over every tensor the visitor yields whose name is in
    /// `trainable`. Tensors without a recorded gradient see a zero gradient.
    pub fn step(
        &mut self,
        grads: &BTreeMap<String, Mat>,
        trainable: &BTreeSet<String>,
        visit_mut: impl FnOnce(&mut dyn FnMut(String, &mut Mat)),
    ) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (lr, b1, b2, eps, wd) = (self.lr, self.beta1, self.beta2, self.eps, self.weight_decay);
        let (m_state, v_state) = (&mut self.m, &mut self.v);
        visit_mut(&mut |name: String, p: &mut Mat| {
            if !trainable.contains(&name) {
                return;
            }
            let zero = Mat::zeros(p.raw_dim());
            let g = grads.get(&name).unwrap_or(&zero);
            let m = m_state.entry(name.clone()).or_insert_with(|| zero.clone());
            let v = v_state.entry(name.clone()).or_insert_with(|| zero.clone());
            let wd_here = if decays(&name) { wd } else { 0.0 };
            for ((pe, ge), (me, ve)) in p
                .iter_mut()
                .zip(g.iter())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *me = b1 * *me + (1.0 - b1) * ge;
                *ve = b2 * *ve + (1.0 - b2) * ge * ge;
                let mhat = *me / bc1;
                let vhat = *ve / bc2;
                *pe -= lr * (mhat / (vhat.sqrt() + eps) + wd_here * *pe);
                *me = *me as f32 as f64;
                *ve = *ve as f32 as f64;
                *pe = *pe as f32 as f64;
            }
        });
    }

    /// Moment tensors for checkpointing, in sorted-name order.
    pub fn state(&self) -> (Vec<(String, Mat)>, Vec<(String, Mat)>) {
        (
            self.m.iter().map(|(n, m)| (n.clone(), m.clone())).collect(),
            self.v.iter().map(|(n, m)| (n.clone(), m.clone())).collect(),
        )
    }

    pub fn restore(&mut self, step: u64, m: BTreeMap<String, Mat>, v: BTreeMap<String, Mat>) {
        self.step = step;
        self.m = m;
        self.v = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn visit_single<'a>(
        p: &'a mut Mat,
    ) -> impl FnOnce(&mut dyn FnMut(String, &mut Mat)) + 'a {
        move |f| f("w".into(), p)
    }

    #[test]
    fn descends_a_quadratic() {
        // loss = 0.5 * p^2, grad = p.
        let mut p = Mat::from_elem((1, 1), 1.0);
        let mut opt = AdamW::new(0.1, 0.9, 0.999, 0.0);
        let trainable: BTreeSet<String> = ["w".to_string()].into();
        for _ in 0..100 {
            let mut grads = BTreeMap::new();
            grads.insert("w".to_string(), p.clone());
            opt.step(&grads, &trainable, visit_single(&mut p));
        }
        assert!(p[[0, 0]].abs() < 0.05, "p = {}", p[[0, 0]]);
    }

    #[test]
    fn skips_non_trainable_and_rounds_to_f32() {
        let mut p = Mat::from_elem((1, 1), 0.3);
        let before = p.clone();
        let mut opt = AdamW::new(0.1, 0.9, 0.999, 0.01);
        let trainable: BTreeSet<String> = BTreeSet::new();
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Mat::from_elem((1, 1), 1.0));
        opt.step(&grads, &trainable, visit_single(&mut p));
        assert_eq!(p, before);

        let trainable: BTreeSet<String> = ["w".to_string()].into();
        opt.step(&grads, &trainable, visit_single(&mut p));
        assert_eq!(p[[0, 0]], p[[0, 0]] as f32 as f64);
        assert_ne!(p, before);
    }

    #[test]
    fn zero_grad_with_decay_still_shrinks_weights() {
        let mut p = Mat::from_elem((2, 2), 1.0);
        let mut opt = AdamW::new(0.1, 0.9, 0.999, 0.5);
        let trainable: BTreeSet<String> = ["w".to_string()].into();
        opt.step(&BTreeMap::new(), &trainable, visit_single(&mut p));
        assert!(p[[0, 0]] < 1.0);
    }

    #[test]
    fn biases_and_tau_do_not_decay() {
        for name in ["h.b", "ln.bias", "ln.gain", "tau"] {
            let mut p = Mat::from_elem((1, 1), 1.0);
            let mut opt = AdamW::new(0.1, 0.9, 0.999, 0.5);
            let trainable: BTreeSet<String> = [name.to_string()].into();
            opt.step(&BTreeMap::new(), &trainable, |f| f(name.into(), &mut p));
            assert_eq!(p[[0, 0]], 1.0, "{name} decayed");
        }
    }
}
