//! Named parameter storage and the Adam optimizer.

use thiserror::Error;

use crate::rng::Stream;
use crate::scalar::Scalar;

use super::tape::{Gradients, Tape};
use super::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("non-finite gradient in parameter `{param}`")]
    NonFiniteGrad { param: String },
}

/// Handle into a [`ParamSet`], resolved once at model construction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// Ordered collection of named parameter tensors.
///
/// Order is the checkpoint serialization order, so it must be stable across
/// construction paths.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<F> {
    entries: Vec<(String, Tensor<F>)>,
}

impl<F: Scalar> ParamSet<F> {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    pub fn add(&mut self, name: &str, tensor: Tensor<F>) -> ParamId {
        assert!(
            self.entries.iter().all(|(n, _)| n != name),
            "duplicate parameter name `{name}`"
        );
        self.entries.push((name.to_string(), tensor.detached()));
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.entries[id.0].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn set(&mut self, id: ParamId, tensor: Tensor<F>) {
        assert!(
            tensor.shape() == self.entries[id.0].1.shape(),
            "parameter `{}` shape {:?} cannot be replaced by {:?}",
            self.entries[id.0].0,
            self.entries[id.0].1.shape(),
            tensor.shape()
        );
        self.entries[id.0].1 = tensor.detached();
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Order- and bit-sensitive digest of every stored value.
    pub fn checksum(&self) -> u64 {
        let mut h = 0xCBF2_9CE4_8422_2325u64;
        let mut mix = |byte: u8| {
            h ^= byte as u64;
            h = h.wrapping_mul(0x1000_0000_01B3);
        };
        for (name, t) in &self.entries {
            for b in name.as_bytes() {
                mix(*b);
            }
            for v in t.values() {
                for b in v.to_f64_lossy().to_le_bytes() {
                    mix(b);
                }
            }
        }
        h
    }

    /// Gaussian init with per-tensor fan-in scaling; biases stay zero.
    pub fn init_dense(&mut self, id: ParamId, fan_in: usize, stream: &mut Stream) {
        let scale = 1.0 / (fan_in as f64).sqrt();
        let t = &mut self.entries[id.0].1;
        let shape = t.shape().to_vec();
        let values: Vec<F> =
            (0..t.len()).map(|_| F::from_f64_lossy(stream.next_normal() * scale)).collect();
        *t = Tensor::new(shape, values);
    }
}

/// Records which tape node each watched parameter landed on, so gradients
/// can be routed back to the optimizer by parameter id.
#[derive(Default)]
pub struct Watcher {
    binds: Vec<(usize, usize)>, // (param index, node index)
}

impl Watcher {
    pub fn new() -> Self {
        Watcher { binds: Vec::new() }
    }

    pub fn watch<F: Scalar>(
        &mut self,
        tape: &mut Tape<F>,
        set: &ParamSet<F>,
        id: ParamId,
    ) -> Tensor<F> {
        let t = tape.watch(set.get(id));
        self.binds.push((id.0, t.node().expect("watch always records").index()));
        t
    }

    /// Gradients aligned with the parameter set, summed over every watch of
    /// the same parameter.
    pub fn gradients<F: Scalar>(
        &self,
        set: &ParamSet<F>,
        grads: &Gradients<F>,
    ) -> Vec<Option<Vec<F>>> {
        let mut out: Vec<Option<Vec<F>>> = vec![None; set.len()];
        for &(pidx, nidx) in &self.binds {
            if let Some(g) = grads.node_slice(nidx) {
                match &mut out[pidx] {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(g) {
                            *a = *a + *b;
                        }
                    }
                    None => out[pidx] = Some(g.to_vec()),
                }
            }
        }
        out
    }
}

/// Adam with fixed (beta1, beta2, eps) = (0.9, 0.999, 1e-8).
#[derive(Clone, Debug)]
pub struct Adam<F> {
    lr: F,
    step: u64,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(lr: f64, set: &ParamSet<F>) -> Self {
        Adam {
            lr: F::from_f64_lossy(lr),
            step: 0,
            m: set.iter().map(|(_, t)| vec![F::zero(); t.len()]).collect(),
            v: set.iter().map(|(_, t)| vec![F::zero(); t.len()]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn learning_rate(&self) -> F {
        self.lr
    }

    /// Apply one Adam update. `grads` is aligned with the parameter set;
    /// `None` entries leave the parameter (and its moments) untouched by the
    /// gradient but still advance with the shared step counter.
    pub fn update(
        &mut self,
        set: &mut ParamSet<F>,
        grads: &[Option<Vec<F>>],
    ) -> Result<(), DiffError> {
        assert!(grads.len() == set.len(), "gradient count {} != parameter count {}", grads.len(), set.len());
        for (idx, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(DiffError::NonFiniteGrad {
                        param: set.name(ParamId(idx)).to_string(),
                    });
                }
            }
        }
        self.step += 1;
        let b1 = F::from_f64_lossy(0.9);
        let b2 = F::from_f64_lossy(0.999);
        let eps = F::from_f64_lossy(1e-8);
        let t = F::from_u64(self.step).unwrap();
        let c1 = F::one() - b1.powf(t);
        let c2 = F::one() - b2.powf(t);
        for (idx, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let id = ParamId(idx);
            let mut tensor = set.get(id).clone();
            let values = tensor.values_mut();
            assert!(
                values.len() == g.len(),
                "parameter `{}` has {} values but gradient has {}",
                set.name(id),
                values.len(),
                g.len()
            );
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for i in 0..values.len() {
                m[i] = b1 * m[i] + (F::one() - b1) * g[i];
                v[i] = b2 * v[i] + (F::one() - b2) * g[i] * g[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                values[i] = values[i] - self.lr * mhat / (vhat.sqrt() + eps);
            }
            set.set(id, tensor);
        }
        Ok(())
    }

    /// Moment buffers, exposed for checkpointing.
    pub fn state(&self) -> (&[Vec<F>], &[Vec<F>]) {
        (&self.m, &self.v)
    }

    pub fn restore(&mut self, step: u64, m: Vec<Vec<F>>, v: Vec<Vec<F>>) {
        assert!(m.len() == self.m.len() && v.len() == self.v.len(), "moment layout mismatch");
        self.step = step;
        self.m = m;
        self.v = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param_set(v: f64) -> (ParamSet<f64>, ParamId) {
        let mut set = ParamSet::new();
        let id = set.add("w", Tensor::from_vec(vec![v]));
        (set, id)
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let (mut set, id) = one_param_set(0.25);
        let mut adam = Adam::new(1e-3, &set);
        adam.update(&mut set, &[Some(vec![0.0])]).unwrap();
        assert_eq!(set.get(id).values(), &[0.25]);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn step_count_increments_once_per_call() {
        let (mut set, _) = one_param_set(0.0);
        let mut adam = Adam::new(1e-3, &set);
        for expect in 1..=5 {
            adam.update(&mut set, &[Some(vec![1.0])]).unwrap();
            assert_eq!(adam.step_count(), expect);
        }
    }

    #[test]
    fn first_step_is_bias_corrected_lr() {
        // With g=1 and fresh state: m_hat = 1, v_hat = 1, so the step is
        // lr / (1 + 1e-8), i.e. ~= lr.
        let (mut set, id) = one_param_set(1.0);
        let mut adam = Adam::new(1e-3, &set);
        adam.update(&mut set, &[Some(vec![1.0])]).unwrap();
        let moved = 1.0 - set.get(id).values()[0];
        assert!((moved - 1e-3).abs() < 1e-9, "moved {moved}");
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut set = ParamSet::new();
        set.add("ok", Tensor::from_vec(vec![0.0]));
        set.add("bad_one", Tensor::from_vec(vec![0.0]));
        let mut adam = Adam::new(1e-3, &set);
        let err = adam
            .update(&mut set, &[Some(vec![1.0]), Some(vec![f64::NAN])])
            .unwrap_err();
        assert!(err.to_string().contains("bad_one"), "{err}");
    }

    #[test]
    fn checksum_sensitive_to_values() {
        let (set_a, _) = one_param_set(1.0);
        let (set_b, _) = one_param_set(1.0 + 1e-12);
        assert_ne!(set_a.checksum(), set_b.checksum());
        let (set_c, _) = one_param_set(1.0);
        assert_eq!(set_a.checksum(), set_c.checksum());
    }
}
