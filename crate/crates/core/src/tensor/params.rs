//! Named parameters, grouped for selective freezing, optimized with Adam.
//!
//! Groups carry their own base learning rate so different subsystems (image
//! encoder vs. transformer backbone) can train at different speeds, and a
//! trainable flag so fine-tuning can freeze a group while its values still
//! participate in the forward pass.

use std::collections::HashMap;

use super::{Grads, Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Param<T: Scalar> {
    pub name: String,
    pub value: Tensor<T>,
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct ParamGroup<T: Scalar> {
    pub name: String,
    pub lr: f64,
    pub trainable: bool,
    pub params: Vec<Param<T>>,
}

/// All parameters of a model, in a stable registration order.
#[derive(Debug, Clone)]
pub struct ParamStore<T: Scalar> {
    pub adam: AdamConfig,
    /// Number of optimizer steps applied so far; drives bias correction.
    pub step: u64,
    groups: Vec<ParamGroup<T>>,
}

/// Tape handles for every parameter of a store, for one forward/backward pass.
pub struct Binding {
    vars: Vec<Vec<Var>>,
    by_name: HashMap<String, Var>,
}

impl Binding {
    /// Handle for a parameter by its dotted full name, e.g. `"tr.b0.wq"`.
    pub fn var(&self, full_name: &str) -> Var {
        *self
            .by_name
            .get(full_name)
            .unwrap_or_else(|| panic!("unbound parameter {full_name:?}"))
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new(adam: AdamConfig) -> Self {
        Self {
            adam,
            step: 0,
            groups: Vec::new(),
        }
    }

    /// Registers an empty group; `lr` is the group's base learning rate.
    pub fn add_group(&mut self, name: &str, lr: f64) {
        assert!(
            self.groups.iter().all(|g| g.name != name),
            "duplicate group {name:?}"
        );
        self.groups.push(ParamGroup {
            name: name.to_string(),
            lr,
            trainable: true,
            params: Vec::new(),
        });
    }

    /// Registers a parameter under an existing group.
    pub fn add_param(&mut self, group: &str, name: &str, value: Tensor<T>) {
        let g = self
            .groups
            .iter_mut()
            .find(|g| g.name == group)
            .unwrap_or_else(|| panic!("unknown group {group:?}"));
        assert!(
            g.params.iter().all(|p| p.name != name),
            "duplicate parameter {group}.{name}"
        );
        let (m, v) = (Tensor::zeros(value.shape()), Tensor::zeros(value.shape()));
        g.params.push(Param {
            name: name.to_string(),
            value,
            m,
            v,
        });
    }

    pub fn groups(&self) -> &[ParamGroup<T>] {
        &self.groups
    }

    pub fn set_trainable(&mut self, group: &str, trainable: bool) {
        let g = self
            .groups
            .iter_mut()
            .find(|g| g.name == group)
            .unwrap_or_else(|| panic!("unknown group {group:?}"));
        g.trainable = trainable;
    }

    pub fn set_lr(&mut self, group: &str, lr: f64) {
        let g = self
            .groups
            .iter_mut()
            .find(|g| g.name == group)
            .unwrap_or_else(|| panic!("unknown group {group:?}"));
        g.lr = lr;
    }

    pub fn get(&self, group: &str, name: &str) -> &Tensor<T> {
        &self
            .groups
            .iter()
            .find(|g| g.name == group)
            .unwrap_or_else(|| panic!("unknown group {group:?}"))
            .params
            .iter()
            .find(|p| p.name == name)
            .unwrap_or_else(|| panic!("unknown parameter {group}.{name}"))
            .value
    }

    /// Mutable access to one parameter, optimizer state included. Used by
    /// training loops that rewrite rows in place (codebook restarts); such a
    /// rewrite must also clear the rows' Adam moments or the next step drags
    /// the fresh value back toward the dead one.
    pub fn param_mut(&mut self, group: &str, name: &str) -> &mut Param<T> {
        self.groups
            .iter_mut()
            .find(|g| g.name == group)
            .unwrap_or_else(|| panic!("unknown group {group:?}"))
            .params
            .iter_mut()
            .find(|p| p.name == name)
            .unwrap_or_else(|| panic!("unknown parameter {group}.{name}"))
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.groups
            .iter()
            .flat_map(|g| &g.params)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Discards optimizer state, as when fine-tuning starts a fresh run.
    pub fn reset_adam(&mut self) {
        self.step = 0;
        for g in &mut self.groups {
            for p in &mut g.params {
                p.m = Tensor::zeros(p.value.shape());
                p.v = Tensor::zeros(p.value.shape());
            }
        }
    }

    /// Puts every parameter on the tape. Trainable groups become leaves
    /// (gradients retained); frozen groups become constants, which also prunes
    /// their weight-gradient work from the backward pass.
    pub fn bind(&self, tape: &mut Tape<T>) -> Binding {
        let mut vars = Vec::with_capacity(self.groups.len());
        let mut by_name = HashMap::new();
        for g in &self.groups {
            let mut gv = Vec::with_capacity(g.params.len());
            for p in &g.params {
                let var = if g.trainable {
                    tape.leaf(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                };
                gv.push(var);
                by_name.insert(format!("{}.{}", g.name, p.name), var);
            }
            vars.push(gv);
        }
        Binding { vars, by_name }
    }

    /// One Adam step over all trainable groups. `decay` scales every group's
    /// base learning rate (see [`lr_decay_factor`]). Parameters without a
    /// gradient this step are left untouched.
    pub fn adam_step(&mut self, binding: &Binding, grads: &Grads<T>, decay: f64) {
        let t = self.step + 1;
        let bc1 = 1.0 - self.adam.beta1.powi(t as i32);
        let bc2 = 1.0 - self.adam.beta2.powi(t as i32);
        let b1 = T::from_f64(self.adam.beta1);
        let b2 = T::from_f64(self.adam.beta2);
        let one_m_b1 = T::from_f64(1.0 - self.adam.beta1);
        let one_m_b2 = T::from_f64(1.0 - self.adam.beta2);
        let eps = T::from_f64(self.adam.eps);
        for (g, gvars) in self.groups.iter_mut().zip(&binding.vars) {
            if !g.trainable {
                continue;
            }
            let lr = T::from_f64(g.lr * decay);
            let inv_bc1 = T::from_f64(1.0 / bc1);
            let inv_bc2 = T::from_f64(1.0 / bc2);
            for (p, &var) in g.params.iter_mut().zip(gvars) {
                let Some(grad) = grads.get(var) else { continue };
                for (((w, gr), m), v) in p
                    .value
                    .data_mut()
                    .iter_mut()
                    .zip(grad.data())
                    .zip(p.m.data_mut())
                    .zip(p.v.data_mut())
                {
                    *m = b1 * *m + one_m_b1 * *gr;
                    *v = b2 * *v + one_m_b2 * *gr * *gr;
                    let mhat = *m * inv_bc1;
                    let vhat = *v * inv_bc2;
                    *w = *w - lr * mhat / (vhat.sqrt() + eps);
                }
            }
        }
        self.step = t;
    }

    pub(super) fn push_group(&mut self, group: ParamGroup<T>) {
        self.groups.push(group);
    }
}

/// Step-decay schedule: the learning rate is multiplied by `0.9` once per
/// `decay_every` steps taken.
pub fn lr_decay_factor(step: u64, decay_every: u64) -> f64 {
    assert!(decay_every > 0, "decay_every must be positive");
    0.9f64.powi((step / decay_every) as i32)
}
