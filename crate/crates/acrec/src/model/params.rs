use std::collections::HashMap;

use acrec_autodiff::{Gradients, Graph, Scalar, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ModelConfig, PositionMode};

/// Which objective a tensor belongs to: the perturbation projections are
/// trained by the perturbation objective, everything else by the calibrated
/// loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Backbone,
    Perturbation,
}

#[derive(Clone, Debug)]
pub struct ParamEntry<F: Scalar> {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: Tensor<F>,
}

/// All learnable tensors, insertion-ordered and name-addressable.
#[derive(Clone, Debug)]
pub struct ParameterStore<F: Scalar> {
    entries: Vec<ParamEntry<F>>,
    index: HashMap<String, usize>,
}

pub mod names {
    pub const ITEM_TABLE: &str = "item_table";
    pub const POS_TABLE: &str = "pos_table";

    pub fn w_q(layer: usize) -> String {
        format!("l{layer}.attn.w_q")
    }
    pub fn w_k(layer: usize) -> String {
        format!("l{layer}.attn.w_k")
    }
    pub fn w_v(layer: usize) -> String {
        format!("l{layer}.attn.w_v")
    }
    pub fn ffn_w1(layer: usize) -> String {
        format!("l{layer}.ffn.w1")
    }
    pub fn ffn_b1(layer: usize) -> String {
        format!("l{layer}.ffn.b1")
    }
    pub fn ffn_w2(layer: usize) -> String {
        format!("l{layer}.ffn.w2")
    }
    pub fn ffn_b2(layer: usize) -> String {
        format!("l{layer}.ffn.b2")
    }
    pub fn spc_w_order(layer: usize) -> String {
        format!("l{layer}.spc.w_order")
    }
    pub fn spc_b_order(layer: usize) -> String {
        format!("l{layer}.spc.b_order")
    }
    pub fn spc_w_dist(layer: usize) -> String {
        format!("l{layer}.spc.w_dist")
    }
    pub fn spc_b_dist(layer: usize) -> String {
        format!("l{layer}.spc.b_dist")
    }
    pub fn spc_theta_dist(layer: usize) -> String {
        format!("l{layer}.spc.theta_dist")
    }
    pub fn adv_w_qp(layer: usize) -> String {
        format!("l{layer}.adv.w_qp")
    }
    pub fn adv_w_kp(layer: usize) -> String {
        format!("l{layer}.adv.w_kp")
    }
    pub fn adv_w_gate(layer: usize) -> String {
        format!("l{layer}.adv.w_gate")
    }
    pub fn adv_b_gate(layer: usize) -> String {
        format!("l{layer}.adv.b_gate")
    }
}

impl<F: Scalar> ParameterStore<F> {
    pub fn empty() -> Self {
        ParameterStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Initialize for a vocabulary of `item_count` real items. Matrices are
    /// N(0, scale), biases zero, the distance scale starts at 1 and the
    /// padding row of the item table is zero.
    pub fn init(cfg: &ModelConfig, item_count: usize, seed: u64, scale: f64) -> Self {
        let mut store = ParameterStore::empty();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.d;
        let dh = cfg.head_dim();
        let hc = cfg.calibrator_heads();

        fn randn<F: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<F> {
            Tensor::from_fn(shape, |_| F::from_f64(normal_sample(rng) * scale))
        }

        // Item table; row 0 is the padding row and stays zero.
        {
            let mut t = randn::<F>(&mut rng, &[item_count + 1, d], scale);
            t.data_mut()[..d].fill(F::zero());
            store.insert(names::ITEM_TABLE.to_string(), ParamGroup::Backbone, t);
        }
        if cfg.position_mode == PositionMode::Absolute {
            let t = randn(&mut rng, &[cfg.n, d], scale);
            store.insert(names::POS_TABLE.to_string(), ParamGroup::Backbone, t);
        }

        use ParamGroup::{Backbone, Perturbation};
        for l in 0..cfg.layers {
            let t = randn(&mut rng, &[d, d], scale);
            store.insert(names::w_q(l), Backbone, t);
            let t = randn(&mut rng, &[d, d], scale);
            store.insert(names::w_k(l), Backbone, t);
            let t = randn(&mut rng, &[d, d], scale);
            store.insert(names::w_v(l), Backbone, t);
            let t = randn(&mut rng, &[d, cfg.inner], scale);
            store.insert(names::ffn_w1(l), Backbone, t);
            store.insert(names::ffn_b1(l), Backbone, Tensor::zeros(&[cfg.inner]));
            let t = randn(&mut rng, &[cfg.inner, d], scale);
            store.insert(names::ffn_w2(l), Backbone, t);
            store.insert(names::ffn_b2(l), Backbone, Tensor::zeros(&[d]));

            if cfg.spatial_enabled {
                if cfg.order_enabled {
                    let t = randn(&mut rng, &[hc, 2 * dh], scale);
                    store.insert(names::spc_w_order(l), Backbone, t);
                    store.insert(names::spc_b_order(l), Backbone, Tensor::zeros(&[hc]));
                }
                if cfg.distance_enabled {
                    let t = randn(&mut rng, &[hc, 2 * dh], scale);
                    store.insert(names::spc_w_dist(l), Backbone, t);
                    store.insert(names::spc_b_dist(l), Backbone, Tensor::zeros(&[hc]));
                    store.insert(names::spc_theta_dist(l), Backbone, Tensor::scalar(F::one()));
                }
            }
            if cfg.adversarial_enabled {
                let t = randn(&mut rng, &[hc, dh, dh], scale);
                store.insert(names::adv_w_qp(l), Perturbation, t);
                let t = randn(&mut rng, &[hc, dh, dh], scale);
                store.insert(names::adv_w_kp(l), Perturbation, t);
                let t = randn(&mut rng, &[hc, dh], scale);
                store.insert(names::adv_w_gate(l), Backbone, t);
                store.insert(names::adv_b_gate(l), Backbone, Tensor::zeros(&[hc]));
            }
        }
        store
    }

    pub fn insert(&mut self, name: String, group: ParamGroup, tensor: Tensor<F>) {
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter {name}"
        );
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry { name, group, tensor });
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.index.get(name).map(|&i| &self.entries[i].tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.index.get(name).map(|&i| &mut self.entries[i].tensor)
    }

    pub fn group_of(&self, name: &str) -> Option<ParamGroup> {
        self.index.get(name).map(|&i| self.entries[i].group)
    }

    pub fn entries(&self) -> &[ParamEntry<F>] {
        &self.entries
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn item_count(&self) -> usize {
        self.get(names::ITEM_TABLE).expect("item table").shape()[0] - 1
    }

    /// Total parameter count (elements).
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.tensor.is_finite())
    }

    /// FNV-1a over the little-endian f32 image of every tensor, in store
    /// order; used for reproducibility checks.
    pub fn content_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |byte: u8| {
            h ^= byte as u64;
            h = h.wrapping_mul(0x1000_0000_01b3);
        };
        for e in &self.entries {
            for b in e.name.as_bytes() {
                eat(*b);
            }
            for x in e.tensor.data() {
                for b in (x.as_f64() as f32).to_le_bytes() {
                    eat(b);
                }
            }
        }
        h
    }

    /// Insert every tensor into a graph; group membership decides whether it
    /// is tracked (via `trainable`) or bound as a constant.
    pub fn bind(&self, g: &mut Graph<F>, trainable: impl Fn(ParamGroup) -> bool) -> BoundParams {
        let mut vars = HashMap::with_capacity(self.entries.len());
        for e in &self.entries {
            let var = if trainable(e.group) {
                g.leaf(e.tensor.clone())
            } else {
                g.constant(e.tensor.clone())
            };
            vars.insert(e.name.clone(), var);
        }
        BoundParams { vars }
    }

    /// Collect gradients for every tensor matching `filter` after a backward
    /// pass; tensors the loss never touched get zeros.
    pub fn collect_grads(
        &self,
        bound: &BoundParams,
        grads: &mut Gradients<F>,
        filter: impl Fn(ParamGroup) -> bool,
    ) -> Vec<(String, Tensor<F>)> {
        let mut out = Vec::new();
        for e in &self.entries {
            if !filter(e.group) {
                continue;
            }
            let var = bound.var(&e.name);
            let grad = grads
                .take(var)
                .unwrap_or_else(|| Tensor::zeros(e.tensor.shape()));
            out.push((e.name.clone(), grad));
        }
        out
    }

    pub fn cast<G: Scalar>(&self) -> ParameterStore<G> {
        let mut out = ParameterStore::empty();
        for e in &self.entries {
            out.insert(e.name.clone(), e.group, e.tensor.cast());
        }
        out
    }
}

/// Name-to-var map for one bound graph.
pub struct BoundParams {
    vars: HashMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }
}

/// Box-Muller standard normal draw.
fn normal_sample(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

use rand::SeedableRng;
