//! Named parameter storage for a model: trainable weights, normalization
//! parameters and non-trainable running statistics all live here, so
//! checkpointing and the optimizer see one flat registry.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Shape, Tape, Tensor, Val};

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct ParamId(pub(crate) usize);

pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub trainable: bool,
    pub weight_decay_exempt: bool,
}

#[derive(Default)]
pub struct ModelGraph {
    params: Vec<Parameter>,
    index: HashMap<String, ParamId>,
}

impl ModelGraph {
    pub fn new() -> Self {
        ModelGraph::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool, wd_exempt: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name: {name}"
        );
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            value,
            grad: None,
            trainable,
            weight_decay_exempt: wd_exempt,
        });
        id
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Adds the gradients of every parameter-bound leaf on `tape` into the
    /// corresponding parameter, accumulating across calls. Trainable
    /// parameters that were never touched get an explicit zero gradient.
    pub fn accumulate_grads_from(&mut self, tape: &Tape) {
        for v in tape.vals() {
            let Some(pid) = tape.param_of(v) else { continue };
            let Some(g) = tape.grad(v) else { continue };
            let p = &mut self.params[pid.0];
            match &mut p.grad {
                Some(existing) => existing.add_assign(g),
                slot @ None => *slot = Some(g.clone()),
            }
        }
        for p in &mut self.params {
            if p.trainable && p.grad.is_none() {
                p.grad = Some(Tensor::zeros(p.value.shape()));
            }
        }
    }

    /// Total element count of trainable parameters whose name starts with
    /// one of the given prefixes (all trainable parameters if empty).
    pub fn count_params(&self, prefixes: &[&str]) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .filter(|p| prefixes.is_empty() || prefixes.iter().any(|pre| p.name.starts_with(pre)))
            .map(|p| p.value.numel())
            .sum()
    }
}

/// Scoped builder handed to model components so parameter names form a
/// `component.layer.kind` path and initialization draws from one seeded
/// stream.
pub struct GraphBuilder<'g> {
    pub graph: &'g mut ModelGraph,
    pub rng: ChaCha8Rng,
    scope: Vec<String>,
}

impl<'g> GraphBuilder<'g> {
    pub fn new(graph: &'g mut ModelGraph, rng: ChaCha8Rng) -> Self {
        GraphBuilder { graph, rng, scope: Vec::new() }
    }

    pub fn scoped<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> T) -> T {
        self.scope.push(name.to_string());
        let out = f(self);
        self.scope.pop();
        out
    }

    fn path(&self, leaf: &str) -> String {
        let mut s = self.scope.join(".");
        if !s.is_empty() {
            s.push('.');
        }
        s.push_str(leaf);
        s
    }

    /// He-style fan-out normal initialization for a convolution weight of
    /// shape (C_out, C_in/groups, k, k).
    pub fn conv_weight(&mut self, name: &str, c_out: usize, c_in_per_group: usize, k: usize) -> ParamId {
        let fan_out = c_out * k * k;
        let std = (2.0 / fan_out as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        let shape = Shape::new(c_out, c_in_per_group, k, k);
        let data = (0..shape.numel()).map(|_| normal.sample(&mut self.rng)).collect();
        self.graph.add(self.path(name), Tensor::from_vec(shape, data), true, false)
    }

    /// Bias initialized to zero, stored as (C,1,1,1). Exempt from weight decay.
    pub fn bias(&mut self, name: &str, c: usize) -> ParamId {
        self.graph.add(self.path(name), Tensor::zeros(Shape::new(c, 1, 1, 1)), true, true)
    }

    /// Normalization scale (init 1) and shift (init 0), both weight-decay
    /// exempt, plus non-trainable running mean/var buffers.
    pub fn bn_params(&mut self, name: &str, c: usize) -> BnParamIds {
        let scale = self.graph.add(
            self.path(&format!("{name}.scale")),
            Tensor::full(Shape::new(c, 1, 1, 1), 1.0),
            true,
            true,
        );
        let shift = self.graph.add(
            self.path(&format!("{name}.shift")),
            Tensor::zeros(Shape::new(c, 1, 1, 1)),
            true,
            true,
        );
        let running_mean = self.graph.add(
            self.path(&format!("{name}.running_mean")),
            Tensor::zeros(Shape::new(c, 1, 1, 1)),
            false,
            true,
        );
        let running_var = self.graph.add(
            self.path(&format!("{name}.running_var")),
            Tensor::full(Shape::new(c, 1, 1, 1), 1.0),
            false,
            true,
        );
        BnParamIds { scale, shift, running_mean, running_var }
    }

    /// Uniform draw, available for tests that want arbitrary tensors from the
    /// same stream.
    pub fn uniform(&mut self, shape: Shape, lo: f64, hi: f64) -> Tensor {
        let data = (0..shape.numel()).map(|_| self.rng.random_range(lo..hi)).collect();
        Tensor::from_vec(shape, data)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BnParamIds {
    pub scale: ParamId,
    pub shift: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

/// Forward-pass context: the tape being recorded, the parameter store, and
/// the train/eval mode. Parameter leaves are memoized so one tape node backs
/// every use of a parameter within a pass.
pub struct Context<'g> {
    pub graph: &'g mut ModelGraph,
    pub tape: Tape,
    pub mode: crate::tensor::Mode,
    param_vals: HashMap<ParamId, Val>,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    warned_small_batch: bool,
}

impl<'g> Context<'g> {
    pub fn new(graph: &'g mut ModelGraph, mode: crate::tensor::Mode) -> Self {
        Context {
            graph,
            tape: Tape::new(),
            mode,
            param_vals: HashMap::new(),
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            warned_small_batch: false,
        }
    }

    pub fn input(&mut self, t: Tensor) -> Val {
        self.tape.leaf(t)
    }

    pub fn param(&mut self, id: ParamId) -> Val {
        if let Some(v) = self.param_vals.get(&id) {
            return *v;
        }
        let v = self.tape.param_leaf(self.graph.get(id).value.clone(), id);
        self.param_vals.insert(id, v);
        v
    }

    /// Batch norm dispatching on mode. Train mode uses batch statistics and
    /// updates the running buffers; eval mode (and train with batch size 1,
    /// which has no usable batch statistics) normalizes with the running
    /// buffers.
    pub fn batch_norm(&mut self, x: Val, bn: &BnParamIds) -> crate::error::Result<Val> {
        let scale = self.param(bn.scale);
        let shift = self.param(bn.shift);
        let use_batch_stats = self.mode == crate::tensor::Mode::Train && self.tape.shape(x).n >= 2;
        if self.mode == crate::tensor::Mode::Train && !use_batch_stats && !self.warned_small_batch {
            eprintln!("warning: batch size 1 in train mode; batch norm falls back to running statistics");
            self.warned_small_batch = true;
        }
        if use_batch_stats {
            let (y, moments) = self.tape.batch_norm_train(x, scale, shift, self.bn_eps)?;
            let m = self.bn_momentum;
            let mean_t = self.graph.get_mut(bn.running_mean);
            for (rm, bm) in mean_t.value.data_mut().iter_mut().zip(&moments.mean) {
                *rm = (1.0 - m) * *rm + m * bm;
            }
            let var_t = self.graph.get_mut(bn.running_var);
            for (rv, bv) in var_t.value.data_mut().iter_mut().zip(&moments.var) {
                *rv = (1.0 - m) * *rv + m * bv;
            }
            Ok(y)
        } else {
            let mean = self.graph.get(bn.running_mean).value.data().to_vec();
            let var = self.graph.get(bn.running_var).value.data().to_vec();
            self.tape.batch_norm_eval(x, scale, shift, &mean, &var, self.bn_eps)
        }
    }

    /// Runs backward from `loss` and accumulates parameter gradients into the
    /// graph.
    pub fn backward(&mut self, loss: Val) -> crate::error::Result<()> {
        self.tape.backward(loss)?;
        self.graph.accumulate_grads_from(&self.tape);
        Ok(())
    }
}
