//! Recording tape for reverse-mode differentiation.
//!
//! Every forward operation appends a node holding the computed value and the
//! information its backward rule needs. `backward` walks the tape in reverse,
//! accumulating gradients additively across fan-out.

use super::kernels::{self, ConvSpec};
use super::{LabelMap, Shape, Tensor};
use crate::error::{Error, Result};
use crate::graph::ParamId;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Val(usize);

/// Whether a forward pass records training-time behavior (batch statistics,
/// auxiliary head) or inference behavior.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Mode {
    Train,
    Eval,
}

enum Record {
    Leaf { param: Option<ParamId> },
    Conv2d { x: Val, w: Val, b: Option<Val>, spec: ConvSpec },
    AvgPool { x: Val, factor: usize },
    GlobalAvgPool { x: Val },
    Bilinear { x: Val },
    BnTrain { x: Val, scale: Val, shift: Val, eps: f64, mean: Vec<f64>, var: Vec<f64> },
    BnEval { x: Val, scale: Val, shift: Val, eps: f64, mean: Vec<f64>, var: Vec<f64> },
    Relu { x: Val },
    Sigmoid { x: Val },
    Add { a: Val, b: Val },
    Mul { a: Val, b: Val },
    ConcatChannels { xs: Vec<Val> },
    ScalarScale { x: Val, k: f64 },
    SumAll { x: Val },
    SoftmaxCe { logits: Val, labels: Vec<u8>, ignore: u8, probs: Tensor, counted: usize },
}

impl Record {
    fn inputs(&self) -> Vec<Val> {
        match self {
            Record::Leaf { .. } => vec![],
            Record::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                if let Some(b) = b {
                    v.push(*b);
                }
                v
            }
            Record::AvgPool { x, .. }
            | Record::GlobalAvgPool { x }
            | Record::Bilinear { x }
            | Record::Relu { x }
            | Record::Sigmoid { x }
            | Record::ScalarScale { x, .. }
            | Record::SumAll { x } => vec![*x],
            Record::BnTrain { x, scale, shift, .. } | Record::BnEval { x, scale, shift, .. } => {
                vec![*x, *scale, *shift]
            }
            Record::Add { a, b } | Record::Mul { a, b } => vec![*a, *b],
            Record::ConcatChannels { xs } => xs.clone(),
            Record::SoftmaxCe { logits, .. } => vec![*logits],
        }
    }

    fn op_name(&self) -> &'static str {
        match self {
            Record::Leaf { .. } => "leaf",
            Record::Conv2d { .. } => "conv2d",
            Record::AvgPool { .. } => "avg_pool2d",
            Record::GlobalAvgPool { .. } => "global_avg_pool",
            Record::Bilinear { .. } => "bilinear_upsample",
            Record::BnTrain { .. } => "batch_norm_train",
            Record::BnEval { .. } => "batch_norm_eval",
            Record::Relu { .. } => "relu",
            Record::Sigmoid { .. } => "sigmoid",
            Record::Add { .. } => "add",
            Record::Mul { .. } => "mul",
            Record::ConcatChannels { .. } => "concat_channels",
            Record::ScalarScale { .. } => "scalar_scale",
            Record::SumAll { .. } => "sum_all",
            Record::SoftmaxCe { .. } => "softmax_cross_entropy",
        }
    }
}

struct Node {
    value: Tensor,
    rec: Record,
    label: Option<String>,
}

/// Batch statistics computed by a train-mode batch norm, handed back to the
/// caller so running statistics can be updated.
pub struct BnMoments {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Tape {
    pub fn new() -> Self {
        crate::runtime::init_thread_pool();
        Tape::default()
    }

    fn push(&mut self, value: Tensor, rec: Record) -> Val {
        self.nodes.push(Node { value, rec, label: None });
        Val(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Val) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Val) -> Shape {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` target with respect to node `v`.
    pub fn grad(&self, v: Val) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn set_label(&mut self, v: Val, label: impl Into<String>) {
        self.nodes[v.0].label = Some(label.into());
    }

    pub fn label(&self, v: Val) -> Option<&str> {
        self.nodes[v.0].label.as_deref()
    }

    pub fn op_name(&self, v: Val) -> &'static str {
        self.nodes[v.0].rec.op_name()
    }

    pub fn inputs(&self, v: Val) -> Vec<Val> {
        self.nodes[v.0].rec.inputs()
    }

    pub fn vals(&self) -> impl Iterator<Item = Val> {
        (0..self.nodes.len()).map(Val)
    }

    /// Nodes whose label starts with `prefix`, in tape order.
    pub fn find_labeled(&self, prefix: &str) -> Vec<Val> {
        self.vals()
            .filter(|v| self.label(*v).is_some_and(|l| l.starts_with(prefix)))
            .collect()
    }

    /// Follows single-input nodes upward until a labeled node (or a leaf or a
    /// multi-input node) is reached. Used by topology audits to see through
    /// resizing plumbing.
    pub fn resolve_origin(&self, mut v: Val) -> Val {
        loop {
            if self.label(v).is_some() {
                return v;
            }
            let ins = self.inputs(v);
            if ins.len() != 1 {
                return v;
            }
            v = ins[0];
        }
    }

    pub fn param_of(&self, v: Val) -> Option<ParamId> {
        match self.nodes[v.0].rec {
            Record::Leaf { param } => param,
            _ => None,
        }
    }

    /// Leaf node for an input tensor that requires no parameter binding.
    pub fn leaf(&mut self, value: Tensor) -> Val {
        self.push(value, Record::Leaf { param: None })
    }

    /// Leaf node bound to a graph parameter; `backward` gradients for it can
    /// be collected into the owning `ModelGraph`.
    pub fn param_leaf(&mut self, value: Tensor, param: ParamId) -> Val {
        self.push(value, Record::Leaf { param: Some(param) })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv2d(
        &mut self,
        x: Val,
        w: Val,
        b: Option<Val>,
        stride: usize,
        padding: usize,
        dilation: usize,
        groups: usize,
    ) -> Result<Val> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if stride == 0 || dilation == 0 || groups == 0 {
            return Err(Error::invalid("conv2d", "stride, dilation and groups must be >= 1"));
        }
        if ws.h != ws.w {
            return Err(Error::shape("conv2d", format!("kernel must be square, got {}x{}", ws.h, ws.w)));
        }
        if !xs.c.is_multiple_of(groups) {
            return Err(Error::shape(
                "conv2d",
                format!("input channels {} not divisible by groups {}", xs.c, groups),
            ));
        }
        if !ws.n.is_multiple_of(groups) {
            return Err(Error::shape(
                "conv2d",
                format!("output channels {} not divisible by groups {}", ws.n, groups),
            ));
        }
        if ws.c != xs.c / groups {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "weight expects {} input channels per group, input has {} ({} channels / {} groups)",
                    ws.c,
                    xs.c / groups,
                    xs.c,
                    groups
                ),
            ));
        }
        let k_ext = dilation * (ws.h - 1) + 1;
        if k_ext > xs.h + 2 * padding || k_ext > xs.w + 2 * padding {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "effective kernel extent {} exceeds padded input {}x{}",
                    k_ext,
                    xs.h + 2 * padding,
                    xs.w + 2 * padding
                ),
            ));
        }
        if let Some(b) = b {
            let bs = self.shape(b);
            if bs.numel() != ws.n {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias has {} elements, expected {} (one per output channel)", bs.numel(), ws.n),
                ));
            }
        }
        let spec = ConvSpec { stride, padding, dilation, groups };
        let bias = b.map(|b| self.nodes[b.0].value.clone());
        let out = kernels::conv2d_forward(&self.nodes[x.0].value, &self.nodes[w.0].value, bias.as_ref(), &spec);
        Ok(self.push(out, Record::Conv2d { x, w, b, spec }))
    }

    pub fn avg_pool2d(&mut self, x: Val, factor: usize) -> Result<Val> {
        if factor < 1 {
            return Err(Error::invalid("avg_pool2d", "factor must be >= 1"));
        }
        let out = kernels::avg_pool_forward(&self.nodes[x.0].value, factor);
        Ok(self.push(out, Record::AvgPool { x, factor }))
    }

    pub fn global_avg_pool(&mut self, x: Val) -> Val {
        let out = kernels::global_avg_pool_forward(&self.nodes[x.0].value);
        self.push(out, Record::GlobalAvgPool { x })
    }

    pub fn bilinear_upsample(&mut self, x: Val, out_h: usize, out_w: usize) -> Result<Val> {
        if out_h < 1 || out_w < 1 {
            return Err(Error::invalid("bilinear_upsample", "output dims must be >= 1"));
        }
        let out = kernels::bilinear_forward(&self.nodes[x.0].value, out_h, out_w);
        Ok(self.push(out, Record::Bilinear { x }))
    }

    fn bn_check(&self, op: &'static str, x: Val, scale: Val, shift: Val) -> Result<usize> {
        let c = self.shape(x).c;
        for (name, v) in [("scale", scale), ("shift", shift)] {
            if self.shape(v).numel() != c {
                return Err(Error::shape(
                    op,
                    format!("{name} has {} elements, expected {} (one per channel)", self.shape(v).numel(), c),
                ));
            }
        }
        Ok(c)
    }

    /// Train-mode batch norm: normalizes by batch statistics over (N, H, W)
    /// and returns them so the caller can update running statistics.
    pub fn batch_norm_train(&mut self, x: Val, scale: Val, shift: Val, eps: f64) -> Result<(Val, BnMoments)> {
        self.bn_check("batch_norm", x, scale, shift)?;
        let (mean, var) = kernels::bn_channel_moments(&self.nodes[x.0].value);
        let out = kernels::bn_normalize(
            &self.nodes[x.0].value,
            &mean,
            &var,
            self.nodes[scale.0].value.data(),
            self.nodes[shift.0].value.data(),
            eps,
        );
        let moments = BnMoments { mean: mean.clone(), var: var.clone() };
        let v = self.push(out, Record::BnTrain { x, scale, shift, eps, mean, var });
        Ok((v, moments))
    }

    /// Eval-mode batch norm: normalizes with the supplied running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Val,
        scale: Val,
        shift: Val,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Val> {
        let c = self.bn_check("batch_norm", x, scale, shift)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::shape(
                "batch_norm",
                format!("running stats have {}/{} elements, expected {c}", mean.len(), var.len()),
            ));
        }
        let out = kernels::bn_normalize(
            &self.nodes[x.0].value,
            mean,
            var,
            self.nodes[scale.0].value.data(),
            self.nodes[shift.0].value.data(),
            eps,
        );
        Ok(self.push(
            out,
            Record::BnEval { x, scale, shift, eps, mean: mean.to_vec(), var: var.to_vec() },
        ))
    }

    pub fn relu(&mut self, x: Val) -> Val {
        let xv = &self.nodes[x.0].value;
        let out = Tensor::from_vec(xv.shape(), xv.data().iter().map(|v| v.max(0.0)).collect());
        self.push(out, Record::Relu { x })
    }

    pub fn sigmoid(&mut self, x: Val) -> Val {
        let xv = &self.nodes[x.0].value;
        let out = Tensor::from_vec(xv.shape(), xv.data().iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect());
        self.push(out, Record::Sigmoid { x })
    }

    /// Shapes that `add`/`mul` accept: identical, or one side (N,C,1,1)
    /// broadcast over the other's spatial extent.
    fn elementwise_check(&self, op: &'static str, a: Val, b: Val) -> Result<Shape> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa == sb || sb.broadcasts_over(&sa) {
            Ok(sa)
        } else if sa.broadcasts_over(&sb) {
            Ok(sb)
        } else {
            Err(Error::shape(op, format!("shapes {sa} and {sb} are not broadcast-compatible")))
        }
    }

    pub fn add(&mut self, a: Val, b: Val) -> Result<Val> {
        let out_shape = self.elementwise_check("add", a, b)?;
        let out = broadcast_zip(&self.nodes[a.0].value, &self.nodes[b.0].value, out_shape, |x, y| x + y);
        Ok(self.push(out, Record::Add { a, b }))
    }

    pub fn mul(&mut self, a: Val, b: Val) -> Result<Val> {
        let out_shape = self.elementwise_check("mul", a, b)?;
        let out = broadcast_zip(&self.nodes[a.0].value, &self.nodes[b.0].value, out_shape, |x, y| x * y);
        Ok(self.push(out, Record::Mul { a, b }))
    }

    pub fn concat_channels(&mut self, xs: &[Val]) -> Result<Val> {
        if xs.is_empty() {
            return Err(Error::invalid("concat_channels", "needs at least one input"));
        }
        let first = self.shape(xs[0]);
        let mut c_total = 0;
        for &v in xs {
            let s = self.shape(v);
            if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
                return Err(Error::shape(
                    "concat_channels",
                    format!("input {s} does not match {first} in batch/spatial dims"),
                ));
            }
            c_total += s.c;
        }
        let out_shape = Shape::new(first.n, c_total, first.h, first.w);
        let mut out = vec![0.0; out_shape.numel()];
        let plane = first.h * first.w;
        for n in 0..first.n {
            let mut c_off = 0;
            for &v in xs {
                let s = self.shape(v);
                let src = &self.nodes[v.0].value;
                let src_base = n * s.c * plane;
                let dst_base = (n * c_total + c_off) * plane;
                out[dst_base..dst_base + s.c * plane]
                    .copy_from_slice(&src.data()[src_base..src_base + s.c * plane]);
                c_off += s.c;
            }
        }
        Ok(self.push(Tensor::from_vec(out_shape, out), Record::ConcatChannels { xs: xs.to_vec() }))
    }

    pub fn scalar_scale(&mut self, x: Val, k: f64) -> Val {
        let xv = &self.nodes[x.0].value;
        let out = Tensor::from_vec(xv.shape(), xv.data().iter().map(|v| k * v).collect());
        self.push(out, Record::ScalarScale { x, k })
    }

    /// Sum of all elements as a (1,1,1,1) scalar. Plumbing for driving
    /// backward through arbitrary subgraphs in the verification suites.
    pub fn sum_all(&mut self, x: Val) -> Val {
        let total: f64 = self.nodes[x.0].value.data().iter().sum();
        self.push(Tensor::scalar(total), Record::SumAll { x })
    }

    pub fn softmax_cross_entropy(&mut self, logits: Val, labels: &LabelMap, ignore: u8) -> Result<Val> {
        let s = self.shape(logits);
        if (labels.n, labels.h, labels.w) != (s.n, s.h, s.w) {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("labels ({},{},{}) do not match logits {s}", labels.n, labels.h, labels.w),
            ));
        }
        labels.check_range(s.c, ignore, "softmax_cross_entropy")?;
        let res = kernels::softmax_ce_forward(&self.nodes[logits.0].value, labels.data(), ignore);
        Ok(self.push(
            Tensor::scalar(res.loss),
            Record::SoftmaxCe {
                logits,
                labels: labels.data().to_vec(),
                ignore,
                probs: res.probs,
                counted: res.counted,
            },
        ))
    }

    fn accumulate(grads: &mut [Option<Tensor>], v: Val, g: Tensor) {
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Reduce a full-shape gradient back to (N,C,1,1) when the operand was
    /// spatially broadcast.
    fn reduce_to(g: &Tensor, target: Shape) -> Tensor {
        if g.shape() == target {
            return g.clone();
        }
        debug_assert!(target.broadcasts_over(&g.shape()));
        let s = g.shape();
        let mut out = vec![0.0; target.numel()];
        for (plane, o) in out.iter_mut().enumerate() {
            let base = plane * s.h * s.w;
            *o = g.data()[base..base + s.h * s.w].iter().sum();
        }
        Tensor::from_vec(target, out)
    }

    fn expand_from(g: &Tensor, source: Shape, out: Shape) -> Tensor {
        if source == out {
            return g.clone();
        }
        // source is (N,C,1,1): broadcast each channel value over space.
        let mut data = vec![0.0; out.numel()];
        for (plane, chunk) in data.chunks_mut(out.h * out.w).enumerate() {
            chunk.fill(g.data()[plane]);
        }
        Tensor::from_vec(out, data)
    }

    /// Runs reverse-mode accumulation from a scalar `loss` node. Gradients
    /// for every node are kept on the tape; parameter-bound leaves can then
    /// be collected by the owning graph.
    pub fn backward(&mut self, loss: Val) -> Result<()> {
        if self.shape(loss).numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.rec {
                Record::Leaf { .. } => {
                    grads[i] = Some(g);
                    continue;
                }
                Record::Conv2d { x, w, b, spec } => {
                    let dx = kernels::conv2d_backward_input(&g, self.nodes[x.0].value.shape(), &self.nodes[w.0].value, spec);
                    let dw = kernels::conv2d_backward_weight(&g, &self.nodes[x.0].value, self.nodes[w.0].value.shape(), spec);
                    let (x, w, b) = (*x, *w, *b);
                    if let Some(b) = b {
                        let mut db = kernels::conv2d_backward_bias(&g);
                        // Bias leaves may be stored (C,1,1,1) or (1,C,1,1).
                        if db.shape() != self.shape(b) {
                            db = Tensor::from_vec(self.shape(b), db.data().to_vec());
                        }
                        Self::accumulate(&mut grads, b, db);
                    }
                    Self::accumulate(&mut grads, x, dx);
                    Self::accumulate(&mut grads, w, dw);
                }
                Record::AvgPool { x, factor } => {
                    let dx = kernels::avg_pool_backward(&g, self.nodes[x.0].value.shape(), *factor);
                    Self::accumulate(&mut grads, *x, dx);
                }
                Record::GlobalAvgPool { x } => {
                    let dx = kernels::global_avg_pool_backward(&g, self.nodes[x.0].value.shape());
                    Self::accumulate(&mut grads, *x, dx);
                }
                Record::Bilinear { x } => {
                    let dx = kernels::bilinear_backward(&g, self.nodes[x.0].value.shape());
                    Self::accumulate(&mut grads, *x, dx);
                }
                Record::BnTrain { x, scale, shift, eps, mean, var } => {
                    let bg = kernels::bn_backward_train(
                        &g,
                        &self.nodes[x.0].value,
                        mean,
                        var,
                        self.nodes[scale.0].value.data(),
                        *eps,
                    );
                    let (x, scale, shift) = (*x, *scale, *shift);
                    let ds = Tensor::from_vec(self.shape(scale), bg.dscale);
                    let db = Tensor::from_vec(self.shape(shift), bg.dshift);
                    Self::accumulate(&mut grads, x, bg.dx);
                    Self::accumulate(&mut grads, scale, ds);
                    Self::accumulate(&mut grads, shift, db);
                }
                Record::BnEval { x, scale, shift, eps, mean, var } => {
                    let bg = kernels::bn_backward_eval(
                        &g,
                        &self.nodes[x.0].value,
                        mean,
                        var,
                        self.nodes[scale.0].value.data(),
                        *eps,
                    );
                    let (x, scale, shift) = (*x, *scale, *shift);
                    let ds = Tensor::from_vec(self.shape(scale), bg.dscale);
                    let db = Tensor::from_vec(self.shape(shift), bg.dshift);
                    Self::accumulate(&mut grads, x, bg.dx);
                    Self::accumulate(&mut grads, scale, ds);
                    Self::accumulate(&mut grads, shift, db);
                }
                Record::Relu { x } => {
                    let xv = &self.nodes[x.0].value;
                    let dx = Tensor::from_vec(
                        xv.shape(),
                        xv.data().iter().zip(g.data()).map(|(x, g)| if *x > 0.0 { *g } else { 0.0 }).collect(),
                    );
                    Self::accumulate(&mut grads, *x, dx);
                }
                Record::Sigmoid { x } => {
                    let yv = &node.value;
                    let dx = Tensor::from_vec(
                        yv.shape(),
                        yv.data().iter().zip(g.data()).map(|(y, g)| g * y * (1.0 - y)).collect(),
                    );
                    Self::accumulate(&mut grads, *x, dx);
                }
                Record::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    let da = Self::reduce_to(&g, self.shape(a));
                    let db = Self::reduce_to(&g, self.shape(b));
                    Self::accumulate(&mut grads, a, da);
                    Self::accumulate(&mut grads, b, db);
                }
                Record::Mul { a, b } => {
                    let (a, b) = (*a, *b);
                    let out_shape = g.shape();
                    let av = Self::expand_from(&self.nodes[a.0].value, self.shape(a), out_shape);
                    let bv = Self::expand_from(&self.nodes[b.0].value, self.shape(b), out_shape);
                    let da_full = Tensor::from_vec(
                        out_shape,
                        g.data().iter().zip(bv.data()).map(|(g, b)| g * b).collect(),
                    );
                    let db_full = Tensor::from_vec(
                        out_shape,
                        g.data().iter().zip(av.data()).map(|(g, a)| g * a).collect(),
                    );
                    Self::accumulate(&mut grads, a, Self::reduce_to(&da_full, self.shape(a)));
                    Self::accumulate(&mut grads, b, Self::reduce_to(&db_full, self.shape(b)));
                }
                Record::ConcatChannels { xs } => {
                    let xs = xs.clone();
                    let gs = g.shape();
                    let plane = gs.h * gs.w;
                    let mut c_off = 0;
                    for v in xs {
                        let s = self.shape(v);
                        let mut dx = vec![0.0; s.numel()];
                        for n in 0..s.n {
                            let src_base = (n * gs.c + c_off) * plane;
                            let dst_base = n * s.c * plane;
                            dx[dst_base..dst_base + s.c * plane]
                                .copy_from_slice(&g.data()[src_base..src_base + s.c * plane]);
                        }
                        c_off += s.c;
                        Self::accumulate(&mut grads, v, Tensor::from_vec(s, dx));
                    }
                }
                Record::ScalarScale { x, k } => {
                    let k = *k;
                    let dx = Tensor::from_vec(g.shape(), g.data().iter().map(|g| k * g).collect());
                    Self::accumulate(&mut grads, *x, dx);
                }
                Record::SumAll { x } => {
                    let dx = Tensor::full(self.shape(*x), g.scalar_value());
                    Self::accumulate(&mut grads, *x, dx);
                }
                Record::SoftmaxCe { logits, labels, ignore, probs, counted } => {
                    let dx = kernels::softmax_ce_backward(g.scalar_value(), probs, labels, *ignore, *counted);
                    Self::accumulate(&mut grads, *logits, dx);
                }
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }
}

fn broadcast_zip(a: &Tensor, b: &Tensor, out_shape: Shape, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let sa = a.shape();
    let sb = b.shape();
    if sa == sb {
        let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
        return Tensor::from_vec(out_shape, data);
    }
    // Exactly one side is (N,C,1,1).
    let (full, chan, swapped) = if sb.broadcasts_over(&sa) { (a, b, false) } else { (b, a, true) };
    let s = full.shape();
    let plane = s.h * s.w;
    let mut out = vec![0.0; s.numel()];
    for (p, chunk) in out.chunks_mut(plane).enumerate() {
        let cv = chan.data()[p];
        let base = p * plane;
        for (o, x) in chunk.iter_mut().zip(&full.data()[base..base + plane]) {
            *o = if swapped { f(cv, *x) } else { f(*x, cv) };
        }
    }
    Tensor::from_vec(out_shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: (usize, usize, usize, usize), data: Vec<f64>) -> Tensor {
        Tensor::from_vec(Shape::new(shape.0, shape.1, shape.2, shape.3), data)
    }

    /// Independent nested-loop convolution used as the oracle for conv2d.
    fn conv_oracle(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, padding: usize, dilation: usize, groups: usize) -> Tensor {
        let xs = x.shape();
        let ws = w.shape();
        let k = ws.h;
        let oh = (xs.h + 2 * padding - dilation * (k - 1) - 1) / stride + 1;
        let ow = (xs.w + 2 * padding - dilation * (k - 1) - 1) / stride + 1;
        let out_shape = Shape::new(xs.n, ws.n, oh, ow);
        let cin_g = xs.c / groups;
        let ocpg = ws.n / groups;
        let mut out = Tensor::zeros(out_shape);
        let od = out.data_mut();
        for n in 0..xs.n {
            for oc in 0..ws.n {
                let g = oc / ocpg;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b.map_or(0.0, |b| b.data()[oc]);
                        for icg in 0..cin_g {
                            let ic = g * cin_g + icg;
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky * dilation) as isize - padding as isize;
                                    let ix = (ox * stride + kx * dilation) as isize - padding as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < xs.h && (ix as usize) < xs.w {
                                        acc += x.at(n, ic, iy as usize, ix as usize)
                                            * w.at(oc, icg, ky, kx);
                                    }
                                }
                            }
                        }
                        od[out_shape.index(n, oc, oy, ox)] = acc;
                    }
                }
            }
        }
        out
    }

    fn rand_tensor(shape: Shape, seed: u64) -> Tensor {
        // Small deterministic LCG; keeps the oracle tests free of RNG deps.
        let mut state = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1);
        let data = (0..shape.numel())
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect();
        Tensor::from_vec(shape, data)
    }

    fn assert_close(a: &Tensor, b: &Tensor, tol: f64) {
        assert_eq!(a.shape(), b.shape());
        for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
            assert!((x - y).abs() <= tol, "index {i}: {x} vs {y}");
        }
    }

    #[test]
    fn conv_all_ones_sums_window() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(Shape::new(1, 1, 3, 3), 1.0));
        let w = tape.leaf(Tensor::full(Shape::new(1, 1, 3, 3), 1.0));
        let y = tape.conv2d(x, w, None, 1, 0, 1, 1).unwrap();
        assert_eq!(tape.shape(y), Shape::new(1, 1, 1, 1));
        assert_eq!(tape.value(y).scalar_value(), 9.0);
    }

    #[test]
    fn conv_shape_formula() {
        let mut tape = Tape::new();
        let x = tape.leaf(rand_tensor(Shape::new(1, 3, 16, 16), 1));
        let w = tape.leaf(rand_tensor(Shape::new(8, 3, 3, 3), 2));
        let y = tape.conv2d(x, w, None, 1, 1, 1, 1).unwrap();
        assert_eq!(tape.shape(y), Shape::new(1, 8, 16, 16));
    }

    #[test]
    fn conv_dilated_matches_nested_loop_oracle() {
        let mut tape = Tape::new();
        let xt = rand_tensor(Shape::new(1, 1, 7, 7), 3);
        let wt = rand_tensor(Shape::new(1, 1, 3, 3), 4);
        let x = tape.leaf(xt.clone());
        let w = tape.leaf(wt.clone());
        let y = tape.conv2d(x, w, None, 1, 2, 2, 1).unwrap();
        assert_eq!(tape.shape(y), Shape::new(1, 1, 7, 7));
        assert_close(tape.value(y), &conv_oracle(&xt, &wt, None, 1, 2, 2, 1), 1e-12);
    }

    #[test]
    fn conv_strided_grouped_biased_matches_oracle() {
        let mut tape = Tape::new();
        let xt = rand_tensor(Shape::new(2, 4, 9, 11), 5);
        let wt = rand_tensor(Shape::new(6, 2, 3, 3), 6);
        let bt = rand_tensor(Shape::new(6, 1, 1, 1), 7);
        let x = tape.leaf(xt.clone());
        let w = tape.leaf(wt.clone());
        let b = tape.leaf(bt.clone());
        let y = tape.conv2d(x, w, Some(b), 2, 1, 1, 2).unwrap();
        assert_close(tape.value(y), &conv_oracle(&xt, &wt, Some(&bt), 2, 1, 1, 2), 1e-12);
    }

    #[test]
    fn conv_rejects_bad_groups() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(Shape::new(1, 3, 8, 8)));
        let w = tape.leaf(Tensor::zeros(Shape::new(4, 1, 3, 3)));
        let err = tape.conv2d(x, w, None, 1, 1, 1, 2).unwrap_err();
        assert!(err.to_string().contains("not divisible by groups"), "{err}");
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(Shape::new(1, 4, 8, 8)));
        let w = tape.leaf(Tensor::zeros(Shape::new(8, 3, 3, 3)));
        let err = tape.conv2d(x, w, None, 1, 1, 1, 1).unwrap_err();
        assert!(err.to_string().contains("input channels per group"), "{err}");
    }

    #[test]
    fn avg_pool_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(t((1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]));
        let y = tape.avg_pool2d(x, 2).unwrap();
        assert_eq!(tape.value(y).scalar_value(), 2.5);

        let c = tape.leaf(Tensor::full(Shape::new(1, 1, 4, 4), 5.0));
        let yc = tape.avg_pool2d(c, 2).unwrap();
        assert_eq!(tape.shape(yc), Shape::new(1, 1, 2, 2));
        assert!(tape.value(yc).data().iter().all(|v| *v == 5.0));

        assert!(tape.avg_pool2d(x, 0).is_err());
    }

    #[test]
    fn avg_pool_edge_windows_match_bruteforce() {
        let mut tape = Tape::new();
        let xt = rand_tensor(Shape::new(1, 2, 5, 5), 8);
        let x = tape.leaf(xt.clone());
        let y = tape.avg_pool2d(x, 2).unwrap();
        assert_eq!(tape.shape(y), Shape::new(1, 2, 3, 3));
        // Brute-force per-window means with true edge extents.
        for c in 0..2 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let (y0, y1) = (oy * 2, (oy * 2 + 2).min(5));
                    let (x0, x1) = (ox * 2, (ox * 2 + 2).min(5));
                    let mut acc = 0.0;
                    for yy in y0..y1 {
                        for xx in x0..x1 {
                            acc += xt.at(0, c, yy, xx);
                        }
                    }
                    let want = acc / ((y1 - y0) * (x1 - x0)) as f64;
                    assert!((tape.value(y).at(0, c, oy, ox) - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn global_avg_pool_matches_direct_mean() {
        let mut tape = Tape::new();
        let x = tape.leaf(t((1, 1, 2, 2), vec![0.0, 0.0, 2.0, 2.0]));
        let y = tape.global_avg_pool(x);
        assert_eq!(tape.value(y).scalar_value(), 1.0);

        let xt = rand_tensor(Shape::new(2, 3, 7, 5), 9);
        let x = tape.leaf(xt.clone());
        let y = tape.global_avg_pool(x);
        assert_eq!(tape.shape(y), Shape::new(2, 3, 1, 1));
        for n in 0..2 {
            for c in 0..3 {
                let mut acc = 0.0;
                for h in 0..7 {
                    for w in 0..5 {
                        acc += xt.at(n, c, h, w);
                    }
                }
                assert!((tape.value(y).at(n, c, 0, 0) - acc / 35.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bilinear_identity_and_constant() {
        let mut tape = Tape::new();
        let xt = rand_tensor(Shape::new(1, 2, 5, 4), 10);
        let x = tape.leaf(xt.clone());
        let y = tape.bilinear_upsample(x, 5, 4).unwrap();
        assert_close(tape.value(y), &xt, 1e-12);

        let c = tape.leaf(Tensor::full(Shape::new(1, 1, 4, 4), 3.5));
        let yc = tape.bilinear_upsample(c, 8, 8).unwrap();
        assert!(tape.value(yc).data().iter().all(|v| *v == 3.5));
    }

    #[test]
    fn bilinear_2x2_to_4x4_matches_coordinate_formula() {
        let mut tape = Tape::new();
        let xt = t((1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]);
        let x = tape.leaf(xt.clone());
        let y = tape.bilinear_upsample(x, 4, 4).unwrap();
        // Direct evaluation of src = (i + 0.5) * in/out - 0.5 with clamping.
        let coord = |i: usize| ((i as f64 + 0.5) * 2.0 / 4.0 - 0.5).clamp(0.0, 1.0);
        for oy in 0..4 {
            for ox in 0..4 {
                let (sy, sx) = (coord(oy), coord(ox));
                let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(1), (x0 + 1).min(1));
                let (ty, tx) = (sy - y0 as f64, sx - x0 as f64);
                let want = (1.0 - ty) * ((1.0 - tx) * xt.at(0, 0, y0, x0) + tx * xt.at(0, 0, y0, x1))
                    + ty * ((1.0 - tx) * xt.at(0, 0, y1, x0) + tx * xt.at(0, 0, y1, x1));
                assert!((tape.value(y).at(0, 0, oy, ox) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bilinear_broadcasts_one_by_one() {
        let mut tape = Tape::new();
        let x = tape.leaf(t((1, 2, 1, 1), vec![4.0, -1.0]));
        let y = tape.bilinear_upsample(x, 3, 5).unwrap();
        for c in 0..2 {
            for h in 0..3 {
                for w in 0..5 {
                    assert_eq!(tape.value(y).at(0, c, h, w), if c == 0 { 4.0 } else { -1.0 });
                }
            }
        }
    }

    #[test]
    fn batch_norm_eval_identity_with_unit_stats() {
        let mut tape = Tape::new();
        let xt = rand_tensor(Shape::new(2, 3, 4, 4), 11);
        let x = tape.leaf(xt.clone());
        let scale = tape.leaf(Tensor::full(Shape::new(3, 1, 1, 1), 1.0));
        let shift = tape.leaf(Tensor::zeros(Shape::new(3, 1, 1, 1)));
        let y = tape.batch_norm_eval(x, scale, shift, &[0.0; 3], &[1.0; 3], 0.0).unwrap();
        assert_close(tape.value(y), &xt, 1e-12);
    }

    #[test]
    fn batch_norm_train_constant_input_gives_shift() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(Shape::new(2, 2, 3, 3), 7.0));
        let scale = tape.leaf(Tensor::full(Shape::new(2, 1, 1, 1), 1.5));
        let shift = tape.leaf(t((2, 1, 1, 1), vec![0.25, -0.5]));
        let (y, moments) = tape.batch_norm_train(x, scale, shift, 1e-5).unwrap();
        for n in 0..2 {
            for h in 0..3 {
                for w in 0..3 {
                    assert!((tape.value(y).at(n, 0, h, w) - 0.25).abs() < 1e-12);
                    assert!((tape.value(y).at(n, 1, h, w) + 0.5).abs() < 1e-12);
                }
            }
        }
        assert!((moments.mean[0] - 7.0).abs() < 1e-12);
        assert!(moments.var[0].abs() < 1e-12);
    }

    #[test]
    fn batch_norm_train_moments_match_scale_shift() {
        let mut tape = Tape::new();
        let xt = rand_tensor(Shape::new(4, 2, 3, 3), 12);
        let x = tape.leaf(xt);
        let scale = tape.leaf(t((2, 1, 1, 1), vec![2.0, 0.5]));
        let shift = tape.leaf(t((2, 1, 1, 1), vec![1.0, -1.0]));
        let (y, _) = tape.batch_norm_train(x, scale, shift, 1e-9).unwrap();
        let (mean, var) = kernels::bn_channel_moments(tape.value(y));
        assert!((mean[0] - 1.0).abs() < 1e-5);
        assert!((mean[1] + 1.0).abs() < 1e-5);
        assert!((var[0] - 4.0).abs() < 1e-5);
        assert!((var[1] - 0.25).abs() < 1e-5);
    }

    #[test]
    fn batch_norm_rejects_channel_mismatch() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(Shape::new(1, 3, 2, 2)));
        let scale = tape.leaf(Tensor::zeros(Shape::new(2, 1, 1, 1)));
        let shift = tape.leaf(Tensor::zeros(Shape::new(3, 1, 1, 1)));
        assert!(tape.batch_norm_train(x, scale, shift, 1e-5).is_err());
    }

    #[test]
    fn pointwise_examples() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::scalar(0.0));
        let s = tape.sigmoid(z);
        assert_eq!(tape.value(s).scalar_value(), 0.5);

        let a = tape.leaf(Tensor::zeros(Shape::new(1, 3, 4, 4)));
        let b = tape.leaf(Tensor::zeros(Shape::new(1, 5, 4, 4)));
        let cat = tape.concat_channels(&[a, b]).unwrap();
        assert_eq!(tape.shape(cat), Shape::new(1, 8, 4, 4));

        let bad = tape.leaf(Tensor::zeros(Shape::new(1, 5, 3, 4)));
        assert!(tape.concat_channels(&[a, bad]).is_err());
    }

    #[test]
    fn gate_broadcast_matches_loop_oracle() {
        let mut tape = Tape::new();
        let gate_t = t((1, 2, 1, 1), vec![0.25, -2.0]);
        let full_t = rand_tensor(Shape::new(1, 2, 3, 3), 13);
        let gate = tape.leaf(gate_t.clone());
        let full = tape.leaf(full_t.clone());
        let y = tape.mul(gate, full).unwrap();
        for c in 0..2 {
            for h in 0..3 {
                for w in 0..3 {
                    let want = gate_t.at(0, c, 0, 0) * full_t.at(0, c, h, w);
                    assert_eq!(tape.value(y).at(0, c, h, w), want);
                }
            }
        }
        let bad = tape.leaf(Tensor::zeros(Shape::new(1, 3, 1, 1)));
        assert!(tape.add(bad, full).is_err());
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(Shape::new(1, 4, 2, 2)));
        let labels = LabelMap::from_vec(1, 2, 2, vec![0, 1, 2, 3]);
        let loss = tape.softmax_cross_entropy(logits, &labels, 255).unwrap();
        assert!((tape.value(loss).scalar_value() - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_saturated_correct_logit() {
        let mut tape = Tape::new();
        let mut data = vec![0.0; 3 * 4];
        // Class 2 gets +50 at every pixel.
        for p in 0..4 {
            data[2 * 4 + p] = 50.0;
        }
        let logits = tape.leaf(t((1, 3, 2, 2), data));
        let labels = LabelMap::from_vec(1, 2, 2, vec![2, 2, 2, 2]);
        let loss = tape.softmax_cross_entropy(logits, &labels, 255).unwrap();
        assert!(tape.value(loss).scalar_value() < 1e-9);
    }

    #[test]
    fn cross_entropy_matches_per_pixel_oracle() {
        let mut tape = Tape::new();
        let logits_t = rand_tensor(Shape::new(1, 3, 2, 2), 14);
        let logits = tape.leaf(logits_t.clone());
        let labels = LabelMap::from_vec(1, 2, 2, vec![0, 2, 255, 1]);
        let loss = tape.softmax_cross_entropy(logits, &labels, 255).unwrap();
        // Direct per-pixel evaluation.
        let mut want = 0.0;
        let mut counted = 0;
        for p in 0..4 {
            let lab = labels.data()[p];
            if lab == 255 {
                continue;
            }
            let vals: Vec<f64> = (0..3).map(|c| logits_t.data()[c * 4 + p]).collect();
            let denom: f64 = vals.iter().map(|v| v.exp()).sum();
            want -= (vals[lab as usize].exp() / denom).ln();
            counted += 1;
        }
        want /= counted as f64;
        assert!((tape.value(loss).scalar_value() - want).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_all_ignored_is_zero_with_zero_grad() {
        let mut tape = Tape::new();
        let logits = tape.leaf(rand_tensor(Shape::new(1, 3, 2, 2), 15));
        let labels = LabelMap::filled(1, 2, 2, 255);
        let loss = tape.softmax_cross_entropy(logits, &labels, 255).unwrap();
        assert_eq!(tape.value(loss).scalar_value(), 0.0);
        tape.backward(loss).unwrap();
        assert!(tape.grad(logits).unwrap().data().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_label() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(Shape::new(1, 3, 1, 1)));
        let labels = LabelMap::from_vec(1, 1, 1, vec![3]);
        assert!(tape.softmax_cross_entropy(logits, &labels, 255).is_err());
    }

    #[test]
    fn backward_linear_in_parameter() {
        // loss = sum(a * x) with constant x: d loss / d a = x.
        let mut tape = Tape::new();
        let a = tape.leaf(t((1, 1, 2, 2), vec![1.0, 1.0, 1.0, 1.0]));
        let x = tape.leaf(t((1, 1, 2, 2), vec![3.0, -2.0, 0.5, 4.0]));
        let prod = tape.mul(a, x).unwrap();
        let loss = tape.sum_all(prod);
        tape.backward(loss).unwrap();
        assert_close(tape.grad(a).unwrap(), tape.value(x), 1e-12);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(Shape::new(1, 1, 2, 2)));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn unused_node_gets_no_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(Shape::new(1, 1, 1, 1), 2.0));
        let unused = tape.leaf(Tensor::full(Shape::new(1, 1, 1, 1), 5.0));
        let loss = tape.sum_all(x);
        tape.backward(loss).unwrap();
        assert!(tape.grad(unused).is_none());
    }

    #[test]
    fn fanout_gradients_accumulate_additively() {
        // y = x + x => dy/dx = 2; also equals sum of two single-consumer runs.
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.5));
        let y = tape.add(x, x).unwrap();
        let loss = tape.sum_all(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().scalar_value(), 2.0);
    }

    #[test]
    fn scalar_scale_backward() {
        let mut tape = Tape::new();
        let x = tape.leaf(t((1, 1, 1, 2), vec![2.0, -3.0]));
        let y = tape.scalar_scale(x, 0.25);
        let loss = tape.sum_all(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, -0.75]);
        assert!(tape.grad(x).unwrap().data().iter().all(|g| *g == 0.25));
    }
}
