//! Chained context aggregation: a global flow plus chain-connected context
//! flows over the shared backbone features, fused by summation and a
//! channel-attention feature selection module.
//!
//! Flow wiring follows the topology tag. Hybrid keeps every connection kind:
//! shortcuts (shared features into each flow), chained links (each flow into
//! the next) and residual links (each flow into the fusion sum). The series
//! variant keeps only the first shortcut and the last residual link; the
//! parallel variant drops all chained links.
//!
//! Nodes that matter for connectivity carry labels on the tape so an audit
//! can recount the edges from the recorded graph itself.

use crate::error::{Error, Result};
use crate::graph::{BnParamIds, Context, GraphBuilder};
use crate::layers::{ConvBn, ConvLayer, SeparableConvBn};
use crate::tensor::{Tape, Val};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Topology {
    Hybrid,
    Series,
    Parallel,
}

impl Topology {
    pub fn parse(tag: &str) -> Result<Self> {
        match tag {
            "hybrid" => Ok(Topology::Hybrid),
            "series" => Ok(Topology::Series),
            "parallel" => Ok(Topology::Parallel),
            other => Err(Error::invalid(
                "cam",
                format!("unknown topology tag {other:?} (expected hybrid, series or parallel)"),
            )),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Topology::Hybrid => "hybrid",
            Topology::Series => "series",
            Topology::Parallel => "parallel",
        }
    }
}

#[derive(Clone, Debug)]
pub struct CamConfig {
    /// Down-sampling scale of each context flow, top down.
    pub scales: Vec<usize>,
    /// Channel width of every information flow.
    pub width: usize,
    /// Output channels of the feature selection module.
    pub fsm_channels: usize,
    pub topology: Topology,
    pub use_global_flow: bool,
}

impl Default for CamConfig {
    fn default() -> Self {
        CamConfig {
            scales: vec![2, 4, 8, 16],
            width: 512,
            fsm_channels: 256,
            topology: Topology::Hybrid,
            use_global_flow: true,
        }
    }
}

impl CamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(Error::invalid("cam", "flow width must be positive"));
        }
        if self.fsm_channels == 0 {
            return Err(Error::invalid("cam", "fsm_channels must be positive"));
        }
        if self.scales.is_empty() && self.topology != Topology::Series {
            return Err(Error::invalid("cam", "scales must not be empty"));
        }
        if self.scales.contains(&0) {
            return Err(Error::invalid("cam", "scales must be >= 1"));
        }
        if self.scales.is_empty() && !self.use_global_flow {
            return Err(Error::invalid("cam", "no flows configured"));
        }
        Ok(())
    }
}

/// Global flow: global average pooling followed by a 1x1 projection. The
/// output stays at 1x1 and is broadcast by bilinear interpolation wherever
/// it is consumed.
struct GlobalFlow {
    conv: ConvLayer,
    bn: BnParamIds,
}

impl GlobalFlow {
    fn build(b: &mut GraphBuilder, c_in: usize, width: usize) -> Self {
        b.scoped("gf", |b| GlobalFlow {
            conv: ConvLayer::build_1x1(b, "proj", c_in, width),
            bn: b.bn_params("norm", width),
        })
    }

    fn forward(&self, cx: &mut Context, shared: Val) -> Result<Val> {
        let pooled = cx.tape.global_avg_pool(shared);
        let y = self.conv.forward(cx, pooled)?;
        let y = cx.batch_norm(y, &self.bn)?;
        Ok(cx.tape.relu(y))
    }
}

/// Context flow at one down-sampling scale: optional concat of its inputs,
/// average pooling, two depth-wise separable projections, bilinear up.
struct ContextFlow {
    scale: usize,
    sep1: SeparableConvBn,
    sep2: SeparableConvBn,
}

/// Which tensors feed a context flow's pre-fusion. At least one is present.
struct CfInputs {
    shared: Option<Val>,
    upper: Option<Val>,
}

impl ContextFlow {
    fn build(b: &mut GraphBuilder, name: &str, c_in: usize, width: usize, scale: usize) -> Self {
        b.scoped(name, |b| ContextFlow {
            scale,
            sep1: SeparableConvBn::build(b, "sep1", c_in, width),
            sep2: SeparableConvBn::build(b, "sep2", width, width),
        })
    }

    /// Pre-fusion. The entry node (concat, or the pooling when there is a
    /// single input) is labeled so the topology audit can classify the
    /// incoming edges.
    fn forward(&self, cx: &mut Context, index: usize, inputs: CfInputs) -> Result<Val> {
        let reference = inputs.shared.or(inputs.upper).expect("context flow needs an input");
        let target = cx.tape.shape(reference);
        let mut gathered = Vec::new();
        if let Some(shared) = inputs.shared {
            gathered.push(shared);
        }
        if let Some(upper) = inputs.upper {
            let us = cx.tape.shape(upper);
            let upper = if (us.h, us.w) == (target.h, target.w) {
                upper
            } else {
                cx.tape.bilinear_upsample(upper, target.h, target.w)?
            };
            gathered.push(upper);
        }
        let entry_label = format!("cam.cf{index}.entry");
        let merged = if gathered.len() > 1 {
            let cat = cx.tape.concat_channels(&gathered)?;
            cx.tape.set_label(cat, entry_label);
            cx.tape.avg_pool2d(cat, self.scale)?
        } else {
            let pooled = cx.tape.avg_pool2d(gathered[0], self.scale)?;
            cx.tape.set_label(pooled, entry_label);
            pooled
        };
        let y = self.sep1.forward(cx, merged)?;
        let y = self.sep2.forward(cx, y)?;
        cx.tape.bilinear_upsample(y, target.h, target.w)
    }
}

/// Feature selection module: sums the flow outputs (each brought to the
/// shared resolution by bilinear interpolation), projects them, and gates
/// the result with channel attention before the residual add.
struct Fsm {
    proj: ConvBn,
    gate_conv: ConvLayer,
    gate_bn: BnParamIds,
}

impl Fsm {
    fn build(b: &mut GraphBuilder, width: usize, fsm_channels: usize) -> Self {
        b.scoped("fsm", |b| Fsm {
            proj: ConvBn::build(b, "proj", width, fsm_channels, 3, 1, 1),
            gate_conv: ConvLayer::build_1x1(b, "gate", fsm_channels, fsm_channels),
            gate_bn: b.bn_params("gate_norm", fsm_channels),
        })
    }

    /// Residual summation of flow outputs at the target resolution. Each
    /// term is labeled for the audit.
    fn sum_flows(cx: &mut Context, flows: &[Val], h: usize, w: usize) -> Result<Val> {
        let c = cx.tape.shape(flows[0]).c;
        for &f in flows {
            let fc = cx.tape.shape(f).c;
            if fc != c {
                return Err(Error::shape(
                    "fsm",
                    format!("flow outputs disagree in channels: {fc} vs {c}"),
                ));
            }
        }
        let mut sum = None;
        for (i, &f) in flows.iter().enumerate() {
            let term = cx.tape.bilinear_upsample(f, h, w)?;
            cx.tape.set_label(term, format!("cam.fsm.term{i}"));
            sum = Some(match sum {
                None => term,
                Some(acc) => cx.tape.add(acc, term)?,
            });
        }
        Ok(sum.expect("at least one flow"))
    }

    fn forward(&self, cx: &mut Context, flows: &[Val], h: usize, w: usize) -> Result<Val> {
        let summed = Self::sum_flows(cx, flows, h, w)?;
        let projected = self.proj.forward(cx, summed, true)?;
        let pooled = cx.tape.global_avg_pool(projected);
        let gate = self.gate_conv.forward(cx, pooled)?;
        let gate = cx.batch_norm(gate, &self.gate_bn)?;
        let gate = cx.tape.sigmoid(gate);
        let gated = cx.tape.mul(projected, gate)?;
        cx.tape.add(gated, projected)
    }
}

pub struct Cam {
    cfg: CamConfig,
    gf: Option<GlobalFlow>,
    cfs: Vec<ContextFlow>,
    fsm: Fsm,
}

impl Cam {
    pub fn build(b: &mut GraphBuilder, cfg: &CamConfig, shared_channels: usize) -> Self {
        b.scoped("cam", |b| {
            let gf = cfg.use_global_flow.then(|| GlobalFlow::build(b, shared_channels, cfg.width));
            let mut cfs = Vec::with_capacity(cfg.scales.len());
            for (i, &scale) in cfg.scales.iter().enumerate() {
                let index = i + 1;
                let has_upper = match cfg.topology {
                    Topology::Parallel => false,
                    Topology::Hybrid | Topology::Series => i > 0 || cfg.use_global_flow,
                };
                let takes_shared = match cfg.topology {
                    Topology::Series => i == 0,
                    Topology::Hybrid | Topology::Parallel => true,
                };
                let c_in = match (takes_shared, has_upper) {
                    (true, true) => shared_channels + cfg.width,
                    (true, false) => shared_channels,
                    (false, true) => cfg.width,
                    (false, false) => unreachable!("context flow without inputs"),
                };
                cfs.push(ContextFlow::build(b, &format!("cf{index}"), c_in, cfg.width, scale));
            }
            let fsm = Fsm::build(b, cfg.width, cfg.fsm_channels);
            Cam { cfg: cfg.clone(), gf, cfs, fsm }
        })
    }

    pub fn config(&self) -> &CamConfig {
        &self.cfg
    }

    /// Runs the flows and the feature selection module over shared features,
    /// returning the re-fused contexts at the shared resolution with
    /// `fsm_channels` channels.
    pub fn forward(&self, cx: &mut Context, shared: Val) -> Result<Val> {
        cx.tape.set_label(shared, "cam.shared");
        let s = cx.tape.shape(shared);

        let gf_out = match &self.gf {
            Some(gf) => {
                let out = gf.forward(cx, shared)?;
                cx.tape.set_label(out, "cam.flow0.out");
                Some(out)
            }
            None => None,
        };

        let mut cf_outs = Vec::with_capacity(self.cfs.len());
        let mut upper = gf_out;
        for (i, cf) in self.cfs.iter().enumerate() {
            let index = i + 1;
            let inputs = match self.cfg.topology {
                Topology::Hybrid => CfInputs { shared: Some(shared), upper },
                Topology::Parallel => CfInputs { shared: Some(shared), upper: None },
                Topology::Series => {
                    if i == 0 {
                        CfInputs { shared: Some(shared), upper }
                    } else {
                        CfInputs { shared: None, upper }
                    }
                }
            };
            let out = cf.forward(cx, index, inputs)?;
            cx.tape.set_label(out, format!("cam.flow{index}.out"));
            cf_outs.push(out);
            upper = Some(out);
        }

        let mut fsm_inputs = Vec::new();
        if let Some(g) = gf_out {
            fsm_inputs.push(g);
        }
        match self.cfg.topology {
            Topology::Series => {
                if let Some(last) = cf_outs.last() {
                    fsm_inputs.push(*last);
                }
            }
            Topology::Hybrid | Topology::Parallel => fsm_inputs.extend(&cf_outs),
        }
        self.fsm.forward(cx, &fsm_inputs, s.h, s.w)
    }
}

/// Connection counts recovered from a recorded tape.
#[derive(Debug, Default, PartialEq, Eq)]
pub struct TopologyAudit {
    /// Flow output feeding a later flow's pre-fusion.
    pub chained: usize,
    /// Shared backbone features feeding a flow's pre-fusion.
    pub shortcut: usize,
    /// Context-flow output entering the fusion sum.
    pub residual: usize,
}

/// Recounts the flow guidance connections by walking the tape: each context
/// flow entry is classified by where its inputs originate, and each fusion
/// term by the flow it carries. The global flow's own fusion term is not a
/// residual connection.
pub fn audit_topology(tape: &Tape) -> TopologyAudit {
    let mut audit = TopologyAudit::default();
    for entry in tape.find_labeled("cam.cf") {
        if !tape.label(entry).is_some_and(|l| l.ends_with(".entry")) {
            continue;
        }
        for input in tape.inputs(entry) {
            let origin = tape.resolve_origin(input);
            match tape.label(origin) {
                Some("cam.shared") => audit.shortcut += 1,
                Some(l) if l.starts_with("cam.flow") && l.ends_with(".out") => audit.chained += 1,
                _ => {}
            }
        }
    }
    for term in tape.find_labeled("cam.fsm.term") {
        let origin = tape.resolve_origin(tape.inputs(term)[0]);
        if let Some(l) = tape.label(origin) {
            if l.starts_with("cam.flow") && l.ends_with(".out") && l != "cam.flow0.out" {
                audit.residual += 1;
            }
        }
    }
    audit
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::ModelGraph;
    use crate::tensor::{Mode, Shape, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: Shape, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(shape, (0..shape.numel()).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn toy_cfg(topology: Topology) -> CamConfig {
        CamConfig {
            scales: vec![2, 4],
            width: 16,
            fsm_channels: 8,
            topology,
            use_global_flow: true,
        }
    }

    fn build_cam(cfg: &CamConfig, shared_c: usize, seed: u64) -> (ModelGraph, Cam) {
        let mut g = ModelGraph::new();
        let cam = {
            let mut b = GraphBuilder::new(&mut g, ChaCha8Rng::seed_from_u64(seed));
            Cam::build(&mut b, cfg, shared_c)
        };
        (g, cam)
    }

    #[test]
    fn topology_tag_parsing() {
        assert_eq!(Topology::parse("hybrid").unwrap(), Topology::Hybrid);
        assert_eq!(Topology::parse("series").unwrap(), Topology::Series);
        assert_eq!(Topology::parse("parallel").unwrap(), Topology::Parallel);
        assert!(Topology::parse("ladder").is_err());
    }

    #[test]
    fn output_shape_contract() {
        let cfg = toy_cfg(Topology::Hybrid);
        let (mut g, cam) = build_cam(&cfg, 32, 1);
        let mut cx = Context::new(&mut g, Mode::Eval);
        let shared = cx.input(rand_tensor(Shape::new(1, 32, 8, 8), 2));
        let out = cam.forward(&mut cx, shared).unwrap();
        assert_eq!(cx.tape.shape(out), Shape::new(1, 8, 8, 8));
    }

    #[test]
    fn global_flow_collapses_space() {
        // On a constant field the output must not depend on h, w.
        let cfg = CamConfig { scales: vec![2], ..toy_cfg(Topology::Hybrid) };
        let (mut g, cam) = build_cam(&cfg, 6, 3);
        let gf = cam.gf.as_ref().unwrap();

        let mut cx = Context::new(&mut g, Mode::Eval);
        let wide = cx.input(Tensor::full(Shape::new(1, 6, 5, 7), 0.37));
        let y_wide = gf.forward(&mut cx, wide).unwrap();
        let tiny = cx.input(Tensor::full(Shape::new(1, 6, 1, 1), 0.37));
        let y_tiny = gf.forward(&mut cx, tiny).unwrap();
        for (a, b) in cx.tape.value(y_wide).data().iter().zip(cx.tape.value(y_tiny).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn global_flow_zero_weights_give_zeros() {
        let cfg = CamConfig { scales: vec![2], ..toy_cfg(Topology::Hybrid) };
        let (mut g, cam) = build_cam(&cfg, 6, 4);
        let wid = g.lookup("cam.gf.proj.weight").unwrap();
        g.get_mut(wid).value = Tensor::zeros(g.get(wid).value.shape());
        let mut cx = Context::new(&mut g, Mode::Eval);
        let shared = cx.input(rand_tensor(Shape::new(1, 6, 4, 4), 5));
        let y = cam.gf.as_ref().unwrap().forward(&mut cx, shared).unwrap();
        assert!(cx.tape.value(y).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn global_flow_matches_channel_mean_oracle() {
        let cfg = CamConfig { scales: vec![2], width: 5, ..toy_cfg(Topology::Hybrid) };
        let (mut g, cam) = build_cam(&cfg, 3, 6);
        let shared_t = rand_tensor(Shape::new(1, 3, 4, 4), 7);
        let wt = g.get(g.lookup("cam.gf.proj.weight").unwrap()).value.clone();
        let mut cx = Context::new(&mut g, Mode::Eval);
        let shared = cx.input(shared_t.clone());
        let y = cam.gf.as_ref().unwrap().forward(&mut cx, shared).unwrap();

        // Oracle: 1x1 conv applied to per-channel means, then eval-mode
        // normalization (fresh running stats) and relu.
        let mut means = [0.0; 3];
        for (c, mean) in means.iter_mut().enumerate() {
            let mut acc = 0.0;
            for h in 0..4 {
                for w in 0..4 {
                    acc += shared_t.at(0, c, h, w);
                }
            }
            *mean = acc / 16.0;
        }
        for oc in 0..5 {
            let mut conv = 0.0;
            for (c, m) in means.iter().enumerate() {
                conv += wt.at(oc, c, 0, 0) * m;
            }
            let normed = conv / (1.0f64 + 1e-5).sqrt();
            let want = normed.max(0.0);
            assert!((cx.tape.value(y).at(0, oc, 0, 0) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn context_flow_internal_shapes() {
        let cfg = CamConfig { scales: vec![2], width: 16, ..toy_cfg(Topology::Hybrid) };
        let (mut g, cam) = build_cam(&cfg, 32, 8);
        let mut cx = Context::new(&mut g, Mode::Eval);
        let shared = cx.input(rand_tensor(Shape::new(1, 32, 8, 8), 9));
        let upper = cx.input(rand_tensor(Shape::new(1, 16, 1, 1), 10));
        let out = cam.cfs[0]
            .forward(&mut cx, 1, CfInputs { shared: Some(shared), upper: Some(upper) })
            .unwrap();
        assert_eq!(cx.tape.shape(out), Shape::new(1, 16, 8, 8));
        // The pooled pre-fusion sits right after the labeled concat.
        let entry = cx.tape.find_labeled("cam.cf1.entry")[0];
        assert_eq!(cx.tape.shape(entry).c, 48);
    }

    #[test]
    fn context_flow_clamps_when_scale_exceeds_input() {
        let cfg = CamConfig { scales: vec![16], width: 8, ..toy_cfg(Topology::Parallel) };
        let (mut g, cam) = build_cam(&cfg, 12, 11);
        let mut cx = Context::new(&mut g, Mode::Eval);
        let shared = cx.input(rand_tensor(Shape::new(1, 12, 8, 8), 12));
        let out = cam.cfs[0].forward(&mut cx, 1, CfInputs { shared: Some(shared), upper: None }).unwrap();
        assert_eq!(cx.tape.shape(out), Shape::new(1, 8, 8, 8));
        // Internal map was 1x1, so the up-sampled output is constant per channel.
        let t = cx.tape.value(out);
        for c in 0..8 {
            let v0 = t.at(0, c, 0, 0);
            for h in 0..8 {
                for w in 0..8 {
                    assert_eq!(t.at(0, c, h, w), v0);
                }
            }
        }
    }

    #[test]
    fn context_flow_zero_weights_give_zeros() {
        let cfg = CamConfig { scales: vec![2], width: 8, ..toy_cfg(Topology::Parallel) };
        let (mut g, cam) = build_cam(&cfg, 4, 13);
        for name in ["cam.cf1.sep1.dw.weight", "cam.cf1.sep1.pw.weight", "cam.cf1.sep2.dw.weight", "cam.cf1.sep2.pw.weight"] {
            let id = g.lookup(name).unwrap();
            g.get_mut(id).value = Tensor::zeros(g.get(id).value.shape());
        }
        let mut cx = Context::new(&mut g, Mode::Eval);
        let shared = cx.input(rand_tensor(Shape::new(1, 4, 6, 6), 14));
        let out = cam.cfs[0].forward(&mut cx, 1, CfInputs { shared: Some(shared), upper: None }).unwrap();
        assert!(cx.tape.value(out).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn fsm_zero_projection_collapses_to_zero() {
        let cfg = CamConfig { scales: vec![2], width: 8, fsm_channels: 4, ..toy_cfg(Topology::Parallel) };
        let (mut g, cam) = build_cam(&cfg, 4, 15);
        let wid = g.lookup("cam.fsm.proj.weight").unwrap();
        g.get_mut(wid).value = Tensor::zeros(g.get(wid).value.shape());
        let mut cx = Context::new(&mut g, Mode::Eval);
        let flow = cx.input(rand_tensor(Shape::new(1, 8, 5, 5), 16));
        let out = cam.fsm.forward(&mut cx, &[flow], 5, 5).unwrap();
        assert!(cx.tape.value(out).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn fsm_gate_hand_evaluation() {
        // Zero projection weights with shift u make U' uniform; zero gate
        // weights pass 0 through the calibrated norm, so the gate is 0.5 and
        // the output is 1.5 * u everywhere.
        let u = 0.8;
        let cfg = CamConfig { scales: vec![2], width: 8, fsm_channels: 4, ..toy_cfg(Topology::Parallel) };
        let (mut g, cam) = build_cam(&cfg, 4, 17);
        for name in ["cam.fsm.proj.weight", "cam.fsm.gate.weight"] {
            let id = g.lookup(name).unwrap();
            g.get_mut(id).value = Tensor::zeros(g.get(id).value.shape());
        }
        let shift = g.lookup("cam.fsm.proj.norm.shift").unwrap();
        g.get_mut(shift).value = Tensor::full(Shape::new(4, 1, 1, 1), u);
        let mut cx = Context::new(&mut g, Mode::Eval);
        let flow = cx.input(rand_tensor(Shape::new(1, 8, 3, 3), 18));
        let out = cam.fsm.forward(&mut cx, &[flow], 3, 3).unwrap();
        for v in cx.tape.value(out).data() {
            assert!((v - 1.5 * u).abs() < 1e-12, "{v}");
        }
    }

    #[test]
    fn fsm_sum_is_linear_in_flows() {
        let cfg = toy_cfg(Topology::Hybrid);
        let (mut g, _cam) = build_cam(&cfg, 4, 19);
        let mut cx = Context::new(&mut g, Mode::Eval);
        let f = cx.input(rand_tensor(Shape::new(1, 16, 4, 4), 20));
        let single = Fsm::sum_flows(&mut cx, &[f], 4, 4).unwrap();
        let double = Fsm::sum_flows(&mut cx, &[f, f], 4, 4).unwrap();
        for (s, d) in cx.tape.value(single).data().iter().zip(cx.tape.value(double).data()) {
            assert!((2.0 * s - d).abs() < 1e-12);
        }
    }

    #[test]
    fn fsm_rejects_channel_mismatch() {
        let cfg = toy_cfg(Topology::Hybrid);
        let (mut g, cam) = build_cam(&cfg, 4, 21);
        let mut cx = Context::new(&mut g, Mode::Eval);
        let a = cx.input(rand_tensor(Shape::new(1, 16, 4, 4), 22));
        let b = cx.input(rand_tensor(Shape::new(1, 12, 4, 4), 23));
        assert!(cam.fsm.forward(&mut cx, &[a, b], 4, 4).is_err());
    }

    #[test]
    fn fsm_sum_order_immaterial() {
        let cfg = CamConfig { scales: vec![2, 4, 8], ..toy_cfg(Topology::Hybrid) };
        let (mut g, cam) = build_cam(&cfg, 4, 24);
        let flows: Vec<Tensor> =
            (0..3).map(|i| rand_tensor(Shape::new(1, 16, 4, 4), 30 + i)).collect();

        let run = |g: &mut ModelGraph, order: [usize; 3]| {
            let mut cx = Context::new(g, Mode::Eval);
            let vals: Vec<Val> = order.iter().map(|&i| cx.input(flows[i].clone())).collect();
            let out = cam.fsm.forward(&mut cx, &vals, 4, 4).unwrap();
            cx.tape.value(out).clone()
        };
        let a = run(&mut g, [0, 1, 2]);
        let b = run(&mut g, [2, 0, 1]);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1e-9);
        }
    }

    #[test]
    fn audit_counts_per_topology() {
        for (topology, chained, shortcut, residual) in [
            (Topology::Hybrid, 2, 2, 2),
            (Topology::Parallel, 0, 2, 2),
            (Topology::Series, 2, 1, 1),
        ] {
            let cfg = toy_cfg(topology);
            let (mut g, cam) = build_cam(&cfg, 8, 25);
            let mut cx = Context::new(&mut g, Mode::Eval);
            let shared = cx.input(rand_tensor(Shape::new(1, 8, 8, 8), 26));
            cam.forward(&mut cx, shared).unwrap();
            let audit = audit_topology(&cx.tape);
            assert_eq!(
                audit,
                TopologyAudit { chained, shortcut, residual },
                "{topology:?}"
            );
        }
    }

    #[test]
    fn series_and_hybrid_differ_on_same_seed() {
        let shared_t = rand_tensor(Shape::new(1, 8, 8, 8), 27);
        let mut outs = Vec::new();
        for topology in [Topology::Hybrid, Topology::Series] {
            let cfg = toy_cfg(topology);
            let (mut g, cam) = build_cam(&cfg, 8, 28);
            let mut cx = Context::new(&mut g, Mode::Eval);
            let shared = cx.input(shared_t.clone());
            let out = cam.forward(&mut cx, shared).unwrap();
            outs.push(cx.tape.value(out).clone());
        }
        let max_diff = outs[0]
            .data()
            .iter()
            .zip(outs[1].data())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(max_diff > 0.0);
    }

    #[test]
    fn hybrid_has_no_dead_branches() {
        // Every context-flow parameter must receive a nonzero gradient from
        // a generic loss on the re-fused output.
        let cfg = toy_cfg(Topology::Hybrid);
        let (mut g, cam) = build_cam(&cfg, 8, 29);
        let mut cx = Context::new(&mut g, Mode::Train);
        let shared = cx.input(rand_tensor(Shape::new(2, 8, 12, 12), 30));
        let out = cam.forward(&mut cx, shared).unwrap();
        let sq = cx.tape.mul(out, out).unwrap();
        let loss = cx.tape.sum_all(sq);
        cx.backward(loss).unwrap();
        for (_, p) in g.iter() {
            if !p.trainable || !p.name.starts_with("cam.cf") {
                continue;
            }
            let grad = p.grad.as_ref().expect("gradient present");
            assert!(
                grad.data().iter().any(|v| *v != 0.0),
                "parameter {} has an all-zero gradient",
                p.name
            );
        }
    }

    #[test]
    fn perturbation_footprint_grows_with_scale() {
        // A single-pixel perturbation of the shared features must influence
        // a strictly larger output region through a scale-16 flow than a
        // scale-2 flow.
        let (mut g, cams) = {
            let mut g = ModelGraph::new();
            let mut b = GraphBuilder::new(&mut g, ChaCha8Rng::seed_from_u64(31));
            let small = ContextFlow::build(&mut b, "probe_small", 8, 8, 2);
            let large = ContextFlow::build(&mut b, "probe_large", 8, 8, 16);
            (g, (small, large))
        };
        let base = rand_tensor(Shape::new(1, 8, 32, 32), 32);
        let mut perturbed = base.clone();
        let idx = base.shape().index(0, 3, 16, 16);
        perturbed.data_mut()[idx] += 5.0;

        let footprint = |g: &mut ModelGraph, cf: &ContextFlow, a: &Tensor, b: &Tensor| {
            let run = |g: &mut ModelGraph, t: &Tensor| {
                let mut cx = Context::new(g, Mode::Eval);
                let v = cx.input(t.clone());
                let out = cf.forward(&mut cx, 1, CfInputs { shared: Some(v), upper: None }).unwrap();
                cx.tape.value(out).clone()
            };
            let ya = run(g, a);
            let yb = run(g, b);
            let s = ya.shape();
            let mut touched = 0;
            for h in 0..s.h {
                for w in 0..s.w {
                    if (0..s.c).any(|c| (ya.at(0, c, h, w) - yb.at(0, c, h, w)).abs() > 1e-9) {
                        touched += 1;
                    }
                }
            }
            touched
        };
        let small_fp = footprint(&mut g, &cams.0, &base, &perturbed);
        let large_fp = footprint(&mut g, &cams.1, &base, &perturbed);
        assert!(large_fp > small_fp, "scale 16 footprint {large_fp} <= scale 2 footprint {small_fp}");
    }

    #[test]
    fn param_count_independent_of_input_size() {
        let cfg = toy_cfg(Topology::Hybrid);
        let (mut g, cam) = build_cam(&cfg, 8, 33);
        let before = g.count_params(&["cam."]);
        for size in [8usize, 16, 24] {
            let mut cx = Context::new(&mut g, Mode::Eval);
            let shared = cx.input(rand_tensor(Shape::new(1, 8, size, size), 34));
            cam.forward(&mut cx, shared).unwrap();
        }
        assert_eq!(g.count_params(&["cam."]), before);
    }
}
