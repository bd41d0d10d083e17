//! Full network assembly: backbone, context aggregation, decoder and the
//! train-only auxiliary head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, BackboneConfig};
use crate::cam::{Cam, CamConfig};
use crate::decoder::{AuxHead, Decoder, DecoderConfig};
use crate::error::Result;
use crate::graph::{Context, GraphBuilder, ModelGraph};
use crate::tensor::{Mode, Tensor, Val};

#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub cam: CamConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    /// Paper-scale layout: 50-layer backbone, four flows at width 512.
    pub fn paper(num_classes: usize) -> Self {
        ModelConfig {
            backbone: BackboneConfig::paper_50(),
            cam: CamConfig::default(),
            decoder: DecoderConfig::new(num_classes),
        }
    }

    /// Desk-scale layout used by the training and verification suites.
    pub fn toy(num_classes: usize) -> Self {
        ModelConfig {
            backbone: BackboneConfig::toy(),
            cam: CamConfig { scales: vec![2, 4], width: 64, fsm_channels: 64, ..CamConfig::default() },
            decoder: DecoderConfig { low_level_channels_out: 24, fuse_channels: 64, num_classes },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.cam.validate()?;
        self.decoder.validate()
    }
}

/// Named parameter groups for counting.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Component {
    All,
    Backbone,
    /// Backbone plus the information flows, without FSM, decoder or the
    /// auxiliary head — the grouping used for the flow-topology comparison.
    BackboneAndFlows,
    Cam,
    Decoder,
    Aux,
}

impl Component {
    fn prefixes(&self) -> &'static [&'static str] {
        match self {
            Component::All => &[],
            Component::Backbone => &["backbone."],
            Component::BackboneAndFlows => &["backbone.", "cam.gf.", "cam.cf"],
            Component::Cam => &["cam."],
            Component::Decoder => &["decoder."],
            Component::Aux => &["aux."],
        }
    }
}

pub struct Canet {
    pub backbone: Backbone,
    pub cam: Cam,
    pub decoder: Decoder,
    pub aux: AuxHead,
}

pub struct CanetOutputs {
    /// Decoder logits at the input resolution.
    pub logits: Val,
    /// Auxiliary logits; present only in train mode.
    pub aux_logits: Option<Val>,
    /// Shared backbone features at stride 8.
    pub shared: Val,
    /// Re-fused contexts produced by the feature selection module.
    pub refused: Val,
}

impl Canet {
    pub fn build(graph: &mut ModelGraph, cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut b = GraphBuilder::new(graph, ChaCha8Rng::seed_from_u64(seed));
        let backbone = Backbone::build(&mut b, &cfg.backbone, 3);
        let cam = Cam::build(&mut b, &cfg.cam, cfg.backbone.shared_channels());
        let decoder = Decoder::build(&mut b, &cfg.decoder, cfg.backbone.low_level_channels(), cfg.cam.fsm_channels);
        let aux = AuxHead::build(&mut b, cfg.backbone.c3_channels(), cfg.decoder.num_classes);
        Ok(Canet { backbone, cam, decoder, aux })
    }

    /// Full forward pass. The auxiliary head is recorded only in train mode;
    /// eval tapes carry no trace of it.
    pub fn forward(&self, cx: &mut Context, image: &Tensor) -> Result<CanetOutputs> {
        let s = image.shape();
        let img = cx.input(image.clone());
        let feats = self.backbone.forward(cx, img)?;
        let refused = self.cam.forward(cx, feats.shared)?;
        let logits = self.decoder.forward(cx, feats.low_level, refused, s.h, s.w)?;
        let aux_logits = match cx.mode {
            Mode::Train => Some(self.aux.forward(cx, feats.c3, s.h, s.w)?),
            Mode::Eval => None,
        };
        Ok(CanetOutputs { logits, aux_logits, shared: feats.shared, refused })
    }

    pub fn count_params(graph: &ModelGraph, component: Component) -> usize {
        graph.count_params(component.prefixes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cam::Topology;
    use crate::tensor::Shape;
    use rand::Rng;

    fn rand_image(shape: Shape, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(shape, (0..shape.numel()).map(|_| rng.random_range(0.0..1.0)).collect())
    }

    #[test]
    fn eval_tape_contains_no_aux_nodes() {
        let cfg = ModelConfig::toy(5);
        let mut g = ModelGraph::new();
        let model = Canet::build(&mut g, &cfg, 1).unwrap();
        let img = rand_image(Shape::new(1, 3, 32, 32), 2);

        let mut cx = Context::new(&mut g, Mode::Eval);
        let out = model.forward(&mut cx, &img).unwrap();
        assert!(out.aux_logits.is_none());
        assert!(cx.tape.find_labeled("aux.").is_empty());

        let mut cx = Context::new(&mut g, Mode::Train);
        let out = model.forward(&mut cx, &img).unwrap();
        assert!(out.aux_logits.is_some());
        assert_eq!(cx.tape.find_labeled("aux.").len(), 2);
    }

    #[test]
    fn logits_match_input_dims_for_odd_sizes() {
        let cfg = ModelConfig::toy(4);
        let mut g = ModelGraph::new();
        let model = Canet::build(&mut g, &cfg, 3).unwrap();
        for (h, w) in [(33, 47), (64, 64), (40, 56)] {
            let img = rand_image(Shape::new(1, 3, h, w), 4);
            let mut cx = Context::new(&mut g, Mode::Eval);
            let out = model.forward(&mut cx, &img).unwrap();
            assert_eq!(cx.tape.shape(out.logits), Shape::new(1, 4, h, w));
            assert_eq!(cx.tape.shape(out.shared).h, h.div_ceil(8));
            assert_eq!(cx.tape.shape(out.shared).w, w.div_ceil(8));
        }
    }

    #[test]
    fn decoder_path_reaches_stage1_parameters() {
        let cfg = ModelConfig::toy(3);
        let mut g = ModelGraph::new();
        let model = Canet::build(&mut g, &cfg, 5).unwrap();
        let img = rand_image(Shape::new(2, 3, 32, 32), 6);
        let labels = crate::tensor::LabelMap::filled(2, 32, 32, 1);
        let mut cx = Context::new(&mut g, Mode::Train);
        let out = model.forward(&mut cx, &img).unwrap();
        let loss = cx.tape.softmax_cross_entropy(out.logits, &labels, 255).unwrap();
        cx.backward(loss).unwrap();
        let stage1_conv = g.lookup("backbone.stage1.block0.conv1.weight").unwrap();
        let grad = g.get(stage1_conv).grad.as_ref().unwrap();
        assert!(grad.data().iter().any(|v| *v != 0.0));
    }

    #[test]
    fn table_ordering_series_parallel_hybrid() {
        let count = |topology: Topology| {
            let mut cfg = ModelConfig::toy(5);
            cfg.cam.topology = topology;
            cfg.cam.scales = vec![2, 4, 8, 16];
            let mut g = ModelGraph::new();
            Canet::build(&mut g, &cfg, 7).unwrap();
            Canet::count_params(&g, Component::BackboneAndFlows)
        };
        let series = count(Topology::Series);
        let parallel = count(Topology::Parallel);
        let hybrid = count(Topology::Hybrid);
        assert!(series < parallel, "series {series} >= parallel {parallel}");
        assert!(parallel < hybrid, "parallel {parallel} >= hybrid {hybrid}");
    }
}
