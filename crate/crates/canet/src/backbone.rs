//! Deep-stem residual encoder at output stride 8. The last two stages trade
//! their stride for dilation (rates 2 and 4) so the shared feature map keeps
//! 1/8 resolution, with a stride-4 tap for the decoder and the stage-3 tap
//! for the auxiliary head.

use crate::error::{Error, Result};
use crate::graph::{Context, GraphBuilder};
use crate::layers::ConvBn;
use crate::tensor::Val;

#[derive(Clone, Debug)]
pub struct BackboneConfig {
    /// Residual blocks per stage, e.g. [3,4,6,3] for the 50-layer layout.
    pub stage_blocks: [usize; 4],
    pub stem_channels: usize,
    pub stage_channels: [usize; 4],
    /// Per-stage dilation; [1,1,2,4] keeps the final stride at 8.
    pub dilations: [usize; 4],
    /// Bottleneck blocks (1x1-3x3-1x1) instead of two 3x3 convolutions.
    pub bottleneck: bool,
}

impl BackboneConfig {
    /// 50-layer layout matching the reference network.
    pub fn paper_50() -> Self {
        BackboneConfig {
            stage_blocks: [3, 4, 6, 3],
            stem_channels: 64,
            stage_channels: [256, 512, 1024, 2048],
            dilations: [1, 1, 2, 4],
            bottleneck: true,
        }
    }

    /// Small configuration for desk-scale training and tests.
    pub fn toy() -> Self {
        BackboneConfig {
            stage_blocks: [1, 1, 1, 1],
            stem_channels: 16,
            stage_channels: [16, 32, 64, 128],
            dilations: [1, 1, 2, 4],
            bottleneck: false,
        }
    }

    /// Per-stage stride after the stride-4 stem+pool.
    fn stage_strides() -> [usize; 4] {
        [1, 2, 1, 1]
    }

    /// Channel width of the stride-4 decoder tap.
    pub fn low_level_channels(&self) -> usize {
        self.stage_channels[0]
    }

    /// Channel width of the stage-3 auxiliary tap.
    pub fn c3_channels(&self) -> usize {
        self.stage_channels[2]
    }

    pub fn shared_channels(&self) -> usize {
        self.stage_channels[3]
    }
}

/// Minimum input side the stem plus stage strides can digest.
pub const MIN_INPUT_SIDE: usize = 32;

struct ResidualBlock {
    convs: Vec<ConvBn>,
    projection: Option<ConvBn>,
}

impl ResidualBlock {
    fn build(
        b: &mut GraphBuilder,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
        dilation: usize,
        bottleneck: bool,
    ) -> Self {
        b.scoped(name, |b| {
            let convs = if bottleneck {
                let mid = c_out / 4;
                vec![
                    ConvBn::build(b, "conv1", c_in, mid, 1, 1, 1),
                    ConvBn::build(b, "conv2", mid, mid, 3, stride, dilation),
                    ConvBn::build(b, "conv3", mid, c_out, 1, 1, 1),
                ]
            } else {
                vec![
                    ConvBn::build(b, "conv1", c_in, c_out, 3, stride, dilation),
                    ConvBn::build(b, "conv2", c_out, c_out, 3, 1, dilation),
                ]
            };
            let projection = (stride != 1 || c_in != c_out)
                .then(|| ConvBn::build(b, "proj", c_in, c_out, 1, stride, 1));
            ResidualBlock { convs, projection }
        })
    }

    fn forward(&self, cx: &mut Context, x: Val) -> Result<Val> {
        let branch = self.branch(cx, x)?;
        let identity = match &self.projection {
            Some(p) => p.forward(cx, x, false)?,
            None => x,
        };
        let sum = cx.tape.add(identity, branch)?;
        Ok(cx.tape.relu(sum))
    }

    /// Residual branch alone (pre-addition); exposed for the near-identity
    /// check in tests.
    fn branch(&self, cx: &mut Context, x: Val) -> Result<Val> {
        let last = self.convs.len() - 1;
        let mut y = x;
        for (i, conv) in self.convs.iter().enumerate() {
            y = conv.forward(cx, y, i != last)?;
        }
        Ok(y)
    }
}

pub struct Backbone {
    cfg: BackboneConfig,
    stem: [ConvBn; 3],
    stages: Vec<Vec<ResidualBlock>>,
}

#[derive(Debug)]
pub struct BackboneOutputs {
    /// Stride-4 tap for the decoder.
    pub low_level: Val,
    /// Stage-3 output for the auxiliary head; same dims as `shared`.
    pub c3: Val,
    /// Stride-8 shared features feeding the context module.
    pub shared: Val,
}

impl Backbone {
    pub fn build(b: &mut GraphBuilder, cfg: &BackboneConfig, num_input_channels: usize) -> Self {
        b.scoped("backbone", |b| {
            let half = (cfg.stem_channels / 2).max(1);
            let stem = [
                ConvBn::build(b, "stem.conv1", num_input_channels, half, 3, 2, 1),
                ConvBn::build(b, "stem.conv2", half, half, 3, 1, 1),
                ConvBn::build(b, "stem.conv3", half, cfg.stem_channels, 3, 1, 1),
            ];
            let strides = BackboneConfig::stage_strides();
            let mut stages = Vec::with_capacity(4);
            let mut c_in = cfg.stem_channels;
            for (stage, &stage_stride) in strides.iter().enumerate() {
                let c_out = cfg.stage_channels[stage];
                let mut blocks = Vec::with_capacity(cfg.stage_blocks[stage]);
                for block in 0..cfg.stage_blocks[stage] {
                    let stride = if block == 0 { stage_stride } else { 1 };
                    blocks.push(ResidualBlock::build(
                        b,
                        &format!("stage{}.block{}", stage + 1, block),
                        c_in,
                        c_out,
                        stride,
                        cfg.dilations[stage],
                        cfg.bottleneck,
                    ));
                    c_in = c_out;
                }
                stages.push(blocks);
            }
            Backbone { cfg: cfg.clone(), stem, stages }
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn forward(&self, cx: &mut Context, image: Val) -> Result<BackboneOutputs> {
        let s = cx.tape.shape(image);
        if s.h < MIN_INPUT_SIDE || s.w < MIN_INPUT_SIDE {
            return Err(Error::invalid(
                "backbone_forward",
                format!("input {}x{} is below the minimum size {MIN_INPUT_SIDE}x{MIN_INPUT_SIDE}", s.h, s.w),
            ));
        }
        let mut y = image;
        for conv in &self.stem {
            y = conv.forward(cx, y, true)?;
        }
        let y = cx.tape.avg_pool2d(y, 2)?;

        let mut y = y;
        for block in &self.stages[0] {
            y = block.forward(cx, y)?;
        }
        let low_level = y;
        for block in &self.stages[1] {
            y = block.forward(cx, y)?;
        }
        for block in &self.stages[2] {
            y = block.forward(cx, y)?;
        }
        let c3 = y;
        for block in &self.stages[3] {
            y = block.forward(cx, y)?;
        }
        Ok(BackboneOutputs { low_level, c3, shared: y })
    }
}
