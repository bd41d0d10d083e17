//! Asymmetric decoder: project the stride-4 low-level features to a narrow
//! width, fuse them with the up-sampled re-fused contexts through two 3x3
//! convolutions, classify, and interpolate to the requested output size.
//! The auxiliary head is a bare 3x3 classifier over the stage-3 tap, used
//! only during training.

use crate::error::{Error, Result};
use crate::graph::{Context, GraphBuilder};
use crate::layers::{ConvBn, ConvLayer};
use crate::tensor::Val;

#[derive(Clone, Debug)]
pub struct DecoderConfig {
    /// Width the low-level tap is projected to before fusion.
    pub low_level_channels_out: usize,
    /// Width of the two fusion convolutions.
    pub fuse_channels: usize,
    pub num_classes: usize,
}

impl DecoderConfig {
    pub fn new(num_classes: usize) -> Self {
        DecoderConfig { low_level_channels_out: 48, fuse_channels: 256, num_classes }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid("decoder", "num_classes must be >= 2"));
        }
        if self.low_level_channels_out == 0 || self.fuse_channels == 0 {
            return Err(Error::invalid("decoder", "channel widths must be positive"));
        }
        Ok(())
    }
}

pub struct Decoder {
    low_proj: ConvBn,
    fuse1: ConvBn,
    fuse2: ConvBn,
    classifier: ConvLayer,
}

impl Decoder {
    pub fn build(b: &mut GraphBuilder, cfg: &DecoderConfig, low_level_channels: usize, context_channels: usize) -> Self {
        b.scoped("decoder", |b| {
            let low_proj = ConvBn::build(b, "low_proj", low_level_channels, cfg.low_level_channels_out, 3, 1, 1);
            let fused_in = cfg.low_level_channels_out + context_channels;
            let fuse1 = ConvBn::build(b, "fuse1", fused_in, cfg.fuse_channels, 3, 1, 1);
            let fuse2 = ConvBn::build(b, "fuse2", cfg.fuse_channels, cfg.fuse_channels, 3, 1, 1);
            let classifier = ConvLayer::build(b, "classifier", cfg.fuse_channels, cfg.num_classes, 1, 1, 0, 1, 1, true);
            Decoder { low_proj, fuse1, fuse2, classifier }
        })
    }

    pub fn forward(&self, cx: &mut Context, low_level: Val, context: Val, out_h: usize, out_w: usize) -> Result<Val> {
        let low_s = cx.tape.shape(low_level);
        let ctx_s = cx.tape.shape(context);
        if ctx_s.h != low_s.h.div_ceil(2) || ctx_s.w != low_s.w.div_ceil(2) {
            return Err(Error::shape(
                "decoder_forward",
                format!(
                    "context {}x{} is not at half the low-level resolution {}x{}",
                    ctx_s.h, ctx_s.w, low_s.h, low_s.w
                ),
            ));
        }
        let low = self.low_proj.forward(cx, low_level, true)?;
        let ctx_up = cx.tape.bilinear_upsample(context, low_s.h, low_s.w)?;
        let fused = cx.tape.concat_channels(&[low, ctx_up])?;
        let fused = self.fuse1.forward(cx, fused, true)?;
        let fused = self.fuse2.forward(cx, fused, true)?;
        let logits = self.classifier.forward(cx, fused)?;
        cx.tape.bilinear_upsample(logits, out_h, out_w)
    }
}

pub struct AuxHead {
    conv: ConvLayer,
}

impl AuxHead {
    pub fn build(b: &mut GraphBuilder, c3_channels: usize, num_classes: usize) -> Self {
        b.scoped("aux", |b| AuxHead {
            conv: ConvLayer::build(b, "classifier", c3_channels, num_classes, 3, 1, 1, 1, 1, true),
        })
    }

    /// Classifies the stage-3 tap and resizes to full label resolution so
    /// the loss never has to down-sample labels.
    pub fn forward(&self, cx: &mut Context, c3: Val, out_h: usize, out_w: usize) -> Result<Val> {
        let logits = self.conv.forward(cx, c3)?;
        cx.tape.set_label(logits, "aux.conv");
        let up = cx.tape.bilinear_upsample(logits, out_h, out_w)?;
        cx.tape.set_label(up, "aux.logits");
        Ok(up)
    }
}
