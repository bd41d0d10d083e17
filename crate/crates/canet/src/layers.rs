//! Reusable layer blocks: convolution with optional normalization and the
//! depth-wise separable projection used by the context flows.

use crate::error::Result;
use crate::graph::{BnParamIds, Context, GraphBuilder, ParamId};
use crate::tensor::Val;

/// Plain convolution layer; bias is optional because most convolutions here
/// are followed by batch norm.
pub struct ConvLayer {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        b: &mut GraphBuilder,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
        dilation: usize,
        groups: usize,
        bias: bool,
    ) -> Self {
        b.scoped(name, |b| {
            let w = b.conv_weight("weight", c_out, c_in / groups, k);
            let bias = bias.then(|| b.bias("bias", c_out));
            ConvLayer { w, b: bias, stride, padding, dilation, groups }
        })
    }

    /// 3x3 convolution with padding matched to the dilation so spatial dims
    /// are preserved at stride 1.
    pub fn build_3x3(
        b: &mut GraphBuilder,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
        dilation: usize,
    ) -> Self {
        Self::build(b, name, c_in, c_out, 3, stride, dilation, dilation, 1, false)
    }

    pub fn build_1x1(b: &mut GraphBuilder, name: &str, c_in: usize, c_out: usize) -> Self {
        Self::build(b, name, c_in, c_out, 1, 1, 0, 1, 1, false)
    }

    pub fn forward(&self, cx: &mut Context, x: Val) -> Result<Val> {
        let w = cx.param(self.w);
        let b = self.b.map(|b| cx.param(b));
        cx.tape.conv2d(x, w, b, self.stride, self.padding, self.dilation, self.groups)
    }
}

/// Convolution (no bias) followed by batch norm, with an optional ReLU.
pub struct ConvBn {
    pub conv: ConvLayer,
    pub bn: BnParamIds,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        b: &mut GraphBuilder,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        dilation: usize,
    ) -> Self {
        let padding = dilation * (k - 1) / 2;
        b.scoped(name, |b| {
            let conv = ConvLayer {
                w: b.conv_weight("weight", c_out, c_in, k),
                b: None,
                stride,
                padding,
                dilation,
                groups: 1,
            };
            let bn = b.bn_params("norm", c_out);
            ConvBn { conv, bn }
        })
    }

    pub fn forward(&self, cx: &mut Context, x: Val, relu: bool) -> Result<Val> {
        let y = self.conv.forward(cx, x)?;
        let y = cx.batch_norm(y, &self.bn)?;
        Ok(if relu { cx.tape.relu(y) } else { y })
    }
}

/// Depth-wise 3x3 then point-wise 1x1 convolution, normalized and activated
/// once at the end of the pair.
pub struct SeparableConvBn {
    pub depthwise: ConvLayer,
    pub pointwise: ConvLayer,
    pub bn: BnParamIds,
}

impl SeparableConvBn {
    pub fn build(b: &mut GraphBuilder, name: &str, c_in: usize, c_out: usize) -> Self {
        b.scoped(name, |b| {
            let depthwise = ConvLayer {
                w: b.conv_weight("dw.weight", c_in, 1, 3),
                b: None,
                stride: 1,
                padding: 1,
                dilation: 1,
                groups: c_in,
            };
            let pointwise = ConvLayer {
                w: b.conv_weight("pw.weight", c_out, c_in, 1),
                b: None,
                stride: 1,
                padding: 0,
                dilation: 1,
                groups: 1,
            };
            let bn = b.bn_params("norm", c_out);
            SeparableConvBn { depthwise, pointwise, bn }
        })
    }

    pub fn forward(&self, cx: &mut Context, x: Val) -> Result<Val> {
        let y = self.depthwise.forward(cx, x)?;
        let y = self.pointwise.forward(cx, y)?;
        let y = cx.batch_norm(y, &self.bn)?;
        Ok(cx.tape.relu(y))
    }
}
