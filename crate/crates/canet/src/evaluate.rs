//! Evaluation with optional multi-scale and horizontal-flip test-time
//! augmentation: class-probability maps from every variant are averaged at
//! the label resolution before the argmax.

use crate::backbone::MIN_INPUT_SIDE;
use crate::error::Result;
use crate::graph::{Context, ModelGraph};
use crate::metrics::{AbsentClassPolicy, ConfusionMatrix};
use crate::model::Canet;
use crate::data::Sample;
use crate::tensor::{argmax_channels, bilinear_resize, softmax_channels, LabelMap, Mode, Tensor};

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub scales: Vec<f64>,
    pub flip: bool,
    pub ignore_index: u8,
    pub policy: AbsentClassPolicy,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            scales: vec![1.0],
            flip: false,
            ignore_index: 255,
            policy: AbsentClassPolicy::Exclude,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EvalResult {
    pub pixel_accuracy: f64,
    pub mean_iou: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub confusion: ConfusionMatrix,
}

fn forward_probs(model: &Canet, graph: &mut ModelGraph, image: &Tensor) -> Result<Tensor> {
    let mut cx = Context::new(graph, Mode::Eval);
    let out = model.forward(&mut cx, image)?;
    Ok(softmax_channels(cx.tape.value(out.logits)))
}

/// Averaged class-probability map over all scale/flip variants, at the
/// original image resolution. Each per-pixel distribution sums to one.
pub fn predict_probs(model: &Canet, graph: &mut ModelGraph, image: &Tensor, opts: &EvalOptions) -> Result<Tensor> {
    let s = image.shape();
    let mut sum: Option<Tensor> = None;
    let mut count = 0usize;
    for &scale in &opts.scales {
        let sh = ((s.h as f64 * scale).round() as usize).max(MIN_INPUT_SIDE);
        let sw = ((s.w as f64 * scale).round() as usize).max(MIN_INPUT_SIDE);
        let scaled = if (sh, sw) == (s.h, s.w) { image.clone() } else { bilinear_resize(image, sh, sw) };

        let probs = forward_probs(model, graph, &scaled)?;
        let probs = if (sh, sw) == (s.h, s.w) { probs } else { bilinear_resize(&probs, s.h, s.w) };
        accumulate(&mut sum, probs);
        count += 1;

        if opts.flip {
            let mirrored = scaled.flip_horizontal();
            let probs = forward_probs(model, graph, &mirrored)?;
            let probs = probs.flip_horizontal();
            let probs = if (sh, sw) == (s.h, s.w) { probs } else { bilinear_resize(&probs, s.h, s.w) };
            accumulate(&mut sum, probs);
            count += 1;
        }
    }
    let mut avg = sum.expect("at least one scale");
    let inv = 1.0 / count as f64;
    for v in avg.data_mut() {
        *v *= inv;
    }
    Ok(avg)
}

fn accumulate(sum: &mut Option<Tensor>, t: Tensor) {
    match sum {
        Some(acc) => acc.add_assign(&t),
        None => *sum = Some(t),
    }
}

pub fn predict_mask(model: &Canet, graph: &mut ModelGraph, image: &Tensor, opts: &EvalOptions) -> Result<LabelMap> {
    Ok(argmax_channels(&predict_probs(model, graph, image, opts)?))
}

/// Runs the model over every sample and accumulates one confusion matrix.
pub fn evaluate(
    model: &Canet,
    graph: &mut ModelGraph,
    samples: &[Sample],
    num_classes: usize,
    opts: &EvalOptions,
) -> Result<EvalResult> {
    let mut cm = ConfusionMatrix::new(num_classes);
    for sample in samples {
        let pred = predict_mask(model, graph, &sample.image, opts)?;
        cm.update(&pred, &sample.label, opts.ignore_index)?;
    }
    let pixel_accuracy = cm.pixel_accuracy()?;
    let (mean_iou, per_class_iou) = cm.mean_iou(opts.policy)?;
    Ok(EvalResult { pixel_accuracy, mean_iou, per_class_iou, confusion: cm })
}
