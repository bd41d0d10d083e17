//! Verification suites: finite-difference gradient checks, shape-contract
//! fuzzing, metric oracles and parameter-count audits. The command-line
//! `verify` subcommand and the acceptance tests both run these.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cam::Topology;
use crate::error::Result;
use crate::graph::{Context, ModelGraph};
use crate::loss::joint_loss;
use crate::metrics::{AbsentClassPolicy, ConfusionMatrix};
use crate::model::{Canet, Component, ModelConfig};
use crate::tensor::{LabelMap, Mode, Shape, Tape, Tensor, Val};

/// Scaled relative error: |a - n| / max(1, |a|, |n|). The floor of one keeps
/// finite-difference noise on near-zero gradients from dominating.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Central-difference step sized to the parameter magnitude.
fn fd_step(w: f64) -> f64 {
    1e-4 * (1.0 + w.abs())
}

#[derive(Debug)]
pub struct SuiteReport {
    pub name: String,
    pub passed: bool,
    pub details: Vec<String>,
}

impl SuiteReport {
    fn new(name: &str) -> Self {
        SuiteReport { name: name.to_string(), passed: true, details: Vec::new() }
    }

    fn check(&mut self, ok: bool, detail: String) {
        if !ok {
            self.passed = false;
        }
        self.details.push(format!("{} {detail}", if ok { "ok  " } else { "FAIL" }));
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Shape, lo: f64, hi: f64) -> Tensor {
    Tensor::from_vec(shape, (0..shape.numel()).map(|_| rng.random_range(lo..hi)).collect())
}

/// Values bounded away from zero so kinked activations see no sign flips
/// within the finite-difference step.
fn rand_tensor_off_zero(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor {
    let data = (0..shape.numel())
        .map(|_| {
            let mag = rng.random_range(0.2..1.0);
            if rng.random_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::from_vec(shape, data)
}

/// Central differences are meaningless where the function is locally
/// nonsmooth (a ReLU kink inside the step). Detector: the two one-sided
/// derivatives disagree by much more than curvature could explain. A wrong
/// analytic gradient is never excused by this — at smooth points the
/// one-sided derivatives agree with each other and still expose it.
fn crosses_kink(fwd: f64, bwd: f64, analytic: f64) -> bool {
    (fwd - bwd).abs() > 1e-3 * fwd.abs().max(bwd.abs()).max(analytic.abs()).max(1.0)
}

/// Checks reverse-mode gradients of `f` (leaves -> scalar) against central
/// finite differences on up to `samples_per_input` elements of every input.
/// Returns the worst relative error observed over smooth sample points.
fn gradcheck_fn(
    f: &dyn Fn(&mut Tape, &[Val]) -> Result<Val>,
    inputs: &[Tensor],
    samples_per_input: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let leaves: Vec<Val> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = f(&mut tape, &leaves)?;
        Ok(tape.value(loss).scalar_value())
    };

    let mut tape = Tape::new();
    let leaves: Vec<Val> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &leaves)?;
    let base = tape.value(loss).scalar_value();
    tape.backward(loss)?;

    let mut worst = 0.0f64;
    for (which, input) in inputs.iter().enumerate() {
        let grad = tape.grad(leaves[which]).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
        let n = input.numel();
        let count = samples_per_input.min(n);
        for _ in 0..count {
            let idx = rng.random_range(0..n);
            let w = input.data()[idx];
            let h = fd_step(w);
            let mut plus = inputs.to_vec();
            plus[which].data_mut()[idx] = w + h;
            let mut minus = inputs.to_vec();
            minus[which].data_mut()[idx] = w - h;
            let (fp, fm) = (eval(&plus)?, eval(&minus)?);
            let analytic = grad.data()[idx];
            if crosses_kink((fp - base) / h, (base - fm) / h, analytic) {
                continue;
            }
            let numeric = (fp - fm) / (2.0 * h);
            worst = worst.max(relative_error(analytic, numeric));
        }
    }
    Ok(worst)
}

/// Gradient checks for every differentiable operator, each behind a fixed
/// random projection so the loss is scalar.
pub fn gradcheck_ops(tolerance: f64) -> Result<SuiteReport> {
    let mut report = SuiteReport::new("gradcheck-ops");
    let mut rng = ChaCha8Rng::seed_from_u64(0x6f70);

    // Projects an op output to a scalar with fixed weights: sum(w . y).
    // The weights ride along as the last input and are not perturbed.
    macro_rules! check {
        ($name:expr, $inputs:expr, $builder:expr) => {{
            let inputs = $inputs;
            let builder = $builder;
            let err = gradcheck_fn(&builder, &inputs, 8, &mut rng)?;
            report.check(err <= tolerance, format!("{}: max rel err {err:.3e}", $name));
        }};
    }

    let proj = |tape: &mut Tape, y: Val, w: Val| -> Result<Val> {
        let prod = tape.mul(y, w)?;
        Ok(tape.sum_all(prod))
    };

    {
        let x = rand_tensor_off_zero(&mut rng, Shape::new(2, 3, 7, 7));
        let w = rand_tensor_off_zero(&mut rng, Shape::new(4, 3, 3, 3));
        let b = rand_tensor_off_zero(&mut rng, Shape::new(4, 1, 1, 1));
        let pw = rand_tensor(&mut rng, Shape::new(2, 4, 7, 7), -1.0, 1.0);
        check!("conv2d 3x3 pad1 bias", vec![x, w, b, pw], move |tape: &mut Tape, v: &[Val]| {
            let y = tape.conv2d(v[0], v[1], Some(v[2]), 1, 1, 1, 1)?;
            proj(tape, y, v[3])
        });
    }
    {
        let x = rand_tensor_off_zero(&mut rng, Shape::new(1, 4, 9, 9));
        let w = rand_tensor_off_zero(&mut rng, Shape::new(6, 2, 3, 3));
        let pw = rand_tensor(&mut rng, Shape::new(1, 6, 5, 5), -1.0, 1.0);
        check!("conv2d stride2 grouped", vec![x, w, pw], move |tape: &mut Tape, v: &[Val]| {
            let y = tape.conv2d(v[0], v[1], None, 2, 1, 1, 2)?;
            proj(tape, y, v[2])
        });
    }
    {
        let x = rand_tensor_off_zero(&mut rng, Shape::new(1, 2, 8, 8));
        let w = rand_tensor_off_zero(&mut rng, Shape::new(3, 2, 3, 3));
        let pw = rand_tensor(&mut rng, Shape::new(1, 3, 8, 8), -1.0, 1.0);
        check!("conv2d dilation2", vec![x, w, pw], move |tape: &mut Tape, v: &[Val]| {
            let y = tape.conv2d(v[0], v[1], None, 1, 2, 2, 1)?;
            proj(tape, y, v[2])
        });
    }
    {
        let x = rand_tensor_off_zero(&mut rng, Shape::new(2, 3, 7, 5));
        let pw = rand_tensor(&mut rng, Shape::new(2, 3, 4, 3), -1.0, 1.0);
        check!("avg_pool2d factor2 edges", vec![x, pw], move |tape: &mut Tape, v: &[Val]| {
            let y = tape.avg_pool2d(v[0], 2)?;
            proj(tape, y, v[1])
        });
    }
    {
        let x = rand_tensor_off_zero(&mut rng, Shape::new(2, 4, 5, 5));
        let pw = rand_tensor(&mut rng, Shape::new(2, 4, 1, 1), -1.0, 1.0);
        check!("global_avg_pool", vec![x, pw], move |tape: &mut Tape, v: &[Val]| {
            let y = tape.global_avg_pool(v[0]);
            proj(tape, y, v[1])
        });
    }
    {
        let x = rand_tensor_off_zero(&mut rng, Shape::new(1, 2, 5, 4));
        let pw = rand_tensor(&mut rng, Shape::new(1, 2, 11, 7), -1.0, 1.0);
        check!("bilinear up", vec![x, pw], move |tape: &mut Tape, v: &[Val]| {
            let y = tape.bilinear_upsample(v[0], 11, 7)?;
            proj(tape, y, v[1])
        });
    }
    {
        let x = rand_tensor_off_zero(&mut rng, Shape::new(1, 2, 9, 9));
        let pw = rand_tensor(&mut rng, Shape::new(1, 2, 4, 4), -1.0, 1.0);
        check!("bilinear down", vec![x, pw], move |tape: &mut Tape, v: &[Val]| {
            let y = tape.bilinear_upsample(v[0], 4, 4)?;
            proj(tape, y, v[1])
        });
    }
    {
        let x = rand_tensor(&mut rng, Shape::new(4, 3, 5, 5), -1.0, 1.0);
        let scale = rand_tensor_off_zero(&mut rng, Shape::new(3, 1, 1, 1));
        let shift = rand_tensor(&mut rng, Shape::new(3, 1, 1, 1), -0.5, 0.5);
        let pw = rand_tensor(&mut rng, Shape::new(4, 3, 5, 5), -1.0, 1.0);
        check!("batch_norm train", vec![x, scale, shift, pw], move |tape: &mut Tape, v: &[Val]| {
            let (y, _) = tape.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
            proj(tape, y, v[3])
        });
    }
    {
        let x = rand_tensor(&mut rng, Shape::new(2, 3, 4, 4), -1.0, 1.0);
        let scale = rand_tensor_off_zero(&mut rng, Shape::new(3, 1, 1, 1));
        let shift = rand_tensor(&mut rng, Shape::new(3, 1, 1, 1), -0.5, 0.5);
        let pw = rand_tensor(&mut rng, Shape::new(2, 3, 4, 4), -1.0, 1.0);
        check!("batch_norm eval", vec![x, scale, shift, pw], move |tape: &mut Tape, v: &[Val]| {
            let y = tape.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2, 0.3], &[1.5, 0.7, 1.0], 1e-5)?;
            proj(tape, y, v[3])
        });
    }
    {
        let x = rand_tensor_off_zero(&mut rng, Shape::new(2, 3, 6, 6));
        let pw = rand_tensor(&mut rng, Shape::new(2, 3, 6, 6), -1.0, 1.0);
        check!("relu", vec![x, pw], move |tape: &mut Tape, v: &[Val]| {
            let y = tape.relu(v[0]);
            proj(tape, y, v[1])
        });
    }
    {
        let x = rand_tensor(&mut rng, Shape::new(2, 2, 4, 4), -2.0, 2.0);
        let pw = rand_tensor(&mut rng, Shape::new(2, 2, 4, 4), -1.0, 1.0);
        check!("sigmoid", vec![x, pw], move |tape: &mut Tape, v: &[Val]| {
            let y = tape.sigmoid(v[0]);
            proj(tape, y, v[1])
        });
    }
    {
        let a = rand_tensor(&mut rng, Shape::new(2, 3, 5, 5), -1.0, 1.0);
        let gate = rand_tensor(&mut rng, Shape::new(2, 3, 1, 1), -1.0, 1.0);
        let pw = rand_tensor(&mut rng, Shape::new(2, 3, 5, 5), -1.0, 1.0);
        check!("add broadcast", vec![a.clone(), gate.clone(), pw.clone()], move |tape: &mut Tape, v: &[Val]| {
            let y = tape.add(v[0], v[1])?;
            proj(tape, y, v[2])
        });
        check!("mul broadcast gate", vec![a, gate, pw], move |tape: &mut Tape, v: &[Val]| {
            let y = tape.mul(v[0], v[1])?;
            proj(tape, y, v[2])
        });
    }
    {
        let a = rand_tensor(&mut rng, Shape::new(1, 2, 4, 4), -1.0, 1.0);
        let b = rand_tensor(&mut rng, Shape::new(1, 3, 4, 4), -1.0, 1.0);
        let pw = rand_tensor(&mut rng, Shape::new(1, 5, 4, 4), -1.0, 1.0);
        check!("concat_channels", vec![a, b, pw], move |tape: &mut Tape, v: &[Val]| {
            let y = tape.concat_channels(&[v[0], v[1]])?;
            proj(tape, y, v[2])
        });
    }
    {
        let x = rand_tensor(&mut rng, Shape::new(1, 2, 3, 3), -1.0, 1.0);
        let pw = rand_tensor(&mut rng, Shape::new(1, 2, 3, 3), -1.0, 1.0);
        check!("scalar_scale", vec![x, pw], move |tape: &mut Tape, v: &[Val]| {
            let y = tape.scalar_scale(v[0], -0.37);
            proj(tape, y, v[1])
        });
    }
    {
        let logits = rand_tensor(&mut rng, Shape::new(1, 4, 4, 4), -1.0, 1.0);
        let labels = LabelMap::from_vec(
            1,
            4,
            4,
            (0..16).map(|i| if i % 5 == 0 { 255 } else { (i % 4) as u8 }).collect(),
        );
        check!("softmax_cross_entropy", vec![logits], move |tape: &mut Tape, v: &[Val]| {
            tape.softmax_cross_entropy(v[0], &labels, 255)
        });
    }
    Ok(report)
}

/// Finite-difference check of the full network joint loss against up to
/// `samples` randomly chosen trainable parameters.
pub fn gradcheck_model(tolerance: f64, samples: usize) -> Result<SuiteReport> {
    let mut report = SuiteReport::new("gradcheck-model");
    let mut rng = ChaCha8Rng::seed_from_u64(0x6d6f64);

    let mut cfg = ModelConfig::toy(4);
    cfg.backbone.stage_channels = [8, 12, 16, 24];
    cfg.backbone.stem_channels = 8;
    cfg.cam.width = 12;
    cfg.cam.fsm_channels = 12;
    cfg.decoder.low_level_channels_out = 8;
    cfg.decoder.fuse_channels = 12;
    let mut graph = ModelGraph::new();
    let model = Canet::build(&mut graph, &cfg, 7)?;

    let image = rand_tensor(&mut rng, Shape::new(2, 3, 32, 32), 0.0, 1.0);
    let labels = LabelMap::from_vec(
        2,
        32,
        32,
        (0..2 * 32 * 32).map(|i| if i % 17 == 0 { 255 } else { (i % 4) as u8 }).collect(),
    );

    let loss_of = |graph: &mut ModelGraph| -> Result<f64> {
        let mut cx = Context::new(graph, Mode::Train);
        let out = model.forward(&mut cx, &image)?;
        let (_, rep) = joint_loss(&mut cx, out.logits, out.aux_logits, &labels, 0.1, 255)?;
        Ok(rep.total)
    };

    // Analytic gradients once.
    graph.zero_grads();
    {
        let mut cx = Context::new(&mut graph, Mode::Train);
        let out = model.forward(&mut cx, &image)?;
        let (loss, _) = joint_loss(&mut cx, out.logits, out.aux_logits, &labels, 0.1, 255)?;
        cx.backward(loss)?;
    }

    let base = loss_of(&mut graph)?;
    let trainable: Vec<_> = graph.ids().filter(|id| graph.get(*id).trainable).collect();
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut skipped = 0;
    // Deep stacks of normalized activations put many ReLU kinks within the
    // finite-difference step; nonsmooth sample points are detected and
    // replaced, capped so a genuinely wrong gradient cannot hide.
    let max_skipped = samples / 2;
    while checked < samples {
        let id = trainable[rng.random_range(0..trainable.len())];
        let numel = graph.get(id).value.numel();
        let idx = rng.random_range(0..numel);
        let w = graph.get(id).value.data()[idx];
        let analytic = graph.get(id).grad.as_ref().expect("grads filled").data()[idx];
        let h = fd_step(w);

        graph.get_mut(id).value.data_mut()[idx] = w + h;
        let plus = loss_of(&mut graph)?;
        graph.get_mut(id).value.data_mut()[idx] = w - h;
        let minus = loss_of(&mut graph)?;
        graph.get_mut(id).value.data_mut()[idx] = w;

        if crosses_kink((plus - base) / h, (base - minus) / h, analytic) && skipped < max_skipped {
            skipped += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * h);
        worst = worst.max(relative_error(analytic, numeric));
        checked += 1;
    }
    report.check(
        worst <= tolerance,
        format!(
            "full network joint loss: {checked} parameters sampled, max rel err {worst:.3e} ({skipped} kink points resampled)"
        ),
    );
    Ok(report)
}

/// Forward-shape fuzzing over random input sizes.
pub fn shapes_suite(cases: usize) -> Result<SuiteReport> {
    let mut report = SuiteReport::new("shapes");
    let mut rng = ChaCha8Rng::seed_from_u64(0x7368);
    let mut cfg = ModelConfig::toy(5);
    cfg.cam.fsm_channels = 256;
    let mut graph = ModelGraph::new();
    let model = Canet::build(&mut graph, &cfg, 11)?;
    let mut all_ok = true;
    let mut worst_case = String::new();
    for _ in 0..cases {
        let h = rng.random_range(32..=160);
        let w = rng.random_range(32..=160);
        let image = rand_tensor(&mut rng, Shape::new(1, 3, h, w), 0.0, 1.0);
        let mut cx = Context::new(&mut graph, Mode::Eval);
        let out = model.forward(&mut cx, &image)?;
        let logits = cx.tape.shape(out.logits);
        let shared = cx.tape.shape(out.shared);
        let refused = cx.tape.shape(out.refused);
        let ok = logits == Shape::new(1, 5, h, w)
            && (shared.h, shared.w) == (h.div_ceil(8), w.div_ceil(8))
            && refused.c == 256
            && (refused.h, refused.w) == (shared.h, shared.w);
        if !ok {
            all_ok = false;
            worst_case = format!("{h}x{w}: logits {logits} shared {shared} refused {refused}");
        }
    }
    report.check(
        all_ok,
        if all_ok {
            format!("{cases} random sizes in [32,160]: logits (N,K,H,W), shared ceil(H/8), contexts 256ch")
        } else {
            worst_case
        },
    );
    Ok(report)
}

/// Brute-force pair-counting oracle for PA and mean IoU, compared with the
/// confusion-matrix route. Exact equality is expected (same integ, same
/// arithmetic), checked at 1e-12.
pub fn metrics_suite(cases: usize) -> Result<SuiteReport> {
    let mut report = SuiteReport::new("metrics");
    let mut rng = ChaCha8Rng::seed_from_u64(0x6d65);
    let mut worst = 0.0f64;
    for case in 0..cases {
        let k = rng.random_range(2..=8usize);
        let with_ignore = case % 3 == 0;
        let gen = |rng: &mut ChaCha8Rng| -> LabelMap {
            let data = (0..256)
                .map(|_| {
                    if with_ignore && rng.random_bool(0.1) {
                        255
                    } else {
                        rng.random_range(0..k) as u8
                    }
                })
                .collect();
            LabelMap::from_vec(1, 16, 16, data)
        };
        let truth = gen(&mut rng);
        let pred = {
            // Predictions are never the ignore value.
            let data = truth
                .data()
                .iter()
                .map(|_| rng.random_range(0..k) as u8)
                .collect();
            LabelMap::from_vec(1, 16, 16, data)
        };

        let mut cm = ConfusionMatrix::new(k);
        cm.update(&pred, &truth, 255)?;
        let pa_cm = cm.pixel_accuracy()?;
        let (miou_cm, _) = cm.mean_iou(AbsentClassPolicy::Exclude)?;

        // Independent oracle: direct pixel-pair counting.
        let mut tp = vec![0u64; k];
        let mut fp = vec![0u64; k];
        let mut fn_ = vec![0u64; k];
        let mut total = 0u64;
        let mut correct = 0u64;
        for (p, t) in pred.data().iter().zip(truth.data()) {
            if *t == 255 {
                continue;
            }
            total += 1;
            if p == t {
                correct += 1;
                tp[*p as usize] += 1;
            } else {
                fp[*p as usize] += 1;
                fn_[*t as usize] += 1;
            }
        }
        let pa_direct = correct as f64 / total as f64;
        let mut ious = Vec::new();
        for c in 0..k {
            let union = tp[c] + fp[c] + fn_[c];
            if union > 0 {
                ious.push(tp[c] as f64 / union as f64);
            }
        }
        let miou_direct = ious.iter().sum::<f64>() / ious.len() as f64;
        worst = worst.max((pa_cm - pa_direct).abs()).max((miou_cm - miou_direct).abs());
    }
    report.check(worst <= 1e-12, format!("{cases} random map pairs: max deviation {worst:.3e}"));

    // The worked example.
    let cm = ConfusionMatrix::from_counts(2, vec![2, 1, 0, 3]);
    let pa = cm.pixel_accuracy()?;
    let (miou, _) = cm.mean_iou(AbsentClassPolicy::Exclude)?;
    report.check(
        (pa - 5.0 / 6.0).abs() <= 1e-12 && (miou - 17.0 / 24.0).abs() <= 1e-12,
        format!("worked case [[2,1],[0,3]]: PA {pa:.6} (5/6), mIoU {miou:.6} (~0.7083)"),
    );
    Ok(report)
}

pub struct ParamCounts {
    pub backbone: usize,
    pub hybrid: usize,
    pub series: usize,
    pub parallel: usize,
}

/// Builds paper-scale variants (50-layer backbone, width-512 flows at scales
/// {2,4,8,16}) and counts backbone+flow parameters per topology.
pub fn paper_scale_counts() -> Result<ParamCounts> {
    let count = |topology: Topology| -> Result<(usize, usize)> {
        let mut cfg = ModelConfig::paper(21);
        cfg.cam.topology = topology;
        let mut graph = ModelGraph::new();
        Canet::build(&mut graph, &cfg, 1)?;
        Ok((
            Canet::count_params(&graph, Component::Backbone),
            Canet::count_params(&graph, Component::BackboneAndFlows),
        ))
    };
    let (backbone, hybrid) = count(Topology::Hybrid)?;
    let (_, series) = count(Topology::Series)?;
    let (_, parallel) = count(Topology::Parallel)?;
    Ok(ParamCounts { backbone, hybrid, series, parallel })
}

/// Parameter-count reproduction: the reference totals are
/// series 28.7M < parallel 31.9M < hybrid 33.0M, backbone about 23.6M.
pub fn params_suite() -> Result<SuiteReport> {
    let mut report = SuiteReport::new("params");
    let counts = paper_scale_counts()?;
    let m = 1e6;
    let backbone = counts.backbone as f64 / m;
    report.check(
        (backbone - 23.6).abs() / 23.6 <= 0.05,
        format!("backbone {:.2}M vs reference 23.6M (tolerance 5%)", backbone),
    );
    let hybrid = counts.hybrid as f64 / m;
    report.check(
        (hybrid - 33.0).abs() / 33.0 <= 0.10,
        format!("hybrid backbone+flows {:.2}M vs reference 33.0M (tolerance 10%)", hybrid),
    );
    report.check(
        counts.series < counts.parallel && counts.parallel < counts.hybrid,
        format!(
            "ordering series {:.2}M < parallel {:.2}M < hybrid {:.2}M (reference 28.7 < 31.9 < 33.0)",
            counts.series as f64 / m,
            counts.parallel as f64 / m,
            hybrid
        ),
    );
    Ok(report)
}
