use canet::data::{generate_scene, SceneSpec};
use canet::evaluate::{evaluate, EvalOptions};
use canet::graph::ModelGraph;
use canet::model::{Canet, ModelConfig};
use canet::optim::SgdOptimizer;
use canet::trainer::{train, TrainConfig};

fn run(tag: &str, spec: &SceneSpec, mc: &ModelConfig, cfg: &TrainConfig) {
    let t0 = std::time::Instant::now();
    let samples: Vec<_> = (0..8).map(|i| generate_scene(spec, i).unwrap()).collect();
    let mut graph = ModelGraph::new();
    let model = Canet::build(&mut graph, mc, 42).unwrap();
    let mut opt = SgdOptimizer::new(&graph, cfg.momentum, cfg.weight_decay);
    let out = train(&model, &mut graph, &mut opt, &samples, None, spec.num_classes, cfg).unwrap();
    let res = evaluate(&model, &mut graph, &samples, spec.num_classes, &EvalOptions::default()).unwrap();
    let per: Vec<String> = res.per_class_iou.iter().map(|c| match c { Some(v) => format!("{v:.3}"), None => "abs".into() }).collect();
    println!("{tag}: loss={:.4} miou={:.4} per-class={:?} ({:.1?})",
        out.final_loss.unwrap().total, res.mean_iou, per, t0.elapsed());
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let which = args.get(1).map(|s| s.as_str()).unwrap_or("all");
    let spec = SceneSpec { seed: 5, ..SceneSpec::default() };
    let mc = ModelConfig::toy(6);
    let base = TrainConfig { total_iters: 300, batch_size: 4, crop: 64, seed: 42, augment: false, log_every: 0, ..TrainConfig::default() };

    if which == "a" || which == "all" {
        run("A lr0.15 b8", &spec, &mc, &TrainConfig { base_lr: 0.15, batch_size: 8, ..base.clone() });
    }
    if which == "b" || which == "all" {
        run("B lr0.10 b4 wd0", &spec, &mc, &TrainConfig { base_lr: 0.10, weight_decay: 0.0, ..base.clone() });
    }
    if which == "c" || which == "all" {
        run("C lr0.20 b8", &spec, &mc, &TrainConfig { base_lr: 0.20, batch_size: 8, ..base.clone() });
    }
}
