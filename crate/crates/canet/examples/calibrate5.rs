use canet::data::{generate_scene, RadiusRange, SceneSpec};
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
    let spec = SceneSpec {
        num_classes: 5,
        small: RadiusRange { min: 4, max: 6 },
        medium: RadiusRange { min: 8, max: 14 },
        large: RadiusRange { min: 32, max: 40 },
        objects_per_image: 10,
        noise_level: 0.03,
        seed: 5,
        ..SceneSpec::default()
    };
    let mc = ModelConfig::toy(5);
    let base = TrainConfig { total_iters: 300, batch_size: 8, crop: 64, seed: 42, augment: false, log_every: 0, ..TrainConfig::default() };
    run("J obj10 pow0.5 lr0.2", &spec, &mc, &TrainConfig { base_lr: 0.20, power: 0.5, ..base.clone() });
    run("K obj10 pow0.9 lr0.2", &spec, &mc, &TrainConfig { base_lr: 0.20, ..base.clone() });
}
