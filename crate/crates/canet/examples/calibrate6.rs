use canet::data::{generate_scene, RadiusRange, SceneSpec};
use canet::evaluate::{evaluate, EvalOptions};
use canet::graph::ModelGraph;
use canet::model::{Canet, ModelConfig};
use canet::optim::SgdOptimizer;
use canet::trainer::{train, TrainConfig};

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
    let cfg = TrainConfig {
        base_lr: 0.20, power: 0.5, total_iters: 300, batch_size: 8, crop: 64,
        seed: 42, augment: false, log_every: 0, ..TrainConfig::default()
    };
    let samples: Vec<_> = (0..8).map(|i| generate_scene(&spec, i).unwrap()).collect();
    let mut graph = ModelGraph::new();
    let model = Canet::build(&mut graph, &mc, 42).unwrap();
    let mut opt = SgdOptimizer::new(&graph, cfg.momentum, cfg.weight_decay);
    let out = train(&model, &mut graph, &mut opt, &samples, None, 5, &cfg).unwrap();
    println!("loss={:.4}", out.final_loss.unwrap().total);

    for (tag, scales, flip) in [
        ("plain", vec![1.0], false),
        ("flip", vec![1.0], true),
        ("ms12", vec![1.0, 2.0], false),
        ("ms12f", vec![1.0, 2.0], true),
        ("ms123f", vec![1.0, 1.5, 2.0], true),
        ("ms23f", vec![1.5, 2.0, 3.0], true),
    ] {
        let t0 = std::time::Instant::now();
        let opts = EvalOptions { scales, flip, ..Default::default() };
        let res = evaluate(&model, &mut graph, &samples, 5, &opts).unwrap();
        let per: Vec<String> = res.per_class_iou.iter().map(|c| match c { Some(v) => format!("{v:.3}"), None => "abs".into() }).collect();
        println!("{tag}: miou={:.4} per-class={:?} ({:.1?})", res.mean_iou, per, t0.elapsed());
    }
}
