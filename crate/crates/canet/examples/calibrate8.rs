use canet::cam::Topology;
use canet::data::{generate_scene, RadiusRange, SceneSpec};
use canet::evaluate::{evaluate, EvalOptions};
use canet::graph::ModelGraph;
use canet::model::{Canet, ModelConfig};
use canet::optim::SgdOptimizer;
use canet::trainer::{train, TrainConfig};

fn spec_for(seed: u64) -> SceneSpec {
    SceneSpec {
        num_classes: 5,
        canvas: 64,
        small: RadiusRange { min: 4, max: 7 },
        medium: RadiusRange { min: 8, max: 14 },
        large: RadiusRange { min: 32, max: 40 },
        objects_per_image: 8,
        noise_level: 0.03,
        seed,
        ..SceneSpec::default()
    }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let iters: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(600);
    let train_samples: Vec<_> = (0..200).map(|i| generate_scene(&spec_for(11), i).unwrap()).collect();
    let eval_samples: Vec<_> = (0..50).map(|i| generate_scene(&spec_for(9090), i).unwrap()).collect();

    for topology in [Topology::Hybrid, Topology::Parallel, Topology::Series] {
        let t0 = std::time::Instant::now();
        let mut mc = ModelConfig::toy(5);
        mc.cam.scales = vec![2, 4, 8, 16];
        mc.cam.topology = topology;
        let mut graph = ModelGraph::new();
        let model = Canet::build(&mut graph, &mc, seed).unwrap();
        let cfg = TrainConfig {
            base_lr: 0.05, total_iters: iters, batch_size: 4, crop: 64, seed,
            augment: false, log_every: 0, ..TrainConfig::default()
        };
        let mut opt = SgdOptimizer::new(&graph, cfg.momentum, cfg.weight_decay);
        let out = train(&model, &mut graph, &mut opt, &train_samples, None, 5, &cfg).unwrap();
        let res = evaluate(&model, &mut graph, &eval_samples, 5, &EvalOptions::default()).unwrap();
        let per: Vec<String> = res.per_class_iou.iter().map(|c| match c { Some(v) => format!("{v:.3}"), None => "abs".into() }).collect();
        println!("{topology:?} seed{seed} it{iters}: loss={:.4} eval_miou={:.4} per-class={:?} ({:.1?})",
            out.final_loss.unwrap().total, res.mean_iou, per, t0.elapsed());
    }
}
