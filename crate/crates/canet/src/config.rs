//! Plain-text run configuration: `[section]` headers and `key = value`
//! lines. Unknown sections or keys are rejected by name, and parsing the
//! serialized form reproduces the configuration exactly.

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::backbone::BackboneConfig;
use crate::cam::{CamConfig, Topology};
use crate::data::{RadiusRange, SceneSpec};
use crate::decoder::DecoderConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub num_classes: usize,
    pub backbone: BackboneConfig,
    pub cam: CamConfig,
    pub low_level_channels: usize,
    pub fuse_channels: usize,
    pub train: TrainConfig,
    pub scene: SceneSpec,
    pub dataset_dir: Option<PathBuf>,
    pub eval_dir: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::toy(6);
        RunConfig {
            num_classes: 6,
            backbone: model.backbone,
            cam: model.cam,
            low_level_channels: model.decoder.low_level_channels_out,
            fuse_channels: model.decoder.fuse_channels,
            train: TrainConfig::default(),
            scene: SceneSpec::default(),
            dataset_dir: None,
            eval_dir: None,
            output_dir: None,
        }
    }
}

impl RunConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone.clone(),
            cam: self.cam.clone(),
            decoder: DecoderConfig {
                low_level_channels_out: self.low_level_channels,
                fuse_channels: self.fuse_channels,
                num_classes: self.num_classes,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.train.validate()?;
        self.scene.validate()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| Error::Config(format!("line {}: unterminated section header", lineno + 1)))?;
                section = name.trim().to_string();
                match section.as_str() {
                    "model" | "backbone" | "cam" | "decoder" | "train" | "scene" | "paths" => {}
                    other => return Err(Error::Config(format!("unknown section [{other}]"))),
                }
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            let key = key.trim();
            let value = value.trim();
            cfg.apply(&section, key, value)?;
        }
        Ok(cfg)
    }

    fn apply(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        let unknown = || Error::Config(format!("unknown key {key:?} in section [{section}]"));
        match section {
            "model" => match key {
                "num_classes" => self.num_classes = parse_num(section, key, value)?,
                _ => return Err(unknown()),
            },
            "backbone" => match key {
                "stage_blocks" => self.backbone.stage_blocks = parse_four(section, key, value)?,
                "stem_channels" => self.backbone.stem_channels = parse_num(section, key, value)?,
                "stage_channels" => self.backbone.stage_channels = parse_four(section, key, value)?,
                "dilations" => self.backbone.dilations = parse_four(section, key, value)?,
                "bottleneck" => self.backbone.bottleneck = parse_bool(section, key, value)?,
                _ => return Err(unknown()),
            },
            "cam" => match key {
                "scales" => self.cam.scales = parse_list(section, key, value)?,
                "width" => self.cam.width = parse_num(section, key, value)?,
                "fsm_channels" => self.cam.fsm_channels = parse_num(section, key, value)?,
                "topology" => self.cam.topology = Topology::parse(value).map_err(|e| Error::Config(e.to_string()))?,
                "use_global_flow" => self.cam.use_global_flow = parse_bool(section, key, value)?,
                _ => return Err(unknown()),
            },
            "decoder" => match key {
                "low_level_channels" => self.low_level_channels = parse_num(section, key, value)?,
                "fuse_channels" => self.fuse_channels = parse_num(section, key, value)?,
                _ => return Err(unknown()),
            },
            "train" => match key {
                "base_lr" => self.train.base_lr = parse_num(section, key, value)?,
                "power" => self.train.power = parse_num(section, key, value)?,
                "momentum" => self.train.momentum = parse_num(section, key, value)?,
                "weight_decay" => self.train.weight_decay = parse_num(section, key, value)?,
                "total_iters" => self.train.total_iters = parse_num(section, key, value)?,
                "batch_size" => self.train.batch_size = parse_num(section, key, value)?,
                "lambda_aux" => self.train.lambda_aux = parse_num(section, key, value)?,
                "crop" => self.train.crop = parse_num(section, key, value)?,
                "seed" => self.train.seed = parse_num(section, key, value)?,
                "augment" => self.train.augment = parse_bool(section, key, value)?,
                "eval_scales" => self.train.eval_scales = parse_list(section, key, value)?,
                "eval_flip" => self.train.eval_flip = parse_bool(section, key, value)?,
                "eval_every" => self.train.eval_every = parse_num(section, key, value)?,
                "log_every" => self.train.log_every = parse_num(section, key, value)?,
                "ignore_index" => self.train.ignore_index = parse_num(section, key, value)?,
                _ => return Err(unknown()),
            },
            "scene" => match key {
                "num_classes" => self.scene.num_classes = parse_num(section, key, value)?,
                "canvas" => self.scene.canvas = parse_num(section, key, value)?,
                "small_radius" => self.scene.small = parse_range(section, key, value)?,
                "medium_radius" => self.scene.medium = parse_range(section, key, value)?,
                "large_radius" => self.scene.large = parse_range(section, key, value)?,
                "objects_per_image" => self.scene.objects_per_image = parse_num(section, key, value)?,
                "noise_level" => self.scene.noise_level = parse_num(section, key, value)?,
                "seed" => self.scene.seed = parse_num(section, key, value)?,
                _ => return Err(unknown()),
            },
            "paths" => match key {
                "dataset_dir" => self.dataset_dir = Some(PathBuf::from(value)),
                "eval_dir" => self.eval_dir = Some(PathBuf::from(value)),
                "output_dir" => self.output_dir = Some(PathBuf::from(value)),
                _ => return Err(unknown()),
            },
            "" => return Err(Error::Config(format!("key {key:?} appears before any [section]"))),
            other => return Err(Error::Config(format!("unknown section [{other}]"))),
        }
        Ok(())
    }

    /// Canonical serialization: every key in a fixed order, so
    /// parse(serialize(parse(x))) == parse(x).
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "[model]");
        let _ = writeln!(s, "num_classes = {}", self.num_classes);
        let _ = writeln!(s, "\n[backbone]");
        let _ = writeln!(s, "stage_blocks = {}", join(&self.backbone.stage_blocks));
        let _ = writeln!(s, "stem_channels = {}", self.backbone.stem_channels);
        let _ = writeln!(s, "stage_channels = {}", join(&self.backbone.stage_channels));
        let _ = writeln!(s, "dilations = {}", join(&self.backbone.dilations));
        let _ = writeln!(s, "bottleneck = {}", self.backbone.bottleneck);
        let _ = writeln!(s, "\n[cam]");
        let _ = writeln!(s, "scales = {}", join(&self.cam.scales));
        let _ = writeln!(s, "width = {}", self.cam.width);
        let _ = writeln!(s, "fsm_channels = {}", self.cam.fsm_channels);
        let _ = writeln!(s, "topology = {}", self.cam.topology.as_str());
        let _ = writeln!(s, "use_global_flow = {}", self.cam.use_global_flow);
        let _ = writeln!(s, "\n[decoder]");
        let _ = writeln!(s, "low_level_channels = {}", self.low_level_channels);
        let _ = writeln!(s, "fuse_channels = {}", self.fuse_channels);
        let _ = writeln!(s, "\n[train]");
        let _ = writeln!(s, "base_lr = {:?}", self.train.base_lr);
        let _ = writeln!(s, "power = {:?}", self.train.power);
        let _ = writeln!(s, "momentum = {:?}", self.train.momentum);
        let _ = writeln!(s, "weight_decay = {:?}", self.train.weight_decay);
        let _ = writeln!(s, "total_iters = {}", self.train.total_iters);
        let _ = writeln!(s, "batch_size = {}", self.train.batch_size);
        let _ = writeln!(s, "lambda_aux = {:?}", self.train.lambda_aux);
        let _ = writeln!(s, "crop = {}", self.train.crop);
        let _ = writeln!(s, "seed = {}", self.train.seed);
        let _ = writeln!(s, "augment = {}", self.train.augment);
        let _ = writeln!(s, "eval_scales = {}", join_f64(&self.train.eval_scales));
        let _ = writeln!(s, "eval_flip = {}", self.train.eval_flip);
        let _ = writeln!(s, "eval_every = {}", self.train.eval_every);
        let _ = writeln!(s, "log_every = {}", self.train.log_every);
        let _ = writeln!(s, "ignore_index = {}", self.train.ignore_index);
        let _ = writeln!(s, "\n[scene]");
        let _ = writeln!(s, "num_classes = {}", self.scene.num_classes);
        let _ = writeln!(s, "canvas = {}", self.scene.canvas);
        let _ = writeln!(s, "small_radius = {},{}", self.scene.small.min, self.scene.small.max);
        let _ = writeln!(s, "medium_radius = {},{}", self.scene.medium.min, self.scene.medium.max);
        let _ = writeln!(s, "large_radius = {},{}", self.scene.large.min, self.scene.large.max);
        let _ = writeln!(s, "objects_per_image = {}", self.scene.objects_per_image);
        let _ = writeln!(s, "noise_level = {:?}", self.scene.noise_level);
        let _ = writeln!(s, "seed = {}", self.scene.seed);
        let _ = writeln!(s, "\n[paths]");
        if let Some(p) = &self.dataset_dir {
            let _ = writeln!(s, "dataset_dir = {}", p.display());
        }
        if let Some(p) = &self.eval_dir {
            let _ = writeln!(s, "eval_dir = {}", p.display());
        }
        if let Some(p) = &self.output_dir {
            let _ = writeln!(s, "output_dir = {}", p.display());
        }
        s
    }
}

fn parse_num<T: std::str::FromStr>(section: &str, key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("[{section}] {key}: cannot parse {value:?}")))
}

fn parse_bool(section: &str, key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("[{section}] {key}: expected true or false, got {value:?}"))),
    }
}

fn parse_list<T: std::str::FromStr>(section: &str, key: &str, value: &str) -> Result<Vec<T>> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse_num(section, key, v.trim())).collect()
}

fn parse_four<T: std::str::FromStr + Copy>(section: &str, key: &str, value: &str) -> Result<[T; 4]> {
    let items: Vec<T> = parse_list(section, key, value)?;
    items
        .try_into()
        .map_err(|_| Error::Config(format!("[{section}] {key}: expected exactly 4 values")))
}

fn parse_range(section: &str, key: &str, value: &str) -> Result<RadiusRange> {
    let items: Vec<usize> = parse_list(section, key, value)?;
    if items.len() != 2 {
        return Err(Error::Config(format!("[{section}] {key}: expected min,max")));
    }
    Ok(RadiusRange { min: items[0], max: items[1] })
}

fn join<T: std::fmt::Display>(items: &[T]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn join_f64(items: &[f64]) -> String {
    items.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(",")
}
