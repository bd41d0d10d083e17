//! Training-time augmentation: random horizontal flip, random rescaling in
//! [0.5, 2.0], crop with padding to a fixed size, and a random Gaussian blur
//! on the image only. Labels are rescaled with nearest neighbor and padded
//! with the ignore value so padding never contributes to loss or metrics.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Sample, PAD_VALUE};
use crate::tensor::{bilinear_resize, LabelMap, Shape, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct AugmentConfig {
    pub crop: usize,
    pub flip_probability: f64,
    pub scale_range: (f64, f64),
    pub blur_sigma_max: f64,
    pub ignore_index: u8,
}

impl AugmentConfig {
    pub fn new(crop: usize) -> Self {
        AugmentConfig {
            crop,
            flip_probability: 0.5,
            scale_range: (0.5, 2.0),
            blur_sigma_max: 1.5,
            ignore_index: 255,
        }
    }
}

pub fn flip_horizontal(sample: &Sample) -> Sample {
    Sample::new(sample.image.flip_horizontal(), sample.label.flip_horizontal())
}

/// Rescales by `factor`: bilinear for the image, nearest for the label.
pub fn rescale(sample: &Sample, factor: f64) -> Sample {
    let (h, w) = (sample.height(), sample.width());
    let oh = ((h as f64 * factor).round() as usize).max(1);
    let ow = ((w as f64 * factor).round() as usize).max(1);
    if (oh, ow) == (h, w) {
        return sample.clone();
    }
    Sample::new(bilinear_resize(&sample.image, oh, ow), sample.label.nearest_resized(oh, ow))
}

/// Cuts a `size`-sided square at the given origin, padding the image with
/// the dataset mean and the label with the ignore value where the source
/// does not cover the window. Origins may be negative (pad before content).
pub fn crop_with_padding(sample: &Sample, size: usize, oy: isize, ox: isize, ignore: u8) -> Sample {
    let (h, w) = (sample.height() as isize, sample.width() as isize);
    let mut image = Tensor::full(Shape::new(1, 3, size, size), PAD_VALUE);
    let mut label = LabelMap::filled(1, size, size, ignore);
    let shape = image.shape();
    let img = image.data_mut();
    for y in 0..size as isize {
        let sy = oy + y;
        if sy < 0 || sy >= h {
            continue;
        }
        for x in 0..size as isize {
            let sx = ox + x;
            if sx < 0 || sx >= w {
                continue;
            }
            for c in 0..3 {
                img[shape.index(0, c, y as usize, x as usize)] =
                    sample.image.at(0, c, sy as usize, sx as usize);
            }
            label.data_mut()[(y as usize) * size + x as usize] =
                sample.label.at(0, sy as usize, sx as usize);
        }
    }
    Sample::new(image, label)
}

/// Gaussian blur with a truncated, edge-renormalized separable kernel.
/// `sigma == 0` is the identity. The kernel is normalized, so constant
/// regions and the overall image mean are preserved.
pub fn gaussian_blur(image: &Tensor, sigma: f64) -> Tensor {
    if sigma <= 0.0 {
        return image.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let weights: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();

    let s = image.shape();
    let blur_axis = |src: &Tensor, vertical: bool| {
        let mut out = Tensor::zeros(s);
        let data = out.data_mut();
        for n in 0..s.n {
            for c in 0..s.c {
                for y in 0..s.h as isize {
                    for x in 0..s.w as isize {
                        let mut acc = 0.0;
                        let mut wsum = 0.0;
                        for (i, wv) in weights.iter().enumerate() {
                            let d = i as isize - radius;
                            let (sy, sx) = if vertical { (y + d, x) } else { (y, x + d) };
                            if sy < 0 || sx < 0 || sy >= s.h as isize || sx >= s.w as isize {
                                continue;
                            }
                            acc += wv * src.at(n, c, sy as usize, sx as usize);
                            wsum += wv;
                        }
                        data[s.index(n, c, y as usize, x as usize)] = acc / wsum;
                    }
                }
            }
        }
        out
    };
    let tmp = blur_axis(image, false);
    blur_axis(&tmp, true)
}

/// Full augmentation pipeline with the draw order fixed for reproducibility:
/// flip, scale factor, crop origin, blur sigma.
pub fn augment(sample: &Sample, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Sample {
    let mut out = if rng.random_bool(cfg.flip_probability) {
        flip_horizontal(sample)
    } else {
        sample.clone()
    };
    let factor = rng.random_range(cfg.scale_range.0..=cfg.scale_range.1);
    out = rescale(&out, factor);

    let size = cfg.crop;
    let range_for = |extent: usize| -> (isize, isize) {
        if extent >= size {
            (0, (extent - size) as isize)
        } else {
            (-((size - extent) as isize), 0)
        }
    };
    let (ylo, yhi) = range_for(out.height());
    let (xlo, xhi) = range_for(out.width());
    let oy = rng.random_range(ylo as i64..=yhi as i64) as isize;
    let ox = rng.random_range(xlo as i64..=xhi as i64) as isize;
    out = crop_with_padding(&out, size, oy, ox, cfg.ignore_index);

    let sigma = rng.random_range(0.0..=cfg.blur_sigma_max);
    Sample::new(gaussian_blur(&out.image, sigma), out.label)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_scene, SceneSpec};
    use rand::SeedableRng;
    use std::collections::HashSet;

    fn sample() -> Sample {
        generate_scene(&SceneSpec::default(), 3).unwrap()
    }

    #[test]
    fn double_flip_is_identity() {
        let s = sample();
        let back = flip_horizontal(&flip_horizontal(&s));
        assert_eq!(back.image.data(), s.image.data());
        assert_eq!(back.label.data(), s.label.data());
    }

    #[test]
    fn neutral_pipeline_is_identity() {
        let s = sample();
        let scaled = rescale(&s, 1.0);
        let cropped = crop_with_padding(&scaled, s.height(), 0, 0, 255);
        let blurred = gaussian_blur(&cropped.image, 0.0);
        assert_eq!(blurred.data(), s.image.data());
        assert_eq!(cropped.label.data(), s.label.data());
    }

    #[test]
    fn augmented_labels_stay_in_original_set() {
        let s = sample();
        let mut original: HashSet<u8> = s.label.data().iter().copied().collect();
        original.insert(255);
        let cfg = AugmentConfig::new(48);
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let aug = augment(&s, &cfg, &mut rng);
            for v in aug.label.data() {
                assert!(original.contains(v), "class {v} appeared out of nowhere");
            }
            assert_eq!(aug.height(), 48);
            assert_eq!(aug.width(), 48);
        }
    }

    #[test]
    fn blur_preserves_mean() {
        let s = sample();
        let blurred = gaussian_blur(&s.image, 1.2);
        let mean = |t: &Tensor| t.data().iter().sum::<f64>() / t.numel() as f64;
        assert!((mean(&s.image) - mean(&blurred)).abs() < 1e-3);
    }

    #[test]
    fn blur_preserves_constant_fields_exactly() {
        let c = Tensor::full(Shape::new(1, 3, 12, 12), 0.42);
        let blurred = gaussian_blur(&c, 1.0);
        for v in blurred.data() {
            assert!((v - 0.42).abs() < 1e-12);
        }
    }

    #[test]
    fn padding_uses_ignore_for_labels() {
        let s = sample();
        let cropped = crop_with_padding(&s, s.height() + 10, -5, -5, 255);
        assert_eq!(cropped.label.at(0, 0, 0), 255);
        assert_eq!(cropped.image.at(0, 0, 0, 0), PAD_VALUE);
        // The original content sits at offset 5.
        assert_eq!(cropped.label.at(0, 5, 5), s.label.at(0, 0, 0));
    }

    #[test]
    fn augment_deterministic_given_rng_seed() {
        let s = sample();
        let cfg = AugmentConfig::new(32);
        let a = augment(&s, &cfg, &mut ChaCha8Rng::seed_from_u64(9));
        let b = augment(&s, &cfg, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a.image.data(), b.image.data());
        assert_eq!(a.label.data(), b.label.data());
    }
}
