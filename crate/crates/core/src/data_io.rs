//! Toy spike-train data and MNIST IDX ingestion.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::microcircuit::NetworkInput;
use crate::plasticity::Sample;
use crate::signal::{epsilon_kernel, psc_from_spikes, Signal, SpikeTrain, TimeGrid};

/// Random-input, sinusoidal-target regression task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyConfig {
    pub n_inputs: usize,
    pub n_hidden: usize,
    /// Per-step firing probability of each input.
    pub p_in: f64,
    pub target_base: f64,
    pub target_amp: f64,
    /// Angular rate of the target probability, radians per ms.
    pub target_omega: f64,
    pub seed: u64,
    pub init_scale: f64,
    pub init_bias: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            n_inputs: 50,
            n_hidden: 100,
            p_in: 0.05,
            target_base: 0.3,
            target_amp: 0.3,
            target_omega: 0.03,
            seed: 0,
            init_scale: 0.3,
            init_bias: 0.01,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_inputs == 0 || self.n_hidden == 0 {
            return Err(invalid("toy network needs at least one input and one hidden cell"));
        }
        if !(0.0..=1.0).contains(&self.p_in) {
            return Err(invalid(format!("p_in = {} is not a probability", self.p_in)));
        }
        let lo = self.target_base - self.target_amp.abs();
        let hi = self.target_base + self.target_amp.abs();
        if !(lo >= 0.0 && hi <= 1.0) {
            return Err(invalid(format!("target probability spans [{lo}, {hi}], outside [0, 1]")));
        }
        if !self.target_omega.is_finite() {
            return Err(invalid("target angular rate must be finite"));
        }
        Ok(())
    }

    /// `base - amp cos(omega t)`, `t` in ms.
    pub fn target_probability(&self, t_ms: f64) -> f64 {
        self.target_base - self.target_amp * (self.target_omega * t_ms).cos()
    }
}

// Inputs and targets draw from separate streams so one can change without the other.
const INPUT_STREAM: u64 = 1;
const TARGET_STREAM: u64 = 2;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Bernoulli(`p_in`) input spike trains and their PSCs.
pub fn gen_toy_inputs(cfg: &ToyConfig, grid: TimeGrid, tau_s_ms: f64) -> Result<(Vec<SpikeTrain>, Vec<Signal>)> {
    cfg.validate()?;
    let mut rng = stream(cfg.seed, INPUT_STREAM);
    let eps = epsilon_kernel(tau_s_ms, grid)?;
    let mut trains = Vec::with_capacity(cfg.n_inputs);
    let mut pscs = Vec::with_capacity(cfg.n_inputs);
    for _ in 0..cfg.n_inputs {
        let fired = (0..grid.n_steps()).map(|_| rng.gen_bool(cfg.p_in)).collect();
        let s = SpikeTrain::from_fired(grid, fired)?;
        pscs.push(psc_from_spikes(&s, &eps)?);
        trains.push(s);
    }
    Ok((trains, pscs))
}

/// Target spike train sampled from the sinusoidal probability, and its PSC.
pub fn gen_toy_target(cfg: &ToyConfig, grid: TimeGrid, tau_s_ms: f64) -> Result<(SpikeTrain, Signal)> {
    cfg.validate()?;
    let mut rng = stream(cfg.seed, TARGET_STREAM);
    let fired = (0..grid.n_steps())
        .map(|n| rng.gen_bool(cfg.target_probability(grid.time_ms(n)).clamp(0.0, 1.0)))
        .collect();
    let s = SpikeTrain::from_fired(grid, fired)?;
    let psc = psc_from_spikes(&s, &epsilon_kernel(tau_s_ms, grid)?)?;
    Ok((s, psc))
}

/// The toy task as a single training sample.
pub fn toy_sample(cfg: &ToyConfig, grid: TimeGrid, tau_s_ms: f64) -> Result<Sample> {
    let (inputs, _) = gen_toy_inputs(cfg, grid, tau_s_ms)?;
    let (_, target) = gen_toy_target(cfg, grid, tau_s_ms)?;
    Ok(Sample {
        input: NetworkInput::Spikes(inputs),
        targets: vec![target],
        label: None,
    })
}

/// A grayscale image with pixels scaled to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub pixels: Vec<f64>,
    pub label: u8,
}

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format {
            offset: bytes.len() as u64,
            message: format!("file ends inside the header field at byte {offset}"),
        })
}

fn expect_magic(bytes: &[u8], want: u32, what: &str) -> Result<()> {
    let got = be_u32(bytes, 0)?;
    if got != want {
        return Err(Error::Format {
            offset: 0,
            message: format!("{what}: magic {got:#010x}, expected {want:#010x}"),
        });
    }
    Ok(())
}

fn expect_len(bytes: &[u8], needed: usize, what: &str) -> Result<()> {
    if bytes.len() < needed {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            message: format!("{what}: truncated, header promises {needed} bytes"),
        });
    }
    Ok(())
}

/// Parse IDX image and label files already in memory.
pub fn parse_mnist_idx(images: &[u8], labels: &[u8], limit: usize) -> Result<Vec<LabeledImage>> {
    expect_magic(images, IDX_IMAGES_MAGIC, "image file")?;
    expect_magic(labels, IDX_LABELS_MAGIC, "label file")?;
    let n_images = be_u32(images, 4)? as usize;
    let rows = be_u32(images, 8)? as usize;
    let cols = be_u32(images, 12)? as usize;
    let n_labels = be_u32(labels, 4)? as usize;
    if n_images != n_labels {
        return Err(Error::Format {
            offset: 4,
            message: format!("{n_images} images but {n_labels} labels"),
        });
    }
    let size = rows * cols;
    expect_len(images, 16 + n_images * size, "image file")?;
    expect_len(labels, 8 + n_labels, "label file")?;
    let take = n_images.min(limit);
    let mut out = Vec::with_capacity(take);
    for i in 0..take {
        let label = labels[8 + i];
        if label > 9 {
            return Err(Error::Format {
                offset: (8 + i) as u64,
                message: format!("label {label} out of range"),
            });
        }
        let start = 16 + i * size;
        let pixels = images[start..start + size].iter().map(|&p| p as f64 / 255.0).collect();
        out.push(LabeledImage { pixels, label });
    }
    Ok(out)
}

/// Read up to `limit` images and labels from uncompressed IDX files.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path, limit: usize) -> Result<Vec<LabeledImage>> {
    let images = fs::read(images_path)?;
    let labels = fs::read(labels_path)?;
    parse_mnist_idx(&images, &labels, limit)
}

/// IDX bytes for `images` of `rows x cols` pixels quantized to `u8`.
pub fn idx_images_bytes(images: &[LabeledImage], rows: usize, cols: usize) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + images.len() * rows * cols);
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for v in [images.len(), rows, cols] {
        out.extend_from_slice(&(v as u32).to_be_bytes());
    }
    for img in images {
        if img.pixels.len() != rows * cols {
            return Err(invalid("image size does not match rows x cols"));
        }
        out.extend(img.pixels.iter().map(|p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    Ok(out)
}

pub fn idx_labels_bytes(images: &[LabeledImage]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + images.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(images.len() as u32).to_be_bytes());
    out.extend(images.iter().map(|i| i.label));
    out
}

pub fn write_mnist_idx(images: &[LabeledImage], rows: usize, cols: usize, images_path: &Path, labels_path: &Path) -> Result<()> {
    fs::File::create(images_path)?.write_all(&idx_images_bytes(images, rows, cols)?)?;
    fs::File::create(labels_path)?.write_all(&idx_labels_bytes(images))?;
    Ok(())
}

/// One constant current per pixel: `gain * pixel` at every step.
pub fn encode_image(pixels: &[f64], grid: TimeGrid, gain: f64) -> Result<Vec<Signal>> {
    if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(invalid("pixels must lie in [0, 1]"));
    }
    pixels.iter().map(|p| Signal::constant(grid, gain * p)).collect()
}

/// Constant target PSCs: `hi` on the label's channel, `lo` on the others.
pub fn target_from_label(label: usize, n_classes: usize, grid: TimeGrid, hi: f64, lo: f64) -> Result<Vec<Signal>> {
    if label >= n_classes {
        return Err(invalid(format!("label {label} out of range for {n_classes} classes")));
    }
    (0..n_classes)
        .map(|c| Signal::constant(grid, if c == label { hi } else { lo }))
        .collect()
}

/// Encoded image with one-hot target, ready for training.
pub fn image_sample(img: &LabeledImage, grid: TimeGrid, gain: f64, hi: f64, lo: f64) -> Result<Sample> {
    Ok(Sample {
        input: NetworkInput::Currents(encode_image(&img.pixels, grid, gain)?),
        targets: target_from_label(img.label as usize, 10, grid, hi, lo)?,
        label: Some(img.label as usize),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::make_grid;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn silent_and_saturated_inputs() {
        let g = make_grid(500.0, 1.0).unwrap();
        let cfg = ToyConfig { p_in: 0.0, n_inputs: 3, ..Default::default() };
        let (s, a) = gen_toy_inputs(&cfg, g, 20.0).unwrap();
        assert!(s.iter().all(|t| t.count() == 0));
        assert!(a.iter().all(|x| x.values().iter().all(|&v| v == 0.0)));

        let cfg = ToyConfig { p_in: 1.0, n_inputs: 2, ..Default::default() };
        let (_, a) = gen_toy_inputs(&cfg, g, 20.0).unwrap();
        // sum_{k=0}^{N-1} (1/tau) r^k with r = e^{-dt/tau}
        let r = (-1.0f64 / 20.0).exp();
        let n = g.n_steps() as i32;
        let closed = (1.0 - r.powi(n)) / (1.0 - r) / 20.0;
        assert_relative_eq!(a[0].get(g.n_steps() - 1), closed, epsilon = 1e-12);
    }

    #[test]
    fn generation_is_seeded() {
        let g = make_grid(200.0, 1.0).unwrap();
        let cfg = ToyConfig::default();
        assert_eq!(gen_toy_inputs(&cfg, g, 20.0).unwrap(), gen_toy_inputs(&cfg, g, 20.0).unwrap());
        assert_eq!(gen_toy_target(&cfg, g, 20.0).unwrap(), gen_toy_target(&cfg, g, 20.0).unwrap());
        let other = ToyConfig { seed: 1, ..cfg };
        assert_ne!(gen_toy_inputs(&cfg, g, 20.0).unwrap().0, gen_toy_inputs(&other, g, 20.0).unwrap().0);
    }

    #[test]
    fn target_probability_values() {
        let cfg = ToyConfig::default();
        assert_eq!(cfg.target_probability(0.0), 0.0);
        assert_relative_eq!(cfg.target_probability(std::f64::consts::PI / 0.03), 0.6, epsilon = 1e-12);
        assert!(ToyConfig { target_base: 0.8, ..cfg }.validate().is_err());
        assert!(ToyConfig { p_in: 1.5, ..cfg }.validate().is_err());
        let g = make_grid(10.0, 1.0).unwrap();
        assert!(gen_toy_target(&ToyConfig { target_base: 0.1, ..cfg }, g, 20.0).is_err());
    }

    #[test]
    fn target_spike_count_matches_expectation() {
        let g = make_grid(500.0, 1.0).unwrap();
        let base = ToyConfig::default();
        let expected: f64 = (0..g.n_steps()).map(|n| base.target_probability(g.time_ms(n))).sum();
        let total: usize = (0..1000)
            .map(|seed| gen_toy_target(&ToyConfig { seed, ..base }, g, 20.0).unwrap().0.count())
            .sum();
        let mean = total as f64 / 1000.0;
        assert!((mean - expected).abs() / expected < 0.05, "mean {mean} expected {expected}");
    }

    fn synthetic(n: usize) -> Vec<LabeledImage> {
        (0..n)
            .map(|i| LabeledImage {
                pixels: (0..6).map(|p| ((i * 7 + p * 31) % 256) as f64 / 255.0).collect(),
                label: (i % 10) as u8,
            })
            .collect()
    }

    #[test]
    fn idx_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
        let imgs = synthetic(13);
        write_mnist_idx(&imgs, 2, 3, &ip, &lp).unwrap();
        let back = load_mnist_idx(&ip, &lp, usize::MAX).unwrap();
        assert_eq!(back, imgs);
        assert_eq!(load_mnist_idx(&ip, &lp, 4).unwrap().len(), 4);
        assert!(load_mnist_idx(&ip, &lp, 0).unwrap().is_empty());
    }

    #[test]
    fn idx_errors_carry_offsets() {
        let imgs = synthetic(3);
        let im = idx_images_bytes(&imgs, 2, 3).unwrap();
        let lb = idx_labels_bytes(&imgs);
        assert_eq!(&im[..4], &[0, 0, 8, 3]);
        assert_eq!(&lb[..4], &[0, 0, 8, 1]);

        match parse_mnist_idx(&lb, &lb, 1) {
            Err(Error::Format { offset: 0, .. }) => {}
            other => panic!("{other:?}"),
        }
        match parse_mnist_idx(&im[..im.len() - 2], &lb, 10) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset as usize, im.len() - 2),
            other => panic!("{other:?}"),
        }
        match parse_mnist_idx(&im, &idx_labels_bytes(&imgs[..2]), 10) {
            Err(Error::Format { offset: 4, .. }) => {}
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_mnist_idx(&im[..6], &lb, 1), Err(Error::Format { .. })));
    }

    #[test]
    fn pixel_scaling_endpoints() {
        let mut im = idx_images_bytes(&synthetic(1), 2, 3).unwrap();
        im[16] = 255;
        im[17] = 0;
        let lb = idx_labels_bytes(&synthetic(1));
        let parsed = parse_mnist_idx(&im, &lb, 1).unwrap();
        assert_eq!(parsed[0].pixels[0], 1.0);
        assert_eq!(parsed[0].pixels[1], 0.0);
    }

    #[test]
    fn encoding_and_targets() {
        let g = make_grid(5.0, 1.0).unwrap();
        assert!(encode_image(&[0.0; 4], g, 3.0).unwrap().iter().all(|s| s.values().iter().all(|&v| v == 0.0)));
        assert_eq!(encode_image(&[1.0], g, 1.0).unwrap()[0].values(), &[1.0; 5]);
        assert!(encode_image(&[1.2], g, 1.0).is_err());

        let t = target_from_label(3, 10, g, 1.0, 0.0).unwrap();
        assert_eq!(t.len(), 10);
        for (c, s) in t.iter().enumerate() {
            assert!(s.values().iter().all(|&v| v == if c == 3 { 1.0 } else { 0.0 }));
        }
        assert!(target_from_label(10, 10, g, 1.0, 0.0).is_err());
        let flat = target_from_label(2, 4, g, 0.5, 0.5).unwrap();
        assert!(flat.iter().all(|s| s.values()[0] == 0.5));
    }

    proptest! {
        #[test]
        fn encoding_is_linear(px in prop::collection::vec(0.0f64..1.0, 8), alpha in 0.0f64..1.0, gain in 0.0f64..5.0) {
            let g = make_grid(4.0, 1.0).unwrap();
            let scaled: Vec<f64> = px.iter().map(|p| alpha * p).collect();
            let a = encode_image(&scaled, g, gain).unwrap();
            let b = encode_image(&px, g, gain).unwrap();
            for (x, y) in a.iter().zip(&b) {
                for (u, v) in x.values().iter().zip(y.values()) {
                    prop_assert!((u - alpha * v).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn label_round_trip(label in 0usize..10, hi in 0.1f64..2.0) {
            let g = make_grid(5.0, 1.0).unwrap();
            let t = target_from_label(label, 10, g, hi, 0.0).unwrap();
            let best = t.iter().enumerate().max_by(|a, b| a.1.integral().partial_cmp(&b.1.integral()).unwrap()).unwrap().0;
            prop_assert_eq!(best, label);
        }
    }
}
