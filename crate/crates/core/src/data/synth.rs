//! Synthetic vortex dataset with an analytic intensity law.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::container::write_tensor_file;
use crate::data::manifest::{Manifest, ManifestEntry, Modality};
use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

pub const NATIVE_SIZE: usize = 201;
pub const PARAMS_FILE: &str = "synth_params.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub count: usize,
    pub seed: u64,
    pub size: usize,
    pub amplitude: (f64, f64),
    pub sigma: (f64, f64),
    pub noise_std: f64,
    pub frames_per_storm: usize,
    pub modalities: Vec<Modality>,
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            count: 64,
            seed: 0,
            size: NATIVE_SIZE,
            amplitude: (0.2, 1.0),
            sigma: (8.0, 40.0),
            noise_std: 0.05,
            frames_per_storm: 4,
            modalities: vec![Modality::IR],
            val_fraction: 0.1,
            test_fraction: 0.1,
        }
    }
}

/// Label in knots for a vortex of peak `amplitude` and width `sigma` (pixels).
pub fn intensity_law(amplitude: f64, sigma: f64) -> f64 {
    20.0 + 120.0 * amplitude + 30.0 * (40.0 - sigma) / 32.0
}

/// Generator parameters of one sample; the label is recomputable from them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSample {
    pub path: String,
    pub split: String,
    pub amplitude: f64,
    pub sigma: f64,
}

fn modality_transform(m: Modality, v: f64) -> f64 {
    match m {
        Modality::IR => v,
        Modality::WV => 0.8 * v + 0.1,
        Modality::PMW => 1.2 * v - 0.05,
    }
}

pub fn split_counts(cfg: &SynthConfig) -> (usize, usize, usize) {
    let n = cfg.count;
    let val = ((n as f64) * cfg.val_fraction).round() as usize;
    let test = ((n as f64) * cfg.test_fraction).round() as usize;
    (n.saturating_sub(val + test), val, test)
}

/// Renders one `[C, size, size]` image.
pub fn render(cfg: &SynthConfig, amplitude: f64, sigma: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let s = cfg.size;
    let c = (s as f64 - 1.0) / 2.0;
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::Data(e.to_string()))?;
    let mut field = Vec::with_capacity(s * s);
    for y in 0..s {
        for x in 0..s {
            let r2 = (y as f64 - c).powi(2) + (x as f64 - c).powi(2);
            field.push(amplitude * (-r2 / (2.0 * sigma * sigma)).exp());
        }
    }
    let mut data = Vec::with_capacity(cfg.modalities.len() * s * s);
    for &m in &cfg.modalities {
        data.extend(field.iter().map(|&v| modality_transform(m, v) + noise.sample(rng)));
    }
    Tensor::new(vec![cfg.modalities.len(), s, s], data, DType::F32)
}

fn validate(cfg: &SynthConfig) -> Result<()> {
    let bad = |m: &str| Err(Error::Data(format!("synthetic config: {m}")));
    if cfg.count == 0 {
        return bad("count must be positive");
    }
    if cfg.size < 2 {
        return bad("size must be at least 2");
    }
    if cfg.modalities.is_empty() {
        return bad("at least one modality is required");
    }
    if cfg.frames_per_storm == 0 {
        return bad("frames_per_storm must be positive");
    }
    if !(cfg.amplitude.0 <= cfg.amplitude.1 && cfg.sigma.0 <= cfg.sigma.1 && cfg.sigma.0 > 0.0) {
        return bad("parameter ranges must be ordered with positive sigma");
    }
    if !(cfg.noise_std >= 0.0) || !(cfg.val_fraction >= 0.0 && cfg.test_fraction >= 0.0) {
        return bad("noise and split fractions must be non-negative");
    }
    if cfg.val_fraction + cfg.test_fraction > 1.0 {
        return bad("split fractions exceed 1");
    }
    Ok(())
}

/// Writes images, `manifest.json` and the parameter sidecar into `dir`.
/// Channel statistics are measured on the training split.
pub fn generate(cfg: &SynthConfig, dir: impl AsRef<Path>) -> Result<Manifest> {
    validate(cfg)?;
    let dir = dir.as_ref();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (n_train, n_val, n_test) = split_counts(cfg);
    let mut splits = BTreeMap::new();
    let mut params = Vec::with_capacity(cfg.count);
    let c = cfg.modalities.len();
    let mut sum = vec![0.0; c];
    let mut sum_sq = vec![0.0; c];
    let mut pixels = 0usize;
    let jitter_a = 0.03 * (cfg.amplitude.1 - cfg.amplitude.0);
    let jitter_s = 0.03 * (cfg.sigma.1 - cfg.sigma.0);

    let mut storm = 0usize;
    for (split, n) in [("train", n_train), ("val", n_val), ("test", n_test)] {
        let mut entries = Vec::with_capacity(n);
        let mut made = 0;
        while made < n {
            let frames = cfg.frames_per_storm.min(n - made);
            let a0 = rng.random_range(cfg.amplitude.0..=cfg.amplitude.1);
            let s0 = rng.random_range(cfg.sigma.0..=cfg.sigma.1);
            let storm_id = format!("storm{storm:04}");
            for k in 0..frames {
                let da: f64 = rng.random_range(-1.0..=1.0);
                let ds: f64 = rng.random_range(-1.0..=1.0);
                let amplitude = (a0 + da * jitter_a).clamp(cfg.amplitude.0, cfg.amplitude.1);
                let sigma = (s0 + ds * jitter_s).clamp(cfg.sigma.0, cfg.sigma.1);
                let img = render(cfg, amplitude, sigma, &mut rng)?;
                let rel = format!("{split}/{storm_id}_{k:03}.tnsr");
                write_tensor_file(dir.join(&rel), &img)?;
                if split == "train" {
                    let plane = cfg.size * cfg.size;
                    for (ch, chunk) in img.data().chunks_exact(plane).enumerate() {
                        sum[ch] += chunk.iter().sum::<f64>();
                        sum_sq[ch] += chunk.iter().map(|v| v * v).sum::<f64>();
                    }
                    pixels += plane;
                }
                entries.push(ManifestEntry {
                    path: rel.clone(),
                    intensity: intensity_law(amplitude, sigma),
                    storm_id: storm_id.clone(),
                    frame_index: k as u32,
                });
                params.push(SynthSample {
                    path: rel,
                    split: split.to_string(),
                    amplitude,
                    sigma,
                });
            }
            made += frames;
            storm += 1;
        }
        splits.insert(split.to_string(), entries);
    }

    let (mean, std) = if pixels == 0 {
        (vec![0.0; c], vec![1.0; c])
    } else {
        let n = pixels as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sum_sq
            .iter()
            .zip(&mean)
            .map(|(sq, m)| {
                let v = (sq / n - m * m).max(0.0).sqrt();
                if v > 0.0 {
                    v
                } else {
                    1.0
                }
            })
            .collect();
        (mean, std)
    };
    let manifest = Manifest::new(cfg.modalities.clone(), mean, std, splits);
    manifest.save(dir)?;
    let side = dir.join(PARAMS_FILE);
    let text = serde_json::to_string_pretty(&params).map_err(|e| Error::Data(e.to_string()))?;
    fs::write(&side, text + "\n").map_err(|e| Error::io(&side, e))?;
    Manifest::load(dir)
}

pub fn read_params(dir: impl AsRef<Path>) -> Result<Vec<SynthSample>> {
    let path = dir.as_ref().join(PARAMS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(e.to_string()))
}
