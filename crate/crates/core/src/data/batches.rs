//! Split loading, augmentation and batch assembly.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::manifest::{Manifest, ManifestEntry};
use crate::data::preprocess::{clean_and_normalize, random_flip, random_rotation, resize_bilinear};
use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

/// One split held in memory, normalized at native resolution.
#[derive(Clone, Debug)]
pub struct SplitData {
    pub entries: Vec<ManifestEntry>,
    pub images: Vec<Tensor>,
}

impl SplitData {
    pub fn load(manifest: &Manifest, split: &str) -> Result<Self> {
        let entries = manifest.split(split).to_vec();
        let images = entries
            .iter()
            .map(|e| {
                let raw = manifest.read_image(e)?;
                clean_and_normalize(&raw, &manifest.channel_mean, &manifest.channel_std)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { entries, images })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn labels(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.intensity).collect()
    }

    /// Keeps the listed channels of every image, in the given order.
    pub fn select_channels(&mut self, channels: &[usize]) -> Result<()> {
        for img in &mut self.images {
            let (c, plane) = (img.shape()[0], img.shape()[1] * img.shape()[2]);
            if let Some(&bad) = channels.iter().find(|&&k| k >= c) {
                return Err(Error::Data(format!("channel {bad} out of range for {c}-channel image")));
            }
            let mut data = Vec::with_capacity(channels.len() * plane);
            for &k in channels {
                data.extend_from_slice(&img.data()[k * plane..(k + 1) * plane]);
            }
            let mut shape = img.shape().to_vec();
            shape[0] = channels.len();
            *img = Tensor::new(shape, data, img.dtype())?;
        }
        Ok(())
    }

    /// Keeps only the first `n` samples.
    pub fn truncate(&mut self, n: usize) {
        self.entries.truncate(n);
        self.images.truncate(n);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchOptions {
    pub batch_size: usize,
    pub input_size: usize,
    /// `None` keeps manifest order.
    pub shuffle_seed: Option<u64>,
    /// Seed for rotation/flip draws; `None` disables augmentation.
    pub augment_seed: Option<u64>,
    pub epoch: u64,
    pub dtype: DType,
}

impl BatchOptions {
    /// Deterministic, unaugmented batches for evaluation.
    pub fn eval(batch_size: usize, input_size: usize) -> Self {
        Self {
            batch_size,
            input_size,
            shuffle_seed: None,
            augment_seed: None,
            epoch: 0,
            dtype: DType::F32,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Batch {
    /// `[B, C, S, S]`.
    pub images: Tensor,
    pub labels: Vec<f64>,
    /// Positions within the split.
    pub indices: Vec<usize>,
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Augmentation stream for one sample in one epoch. Keyed by the sample's
/// path, so it does not depend on which other samples are present.
pub fn sample_rng(seed: u64, epoch: u64, entry: &ManifestEntry) -> ChaCha8Rng {
    let key = splitmix(splitmix(seed ^ splitmix(epoch)) ^ fnv1a(entry.path.as_bytes()));
    ChaCha8Rng::seed_from_u64(key)
}

/// Sample order for an epoch, chunked into batches; the last may be short.
pub fn batch_order(n: usize, batch_size: usize, shuffle_seed: Option<u64>, epoch: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(seed) = shuffle_seed {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed) ^ splitmix(epoch.wrapping_add(1)));
        order.shuffle(&mut rng);
    }
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Produces the network input for sample `i`: rotate, flip, resize.
pub fn prepare_sample(data: &SplitData, i: usize, opts: &BatchOptions) -> Result<Tensor> {
    let mut img = data.images[i].clone();
    if let Some(seed) = opts.augment_seed {
        let mut rng = sample_rng(seed, opts.epoch, &data.entries[i]);
        img = random_rotation(&img, &mut rng)?.0;
        img = random_flip(&img, &mut rng)?.0;
    }
    let out = resize_bilinear(&img, opts.input_size)?;
    Ok(out.to_dtype(opts.dtype))
}

pub fn assemble(data: &SplitData, indices: &[usize], opts: &BatchOptions) -> Result<Batch> {
    let mut buf = Vec::new();
    let mut chw = Vec::new();
    for &i in indices {
        let img = prepare_sample(data, i, opts)?;
        chw = img.shape().to_vec();
        buf.extend_from_slice(img.data());
    }
    let mut shape = vec![indices.len()];
    shape.extend(chw);
    Ok(Batch {
        images: Tensor::new(shape, buf, opts.dtype)?,
        labels: indices.iter().map(|&i| data.entries[i].intensity).collect(),
        indices: indices.to_vec(),
    })
}

/// Lazily assembled batches for one pass over a split.
pub struct BatchStream<'a> {
    data: &'a SplitData,
    opts: BatchOptions,
    order: std::vec::IntoIter<Vec<usize>>,
}

impl Iterator for BatchStream<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        let idx = self.order.next()?;
        Some(assemble(self.data, &idx, &self.opts))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        self.order.size_hint()
    }
}

impl ExactSizeIterator for BatchStream<'_> {}

pub fn make_batches<'a>(data: &'a SplitData, opts: &BatchOptions) -> Result<BatchStream<'a>> {
    if data.is_empty() {
        return Err(Error::Data("split has no samples".into()));
    }
    if opts.batch_size == 0 {
        return Err(Error::Data("batch size must be positive".into()));
    }
    Ok(BatchStream {
        data,
        opts: opts.clone(),
        order: batch_order(data.len(), opts.batch_size, opts.shuffle_seed, opts.epoch).into_iter(),
    })
}
