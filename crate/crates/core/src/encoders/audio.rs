use std::f64::consts::PI;

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{AudioEmbedding, EncoderConfig};
use crate::error::{Error, Result};
use crate::nn::{avg_pool, relu_backward, relu_inplace, Conv2d, ConvCache};

/// Single-channel spectrogram encoder: pooling stem, stride-2 conv blocks,
/// global average pooling over time and frequency, linear projection.
///
/// Global pooling alone would make a pure tone's embedding independent of
/// its pitch, so the first block's output is multiplied by a fixed cosine
/// profile along the frequency axis (one harmonic per channel). The profile
/// is multiplicative, which keeps the encoder free of offsets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AudioEncoder {
    pub stem: usize,
    pub convs: Vec<Conv2d>,
    /// (c, hidden)
    pub proj: Array2<f64>,
}

pub struct AudioCache {
    layers: Vec<(ConvCache, Array3<f64>)>,
    modulation: Array2<f64>,
    pooled: Array1<f64>,
    spatial: usize,
}

fn frequency_profile(channels: usize, rows: usize) -> Array2<f64> {
    Array2::from_shape_fn((channels, rows), |(k, f)| {
        (PI * (k + 1) as f64 * (f as f64 + 0.5) / rows as f64).cos()
    })
}

impl AudioEncoder {
    pub fn new(cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(2);
        let (stem, blocks) = cfg.stem_and_blocks();
        let blocks = blocks.max(1);
        let mut convs = Vec::with_capacity(blocks);
        let mut ch = 1;
        for _ in 0..blocks {
            convs.push(Conv2d::new(ch, cfg.hidden_channels, 3, 2, 1, &mut rng));
            ch = cfg.hidden_channels;
        }
        let normal =
            Normal::new(0.0, (1.0 / cfg.hidden_channels as f64).sqrt()).expect("finite std");
        let proj = Array2::from_shape_simple_fn((cfg.feature_channels, cfg.hidden_channels), || {
            normal.sample(&mut rng)
        });
        Ok(Self { stem, convs, proj })
    }

    pub fn channels(&self) -> usize {
        self.proj.nrows()
    }

    pub fn check_input(&self, spec: ArrayView3<f64>) -> Result<()> {
        let (c, f, t) = spec.dim();
        if c != 1 {
            return Err(Error::Validation(format!(
                "audio encoder takes one input channel, got {c}"
            )));
        }
        if f / self.stem == 0 || t / self.stem == 0 {
            return Err(Error::Dimension(format!(
                "spectrogram {f}x{t} is smaller than the pooling stem {}",
                self.stem
            )));
        }
        if !spec.iter().all(|v| v.is_finite()) {
            return Err(Error::Validation("spectrogram contains non-finite values".into()));
        }
        Ok(())
    }

    /// (1, F, T) spectrogram to a c-dim embedding.
    pub fn forward_one(&self, spec: ArrayView3<f64>) -> (Array1<f64>, AudioCache) {
        self.forward_stemmed(self.stem_input(spec))
    }

    pub fn stem_input(&self, spec: ArrayView3<f64>) -> Array3<f64> {
        avg_pool(spec, self.stem)
    }

    pub fn forward_stemmed(&self, stemmed: Array3<f64>) -> (Array1<f64>, AudioCache) {
        let mut x = stemmed;
        let mut layers = Vec::with_capacity(self.convs.len());
        let mut modulation = Array2::zeros((0, 0));
        for (li, conv) in self.convs.iter().enumerate() {
            let (mut y, cache) = conv.forward(x.view());
            if li == 0 {
                let (ch, rows, _) = y.dim();
                modulation = frequency_profile(ch, rows);
                for ((k, f, _), v) in y.indexed_iter_mut() {
                    *v *= modulation[[k, f]];
                }
            }
            relu_inplace(&mut y);
            layers.push((cache, y.clone()));
            x = y;
        }
        let (_, rows, cols) = x.dim();
        let spatial = rows * cols;
        let pooled = x
            .into_shape_with_order((self.proj.ncols(), spatial))
            .expect("contiguous")
            .mean_axis(Axis(1))
            .expect("non-empty");
        let out = self.proj.dot(&pooled);
        (
            out,
            AudioCache {
                layers,
                modulation,
                pooled,
                spatial,
            },
        )
    }

    /// Gradient slots: one per conv, then the projection.
    pub fn backward_one(&self, cache: &AudioCache, dout: &Array1<f64>, grads: &mut [Array2<f64>]) {
        let n = self.convs.len();
        {
            let dproj = &mut grads[n];
            for (i, &d) in dout.iter().enumerate() {
                for (j, &p) in cache.pooled.iter().enumerate() {
                    dproj[[i, j]] += d * p;
                }
            }
        }
        let dpooled = self.proj.t().dot(dout);
        let last_shape = cache.layers[n - 1].1.dim();
        let scale = 1.0 / cache.spatial as f64;
        let mut g = Array3::from_shape_fn(last_shape, |(k, _, _)| dpooled[k] * scale);
        for li in (0..n).rev() {
            let (conv_cache, act) = &cache.layers[li];
            relu_backward(&mut g, act);
            if li == 0 {
                for ((k, f, _), v) in g.indexed_iter_mut() {
                    *v *= cache.modulation[[k, f]];
                }
            }
            match self.convs[li].backward(conv_cache, &g, &mut grads[li], li > 0) {
                Some(dx) => g = dx,
                None => break,
            }
        }
    }

    pub fn encode(&self, spectrograms: &Array4<f64>) -> Result<AudioEmbedding> {
        let b = spectrograms.dim().0;
        if b == 0 {
            return Err(Error::Dimension("empty spectrogram batch".into()));
        }
        let mut data = Array2::zeros((b, self.channels()));
        for bi in 0..b {
            let spec = spectrograms.slice(s![bi, .., .., ..]);
            self.check_input(spec)?;
            let (emb, _) = self.forward_one(spec);
            data.row_mut(bi).assign(&emb);
        }
        AudioEmbedding::new(data)
    }

    pub fn params(&self) -> Vec<&Array2<f64>> {
        let mut p: Vec<&Array2<f64>> = self.convs.iter().map(|c| &c.weight).collect();
        p.push(&self.proj);
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut p: Vec<&mut Array2<f64>> = self.convs.iter_mut().map(|c| &mut c.weight).collect();
        p.push(&mut self.proj);
        p
    }
}
