use ndarray::{s, Array2, Array3, Array4, ArrayView3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EncoderConfig, VisualFeatureMap};
use crate::error::{Error, Result};
use crate::nn::{avg_pool, relu_backward, relu_inplace, Conv2d, ConvCache};

/// Average-pool stem, `blocks` stride-2 2x2 convs with ReLU, then a 1x1
/// projection to `feature_channels`. No biases anywhere, so a zero image
/// maps to a zero feature map.
///
/// The blocks tile their input without overlap, so each output cell sees
/// exactly its own `downsample` x `downsample` patch. Overlapping kernels
/// let a cell light up for objects next to it and, with 3x3 kernels, shift
/// every cell half an input cell towards the origin per block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisualEncoder {
    pub stem: usize,
    pub downsample: usize,
    pub convs: Vec<Conv2d>,
}

pub struct VisualCache {
    layers: Vec<(ConvCache, Option<Array3<f64>>)>,
}

impl VisualEncoder {
    pub fn new(cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        let (stem, blocks) = cfg.stem_and_blocks();
        let mut convs = Vec::with_capacity(blocks + 1);
        let mut ch = 3;
        for _ in 0..blocks {
            convs.push(Conv2d::new(ch, cfg.hidden_channels, 2, 2, 0, &mut rng));
            ch = cfg.hidden_channels;
        }
        convs.push(Conv2d::new(ch, cfg.feature_channels, 1, 1, 0, &mut rng));
        Ok(Self {
            stem,
            downsample: cfg.spatial_downsample,
            convs,
        })
    }

    pub fn channels(&self) -> usize {
        self.convs.last().map(|c| c.out_ch).unwrap_or(0)
    }

    pub fn check_input(&self, image: ArrayView3<f64>) -> Result<()> {
        let (c, h, w) = image.dim();
        if c != 3 {
            return Err(Error::Dimension(format!("expected 3 image channels, got {c}")));
        }
        if h == 0 || w == 0 || h % self.downsample != 0 || w % self.downsample != 0 {
            return Err(Error::Dimension(format!(
                "image {h}x{w} is not divisible by the downsample factor {}",
                self.downsample
            )));
        }
        if !image.iter().all(|v| v.is_finite()) {
            return Err(Error::Validation("image contains non-finite values".into()));
        }
        if image.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Validation("pixel values must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Single image (3, H, W) to a (c, H/d, W/d) feature block.
    pub fn forward_one(&self, image: ArrayView3<f64>) -> (Array3<f64>, VisualCache) {
        self.forward_stemmed(self.stem_input(image))
    }

    /// Output of the parameter-free pooling stem; it can be computed once
    /// per image and fed to [`Self::forward_stemmed`].
    pub fn stem_input(&self, image: ArrayView3<f64>) -> Array3<f64> {
        avg_pool(image, self.stem)
    }

    pub fn forward_stemmed(&self, stemmed: Array3<f64>) -> (Array3<f64>, VisualCache) {
        let mut x = stemmed;
        let mut layers = Vec::with_capacity(self.convs.len());
        let last = self.convs.len() - 1;
        for (li, conv) in self.convs.iter().enumerate() {
            let (mut y, cache) = conv.forward(x.view());
            if li < last {
                relu_inplace(&mut y);
                layers.push((cache, Some(y.clone())));
            } else {
                layers.push((cache, None));
            }
            x = y;
        }
        (x, VisualCache { layers })
    }

    /// Accumulates parameter gradients (one array per conv, in order).
    pub fn backward_one(&self, cache: &VisualCache, dfeat: Array3<f64>, grads: &mut [Array2<f64>]) {
        let mut g = dfeat;
        for (li, conv) in self.convs.iter().enumerate().rev() {
            let (conv_cache, activated) = &cache.layers[li];
            if let Some(act) = activated {
                relu_backward(&mut g, act);
            }
            match conv.backward(conv_cache, &g, &mut grads[li], li > 0) {
                Some(dx) => g = dx,
                None => break,
            }
        }
    }

    pub fn encode(&self, images: &Array4<f64>) -> Result<VisualFeatureMap> {
        let (b, _, h, w) = images.dim();
        if b == 0 {
            return Err(Error::Dimension("empty image batch".into()));
        }
        let (gw, gh) = (w / self.downsample, h / self.downsample);
        let mut data = Array4::zeros((b, gw, gh, self.channels()));
        for bi in 0..b {
            let image = images.slice(s![bi, .., .., ..]);
            self.check_input(image)?;
            let (feat, _) = self.forward_one(image);
            data.slice_mut(s![bi, .., .., ..])
                .assign(&feat.view().permuted_axes([2, 1, 0]));
        }
        VisualFeatureMap::new(data)
    }

    pub fn params(&self) -> Vec<&Array2<f64>> {
        self.convs.iter().map(|c| &c.weight).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array2<f64>> {
        self.convs.iter_mut().map(|c| &mut c.weight).collect()
    }
}

/// (c, h, w) conv layout to the (w, h, c) slice of a [`VisualFeatureMap`].
pub fn to_grid_layout(feat: &Array3<f64>) -> Array3<f64> {
    feat.view().permuted_axes([2, 1, 0]).as_standard_layout().into_owned()
}

/// Inverse of [`to_grid_layout`].
pub fn from_grid_layout(grid: ArrayView3<f64>) -> Array3<f64> {
    grid.permuted_axes([2, 1, 0]).as_standard_layout().into_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::encode_visual;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn shape_contract_224() {
        let cfg = EncoderConfig::default();
        let images = Array4::from_elem((2, 3, 224, 224), 0.5);
        let fmap = encode_visual(&images, &cfg).unwrap();
        assert_eq!(fmap.data.dim(), (2, 7, 7, 16));
    }

    #[test]
    fn zero_image_gives_zero_features() {
        let cfg = EncoderConfig::default();
        let images = Array4::zeros((1, 3, 64, 96));
        let fmap = encode_visual(&images, &cfg).unwrap();
        assert_eq!(fmap.data.dim(), (1, 3, 2, 16));
        assert!(fmap.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn seeded_runs_are_bit_identical() {
        let cfg = EncoderConfig {
            seed: 7,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let images = Array4::from_shape_simple_fn((1, 3, 64, 64), || rng.gen_range(0.0..1.0));
        let a = encode_visual(&images, &cfg).unwrap();
        let b = encode_visual(&images, &cfg).unwrap();
        let bits = |m: &VisualFeatureMap| m.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn rejects_bad_inputs() {
        let cfg = EncoderConfig::default();
        let odd = Array4::zeros((1, 3, 100, 64));
        assert!(matches!(encode_visual(&odd, &cfg), Err(Error::Dimension(_))));
        let mut nan = Array4::zeros((1, 3, 32, 32));
        nan[[0, 1, 2, 3]] = f64::NAN;
        assert!(matches!(encode_visual(&nan, &cfg), Err(Error::Validation(_))));
    }

    #[test]
    fn layout_round_trip() {
        let feat = Array3::from_shape_fn((4, 2, 3), |(c, y, x)| (c * 100 + y * 10 + x) as f64);
        let grid = to_grid_layout(&feat);
        assert_eq!(grid.dim(), (3, 2, 4));
        assert_eq!(grid[[2, 1, 3]], feat[[3, 1, 2]]);
        assert_eq!(from_grid_layout(grid.view()), feat);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn shape_contract_holds(b in 1usize..3, gh in 1usize..4, gw in 1usize..4, d in prop::sample::select(vec![1usize, 2, 4, 8, 16])) {
            let cfg = EncoderConfig { spatial_downsample: d, feature_channels: 6, hidden_channels: 4, ..Default::default() };
            let images = Array4::from_elem((b, 3, gh * d, gw * d), 0.25);
            let fmap = encode_visual(&images, &cfg).unwrap();
            prop_assert_eq!(fmap.data.dim(), (b, gw, gh, 6));
        }
    }
}
