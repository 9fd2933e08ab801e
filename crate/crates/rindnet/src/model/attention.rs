//! Attention Module: image-driven per-pixel soft assignment over
//! {background, r, i, n, d} (or {background, edge} in generic mode).
//!
//! A stem block (7x7 stride-2 conv + BN + ReLU) is followed by four 3x3
//! convolutions (each followed by ReLU and BN) and a 1x1 projection; logits
//! are produced at stride 2, upsampled bilinearly to full resolution and
//! normalized with a per-pixel softmax across channels.

use candle_core::Tensor;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::{bilinear_upsample_x2, Conv2d, FrozenBatchNorm, ParamStore};

const WIDTH: usize = 64;

pub struct AttentionModule {
    stem_conv: Conv2d,
    stem_bn: FrozenBatchNorm,
    convs: Vec<(Conv2d, FrozenBatchNorm)>,
    out: Conv2d,
    channels: usize,
}

impl AttentionModule {
    pub fn new(
        store: &ParamStore,
        name: &str,
        channels: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let stem_conv = Conv2d::new_no_bias(store, &format!("{name}.stem.conv"), 3, WIDTH, 7, 2, 3, 1, rng)?;
        let stem_bn = FrozenBatchNorm::new(store, &format!("{name}.stem.bn"), WIDTH, rng)?;
        let mut convs = Vec::with_capacity(4);
        for i in 1..=4 {
            convs.push((
                Conv2d::new(store, &format!("{name}.conv{i}"), WIDTH, WIDTH, 3, 1, 1, 1, rng)?,
                FrozenBatchNorm::new(store, &format!("{name}.bn{i}"), WIDTH, rng)?,
            ));
        }
        let out = Conv2d::new(store, &format!("{name}.out"), WIDTH, channels, 1, 1, 0, 1, rng)?;
        Ok(AttentionModule {
            stem_conv,
            stem_bn,
            convs,
            out,
            channels,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Normalized attention maps `[B, channels, H, W]`; channels sum to one
    /// at every pixel.
    pub fn forward(&self, image: &Tensor) -> candle_core::Result<Tensor> {
        let mut x = self.stem_bn.forward(&self.stem_conv.forward(image)?)?.relu()?;
        for (conv, bn) in &self.convs {
            x = bn.forward(&conv.forward(&x)?.relu()?)?;
        }
        let logits = bilinear_upsample_x2(&self.out.forward(&x)?)?;
        candle_nn::ops::softmax(&logits, 1)
    }
}
