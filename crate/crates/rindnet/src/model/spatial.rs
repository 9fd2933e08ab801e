//! Spatial layers: one convolution plus one transposed convolution mapping a
//! pyramid level to a 2-channel cue map at full input resolution.

use candle_core::Tensor;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::{Conv2d, ConvTranspose2d, ParamStore};

pub const CUE_CHANNELS: usize = 2;

pub struct SpatialLayer {
    conv: Conv2d,
    up: ConvTranspose2d,
}

impl SpatialLayer {
    pub fn new(
        store: &ParamStore,
        name: &str,
        in_c: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let conv = Conv2d::new(store, &format!("{name}.conv"), in_c, CUE_CHANNELS, 3, 1, 1, 1, rng)?;
        let up = ConvTranspose2d::new(
            store,
            &format!("{name}.up"),
            CUE_CHANNELS,
            CUE_CHANNELS,
            stride,
            stride,
            0,
            rng,
        )?;
        Ok(SpatialLayer { conv, up })
    }

    pub fn forward(&self, level: &Tensor) -> candle_core::Result<Tensor> {
        self.up.forward(&self.conv.forward(level)?)
    }
}
