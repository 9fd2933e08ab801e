//! Two-stream decoders recovering full-resolution features.
//!
//! A stream repeats [3x3 conv + BN + ReLU, x2 transposed conv] until full
//! resolution: two repeats from stride 4, four from stride 16. Stream outputs
//! are concatenated. The NE and DE decoders may alias one parameter set for
//! their second stream; aliasing is expressed by requesting the same
//! parameter names, so the storage is literally shared.

use candle_core::Tensor;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::{Conv2d, ConvTranspose2d, FrozenBatchNorm, ParamStore};

/// Channels per decoder stream.
pub const STREAM_CHANNELS: usize = 16;

struct Step {
    conv: Conv2d,
    bn: FrozenBatchNorm,
    up: ConvTranspose2d,
}

pub struct DecoderStream {
    steps: Vec<Step>,
}

impl DecoderStream {
    pub fn new(
        store: &ParamStore,
        name: &str,
        in_c: usize,
        n_steps: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let c = STREAM_CHANNELS;
        let mut steps = Vec::with_capacity(n_steps);
        for i in 0..n_steps {
            let cin = if i == 0 { in_c } else { c };
            steps.push(Step {
                conv: Conv2d::new(store, &format!("{name}.{i}.conv"), cin, c, 3, 1, 1, 1, rng)?,
                bn: FrozenBatchNorm::new(store, &format!("{name}.{i}.bn"), c, rng)?,
                up: ConvTranspose2d::new(store, &format!("{name}.{i}.up"), c, c, 4, 2, 1, rng)?,
            });
        }
        Ok(DecoderStream { steps })
    }

    pub fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mut x = x.clone();
        for step in &self.steps {
            x = step.up.forward(&step.bn.forward(&step.conv.forward(&x)?)?.relu()?)?;
        }
        Ok(x)
    }
}

pub struct Decoder {
    streams: Vec<DecoderStream>,
}

impl Decoder {
    /// `stream2_name: None` builds the single-stream ablation variant.
    pub fn new(
        store: &ParamStore,
        stream1_name: &str,
        stream2_name: Option<&str>,
        in_c: usize,
        n_steps: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mut streams = vec![DecoderStream::new(store, stream1_name, in_c, n_steps, rng)?];
        if let Some(name) = stream2_name {
            streams.push(DecoderStream::new(store, name, in_c, n_steps, rng)?);
        }
        Ok(Decoder { streams })
    }

    pub fn out_channels(&self) -> usize {
        STREAM_CHANNELS * self.streams.len()
    }

    pub fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let outs: Vec<Tensor> = self
            .streams
            .iter()
            .map(|s| s.forward(x))
            .collect::<candle_core::Result<_>>()?;
        if outs.len() == 1 {
            Ok(outs.into_iter().next().expect("one stream"))
        } else {
            Tensor::cat(&outs, 1)
        }
    }
}
