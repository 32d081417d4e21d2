//! Raw-waveform audio front-end.
//!
//! The pipeline over one 6 s segment: normalize to zero mean / unit
//! variance, a bank of short finite-impulse filters over the 16 kHz signal,
//! half-wave rectification, max pooling along time (downsampling the
//! sequence rate), a bank of long filters for slow structure, max pooling
//! across channels, dropout, and finally framing into one feature vector
//! per 40 ms annotation frame.
//!
//! At full scale this maps 96000 samples to exactly (150, 1280) features:
//! 40 filters pooled by 10 leave 4 channels, and 40 ms at the pooled 8 kHz
//! rate spans 320 steps, so each frame carries 4 x 320 = 1280 values. The
//! tiny scale keeps every stage but shrinks the counts so training-based
//! tests stay fast.

use crate::error::{AffectError, Result};
use crate::rng::Rng;
use crate::tensor::{Padding, Tape, Tensor, Var};

/// Sizes of every stage of the front-end. Kernel lengths are in samples at
/// the rate of the stage they apply to.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeechNetConfig {
    pub sample_rate: usize,
    pub segment_seconds: f64,
    pub filters_1: usize,
    pub kernel_1: usize,
    pub time_pool: usize,
    pub filters_2: usize,
    pub kernel_2: usize,
    pub channel_pool: usize,
    pub dropout_p: f64,
    pub frame_ms: usize,
}

impl SpeechNetConfig {
    /// Published scale: 20 5-ms filters at 16 kHz, pool 2 to 8 kHz, 40
    /// 500-ms filters, channel pool 10, dropout 0.5.
    pub fn full() -> Self {
        SpeechNetConfig {
            sample_rate: 16_000,
            segment_seconds: 6.0,
            filters_1: 20,
            kernel_1: 80,
            time_pool: 2,
            filters_2: 40,
            kernel_2: 4000,
            channel_pool: 10,
            dropout_p: 0.5,
            frame_ms: 40,
        }
    }

    /// Desk scale: same topology, aggressive pooling (16 kHz -> 2 kHz) and
    /// small filter banks, 160 features per frame.
    pub fn tiny() -> Self {
        SpeechNetConfig {
            sample_rate: 16_000,
            segment_seconds: 6.0,
            filters_1: 4,
            kernel_1: 32,
            time_pool: 8,
            filters_2: 4,
            kernel_2: 64,
            channel_pool: 2,
            dropout_p: 0.5,
            frame_ms: 40,
        }
    }

    pub fn segment_samples(&self) -> usize {
        (self.sample_rate as f64 * self.segment_seconds).round() as usize
    }

    /// Sequence length after time pooling.
    pub fn pooled_steps(&self) -> usize {
        self.segment_samples() / self.time_pool
    }

    /// Pooled-rate steps per 40 ms annotation frame.
    pub fn steps_per_frame(&self) -> usize {
        self.sample_rate / self.time_pool * self.frame_ms / 1000
    }

    /// Channels that survive channel pooling.
    pub fn kept_channels(&self) -> usize {
        self.filters_2 / self.channel_pool
    }

    /// Feature vector width per frame.
    pub fn feature_dim(&self) -> usize {
        self.kept_channels() * self.steps_per_frame()
    }

    /// Frames per segment: segment length over the 40 ms annotation period.
    pub fn frame_count(&self) -> Result<usize> {
        let frames = self.segment_seconds * 1000.0 / self.frame_ms as f64;
        if (frames - frames.round()).abs() > 1e-9 {
            return Err(AffectError::Config(format!(
                "segment of {} s does not divide into {} ms frames",
                self.segment_seconds, self.frame_ms
            )));
        }
        Ok(frames.round() as usize)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(AffectError::Config(msg));
        if self.filters_2 % self.channel_pool != 0 {
            return err(format!(
                "{} filters not divisible by channel pool {}",
                self.filters_2, self.channel_pool
            ));
        }
        if self.sample_rate % self.time_pool != 0 {
            return err(format!(
                "sample rate {} not divisible by time pool {}",
                self.sample_rate, self.time_pool
            ));
        }
        if (self.sample_rate / self.time_pool * self.frame_ms) % 1000 != 0 {
            return err("pooled rate does not give an integer number of steps per frame".into());
        }
        if self.segment_samples() % self.time_pool != 0 {
            return err("segment length not divisible by time pool".into());
        }
        if self.pooled_steps() % self.steps_per_frame() != 0 {
            return err("pooled sequence does not divide into whole frames".into());
        }
        let frames = self.frame_count()?;
        if frames * self.steps_per_frame() != self.pooled_steps() {
            return err("frame grid does not cover the pooled sequence exactly".into());
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return err(format!(
                "dropout probability {} out of [0,1)",
                self.dropout_p
            ));
        }
        if self.kernel_1 == 0 || self.kernel_2 == 0 || self.filters_1 == 0 || self.filters_2 == 0 {
            return err("zero-sized filter bank".into());
        }
        Ok(())
    }
}

/// A normalized 6 s slice of waveform, ready for the filter banks.
#[derive(Clone, Debug)]
pub struct SpeechSegment {
    pub samples: Vec<f64>,
}

/// Standardize a raw segment to zero mean and unit (population) variance.
/// Rejects wrong lengths and constant signals.
pub fn normalize_segment(raw: &[f64], config: &SpeechNetConfig) -> Result<SpeechSegment> {
    let want = config.segment_samples();
    if raw.len() != want {
        return Err(AffectError::dim(format!(
            "segment has {} samples, expected {}",
            raw.len(),
            want
        )));
    }
    let n = raw.len() as f64;
    let mean = raw.iter().sum::<f64>() / n;
    let var = raw.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    if var < 1e-24 {
        return Err(AffectError::DegenerateInput(
            "constant signal cannot be normalized".into(),
        ));
    }
    let std = var.sqrt();
    Ok(SpeechSegment {
        samples: raw.iter().map(|x| (x - mean) / std).collect(),
    })
}

/// Tile a recording into consecutive whole segments, dropping a final
/// partial window. Rejects recordings shorter than one segment.
pub fn segment_windows(
    total_samples: usize,
    config: &SpeechNetConfig,
) -> Result<Vec<std::ops::Range<usize>>> {
    let seg = config.segment_samples();
    if total_samples < seg {
        return Err(AffectError::Data(format!(
            "recording of {} samples is shorter than one {}-sample segment",
            total_samples, seg
        )));
    }
    Ok((0..total_samples / seg)
        .map(|i| i * seg..(i + 1) * seg)
        .collect())
}

/// The two filter banks.
#[derive(Clone, Debug)]
pub struct SpeechNet {
    pub config: SpeechNetConfig,
    pub kernels_1: Tensor,
    pub kernels_2: Tensor,
}

impl SpeechNet {
    pub fn init(config: SpeechNetConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let kernels_1 = Tensor::he_normal(
            vec![config.filters_1, 1, config.kernel_1],
            config.kernel_1,
            1.0,
            rng,
        );
        let kernels_2 = Tensor::he_normal(
            vec![config.filters_2, config.filters_1, config.kernel_2],
            config.filters_1 * config.kernel_2,
            1.0,
            rng,
        );
        Ok(SpeechNet {
            config,
            kernels_1,
            kernels_2,
        })
    }

    pub fn vars(&self, tape: &mut Tape) -> SpeechVars {
        SpeechVars {
            kernels_1: tape.leaf(&self.kernels_1),
            kernels_2: tape.leaf(&self.kernels_2),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SpeechVars {
    pub kernels_1: Var,
    pub kernels_2: Var,
}

/// Run the front-end over one normalized segment already on the tape as a
/// `[1 x segment_samples]` node. Returns `[frames x feature_dim]`.
pub fn forward(
    tape: &mut Tape,
    segment: Var,
    vars: &SpeechVars,
    config: &SpeechNetConfig,
    training: bool,
    rng: &mut Rng,
) -> Result<Var> {
    let fine = tape.conv1d(segment, vars.kernels_1, 1, Padding::Same)?;
    let rectified = tape.relu(fine);
    let pooled = tape.max_pool_time(rectified, config.time_pool)?;
    let slow = tape.conv1d(pooled, vars.kernels_2, 1, Padding::Same)?;
    let kept = tape.max_pool_channels(slow, config.channel_pool)?;
    let regularized = tape.dropout(kept, config.dropout_p, training, rng)?;
    tape.frame_split(regularized, config.steps_per_frame())
}
