//! Residual visual network over 96 x 96 face frames.
//!
//! Stem (7x7 conv then 3x3 max pool), four stages of bottleneck blocks
//! (1x1 reduce, 3x3, 1x1 expand, plus an identity or 1x1-projection
//! shortcut), global average pooling, and a learned linear projection to
//! the per-frame feature vector. The full configuration reproduces the
//! 50-layer topology: stage replications (3, 4, 6, 3) with channel triples
//! (64,64,256), (128,128,512), (256,256,1024), (512,512,2048) and 2048
//! features before the projection.
//!
//! Rectification follows each convolution inside the residual branch; the
//! block output is `branch + shortcut` with nothing after the addition, so
//! zeroing a branch leaves an identity-shortcut block transparent.
//! No batch normalization anywhere.

use crate::error::{AffectError, Result};
use crate::rng::Rng;
use crate::tensor::{Padding, Tape, Tensor, Var};

/// One stage of the network: `replication` bottleneck blocks sharing a
/// channel triple (1x1 reduce, 3x3, 1x1 expand).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BottleneckSpec {
    pub replication: usize,
    pub channels: (usize, usize, usize),
}

/// Network-wide configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualNetConfig {
    /// Input frames are `input_size x input_size` RGB.
    pub input_size: usize,
    pub stem_channels: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    pub stem_pool: usize,
    pub stem_pool_stride: usize,
    pub stages: Vec<BottleneckSpec>,
    /// Stride of the first block of each stage.
    pub stage_strides: Vec<usize>,
    pub output_features: usize,
}

impl VisualNetConfig {
    /// The 50-layer configuration.
    pub fn full() -> Self {
        VisualNetConfig {
            input_size: 96,
            stem_channels: 64,
            stem_kernel: 7,
            stem_stride: 2,
            stem_pool: 3,
            stem_pool_stride: 2,
            stages: vec![
                BottleneckSpec {
                    replication: 3,
                    channels: (64, 64, 256),
                },
                BottleneckSpec {
                    replication: 4,
                    channels: (128, 128, 512),
                },
                BottleneckSpec {
                    replication: 6,
                    channels: (256, 256, 1024),
                },
                BottleneckSpec {
                    replication: 3,
                    channels: (512, 512, 2048),
                },
            ],
            stage_strides: vec![1, 2, 2, 2],
            output_features: 640,
        }
    }

    /// Desk scale: one bottleneck per stage, narrow channels, stride-4 stem.
    pub fn tiny() -> Self {
        VisualNetConfig {
            input_size: 96,
            stem_channels: 4,
            stem_kernel: 7,
            stem_stride: 4,
            stem_pool: 3,
            stem_pool_stride: 2,
            stages: vec![
                BottleneckSpec {
                    replication: 1,
                    channels: (4, 4, 8),
                },
                BottleneckSpec {
                    replication: 1,
                    channels: (8, 8, 16),
                },
                BottleneckSpec {
                    replication: 1,
                    channels: (8, 8, 16),
                },
                BottleneckSpec {
                    replication: 1,
                    channels: (8, 8, 32),
                },
            ],
            stage_strides: vec![1, 2, 2, 2],
            output_features: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() || self.stages.len() != self.stage_strides.len() {
            return Err(AffectError::Config(
                "stages and stage_strides must be non-empty and equal length".into(),
            ));
        }
        for spec in &self.stages {
            if spec.replication == 0 {
                return Err(AffectError::Config("stage with zero blocks".into()));
            }
            let (c1, c2, c3) = spec.channels;
            if c1 == 0 || c2 == 0 || c3 == 0 {
                return Err(AffectError::Config("zero-width bottleneck".into()));
            }
        }
        if self.output_features == 0 {
            return Err(AffectError::Config("zero output features".into()));
        }
        Ok(())
    }

    /// Feature width after global average pooling, before the projection.
    pub fn pre_projection_features(&self) -> usize {
        self.stages.last().map(|s| s.channels.2).unwrap_or(0)
    }

    pub fn replications(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.replication).collect()
    }
}

/// Per-pixel frame in [0, 1], stored channel-major `[3 x size x size]`.
#[derive(Clone, Debug)]
pub struct Frame {
    pub size: usize,
    pub pixels: Vec<f64>,
}

impl Frame {
    pub fn new(size: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != 3 * size * size {
            return Err(AffectError::dim(format!(
                "frame wants {} values, got {}",
                3 * size * size,
                pixels.len()
            )));
        }
        Ok(Frame { size, pixels })
    }
}

/// Weights of one bottleneck block.
#[derive(Clone, Debug)]
pub struct BlockWeights {
    pub reduce: Tensor,
    pub conv: Tensor,
    pub expand: Tensor,
    /// 1x1 projection shortcut when channels or stride change.
    pub projection: Option<Tensor>,
    pub stride: usize,
}

/// The network parameters: stem, flattened blocks, projection head.
#[derive(Clone, Debug)]
pub struct VisualNet {
    pub config: VisualNetConfig,
    pub stem: Tensor,
    pub blocks: Vec<BlockWeights>,
    pub proj_weight: Tensor,
    pub proj_bias: Tensor,
}

impl VisualNet {
    pub fn init(config: VisualNetConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let stem = Tensor::he_normal(
            vec![config.stem_channels, 3, config.stem_kernel, config.stem_kernel],
            3 * config.stem_kernel * config.stem_kernel,
            1.0,
            rng,
        );
        let mut blocks = Vec::new();
        let mut in_channels = config.stem_channels;
        for (spec, &stage_stride) in config.stages.iter().zip(&config.stage_strides) {
            let (c1, c2, c3) = spec.channels;
            for rep in 0..spec.replication {
                let stride = if rep == 0 { stage_stride } else { 1 };
                let projection = if in_channels != c3 || stride != 1 {
                    Some(Tensor::he_normal(
                        vec![c3, in_channels, 1, 1],
                        in_channels,
                        1.0,
                        rng,
                    ))
                } else {
                    None
                };
                blocks.push(BlockWeights {
                    reduce: Tensor::he_normal(vec![c1, in_channels, 1, 1], in_channels, 1.0, rng),
                    conv: Tensor::he_normal(vec![c2, c1, 3, 3], 9 * c1, 1.0, rng),
                    // quarter-strength expand keeps the residual branch small
                    // at init, so deep stacks stay close to identity
                    expand: Tensor::he_normal(vec![c3, c2, 1, 1], c2, 0.25, rng),
                    projection,
                    stride,
                });
                in_channels = c3;
            }
        }
        let pre = config.pre_projection_features();
        let proj_weight = Tensor::uniform(
            vec![pre, config.output_features],
            1.0 / (pre as f64).sqrt(),
            rng,
        );
        let proj_bias = Tensor::zeros(vec![config.output_features]);
        Ok(VisualNet {
            config,
            stem,
            blocks,
            proj_weight,
            proj_bias,
        })
    }

    pub fn vars(&self, tape: &mut Tape) -> VisualVars {
        VisualVars {
            stem: tape.leaf(&self.stem),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockVars {
                    reduce: tape.leaf(&b.reduce),
                    conv: tape.leaf(&b.conv),
                    expand: tape.leaf(&b.expand),
                    projection: b.projection.as_ref().map(|p| tape.leaf(p)),
                    stride: b.stride,
                })
                .collect(),
            proj_weight: tape.leaf(&self.proj_weight),
            proj_bias: tape.leaf(&self.proj_bias),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub reduce: Var,
    pub conv: Var,
    pub expand: Var,
    pub projection: Option<Var>,
    pub stride: usize,
}

#[derive(Clone, Debug)]
pub struct VisualVars {
    pub stem: Var,
    pub blocks: Vec<BlockVars>,
    pub proj_weight: Var,
    pub proj_bias: Var,
}

/// One bottleneck block: `expand(relu(conv(relu(reduce(x))))) + shortcut`.
pub fn residual_block(tape: &mut Tape, x: Var, block: &BlockVars) -> Result<Var> {
    let reduced = tape.conv2d(x, block.reduce, 1, Padding::Same)?;
    let reduced = tape.relu(reduced);
    let mid = tape.conv2d(reduced, block.conv, block.stride, Padding::Same)?;
    let mid = tape.relu(mid);
    let branch = tape.conv2d(mid, block.expand, 1, Padding::Same)?;
    let shortcut = match block.projection {
        Some(p) => tape.conv2d(x, p, block.stride, Padding::Same)?,
        None => x,
    };
    if tape.shape(branch) != tape.shape(shortcut) {
        return Err(AffectError::dim(format!(
            "residual_block: branch {:?} vs shortcut {:?}",
            tape.shape(branch),
            tape.shape(shortcut)
        )));
    }
    tape.add(branch, shortcut)
}

/// Full forward over one frame already on the tape as `[3 x s x s]`.
/// Returns the `[1 x output_features]` projection.
pub fn forward_frame(
    tape: &mut Tape,
    frame: Var,
    vars: &VisualVars,
    config: &VisualNetConfig,
) -> Result<Var> {
    let shape = tape.shape(frame).to_vec();
    if shape != vec![3, config.input_size, config.input_size] {
        return Err(AffectError::dim(format!(
            "forward_frame: expected [3 x {0} x {0}], got {1:?}",
            config.input_size, shape
        )));
    }
    let stem = tape.conv2d(frame, vars.stem, config.stem_stride, Padding::Same)?;
    let stem = tape.relu(stem);
    let mut x = tape.max_pool2d(
        stem,
        config.stem_pool,
        config.stem_pool_stride,
        (config.stem_pool - 1) / 2,
    )?;
    for block in &vars.blocks {
        x = residual_block(tape, x, block)?;
        x = tape.relu(x); // rectify between blocks, not inside the sum
    }
    let pooled = tape.global_avg_pool2d(x)?;
    let projected = tape.matmul(pooled, vars.proj_weight)?;
    tape.add_row_bias(projected, vars.proj_bias)
}

/// Augmentation: bilinear resize to 110 x 110, random 96 x 96 crop, random
/// brightness offset in ±0.125, random saturation scale in [0.5, 1.5],
/// clamp to [0, 1]. Identity-parameter draws reduce to resize + center crop.
pub fn augment(frame: &Frame, rng: &mut Rng) -> Frame {
    let resized = bilinear_resize(frame, 110);
    let max_off = 110 - frame.size;
    let ox = rng.index(max_off + 1);
    let oy = rng.index(max_off + 1);
    let mut out = crop(&resized, ox, oy, frame.size);
    let brightness = rng.range(-0.125, 0.125);
    let saturation = rng.range(0.5, 1.5);
    color_jitter(&mut out, brightness, saturation);
    out
}

/// Deterministic augmentation path used in evaluation comparisons:
/// resize + center crop, no color change.
pub fn augment_identity(frame: &Frame) -> Frame {
    let resized = bilinear_resize(frame, 110);
    let off = (110 - frame.size) / 2;
    resized_center(&resized, off, frame.size)
}

fn resized_center(frame: &Frame, off: usize, size: usize) -> Frame {
    crop(frame, off, off, size)
}

fn bilinear_resize(frame: &Frame, new_size: usize) -> Frame {
    let (s, n) = (frame.size, new_size);
    let mut pixels = vec![0.0; 3 * n * n];
    let scale = s as f64 / n as f64;
    for c in 0..3 {
        let src = &frame.pixels[c * s * s..(c + 1) * s * s];
        let dst = &mut pixels[c * n * n..(c + 1) * n * n];
        for y in 0..n {
            let fy = ((y as f64 + 0.5) * scale - 0.5).clamp(0.0, (s - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(s - 1);
            let wy = fy - y0 as f64;
            for x in 0..n {
                let fx = ((x as f64 + 0.5) * scale - 0.5).clamp(0.0, (s - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(s - 1);
                let wx = fx - x0 as f64;
                let top = src[y0 * s + x0] * (1.0 - wx) + src[y0 * s + x1] * wx;
                let bottom = src[y1 * s + x0] * (1.0 - wx) + src[y1 * s + x1] * wx;
                dst[y * n + x] = top * (1.0 - wy) + bottom * wy;
            }
        }
    }
    Frame {
        size: n,
        pixels,
    }
}

fn crop(frame: &Frame, ox: usize, oy: usize, size: usize) -> Frame {
    let s = frame.size;
    let mut pixels = vec![0.0; 3 * size * size];
    for c in 0..3 {
        for y in 0..size {
            let src = &frame.pixels[c * s * s + (y + oy) * s + ox..][..size];
            pixels[c * size * size + y * size..c * size * size + (y + 1) * size]
                .copy_from_slice(src);
        }
    }
    Frame { size, pixels }
}

fn color_jitter(frame: &mut Frame, brightness: f64, saturation: f64) {
    let hw = frame.size * frame.size;
    for i in 0..hw {
        let r = frame.pixels[i];
        let g = frame.pixels[hw + i];
        let b = frame.pixels[2 * hw + i];
        let luma = 0.299 * r + 0.587 * g + 0.114 * b;
        for (c, v) in [r, g, b].into_iter().enumerate() {
            let saturated = luma + saturation * (v - luma);
            frame.pixels[c * hw + i] = (saturated + brightness).clamp(0.0, 1.0);
        }
    }
}
