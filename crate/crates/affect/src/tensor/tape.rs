//! Operation tape for reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value, the handles of
//! its inputs, and whatever it needs to replay itself backwards (pooling
//! argmaxes, dropout masks). [`Tape::backward`] walks the nodes in reverse
//! recording order — which is a topological order by construction — and
//! visits each exactly once, so two passes over identical tapes produce
//! bitwise-identical gradients.

use std::sync::Arc;

use crate::error::{AffectError, Result};
use crate::metrics;
use crate::rng::Rng;

use super::{fft, Padding, Tensor};

/// Handle to a value on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

struct Node {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Tanh(usize),
    Sigmoid(usize),
    Sum(usize),
    Mean(usize),
    Matmul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    AddRowBias {
        a: usize,
        bias: usize,
        rows: usize,
        cols: usize,
    },
    Conv1d {
        input: usize,
        kernels: usize,
        stride: usize,
        pad_left: usize,
        pad_right: usize,
        c_in: usize,
        t_in: usize,
        c_out: usize,
        k: usize,
    },
    Conv2d {
        input: usize,
        kernels: usize,
        stride: usize,
        pad: usize,
        c_in: usize,
        h: usize,
        w: usize,
        c_out: usize,
        kh: usize,
        kw: usize,
    },
    MaxPoolTime {
        input: usize,
        argmax: Vec<u32>,
    },
    MaxPoolChannels {
        input: usize,
        argmax: Vec<u32>,
    },
    MaxPool2d {
        input: usize,
        argmax: Vec<u32>,
    },
    GlobalAvgPool2d {
        input: usize,
        hw: usize,
    },
    Dropout {
        input: usize,
        mask: Arc<Vec<f64>>,
    },
    FrameSplit {
        input: usize,
        channels: usize,
        steps: usize,
    },
    SliceRows {
        input: usize,
        start: usize,
        cols: usize,
    },
    SliceCols {
        input: usize,
        start: usize,
        cols_in: usize,
    },
    StackRows {
        parts: Vec<usize>,
        cols: usize,
    },
    ConcatCols {
        a: usize,
        b: usize,
        ca: usize,
        cb: usize,
    },
    CccLoss {
        pred: usize,
        gold: Arc<Vec<f64>>,
    },
    MseLoss {
        pred: usize,
        gold: Arc<Vec<f64>>,
    },
}

/// Use the frequency-domain convolution path above this many multiply-adds.
const FFT_CONV_THRESHOLD: usize = 1 << 23;

pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            shape,
            data: Arc::new(data),
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Bring a tensor onto the tape as a leaf. Cheap: the data buffer is
    /// shared, not copied.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        self.nodes.push(Node {
            shape: tensor.shape().to_vec(),
            data: tensor.data_arc(),
            requires_grad: tensor.requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant leaf that never receives gradients.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(AffectError::dim(format!(
                "constant: shape {:?} wants {} elements, got {}",
                shape,
                expect,
                data.len()
            )));
        }
        Ok(self.push(shape, data, false, Op::Leaf))
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    /// Scalar value of a 1-element node.
    pub fn value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1);
        self.nodes[v.0].data[0]
    }

    /// Gradient of the last `backward` w.r.t. node `v`, if it was retained.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    // ---- elementwise and reduction operations ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise(a, b, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise(a, b, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise(a, b, "mul")
    }

    fn binary_elementwise(&mut self, a: Var, b: Var, which: &str) -> Result<Var> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(AffectError::dim(format!(
                "{which}: shapes {:?} and {:?} differ",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            )));
        }
        let (da, db) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        let data: Vec<f64> = match which {
            "add" => da.iter().zip(db.iter()).map(|(x, y)| x + y).collect(),
            "sub" => da.iter().zip(db.iter()).map(|(x, y)| x - y).collect(),
            _ => da.iter().zip(db.iter()).map(|(x, y)| x * y).collect(),
        };
        let op = match which {
            "add" => Op::Add(a.0, b.0),
            "sub" => Op::Sub(a.0, b.0),
            _ => Op::Mul(a.0, b.0),
        };
        let rg = self.needs(&[a.0, b.0]);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, rg, op))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x * factor).collect();
        let rg = self.nodes[a.0].requires_grad;
        self.push(
            self.nodes[a.0].shape.clone(),
            data,
            rg,
            Op::Scale(a.0, factor),
        )
    }

    /// Half-wave rectifier: elementwise max(0, x). The subgradient at 0 is 0.
    pub fn relu(&mut self, a: Var) -> Var {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x.max(0.0)).collect();
        let rg = self.nodes[a.0].requires_grad;
        self.push(self.nodes[a.0].shape.clone(), data, rg, Op::Relu(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x.tanh()).collect();
        let rg = self.nodes[a.0].requires_grad;
        self.push(self.nodes[a.0].shape.clone(), data, rg, Op::Tanh(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .map(|x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        let rg = self.nodes[a.0].requires_grad;
        self.push(self.nodes[a.0].shape.clone(), data, rg, Op::Sigmoid(a.0))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].data.iter().sum();
        let rg = self.nodes[a.0].requires_grad;
        self.push(vec![1], vec![s], rg, Op::Sum(a.0))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].data.len();
        let s: f64 = self.nodes[a.0].data.iter().sum();
        let rg = self.nodes[a.0].requires_grad;
        self.push(vec![1], vec![s / n as f64], rg, Op::Mean(a.0))
    }

    // ---- linear algebra ----

    /// `[m x k] @ [k x n] -> [m x n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(AffectError::dim(format!(
                "matmul: {:?} @ {:?}",
                sa, sb
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_raw(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n);
        let rg = self.needs(&[a.0, b.0]);
        Ok(self.push(
            vec![m, n],
            data,
            rg,
            Op::Matmul { a: a.0, b: b.0, m, k, n },
        ))
    }

    /// Broadcast-add a length-`cols` bias vector to every row of `[rows x cols]`.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let sa = &self.nodes[a.0].shape;
        let sb = &self.nodes[bias.0].shape;
        if sa.len() != 2 || sb.iter().product::<usize>() != sa[1] {
            return Err(AffectError::dim(format!(
                "add_row_bias: {:?} + {:?}",
                sa, sb
            )));
        }
        let (rows, cols) = (sa[0], sa[1]);
        let mut data = self.nodes[a.0].data.as_ref().clone();
        let b = &self.nodes[bias.0].data;
        for r in 0..rows {
            for c in 0..cols {
                data[r * cols + c] += b[c];
            }
        }
        let rg = self.needs(&[a.0, bias.0]);
        Ok(self.push(
            vec![rows, cols],
            data,
            rg,
            Op::AddRowBias {
                a: a.0,
                bias: bias.0,
                rows,
                cols,
            },
        ))
    }

    // ---- convolutions ----

    /// 1-d convolution (cross-correlation form) over `[c_in x t]` with
    /// kernels `[c_out x c_in x k]`.
    pub fn conv1d(&mut self, input: Var, kernels: Var, stride: usize, padding: Padding) -> Result<Var> {
        let si = self.nodes[input.0].shape.clone();
        let sk = self.nodes[kernels.0].shape.clone();
        if si.len() != 2 || sk.len() != 3 {
            return Err(AffectError::dim(format!(
                "conv1d: input {:?}, kernels {:?}",
                si, sk
            )));
        }
        if si[0] != sk[1] {
            return Err(AffectError::dim(format!(
                "conv1d: input has {} channels, kernels expect {}",
                si[0], sk[1]
            )));
        }
        if stride == 0 {
            return Err(AffectError::param("conv1d: stride must be >= 1"));
        }
        let (c_in, t_in) = (si[0], si[1]);
        let (c_out, k) = (sk[0], sk[2]);
        let (pl, pr) = padding.amounts(t_in, k, stride);
        if k > t_in + pl + pr {
            return Err(AffectError::dim(format!(
                "conv1d: kernel {} exceeds padded input {}",
                k,
                t_in + pl + pr
            )));
        }
        let t_out = (t_in + pl + pr - k) / stride + 1;
        let data = conv1d_forward_dispatch(
            &self.nodes[input.0].data,
            c_in,
            t_in,
            &self.nodes[kernels.0].data,
            c_out,
            k,
            stride,
            pl,
            pr,
        );
        let rg = self.needs(&[input.0, kernels.0]);
        Ok(self.push(
            vec![c_out, t_out],
            data,
            rg,
            Op::Conv1d {
                input: input.0,
                kernels: kernels.0,
                stride,
                pad_left: pl,
                pad_right: pr,
                c_in,
                t_in,
                c_out,
                k,
            },
        ))
    }

    /// 2-d convolution over `[c_in x h x w]` with kernels
    /// `[c_out x c_in x kh x kw]` and symmetric zero padding.
    pub fn conv2d(&mut self, input: Var, kernels: Var, stride: usize, padding: Padding) -> Result<Var> {
        let si = self.nodes[input.0].shape.clone();
        let sk = self.nodes[kernels.0].shape.clone();
        if si.len() != 3 || sk.len() != 4 {
            return Err(AffectError::dim(format!(
                "conv2d: input {:?}, kernels {:?}",
                si, sk
            )));
        }
        if si[0] != sk[1] {
            return Err(AffectError::dim(format!(
                "conv2d: input has {} channels, kernels expect {}",
                si[0], sk[1]
            )));
        }
        if stride == 0 {
            return Err(AffectError::param("conv2d: stride must be >= 1"));
        }
        let (c_in, h, w) = (si[0], si[1], si[2]);
        let (c_out, kh, kw) = (sk[0], sk[2], sk[3]);
        if kh != kw {
            return Err(AffectError::param("conv2d: only square kernels supported"));
        }
        // Symmetric (k-1)/2 padding with floor output arithmetic, the
        // residual-network convention; exactly size-preserving at stride 1.
        let pad = match padding {
            Padding::Valid => 0,
            Padding::Same => (kh - 1) / 2,
        };
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(AffectError::dim("conv2d: kernel exceeds padded input"));
        }
        let h_out = (h + 2 * pad - kh) / stride + 1;
        let w_out = (w + 2 * pad - kw) / stride + 1;
        let data = conv2d_forward(
            &self.nodes[input.0].data,
            c_in,
            h,
            w,
            &self.nodes[kernels.0].data,
            c_out,
            kh,
            kw,
            stride,
            pad,
        );
        let rg = self.needs(&[input.0, kernels.0]);
        Ok(self.push(
            vec![c_out, h_out, w_out],
            data,
            rg,
            Op::Conv2d {
                input: input.0,
                kernels: kernels.0,
                stride,
                pad,
                c_in,
                h,
                w,
                c_out,
                kh,
                kw,
            },
        ))
    }

    // ---- pooling ----

    /// Non-overlapping max pooling along time: `[c x t] -> [c x t/pool]`.
    /// Ties route the gradient to the first (lowest-index) maximum.
    pub fn max_pool_time(&mut self, input: Var, pool: usize) -> Result<Var> {
        let si = self.nodes[input.0].shape.clone();
        if si.len() != 2 {
            return Err(AffectError::dim(format!("max_pool_time: input {:?}", si)));
        }
        if pool == 0 {
            return Err(AffectError::param("max_pool_time: pool must be >= 1"));
        }
        let (c, t) = (si[0], si[1]);
        if t < pool {
            return Err(AffectError::param(format!(
                "max_pool_time: pool {} exceeds length {}",
                pool, t
            )));
        }
        let t_out = t / pool;
        let src = &self.nodes[input.0].data;
        let mut data = vec![0.0; c * t_out];
        let mut argmax = vec![0u32; c * t_out];
        for ci in 0..c {
            for to in 0..t_out {
                let base = ci * t + to * pool;
                let mut best = src[base];
                let mut best_idx = base;
                for off in 1..pool {
                    let v = src[base + off];
                    if v > best {
                        best = v;
                        best_idx = base + off;
                    }
                }
                data[ci * t_out + to] = best;
                argmax[ci * t_out + to] = best_idx as u32;
            }
        }
        let rg = self.nodes[input.0].requires_grad;
        Ok(self.push(
            vec![c, t_out],
            data,
            rg,
            Op::MaxPoolTime {
                input: input.0,
                argmax,
            },
        ))
    }

    /// Max over disjoint channel groups at each time step:
    /// `[c x t] -> [c/pool x t]`.
    pub fn max_pool_channels(&mut self, input: Var, pool: usize) -> Result<Var> {
        let si = self.nodes[input.0].shape.clone();
        if si.len() != 2 {
            return Err(AffectError::dim(format!("max_pool_channels: input {:?}", si)));
        }
        if pool == 0 {
            return Err(AffectError::param("max_pool_channels: pool must be >= 1"));
        }
        let (c, t) = (si[0], si[1]);
        if c % pool != 0 {
            return Err(AffectError::param(format!(
                "max_pool_channels: {} channels not divisible by pool {}",
                c, pool
            )));
        }
        let c_out = c / pool;
        let src = &self.nodes[input.0].data;
        let mut data = vec![0.0; c_out * t];
        let mut argmax = vec![0u32; c_out * t];
        for co in 0..c_out {
            for ti in 0..t {
                let mut best = src[(co * pool) * t + ti];
                let mut best_idx = (co * pool) * t + ti;
                for g in 1..pool {
                    let idx = (co * pool + g) * t + ti;
                    let v = src[idx];
                    if v > best {
                        best = v;
                        best_idx = idx;
                    }
                }
                data[co * t + ti] = best;
                argmax[co * t + ti] = best_idx as u32;
            }
        }
        let rg = self.nodes[input.0].requires_grad;
        Ok(self.push(
            vec![c_out, t],
            data,
            rg,
            Op::MaxPoolChannels {
                input: input.0,
                argmax,
            },
        ))
    }

    /// Square max pooling over `[c x h x w]` with symmetric zero padding.
    /// Padded cells never win the max.
    pub fn max_pool2d(&mut self, input: Var, pool: usize, stride: usize, pad: usize) -> Result<Var> {
        let si = self.nodes[input.0].shape.clone();
        if si.len() != 3 {
            return Err(AffectError::dim(format!("max_pool2d: input {:?}", si)));
        }
        if pool == 0 || stride == 0 {
            return Err(AffectError::param("max_pool2d: pool and stride must be >= 1"));
        }
        let (c, h, w) = (si[0], si[1], si[2]);
        let h_out = (h + 2 * pad - pool) / stride + 1;
        let w_out = (w + 2 * pad - pool) / stride + 1;
        let src = &self.nodes[input.0].data;
        let mut data = vec![0.0; c * h_out * w_out];
        let mut argmax = vec![0u32; c * h_out * w_out];
        for ci in 0..c {
            for yo in 0..h_out {
                for xo in 0..w_out {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for ky in 0..pool {
                        let y = (yo * stride + ky) as isize - pad as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        for kx in 0..pool {
                            let x = (xo * stride + kx) as isize - pad as isize;
                            if x < 0 || x >= w as isize {
                                continue;
                            }
                            let idx = ci * h * w + y as usize * w + x as usize;
                            if src[idx] > best {
                                best = src[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    data[ci * h_out * w_out + yo * w_out + xo] = best;
                    argmax[ci * h_out * w_out + yo * w_out + xo] = best_idx as u32;
                }
            }
        }
        let rg = self.nodes[input.0].requires_grad;
        Ok(self.push(
            vec![c, h_out, w_out],
            data,
            rg,
            Op::MaxPool2d {
                input: input.0,
                argmax,
            },
        ))
    }

    /// Spatial mean per channel: `[c x h x w] -> [1 x c]`.
    pub fn global_avg_pool2d(&mut self, input: Var) -> Result<Var> {
        let si = self.nodes[input.0].shape.clone();
        if si.len() != 3 {
            return Err(AffectError::dim(format!("global_avg_pool2d: input {:?}", si)));
        }
        let (c, hw) = (si[0], si[1] * si[2]);
        let src = &self.nodes[input.0].data;
        let data: Vec<f64> = (0..c)
            .map(|ci| src[ci * hw..(ci + 1) * hw].iter().sum::<f64>() / hw as f64)
            .collect();
        let rg = self.nodes[input.0].requires_grad;
        Ok(self.push(
            vec![1, c],
            data,
            rg,
            Op::GlobalAvgPool2d { input: input.0, hw },
        ))
    }

    // ---- regularization ----

    /// Inverted dropout: in training mode each element is zeroed with
    /// probability `p` and survivors are scaled by 1/(1-p); in evaluation
    /// mode (or at p = 0) this is the identity and records nothing.
    pub fn dropout(&mut self, input: Var, p: f64, training: bool, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(AffectError::param(format!(
                "dropout: p must be in [0, 1), got {p}"
            )));
        }
        if !training || p == 0.0 {
            return Ok(input);
        }
        let keep_scale = 1.0 / (1.0 - p);
        let src = &self.nodes[input.0].data;
        let mask: Vec<f64> = (0..src.len())
            .map(|_| if rng.uniform() < p { 0.0 } else { keep_scale })
            .collect();
        let data: Vec<f64> = src.iter().zip(&mask).map(|(x, m)| x * m).collect();
        let rg = self.nodes[input.0].requires_grad;
        Ok(self.push(
            self.nodes[input.0].shape.clone(),
            data,
            rg,
            Op::Dropout {
                input: input.0,
                mask: Arc::new(mask),
            },
        ))
    }

    // ---- shape surgery ----

    /// Split `[c x t]` into frames of `steps` time points:
    /// `[t/steps x c*steps]`, feature index = channel * steps + local step.
    pub fn frame_split(&mut self, input: Var, steps: usize) -> Result<Var> {
        let si = self.nodes[input.0].shape.clone();
        if si.len() != 2 {
            return Err(AffectError::dim(format!("frame_split: input {:?}", si)));
        }
        let (c, t) = (si[0], si[1]);
        if steps == 0 || t % steps != 0 {
            return Err(AffectError::dim(format!(
                "frame_split: {} steps do not divide length {}",
                steps, t
            )));
        }
        let frames = t / steps;
        let src = &self.nodes[input.0].data;
        let mut data = vec![0.0; frames * c * steps];
        for f in 0..frames {
            for ci in 0..c {
                for s in 0..steps {
                    data[f * c * steps + ci * steps + s] = src[ci * t + f * steps + s];
                }
            }
        }
        let rg = self.nodes[input.0].requires_grad;
        Ok(self.push(
            vec![frames, c * steps],
            data,
            rg,
            Op::FrameSplit {
                input: input.0,
                channels: c,
                steps,
            },
        ))
    }

    /// Contiguous row slice of a `[rows x cols]` matrix.
    pub fn slice_rows(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let si = self.nodes[input.0].shape.clone();
        if si.len() != 2 {
            return Err(AffectError::dim(format!("slice_rows: input {:?}", si)));
        }
        let (rows, cols) = (si[0], si[1]);
        if start + len > rows {
            return Err(AffectError::dim(format!(
                "slice_rows: {}..{} out of {} rows",
                start,
                start + len,
                rows
            )));
        }
        let data = self.nodes[input.0].data[start * cols..(start + len) * cols].to_vec();
        let rg = self.nodes[input.0].requires_grad;
        Ok(self.push(
            vec![len, cols],
            data,
            rg,
            Op::SliceRows {
                input: input.0,
                start,
                cols,
            },
        ))
    }

    /// Contiguous column slice of a `[rows x cols]` matrix.
    pub fn slice_cols(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let si = self.nodes[input.0].shape.clone();
        if si.len() != 2 {
            return Err(AffectError::dim(format!("slice_cols: input {:?}", si)));
        }
        let (rows, cols) = (si[0], si[1]);
        if start + len > cols {
            return Err(AffectError::dim(format!(
                "slice_cols: {}..{} out of {} cols",
                start,
                start + len,
                cols
            )));
        }
        let src = &self.nodes[input.0].data;
        let mut data = vec![0.0; rows * len];
        for r in 0..rows {
            data[r * len..(r + 1) * len]
                .copy_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let rg = self.nodes[input.0].requires_grad;
        Ok(self.push(
            vec![rows, len],
            data,
            rg,
            Op::SliceCols {
                input: input.0,
                start,
                cols_in: cols,
            },
        ))
    }

    /// Concatenate matrices (or row vectors) with equal column counts along
    /// the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(AffectError::dim("concat_rows: no parts"));
        }
        let cols = match self.nodes[parts[0].0].shape.as_slice() {
            [_, c] => *c,
            [c] => *c,
            other => {
                return Err(AffectError::dim(format!(
                    "concat_rows: part shape {:?}",
                    other
                )))
            }
        };
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let n = self.nodes[p.0].data.len();
            if cols == 0 || n % cols != 0 {
                return Err(AffectError::dim("concat_rows: ragged parts"));
            }
            rows += n / cols;
            data.extend_from_slice(&self.nodes[p.0].data);
        }
        let rg = self.needs(&parts.iter().map(|p| p.0).collect::<Vec<_>>());
        Ok(self.push(
            vec![rows, cols],
            data,
            rg,
            Op::StackRows {
                parts: parts.iter().map(|p| p.0).collect(),
                cols,
            },
        ))
    }

    /// Concatenate two matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.nodes[a.0].shape.clone(), self.nodes[b.0].shape.clone());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(AffectError::dim(format!(
                "concat_cols: {:?} vs {:?}",
                sa, sb
            )));
        }
        let (rows, ca, cb) = (sa[0], sa[1], sb[1]);
        let (da, db) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        let mut data = vec![0.0; rows * (ca + cb)];
        for r in 0..rows {
            data[r * (ca + cb)..r * (ca + cb) + ca].copy_from_slice(&da[r * ca..(r + 1) * ca]);
            data[r * (ca + cb) + ca..(r + 1) * (ca + cb)]
                .copy_from_slice(&db[r * cb..(r + 1) * cb]);
        }
        let rg = self.needs(&[a.0, b.0]);
        Ok(self.push(
            vec![rows, ca + cb],
            data,
            rg,
            Op::ConcatCols {
                a: a.0,
                b: b.0,
                ca,
                cb,
            },
        ))
    }

    // ---- losses ----

    /// Concordance-correlation loss `1 - rho_c` against a fixed gold track.
    /// The backward rule is the analytic gradient, not a composition.
    pub fn ccc_loss(&mut self, pred: Var, gold: &[f64]) -> Result<Var> {
        let n = self.nodes[pred.0].data.len();
        if n != gold.len() {
            return Err(AffectError::dim(format!(
                "ccc_loss: prediction has {} values, gold {}",
                n,
                gold.len()
            )));
        }
        let value = metrics::ccc_loss(&self.nodes[pred.0].data, gold)?;
        let rg = self.nodes[pred.0].requires_grad;
        Ok(self.push(
            vec![1],
            vec![value],
            rg,
            Op::CccLoss {
                pred: pred.0,
                gold: Arc::new(gold.to_vec()),
            },
        ))
    }

    /// Mean squared error against a fixed gold track.
    pub fn mse_loss(&mut self, pred: Var, gold: &[f64]) -> Result<Var> {
        let n = self.nodes[pred.0].data.len();
        if n != gold.len() {
            return Err(AffectError::dim(format!(
                "mse_loss: prediction has {} values, gold {}",
                n,
                gold.len()
            )));
        }
        let value = metrics::mse(&self.nodes[pred.0].data, gold)?;
        let rg = self.nodes[pred.0].requires_grad;
        Ok(self.push(
            vec![1],
            vec![value],
            rg,
            Op::MseLoss {
                pred: pred.0,
                gold: Arc::new(gold.to_vec()),
            },
        ))
    }

    // ---- backward ----

    /// Reverse pass from a scalar loss. Fills gradients for every
    /// `requires_grad` leaf reachable from `loss`; intermediate gradients
    /// are freed as soon as they have been consumed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(AffectError::Contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if self.grads[i].is_none() {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue; // retain leaf gradients
            }
            if !self.nodes[i].requires_grad {
                self.grads[i] = None;
                continue;
            }
            let g = self.grads[i].take().expect("grad present");
            self.step_backward(i, &g);
        }
        Ok(())
    }

    fn add_grad(&mut self, node: usize, delta: Vec<f64>) {
        if !self.nodes[node].requires_grad {
            return;
        }
        match &mut self.grads[node] {
            Some(acc) => {
                for (a, d) in acc.iter_mut().zip(&delta) {
                    *a += d;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    fn add_grad_at(&mut self, node: usize, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[node].requires_grad {
            return;
        }
        if self.grads[node].is_none() {
            self.grads[node] = Some(vec![0.0; self.nodes[node].data.len()]);
        }
        f(self.grads[node].as_mut().unwrap());
    }

    fn step_backward(&mut self, i: usize, g: &[f64]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.add_grad(a, g.to_vec());
                self.add_grad(b, g.to_vec());
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                self.add_grad(a, g.to_vec());
                self.add_grad(b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.nodes[b].data.iter())
                    .map(|(gi, bi)| gi * bi)
                    .collect();
                let db: Vec<f64> = g
                    .iter()
                    .zip(self.nodes[a].data.iter())
                    .map(|(gi, ai)| gi * ai)
                    .collect();
                self.add_grad(a, da);
                self.add_grad(b, db);
            }
            Op::Scale(a, factor) => {
                let (a, factor) = (*a, *factor);
                self.add_grad(a, g.iter().map(|x| x * factor).collect());
            }
            Op::Relu(a) => {
                let a = *a;
                let delta: Vec<f64> = g
                    .iter()
                    .zip(self.nodes[a].data.iter())
                    .map(|(gi, xi)| if *xi > 0.0 { *gi } else { 0.0 })
                    .collect();
                self.add_grad(a, delta);
            }
            Op::Tanh(a) => {
                let a = *a;
                let delta: Vec<f64> = g
                    .iter()
                    .zip(self.nodes[i].data.iter())
                    .map(|(gi, yi)| gi * (1.0 - yi * yi))
                    .collect();
                self.add_grad(a, delta);
            }
            Op::Sigmoid(a) => {
                let a = *a;
                let delta: Vec<f64> = g
                    .iter()
                    .zip(self.nodes[i].data.iter())
                    .map(|(gi, yi)| gi * yi * (1.0 - yi))
                    .collect();
                self.add_grad(a, delta);
            }
            Op::Sum(a) => {
                let a = *a;
                let n = self.nodes[a].data.len();
                self.add_grad(a, vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let a = *a;
                let n = self.nodes[a].data.len();
                self.add_grad(a, vec![g[0] / n as f64; n]);
            }
            Op::Matmul { a, b, m, k, n } => {
                let (a, b, m, k, n) = (*a, *b, *m, *k, *n);
                if self.nodes[a].requires_grad {
                    // dA = g @ B^T
                    let bd = &self.nodes[b].data;
                    let mut da = vec![0.0; m * k];
                    for row in 0..m {
                        for j in 0..n {
                            let gij = g[row * n + j];
                            if gij == 0.0 {
                                continue;
                            }
                            let brow = j;
                            for p in 0..k {
                                da[row * k + p] += gij * bd[p * n + brow];
                            }
                        }
                    }
                    self.add_grad(a, da);
                }
                if self.nodes[b].requires_grad {
                    // dB = A^T @ g
                    let ad = &self.nodes[a].data;
                    let mut db = vec![0.0; k * n];
                    for row in 0..m {
                        for p in 0..k {
                            let aip = ad[row * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[p * n + j] += aip * g[row * n + j];
                            }
                        }
                    }
                    self.add_grad(b, db);
                }
            }
            Op::AddRowBias { a, bias, rows, cols } => {
                let (a, bias, rows, cols) = (*a, *bias, *rows, *cols);
                self.add_grad(a, g.to_vec());
                if self.nodes[bias].requires_grad {
                    let mut db = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            db[c] += g[r * cols + c];
                        }
                    }
                    self.add_grad(bias, db);
                }
            }
            Op::Conv1d {
                input,
                kernels,
                stride,
                pad_left,
                pad_right,
                c_in,
                t_in,
                c_out,
                k,
            } => {
                let (input, kernels, stride, pl, pr, c_in, t_in, c_out, k) = (
                    *input, *kernels, *stride, *pad_left, *pad_right, *c_in, *t_in, *c_out, *k,
                );
                let t_out = (t_in + pl + pr - k) / stride + 1;
                if self.nodes[input].requires_grad {
                    let gi = conv1d_grad_input_dispatch(
                        g,
                        &self.nodes[kernels].data,
                        c_in,
                        t_in,
                        c_out,
                        k,
                        stride,
                        pl,
                        pr,
                        t_out,
                    );
                    self.add_grad(input, gi);
                }
                if self.nodes[kernels].requires_grad {
                    let gk = conv1d_grad_kernels_dispatch(
                        g,
                        &self.nodes[input].data,
                        c_in,
                        t_in,
                        c_out,
                        k,
                        stride,
                        pl,
                        pr,
                        t_out,
                    );
                    self.add_grad(kernels, gk);
                }
            }
            Op::Conv2d {
                input,
                kernels,
                stride,
                pad,
                c_in,
                h,
                w,
                c_out,
                kh,
                kw,
            } => {
                let (input, kernels, stride, pad, c_in, h, w, c_out, kh, kw) =
                    (*input, *kernels, *stride, *pad, *c_in, *h, *w, *c_out, *kh, *kw);
                let h_out = (h + 2 * pad - kh) / stride + 1;
                let w_out = (w + 2 * pad - kw) / stride + 1;
                if self.nodes[input].requires_grad {
                    let kd = self.nodes[kernels].data.clone();
                    let mut gi = vec![0.0; c_in * h * w];
                    for co in 0..c_out {
                        for yo in 0..h_out {
                            for xo in 0..w_out {
                                let gv = g[co * h_out * w_out + yo * w_out + xo];
                                if gv == 0.0 {
                                    continue;
                                }
                                for ci in 0..c_in {
                                    for ky in 0..kh {
                                        let y = (yo * stride + ky) as isize - pad as isize;
                                        if y < 0 || y >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..kw {
                                            let x = (xo * stride + kx) as isize - pad as isize;
                                            if x < 0 || x >= w as isize {
                                                continue;
                                            }
                                            gi[ci * h * w + y as usize * w + x as usize] += gv
                                                * kd[((co * c_in + ci) * kh + ky) * kw + kx];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    self.add_grad(input, gi);
                }
                if self.nodes[kernels].requires_grad {
                    let id = self.nodes[input].data.clone();
                    let mut gk = vec![0.0; c_out * c_in * kh * kw];
                    for co in 0..c_out {
                        for yo in 0..h_out {
                            for xo in 0..w_out {
                                let gv = g[co * h_out * w_out + yo * w_out + xo];
                                if gv == 0.0 {
                                    continue;
                                }
                                for ci in 0..c_in {
                                    for ky in 0..kh {
                                        let y = (yo * stride + ky) as isize - pad as isize;
                                        if y < 0 || y >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..kw {
                                            let x = (xo * stride + kx) as isize - pad as isize;
                                            if x < 0 || x >= w as isize {
                                                continue;
                                            }
                                            gk[((co * c_in + ci) * kh + ky) * kw + kx] += gv
                                                * id[ci * h * w + y as usize * w + x as usize];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    self.add_grad(kernels, gk);
                }
            }
            Op::MaxPoolTime { input, argmax }
            | Op::MaxPoolChannels { input, argmax }
            | Op::MaxPool2d { input, argmax } => {
                let input = *input;
                let pairs: Vec<(usize, f64)> = argmax
                    .iter()
                    .zip(g.iter())
                    .map(|(&idx, &gv)| (idx as usize, gv))
                    .collect();
                self.add_grad_at(input, |acc| {
                    for (idx, gv) in pairs {
                        acc[idx] += gv;
                    }
                });
            }
            Op::GlobalAvgPool2d { input, hw } => {
                let (input, hw) = (*input, *hw);
                let scale = 1.0 / hw as f64;
                let mut gi = vec![0.0; self.nodes[input].data.len()];
                for (ci, gv) in g.iter().enumerate() {
                    let base = ci * hw;
                    for slot in gi[base..base + hw].iter_mut() {
                        *slot = gv * scale;
                    }
                }
                self.add_grad(input, gi);
            }
            Op::Dropout { input, mask } => {
                let input = *input;
                let mask = Arc::clone(mask);
                let delta: Vec<f64> = g.iter().zip(mask.iter()).map(|(gi, m)| gi * m).collect();
                self.add_grad(input, delta);
            }
            Op::FrameSplit {
                input,
                channels,
                steps,
            } => {
                let (input, c, steps) = (*input, *channels, *steps);
                let t = self.nodes[input].data.len() / c;
                let frames = t / steps;
                let mut gi = vec![0.0; c * t];
                for f in 0..frames {
                    for ci in 0..c {
                        for s in 0..steps {
                            gi[ci * t + f * steps + s] += g[f * c * steps + ci * steps + s];
                        }
                    }
                }
                self.add_grad(input, gi);
            }
            Op::SliceRows { input, start, cols } => {
                let (input, start, cols) = (*input, *start, *cols);
                let g_owned = g.to_vec();
                self.add_grad_at(input, |acc| {
                    for (off, gv) in g_owned.iter().enumerate() {
                        acc[start * cols + off] += gv;
                    }
                });
            }
            Op::SliceCols {
                input,
                start,
                cols_in,
            } => {
                let (input, start, cols_in) = (*input, *start, *cols_in);
                let len = self.nodes[i].shape[1];
                let rows = self.nodes[i].shape[0];
                let g_owned = g.to_vec();
                self.add_grad_at(input, |acc| {
                    for r in 0..rows {
                        for c in 0..len {
                            acc[r * cols_in + start + c] += g_owned[r * len + c];
                        }
                    }
                });
            }
            Op::StackRows { parts, cols } => {
                let parts = parts.clone();
                let _ = cols;
                let mut offset = 0;
                for part in parts {
                    let n = self.nodes[part].data.len();
                    self.add_grad(part, g[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::ConcatCols { a, b, ca, cb } => {
                let (a, b, ca, cb) = (*a, *b, *ca, *cb);
                let rows = self.nodes[i].shape[0];
                let mut ga = vec![0.0; rows * ca];
                let mut gb = vec![0.0; rows * cb];
                for r in 0..rows {
                    ga[r * ca..(r + 1) * ca]
                        .copy_from_slice(&g[r * (ca + cb)..r * (ca + cb) + ca]);
                    gb[r * cb..(r + 1) * cb]
                        .copy_from_slice(&g[r * (ca + cb) + ca..(r + 1) * (ca + cb)]);
                }
                self.add_grad(a, ga);
                self.add_grad(b, gb);
            }
            Op::CccLoss { pred, gold } => {
                let pred = *pred;
                let gold = Arc::clone(gold);
                let mut delta = metrics::ccc_loss_grad(&self.nodes[pred].data, &gold)
                    .expect("ccc_loss_grad: forward already validated the pair");
                for d in delta.iter_mut() {
                    *d *= g[0];
                }
                self.add_grad(pred, delta);
            }
            Op::MseLoss { pred, gold } => {
                let pred = *pred;
                let gold = Arc::clone(gold);
                let n = gold.len() as f64;
                let delta: Vec<f64> = self.nodes[pred]
                    .data
                    .iter()
                    .zip(gold.iter())
                    .map(|(p, y)| g[0] * 2.0 * (p - y) / n)
                    .collect();
                self.add_grad(pred, delta);
            }
        }
    }
}

// ---- raw kernels ----

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
    c
}

fn pad_channels(input: &[f64], c: usize, t: usize, pl: usize, pr: usize) -> Vec<f64> {
    let tp = t + pl + pr;
    let mut padded = vec![0.0; c * tp];
    for ci in 0..c {
        padded[ci * tp + pl..ci * tp + pl + t].copy_from_slice(&input[ci * t..(ci + 1) * t]);
    }
    padded
}

#[allow(clippy::too_many_arguments)]
fn conv1d_forward_dispatch(
    input: &[f64],
    c_in: usize,
    t_in: usize,
    kernels: &[f64],
    c_out: usize,
    k: usize,
    stride: usize,
    pl: usize,
    pr: usize,
) -> Vec<f64> {
    let tp = t_in + pl + pr;
    let t_out = (tp - k) / stride + 1;
    let padded = pad_channels(input, c_in, t_in, pl, pr);
    if stride == 1 && k * tp >= FFT_CONV_THRESHOLD {
        return fft::conv1d_forward(&padded, c_in, tp, kernels, c_out, k);
    }
    let mut out = vec![0.0; c_out * t_out];
    for co in 0..c_out {
        for ci in 0..c_in {
            let krow = &kernels[(co * c_in + ci) * k..(co * c_in + ci + 1) * k];
            let irow = &padded[ci * tp..(ci + 1) * tp];
            for t in 0..t_out {
                let win = &irow[t * stride..t * stride + k];
                let mut acc = 0.0;
                for (kv, iv) in krow.iter().zip(win) {
                    acc += kv * iv;
                }
                out[co * t_out + t] += acc;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv1d_grad_input_dispatch(
    g_out: &[f64],
    kernels: &[f64],
    c_in: usize,
    t_in: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pl: usize,
    pr: usize,
    t_out: usize,
) -> Vec<f64> {
    let tp = t_in + pl + pr;
    let g_pad = if stride == 1 && k * tp >= FFT_CONV_THRESHOLD {
        fft::conv1d_grad_input(g_out, c_out, t_out, kernels, c_in, k)
    } else {
        let mut g_pad = vec![0.0; c_in * tp];
        for co in 0..c_out {
            for ci in 0..c_in {
                let krow = &kernels[(co * c_in + ci) * k..(co * c_in + ci + 1) * k];
                let grow = &g_out[co * t_out..(co + 1) * t_out];
                let dst = &mut g_pad[ci * tp..(ci + 1) * tp];
                for (t, gv) in grow.iter().enumerate() {
                    if *gv == 0.0 {
                        continue;
                    }
                    let base = t * stride;
                    for (m, kv) in krow.iter().enumerate() {
                        dst[base + m] += gv * kv;
                    }
                }
            }
        }
        g_pad
    };
    // strip the padding margins
    let mut gi = vec![0.0; c_in * t_in];
    for ci in 0..c_in {
        gi[ci * t_in..(ci + 1) * t_in]
            .copy_from_slice(&g_pad[ci * tp + pl..ci * tp + pl + t_in]);
    }
    gi
}

#[allow(clippy::too_many_arguments)]
fn conv1d_grad_kernels_dispatch(
    g_out: &[f64],
    input: &[f64],
    c_in: usize,
    t_in: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pl: usize,
    pr: usize,
    t_out: usize,
) -> Vec<f64> {
    let tp = t_in + pl + pr;
    let padded = pad_channels(input, c_in, t_in, pl, pr);
    if stride == 1 && k * tp >= FFT_CONV_THRESHOLD {
        return fft::conv1d_grad_kernels(&padded, c_in, tp, g_out, c_out, t_out);
    }
    let mut gk = vec![0.0; c_out * c_in * k];
    for co in 0..c_out {
        for ci in 0..c_in {
            let dst = &mut gk[(co * c_in + ci) * k..(co * c_in + ci + 1) * k];
            let irow = &padded[ci * tp..(ci + 1) * tp];
            let grow = &g_out[co * t_out..(co + 1) * t_out];
            for (t, gv) in grow.iter().enumerate() {
                if *gv == 0.0 {
                    continue;
                }
                let win = &irow[t * stride..t * stride + k];
                for (dk, iv) in dst.iter_mut().zip(win) {
                    *dk += gv * iv;
                }
            }
        }
    }
    gk
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward(
    input: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    kernels: &[f64],
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut padded = vec![0.0; c_in * hp * wp];
    for ci in 0..c_in {
        for y in 0..h {
            let src = &input[ci * h * w + y * w..ci * h * w + (y + 1) * w];
            let dst_base = ci * hp * wp + (y + pad) * wp + pad;
            padded[dst_base..dst_base + w].copy_from_slice(src);
        }
    }
    let h_out = (hp - kh) / stride + 1;
    let w_out = (wp - kw) / stride + 1;
    let mut out = vec![0.0; c_out * h_out * w_out];
    for co in 0..c_out {
        for ci in 0..c_in {
            let kbase = (co * c_in + ci) * kh * kw;
            for yo in 0..h_out {
                for xo in 0..w_out {
                    let mut acc = 0.0;
                    for ky in 0..kh {
                        let irow =
                            &padded[ci * hp * wp + (yo * stride + ky) * wp + xo * stride..];
                        let krow = &kernels[kbase + ky * kw..kbase + (ky + 1) * kw];
                        for (kv, iv) in krow.iter().zip(irow) {
                            acc += kv * iv;
                        }
                    }
                    out[co * h_out * w_out + yo * w_out + xo] += acc;
                }
            }
        }
    }
    out
}
