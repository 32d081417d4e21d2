//! LSTM layers, the 2-layer stacks used over each feature stream, and the
//! per-cell activation traces consumed by the gate-analysis study.
//!
//! Vanilla LSTM: sigmoid input/forget/output gates, tanh candidate and
//! output squashing, no peepholes, no projection. Gate blocks are ordered
//! `[input, forget, candidate, output]` inside the fused weight matrices.

use crate::error::{AffectError, Result};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};

/// Parameters of one LSTM layer. Weight shapes follow the fused-gate
/// convention: `w_input [input_size x 4*hidden]`, `w_recurrent
/// [hidden x 4*hidden]`, `bias [4*hidden]`.
#[derive(Clone, Debug)]
pub struct LstmLayer {
    pub input_size: usize,
    pub hidden_size: usize,
    pub w_input: Tensor,
    pub w_recurrent: Tensor,
    pub bias: Tensor,
}

impl LstmLayer {
    /// Uniform init in ±1/sqrt(hidden); forget-gate bias starts at 1.0 so
    /// early training does not erase state.
    pub fn init(input_size: usize, hidden_size: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (hidden_size as f64).sqrt();
        let w_input = Tensor::uniform(vec![input_size, 4 * hidden_size], bound, rng);
        let w_recurrent = Tensor::uniform(vec![hidden_size, 4 * hidden_size], bound, rng);
        let mut bias_data = vec![0.0; 4 * hidden_size];
        for b in bias_data[hidden_size..2 * hidden_size].iter_mut() {
            *b = 1.0;
        }
        let bias = Tensor::new(vec![4 * hidden_size], bias_data).expect("bias shape");
        LstmLayer {
            input_size,
            hidden_size,
            w_input,
            w_recurrent,
            bias,
        }
    }

    pub fn zeros(input_size: usize, hidden_size: usize) -> Self {
        LstmLayer {
            input_size,
            hidden_size,
            w_input: Tensor::zeros(vec![input_size, 4 * hidden_size]),
            w_recurrent: Tensor::zeros(vec![hidden_size, 4 * hidden_size]),
            bias: Tensor::zeros(vec![4 * hidden_size]),
        }
    }

    pub fn vars(&self, tape: &mut Tape) -> LstmVars {
        LstmVars {
            w_input: tape.leaf(&self.w_input),
            w_recurrent: tape.leaf(&self.w_recurrent),
            bias: tape.leaf(&self.bias),
        }
    }
}

/// Tape handles for one layer's parameters.
#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    pub w_input: Var,
    pub w_recurrent: Var,
    pub bias: Var,
}

/// Carried (h, c) state, used to thread a sequence across chunk boundaries.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl LstmState {
    pub fn zero(hidden_size: usize) -> Self {
        LstmState {
            h: vec![0.0; hidden_size],
            c: vec![0.0; hidden_size],
        }
    }
}

/// Per-time-step record of hidden outputs and raw gate activations.
#[derive(Clone, Debug, Default)]
pub struct ActivationTrace {
    pub steps: usize,
    pub cells: usize,
    /// `[steps x cells]`, row-major
    pub hidden: Vec<f64>,
    /// `[steps x 4*cells]`, gate order input/forget/candidate/output
    pub gates: Vec<f64>,
}

impl ActivationTrace {
    /// Time series of one cell's hidden output.
    pub fn cell_series(&self, cell: usize) -> Vec<f64> {
        (0..self.steps)
            .map(|t| self.hidden[t * self.cells + cell])
            .collect()
    }

    /// CSV export: `time_s, cell_000, cell_001, ...`, one row per step at
    /// the given frame rate.
    pub fn to_csv(&self, frame_rate: usize) -> String {
        let mut out = String::from("time_s");
        for c in 0..self.cells {
            out.push_str(&format!(",cell_{c:03}"));
        }
        out.push('\n');
        for t in 0..self.steps {
            out.push_str(&crate::io::fmt_f64(t as f64 / frame_rate as f64));
            for c in 0..self.cells {
                out.push(',');
                out.push_str(&crate::io::fmt_f64(self.hidden[t * self.cells + c]));
            }
            out.push('\n');
        }
        out
    }
}

/// One LSTM layer over a `[T x D]` sequence. Returns the `[T x hidden]`
/// output matrix, the final carried state, and the activation trace.
pub fn lstm_forward(
    tape: &mut Tape,
    seq: Var,
    layer: &LstmVars,
    hidden_size: usize,
    initial: Option<&LstmState>,
) -> Result<(Var, LstmState, ActivationTrace)> {
    let shape = tape.shape(seq).to_vec();
    if shape.len() != 2 {
        return Err(AffectError::dim(format!(
            "lstm_forward: sequence must be [T x D], got {:?}",
            shape
        )));
    }
    let (steps, dim) = (shape[0], shape[1]);
    if steps == 0 {
        return Err(AffectError::dim("lstm_forward: empty sequence"));
    }
    let w_in_shape = tape.shape(layer.w_input).to_vec();
    if w_in_shape[0] != dim || w_in_shape[1] != 4 * hidden_size {
        return Err(AffectError::dim(format!(
            "lstm_forward: input weights {:?} incompatible with D={} H={}",
            w_in_shape, dim, hidden_size
        )));
    }

    let h = hidden_size;
    let init = initial.cloned().unwrap_or_else(|| LstmState::zero(h));
    let mut h_prev = tape.constant(vec![1, h], init.h.clone())?;
    let mut c_prev = tape.constant(vec![1, h], init.c.clone())?;

    let mut trace = ActivationTrace {
        steps,
        cells: h,
        hidden: Vec::with_capacity(steps * h),
        gates: Vec::with_capacity(steps * 4 * h),
    };
    let mut h_rows = Vec::with_capacity(steps);
    for t in 0..steps {
        let x_t = tape.slice_rows(seq, t, 1)?;
        let from_input = tape.matmul(x_t, layer.w_input)?;
        let from_hidden = tape.matmul(h_prev, layer.w_recurrent)?;
        let pre = tape.add(from_input, from_hidden)?;
        let pre = tape.add_row_bias(pre, layer.bias)?;

        let i_pre = tape.slice_cols(pre, 0, h)?;
        let f_pre = tape.slice_cols(pre, h, h)?;
        let g_pre = tape.slice_cols(pre, 2 * h, h)?;
        let o_pre = tape.slice_cols(pre, 3 * h, h)?;
        let i_gate = tape.sigmoid(i_pre);
        let f_gate = tape.sigmoid(f_pre);
        let g_cand = tape.tanh(g_pre);
        let o_gate = tape.sigmoid(o_pre);

        let keep = tape.mul(f_gate, c_prev)?;
        let write = tape.mul(i_gate, g_cand)?;
        let c_t = tape.add(keep, write)?;
        let c_squash = tape.tanh(c_t);
        let h_t = tape.mul(o_gate, c_squash)?;

        trace.hidden.extend_from_slice(tape.data(h_t));
        trace.gates.extend_from_slice(tape.data(i_gate));
        trace.gates.extend_from_slice(tape.data(f_gate));
        trace.gates.extend_from_slice(tape.data(g_cand));
        trace.gates.extend_from_slice(tape.data(o_gate));

        h_rows.push(h_t);
        h_prev = h_t;
        c_prev = c_t;
    }
    let outputs = tape.concat_rows(&h_rows)?;
    let final_state = LstmState {
        h: tape.data(h_prev).to_vec(),
        c: tape.data(c_prev).to_vec(),
    };
    Ok((outputs, final_state, trace))
}

/// Two stacked LSTM layers; layer 2 consumes layer 1's hidden sequence.
#[derive(Clone, Debug)]
pub struct LstmStack {
    pub layer1: LstmLayer,
    pub layer2: LstmLayer,
}

impl LstmStack {
    pub fn init(input_size: usize, hidden_size: usize, rng: &mut Rng) -> Self {
        LstmStack {
            layer1: LstmLayer::init(input_size, hidden_size, rng),
            layer2: LstmLayer::init(hidden_size, hidden_size, rng),
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.layer1.hidden_size
    }
}

/// Carried state for a 2-layer stack.
#[derive(Clone, Debug, PartialEq)]
pub struct StackState {
    pub layer1: LstmState,
    pub layer2: LstmState,
}

impl StackState {
    pub fn zero(hidden_size: usize) -> Self {
        StackState {
            layer1: LstmState::zero(hidden_size),
            layer2: LstmState::zero(hidden_size),
        }
    }
}

/// Traces from both layers of a stack.
#[derive(Clone, Debug, Default)]
pub struct StackTrace {
    pub layer1: ActivationTrace,
    pub layer2: ActivationTrace,
}

pub fn stack_forward(
    tape: &mut Tape,
    seq: Var,
    vars1: &LstmVars,
    vars2: &LstmVars,
    hidden_size: usize,
    initial: Option<&StackState>,
) -> Result<(Var, StackState, StackTrace)> {
    if let Some(init) = initial {
        if init.layer1.h.len() != hidden_size || init.layer2.h.len() != hidden_size {
            return Err(AffectError::dim(
                "stack_forward: initial state size mismatch",
            ));
        }
    }
    let (mid, s1, t1) = lstm_forward(tape, seq, vars1, hidden_size, initial.map(|s| &s.layer1))?;
    let (out, s2, t2) = lstm_forward(tape, mid, vars2, hidden_size, initial.map(|s| &s.layer2))?;
    Ok((
        out,
        StackState {
            layer1: s1,
            layer2: s2,
        },
        StackTrace {
            layer1: t1,
            layer2: t2,
        },
    ))
}

/// Linear map from hidden states to the two affect tracks, tanh-squashed
/// into (-1, 1) to match the annotation range.
#[derive(Clone, Debug)]
pub struct OutputHead {
    pub weight: Tensor, // [hidden x 2]
    pub bias: Tensor,   // [2]
}

impl OutputHead {
    pub fn init(hidden_size: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (hidden_size as f64).sqrt();
        OutputHead {
            weight: Tensor::uniform(vec![hidden_size, 2], bound, rng),
            bias: Tensor::zeros(vec![2]),
        }
    }

    pub fn vars(&self, tape: &mut Tape) -> HeadVars {
        HeadVars {
            weight: tape.leaf(&self.weight),
            bias: tape.leaf(&self.bias),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub weight: Var,
    pub bias: Var,
}

/// `[T x hidden] -> [T x 2]`, columns are (arousal, valence).
pub fn head_forward(tape: &mut Tape, hidden: Var, head: &HeadVars) -> Result<Var> {
    let lin = tape.matmul(hidden, head.weight)?;
    let lin = tape.add_row_bias(lin, head.bias)?;
    Ok(tape.tanh(lin))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check;

    fn run_layer(
        seq: &Tensor,
        layer: &LstmLayer,
        initial: Option<&LstmState>,
    ) -> (Vec<f64>, LstmState) {
        let mut tape = Tape::new();
        let s = tape.leaf(seq);
        let vars = layer.vars(&mut tape);
        let (out, state, _) =
            lstm_forward(&mut tape, s, &vars, layer.hidden_size, initial).unwrap();
        (tape.data(out).to_vec(), state)
    }

    #[test]
    fn zero_weights_give_zero_outputs() {
        let layer = LstmLayer::zeros(3, 4);
        let seq = Tensor::new(vec![5, 3], vec![0.7; 15]).unwrap();
        let (out, _) = run_layer(&seq, &layer, None);
        assert!(out.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_step_matches_hand_recurrence() {
        // Scalar gates, hand-evaluated.
        let mut layer = LstmLayer::zeros(1, 1);
        layer.w_input.set_data(vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        layer
            .w_recurrent
            .set_data(vec![0.5, 0.6, 0.7, 0.8])
            .unwrap();
        layer.bias.set_data(vec![0.01, 1.0, 0.02, 0.03]).unwrap();
        let x = 0.5;
        let seq = Tensor::new(vec![1, 1], vec![x]).unwrap();
        let (out, state) = run_layer(&seq, &layer, None);

        let sigma = |v: f64| 1.0 / (1.0 + (-v).exp());
        let i = sigma(x * 0.1 + 0.01);
        let g = (x * 0.3 + 0.02).tanh();
        let o = sigma(x * 0.4 + 0.03);
        let c = i * g; // c0 = 0, so the forget path vanishes
        let h = o * c.tanh();
        assert!((out[0] - h).abs() < 1e-12, "{} vs {h}", out[0]);
        assert!((state.c[0] - c).abs() < 1e-12);
    }

    #[test]
    fn hidden_outputs_tanh_bounded() {
        let mut rng = crate::rng::Rng::new(3);
        let layer = LstmLayer::init(4, 6, &mut rng);
        let data: Vec<f64> = (0..40).map(|_| rng.normal() * 3.0).collect();
        let seq = Tensor::new(vec![10, 4], data).unwrap();
        let (out, _) = run_layer(&seq, &layer, None);
        assert!(out.iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn truncation_threading_equals_unsplit_pass() {
        let mut rng = crate::rng::Rng::new(11);
        let layer = LstmLayer::init(3, 4, &mut rng);
        let data: Vec<f64> = (0..24).map(|_| rng.normal()).collect();
        let seq = Tensor::new(vec![8, 3], data.clone()).unwrap();
        let (full, _) = run_layer(&seq, &layer, None);

        let first = Tensor::new(vec![5, 3], data[..15].to_vec()).unwrap();
        let second = Tensor::new(vec![3, 3], data[15..].to_vec()).unwrap();
        let (head, mid_state) = run_layer(&first, &layer, None);
        let (tail, _) = run_layer(&second, &layer, Some(&mid_state));

        let stitched: Vec<f64> = head.into_iter().chain(tail).collect();
        for (a, b) in full.iter().zip(&stitched) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn stack_equals_manual_composition() {
        let mut rng = crate::rng::Rng::new(21);
        let stack = LstmStack::init(3, 4, &mut rng);
        let data: Vec<f64> = (0..18).map(|_| rng.normal()).collect();
        let seq = Tensor::new(vec![6, 3], data).unwrap();

        let mut tape = Tape::new();
        let s = tape.leaf(&seq);
        let v1 = stack.layer1.vars(&mut tape);
        let v2 = stack.layer2.vars(&mut tape);
        let (out, _, _) = stack_forward(&mut tape, s, &v1, &v2, 4, None).unwrap();
        let stacked = tape.data(out).to_vec();
        assert_eq!(tape.shape(out), &[6, 4]);

        let (mid, _) = run_layer(&seq, &stack.layer1, None);
        let mid_t = Tensor::new(vec![6, 4], mid).unwrap();
        let (manual, _) = run_layer(&mid_t, &stack.layer2, None);
        assert_eq!(stacked, manual);
    }

    #[test]
    fn bptt_gradient_matches_finite_differences() {
        let mut rng = crate::rng::Rng::new(31);
        let layer = LstmLayer::init(3, 4, &mut rng);
        let seq = Tensor::new(vec![5, 3], (0..15).map(|_| rng.normal()).collect()).unwrap();
        let inputs = [
            seq,
            layer.w_input.clone(),
            layer.w_recurrent.clone(),
            layer.bias.clone(),
        ];
        let err = check::gradient_check(
            &inputs,
            |tape, vars| {
                let lv = LstmVars {
                    w_input: vars[1],
                    w_recurrent: vars[2],
                    bias: vars[3],
                };
                let (out, _, _) = lstm_forward(tape, vars[0], &lv, 4, None)?;
                Ok(tape.sum(out))
            },
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "max rel error {err}");
    }

    #[test]
    fn head_bounded_and_differentiable() {
        let mut rng = crate::rng::Rng::new(41);
        let head = OutputHead::init(4, &mut rng);
        let hidden =
            Tensor::new(vec![4, 4], (0..16).map(|_| rng.normal() * 2.0).collect()).unwrap();

        let mut tape = Tape::new();
        let h = tape.leaf(&hidden);
        let hv = head.vars(&mut tape);
        let out = head_forward(&mut tape, h, &hv).unwrap();
        assert_eq!(tape.shape(out), &[4, 2]);
        assert!(tape.data(out).iter().all(|v| v.abs() < 1.0));

        let inputs = [hidden, head.weight.clone(), head.bias.clone()];
        let err = check::gradient_check(
            &inputs,
            |tape, vars| {
                let hv = HeadVars {
                    weight: vars[1],
                    bias: vars[2],
                };
                let out = head_forward(tape, vars[0], &hv)?;
                Ok(tape.sum(out))
            },
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "max rel error {err}");
    }

    #[test]
    fn trace_records_every_step() {
        let mut rng = crate::rng::Rng::new(51);
        let layer = LstmLayer::init(2, 3, &mut rng);
        let seq = Tensor::new(vec![7, 2], (0..14).map(|_| rng.normal()).collect()).unwrap();
        let mut tape = Tape::new();
        let s = tape.leaf(&seq);
        let vars = layer.vars(&mut tape);
        let (_, _, trace) = lstm_forward(&mut tape, s, &vars, 3, None).unwrap();
        assert_eq!(trace.steps, 7);
        assert_eq!(trace.cells, 3);
        assert_eq!(trace.hidden.len(), 21);
        assert_eq!(trace.gates.len(), 7 * 12);
        assert_eq!(trace.cell_series(1).len(), 7);
    }
}
