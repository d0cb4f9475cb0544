//! LSTM sentence encoder: the sentence vector is the last hidden state.
//!
//! Gate blocks are laid out along the columns of every weight matrix in the
//! order input, forget, output, candidate, each `H` columns wide.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};
use crate::vocab::INIT_STD;

#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams {
    /// `d x 4H`
    pub w_input: Tensor,
    /// `H x 4H`
    pub w_recurrent: Tensor,
    /// `1 x 4H`
    pub bias: Tensor,
}

impl LstmParams {
    pub fn new(w_input: Tensor, w_recurrent: Tensor, bias: Tensor) -> Result<Self> {
        let h = w_recurrent.rows();
        let ok = w_recurrent.cols() == 4 * h
            && w_input.cols() == 4 * h
            && bias.rows() == 1
            && bias.cols() == 4 * h;
        if !ok {
            return Err(Error::Contract(format!(
                "inconsistent LSTM shapes: input {:?}, recurrent {:?}, bias {:?}",
                w_input.shape(),
                w_recurrent.shape(),
                bias.shape()
            )));
        }
        Ok(Self {
            w_input,
            w_recurrent,
            bias,
        })
    }

    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        Self {
            w_input: Tensor::zeros(&[input_dim, 4 * hidden]),
            w_recurrent: Tensor::zeros(&[hidden, 4 * hidden]),
            bias: Tensor::zeros(&[1, 4 * hidden]),
        }
    }

    /// All weights and biases from N(0, 0.1²).
    pub fn random<R: Rng + ?Sized>(input_dim: usize, hidden: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, INIT_STD).unwrap();
        let mut draw = |rows: usize, cols: usize| {
            let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
            Tensor::matrix(rows, cols, data).unwrap()
        };
        Self {
            w_input: draw(input_dim, 4 * hidden),
            w_recurrent: draw(hidden, 4 * hidden),
            bias: draw(1, 4 * hidden),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_input.rows()
    }

    pub fn hidden(&self) -> usize {
        self.w_recurrent.rows()
    }
}

/// LSTM parameters registered on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    pub w_input: Var,
    pub w_recurrent: Var,
    pub bias: Var,
    hidden: usize,
}

impl LstmVars {
    pub fn track(tape: &mut Tape, params: &LstmParams) -> Self {
        Self {
            w_input: tape.param(params.w_input.clone()),
            w_recurrent: tape.param(params.w_recurrent.clone()),
            bias: tape.param(params.bias.clone()),
            hidden: params.hidden(),
        }
    }

    pub fn frozen(tape: &mut Tape, params: &LstmParams) -> Self {
        Self {
            w_input: tape.constant(params.w_input.clone()),
            w_recurrent: tape.constant(params.w_recurrent.clone()),
            bias: tape.constant(params.bias.clone()),
            hidden: params.hidden(),
        }
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }
}

/// One recurrence step from an already-projected input row `x W_in + b`.
fn step_projected(tape: &mut Tape, projected: Var, h_prev: Var, c_prev: Var, p: &LstmVars) -> Result<(Var, Var)> {
    let h = p.hidden;
    let rec = tape.matmul(h_prev, p.w_recurrent)?;
    let pre = tape.add(projected, rec)?;
    let i_pre = tape.slice_cols(pre, 0, h)?;
    let f_pre = tape.slice_cols(pre, h, h)?;
    let o_pre = tape.slice_cols(pre, 2 * h, h)?;
    let g_pre = tape.slice_cols(pre, 3 * h, h)?;
    let i = tape.sigmoid(i_pre);
    let f = tape.sigmoid(f_pre);
    let o = tape.sigmoid(o_pre);
    let g = tape.tanh(g_pre);
    let keep = tape.mul(f, c_prev)?;
    let write = tape.mul(i, g)?;
    let c = tape.add(keep, write)?;
    let c_act = tape.tanh(c);
    let h_next = tape.mul(o, c_act)?;
    Ok((h_next, c))
}

fn check_input(tape: &Tape, x: Var, p: &LstmVars) -> Result<()> {
    let (tx, tw) = (tape.value(x), tape.value(p.w_input));
    if tx.cols() != tw.rows() {
        return Err(Error::Shape {
            op: "lstm input",
            left: tx.shape().to_vec(),
            right: tw.shape().to_vec(),
        });
    }
    Ok(())
}

/// `(h_n, c_n)` from word vector `w` (`1 x d`) and the previous state (`1 x H` each).
pub fn lstm_step(tape: &mut Tape, w: Var, h_prev: Var, c_prev: Var, p: &LstmVars) -> Result<(Var, Var)> {
    check_input(tape, w, p)?;
    for s in [h_prev, c_prev] {
        if tape.value(s).shape() != [1, p.hidden] {
            return Err(Error::Shape {
                op: "lstm state",
                left: tape.value(s).shape().to_vec(),
                right: vec![1, p.hidden],
            });
        }
    }
    let xw = tape.matmul(w, p.w_input)?;
    let projected = tape.add(xw, p.bias)?;
    step_projected(tape, projected, h_prev, c_prev, p)
}

/// Runs the recurrence from a zero state over `seq` and returns `h_N`.
pub fn encode(tape: &mut Tape, seq: &[Var], p: &LstmVars) -> Result<Var> {
    if seq.is_empty() {
        return Err(Error::Contract("cannot encode an empty sequence".into()));
    }
    let matrix = tape.stack_rows(seq)?;
    encode_matrix(tape, matrix, p)
}

/// [`encode`] over the rows of an `N x d` node; the input projection is
/// done for all tokens in one product.
pub fn encode_matrix(tape: &mut Tape, tokens: Var, p: &LstmVars) -> Result<Var> {
    check_input(tape, tokens, p)?;
    let n = tape.value(tokens).rows();
    let xw = tape.matmul(tokens, p.w_input)?;
    let projected = tape.add_row_bias(xw, p.bias)?;
    let mut h = tape.constant(Tensor::zeros(&[1, p.hidden]));
    let mut c = tape.constant(Tensor::zeros(&[1, p.hidden]));
    for t in 0..n {
        let row = tape.gather_rows(projected, &[t])?;
        (h, c) = step_projected(tape, row, h, c, p)?;
    }
    Ok(h)
}
