//! LSTM recurrence composed from tape primitives.
//!
//! Gate layout inside the `4H` axis is `[input, forget, output, cell]`.

use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Tape handles for one LSTM direction.
#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    /// `[F, 4H]`
    pub w_ih: Var,
    /// `[H, 4H]`
    pub w_hh: Var,
    /// `[4H]`
    pub bias: Var,
}

impl LstmVars {
    pub fn hidden(&self, tape: &Tape) -> usize {
        tape.shape(self.w_hh)[0]
    }
}

/// One step: returns `(h, c)`, each `[1, H]`. `x_proj` is the input
/// projection `x_t W_ih + b` for this step, `[1, 4H]`.
pub fn lstm_cell(tape: &mut Tape, x_proj: Var, h: Var, c: Var, w_hh: Var) -> Result<(Var, Var)> {
    let hidden = tape.shape(w_hh)[0];
    let rec = tape.matmul(h, w_hh)?;
    let z = tape.add(x_proj, rec)?;
    let sig_part = tape.slice(z, 1, 0, 3 * hidden)?;
    let gates = tape.sigmoid(sig_part)?;
    let cand_part = tape.slice(z, 1, 3 * hidden, 4 * hidden)?;
    let cand = tape.tanh(cand_part)?;
    let i = tape.slice(gates, 1, 0, hidden)?;
    let f = tape.slice(gates, 1, hidden, 2 * hidden)?;
    let o = tape.slice(gates, 1, 2 * hidden, 3 * hidden)?;
    let keep = tape.mul(f, c)?;
    let write = tape.mul(i, cand)?;
    let c_next = tape.add(keep, write)?;
    let squashed = tape.tanh(c_next)?;
    let h_next = tape.mul(o, squashed)?;
    Ok((h_next, c_next))
}

/// Run one direction over `x: [T, F]`, returning `[T, H]` in time order.
pub fn lstm_direction(tape: &mut Tape, x: Var, p: &LstmVars, reverse: bool) -> Result<Var> {
    let xs = tape.shape(x).to_vec();
    if xs.len() != 2 || xs[0] == 0 {
        return Err(Error::shape("lstm", format!("input {:?} must be [T >= 1, F]", xs)));
    }
    let steps = xs[0];
    let hidden = p.hidden(tape);
    if tape.shape(p.w_ih) != [xs[1], 4 * hidden] || tape.shape(p.w_hh) != [hidden, 4 * hidden] {
        return Err(Error::shape(
            "lstm",
            format!("input {:?} with w_ih {:?} w_hh {:?}", xs, tape.shape(p.w_ih), tape.shape(p.w_hh)),
        ));
    }
    let proj = tape.matmul(x, p.w_ih)?;
    let proj = tape.add_bias(proj, p.bias)?;
    let zero = super::Tensor::zeros([1, hidden]);
    let mut h = tape.constant(zero.clone());
    let mut c = tape.constant(zero);
    let mut outs = vec![h; steps];
    let order: Box<dyn Iterator<Item = usize>> = if reverse { Box::new((0..steps).rev()) } else { Box::new(0..steps) };
    for t in order {
        let xt = tape.slice(proj, 0, t, t + 1)?;
        (h, c) = lstm_cell(tape, xt, h, c, p.w_hh)?;
        outs[t] = h;
    }
    tape.concat(&outs, 0)
}

/// Bidirectional layer: `[T, F] -> [T, 2H]`, forward half first.
pub fn bilstm_layer(tape: &mut Tape, x: Var, forward: &LstmVars, backward: &LstmVars) -> Result<Var> {
    let f = lstm_direction(tape, x, forward, false)?;
    let b = lstm_direction(tape, x, backward, true)?;
    tape.concat(&[f, b], 1)
}
