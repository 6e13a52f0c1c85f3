//! ConvLSTM cell shared across branches. Gates use 3x3 kernels with padding
//! 1, so spatial dimensions are preserved.
//!
//! The candidate update has two variants. As printed, the candidate is
//! already gated by the input gate and the cell update gates it again:
//!
//! ```text
//! cand = i (x) tanh(Wxc*X + Whc*H + bc)
//! C    = f (x) C_prev + i (x) cand        // i applied twice
//! ```
//!
//! That double application is the default; `standard_candidate` switches to
//! the conventional single application (`cand = tanh(...)`).

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::ConvParam;
use crate::tensor::{Tape, Tensor};

/// Eight gate kernels and four biases, all `channels -> channels`, 3x3.
/// One parameter set serves every branch.
#[derive(Clone, Debug)]
pub struct ConvLstmParams {
    pub w_xi: Tensor,
    pub w_hi: Tensor,
    pub w_xf: Tensor,
    pub w_hf: Tensor,
    pub w_xo: Tensor,
    pub w_ho: Tensor,
    pub w_xc: Tensor,
    pub w_hc: Tensor,
    pub b_i: Tensor,
    pub b_f: Tensor,
    pub b_o: Tensor,
    pub b_c: Tensor,
}

impl ConvLstmParams {
    pub fn init(rng: &mut ChaCha8Rng, channels: usize) -> Self {
        let s = 1.0 / ((channels * 9) as f64).sqrt();
        let mut k = || Tensor::from_fn(&[channels, channels, 3, 3], |_| rng.gen_range(-s..s));
        let w_xi = k();
        let w_hi = k();
        let w_xf = k();
        let w_hf = k();
        let w_xo = k();
        let w_ho = k();
        let w_xc = k();
        let w_hc = k();
        ConvLstmParams {
            w_xi,
            w_hi,
            w_xf,
            w_hf,
            w_xo,
            w_ho,
            w_xc,
            w_hc,
            b_i: Tensor::zeros(&[channels]),
            // open forget gate at init, the usual LSTM trainability trick
            b_f: Tensor::full(&[channels], 1.0),
            b_o: Tensor::zeros(&[channels]),
            b_c: Tensor::zeros(&[channels]),
        }
    }

    pub fn zeros(channels: usize) -> Self {
        let k = || Tensor::zeros(&[channels, channels, 3, 3]);
        let b = || Tensor::zeros(&[channels]);
        ConvLstmParams {
            w_xi: k(),
            w_hi: k(),
            w_xf: k(),
            w_hf: k(),
            w_xo: k(),
            w_ho: k(),
            w_xc: k(),
            w_hc: k(),
            b_i: b(),
            b_f: b(),
            b_o: b(),
            b_c: b(),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        for (name, t) in [
            ("w_xi", &self.w_xi),
            ("w_hi", &self.w_hi),
            ("w_xf", &self.w_xf),
            ("w_hf", &self.w_hf),
            ("w_xo", &self.w_xo),
            ("w_ho", &self.w_ho),
            ("w_xc", &self.w_xc),
            ("w_hc", &self.w_hc),
            ("b_i", &self.b_i),
            ("b_f", &self.b_f),
            ("b_o", &self.b_o),
            ("b_c", &self.b_c),
        ] {
            out.push((format!("{prefix}.{name}"), t));
        }
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        for (name, t) in [
            ("w_xi", &mut self.w_xi),
            ("w_hi", &mut self.w_hi),
            ("w_xf", &mut self.w_xf),
            ("w_hf", &mut self.w_hf),
            ("w_xo", &mut self.w_xo),
            ("w_ho", &mut self.w_ho),
            ("w_xc", &mut self.w_xc),
            ("w_hc", &mut self.w_hc),
            ("b_i", &mut self.b_i),
            ("b_f", &mut self.b_f),
            ("b_o", &mut self.b_o),
            ("b_c", &mut self.b_c),
        ] {
            out.push((format!("{prefix}.{name}"), t));
        }
    }
}

/// Hidden and cell state of one branch, both `[1,C,h,w]`.
#[derive(Clone, Debug)]
pub struct ConvLstmState {
    pub hidden: Tensor,
    pub cell: Tensor,
}

fn gate_preact(
    tape: &mut Tape,
    x: &Tensor,
    h: &Tensor,
    w_x: &Tensor,
    w_h: &Tensor,
    bias: &Tensor,
) -> Result<Tensor> {
    let from_x = tape.conv2d(x, w_x, None, 1, 1)?;
    let from_h = tape.conv2d(h, w_h, Some(bias), 1, 1)?;
    tape.add(&from_x, &from_h)
}

/// Advance one branch by one step.
pub fn cell_step(
    tape: &mut Tape,
    params: &ConvLstmParams,
    x: &Tensor,
    prev: &ConvLstmState,
    standard_candidate: bool,
) -> Result<ConvLstmState> {
    if x.shape() != prev.hidden.shape() {
        return Err(Error::shape(format!(
            "cell_step: input {:?} vs state {:?}",
            x.shape(),
            prev.hidden.shape()
        )));
    }
    let h = &prev.hidden;
    let i_pre = gate_preact(tape, x, h, &params.w_xi, &params.w_hi, &params.b_i)?;
    let i = tape.sigmoid(&i_pre);
    let f_pre = gate_preact(tape, x, h, &params.w_xf, &params.w_hf, &params.b_f)?;
    let f = tape.sigmoid(&f_pre);
    let o_pre = gate_preact(tape, x, h, &params.w_xo, &params.w_ho, &params.b_o)?;
    let o = tape.sigmoid(&o_pre);

    let c_pre = gate_preact(tape, x, h, &params.w_xc, &params.w_hc, &params.b_c)?;
    let c_act = tape.tanh(&c_pre);
    let candidate = if standard_candidate {
        c_act
    } else {
        tape.mul(&i, &c_act)?
    };

    let keep = tape.mul(&f, &prev.cell)?;
    let write = tape.mul(&i, &candidate)?;
    let cell = tape.add(&keep, &write)?;
    let cell_act = tape.tanh(&cell);
    let hidden = tape.mul(&o, &cell_act)?;
    Ok(ConvLstmState { hidden, cell })
}

/// States start as a 1x1 projection of the bottleneck feature:
/// `H_0 = C_0 = proj(feature)`.
pub fn init_state(tape: &mut Tape, proj: &ConvParam, feature: &Tensor) -> Result<ConvLstmState> {
    let p = tape.conv2d(feature, &proj.weight, Some(&proj.bias), 1, 0)?;
    Ok(ConvLstmState {
        hidden: p.clone(),
        cell: p,
    })
}
