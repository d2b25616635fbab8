use rand::Rng;

use crate::autodiff::{Params, Tensor};
use crate::error::{Error, Result};

use super::init::fan_in_uniform;
use super::layers::concat_cols;

const GATES: [&str; 4] = ["input", "forget", "output", "cell"];

/// Single-layer LSTM cell weights. Each gate matrix is
/// `(hidden_dim, input_dim + hidden_dim)` and acts on `[x, h]`.
#[derive(Clone, Debug)]
pub struct LstmParams {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub w_input: Tensor,
    pub w_forget: Tensor,
    pub w_output: Tensor,
    pub w_cell: Tensor,
    pub b_input: Tensor,
    pub b_forget: Tensor,
    pub b_output: Tensor,
    pub b_cell: Tensor,
}

impl LstmParams {
    /// Adds freshly initialized `{prefix}.w_<gate>` / `{prefix}.b_<gate>` entries.
    pub fn init(
        params: &mut Params,
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let fan_in = input_dim + hidden_dim;
        for gate in GATES {
            params.insert(
                format!("{prefix}.w_{gate}"),
                fan_in_uniform(&[hidden_dim, fan_in], fan_in, 1.0, rng)?,
            );
            params.insert(
                format!("{prefix}.b_{gate}"),
                Tensor::param(vec![0.0; hidden_dim], &[hidden_dim])?,
            );
        }
        Ok(())
    }

    /// Typed view over the entries written by [`LstmParams::init`].
    pub fn from_params(params: &Params, prefix: &str) -> Result<Self> {
        let get = |kind: &str, gate: &str| params.get(&format!("{prefix}.{kind}_{gate}")).cloned();
        let w_input = get("w", "input")?;
        let [hidden_dim, fan_in] = *w_input.shape() else {
            return Err(Error::shape(
                "lstm",
                format!("gate matrix {:?}", w_input.shape()),
            ));
        };
        if fan_in <= hidden_dim {
            return Err(Error::shape(
                "lstm",
                format!("gate matrix {:?} leaves no input columns", w_input.shape()),
            ));
        }
        let p = Self {
            input_dim: fan_in - hidden_dim,
            hidden_dim,
            w_input,
            w_forget: get("w", "forget")?,
            w_output: get("w", "output")?,
            w_cell: get("w", "cell")?,
            b_input: get("b", "input")?,
            b_forget: get("b", "forget")?,
            b_output: get("b", "output")?,
            b_cell: get("b", "cell")?,
        };
        for w in [&p.w_forget, &p.w_output, &p.w_cell] {
            if w.shape() != [hidden_dim, fan_in] {
                return Err(Error::shape("lstm", format!("gate matrix {:?}", w.shape())));
            }
        }
        for b in [&p.b_input, &p.b_forget, &p.b_output, &p.b_cell] {
            if b.shape() != [hidden_dim] {
                return Err(Error::shape("lstm", format!("gate bias {:?}", b.shape())));
            }
        }
        Ok(p)
    }

    pub fn zero_state(&self, batch: usize) -> (Tensor, Tensor) {
        (
            Tensor::zeros(&[batch, self.hidden_dim]),
            Tensor::zeros(&[batch, self.hidden_dim]),
        )
    }
}

/// One LSTM recurrence on a batch `x: [N, D]` with state `(h, c): [N, H]`.
///
/// Gates are sigmoids, the candidate is a tanh, `c' = f⊙c + i⊙g` and
/// `h' = o⊙tanh(c')`.
pub fn lstm_step(
    x: &Tensor,
    state: (&Tensor, &Tensor),
    params: &LstmParams,
) -> Result<(Tensor, Tensor)> {
    let (h, c) = state;
    let n = match *x.shape() {
        [n, d] if d == params.input_dim => n,
        _ => {
            return Err(Error::shape(
                "lstm_step",
                format!("input {:?}, expected [N, {}]", x.shape(), params.input_dim),
            ))
        }
    };
    for s in [h, c] {
        if s.shape() != [n, params.hidden_dim] {
            return Err(Error::shape(
                "lstm_step",
                format!(
                    "state {:?}, expected [{n}, {}]",
                    s.shape(),
                    params.hidden_dim
                ),
            ));
        }
    }
    let z = concat_cols(&[x, h])?;
    let gate = |w: &Tensor, b: &Tensor| -> Result<Tensor> {
        let pre = z.matmul_t(w, false, true)?;
        pre.add(&b.broadcast_mid(n, 1, pre.shape())?)
    };
    let i = gate(&params.w_input, &params.b_input)?.sigmoid()?;
    let f = gate(&params.w_forget, &params.b_forget)?.sigmoid()?;
    let o = gate(&params.w_output, &params.b_output)?.sigmoid()?;
    let g = gate(&params.w_cell, &params.b_cell)?.tanh()?;
    let c_next = f.mul(c)?.add(&i.mul(&g)?)?;
    let h_next = o.mul(&c_next.tanh()?)?;
    Ok((h_next, c_next))
}
