use rand::Rng;

use crate::error::Result;
use crate::tensor::{ParamStore, Tape, Var};

/// Weights of one GRU cell. Inputs are row vectors, so gates read
/// `σ([h ‖ x]·W + b)` with `W` of shape `[(hidden + input) × hidden]`.
#[derive(Debug, Clone, Copy)]
pub struct GruVars {
    pub w_r: Var,
    pub w_z: Var,
    pub w_h: Var,
    pub b_r: Var,
    pub b_z: Var,
    pub b_h: Var,
}

pub fn init_gru<R: Rng>(
    store: &mut ParamStore,
    prefix: &str,
    input: usize,
    hidden: usize,
    rng: &mut R,
) -> Result<()> {
    let bound = 1.0 / (hidden as f64).sqrt();
    for gate in ["r", "z", "h"] {
        store.insert_uniform(format!("{prefix}.w_{gate}"), hidden + input, hidden, bound, rng)?;
        store.insert_uniform(format!("{prefix}.b_{gate}"), 1, hidden, bound, rng)?;
    }
    Ok(())
}

impl GruVars {
    pub fn load(tape: &Tape, store: &ParamStore, prefix: &str) -> Result<Self> {
        let v = |n: &str| store.var(tape, &format!("{prefix}.{n}"));
        Ok(GruVars {
            w_r: v("w_r")?,
            w_z: v("w_z")?,
            w_h: v("w_h")?,
            b_r: v("b_r")?,
            b_z: v("b_z")?,
            b_h: v("b_h")?,
        })
    }
}

/// One GRU update for every row of `h_prev` / `x`:
///
/// ```text
/// r = σ([h ‖ x] W_r + b_r)
/// z = σ([h ‖ x] W_z + b_z)
/// h̃ = tanh([r⊙h ‖ x] W_h + b_h)
/// h' = (1 − z)⊙h + z⊙h̃
/// ```
pub fn gru_step(tape: &Tape, cell: &GruVars, h_prev: Var, x: Var) -> Result<Var> {
    let hx = tape.concat_cols(&[h_prev, x])?;
    let r = tape.sigmoid(tape.add_row(tape.matmul(hx, cell.w_r)?, cell.b_r)?);
    let z = tape.sigmoid(tape.add_row(tape.matmul(hx, cell.w_z)?, cell.b_z)?);
    let rh = tape.mul(r, h_prev)?;
    let rhx = tape.concat_cols(&[rh, x])?;
    let cand = tape.tanh(tape.add_row(tape.matmul(rhx, cell.w_h)?, cell.b_h)?);
    let keep = tape.mul(tape.one_minus(z), h_prev)?;
    let update = tape.mul(z, cand)?;
    tape.add(keep, update)
}
