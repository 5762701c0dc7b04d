//! Pooling-based bag classifiers sharing the graph model's input projection
//! and classifier head: mean pooling, max pooling and gated attention.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{self, Architecture, Mode, ModelConfig, Readout, INPUT_B, INPUT_W};
use crate::params::{Bound, ParamStore};
use crate::real::Real;
use crate::rng::Rng;

pub const ATTN_V_W: &str = "attn_v.weight";
pub const ATTN_V_B: &str = "attn_v.bias";
pub const ATTN_U_W: &str = "attn_u.weight";
pub const ATTN_U_B: &str = "attn_u.bias";
pub const ATTN_W: &str = "attn_w.weight";

pub fn init_baseline_params<T: Real>(
    config: &ModelConfig,
    rng: &mut Rng,
) -> Result<ParamStore<T>> {
    let (d_in, d) = (config.d_in, config.d_model);
    let mut p = ParamStore::new();
    p.insert_weight(INPUT_W, d_in, d, rng)?;
    p.insert_bias(INPUT_B, d)?;
    if config.arch == Architecture::GatedAttention {
        let hid = config.attn_hidden;
        p.insert_weight(ATTN_V_W, d, hid, rng)?;
        p.insert_bias(ATTN_V_B, hid)?;
        p.insert_weight(ATTN_U_W, d, hid, rng)?;
        p.insert_bias(ATTN_U_B, hid)?;
        p.insert_weight(ATTN_W, hid, 1, rng)?;
    }
    model::insert_classifier(&mut p, config, rng)?;
    Ok(p)
}

/// Instance attention `softmax_i(w·(tanh(V e_i) ⊙ sigmoid(U e_i)))` as a
/// `1×n` row.
pub fn gated_attention_weights<T: Real>(tape: &mut Tape<T>, p: &Bound, e: Var) -> Result<Var> {
    let v = tape.matmul(e, p.get(ATTN_V_W)?)?;
    let v = tape.add_row_broadcast(v, p.get(ATTN_V_B)?)?;
    let v = tape.tanh(v)?;
    let u = tape.matmul(e, p.get(ATTN_U_W)?)?;
    let u = tape.add_row_broadcast(u, p.get(ATTN_U_B)?)?;
    let u = tape.sigmoid(u)?;
    let gated = tape.hadamard(v, u)?;
    let scores = tape.matmul(gated, p.get(ATTN_W)?)?;
    let scores = tape.transpose(scores)?;
    tape.row_softmax(scores)
}

pub fn baseline_forward<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound,
    config: &ModelConfig,
    kind: Architecture,
    x: Var,
    mode: Mode,
    rng: &mut Rng,
) -> Result<Var> {
    if tape.value(x).rows() == 0 {
        return Err(Error::Input("empty bag".into()));
    }
    let e = model::embed(tape, p, x)?;
    let e = tape.dropout(e, config.dropout_p, mode == Mode::Train, rng)?;
    let pooled = match kind {
        Architecture::MeanPool => model::pool(tape, e, Readout::Mean)?,
        Architecture::MaxPool => model::pool(tape, e, Readout::Max)?,
        Architecture::GatedAttention => {
            let a = gated_attention_weights(tape, p, e)?;
            tape.matmul(a, e)?
        }
        Architecture::Wikg => {
            return Err(Error::Usage("the graph model is not a baseline".into()));
        }
    };
    model::classify(tape, p, pooled)
}
