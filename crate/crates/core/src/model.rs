//! Knowledge-aware attention over the bag graph, node update, readout and
//! classifier head.
//!
//! For every node `i` and neighbour slot `j` (neighbour `n = N(i)[j]`):
//!
//! ```text
//! u[i][j]  = t_n · tanh(h_i + r_ij)
//! pi[i]    = softmax_j(u[i])
//! h_nbr[i] = Σ_j pi[i][j] · t_n
//! h_i'     = leaky(W1 (h_i + h_nbr[i]) + b1) + leaky(W2 (h_i ⊙ h_nbr[i]) + b2)
//! ```
//!
//! The updated heads pass through dropout, are pooled into a single bag
//! vector and mapped to class logits.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::baselines;
use crate::error::{Error, Result};
use crate::graph::{self, EdgePolicy, EdgeVariant, GraphOnTape};
use crate::params::{Bound, ParamStore};
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const INPUT_W: &str = "input_proj.weight";
pub const INPUT_B: &str = "input_proj.bias";
pub const HEAD_W: &str = "head.weight";
pub const TAIL_W: &str = "tail.weight";
pub const W1: &str = "w1.weight";
pub const B1: &str = "w1.bias";
pub const W2: &str = "w2.weight";
pub const B2: &str = "w2.bias";
pub const CLS_W: &str = "classifier.weight";
pub const CLS_B: &str = "classifier.bias";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Architecture {
    #[serde(rename = "wikg")]
    Wikg,
    #[serde(rename = "mean")]
    MeanPool,
    #[serde(rename = "max")]
    MaxPool,
    /// Gated attention pooling.
    #[serde(rename = "abmil")]
    GatedAttention,
}

impl Architecture {
    pub fn name(self) -> &'static str {
        match self {
            Architecture::Wikg => "wikg",
            Architecture::MeanPool => "mean",
            Architecture::MaxPool => "max",
            Architecture::GatedAttention => "abmil",
        }
    }

    pub fn is_graph(self) -> bool {
        self == Architecture::Wikg
    }
}

impl std::str::FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wikg" => Ok(Architecture::Wikg),
            "mean" => Ok(Architecture::MeanPool),
            "max" => Ok(Architecture::MaxPool),
            "abmil" => Ok(Architecture::GatedAttention),
            other => Err(Error::param(format!("unknown model {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Readout {
    Mean,
    Max,
}

impl std::str::FromStr for Readout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Readout::Mean),
            "max" => Ok(Readout::Max),
            other => Err(Error::param(format!("unknown readout {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Architecture,
    pub d_in: usize,
    pub d_model: usize,
    pub n_classes: usize,
    pub k: usize,
    pub policy: EdgeVariant,
    pub leaky_slope: f64,
    pub readout: Readout,
    pub dropout_p: f64,
    /// Forbid self-edges in the bag graph.
    pub exclude_self: bool,
    /// Use `k = min(k, n)` on small bags instead of failing.
    pub clamp_k: bool,
    /// Hidden width of the gated-attention scorer.
    pub attn_hidden: usize,
    /// Start the classifier at zero (uniform predictions).
    pub zero_init_classifier: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            arch: Architecture::Wikg,
            d_in: 384,
            d_model: 512,
            n_classes: 2,
            k: 6,
            policy: EdgeVariant::Wikg,
            leaky_slope: 0.2,
            readout: Readout::Mean,
            dropout_p: 0.3,
            exclude_self: false,
            clamp_k: false,
            attn_hidden: 128,
            zero_init_classifier: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d_model == 0 || self.n_classes < 2 {
            return Err(Error::param(
                "model needs positive dimensions and at least two classes",
            ));
        }
        if self.k == 0 {
            return Err(Error::param("k must be at least 1"));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::param("leaky slope must lie in (0,1)"));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::param("dropout must lie in [0,1)"));
        }
        Ok(())
    }

    /// Edge policy for a bag of `n` instances after optional clamping.
    pub fn policy_for(&self, n: usize) -> Result<EdgePolicy> {
        let avail = if self.exclude_self { n.saturating_sub(1) } else { n };
        let k = if self.clamp_k { self.k.min(avail) } else { self.k };
        if k == 0 || k > avail {
            return Err(Error::param(format!(
                "bag of {n} instances cannot supply k = {} neighbours",
                self.k
            )));
        }
        Ok(EdgePolicy {
            variant: self.policy,
            k,
            exclude_self: self.exclude_self,
        })
    }
}

/// Per-node attention quantities on the tape.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    /// `n×k` triplet scores.
    pub u: Var,
    /// `n×k` attention weights.
    pub pi: Var,
    /// `n×D` aggregated neighbour tails.
    pub h_nbr: Var,
    /// `n×D` updated heads (before dropout).
    pub h_new: Var,
}

/// Value snapshot of [`AttentionVars`].
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace<T> {
    pub u: Tensor<T>,
    pub pi: Tensor<T>,
    pub h_nbr: Tensor<T>,
    pub h_new: Tensor<T>,
}

impl AttentionVars {
    pub fn materialize<T: Real>(&self, tape: &Tape<T>) -> AttentionTrace<T> {
        AttentionTrace {
            u: tape.value(self.u).clone(),
            pi: tape.value(self.pi).clone(),
            h_nbr: tape.value(self.h_nbr).clone(),
            h_new: tape.value(self.h_new).clone(),
        }
    }
}

/// Triplet scores, their per-node softmax, and the attention-weighted sum of
/// neighbour tails. Returns `(u, pi, h_nbr)`.
pub fn knowledge_attention<T: Real>(
    tape: &mut Tape<T>,
    g: &GraphOnTape,
) -> Result<(Var, Var, Var)> {
    let (n, k) = (g.n, g.k);
    let mixed = tape.add(g.repeated_heads, g.edge_emb)?;
    let act = tape.tanh(mixed)?;
    let prod = tape.hadamard(g.gathered_tails, act)?;
    let u_col = tape.row_sum(prod)?;
    let u = tape.reshape(u_col, &[n, k])?;
    let pi = tape.row_softmax(u)?;
    let pi_col = tape.reshape(pi, &[n * k, 1])?;
    let weighted = tape.mul_col_broadcast(g.gathered_tails, pi_col)?;
    let h_nbr = tape.group_sum_rows(weighted, k)?;
    Ok((u, pi, h_nbr))
}

/// Additive and multiplicative fusion of heads with their neighbourhood.
#[allow(clippy::too_many_arguments)]
pub fn dual_interaction<T: Real>(
    tape: &mut Tape<T>,
    h: Var,
    h_nbr: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
    slope: f64,
) -> Result<Var> {
    if tape.value(h).shape() != tape.value(h_nbr).shape() {
        return Err(Error::dim("heads and neighbourhood aggregates differ in shape"));
    }
    let slope = T::lit(slope);
    let sum = tape.add(h, h_nbr)?;
    let lin1 = tape.matmul(sum, w1)?;
    let lin1 = tape.add_row_broadcast(lin1, b1)?;
    let a1 = tape.leaky_relu(lin1, slope)?;
    let prod = tape.hadamard(h, h_nbr)?;
    let lin2 = tape.matmul(prod, w2)?;
    let lin2 = tape.add_row_broadcast(lin2, b2)?;
    let a2 = tape.leaky_relu(lin2, slope)?;
    tape.add(a1, a2)
}

/// Input projection shared by every architecture.
pub(crate) fn embed<T: Real>(tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
    let e = tape.matmul(x, p.get(INPUT_W)?)?;
    tape.add_row_broadcast(e, p.get(INPUT_B)?)
}

pub(crate) fn classify<T: Real>(tape: &mut Tape<T>, p: &Bound, pooled: Var) -> Result<Var> {
    let z = tape.matmul(pooled, p.get(CLS_W)?)?;
    tape.add_row_broadcast(z, p.get(CLS_B)?)
}

pub(crate) fn pool<T: Real>(tape: &mut Tape<T>, x: Var, readout: Readout) -> Result<Var> {
    match readout {
        Readout::Mean => tape.reduce_mean_rows(x),
        Readout::Max => tape.reduce_max_rows(x),
    }
}

/// Graph-model parameters for `config`.
pub fn init_wikg_params<T: Real>(config: &ModelConfig, rng: &mut Rng) -> Result<ParamStore<T>> {
    let (d_in, d) = (config.d_in, config.d_model);
    let mut p = ParamStore::new();
    p.insert_weight(INPUT_W, d_in, d, rng)?;
    p.insert_bias(INPUT_B, d)?;
    p.insert_weight(HEAD_W, d, d, rng)?;
    p.insert_weight(TAIL_W, d, d, rng)?;
    p.insert_weight(W1, d, d, rng)?;
    p.insert_bias(B1, d)?;
    p.insert_weight(W2, d, d, rng)?;
    p.insert_bias(B2, d)?;
    insert_classifier(&mut p, config, rng)?;
    Ok(p)
}

pub(crate) fn insert_classifier<T: Real>(
    p: &mut ParamStore<T>,
    config: &ModelConfig,
    rng: &mut Rng,
) -> Result<()> {
    if config.zero_init_classifier {
        p.insert(CLS_W, Tensor::zeros(&[config.d_model, config.n_classes]))?;
    } else {
        p.insert_weight(CLS_W, config.d_model, config.n_classes, rng)?;
    }
    p.insert_bias(CLS_B, config.n_classes)
}

/// Outputs of one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    /// `1×C` class logits.
    pub logits: Var,
    pub graph: Option<GraphOnTape>,
    pub attention: Option<AttentionVars>,
}

/// Graph-model forward pass over one bag.
///
/// `x` holds the bag's instance features on the tape and `raw` the same
/// values off-tape (the k-NN policies select neighbours from them).
pub fn forward_bag<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound,
    config: &ModelConfig,
    x: Var,
    raw: &Tensor<T>,
    mode: Mode,
    rng: &mut Rng,
) -> Result<Forward> {
    let n = tape.value(x).rows();
    let policy = config.policy_for(n)?;
    let e = embed(tape, p, x)?;
    let (heads, tails) = graph::project_head_tail(tape, e, p.get(HEAD_W)?, p.get(TAIL_W)?)?;
    let g = graph::build_graph(tape, raw, heads, tails, &policy)?;
    let (u, pi, h_nbr) = knowledge_attention(tape, &g)?;
    let h_new = dual_interaction(
        tape,
        heads,
        h_nbr,
        p.get(W1)?,
        p.get(B1)?,
        p.get(W2)?,
        p.get(B2)?,
        config.leaky_slope,
    )?;
    let dropped = tape.dropout(h_new, config.dropout_p, mode == Mode::Train, rng)?;
    let pooled = pool(tape, dropped, config.readout)?;
    let logits = classify(tape, p, pooled)?;
    Ok(Forward {
        logits,
        graph: Some(g),
        attention: Some(AttentionVars { u, pi, h_nbr, h_new }),
    })
}

/// A bag classifier: configuration plus its learnable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

impl<T: Real> Model<T> {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::seeded(seed);
        let params = match config.arch {
            Architecture::Wikg => init_wikg_params(&config, &mut rng)?,
            _ => baselines::init_baseline_params(&config, &mut rng)?,
        };
        Ok(Self { config, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        x: Var,
        raw: &Tensor<T>,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<Forward> {
        let (n, d) = tape.value(x).dims2()?;
        if n == 0 {
            return Err(Error::Input("empty bag".into()));
        }
        if d != self.config.d_in {
            return Err(Error::dim(format!(
                "bag features have {d} columns, model expects {}",
                self.config.d_in
            )));
        }
        match self.config.arch {
            Architecture::Wikg => forward_bag(tape, bound, &self.config, x, raw, mode, rng),
            kind => {
                let logits = baselines::baseline_forward(tape, bound, &self.config, kind, x, mode, rng)?;
                Ok(Forward {
                    logits,
                    graph: None,
                    attention: None,
                })
            }
        }
    }

    /// Eval-mode class probabilities for one bag.
    pub fn predict_proba(&self, features: &Tensor<f32>) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let raw: Tensor<T> = features.cast();
        let x = tape.constant(raw.clone());
        let mut rng = Rng::seeded(0);
        let out = self.forward(&mut tape, &bound, x, &raw, Mode::Eval, &mut rng)?;
        let probs = tape.row_softmax(out.logits)?;
        Ok(tape.value(probs).data().iter().map(|v| v.as_f64()).collect())
    }

    /// Eval-mode graph and attention snapshots for inspection.
    pub fn inspect(
        &self,
        features: &Tensor<f32>,
    ) -> Result<(crate::graph::DirectedBagGraph<T>, AttentionTrace<T>, Tensor<T>)> {
        if !self.config.arch.is_graph() {
            return Err(Error::Usage(format!(
                "model {} builds no graph",
                self.config.arch.name()
            )));
        }
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let raw: Tensor<T> = features.cast();
        let x = tape.constant(raw.clone());
        let mut rng = Rng::seeded(0);
        let out = self.forward(&mut tape, &bound, x, &raw, Mode::Eval, &mut rng)?;
        let graph = out.graph.expect("graph model").materialize(&tape)?;
        let trace = out.attention.expect("graph model").materialize(&tape);
        Ok((graph, trace, tape.value(out.logits).clone()))
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }
}
