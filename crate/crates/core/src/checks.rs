//! Finite-difference gradient suite over every tape op, the graph
//! building blocks and the complete model losses.
//!
//! Each case draws fresh inputs from its seed and reduces non-scalar
//! outputs with a fixed random projection, so that no gradient is
//! trivially zero (a plain sum would hide softmax errors, for instance).

use std::time::Instant;

use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::baselines;
use crate::error::{Error, Result};
use crate::gradcheck::{gradcheck, GradcheckOptions, GradcheckReport};
use crate::graph::{self, EdgePolicy, EdgeVariant};
use crate::model::{self, Architecture, Mode, ModelConfig, Readout};
use crate::parallel::{self, Execution};
use crate::params::{Bound, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

type CaseFn = fn(u64, GradcheckOptions) -> Result<GradcheckReport>;

/// A named gradient check, repeatable for any seed.
#[derive(Clone, Copy)]
pub struct CheckCase {
    pub name: &'static str,
    run: CaseFn,
}

impl CheckCase {
    pub fn run(&self, seed: u64, opts: GradcheckOptions) -> Result<GradcheckReport> {
        Ok((self.run)(seed, opts)?.named(self.name))
    }
}

fn randn(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

/// Entries pushed at least 0.05 away from zero, clear of kinks.
fn away_from_zero(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    randn(rng, shape).map(|v| v.signum() * (v.abs() + 0.05))
}

/// `Σ y ⊙ R` with `R` fixed by `seed` and the shape of `y`.
fn project(t: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = t.value(y).shape().to_vec();
    let r = randn(&mut Rng::derive(seed, 0x9e37), &shape);
    let c = t.constant(r);
    let prod = t.hadamard(y, c)?;
    t.sum(prod)
}

fn unary(
    seed: u64,
    opts: GradcheckOptions,
    shape: &[usize],
    op: fn(&mut Tape<f64>, Var) -> Result<Var>,
) -> Result<GradcheckReport> {
    let x = away_from_zero(&mut Rng::seeded(seed), shape);
    gradcheck(
        |t, v| {
            let y = op(t, v[0])?;
            project(t, y, seed)
        },
        &[x],
        opts,
    )
}

fn binary(
    seed: u64,
    opts: GradcheckOptions,
    a: &[usize],
    b: &[usize],
    op: fn(&mut Tape<f64>, Var, Var) -> Result<Var>,
) -> Result<GradcheckReport> {
    let mut rng = Rng::seeded(seed);
    let inputs = [randn(&mut rng, a), randn(&mut rng, b)];
    gradcheck(
        |t, v| {
            let y = op(t, v[0], v[1])?;
            project(t, y, seed)
        },
        &inputs,
        opts,
    )
}

fn op_cases() -> Vec<CheckCase> {
    vec![
        CheckCase {
            name: "matmul",
            run: |s, o| binary(s, o, &[3, 4], &[4, 5], |t, a, b| t.matmul(a, b)),
        },
        CheckCase {
            name: "add",
            run: |s, o| binary(s, o, &[3, 4], &[3, 4], |t, a, b| t.add(a, b)),
        },
        CheckCase {
            name: "sub",
            run: |s, o| binary(s, o, &[3, 4], &[3, 4], |t, a, b| t.sub(a, b)),
        },
        CheckCase {
            name: "hadamard",
            run: |s, o| binary(s, o, &[3, 4], &[3, 4], |t, a, b| t.hadamard(a, b)),
        },
        CheckCase {
            name: "affine",
            run: |s, o| unary(s, o, &[3, 4], |t, x| t.affine(x, -0.7, 0.3)),
        },
        CheckCase {
            name: "add_row_broadcast",
            run: |s, o| binary(s, o, &[3, 4], &[4], |t, a, b| t.add_row_broadcast(a, b)),
        },
        CheckCase {
            name: "mul_col_broadcast",
            run: |s, o| binary(s, o, &[6, 4], &[6, 1], |t, a, b| t.mul_col_broadcast(a, b)),
        },
        CheckCase {
            name: "tanh",
            run: |s, o| unary(s, o, &[3, 4], |t, x| t.tanh(x)),
        },
        CheckCase {
            name: "sigmoid",
            run: |s, o| unary(s, o, &[3, 4], |t, x| t.sigmoid(x)),
        },
        CheckCase {
            name: "leaky_relu",
            run: |s, o| unary(s, o, &[3, 4], |t, x| t.leaky_relu(x, 0.2)),
        },
        CheckCase {
            name: "softmax",
            run: |s, o| unary(s, o, &[3, 5], |t, x| t.row_softmax(x)),
        },
        CheckCase {
            name: "topk",
            run: |s, o| unary(s, o, &[4, 6], |t, x| Ok(t.topk_rows(x, 3)?.0)),
        },
        CheckCase {
            name: "topk_masked",
            run: |s, o| unary(s, o, &[5, 5], |t, x| Ok(t.topk_rows_masked(x, 2, true)?.0)),
        },
        CheckCase {
            name: "gather_rows",
            run: |s, o| unary(s, o, &[4, 3], |t, x| t.gather_rows(x, &[2, 0, 2, 3, 1, 2])),
        },
        CheckCase {
            name: "concat_rows",
            run: |s, o| binary(s, o, &[2, 3], &[3, 3], |t, a, b| t.concat_rows(&[a, b, a])),
        },
        CheckCase {
            name: "reduce_mean_rows",
            run: |s, o| unary(s, o, &[5, 4], |t, x| t.reduce_mean_rows(x)),
        },
        CheckCase {
            name: "reduce_max_rows",
            run: |s, o| unary(s, o, &[5, 4], |t, x| t.reduce_max_rows(x)),
        },
        CheckCase {
            name: "row_sum",
            run: |s, o| unary(s, o, &[4, 5], |t, x| t.row_sum(x)),
        },
        CheckCase {
            name: "group_sum_rows",
            run: |s, o| unary(s, o, &[6, 3], |t, x| t.group_sum_rows(x, 3)),
        },
        CheckCase {
            name: "transpose",
            run: |s, o| unary(s, o, &[3, 4], |t, x| t.transpose(x)),
        },
        CheckCase {
            name: "reshape",
            run: |s, o| unary(s, o, &[3, 4], |t, x| t.reshape(x, &[2, 6])),
        },
        CheckCase {
            name: "sum",
            run: |s, o| unary(s, o, &[3, 4], |t, x| t.sum(x)),
        },
        CheckCase {
            name: "cross_entropy",
            run: |seed, opts| {
                let x = randn(&mut Rng::seeded(seed), &[1, 4]);
                let label = (seed % 4) as usize;
                gradcheck(|t, v| t.cross_entropy(v[0], label), &[x], opts)
            },
        },
        CheckCase {
            name: "dropout",
            run: |seed, opts| {
                let x = randn(&mut Rng::seeded(seed), &[4, 5]);
                gradcheck(
                    |t, v| {
                        let mut rng = Rng::derive(seed, 7);
                        let y = t.dropout(v[0], 0.3, true, &mut rng)?;
                        project(t, y, seed)
                    },
                    &[x],
                    opts,
                )
            },
        },
    ]
}

fn policy(variant: EdgeVariant, k: usize) -> EdgePolicy {
    EdgePolicy {
        variant,
        k,
        exclude_self: false,
    }
}

/// Edge weights and edge embeddings of one graph policy, as a function of
/// heads and tails (`raw` fixed for the k-NN policies).
fn graph_case(seed: u64, opts: GradcheckOptions, variant: EdgeVariant) -> Result<GradcheckReport> {
    let mut rng = Rng::seeded(seed);
    let (n, d) = (7, 4);
    let inputs = [randn(&mut rng, &[n, d]), randn(&mut rng, &[n, d])];
    let raw = randn(&mut rng, &[n, 3]);
    gradcheck(
        |t, v| {
            let g = graph::build_graph(t, &raw, v[0], v[1], &policy(variant, 3))?;
            let a = project(t, g.edge_emb, seed)?;
            let b = project(t, g.omega, seed ^ 1)?;
            t.add(a, b)
        },
        &inputs,
        opts,
    )
}

fn composite_cases() -> Vec<CheckCase> {
    vec![
        CheckCase {
            name: "head_tail_projection",
            run: |seed, opts| {
                let mut rng = Rng::seeded(seed);
                let inputs = [randn(&mut rng, &[6, 4]), randn(&mut rng, &[4, 4]), randn(&mut rng, &[4, 4])];
                gradcheck(
                    |t, v| {
                        let (h, tl) = graph::project_head_tail(t, v[0], v[1], v[2])?;
                        let a = project(t, h, seed)?;
                        let b = project(t, tl, seed ^ 1)?;
                        t.add(a, b)
                    },
                    &inputs,
                    opts,
                )
            },
        },
        CheckCase {
            name: "wikg_graph",
            run: |s, o| graph_case(s, o, EdgeVariant::Wikg),
        },
        CheckCase {
            name: "knn_cos_graph",
            run: |s, o| graph_case(s, o, EdgeVariant::KnnCos),
        },
        CheckCase {
            name: "knn_dist_graph",
            run: |s, o| graph_case(s, o, EdgeVariant::KnnDist),
        },
        CheckCase {
            name: "knowledge_attention",
            run: |seed, opts| {
                let mut rng = Rng::seeded(seed);
                let inputs = [randn(&mut rng, &[8, 4]), randn(&mut rng, &[8, 4])];
                let raw = Tensor::zeros(&[8, 1]);
                gradcheck(
                    |t, v| {
                        let g = graph::build_graph(t, &raw, v[0], v[1], &policy(EdgeVariant::Wikg, 3))?;
                        let (u, pi, h_nbr) = model::knowledge_attention(t, &g)?;
                        let a = project(t, u, seed)?;
                        let b = project(t, pi, seed ^ 1)?;
                        let c = project(t, h_nbr, seed ^ 2)?;
                        let ab = t.add(a, b)?;
                        t.add(ab, c)
                    },
                    &inputs,
                    opts,
                )
            },
        },
        CheckCase {
            name: "dual_interaction",
            run: |seed, opts| {
                let mut rng = Rng::seeded(seed);
                let inputs = [
                    randn(&mut rng, &[5, 4]),
                    randn(&mut rng, &[5, 4]),
                    randn(&mut rng, &[4, 4]),
                    randn(&mut rng, &[4]),
                    randn(&mut rng, &[4, 4]),
                    randn(&mut rng, &[4]),
                ];
                gradcheck(
                    |t, v| {
                        let y = model::dual_interaction(t, v[0], v[1], v[2], v[3], v[4], v[5], 0.2)?;
                        project(t, y, seed)
                    },
                    &inputs,
                    opts,
                )
            },
        },
        CheckCase {
            name: "wikg_loss",
            run: |s, o| model_loss(s, o, LossSpec::graph(EdgeVariant::Wikg)),
        },
        CheckCase {
            name: "wikg_loss_train_mode",
            run: |s, o| model_loss(s, o, LossSpec { mode: Mode::Train, ..LossSpec::graph(EdgeVariant::Wikg) }),
        },
        CheckCase {
            name: "wikg_loss_max_readout",
            run: |s, o| model_loss(s, o, LossSpec { readout: Readout::Max, ..LossSpec::graph(EdgeVariant::Wikg) }),
        },
        CheckCase {
            name: "wikg_loss_knn_cos",
            run: |s, o| model_loss(s, o, LossSpec::graph(EdgeVariant::KnnCos)),
        },
        CheckCase {
            name: "wikg_loss_knn_dist",
            run: |s, o| model_loss(s, o, LossSpec::graph(EdgeVariant::KnnDist)),
        },
        CheckCase {
            name: "mean_pool_loss",
            run: |s, o| model_loss(s, o, LossSpec::baseline(Architecture::MeanPool)),
        },
        CheckCase {
            name: "max_pool_loss",
            run: |s, o| model_loss(s, o, LossSpec::baseline(Architecture::MaxPool)),
        },
        CheckCase {
            name: "abmil_loss",
            run: |s, o| model_loss(s, o, LossSpec::baseline(Architecture::GatedAttention)),
        },
    ]
}

#[derive(Clone, Copy)]
struct LossSpec {
    arch: Architecture,
    policy: EdgeVariant,
    readout: Readout,
    mode: Mode,
}

impl LossSpec {
    fn graph(policy: EdgeVariant) -> Self {
        Self {
            arch: Architecture::Wikg,
            policy,
            readout: Readout::Mean,
            mode: Mode::Eval,
        }
    }

    fn baseline(arch: Architecture) -> Self {
        Self {
            arch,
            ..Self::graph(EdgeVariant::Wikg)
        }
    }
}

/// Cross-entropy of a small model on a 12-instance bag, differentiated
/// with respect to every parameter and, where the graph is learned, the
/// instance features too. k-NN graphs select and weight edges from the raw
/// features, which therefore stay constant.
fn model_loss(seed: u64, opts: GradcheckOptions, spec: LossSpec) -> Result<GradcheckReport> {
    let config = ModelConfig {
        arch: spec.arch,
        d_in: 6,
        d_model: 5,
        n_classes: 3,
        k: 3,
        policy: spec.policy,
        readout: spec.readout,
        attn_hidden: 4,
        ..ModelConfig::default()
    };
    let mut rng = Rng::seeded(seed);
    let params: ParamStore<f64> = match spec.arch {
        Architecture::Wikg => model::init_wikg_params(&config, &mut rng)?,
        _ => baselines::init_baseline_params(&config, &mut rng)?,
    };
    let x = randn(&mut rng, &[12, 6]);
    let label = (seed % 3) as usize;
    let names: Vec<String> = params.iter().map(|(n, _)| n.to_owned()).collect();
    let mut inputs: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
    let x_is_input = spec.policy == EdgeVariant::Wikg;
    if x_is_input {
        inputs.push(x.clone());
    }
    gradcheck(
        |t, v| {
            let bound = Bound::new(names.iter().cloned().zip(v.iter().copied()).collect());
            let xv = if x_is_input { v[names.len()] } else { t.constant(x.clone()) };
            let mut drop_rng = Rng::derive(seed, 11);
            let logits = match spec.arch {
                Architecture::Wikg => {
                    model::forward_bag(t, &bound, &config, xv, &x, spec.mode, &mut drop_rng)?.logits
                }
                kind => baselines::baseline_forward(t, &bound, &config, kind, xv, spec.mode, &mut drop_rng)?,
            };
            t.cross_entropy(logits, label)
        },
        &inputs,
        opts,
    )
}

/// Every case, per-op checks first.
pub fn all_cases() -> Vec<CheckCase> {
    let mut v = op_cases();
    v.extend(composite_cases());
    v
}

#[derive(Debug, Clone)]
pub struct SuiteOptions {
    pub seeds: usize,
    pub base_seed: u64,
    /// Keep only cases whose name contains this string.
    pub filter: Option<String>,
    pub gradcheck: GradcheckOptions,
    pub exec: Execution,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            seeds: 50,
            base_seed: 0,
            filter: None,
            gradcheck: GradcheckOptions::default(),
            exec: Execution::Sequential,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CaseSummary {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_seed: u64,
    pub seeds: usize,
    pub checked: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub cases: Vec<CaseSummary>,
    pub tol: f64,
    pub seconds: f64,
    pub passed: bool,
}

impl SuiteReport {
    pub fn failures(&self) -> impl Iterator<Item = &CaseSummary> {
        self.cases.iter().filter(|c| !c.passed)
    }
}

/// Runs the selected cases over `seeds` consecutive seeds; cases run in
/// parallel under [`Execution::Parallel`].
pub fn run_suite(opts: &SuiteOptions) -> Result<SuiteReport> {
    if opts.seeds == 0 {
        return Err(Error::param("at least one seed required"));
    }
    let start = Instant::now();
    let cases: Vec<CheckCase> = all_cases()
        .into_iter()
        .filter(|c| opts.filter.as_deref().is_none_or(|f| c.name.contains(f)))
        .collect();
    if cases.is_empty() {
        return Err(Error::Usage(format!(
            "no gradient check matches `{}`",
            opts.filter.as_deref().unwrap_or_default()
        )));
    }
    let summaries = parallel::try_map(opts.exec, &cases, |case| {
        let mut worst = (0.0f64, opts.base_seed);
        let mut checked = 0;
        for s in 0..opts.seeds as u64 {
            let seed = opts.base_seed + s;
            let r = case.run(seed, opts.gradcheck)?;
            checked += r.checked;
            if r.max_rel_error > worst.0 || r.max_rel_error.is_nan() {
                worst = (r.max_rel_error, seed);
            }
        }
        Ok(CaseSummary {
            name: case.name.to_owned(),
            max_rel_error: worst.0,
            worst_seed: worst.1,
            seeds: opts.seeds,
            checked,
            passed: worst.0 < opts.gradcheck.tol,
        })
    })?;
    let passed = summaries.iter().all(|c| c.passed);
    Ok(SuiteReport {
        cases: summaries,
        tol: opts.gradcheck.tol,
        seconds: start.elapsed().as_secs_f64(),
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn case_names_unique() {
        let mut names: Vec<&str> = all_cases().iter().map(|c| c.name).collect();
        let n = names.len();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), n);
    }

    #[test]
    fn every_case_passes_on_a_few_seeds() {
        let report = run_suite(&SuiteOptions {
            seeds: 3,
            ..SuiteOptions::default()
        })
        .unwrap();
        let failed: Vec<_> = report.failures().map(|c| (&c.name, c.max_rel_error)).collect();
        assert!(failed.is_empty(), "{failed:?}");
    }

    #[test]
    fn filter_restricts_scope() {
        let report = run_suite(&SuiteOptions {
            seeds: 1,
            filter: Some("softmax".into()),
            ..SuiteOptions::default()
        })
        .unwrap();
        assert_eq!(report.cases.len(), 1);
        assert_eq!(report.cases[0].name, "softmax");
        assert!(run_suite(&SuiteOptions {
            filter: Some("nope".into()),
            ..SuiteOptions::default()
        })
        .is_err());
    }

    #[test]
    fn absurd_tolerance_reports_failures() {
        let report = run_suite(&SuiteOptions {
            seeds: 1,
            filter: Some("tanh".into()),
            gradcheck: GradcheckOptions {
                tol: 1e-12,
                ..GradcheckOptions::default()
            },
            ..SuiteOptions::default()
        })
        .unwrap();
        assert!(!report.passed);
        assert_eq!(report.failures().next().unwrap().name, "tanh");
    }
}
