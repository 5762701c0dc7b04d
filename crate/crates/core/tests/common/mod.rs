//! Independent reference computations shared by the integration tests.
//!
//! Everything here works element by element in `f64` on plain vectors and
//! shares no code with the library beyond reading its inputs.

#![allow(dead_code)]

use wikg::model::{B1, B2, CLS_B, CLS_W, HEAD_W, INPUT_B, INPUT_W, TAIL_W, W1, W2};
use wikg::{Model, Rng, Tensor};

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat<T: wikg::Real>(t: &Tensor<T>) -> Mat {
    (0..t.rows())
        .map(|r| t.row(r).iter().map(|v| v.as_f64()).collect())
        .collect()
}

pub fn random_mat(rows: usize, cols: usize, scale: f64, rng: &mut Rng) -> Mat {
    (0..rows)
        .map(|_| (0..cols).map(|_| scale * rng.normal()).collect())
        .collect()
}

pub fn tensor_f64(m: &Mat) -> Tensor<f64> {
    Tensor::from_rows(m).unwrap()
}

pub fn tensor_f32(m: &Mat) -> Tensor<f32> {
    let rows: Vec<Vec<f32>> = m.iter().map(|r| r.iter().map(|&v| v as f32).collect()).collect();
    Tensor::from_rows(&rows).unwrap()
}

/// `a·w (+ bias)` by explicit triple loop.
pub fn affine(a: &Mat, w: &Mat, bias: Option<&[f64]>) -> Mat {
    let cols = w[0].len();
    a.iter()
        .map(|row| {
            (0..cols)
                .map(|c| {
                    let mut s = bias.map_or(0.0, |b| b[c]);
                    for (i, &x) in row.iter().enumerate() {
                        s += x * w[i][c];
                    }
                    s
                })
                .collect()
        })
        .collect()
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

pub fn lrelu(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

/// Indices of the `k` largest scores, descending, ties to the lower index
/// (exhaustive stable argsort).
pub fn argsort_topk(scores: &[f64], k: usize, skip: Option<usize>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).filter(|&j| Some(j) != skip).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Dot products `h_i·t_j / sqrt(D)`.
pub fn head_tail_logits(h: &Mat, t: &Mat) -> Mat {
    let d = h[0].len() as f64;
    h.iter()
        .map(|hi| {
            t.iter()
                .map(|tj| hi.iter().zip(tj).map(|(a, b)| a * b).sum::<f64>() / d.sqrt())
                .collect()
        })
        .collect()
}

pub fn cosine_scores(x: &Mat) -> Mat {
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    x.iter()
        .map(|a| {
            x.iter()
                .map(|b| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>() / (norm(a) * norm(b)))
                .collect()
        })
        .collect()
}

pub fn neg_distance_scores(x: &Mat) -> Mat {
    x.iter()
        .map(|a| {
            x.iter()
                .map(|b| -a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt())
                .collect()
        })
        .collect()
}

/// Every intermediate of one eval-mode graph-model forward pass.
pub struct Reference {
    pub heads: Mat,
    pub tails: Mat,
    pub neighbors: Vec<Vec<usize>>,
    pub omega: Mat,
    /// `edge[i][j]` is the embedding of edge `(i, j)`.
    pub edge: Vec<Mat>,
    pub u: Mat,
    pub pi: Mat,
    pub h_nbr: Mat,
    pub h_new: Mat,
    pub logits: Vec<f64>,
}

/// Recomputes a learned-similarity graph model with mean readout on
/// `features`, reading its parameters from `model`.
pub fn reference_forward(model: &Model<f64>, features: &Mat) -> Reference {
    let p = |name: &str| to_mat(model.params.get(name).unwrap());
    let b = |name: &str| p(name)[0].clone();
    let cfg = &model.config;
    let k = cfg.k;
    let e = affine(features, &p(INPUT_W), Some(&b(INPUT_B)));
    let heads = affine(&e, &p(HEAD_W), None);
    let tails = affine(&e, &p(TAIL_W), None);
    let logits_ht = head_tail_logits(&heads, &tails);
    let n = features.len();
    let d = heads[0].len();
    let mut neighbors = Vec::new();
    let mut omega = Vec::new();
    let mut edge = Vec::new();
    let mut u = Vec::new();
    let mut pi = Vec::new();
    let mut h_nbr = Vec::new();
    for i in 0..n {
        let skip = cfg.exclude_self.then_some(i);
        let nb = argsort_topk(&logits_ht[i], k, skip);
        let w = softmax(&nb.iter().map(|&j| logits_ht[i][j]).collect::<Vec<_>>());
        let r: Mat = nb
            .iter()
            .zip(&w)
            .map(|(&j, &wj)| (0..d).map(|c| wj * tails[j][c] + (1.0 - wj) * heads[i][c]).collect())
            .collect();
        let ui: Vec<f64> = nb
            .iter()
            .zip(&r)
            .map(|(&j, rj)| (0..d).map(|c| tails[j][c] * (heads[i][c] + rj[c]).tanh()).sum())
            .collect();
        let pii = softmax(&ui);
        let agg: Vec<f64> = (0..d)
            .map(|c| nb.iter().zip(&pii).map(|(&j, &pj)| pj * tails[j][c]).sum())
            .collect();
        neighbors.push(nb);
        omega.push(w);
        edge.push(r);
        u.push(ui);
        pi.push(pii);
        h_nbr.push(agg);
    }
    let sum: Mat = (0..n).map(|i| (0..d).map(|c| heads[i][c] + h_nbr[i][c]).collect()).collect();
    let prod: Mat = (0..n).map(|i| (0..d).map(|c| heads[i][c] * h_nbr[i][c]).collect()).collect();
    let a1 = affine(&sum, &p(W1), Some(&b(B1)));
    let a2 = affine(&prod, &p(W2), Some(&b(B2)));
    let slope = cfg.leaky_slope;
    let h_new: Mat = (0..n)
        .map(|i| (0..d).map(|c| lrelu(a1[i][c], slope) + lrelu(a2[i][c], slope)).collect())
        .collect();
    let pooled: Vec<f64> = (0..d).map(|c| h_new.iter().map(|r| r[c]).sum::<f64>() / n as f64).collect();
    let logits = affine(&[pooled].to_vec(), &p(CLS_W), Some(&b(CLS_B)))[0].clone();
    Reference {
        heads,
        tails,
        neighbors,
        omega,
        edge,
        u,
        pi,
        h_nbr,
        h_new,
        logits,
    }
}

/// Textbook Adam over flat parameter vectors.
pub struct ReferenceAdam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub decoupled: bool,
    t: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl ReferenceAdam {
    pub fn new(cfg: &wikg::optim::AdamConfig, n: usize) -> Self {
        Self {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            decoupled: cfg.decoupled,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn step(&mut self, theta: &mut [f64], grad: &[f64]) {
        self.t += 1;
        for i in 0..theta.len() {
            let g = if self.decoupled {
                grad[i]
            } else {
                grad[i] + self.weight_decay * theta[i]
            };
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / (1.0 - self.beta1.powi(self.t));
            let v_hat = self.v[i] / (1.0 - self.beta2.powi(self.t));
            if self.decoupled {
                theta[i] -= self.lr * self.weight_decay * theta[i];
            }
            theta[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Mann-Whitney AUC by counting every positive/negative pair; ties count
/// one half. Returned as the exact fraction `(2·wins + ties) / (2·P·N)`.
pub fn pair_count_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let (mut twice, mut pairs) = (0u64, 0u64);
    for (i, &si) in scores.iter().enumerate() {
        if !positive[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if positive[j] {
                continue;
            }
            pairs += 1;
            twice += if si > sj {
                2
            } else if si == sj {
                1
            } else {
                0
            };
        }
    }
    (pairs > 0).then(|| twice as f64 / (2 * pairs) as f64)
}

/// Support-weighted F1 from a `[true][pred]` confusion matrix.
pub fn weighted_f1_from_confusion(conf: &[Vec<usize>]) -> f64 {
    let c = conf.len();
    let total: usize = conf.iter().flatten().sum();
    let mut acc = 0.0;
    for k in 0..c {
        let tp = conf[k][k] as f64;
        let support: usize = conf[k].iter().sum();
        let predicted: usize = (0..c).map(|r| conf[r][k]).sum();
        let precision = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
        let recall = if support == 0 { 0.0 } else { tp / support as f64 };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        acc += f1 * support as f64 / total as f64;
    }
    acc
}

/// Replaces every parameter with fresh Gaussian values (so biases are
/// non-zero too).
pub fn randomize_params(model: &mut Model<f64>, scale: f64, rng: &mut Rng) {
    for t in model.params.tensors_mut() {
        for v in t.data_mut() {
            *v = scale * rng.normal();
        }
    }
}
