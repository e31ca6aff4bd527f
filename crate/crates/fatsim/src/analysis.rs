//! Evaluation metrics: accuracy, robust accuracy, and SVCCA drift.

use crate::attack::{pgd_perturb, AttackConfig, LossModel, ModelTarget};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{self, ModelConfig};
use crate::params::ParameterSet;
use crate::rng::{substream, tag};
use crate::tensor::Tensor;

/// Fraction of argmax-correct predictions; argmax ties break to the lowest
/// class index.
pub fn accuracy(cfg: &ModelConfig, params: &ParameterSet, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut correct = 0usize;
    for (x, y) in &ds.examples {
        if argmax(&model::logits(cfg, params, x)?) == *y {
            correct += 1;
        }
    }
    Ok(correct as f64 / ds.len() as f64)
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Accuracy after attacking every sample with PGD under `attack`, using a
/// dedicated evaluation RNG substream.
pub fn robust_accuracy(
    cfg: &ModelConfig,
    params: &ParameterSet,
    ds: &Dataset,
    attack: &AttackConfig,
    seed: u64,
    round: u64,
) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if attack.epsilon == 0.0 || attack.steps == 0 {
        return accuracy(cfg, params, ds);
    }
    let target = ModelTarget { cfg, params };
    let chunk = 32;
    let mut correct = 0usize;
    for (ci, batch) in ds.examples.chunks(chunk).enumerate() {
        let mut rng = substream(seed, &[tag::EVAL_ATTACK, round, ci as u64]);
        let adv = pgd_perturb(&target, batch, attack, &mut rng)?;
        for (x, y) in &adv {
            if argmax(&model::logits(cfg, params, x)?) == *y {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / ds.len() as f64)
}

/// Mean training loss of `params` on a sample set (no attack).
pub fn mean_loss(cfg: &ModelConfig, params: &ParameterSet, batch: &[(Tensor, usize)]) -> Result<f64> {
    let target = ModelTarget { cfg, params };
    let (loss, _) = target.input_gradients(batch)?;
    Ok(loss)
}

/// Post-block token representations of one encoder layer, flattened per
/// sample into rows of a (samples x tokens*dim) matrix.
pub fn collect_activations(
    cfg: &ModelConfig,
    params: &ParameterSet,
    samples: &[(Tensor, usize)],
    layer: usize,
) -> Result<Tensor> {
    if layer >= cfg.depth {
        return Err(Error::LayerOutOfRange {
            layer,
            depth: cfg.depth,
        });
    }
    let width = (cfg.num_patches() + 1) * cfg.embed_dim;
    let mut data = Vec::with_capacity(samples.len() * width);
    for chunk in samples.chunks(16) {
        let fwd = model::forward_loss(cfg, params, chunk)?;
        for blocks in &fwd.block_outputs {
            data.extend_from_slice(fwd.graph.value(blocks[layer]).data());
        }
    }
    Ok(Tensor::new(vec![samples.len(), width], data))
}

/// SVCCA similarity report between two activation matrices.
#[derive(Debug, Clone)]
pub struct SvccaReport {
    pub mean_correlation: f64,
    pub retained_a: usize,
    pub retained_b: usize,
}

/// Center columns, SVD-reduce each matrix to the top components explaining
/// `variance_keep` of variance, then CCA between the reduced matrices.
pub fn svcca(a: &Tensor, b: &Tensor, variance_keep: f64) -> Result<SvccaReport> {
    assert!((0.0..=1.0).contains(&variance_keep) && variance_keep > 0.0);
    if a.rows() != b.rows() {
        return Err(Error::ShapeMismatch {
            op: "svcca",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let ra = reduce(a, variance_keep)?;
    let rb = reduce(b, variance_keep)?;
    let corrs = cca_correlations(&ra, &rb)?;
    let mean = corrs.iter().sum::<f64>() / corrs.len() as f64;
    Ok(SvccaReport {
        mean_correlation: mean.clamp(0.0, 1.0),
        retained_a: ra.cols(),
        retained_b: rb.cols(),
    })
}

fn center_columns(x: &Tensor) -> Tensor {
    let (n, d) = (x.rows(), x.cols());
    let mut out = x.clone();
    for c in 0..d {
        let mean = (0..n).map(|r| x.at(r, c)).sum::<f64>() / n as f64;
        for r in 0..n {
            out.set(r, c, x.at(r, c) - mean);
        }
    }
    out
}

/// One-sided Jacobi: rotate column pairs until mutually orthogonal. The
/// rotated matrix is U*Sigma; column norms are the singular values.
fn one_sided_jacobi(x: &mut Tensor, tol: f64) {
    let (n, d) = (x.rows(), x.cols());
    let max_sweeps = 60;
    for _ in 0..max_sweeps {
        let mut rotated = false;
        for i in 0..d {
            for j in (i + 1)..d {
                let mut aii = 0.0;
                let mut ajj = 0.0;
                let mut aij = 0.0;
                for r in 0..n {
                    let (vi, vj) = (x.at(r, i), x.at(r, j));
                    aii += vi * vi;
                    ajj += vj * vj;
                    aij += vi * vj;
                }
                if aij.abs() <= tol * (aii * ajj).sqrt() || aij == 0.0 {
                    continue;
                }
                rotated = true;
                let tau = (ajj - aii) / (2.0 * aij);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for r in 0..n {
                    let (vi, vj) = (x.at(r, i), x.at(r, j));
                    x.set(r, i, c * vi - s * vj);
                    x.set(r, j, s * vi + c * vj);
                }
            }
        }
        if !rotated {
            break;
        }
    }
}

/// Center, orthogonalize, and keep the leading columns (by singular value)
/// explaining at least `variance_keep` of total variance.
fn reduce(x: &Tensor, variance_keep: f64) -> Result<Tensor> {
    let mut m = center_columns(x);
    one_sided_jacobi(&mut m, 1e-10);
    let (n, d) = (m.rows(), m.cols());
    let mut norms: Vec<(f64, usize)> = (0..d)
        .map(|c| {
            let s: f64 = (0..n).map(|r| m.at(r, c) * m.at(r, c)).sum();
            (s, c)
        })
        .collect();
    norms.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let total: f64 = norms.iter().map(|(s, _)| s).sum();
    if total <= 0.0 {
        return Err(Error::RankDeficient);
    }
    let mut keep = Vec::new();
    let mut acc = 0.0;
    for &(s, c) in &norms {
        if s <= total * 1e-14 {
            break;
        }
        keep.push(c);
        acc += s;
        if acc >= variance_keep * total {
            break;
        }
    }
    let mut out = Tensor::zeros(vec![n, keep.len()]);
    for (oc, &c) in keep.iter().enumerate() {
        for r in 0..n {
            out.set(r, oc, m.at(r, c));
        }
    }
    Ok(out)
}

/// Symmetric Jacobi eigendecomposition, returning (eigenvalues, rotation V)
/// with A = V diag(w) V^T.
fn sym_eig(a: &Tensor) -> (Vec<f64>, Tensor) {
    let d = a.rows();
    let mut m = a.clone();
    let mut v = Tensor::zeros(vec![d, d]);
    for i in 0..d {
        v.set(i, i, 1.0);
    }
    for _ in 0..100 {
        let mut off = 0.0;
        for i in 0..d {
            for j in (i + 1)..d {
                off += m.at(i, j) * m.at(i, j);
            }
        }
        if off.sqrt() < 1e-14 {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = m.at(p, q);
                if apq.abs() < 1e-18 {
                    continue;
                }
                let tau = (m.at(q, q) - m.at(p, p)) / (2.0 * apq);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for k in 0..d {
                    let (mkp, mkq) = (m.at(k, p), m.at(k, q));
                    m.set(k, p, c * mkp - s * mkq);
                    m.set(k, q, s * mkp + c * mkq);
                }
                for k in 0..d {
                    let (mpk, mqk) = (m.at(p, k), m.at(q, k));
                    m.set(p, k, c * mpk - s * mqk);
                    m.set(q, k, s * mpk + c * mqk);
                }
                for k in 0..d {
                    let (vkp, vkq) = (v.at(k, p), v.at(k, q));
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    let w = (0..d).map(|i| m.at(i, i)).collect();
    (w, v)
}

fn inv_sqrt_sym(a: &Tensor) -> Tensor {
    let (w, v) = sym_eig(a);
    let d = a.rows();
    let mut out = Tensor::zeros(vec![d, d]);
    for i in 0..d {
        for j in 0..d {
            let mut acc = 0.0;
            for k in 0..d {
                if w[k] > 1e-14 {
                    acc += v.at(i, k) * v.at(j, k) / w[k].sqrt();
                }
            }
            out.set(i, j, acc);
        }
    }
    out
}

/// Canonical correlations between two centered matrices with n rows.
fn cca_correlations(x: &Tensor, y: &Tensor) -> Result<Vec<f64>> {
    let n = x.rows() as f64;
    let xc = center_columns(x);
    let yc = center_columns(y);
    let reg = 1e-10;
    let mut sxx = xc.transpose().matmul(&xc)?.scale(1.0 / n);
    let mut syy = yc.transpose().matmul(&yc)?.scale(1.0 / n);
    for i in 0..sxx.rows() {
        let v = sxx.at(i, i) + reg;
        sxx.set(i, i, v);
    }
    for i in 0..syy.rows() {
        let v = syy.at(i, i) + reg;
        syy.set(i, i, v);
    }
    let sxy = xc.transpose().matmul(&yc)?.scale(1.0 / n);
    let wx = inv_sqrt_sym(&sxx);
    let wy = inv_sqrt_sym(&syy);
    let mut m = wx.matmul(&sxy)?.matmul(&wy)?;
    one_sided_jacobi(&mut m, 1e-12);
    let (rows, cols) = (m.rows(), m.cols());
    let mut sigmas: Vec<f64> = (0..cols)
        .map(|c| {
            (0..rows)
                .map(|r| m.at(r, c) * m.at(r, c))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    sigmas.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let k = rows.min(cols);
    Ok(sigmas.into_iter().take(k).map(|s| s.clamp(0.0, 1.0)).collect())
}
