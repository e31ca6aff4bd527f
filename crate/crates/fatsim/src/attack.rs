//! l-infinity PGD and FGSM attacks plus adversarial batch mixing.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward_loss, ModelConfig};
use crate::params::ParameterSet;
use crate::tensor::Tensor;

/// PGD parameters under the l-infinity norm with [0,1] clipping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub alpha: f64,
    pub steps: usize,
    pub random_start: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            epsilon: 8.0 / 255.0,
            alpha: 2.0 / 255.0,
            steps: 7,
            random_start: false,
        }
    }
}

/// Anything PGD can attack: a batch loss with gradients w.r.t. each input.
pub trait LossModel {
    fn input_gradients(&self, batch: &[(Tensor, usize)]) -> Result<(f64, Vec<Tensor>)>;
}

/// The tiny-ViT classifier as an attack target.
pub struct ModelTarget<'a> {
    pub cfg: &'a ModelConfig,
    pub params: &'a ParameterSet,
}

impl LossModel for ModelTarget<'_> {
    fn input_gradients(&self, batch: &[(Tensor, usize)]) -> Result<(f64, Vec<Tensor>)> {
        let fwd = forward_loss(self.cfg, self.params, batch)?;
        let grads = fwd.graph.backward(fwd.loss)?;
        let input_grads = fwd
            .image_nodes
            .iter()
            .map(|&id| grads.of(id).clone())
            .collect();
        Ok((fwd.graph.value(fwd.loss).item(), input_grads))
    }
}

fn project(x: &mut Tensor, origin: &Tensor, eps: f64) {
    for (v, &o) in x.data_mut().iter_mut().zip(origin.data()) {
        let mut nv = v.clamp(o - eps, o + eps);
        // Rounding in o +/- eps can land one ulp outside the ball; nudge
        // back so |nv - o| <= eps holds exactly after projection.
        while nv - o > eps {
            nv = nv.next_down();
        }
        while o - nv > eps {
            nv = nv.next_up();
        }
        *v = nv.clamp(0.0, 1.0);
    }
}

/// Iterated signed-gradient ascent projected into the epsilon ball and the
/// [0,1] data range after every step. Labels pass through unchanged.
pub fn pgd_perturb(
    model: &dyn LossModel,
    batch: &[(Tensor, usize)],
    cfg: &AttackConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(Tensor, usize)>> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut current: Vec<(Tensor, usize)> = batch.to_vec();
    if cfg.random_start && cfg.epsilon > 0.0 {
        for ((x, _), (orig, _)) in current.iter_mut().zip(batch) {
            for v in x.data_mut() {
                *v += rng.gen_range(-cfg.epsilon..=cfg.epsilon);
            }
            project(x, orig, cfg.epsilon);
        }
    }
    for _ in 0..cfg.steps {
        let (_, grads) = model.input_gradients(&current)?;
        for (((x, _), g), (orig, _)) in current.iter_mut().zip(&grads).zip(batch) {
            for (v, &gi) in x.data_mut().iter_mut().zip(g.data()) {
                *v += cfg.alpha * sign(gi);
            }
            project(x, orig, cfg.epsilon);
        }
    }
    Ok(current)
}

/// Single-step attack: PGD with s=1, alpha=epsilon, no random start.
pub fn fgsm_perturb(
    model: &dyn LossModel,
    batch: &[(Tensor, usize)],
    epsilon: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(Tensor, usize)>> {
    let cfg = AttackConfig {
        epsilon,
        alpha: epsilon,
        steps: 1,
        random_start: false,
    };
    pgd_perturb(model, batch, &cfg, rng)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Replace floor(r*B) uniformly chosen samples by their PGD versions,
/// keeping every sample at its original batch position.
pub fn mix_batch(
    model: &dyn LossModel,
    batch: &[(Tensor, usize)],
    ratio: f64,
    cfg: &AttackConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(Tensor, usize)>> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidRatio(ratio));
    }
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let n_adv = (ratio * batch.len() as f64).floor() as usize;
    let mut out = batch.to_vec();
    if n_adv == 0 {
        return Ok(out);
    }
    let mut indices: Vec<usize> = (0..batch.len()).collect();
    indices.shuffle(rng);
    let mut chosen: Vec<usize> = indices[..n_adv].to_vec();
    chosen.sort_unstable();
    let subset: Vec<(Tensor, usize)> = chosen.iter().map(|&i| batch[i].clone()).collect();
    let perturbed = pgd_perturb(model, &subset, cfg, rng)?;
    for (slot, adv) in chosen.into_iter().zip(perturbed) {
        out[slot] = adv;
    }
    Ok(out)
}
