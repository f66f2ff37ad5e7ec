//! Interpolation primitives.
//!
//! One ratio `λ ~ Beta(α, α)` is drawn per sample and step and shared by
//! the three mixing points: input embeddings, the hidden states read at
//! the two `[MASK]` positions, and the one-hot labels.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::mix_values;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which interpolation levels a run uses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixupConfig {
    pub alpha: f64,
    pub enable_token: bool,
    pub enable_sentence: bool,
    pub enable_template: bool,
    /// Plain input/label Mixup between two random training samples. Excludes
    /// the three-level scheme.
    pub enable_vanilla_baseline: bool,
}

impl Default for MixupConfig {
    fn default() -> Self {
        MixupConfig {
            alpha: 0.5,
            enable_token: true,
            enable_sentence: true,
            enable_template: true,
            enable_vanilla_baseline: false,
        }
    }
}

impl MixupConfig {
    /// No mixing at any level.
    pub fn disabled(alpha: f64) -> Self {
        MixupConfig {
            alpha,
            enable_token: false,
            enable_sentence: false,
            enable_template: false,
            enable_vanilla_baseline: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::contract(format!("mixup alpha must be > 0, got {}", self.alpha)));
        }
        let three_level = self.enable_token || self.enable_sentence || self.enable_template;
        if three_level && self.enable_vanilla_baseline {
            return Err(Error::contract(
                "vanilla Mixup baseline cannot be combined with token/sentence/template mixing",
            ));
        }
        Ok(())
    }
}

/// A mixing ratio tagged with the optimizer step it was drawn for.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaDraw {
    pub value: f64,
    pub step: u64,
}

impl LambdaDraw {
    pub fn fixed(value: f64, step: u64) -> Self {
        LambdaDraw { value, step }
    }
}

/// Draws `λ ~ Beta(alpha, alpha)` as `g1 / (g1 + g2)` with
/// `g1, g2 ~ Gamma(alpha, 1)`.
///
/// The gammas are generated in log space, so tiny `alpha` (where the
/// variates underflow) still yields values in `[0, 1]`.
pub fn sample_lambda<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> Result<f64> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::contract(format!("Beta parameter must be > 0, got {alpha}")));
    }
    let l1 = ln_gamma_variate(alpha, rng);
    let l2 = ln_gamma_variate(alpha, rng);
    // 1 / (1 + exp(l2 - l1)) without overflow
    let d = l2 - l1;
    let lambda = if d > 0.0 {
        let e = (-d).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + d.exp())
    };
    Ok(lambda)
}

/// `ln X` for `X ~ Gamma(shape, 1)` (Marsaglia–Tsang; shapes below one
/// use the `U^(1/shape)` boost).
fn ln_gamma_variate<R: Rng + ?Sized>(shape: f64, rng: &mut R) -> f64 {
    if shape < 1.0 {
        let u: f64 = 1.0 - rng.random::<f64>(); // (0, 1]
        return ln_gamma_variate(shape + 1.0, rng) + u.ln() / shape;
    }
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x: f64 = rng.sample(StandardNormal);
        let v = 1.0 + c * x;
        if v <= 0.0 {
            continue;
        }
        let v = v * v * v;
        let u: f64 = 1.0 - rng.random::<f64>();
        if u.ln() < 0.5 * x * x + d - d * v + d * v.ln() {
            return d.ln() + v.ln();
        }
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(Error::contract(format!("λ must lie in [0, 1], got {lambda}")))
    }
}

/// Left-aligns two `[S×d]` embedding matrices by zero-padding the shorter
/// one on the right, then mixes them.
///
/// The merged attention mask marks a position visible when it holds
/// content in an input that carries non-zero weight, i.e. the union of the
/// two masks for `0 < λ < 1`, and exactly one input's mask at `λ = 0` or
/// `λ = 1`.
pub fn token_mixup(
    e_p: &Tensor,
    mask_p: &[bool],
    e_aug: &Tensor,
    mask_aug: &[bool],
    lambda: f64,
) -> Result<(Tensor, Vec<bool>)> {
    check_lambda(lambda)?;
    let (s1, d1) = e_p.dims2()?;
    let (s2, d2) = e_aug.dims2()?;
    if d1 != d2 {
        return Err(Error::shape(format!("token_mixup: widths {d1} and {d2}")));
    }
    if mask_p.len() != s1 || mask_aug.len() != s2 {
        return Err(Error::shape("token_mixup: attention mask length"));
    }
    let s = s1.max(s2);
    let a = padded(e_p.data(), s * d1);
    let b = padded(e_aug.data(), s * d1);
    let mixed = Tensor::new(vec![s, d1], mix_values(&a, &b, lambda))?;
    Ok((mixed, merge_masks(mask_p, mask_aug, s, lambda)))
}

pub(crate) fn padded(data: &[f64], len: usize) -> Vec<f64> {
    let mut v = data.to_vec();
    v.resize(len, 0.0);
    v
}

/// Attention mask of a left-aligned mix; see [`token_mixup`].
pub fn merge_masks(mask_p: &[bool], mask_aug: &[bool], len: usize, lambda: f64) -> Vec<bool> {
    let at = |m: &[bool], i: usize| m.get(i).copied().unwrap_or(false);
    (0..len).map(|i| (lambda > 0.0 && at(mask_p, i)) || (lambda < 1.0 && at(mask_aug, i))).collect()
}

/// `λ·H_p + (1−λ)·H_p'` for the two `[MASK]` hidden vectors.
pub fn sentence_mixup(h_p: &Tensor, h_aug: &Tensor, lambda: f64) -> Result<Tensor> {
    check_lambda(lambda)?;
    if h_p.shape().len() != 1 {
        return Err(Error::shape(format!("sentence_mixup expects vectors, got {:?}", h_p.shape())));
    }
    h_p.same_shape(h_aug, "sentence_mixup")?;
    Tensor::new(h_p.shape().to_vec(), mix_values(h_p.data(), h_aug.data(), lambda))
}

pub fn one_hot(label: usize, num_labels: usize) -> Result<Vec<f64>> {
    if label >= num_labels {
        return Err(Error::contract(format!("label {label} outside {num_labels} classes")));
    }
    let mut y = vec![0.0; num_labels];
    y[label] = 1.0;
    Ok(y)
}

fn check_one_hot(y: &[f64]) -> Result<()> {
    let ones = y.iter().filter(|&&v| v == 1.0).count();
    let zeros = y.iter().filter(|&&v| v == 0.0).count();
    if ones == 1 && ones + zeros == y.len() {
        Ok(())
    } else {
        Err(Error::contract(format!("not a one-hot label: {y:?}")))
    }
}

/// `λ·y_p + (1−λ)·y_p'` over one-hot labels.
pub fn label_mixup(y_p: &[f64], y_aug: &[f64], lambda: f64) -> Result<Vec<f64>> {
    check_lambda(lambda)?;
    if y_p.len() != y_aug.len() {
        return Err(Error::shape(format!("label_mixup: {} vs {} classes", y_p.len(), y_aug.len())));
    }
    check_one_hot(y_p)?;
    check_one_hot(y_aug)?;
    Ok(mix_values(y_p, y_aug, lambda))
}

/// Plain Mixup of two samples' input embeddings and labels; embeddings are
/// left-aligned as in [`token_mixup`].
pub fn vanilla_mixup(x1: &Tensor, y1: &[f64], x2: &Tensor, y2: &[f64], lambda: f64) -> Result<(Tensor, Vec<f64>)> {
    let m1 = vec![true; x1.dims2()?.0];
    let m2 = vec![true; x2.dims2()?.0];
    let (x, _) = token_mixup(x1, &m1, x2, &m2, lambda)?;
    Ok((x, label_mixup(y1, y2, lambda)?))
}
