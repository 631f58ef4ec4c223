//! Training losses and their per-stage weighted combination.
//!
//! The quadratic losses compare a prediction batch with its target batch
//! (first axis is the batch). Every loss has a matching gradient function
//! with respect to its prediction / probability inputs.

use std::collections::BTreeMap;

use ndarray::{Array, ArrayView, Dimension, NdFloat, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probabilities are clamped into `[EPS, 1 - EPS]` before taking logs.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Squared Frobenius norm per sample, averaged over the batch, further
    /// divided by the number of elements per sample.
    #[default]
    PerPixelMean,
    /// Squared Frobenius norm per sample, averaged over the batch.
    FrobeniusSum,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorVariant {
    /// `-mean(log D(G(O)))`.
    #[default]
    NonSaturating,
    /// `mean(log(1 - D(G(O))))`.
    Minimax,
}

fn check_shapes<T, D: Dimension>(a: &ArrayView<T, D>, b: &ArrayView<T, D>) -> Result<()> {
    if a.shape() != b.shape() || a.ndim() == 0 || a.shape()[0] == 0 {
        return Err(Error::ShapeMismatch { left: a.shape().to_vec(), right: b.shape().to_vec() });
    }
    Ok(())
}

fn normalizer<T: NdFloat>(shape: &[usize], reduction: Reduction) -> T {
    let n = shape[0];
    let per_sample: usize = shape[1..].iter().product();
    let denom = match reduction {
        Reduction::FrobeniusSum => n,
        Reduction::PerPixelMean => n * per_sample,
    };
    T::from(denom).expect("count fits in float")
}

/// `(1/N) Σᵢ ‖predᵢ − targetᵢ‖²_F`, optionally per element.
pub fn quadratic_loss<T: NdFloat, D: Dimension>(
    pred: ArrayView<T, D>,
    target: ArrayView<T, D>,
    reduction: Reduction,
) -> Result<T> {
    check_shapes(&pred, &target)?;
    let mut sum = T::zero();
    Zip::from(&pred).and(&target).for_each(|&p, &t| sum += (p - t) * (p - t));
    Ok(sum / normalizer::<T>(pred.shape(), reduction))
}

/// Gradient of [`quadratic_loss`] with respect to `pred`.
pub fn quadratic_loss_grad<T: NdFloat, D: Dimension>(
    pred: ArrayView<T, D>,
    target: ArrayView<T, D>,
    reduction: Reduction,
) -> Result<Array<T, D>> {
    check_shapes(&pred, &target)?;
    let scale = T::from(2.0).unwrap() / normalizer::<T>(pred.shape(), reduction);
    Ok(Zip::from(&pred).and(&target).map_collect(|&p, &t| scale * (p - t)))
}

/// Background-layer loss.
pub fn loss_background<T: NdFloat, D: Dimension>(
    pred: ArrayView<T, D>,
    target: ArrayView<T, D>,
    reduction: Reduction,
) -> Result<T> {
    quadratic_loss(pred, target, reduction)
}

/// Rain-layer loss.
pub fn loss_rain<T: NdFloat, D: Dimension>(
    pred: ArrayView<T, D>,
    target: ArrayView<T, D>,
    reduction: Reduction,
) -> Result<T> {
    quadratic_loss(pred, target, reduction)
}

/// Loss between the recomposed rainy image and the network input.
pub fn loss_reconstruction<T: NdFloat, D: Dimension>(
    recomposed: ArrayView<T, D>,
    rainy: ArrayView<T, D>,
    reduction: Reduction,
) -> Result<T> {
    quadratic_loss(recomposed, rainy, reduction)
}

fn check_probs<T: NdFloat, D: Dimension>(p: &ArrayView<T, D>) -> Result<()> {
    if p.is_empty() {
        return Err(Error::InvalidParameter("empty probability map".into()));
    }
    for &v in p.iter() {
        if !(v >= T::zero() && v <= T::one()) {
            return Err(Error::Domain(v.to_f64().unwrap_or(f64::NAN)));
        }
    }
    Ok(())
}

fn eps<T: NdFloat>() -> T {
    T::from(PROB_EPS).unwrap()
}

#[inline]
fn clamp_prob<T: NdFloat>(p: T) -> T {
    p.max(eps()).min(T::one() - eps())
}

/// `d/dp log(clamp(p))`; zero where the clamp is active.
#[inline]
fn dlog<T: NdFloat>(p: T) -> T {
    if p > eps() && p < T::one() - eps() {
        T::one() / p
    } else {
        T::zero()
    }
}

#[inline]
fn dlog1m<T: NdFloat>(p: T) -> T {
    if p > eps() && p < T::one() - eps() {
        -T::one() / (T::one() - p)
    } else {
        T::zero()
    }
}

fn mean_of<T: NdFloat, D: Dimension>(p: &ArrayView<T, D>, f: impl Fn(T) -> T) -> T {
    let mut s = T::zero();
    p.for_each(|&v| s += f(v));
    s / T::from(p.len()).unwrap()
}

/// Discriminator loss `−[mean log D(real) + mean log(1 − D(fake))]`.
pub fn loss_adversarial_d<T: NdFloat, D: Dimension>(d_real: ArrayView<T, D>, d_fake: ArrayView<T, D>) -> Result<T> {
    check_probs(&d_real)?;
    check_probs(&d_fake)?;
    let real = mean_of(&d_real, |p| clamp_prob(p).ln());
    let fake = mean_of(&d_fake, |p| (T::one() - clamp_prob(p)).ln());
    Ok(-(real + fake))
}

/// Gradients of [`loss_adversarial_d`] with respect to both probability maps.
pub fn loss_adversarial_d_grad<T: NdFloat, D: Dimension>(
    d_real: ArrayView<T, D>,
    d_fake: ArrayView<T, D>,
) -> Result<(Array<T, D>, Array<T, D>)> {
    check_probs(&d_real)?;
    check_probs(&d_fake)?;
    let nr = T::from(d_real.len()).unwrap();
    let nf = T::from(d_fake.len()).unwrap();
    Ok((d_real.mapv(|p| -dlog(p) / nr), d_fake.mapv(|p| -dlog1m(p) / nf)))
}

pub fn loss_adversarial_g<T: NdFloat, D: Dimension>(d_fake: ArrayView<T, D>, variant: GeneratorVariant) -> Result<T> {
    check_probs(&d_fake)?;
    Ok(match variant {
        GeneratorVariant::NonSaturating => -mean_of(&d_fake, |p| clamp_prob(p).ln()),
        GeneratorVariant::Minimax => mean_of(&d_fake, |p| (T::one() - clamp_prob(p)).ln()),
    })
}

pub fn loss_adversarial_g_grad<T: NdFloat, D: Dimension>(
    d_fake: ArrayView<T, D>,
    variant: GeneratorVariant,
) -> Result<Array<T, D>> {
    check_probs(&d_fake)?;
    let n = T::from(d_fake.len()).unwrap();
    Ok(match variant {
        GeneratorVariant::NonSaturating => d_fake.mapv(|p| -dlog(p) / n),
        GeneratorVariant::Minimax => d_fake.mapv(|p| dlog1m(p) / n),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Finetune,
}

/// Nonnegative multipliers of the four loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub background: f64,
    pub rain: f64,
    pub reconstruction: f64,
    pub adversarial: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageObjective {
    pub stage: Stage,
    pub weights: LossWeights,
    pub reduction: Reduction,
}

impl StageObjective {
    pub fn pretrain() -> Self {
        Self {
            stage: Stage::Pretrain,
            weights: LossWeights { background: 1.0, rain: 1.0, reconstruction: 1.0, adversarial: 0.0 },
            reduction: Reduction::PerPixelMean,
        }
    }

    pub fn finetune() -> Self {
        Self {
            stage: Stage::Finetune,
            weights: LossWeights { background: 0.0, rain: 0.0, reconstruction: 1.0, adversarial: 1.0 },
            reduction: Reduction::PerPixelMean,
        }
    }

    /// Pretraining has no adversarial term; fine-tuning has no paired terms.
    pub fn validate(&self) -> Result<()> {
        let w = &self.weights;
        if [w.background, w.rain, w.reconstruction, w.adversarial].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::StageInvariant("loss weights must be finite and nonnegative".into()));
        }
        match self.stage {
            Stage::Pretrain if w.adversarial != 0.0 => {
                Err(Error::StageInvariant("pretraining requires an adversarial weight of 0".into()))
            }
            Stage::Finetune if w.background != 0.0 || w.rain != 0.0 => Err(Error::StageInvariant(
                "fine-tuning has no background/rain supervision; their weights must be 0".into(),
            )),
            _ => Ok(()),
        }
    }
}

/// Raw (unweighted) loss terms measured in one step; absent terms are `None`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub background: Option<f64>,
    pub rain: Option<f64>,
    pub reconstruction: Option<f64>,
    pub adversarial: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub total: f64,
    pub components: BTreeMap<String, f64>,
}

pub fn stage_total(objective: &StageObjective, c: &LossComponents) -> Result<LossValue> {
    objective.validate()?;
    let w = &objective.weights;
    let mut components = BTreeMap::new();
    let mut total = 0.0;
    for (name, value, weight) in [
        ("background", c.background, w.background),
        ("rain", c.rain, w.rain),
        ("reconstruction", c.reconstruction, w.reconstruction),
        ("adversarial", c.adversarial, w.adversarial),
    ] {
        if let Some(v) = value {
            total += weight * v;
            components.insert(name.to_string(), v);
        }
    }
    Ok(LossValue { total, components })
}

impl LossWeights {
    pub fn get(&self, component: &str) -> Option<f64> {
        match component {
            "background" => Some(self.background),
            "rain" => Some(self.rain),
            "reconstruction" => Some(self.reconstruction),
            "adversarial" => Some(self.adversarial),
            _ => None,
        }
    }
}
