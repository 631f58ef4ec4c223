use std::collections::BTreeMap;

use ndarray::{Array1, Array4};
use rand::Rng;

use crate::error::{Error, Result};
use crate::network::config::{LayerSpec, NetworkConfig};
use crate::network::ops::Act;
use crate::seed::{derive_seed, rng};

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    /// `[out, in, k, k]`.
    pub weight: Array4<f32>,
    pub bias: Array1<f32>,
}

impl ConvParams {
    fn zeros(spec: &LayerSpec) -> Self {
        let k = spec.conv.kernel;
        Self {
            weight: Array4::zeros((spec.out_channels, spec.in_channels, k, k)),
            bias: Array1::zeros(spec.out_channels),
        }
    }
}

/// Named parameters of every layer, keyed by layer name.
///
/// The same container doubles as a gradient or momentum buffer.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Weights {
    layers: BTreeMap<String, ConvParams>,
}

const HEAD_GAIN: f32 = 0.01;

fn joins_skip_sum(name: &str) -> bool {
    name.ends_with(".conv_b") || (name.starts_with("dec_") && name.ends_with(".conv"))
}

impl Weights {
    /// Fan-in scaled uniform initialization: He bounds for rectifier layers,
    /// halved variance for layers whose output joins a residual or skip sum,
    /// and a small LeCun-scaled head so sigmoids start unsaturated. Biases
    /// start at zero.
    pub fn init(cfg: &NetworkConfig) -> Self {
        let layers = cfg
            .all_layers()
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                let mut p = ConvParams::zeros(spec);
                let fan_in = (spec.in_channels * spec.conv.kernel * spec.conv.kernel) as f32;
                let gain = match spec.act {
                    Act::Sigmoid => HEAD_GAIN,
                    Act::Identity => 1.0,
                    _ if joins_skip_sum(&spec.name) => 1.0,
                    _ => 2.0,
                };
                let bound = (3.0 * gain / fan_in).sqrt();
                let mut r = rng(derive_seed(cfg.init_seed, i as u64));
                p.weight.mapv_inplace(|_| r.gen_range(-bound..bound));
                (spec.name.clone(), p)
            })
            .collect();
        Self { layers }
    }

    pub fn zeros(cfg: &NetworkConfig) -> Self {
        Self { layers: cfg.all_layers().iter().map(|s| (s.name.clone(), ConvParams::zeros(s))).collect() }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|(k, p)| {
                    (k.clone(), ConvParams { weight: Array4::zeros(p.weight.dim()), bias: Array1::zeros(p.bias.len()) })
                })
                .collect(),
        }
    }

    pub fn from_layers(layers: BTreeMap<String, ConvParams>) -> Self {
        Self { layers }
    }

    pub fn get(&self, name: &str) -> Option<&ConvParams> {
        self.layers.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ConvParams> {
        self.layers.get_mut(name)
    }

    pub fn layer(&self, name: &str) -> Result<&ConvParams> {
        self.get(name).ok_or_else(|| Error::ShapeInconsistency(format!("missing layer `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ConvParams)> {
        self.layers.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ConvParams)> {
        self.layers.iter_mut()
    }

    pub fn param_count(&self) -> usize {
        self.layers.values().map(|p| p.weight.len() + p.bias.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.values().all(|p| p.weight.iter().chain(p.bias.iter()).all(|v| v.is_finite()))
    }

    pub fn squared_norm(&self) -> f64 {
        self.layers.values().flat_map(|p| p.weight.iter().chain(p.bias.iter())).map(|&v| (v as f64) * (v as f64)).sum()
    }

    /// Checks that every layer the config defines exists with the right shape.
    pub fn check_against(&self, cfg: &NetworkConfig) -> Result<()> {
        let specs = cfg.all_layers();
        if specs.len() != self.layers.len() {
            return Err(Error::ShapeInconsistency(format!(
                "config defines {} layers, weights hold {}",
                specs.len(),
                self.layers.len()
            )));
        }
        for s in &specs {
            let p = self.layer(&s.name)?;
            let k = s.conv.kernel;
            if p.weight.dim() != (s.out_channels, s.in_channels, k, k) || p.bias.len() != s.out_channels {
                return Err(Error::ShapeInconsistency(format!(
                    "layer `{}` has shape {:?}, expected {:?}",
                    s.name,
                    p.weight.dim(),
                    (s.out_channels, s.in_channels, k, k)
                )));
            }
        }
        Ok(())
    }

    /// Adds `other` into `self` for every layer present in both.
    pub fn accumulate(&mut self, other: &Weights) {
        for (name, g) in &other.layers {
            if let Some(p) = self.layers.get_mut(name) {
                p.weight += &g.weight;
                p.bias += &g.bias;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded_and_shaped() {
        let cfg = NetworkConfig { encoder_channels: [4, 4, 8, 8, 8], ..Default::default() };
        let a = Weights::init(&cfg);
        assert_eq!(a, Weights::init(&cfg));
        a.check_against(&cfg).unwrap();
        assert!(a.is_finite());
        let other = Weights::init(&NetworkConfig { init_seed: 1, ..cfg.clone() });
        assert_ne!(a, other);
        assert_eq!(a.param_count(), Weights::zeros(&cfg).param_count());
    }

    #[test]
    fn default_parameter_count_is_stable() {
        let cfg = NetworkConfig::default();
        let count: usize =
            cfg.all_layers().iter().map(|l| l.out_channels * (l.in_channels * l.conv.kernel * l.conv.kernel + 1)).sum();
        assert_eq!(Weights::zeros(&cfg).param_count(), count);
    }
}
