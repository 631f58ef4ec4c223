use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::ops::{Act, ConvSpec};

/// Which encoder convolutions are dilated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DilationPlacement {
    /// Both convolutions of the first encoder module.
    FirstModule,
    /// The first convolution of modules one and two.
    FirstOfModulesOneTwo,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpsampleMode {
    NearestConv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadActivation {
    Sigmoid,
}

/// Architectural hyperparameters of all three networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    /// Training patch size; also the only input size the discriminator accepts.
    pub patch: usize,
    pub encoder_channels: [usize; 5],
    pub dilation_rate: usize,
    pub dilation_placement: DilationPlacement,
    pub leaky_slope: f32,
    pub composition_channels: Vec<usize>,
    pub discriminator_channels: [usize; 4],
    pub upsample_mode: UpsampleMode,
    pub head_activation: HeadActivation,
    pub init_seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            patch: 224,
            encoder_channels: [64, 128, 256, 512, 512],
            dilation_rate: 2,
            dilation_placement: DilationPlacement::FirstModule,
            leaky_slope: 0.2,
            composition_channels: vec![64, 64],
            discriminator_channels: [64, 128, 256, 512],
            upsample_mode: UpsampleMode::NearestConv,
            head_activation: HeadActivation::Sigmoid,
            init_seed: 0,
        }
    }
}

/// Static description of one convolution layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub conv: ConvSpec,
    pub act: Act,
}

pub(crate) const IMAGE_CHANNELS: usize = 3;
pub(crate) const DECODER_STAGES: usize = 5;

fn conv3(dilation: usize) -> ConvSpec {
    ConvSpec { kernel: 3, stride: 1, pad: dilation, dilation }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || !self.patch.is_multiple_of(32) {
            return Err(Error::InvalidParameter(format!("patch {} is not a positive multiple of 32", self.patch)));
        }
        if self.encoder_channels.iter().chain(&self.discriminator_channels).any(|&c| c == 0)
            || self.composition_channels.contains(&0)
        {
            return Err(Error::InvalidParameter("channel counts must be positive".into()));
        }
        if self.dilation_rate == 0 {
            return Err(Error::InvalidParameter("dilation_rate must be at least 1".into()));
        }
        if !(self.leaky_slope.is_finite() && self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::InvalidParameter(format!("leaky_slope {} outside (0, 1)", self.leaky_slope)));
        }
        Ok(())
    }

    fn encoder_dilation(&self, module: usize, conv: usize) -> usize {
        let dilated = match self.dilation_placement {
            DilationPlacement::FirstModule => module == 0,
            DilationPlacement::FirstOfModulesOneTwo => module < 2 && conv == 0,
        };
        if dilated {
            self.dilation_rate
        } else {
            1
        }
    }

    /// Output channels of background/rain decoder stage `j` (0-based, coarse to fine).
    pub fn decoder_channels(&self, stage: usize) -> usize {
        let e = &self.encoder_channels;
        [e[3], e[2], e[1], e[0], e[0]][stage]
    }

    pub fn encoder_layers(&self) -> Vec<LayerSpec> {
        let mut out = Vec::new();
        let mut cin = IMAGE_CHANNELS;
        for (m, &cout) in self.encoder_channels.iter().enumerate() {
            for (i, suffix) in ["a", "b"].iter().enumerate() {
                out.push(LayerSpec {
                    name: format!("enc{}.conv_{suffix}", m + 1),
                    in_channels: if i == 0 { cin } else { cout },
                    out_channels: cout,
                    conv: conv3(self.encoder_dilation(m, i)),
                    act: Act::Relu,
                });
            }
            cin = cout;
        }
        out
    }

    pub fn background_decoder_layers(&self) -> Vec<LayerSpec> {
        let mut out = Vec::new();
        let mut cin = self.encoder_channels[4];
        for j in 0..DECODER_STAGES {
            let cout = self.decoder_channels(j);
            out.push(LayerSpec {
                name: format!("dec_b{}.conv", j + 1),
                in_channels: cin,
                out_channels: cout,
                conv: conv3(1),
                act: Act::Relu,
            });
            cin = cout;
        }
        out.push(self.head("dec_b.head", cin));
        out
    }

    pub fn rain_decoder_layers(&self) -> Vec<LayerSpec> {
        let mut out = Vec::new();
        let mut cin = self.encoder_channels[4];
        for j in 0..DECODER_STAGES {
            let cout = self.decoder_channels(j);
            out.push(LayerSpec {
                name: format!("dec_r{}.conv", j + 1),
                in_channels: cin + self.decoder_channels(j),
                out_channels: cout,
                conv: conv3(1),
                act: Act::Relu,
            });
            cin = cout;
        }
        out.push(self.head("dec_r.head", cin));
        out
    }

    pub fn composition_layers(&self) -> Vec<LayerSpec> {
        let mut out = Vec::new();
        let mut cin = 2 * IMAGE_CHANNELS;
        for (i, &cout) in self.composition_channels.iter().enumerate() {
            out.push(LayerSpec {
                name: format!("comp.conv{}", i + 1),
                in_channels: cin,
                out_channels: cout,
                conv: conv3(1),
                act: Act::Relu,
            });
            cin = cout;
        }
        out.push(self.head("comp.head", cin));
        out
    }

    pub fn discriminator_layers(&self) -> Vec<LayerSpec> {
        let d = &self.discriminator_channels;
        let strides = [2, 2, 2, 1, 1];
        let widths = [d[0], d[1], d[2], d[3], 1];
        let mut cin = IMAGE_CHANNELS;
        widths
            .iter()
            .zip(strides)
            .enumerate()
            .map(|(i, (&cout, stride))| {
                let spec = LayerSpec {
                    name: format!("disc.conv{}", i + 1),
                    in_channels: cin,
                    out_channels: cout,
                    conv: ConvSpec { kernel: 4, stride, pad: 1, dilation: 1 },
                    act: if i == 4 { Act::Sigmoid } else { Act::LeakyRelu(self.leaky_slope) },
                };
                cin = cout;
                spec
            })
            .collect()
    }

    fn head(&self, name: &str, cin: usize) -> LayerSpec {
        LayerSpec {
            name: name.to_string(),
            in_channels: cin,
            out_channels: IMAGE_CHANNELS,
            conv: conv3(1),
            act: match self.head_activation {
                HeadActivation::Sigmoid => Act::Sigmoid,
            },
        }
    }

    pub fn all_layers(&self) -> Vec<LayerSpec> {
        let mut v = self.encoder_layers();
        v.extend(self.background_decoder_layers());
        v.extend(self.rain_decoder_layers());
        v.extend(self.composition_layers());
        v.extend(self.discriminator_layers());
        v
    }

    /// Spatial output sizes of the discriminator layers for a square input.
    pub fn discriminator_sizes(&self, input: usize) -> Vec<usize> {
        let mut size = input;
        self.discriminator_layers()
            .iter()
            .map(|l| {
                size = l.conv.out_size(size).unwrap_or(0);
                size
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn discriminator_chain_for_224() {
        assert_eq!(NetworkConfig::default().discriminator_sizes(224), vec![112, 56, 28, 27, 26]);
    }

    #[test]
    fn rain_decoder_input_is_concatenated_width() {
        let cfg = NetworkConfig::default();
        let rain = cfg.rain_decoder_layers();
        let bg = cfg.background_decoder_layers();
        for j in 0..DECODER_STAGES {
            assert_eq!(rain[j].in_channels, bg[j].in_channels + bg[j].out_channels);
        }
        assert_eq!(cfg.composition_layers()[0].in_channels, 6);
    }

    #[test]
    fn dilation_placement() {
        let cfg = NetworkConfig::default();
        let enc = cfg.encoder_layers();
        assert_eq!((enc[0].conv.dilation, enc[1].conv.dilation, enc[2].conv.dilation), (2, 2, 1));
        assert_eq!(enc[0].conv.pad, 2);
        let alt = NetworkConfig { dilation_placement: DilationPlacement::FirstOfModulesOneTwo, ..cfg };
        let enc = alt.encoder_layers();
        assert_eq!((enc[0].conv.dilation, enc[1].conv.dilation, enc[2].conv.dilation), (2, 1, 2));
    }

    #[test]
    fn validation() {
        assert!(NetworkConfig { patch: 100, ..Default::default() }.validate().is_err());
        assert!(NetworkConfig::default().validate().is_ok());
    }
}
