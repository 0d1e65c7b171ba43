use std::fmt;
use std::str::FromStr;

use crate::activations::ActivationKind;
use crate::attention::{AttentionConfig, AttentionKind};
use crate::config::{parse_kv, parse_usize_list, parse_value};
use crate::error::{Error, Result};
use crate::tensor::Shape4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    Vgg,
    ResNetV1,
    ResNetV2,
}

impl Family {
    pub fn valid_depths(self) -> &'static [usize] {
        match self {
            Self::Vgg => &[16, 19],
            Self::ResNetV1 | Self::ResNetV2 => &[50, 101, 152],
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Vgg => "vgg",
            Self::ResNetV1 => "resnet",
            Self::ResNetV2 => "resnetv2",
        })
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "vgg" => Ok(Self::Vgg),
            "resnet" | "resnetv1" => Ok(Self::ResNetV1),
            "resnetv2" => Ok(Self::ResNetV2),
            other => Err(Error::Config(format!("unknown model family '{other}'"))),
        }
    }
}

/// Where attention goes in a VGG network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VggIntegration {
    /// After the activation of every convolution.
    M1,
    /// Once, on the final feature map before flattening.
    M2,
    /// After convolutions 11 and 14; index 14 falls on the head boundary
    /// when the network has fewer convolutions.
    M3,
}

impl fmt::Display for VggIntegration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::M1 => "m1",
            Self::M2 => "m2",
            Self::M3 => "m3",
        })
    }
}

impl FromStr for VggIntegration {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "m1" | "1" => Ok(Self::M1),
            "m2" | "2" => Ok(Self::M2),
            "m3" | "3" => Ok(Self::M3),
            other => Err(Error::Config(format!("unknown VGG integration '{other}'"))),
        }
    }
}

/// Everything needed to build a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub family: Family,
    pub depth: usize,
    /// Per-sample input shape; `n` is ignored by the model.
    pub input: Shape4,
    pub classes: usize,
    pub activation: ActivationKind,
    pub attention: AttentionConfig,
    pub vgg_integration: VggIntegration,
    /// Hidden widths of the VGG classifier head.
    pub fc_widths: Vec<usize>,
    /// Custom VGG convolution widths per stage. When set, `depth` must equal
    /// the number of weight layers (convolutions plus dense layers).
    pub vgg_stages: Option<Vec<Vec<usize>>>,
}

impl ModelSpec {
    fn base(family: Family, depth: usize) -> Self {
        Self {
            family,
            depth,
            input: Shape4 { n: 1, c: 3, h: 80, w: 80 },
            classes: 7,
            activation: ActivationKind::Elu { alpha: 1.0 },
            attention: AttentionConfig::default(),
            vgg_integration: VggIntegration::M2,
            fc_widths: vec![4096, 4096],
            vgg_stages: None,
        }
    }

    pub fn vgg(depth: usize) -> Self {
        Self::base(Family::Vgg, depth)
    }

    pub fn resnet(depth: usize) -> Self {
        Self::base(Family::ResNetV1, depth)
    }

    pub fn resnet_v2(depth: usize) -> Self {
        Self::base(Family::ResNetV2, depth)
    }

    pub fn new(family: Family, depth: usize) -> Self {
        Self::base(family, depth)
    }

    /// Small VGG-style network: `stages` of 3x3 convolutions, then dense
    /// layers of `fc_widths` and the classifier.
    pub fn toy_vgg(stages: Vec<Vec<usize>>, fc_widths: Vec<usize>, input: Shape4, classes: usize) -> Self {
        let depth = stages.iter().map(Vec::len).sum::<usize>() + fc_widths.len() + 1;
        Self {
            input,
            classes,
            fc_widths,
            vgg_stages: Some(stages),
            ..Self::base(Family::Vgg, depth)
        }
    }

    pub fn with_attention(mut self, attention: AttentionConfig) -> Self {
        self.attention = attention;
        self
    }

    /// VGG convolution widths per stage.
    pub fn vgg_layout(&self) -> Result<Vec<Vec<usize>>> {
        if let Some(stages) = &self.vgg_stages {
            return Ok(stages.clone());
        }
        let deep = match self.depth {
            16 => 3,
            19 => 4,
            depth => {
                return Err(Error::BadDepth {
                    family: self.family.to_string(),
                    depth,
                })
            }
        };
        Ok([(64, 2), (128, 2), (256, deep), (512, deep), (512, deep)]
            .iter()
            .map(|&(width, n)| vec![width; n])
            .collect())
    }

    /// Bottleneck counts per ResNet stage.
    pub fn resnet_layout(&self) -> Result<[usize; 4]> {
        match self.depth {
            50 => Ok([3, 4, 6, 3]),
            101 => Ok([3, 4, 23, 3]),
            152 => Ok([3, 8, 36, 3]),
            depth => Err(Error::BadDepth {
                family: self.family.to_string(),
                depth,
            }),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!("at least 2 classes required, got {}", self.classes)));
        }
        match self.family {
            Family::Vgg => {
                self.vgg_layout()?;
                if let Some(stages) = &self.vgg_stages {
                    let convs: usize = stages.iter().map(Vec::len).sum();
                    if stages.iter().any(Vec::is_empty) || stages.iter().flatten().any(|&w| w == 0) {
                        return Err(Error::Config("VGG stages must be non-empty with positive widths".into()));
                    }
                    if self.depth != convs + self.fc_widths.len() + 1 {
                        return Err(Error::BadDepth {
                            family: format!("custom VGG with {convs} convolutions"),
                            depth: self.depth,
                        });
                    }
                }
                if self.fc_widths.contains(&0) {
                    return Err(Error::Config("dense widths must be positive".into()));
                }
            }
            Family::ResNetV1 | Family::ResNetV2 => {
                self.resnet_layout()?;
            }
        }
        Ok(())
    }

    /// Canonical `key = value` text; parsing it back yields an equal spec.
    pub fn to_text(&self) -> String {
        let a = &self.attention;
        let mut lines = vec![
            format!("family = {}", self.family),
            format!("depth = {}", self.depth),
            format!("input = {}x{}x{}", self.input.c, self.input.h, self.input.w),
            format!("classes = {}", self.classes),
            format!("activation = {}", self.activation),
            format!("attention = {}", a.kind),
            format!("r = {}", a.r),
            format!("eca_gamma = {}", a.eca_gamma),
            format!("eca_b = {}", a.eca_b),
            format!("eca_k = {}", a.eca_fixed_k.map_or("adaptive".to_string(), |k| k.to_string())),
            format!("spatial_kernel = {}", a.spatial_kernel),
            format!(
                "mlp_activation = {}",
                a.mlp_activation.map_or("inherit".to_string(), |k| k.to_string())
            ),
            format!("integration = {}", self.vgg_integration),
            format!("fc_widths = {}", join(&self.fc_widths, ",")),
        ];
        lines.push(format!(
            "vgg_stages = {}",
            match &self.vgg_stages {
                None => "standard".to_string(),
                Some(stages) => stages.iter().map(|s| join(s, ",")).collect::<Vec<_>>().join("/"),
            }
        ));
        lines.join("\n") + "\n"
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut spec = Self::vgg(16);
        for e in parse_kv(text)? {
            if !spec.set(&e.key, &e.value)? {
                return Err(Error::Config(format!("line {}: unknown model key '{}'", e.line, e.key)));
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    /// Applies one `key = value` setting. Returns `false` for keys that are
    /// not model settings.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let a = &mut self.attention;
        match key {
            "family" => self.family = value.parse()?,
            "depth" => self.depth = parse_value(key, value)?,
            "input" => self.input = parse_input(value)?,
            "classes" => self.classes = parse_value(key, value)?,
            "activation" => self.activation = value.parse()?,
            "attention" => a.kind = value.parse::<AttentionKind>()?,
            "r" => a.r = parse_value(key, value)?,
            "eca_gamma" => a.eca_gamma = parse_value(key, value)?,
            "eca_b" => a.eca_b = parse_value(key, value)?,
            "eca_k" => {
                a.eca_fixed_k = match value {
                    "adaptive" => None,
                    v => Some(parse_value(key, v)?),
                }
            }
            "spatial_kernel" => a.spatial_kernel = parse_value(key, value)?,
            "mlp_activation" => {
                a.mlp_activation = match value {
                    "inherit" => None,
                    v => Some(v.parse()?),
                }
            }
            "integration" => self.vgg_integration = value.parse()?,
            "fc_widths" => self.fc_widths = parse_usize_list(key, value)?,
            "vgg_stages" => {
                self.vgg_stages = match value {
                    "standard" => None,
                    v => Some(v.split('/').map(|s| parse_usize_list(key, s)).collect::<Result<_>>()?),
                }
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Attention config as used inside this model: the MLP activation
    /// defaults to the model's activation.
    pub fn resolved_attention(&self) -> AttentionConfig {
        let mut a = self.attention;
        a.mlp_activation.get_or_insert(self.activation);
        a
    }
}

fn join(values: &[usize], sep: &str) -> String {
    values.iter().map(usize::to_string).collect::<Vec<_>>().join(sep)
}

fn parse_input(value: &str) -> Result<Shape4> {
    let dims = value
        .split('x')
        .map(|d| parse_value::<usize>("input", d.trim()))
        .collect::<Result<Vec<_>>>()?;
    match dims[..] {
        [c, h, w] => Shape4::new(1, c, h, w),
        _ => Err(Error::Config(format!("input must be CxHxW, got '{value}'"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_roundtrip() {
        let mut spec = ModelSpec::toy_vgg(vec![vec![8], vec![16, 16]], vec![32], Shape4::new(1, 1, 32, 32).unwrap(), 7);
        spec.attention = AttentionConfig {
            kind: AttentionKind::Eca,
            eca_fixed_k: Some(3),
            eca_gamma: 2.5,
            mlp_activation: Some(ActivationKind::Selu),
            ..AttentionConfig::default()
        };
        spec.activation = ActivationKind::elu(0.3).unwrap();
        let back = ModelSpec::from_text(&spec.to_text()).unwrap();
        assert_eq!(back, spec);
        for s in [ModelSpec::vgg(19), ModelSpec::resnet(101), ModelSpec::resnet_v2(152)] {
            assert_eq!(ModelSpec::from_text(&s.to_text()).unwrap(), s);
        }
    }

    #[test]
    fn bad_depths() {
        assert!(matches!(ModelSpec::vgg(15).validate(), Err(Error::BadDepth { depth: 15, .. })));
        assert!(matches!(ModelSpec::resnet(34).validate(), Err(Error::BadDepth { depth: 34, .. })));
        let mut toy = ModelSpec::toy_vgg(vec![vec![4]], vec![], Shape4::new(1, 1, 8, 8).unwrap(), 2);
        toy.depth = 5;
        assert!(toy.validate().is_err());
    }

    #[test]
    fn unknown_key_rejected() {
        let text = ModelSpec::vgg(16).to_text() + "dropout = 0.5\n";
        assert!(ModelSpec::from_text(&text).is_err());
    }

    #[test]
    fn standard_vgg_layout() {
        let l16 = ModelSpec::vgg(16).vgg_layout().unwrap();
        assert_eq!(l16.iter().map(Vec::len).sum::<usize>(), 13);
        let l19 = ModelSpec::vgg(19).vgg_layout().unwrap();
        assert_eq!(l19.iter().map(Vec::len).sum::<usize>(), 16);
    }
}
