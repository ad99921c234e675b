use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::{BN_EPSILON, BN_MOMENTUM};
use crate::params::DEFAULT_ATTENTION_LIMIT;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BottomKind {
    /// A single pre-activated 3×3×3 convolution.
    Conv,
    /// Residual global aggregation block with a 1×1×1 query transform.
    Aggregation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UpsampleKind {
    /// A single pre-activated stride-2 3×3×3 transposed convolution.
    Deconv,
    /// Residual up-sampling global aggregation block.
    AggregationDeconv,
}

/// Architecture of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    /// Channels after the input block; doubled after each down-sampling.
    pub base_width: usize,
    pub num_scales: usize,
    pub bottom_kind: BottomKind,
    pub upsample_kind: UpsampleKind,
    pub short_residuals: bool,
    /// With [`UpsampleKind::AggregationDeconv`], use it only for the deepest
    /// up-sampling stage.
    pub first_up_only_aggregation: bool,
    /// Dropout in every aggregation block and before the final convolution.
    pub dropout_rate: f64,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
    /// Cap on `N_Q × N` attention entries per batch item.
    pub attention_limit: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            in_channels: 2,
            num_classes: 4,
            base_width: 32,
            num_scales: 2,
            bottom_kind: BottomKind::Aggregation,
            upsample_kind: UpsampleKind::AggregationDeconv,
            short_residuals: true,
            first_up_only_aggregation: false,
            dropout_rate: 0.5,
            bn_momentum: BN_MOMENTUM,
            bn_epsilon: BN_EPSILON,
            attention_limit: DEFAULT_ATTENTION_LIMIT,
        }
    }
}

impl NetworkConfig {
    /// Channel width at each scale, shallowest first (`num_scales + 1` entries).
    pub fn widths(&self) -> Vec<usize> {
        (0..=self.num_scales).map(|s| self.base_width << s).collect()
    }

    /// Spatial extents must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << self.num_scales
    }

    /// Whether the up-sampling stage `stage` (0 = deepest) uses aggregation.
    pub fn up_uses_aggregation(&self, stage: usize) -> bool {
        self.upsample_kind == UpsampleKind::AggregationDeconv && (!self.first_up_only_aggregation || stage == 0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.in_channels == 0 {
            return bad("in_channels must be positive".into());
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if self.num_classes > u8::MAX as usize + 1 {
            return bad(format!("num_classes {} does not fit 8-bit labels", self.num_classes));
        }
        if self.base_width == 0 {
            return bad("base_width must be positive".into());
        }
        if self.num_scales == 0 || self.num_scales > 6 {
            return bad(format!("num_scales must lie in 1..=6, got {}", self.num_scales));
        }
        if self.base_width.checked_shl(self.num_scales as u32).is_none() {
            return bad("base_width overflows at the deepest scale".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate must lie in [0, 1), got {}", self.dropout_rate));
        }
        if !(0.0..1.0).contains(&self.bn_momentum) {
            return bad(format!("bn_momentum must lie in [0, 1), got {}", self.bn_momentum));
        }
        if !(self.bn_epsilon > 0.0) {
            return bad(format!("bn_epsilon must be positive, got {}", self.bn_epsilon));
        }
        if self.attention_limit == 0 {
            return bad("attention_limit must be positive".into());
        }
        Ok(())
    }

    /// Flat `key=value` form, in a fixed order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("in_channels", self.in_channels.to_string()),
            ("num_classes", self.num_classes.to_string()),
            ("base_width", self.base_width.to_string()),
            ("num_scales", self.num_scales.to_string()),
            ("bottom_kind", self.bottom_kind.to_string()),
            ("upsample_kind", self.upsample_kind.to_string()),
            ("short_residuals", self.short_residuals.to_string()),
            ("first_up_only_aggregation", self.first_up_only_aggregation.to_string()),
            ("dropout_rate", self.dropout_rate.to_string()),
            ("bn_momentum", self.bn_momentum.to_string()),
            ("bn_epsilon", self.bn_epsilon.to_string()),
            ("attention_limit", self.attention_limit.to_string()),
        ]
    }

    /// Sets one field from its flat form. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "in_channels" => self.in_channels = parse(key, value)?,
            "num_classes" => self.num_classes = parse(key, value)?,
            "base_width" => self.base_width = parse(key, value)?,
            "num_scales" => self.num_scales = parse(key, value)?,
            "bottom_kind" => self.bottom_kind = parse(key, value)?,
            "upsample_kind" => self.upsample_kind = parse(key, value)?,
            "short_residuals" => self.short_residuals = parse(key, value)?,
            "first_up_only_aggregation" => self.first_up_only_aggregation = parse(key, value)?,
            "dropout_rate" => self.dropout_rate = parse(key, value)?,
            "bn_momentum" => self.bn_momentum = parse(key, value)?,
            "bn_epsilon" => self.bn_epsilon = parse(key, value)?,
            "attention_limit" => self.attention_limit = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown network key {key}"))),
        }
        Ok(())
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub(crate) fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

impl fmt::Display for BottomKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BottomKind::Conv => "conv",
            BottomKind::Aggregation => "aggregation",
        })
    }
}

impl FromStr for BottomKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conv" => Ok(BottomKind::Conv),
            "aggregation" => Ok(BottomKind::Aggregation),
            _ => Err(Error::Config(format!("unknown bottom kind {s:?}"))),
        }
    }
}

impl fmt::Display for UpsampleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            UpsampleKind::Deconv => "deconv",
            UpsampleKind::AggregationDeconv => "aggregation-deconv",
        })
    }
}

impl FromStr for UpsampleKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deconv" => Ok(UpsampleKind::Deconv),
            "aggregation-deconv" => Ok(UpsampleKind::AggregationDeconv),
            _ => Err(Error::Config(format!("unknown upsample kind {s:?}"))),
        }
    }
}

/// The ablation ladder: Model1 through Model5, plus the full network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModelId {
    Model1,
    Model2,
    Model3,
    Model4,
    Model5,
    Full,
}

impl ModelId {
    pub const ALL: [ModelId; 6] = [
        ModelId::Model1,
        ModelId::Model2,
        ModelId::Model3,
        ModelId::Model4,
        ModelId::Model5,
        ModelId::Full,
    ];
}

impl fmt::Display for ModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelId::Model1 => "model1",
            ModelId::Model2 => "model2",
            ModelId::Model3 => "model3",
            ModelId::Model4 => "model4",
            ModelId::Model5 => "model5",
            ModelId::Full => "full",
        })
    }
}

impl FromStr for ModelId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "1" | "model1" => Ok(ModelId::Model1),
            "2" | "model2" => Ok(ModelId::Model2),
            "3" | "model3" => Ok(ModelId::Model3),
            "4" | "model4" => Ok(ModelId::Model4),
            "5" | "model5" => Ok(ModelId::Model5),
            "full" => Ok(ModelId::Full),
            _ => Err(Error::Config(format!("unknown model id {s:?}; expected 1-5 or full"))),
        }
    }
}

/// The configuration implementing one ablation variant; width, class count
/// and training hyper-parameters are taken from `base`.
///
/// * Model1: plain U-Net, strided conv/deconv, convolutional bottom, no
///   short-range residuals.
/// * Model2: Model1 with residual input/down/merge/output blocks.
/// * Model3: Model2 with the deepest up-sampling block replaced by an
///   aggregation up-sampling block.
/// * Model4: Model2 with both up-sampling blocks replaced.
/// * Model5: Model2 with the bottom replaced by an aggregation block.
/// * Full: Model5 with both up-sampling blocks replaced.
pub fn make_ablation(id: ModelId, base: &NetworkConfig) -> NetworkConfig {
    let mut cfg = base.clone();
    cfg.short_residuals = id != ModelId::Model1;
    cfg.bottom_kind = match id {
        ModelId::Model5 | ModelId::Full => BottomKind::Aggregation,
        _ => BottomKind::Conv,
    };
    cfg.upsample_kind = match id {
        ModelId::Model3 | ModelId::Model4 | ModelId::Full => UpsampleKind::AggregationDeconv,
        _ => UpsampleKind::Deconv,
    };
    cfg.first_up_only_aggregation = id == ModelId::Model3;
    cfg
}
