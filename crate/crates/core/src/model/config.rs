use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Attention,
    #[serde(rename = "maxpool")]
    MaxPool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Streams {
    Both,
    CoordsOnly,
    NormalsOnly,
    SingleConcat,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionLevel {
    High,
    Low,
}

/// Hyperparameters and ablation switches. `head_widths` lists the hidden
/// widths of the prediction head; its last stage always emits
/// `num_classes` logits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub k: usize,
    pub stream_widths: Vec<usize>,
    pub fusion_width: usize,
    pub head_widths: Vec<usize>,
    pub leaky_slope: f64,
    pub c_stream_agg: Aggregation,
    pub n_stream_agg: Aggregation,
    pub streams: Streams,
    pub fusion_level: FusionLevel,
    pub include_self: bool,
    /// Hidden widths of the attention score network (empty: one affine map).
    pub attention_hidden: Vec<usize>,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_classes: 8,
            k: 32,
            stream_widths: vec![64, 128, 256],
            fusion_width: 512,
            head_widths: vec![512, 256, 128],
            leaky_slope: 0.2,
            c_stream_agg: Aggregation::Attention,
            n_stream_agg: Aggregation::MaxPool,
            streams: Streams::Both,
            fusion_level: FusionLevel::High,
            include_self: false,
            attention_hidden: Vec::new(),
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let defaults = ModelConfig::default();
        if self.num_classes < 2 {
            return bad(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if self.k == 0 {
            return bad("k must be positive".into());
        }
        if self.stream_widths.is_empty() {
            return bad("stream_widths must list at least one layer".into());
        }
        let zero = |w: &[usize]| w.contains(&0);
        if zero(&self.stream_widths)
            || zero(&self.head_widths)
            || zero(&self.attention_hidden)
            || self.fusion_width == 0
        {
            return bad("layer widths must be positive".into());
        }
        if !self.leaky_slope.is_finite() || self.leaky_slope < 0.0 {
            return bad(format!(
                "leaky_slope must be finite and non-negative, got {}",
                self.leaky_slope
            ));
        }
        if self.bn_eps.is_nan() || self.bn_eps <= 0.0 {
            return bad(format!("bn_eps must be positive, got {}", self.bn_eps));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad(format!("bn_momentum must lie in [0, 1], got {}", self.bn_momentum));
        }
        match self.streams {
            Streams::NormalsOnly if self.c_stream_agg != defaults.c_stream_agg => {
                return bad("c_stream_agg has no effect with streams = normals_only".into())
            }
            Streams::CoordsOnly | Streams::SingleConcat if self.n_stream_agg != defaults.n_stream_agg => {
                return bad(format!(
                    "n_stream_agg has no effect with streams = {}",
                    self.streams.name()
                ))
            }
            Streams::SingleConcat if self.c_stream_agg != Aggregation::Attention => {
                return bad("streams = single_concat uses attention aggregation".into())
            }
            _ => {}
        }
        if self.fusion_level == FusionLevel::Low && self.streams != Streams::Both {
            return bad(format!(
                "fusion_level = low needs both streams, got streams = {}",
                self.streams.name()
            ));
        }
        Ok(())
    }
}

impl Streams {
    pub fn name(self) -> &'static str {
        match self {
            Streams::Both => "both",
            Streams::CoordsOnly => "coords_only",
            Streams::NormalsOnly => "normals_only",
            Streams::SingleConcat => "single_concat",
        }
    }
}

/// Named architecture variants used in ablation studies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Full,
    CoordsOnly,
    NormalsOnly,
    SingleConcat,
    MaxMax,
    AttnAttn,
    MaxAttn,
    LowFusion,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Full,
        Variant::CoordsOnly,
        Variant::NormalsOnly,
        Variant::SingleConcat,
        Variant::MaxMax,
        Variant::AttnAttn,
        Variant::MaxAttn,
        Variant::LowFusion,
    ];

    /// Accepted spellings, including the aliases of the full model.
    pub const NAMES: [&'static str; 10] = [
        "TSGCNet",
        "TSGCNet-C",
        "TSGCNet-N",
        "TSGCNet-S",
        "M+M",
        "A+A",
        "M+A",
        "A+M",
        "L-fusion",
        "H-fusion",
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "TSGCNet",
            Variant::CoordsOnly => "TSGCNet-C",
            Variant::NormalsOnly => "TSGCNet-N",
            Variant::SingleConcat => "TSGCNet-S",
            Variant::MaxMax => "M+M",
            Variant::AttnAttn => "A+A",
            Variant::MaxAttn => "M+A",
            Variant::LowFusion => "L-fusion",
        }
    }

    /// `base` with this variant's architecture switches applied. Widths,
    /// K, class count and seed are kept.
    pub fn apply(self, base: &ModelConfig) -> ModelConfig {
        use Aggregation::{Attention as A, MaxPool as M};
        let d = ModelConfig::default();
        let mut c = ModelConfig {
            c_stream_agg: d.c_stream_agg,
            n_stream_agg: d.n_stream_agg,
            streams: Streams::Both,
            fusion_level: FusionLevel::High,
            ..base.clone()
        };
        match self {
            Variant::Full => {}
            Variant::CoordsOnly => c.streams = Streams::CoordsOnly,
            Variant::NormalsOnly => c.streams = Streams::NormalsOnly,
            Variant::SingleConcat => c.streams = Streams::SingleConcat,
            Variant::MaxMax => (c.c_stream_agg, c.n_stream_agg) = (M, M),
            Variant::AttnAttn => (c.c_stream_agg, c.n_stream_agg) = (A, A),
            Variant::MaxAttn => (c.c_stream_agg, c.n_stream_agg) = (M, A),
            Variant::LowFusion => c.fusion_level = FusionLevel::Low,
        }
        c
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A+M" | "H-fusion" => Ok(Variant::Full),
            _ => Variant::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| {
                Error::Usage(format!(
                    "unknown variant {s:?}; valid names: {}",
                    Variant::NAMES.join(", ")
                ))
            }),
        }
    }
}
