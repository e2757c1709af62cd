use serde::{Deserialize, Serialize};

use crate::diff::Padding;
use crate::error::{Error, Result};

/// Strided convolutional frame encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub channels: usize,
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    pub padding: Padding,
    /// Samples per training chunk.
    pub chunk_samples: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            channels: 256,
            widths: vec![10, 8, 4, 4, 4],
            strides: vec![5, 4, 2, 2, 2],
            padding: Padding::SameStrided,
            chunk_samples: 20480,
        }
    }
}

impl EncoderConfig {
    /// Input samples per latent frame.
    pub fn hop(&self) -> usize {
        self.strides.iter().product()
    }

    /// Latent frames per chunk.
    pub fn frames(&self) -> Result<usize> {
        let mut len = self.chunk_samples;
        for (&w, &s) in self.widths.iter().zip(&self.strides) {
            len = crate::diff::conv_output_len(len, w, s, self.padding)?.0;
        }
        Ok(len)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    Linear,
    Attention,
}

/// Peak-picking parameters used whenever boundaries are detected from
/// latents, during training or inference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub prominence: f64,
    pub min_separation: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            prominence: 0.05,
            min_separation: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Frame-level context builder; when off the latents are the predictors.
    pub context_enabled: bool,
    pub context_layers: usize,
    pub context_units: usize,
    /// Frame-level prediction heads and their loss.
    pub prediction_enabled: bool,
    pub segment_level_enabled: bool,
    pub segment_hidden: usize,
    pub segment_context_layers: usize,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "K_s")]
    pub k_s: usize,
    #[serde(rename = "M_s")]
    pub m_s: usize,
    pub head_kind: HeadKind,
    pub attention_heads: usize,
    pub attention_ff: usize,
    pub dropout_p: f64,
    /// Multiplier on the default initialisation range of the prediction
    /// emitters.
    pub head_init_scale: f64,
    /// Negatives per frame-level term.
    pub negatives: usize,
    pub segment_negatives: usize,
    pub adjacent_loss_enabled: bool,
    pub adjacent_loss_weight: f64,
    pub adjacent_negatives: usize,
    pub adjacent_temperature: f64,
    /// Use reference phone boundaries instead of detected ones for the
    /// segment level.
    pub oracle_boundaries: bool,
    pub detector: DetectorConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            context_enabled: true,
            context_layers: 2,
            context_units: 256,
            prediction_enabled: true,
            segment_level_enabled: true,
            segment_hidden: 512,
            segment_context_layers: 2,
            k: 6,
            m: 12,
            k_s: 2,
            m_s: 4,
            head_kind: HeadKind::Attention,
            attention_heads: 8,
            attention_ff: 2048,
            dropout_p: 0.1,
            head_init_scale: 0.1,
            negatives: 128,
            segment_negatives: 16,
            adjacent_loss_enabled: false,
            adjacent_loss_weight: 1.0,
            adjacent_negatives: 16,
            adjacent_temperature: 0.1,
            oracle_boundaries: false,
            detector: DetectorConfig::default(),
        }
    }
}

/// Named model rows used in the ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Adjacent-frame contrastive loss only, no prediction heads.
    Kreuk,
    Acpc,
    AcpcAdj,
    Macpc,
    MacpcAdj,
    /// One-step prediction at both levels with the adjacent loss.
    ScpcLike,
    CpcM1,
    CpcM12NoAr,
    CpcM12,
}

impl Variant {
    pub const ALL: [Variant; 9] = [
        Variant::Kreuk,
        Variant::Acpc,
        Variant::AcpcAdj,
        Variant::Macpc,
        Variant::MacpcAdj,
        Variant::ScpcLike,
        Variant::CpcM1,
        Variant::CpcM12NoAr,
        Variant::CpcM12,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Kreuk => "kreuk",
            Variant::Acpc => "acpc",
            Variant::AcpcAdj => "acpc-adj",
            Variant::Macpc => "macpc",
            Variant::MacpcAdj => "macpc-adj",
            Variant::ScpcLike => "scpc-like",
            Variant::CpcM1 => "cpc-m1",
            Variant::CpcM12NoAr => "cpc-m12-no-ar",
            Variant::CpcM12 => "cpc-m12",
        }
    }

    /// `base` with this variant's flags and horizons; dimensions untouched.
    pub fn apply(self, base: &ModelConfig) -> ModelConfig {
        let mut c = base.clone();
        let (ctx, pred, seg, adj, k, m) = match self {
            Variant::Kreuk => (false, false, false, true, c.k, c.m),
            Variant::Acpc => (true, true, false, false, 6, 12),
            Variant::AcpcAdj => (true, true, false, true, 6, 12),
            Variant::Macpc => (true, true, true, false, 6, 12),
            Variant::MacpcAdj => (true, true, true, true, 6, 12),
            Variant::ScpcLike => (false, true, true, true, 1, 1),
            Variant::CpcM1 => (true, true, false, false, 1, 1),
            Variant::CpcM12NoAr => (false, true, false, false, 12, 12),
            Variant::CpcM12 => (true, true, false, false, 12, 12),
        };
        c.context_enabled = ctx;
        c.prediction_enabled = pred;
        c.segment_level_enabled = seg;
        c.adjacent_loss_enabled = adj;
        c.k = k;
        c.m = m;
        if self == Variant::ScpcLike {
            c.k_s = 1;
            c.m_s = 1;
        } else if seg {
            c.k_s = 2;
            c.m_s = 4;
        }
        c
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
            Error::InvalidArgument(format!("unknown variant `{s}`; expected one of {}", names.join(", ")))
        })
    }
}

impl ModelConfig {
    /// The reduced desk-scale configuration: 128-dim latents, one-layer
    /// context networks, a linear head.
    pub fn reduced() -> Self {
        ModelConfig {
            encoder: EncoderConfig {
                channels: 128,
                ..EncoderConfig::default()
            },
            context_layers: 1,
            context_units: 128,
            segment_hidden: 256,
            segment_context_layers: 1,
            head_kind: HeadKind::Linear,
            attention_heads: 4,
            attention_ff: 512,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        if e.channels == 0 {
            return Err(Error::config("model.encoder.channels", "must be positive"));
        }
        if e.widths.is_empty() || e.widths.len() != e.strides.len() {
            return Err(Error::config(
                "model.encoder.widths",
                "needs one width per stride and at least one layer",
            ));
        }
        for (i, (&w, &s)) in e.widths.iter().zip(&e.strides).enumerate() {
            if s == 0 || w < s {
                return Err(Error::config(
                    format!("model.encoder.strides[{i}]"),
                    format!("stride {s} must be positive and not exceed width {w}"),
                ));
            }
        }
        if e.chunk_samples == 0 {
            return Err(Error::config("model.encoder.chunk_samples", "must be positive"));
        }
        e.frames()
            .map_err(|err| Error::config("model.encoder.chunk_samples", err.to_string()))?;
        let positive = [
            ("model.context_layers", self.context_layers),
            ("model.context_units", self.context_units),
            ("model.segment_hidden", self.segment_hidden),
            ("model.segment_context_layers", self.segment_context_layers),
            ("model.K", self.k),
            ("model.M", self.m),
            ("model.K_s", self.k_s),
            ("model.M_s", self.m_s),
            ("model.attention_heads", self.attention_heads),
            ("model.attention_ff", self.attention_ff),
            ("model.negatives", self.negatives),
            ("model.segment_negatives", self.segment_negatives),
            ("model.adjacent_negatives", self.adjacent_negatives),
            ("model.detector.min_separation", self.detector.min_separation),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if self.k > self.m {
            return Err(Error::config(
                "model.K",
                format!("K = {} exceeds M = {}", self.k, self.m),
            ));
        }
        if self.k_s > self.m_s {
            return Err(Error::config(
                "model.K_s",
                format!("K_s = {} exceeds M_s = {}", self.k_s, self.m_s),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::config("model.dropout_p", "must lie in [0, 1)"));
        }
        if !(self.adjacent_loss_weight >= 0.0 && self.adjacent_loss_weight.is_finite()) {
            return Err(Error::config(
                "model.adjacent_loss_weight",
                "must be finite and nonnegative",
            ));
        }
        if !(self.adjacent_temperature > 0.0 && self.adjacent_temperature.is_finite()) {
            return Err(Error::config("model.adjacent_temperature", "must be positive"));
        }
        if !(self.head_init_scale >= 0.0 && self.head_init_scale.is_finite()) {
            return Err(Error::config("model.head_init_scale", "must be nonnegative"));
        }
        if !self.detector.prominence.is_finite() {
            return Err(Error::config("model.detector.prominence", "must be finite"));
        }
        let units = [
            ("model.context_units", self.predictor_dim(), self.prediction_enabled),
            ("model.context_units", self.context_units, self.segment_level_enabled),
        ];
        for (key, d, used) in units {
            if used && self.head_kind == HeadKind::Attention && d % self.attention_heads != 0 {
                return Err(Error::config(
                    key,
                    format!("{d} not divisible by {} attention heads", self.attention_heads),
                ));
            }
        }
        if !self.prediction_enabled && !self.segment_level_enabled && !self.adjacent_loss_enabled {
            return Err(Error::config("model", "no loss component is enabled"));
        }
        Ok(())
    }

    /// Latent dimension.
    pub fn dim(&self) -> usize {
        self.encoder.channels
    }

    /// Width of the frame-level predictor vectors (contexts or latents).
    pub fn predictor_dim(&self) -> usize {
        if self.context_enabled {
            self.context_units
        } else {
            self.dim()
        }
    }
}
