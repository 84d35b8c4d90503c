use serde::{Deserialize, Serialize};

use crate::audio::CodecConfig;
use crate::error::{Error, Result};
use crate::visual::{GestureEncoderConfig, LipEncoderConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeparatorConfig {
    pub embed_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub attn_dropout: f64,
    pub dp_input: usize,
    pub dp_hidden: usize,
    pub chunk: usize,
    pub repeats: usize,
}

impl Default for SeparatorConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            heads: 4,
            ffn_dim: 256,
            attn_dropout: 0.3,
            dp_input: 64,
            dp_hidden: 128,
            chunk: 100,
            repeats: 4,
        }
    }
}

impl SeparatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "embed_dim {} must be divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.dp_input != self.embed_dim {
            return Err(Error::Config(format!(
                "dual-path input {} must equal the attention width {}",
                self.dp_input, self.embed_dim
            )));
        }
        if self.chunk < 2 || !self.chunk.is_multiple_of(2) {
            return Err(Error::Config(format!("chunk must be even and >= 2, got {}", self.chunk)));
        }
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.attn_dropout) {
            return Err(Error::Config(format!("attention dropout {} not in [0, 1)", self.attn_dropout)));
        }
        if self.dp_hidden == 0 || self.ffn_dim == 0 {
            return Err(Error::Config("dual-path hidden and FFN widths must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }
}

/// Which visual cues are available for one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CuePresence {
    pub has_lip: bool,
    pub has_gesture: bool,
}

impl CuePresence {
    pub fn new(has_lip: bool, has_gesture: bool) -> Result<Self> {
        if !has_lip && !has_gesture {
            return Err(Error::invalid("at least one visual cue must be present"));
        }
        Ok(Self { has_lip, has_gesture })
    }

    pub const BOTH: CuePresence = CuePresence { has_lip: true, has_gesture: true };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CueSet {
    Lip,
    Gesture,
    Both,
}

impl CueSet {
    pub fn uses_lip(self) -> bool {
        matches!(self, CueSet::Lip | CueSet::Both)
    }

    pub fn uses_gesture(self) -> bool {
        matches!(self, CueSet::Gesture | CueSet::Both)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    Concatenation,
    Attention,
}

/// A row of the comparison table: cues used, how they are fused, and whether the
/// gesture-to-lip alignment loss is added.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VariantSpec {
    pub cues: CueSet,
    pub fusion: Fusion,
    #[serde(default)]
    pub use_infonce: bool,
}

impl VariantSpec {
    pub fn validate(&self) -> Result<()> {
        if self.use_infonce && !self.cues.uses_gesture() {
            return Err(Error::Config("the alignment loss needs the gesture cue".into()));
        }
        Ok(())
    }

    /// Lip-only concatenation baseline.
    pub const LIP_CONCAT: VariantSpec = VariantSpec { cues: CueSet::Lip, fusion: Fusion::Concatenation, use_infonce: false };
    /// Gesture-only concatenation baseline.
    pub const GESTURE_CONCAT: VariantSpec =
        VariantSpec { cues: CueSet::Gesture, fusion: Fusion::Concatenation, use_infonce: false };
    pub const GESTURE_CONCAT_INFONCE: VariantSpec =
        VariantSpec { cues: CueSet::Gesture, fusion: Fusion::Concatenation, use_infonce: true };
    pub const BOTH_CONCAT: VariantSpec = VariantSpec { cues: CueSet::Both, fusion: Fusion::Concatenation, use_infonce: false };
    pub const BOTH_ATTENTION: VariantSpec = VariantSpec { cues: CueSet::Both, fusion: Fusion::Attention, use_infonce: false };
    pub const BOTH_ATTENTION_INFONCE: VariantSpec =
        VariantSpec { cues: CueSet::Both, fusion: Fusion::Attention, use_infonce: true };

    /// Short human label, e.g. `both/attention+nce`.
    pub fn label(&self) -> String {
        let cues = match self.cues {
            CueSet::Lip => "lip",
            CueSet::Gesture => "gesture",
            CueSet::Both => "both",
        };
        let fusion = match self.fusion {
            Fusion::Concatenation => "concat",
            Fusion::Attention => "attention",
        };
        format!("{cues}/{fusion}{}", if self.use_infonce { "+nce" } else { "" })
    }
}

/// Everything needed to rebuild a model's parameter layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub codec: CodecConfig,
    pub separator: SeparatorConfig,
    pub gesture: GestureEncoderConfig,
    pub lip: LipEncoderConfig,
    pub cues: CueSet,
    pub fusion: Fusion,
}

impl ModelConfig {
    pub fn new(variant: VariantSpec) -> Self {
        Self {
            codec: CodecConfig::default(),
            separator: SeparatorConfig::default(),
            gesture: GestureEncoderConfig::default(),
            lip: LipEncoderConfig::lite(),
            cues: variant.cues,
            fusion: variant.fusion,
        }
    }

    /// The small configuration used for overfitting and trend experiments on CPU.
    pub fn desk(variant: VariantSpec) -> Self {
        Self {
            codec: CodecConfig { channels: 64, kernel: 40, encoder_bias: false },
            separator: SeparatorConfig { dp_hidden: 64, repeats: 2, ..SeparatorConfig::default() },
            ..Self::new(variant)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.codec.validate()?;
        self.separator.validate()?;
        self.gesture.validate()?;
        self.lip.validate()?;
        Ok(())
    }

    /// Whether a checkpoint trained for `variant` can be loaded into this layout.
    pub fn supports(&self, variant: VariantSpec) -> bool {
        self.cues == variant.cues && self.fusion == variant.fusion
    }
}
