use serde::{Deserialize, Serialize};

use crate::entity_ingest::{EMBEDDING_DIM, NUM_LABELS};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub shallow_channels: usize,
    pub patch: usize,
    pub heads: usize,
    pub ffn_expansion: usize,
    pub mask_ratio: f64,
    pub num_labels: usize,
    pub embedding_dim: usize,
    pub leaky_slope: f64,
    pub layer_norm_eps: f64,
    pub use_ca: bool,
    pub use_ta: bool,
    pub use_cgha: bool,
    pub use_text: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            shallow_channels: 32,
            patch: 16,
            heads: 4,
            ffn_expansion: 2,
            mask_ratio: 0.6,
            num_labels: NUM_LABELS,
            embedding_dim: EMBEDDING_DIM,
            leaky_slope: 0.2,
            layer_norm_eps: 1e-5,
            use_ca: true,
            use_ta: true,
            use_cgha: true,
            use_text: true,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.shallow_channels / self.heads
    }

    /// Channels of the shared representation fed to both heads.
    pub fn shared_channels(&self) -> usize {
        2 * self.shallow_channels
    }

    /// Input/output channels of the three reconstructor convolutions.
    pub fn reconstructor_plan(&self) -> [(usize, usize); 3] {
        let c = self.shallow_channels;
        [(2 * c, c), (c, c / 2), (c / 2, 1)]
    }

    /// Entity-guided attention only runs when entity text is in use.
    pub fn cgha_active(&self) -> bool {
        self.use_cgha && self.use_text
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |arg: &'static str, why: &str| Err(Error::invalid(arg, why.to_string()));
        if self.shallow_channels < 2 || self.shallow_channels % 2 != 0 {
            return bad("shallow_channels", "must be even and at least 2");
        }
        if self.heads == 0 || self.shallow_channels % self.heads != 0 {
            return bad("heads", "must divide shallow_channels");
        }
        if self.patch == 0 {
            return bad("patch", "must be positive");
        }
        if self.ffn_expansion == 0 {
            return bad("ffn_expansion", "must be positive");
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return bad("mask_ratio", "must lie in [0, 1)");
        }
        if self.num_labels == 0 || self.embedding_dim == 0 {
            return bad("num_labels", "label and embedding sizes must be positive");
        }
        if !(self.layer_norm_eps > 0.0) {
            return bad("layer_norm_eps", "must be positive");
        }
        Ok(())
    }

    /// Checks that an `H×W` input tiles into whole windows.
    pub fn check_extent(&self, h: usize, w: usize) -> Result<()> {
        if h == 0 || w == 0 || h % self.patch != 0 || w % self.patch != 0 {
            return Err(Error::shape(
                "model input",
                format!("{h}x{w} is not a multiple of the {0}x{0} window", self.patch),
            ));
        }
        Ok(())
    }
}
