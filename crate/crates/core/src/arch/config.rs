use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of encoder (and decoder) levels; fixed by the architecture.
pub const LEVELS: usize = 3;

#[derive(Clone, Copy, PartialEq, Eq, Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Concatenate the attention and pooling arms, then project with a 1×1 conv.
    #[default]
    ConcatThenProject,
    /// Project the pooling arm to the attention arm's channels and add.
    Add,
}

#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DropBlockConfig {
    pub block_size: usize,
    pub keep_prob: f64,
}

impl Default for DropBlockConfig {
    fn default() -> Self {
        DropBlockConfig {
            block_size: 7,
            keep_prob: 0.9,
        }
    }
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    /// Explicit per-level widths; `None` means `base·[1, 2, 4]`.
    pub level_channels: Option<Vec<usize>>,
    pub bottleneck_channels: usize,
    /// Dilation rates of the cascaded DAC stages.
    pub dac_rates: Vec<usize>,
    /// Adds the DAC input to the branch sum.
    pub dac_residual: bool,
    pub mkp_kernels: Vec<usize>,
    pub fusion_mode: FusionMode,
    pub use_sa: bool,
    pub use_dac: bool,
    pub use_mkp: bool,
    pub dropblock: DropBlockConfig,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            in_channels: 3,
            base_channels: 16,
            level_channels: None,
            bottleneck_channels: 128,
            dac_rates: vec![1, 3, 5],
            dac_residual: true,
            mkp_kernels: vec![2, 3, 5, 6],
            fusion_mode: FusionMode::ConcatThenProject,
            use_sa: true,
            use_dac: true,
            use_mkp: true,
            dropblock: DropBlockConfig::default(),
            seed: 0,
        }
    }
}

impl NetworkConfig {
    pub fn levels(&self) -> Vec<usize> {
        match &self.level_channels {
            Some(levels) => levels.clone(),
            None => (0..LEVELS).map(|i| self.base_channels << i).collect(),
        }
    }

    pub fn with_modules(mut self, use_sa: bool, use_dac: bool, use_mkp: bool) -> Self {
        self.use_sa = use_sa;
        self.use_dac = use_dac;
        self.use_mkp = use_mkp;
        self
    }

    /// Whether the DAC→MKP arm (and therefore the fusion step) exists.
    pub fn has_context_arm(&self) -> bool {
        self.use_dac || self.use_mkp
    }

    /// Smallest input side accepted by the network.
    pub fn min_input_side(&self) -> usize {
        let bottleneck = if self.use_mkp {
            self.mkp_kernels.iter().copied().max().unwrap_or(1)
        } else {
            1
        };
        bottleneck << LEVELS
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.in_channels == 0 || self.base_channels == 0 || self.bottleneck_channels == 0 {
            return fail("channel counts must be positive".into());
        }
        let levels = self.levels();
        if levels.len() != LEVELS {
            return fail(format!(
                "expected exactly {LEVELS} level widths, got {}",
                levels.len()
            ));
        }
        if levels.contains(&0) {
            return fail("level widths must be positive".into());
        }
        if self.dac_rates.is_empty() || self.dac_rates.contains(&0) {
            return fail(format!(
                "dac_rates must be non-empty and positive: {:?}",
                self.dac_rates
            ));
        }
        if self.mkp_kernels.is_empty() || self.mkp_kernels.contains(&0) {
            return fail(format!(
                "mkp_kernels must be non-empty and positive: {:?}",
                self.mkp_kernels
            ));
        }
        let db = self.dropblock;
        if db.block_size == 0 || db.block_size.is_multiple_of(2) {
            return fail(format!(
                "dropblock block_size must be odd, got {}",
                db.block_size
            ));
        }
        if !(db.keep_prob > 0.0 && db.keep_prob <= 1.0) {
            return fail(format!(
                "dropblock keep_prob must lie in (0, 1], got {}",
                db.keep_prob
            ));
        }
        Ok(())
    }

    /// Compact JSON with sorted keys; stable across runs.
    pub fn to_canonical_json(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        serde_json::to_string(&value).expect("json value serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: NetworkConfig = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("network config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
