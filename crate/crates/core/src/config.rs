//! Neck configuration: level range, widths, shift ratio and seeds.

use std::ops::RangeInclusive;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Width of the scale-shift window (offsets -2..=2).
pub const SHIFT_WINDOW: usize = 5;

/// Highest level produced by the (synthetic) backbone in stem mode.
pub const BACKBONE_TOP: usize = 5;

/// Where pyramid levels above the backbone come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ExtraLevels {
    /// Stride-2 3x3 convs on C5 (and ReLU between), RetinaNet style.
    #[default]
    Stem,
    /// The backbone emits every level directly.
    Backbone,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NeckConfig {
    pub l_min: usize,
    pub l_max: usize,
    /// Pyramid width `d`.
    pub channels: usize,
    /// Stage channels for each backbone level, ascending.
    pub backbone_channels: Vec<usize>,
    /// Fraction `1 / r` of channels take part in the scale shift.
    pub shift_ratio: usize,
    pub reference_level: usize,
    pub batch: usize,
    /// `[H0, W0]` at level `l_min`.
    pub base_resolution: [usize; 2],
    pub seed: u64,
    #[serde(default)]
    pub extra_levels: ExtraLevels,
}

impl Default for NeckConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl NeckConfig {
    /// Desk-scale one-stage setting: levels 3-7, d = 64, 64x64 base.
    pub fn desk() -> Self {
        Self {
            l_min: 3,
            l_max: 7,
            channels: 64,
            backbone_channels: vec![512 / 32, 1024 / 32, 2048 / 32],
            shift_ratio: 4,
            reference_level: 4,
            batch: 1,
            base_resolution: [64, 64],
            seed: 0,
            extra_levels: ExtraLevels::Stem,
        }
    }

    /// Smallest setting used for end-to-end gradient checks.
    ///
    /// Batch 2 keeps the 1x1 top level valid for batch statistics.
    pub fn tiny() -> Self {
        Self {
            channels: 8,
            backbone_channels: vec![4, 6, 8],
            shift_ratio: 2,
            batch: 2,
            base_resolution: [16, 16],
            ..Self::desk()
        }
    }

    /// Full-size widths: d = 256 and ResNet-50 stage channels.
    pub fn with_paper_width(mut self) -> Self {
        self.channels = 256;
        self.backbone_channels = self
            .backbone_levels()
            .map(|l| 64 << l.min(BACKBONE_TOP))
            .collect();
        self
    }

    pub fn from_json_file(path: &Path) -> std::result::Result<Self, ConfigLoadError> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn levels(&self) -> RangeInclusive<usize> {
        self.l_min..=self.l_max
    }

    pub fn n_levels(&self) -> usize {
        self.l_max + 1 - self.l_min
    }

    /// Levels emitted by the backbone fixture.
    pub fn backbone_levels(&self) -> RangeInclusive<usize> {
        match self.extra_levels {
            ExtraLevels::Stem => self.l_min..=self.l_max.min(BACKBONE_TOP),
            ExtraLevels::Backbone => self.levels(),
        }
    }

    /// Levels generated by the stem extension (empty in backbone mode).
    pub fn stem_levels(&self) -> RangeInclusive<usize> {
        match self.extra_levels {
            ExtraLevels::Stem => (BACKBONE_TOP + 1).max(self.l_min)..=self.l_max,
            #[allow(clippy::reversed_empty_ranges)]
            ExtraLevels::Backbone => 1..=0,
        }
    }

    /// Input channels of level `level` as seen by the neck.
    pub fn input_channels(&self, level: usize) -> usize {
        if self.stem_levels().contains(&level) {
            self.channels
        } else {
            self.backbone_channels[level - self.l_min]
        }
    }

    /// Spatial extent `(H, W)` of `level`.
    pub fn resolution(&self, level: usize) -> (usize, usize) {
        let f = 1 << (level - self.l_min);
        (self.base_resolution[0] / f, self.base_resolution[1] / f)
    }

    /// Channels moved by the scale shift (`d / r`).
    pub fn shifted_channels(&self) -> usize {
        self.channels / self.shift_ratio
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.l_min >= self.l_max {
            bad.push(format!(
                "l_min ({}) must be below l_max ({})",
                self.l_min, self.l_max
            ));
        } else if self.n_levels() < SHIFT_WINDOW {
            bad.push(format!(
                "need at least {SHIFT_WINDOW} levels, got {}",
                self.n_levels()
            ));
        }
        if self.channels == 0 {
            bad.push("channels must be positive".into());
        }
        if self.shift_ratio == 0 {
            bad.push("shift_ratio must be positive".into());
        } else if !self.channels.is_multiple_of(4 * self.shift_ratio) {
            bad.push(format!(
                "channels ({}) must be divisible by 4 * shift_ratio ({})",
                self.channels,
                4 * self.shift_ratio
            ));
        }
        if self.batch == 0 {
            bad.push("batch must be positive".into());
        }
        if self.l_min < self.l_max {
            let f = 1usize
                .checked_shl((self.l_max - self.l_min) as u32)
                .unwrap_or(usize::MAX);
            for (name, e) in ["H0", "W0"].iter().zip(self.base_resolution) {
                if e == 0 || e % f != 0 {
                    bad.push(format!("{name} ({e}) must be a positive multiple of {f}"));
                }
            }
            if !self.levels().contains(&self.reference_level) {
                bad.push(format!(
                    "reference_level {} outside {}..={}",
                    self.reference_level, self.l_min, self.l_max
                ));
            }
            if self.extra_levels == ExtraLevels::Stem && self.l_min > BACKBONE_TOP {
                bad.push(format!("stem mode needs l_min <= {BACKBONE_TOP}"));
            }
            let want = self.backbone_levels().count();
            if self.backbone_channels.len() != want {
                bad.push(format!(
                    "backbone_channels lists {} stages, expected {want}",
                    self.backbone_channels.len()
                ));
            }
        }
        if self.backbone_channels.contains(&0) {
            bad.push("backbone_channels must be positive".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(bad))
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigLoadError {
    #[error("reading config: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing config: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Invalid(#[from] Error),
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        NeckConfig::desk().validate().unwrap();
        NeckConfig::tiny().validate().unwrap();
        NeckConfig::desk().with_paper_width().validate().unwrap();
        for r in [1, 2, 4, 8] {
            NeckConfig {
                shift_ratio: r,
                ..NeckConfig::desk()
            }
            .validate()
            .unwrap();
        }
    }

    #[test]
    fn paper_width_restores_resnet_stages() {
        let cfg = NeckConfig::desk().with_paper_width();
        assert_eq!(cfg.channels, 256);
        assert_eq!(cfg.backbone_channels, vec![512, 1024, 2048]);
        let two_stage = NeckConfig {
            l_min: 2,
            l_max: 6,
            backbone_channels: vec![8, 16, 32, 64],
            ..NeckConfig::desk()
        }
        .with_paper_width();
        assert_eq!(two_stage.backbone_channels, vec![256, 512, 1024, 2048]);
    }

    #[test]
    fn violations_are_enumerated() {
        let cfg = NeckConfig {
            l_min: 3,
            l_max: 6,
            channels: 20,
            base_resolution: [60, 64],
            ..NeckConfig::desk()
        };
        let Err(Error::InvalidConfig(bad)) = cfg.validate() else {
            panic!("expected invalid config");
        };
        assert!(
            bad.iter().any(|m| m.contains("at least 5 levels")),
            "{bad:?}"
        );
        assert!(bad
            .iter()
            .any(|m| m.contains("divisible by 4 * shift_ratio")));
        assert!(bad.iter().any(|m| m.contains("H0 (60)")));
    }

    #[test]
    fn level_geometry() {
        let cfg = NeckConfig::desk();
        assert_eq!(cfg.resolution(3), (64, 64));
        assert_eq!(cfg.resolution(7), (4, 4));
        assert_eq!(cfg.backbone_levels(), 3..=5);
        assert_eq!(cfg.stem_levels(), 6..=7);
        assert_eq!(cfg.input_channels(4), 32);
        assert_eq!(cfg.input_channels(7), 64);
        let bb = NeckConfig {
            extra_levels: ExtraLevels::Backbone,
            backbone_channels: vec![1, 2, 3, 4, 5],
            ..NeckConfig::desk()
        };
        bb.validate().unwrap();
        assert!(bb.stem_levels().is_empty());
        assert_eq!(bb.input_channels(7), 5);
    }

    #[test]
    fn json_field_names() {
        let json = serde_json::to_value(NeckConfig::desk()).unwrap();
        for key in [
            "l_min",
            "l_max",
            "channels",
            "backbone_channels",
            "shift_ratio",
            "reference_level",
            "batch",
            "base_resolution",
            "seed",
        ] {
            assert!(json.get(key).is_some(), "{key}");
        }
        let text = r#"{"l_min":3,"l_max":7,"channels":64,"backbone_channels":[16,32,64],
            "shift_ratio":4,"reference_level":4,"batch":1,"base_resolution":[64,64],"seed":7}"#;
        let cfg: NeckConfig = serde_json::from_str(text).unwrap();
        assert_eq!(cfg.extra_levels, ExtraLevels::Stem);
        assert!(serde_json::from_str::<NeckConfig>(&text.replace("seed", "sed")).is_err());
    }
}
