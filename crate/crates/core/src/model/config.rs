use serde::{Deserialize, Serialize};

use crate::engine::SoftmaxMode;
use crate::error::{Error, Result};

/// Architecture and ablation switches.
///
/// Per-level vectors (`group_counts`, `radii`, `single_radius`, `sa_kernels`,
/// `fp_kernels`) must all have one entry per abstraction level. `fp_kernels`
/// is ordered coarse to fine, so its last entry feeds the classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub group_counts: Vec<usize>,
    /// Grouping radii per level when multiscale grouping is enabled.
    pub radii: Vec<Vec<f64>>,
    /// Grouping radius per level when multiscale grouping is disabled.
    pub single_radius: Vec<f64>,
    /// Points per group, shared by every scale.
    pub group_size: usize,
    pub sa_kernels: Vec<Vec<usize>>,
    pub fp_kernels: Vec<Vec<usize>>,
    /// Channel width of the point-attention projections.
    pub attention_reduction: usize,
    /// Upper bound on the point-attention matrix side `group_size * attention_reduction`.
    pub attention_cap: usize,
    pub softmax_mode: SoftmaxMode,
    pub enable_pam: bool,
    pub enable_gam: bool,
    pub enable_msg: bool,
    pub idw_neighbors: usize,
    /// Concatenate the raw per-point feature channels at the last propagation level.
    pub input_skip: bool,
    /// Optional names for the class indices.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub class_names: Vec<String>,
}

/// The ablation strategies: point attention, group attention, multiscale grouping.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    Base,
    P,
    G,
    M,
    Pm,
    Gm,
    Pg,
    Pgm,
}

impl Strategy {
    pub const ALL: [Strategy; 8] = [
        Strategy::Base,
        Strategy::M,
        Strategy::G,
        Strategy::Gm,
        Strategy::P,
        Strategy::Pm,
        Strategy::Pg,
        Strategy::Pgm,
    ];

    pub fn flags(self) -> (bool, bool, bool) {
        match self {
            Strategy::Base => (false, false, false),
            Strategy::P => (true, false, false),
            Strategy::G => (false, true, false),
            Strategy::M => (false, false, true),
            Strategy::Pm => (true, false, true),
            Strategy::Gm => (false, true, true),
            Strategy::Pg => (true, true, false),
            Strategy::Pgm => (true, true, true),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Base => "BASE",
            Strategy::P => "P",
            Strategy::G => "G",
            Strategy::M => "M",
            Strategy::Pm => "PM",
            Strategy::Gm => "GM",
            Strategy::Pg => "PG",
            Strategy::Pgm => "PGM",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name().eq_ignore_ascii_case(s))
    }
}

impl ModelConfig {
    /// Four levels with the full-size kernel plan.
    pub fn full(num_classes: usize) -> Self {
        Self {
            num_classes,
            group_counts: vec![256, 128, 64, 32],
            radii: vec![vec![0.05, 0.1], vec![0.1, 0.2], vec![0.2, 0.4], vec![0.4, 0.8]],
            single_radius: vec![0.1, 0.2, 0.4, 0.8],
            group_size: 32,
            sa_kernels: vec![
                vec![32, 32, 64],
                vec![64, 64, 128],
                vec![128, 128, 256],
                vec![256, 256, 512],
            ],
            fp_kernels: vec![vec![256, 256], vec![256, 256], vec![256, 128], vec![128, 128, 128]],
            attention_reduction: 64,
            attention_cap: 4096,
            softmax_mode: SoftmaxMode::Row,
            enable_pam: true,
            enable_gam: true,
            enable_msg: true,
            idw_neighbors: 3,
            input_skip: false,
            class_names: Vec::new(),
        }
    }

    /// Two small levels that train in seconds on one core.
    pub fn desk(num_classes: usize) -> Self {
        Self {
            num_classes,
            group_counts: vec![64, 16],
            radii: vec![vec![0.1, 0.2], vec![0.2, 0.4]],
            single_radius: vec![0.2, 0.4],
            group_size: 16,
            sa_kernels: vec![vec![16, 16, 32], vec![32, 32, 64]],
            fp_kernels: vec![vec![64, 64], vec![64, 64, 64]],
            attention_reduction: 8,
            attention_cap: 4096,
            softmax_mode: SoftmaxMode::Row,
            enable_pam: true,
            enable_gam: true,
            enable_msg: true,
            idw_neighbors: 3,
            input_skip: true,
            class_names: Vec::new(),
        }
    }

    pub fn with_strategy(mut self, strategy: Strategy) -> Self {
        let (p, g, m) = strategy.flags();
        self.enable_pam = p;
        self.enable_gam = g;
        self.enable_msg = m;
        self
    }

    pub fn strategy(&self) -> Strategy {
        Strategy::ALL
            .into_iter()
            .find(|s| s.flags() == (self.enable_pam, self.enable_gam, self.enable_msg))
            .expect("every flag combination is a strategy")
    }

    pub fn levels(&self) -> usize {
        self.group_counts.len()
    }

    /// Radii used at `level` under the current multiscale switch.
    pub fn level_radii(&self, level: usize) -> Vec<f64> {
        if self.enable_msg {
            self.radii[level].clone()
        } else {
            vec![self.single_radius[level]]
        }
    }

    /// Output width of abstraction level `level` (all scales concatenated).
    pub fn level_width(&self, level: usize) -> usize {
        let last = *self.sa_kernels[level].last().expect("validated");
        last * self.level_radii(level).len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let l = self.levels();
        if l == 0 {
            return bad("at least one abstraction level is required".into());
        }
        for (name, len) in [
            ("radii", self.radii.len()),
            ("single_radius", self.single_radius.len()),
            ("sa_kernels", self.sa_kernels.len()),
            ("fp_kernels", self.fp_kernels.len()),
        ] {
            if len != l {
                return bad(format!("{name} has {len} levels, group_counts has {l}"));
            }
        }
        if self.num_classes < 1 {
            return bad("num_classes must be >= 1".into());
        }
        if !self.class_names.is_empty() && self.class_names.len() != self.num_classes {
            return bad(format!(
                "{} class names for {} classes",
                self.class_names.len(),
                self.num_classes
            ));
        }
        if self.group_size == 0 || self.group_counts.contains(&0) {
            return bad("group sizes and counts must be positive".into());
        }
        if self.radii.iter().any(Vec::is_empty)
            || self
                .radii
                .iter()
                .flatten()
                .chain(&self.single_radius)
                .any(|r| !(*r > 0.0))
        {
            return bad("radii must be positive and every level needs at least one".into());
        }
        if self
            .sa_kernels
            .iter()
            .chain(&self.fp_kernels)
            .any(|k| k.is_empty() || k.contains(&0))
        {
            return bad("every kernel plan needs at least one positive width".into());
        }
        if self.attention_reduction == 0 || self.idw_neighbors == 0 {
            return bad("attention_reduction and idw_neighbors must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_consistent() {
        ModelConfig::full(9).validate().unwrap();
        ModelConfig::desk(4).validate().unwrap();
        assert_eq!(ModelConfig::full(9).level_width(3), 1024);
        assert_eq!(ModelConfig::full(9).with_strategy(Strategy::Base).level_width(3), 512);
    }

    #[test]
    fn strategies_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(ModelConfig::desk(2).with_strategy(s).strategy(), s);
            assert_eq!(Strategy::parse(s.name()), Some(s));
        }
    }

    #[test]
    fn inconsistent_levels_rejected() {
        let mut c = ModelConfig::desk(4);
        c.fp_kernels.pop();
        assert!(c.validate().is_err());
    }
}
