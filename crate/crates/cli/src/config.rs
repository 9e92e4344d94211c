//! Run configuration shared by the subcommands.

use std::collections::{BTreeMap, BTreeSet};
use std::str::FromStr;

use clap::ValueEnum;
use serde::Serialize;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
    Pretty,
}

/// Problem sizes for `bench`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SizePreset {
    Small,
    Medium,
    Large,
}

impl SizePreset {
    pub fn name(self) -> &'static str {
        match self {
            SizePreset::Small => "small",
            SizePreset::Medium => "medium",
            SizePreset::Large => "large",
        }
    }

    /// NHWC group norm input; the GELU input has the same element count.
    pub fn group_norm_shape(self) -> [usize; 4] {
        match self {
            SizePreset::Small => [1, 16, 16, 64],
            SizePreset::Medium => [1, 32, 32, 128],
            SizePreset::Large => [1, 64, 64, 320],
        }
    }

    /// Query and key count of the self-attention benchmark.
    pub fn attention_tokens(self) -> usize {
        match self {
            SizePreset::Small => 128,
            SizePreset::Medium => 512,
            SizePreset::Large => 1024,
        }
    }

    /// (side, channels) of the square conv benchmark.
    pub fn conv(self) -> (usize, usize) {
        match self {
            SizePreset::Small => (16, 32),
            SizePreset::Medium => (32, 64),
            SizePreset::Large => (64, 128),
        }
    }
}

impl FromStr for SizePreset {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        match s {
            "small" => Ok(SizePreset::Small),
            "medium" => Ok(SizePreset::Medium),
            "large" => Ok(SizePreset::Large),
            _ => Err(CliError::Usage(format!(
                "unknown size preset `{s}` (small, medium, large)"
            ))),
        }
    }
}

/// Ops checked by `verify`, with their default max relative error.
pub const DEFAULT_TOLERANCES: [(&str, f64); 8] = [
    ("fused_group_norm", 1e-5),
    ("fused_gelu", 1e-6),
    ("fused_gated_gelu", 1e-6),
    ("softmax_reduce", 1e-6),
    ("partially_fused_attention", 1e-4),
    ("tiled_attention", 1e-4),
    ("winograd_m2", 1e-4),
    ("winograd_m4", 1e-3),
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub seed: u64,
    pub sizes: Vec<SizePreset>,
    pub tolerances: BTreeMap<String, f64>,
    pub format: Format,
    /// Relative fault injected into `fused_gelu` outputs during `verify`.
    pub perturb: Option<f64>,
    pub threads: Option<usize>,
    pub flash_dims: BTreeSet<usize>,
    /// Randomized cases per op in `verify`, edge cases included.
    pub cases: usize,
    /// Timed repetitions per kernel in `bench`, after one warmup.
    pub repeats: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            sizes: vec![SizePreset::Small, SizePreset::Medium],
            tolerances: DEFAULT_TOLERANCES.iter().map(|&(k, v)| (k.to_string(), v)).collect(),
            format: Format::Json,
            perturb: None,
            threads: None,
            flash_dims: fusekit::fusion_planner::default_flash_dims(),
            cases: 60,
            repeats: 5,
        }
    }
}

impl RunConfig {
    /// Applies `op=value` overrides; every tolerance must stay positive.
    pub fn with_tolerances(mut self, overrides: &[String]) -> Result<Self, CliError> {
        for item in overrides {
            let (op, value) = item
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("tolerance `{item}` is not op=value")))?;
            let slot = self
                .tolerances
                .get_mut(op)
                .ok_or_else(|| CliError::Usage(format!("no verified op named `{op}`")))?;
            let value: f64 = value
                .parse()
                .map_err(|_| CliError::Usage(format!("tolerance `{value}` is not a number")))?;
            if !(value > 0.0 && value.is_finite()) {
                return Err(CliError::Usage(format!(
                    "tolerance for `{op}` must be positive, got {value}"
                )));
            }
            *slot = value;
        }
        Ok(self)
    }

    pub fn tolerance(&self, op: &str) -> f64 {
        self.tolerances[op]
    }
}

pub fn parse_sizes(s: &str) -> Result<Vec<SizePreset>, CliError> {
    let mut sizes: Vec<SizePreset> = s
        .split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(str::parse)
        .collect::<Result<_, _>>()?;
    sizes.sort();
    sizes.dedup();
    if sizes.is_empty() {
        return Err(CliError::Usage("--sizes needs at least one preset".into()));
    }
    Ok(sizes)
}

/// Comma-separated head dimensions; an empty string selects none.
pub fn parse_flash_dims(s: &str) -> Result<BTreeSet<usize>, CliError> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| {
            p.parse()
                .map_err(|_| CliError::Usage(format!("head dimension `{p}` is not an integer")))
        })
        .collect()
}
