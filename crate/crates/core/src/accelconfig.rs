//! Hardware configuration: the option set, its JSON file format, and the
//! validation that turns a raw config into the only form the simulators
//! accept.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ControllerType {
    /// MAERI-like flexible linear array with a configurable mapping.
    #[serde(rename = "FLEX_LINEAR", alias = "MAERI_DENSE_WORKLOAD")]
    FlexLinear,
    /// SIGMA-like sparse GEMM engine.
    #[serde(rename = "SPARSE_GEMM", alias = "SIGMA_SPARSE_GEMM")]
    SparseGemm,
    /// TPU-like output-stationary systolic mesh.
    #[serde(rename = "SYSTOLIC_OS", alias = "TPU_OS_DENSE")]
    SystolicOs,
}

impl fmt::Display for ControllerType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ControllerType::FlexLinear => "FLEX_LINEAR",
            ControllerType::SparseGemm => "SPARSE_GEMM",
            ControllerType::SystolicOs => "SYSTOLIC_OS",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MsNetworkType {
    Linear,
    OsMesh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ReduceNetworkType {
    AsNetwork,
    FeNetwork,
    TemporalRn,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct HardwareConfig {
    pub controller_type: ControllerType,
    pub ms_network_type: MsNetworkType,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ms_size: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ms_rows: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ms_cols: Option<u32>,
    pub dn_bw: u32,
    pub rn_bw: u32,
    pub reduce_network_type: ReduceNetworkType,
    pub sparsity_ratio: u32,
    pub accumulation_buffer: bool,
}

impl HardwareConfig {
    /// Linear array of `ms_size` multipliers with equal bandwidths.
    pub fn flex_linear(ms_size: u32, bw: u32) -> Self {
        HardwareConfig {
            controller_type: ControllerType::FlexLinear,
            ms_network_type: MsNetworkType::Linear,
            ms_size: Some(ms_size),
            ms_rows: None,
            ms_cols: None,
            dn_bw: bw,
            rn_bw: bw,
            reduce_network_type: ReduceNetworkType::AsNetwork,
            sparsity_ratio: 0,
            accumulation_buffer: false,
        }
    }

    pub fn sparse_gemm(ms_size: u32, bw: u32, sparsity_ratio: u32) -> Self {
        HardwareConfig {
            controller_type: ControllerType::SparseGemm,
            sparsity_ratio,
            ..HardwareConfig::flex_linear(ms_size, bw)
        }
    }

    /// Mesh with the bandwidths already at their mandated values.
    pub fn systolic_os(rows: u32, cols: u32) -> Self {
        HardwareConfig {
            controller_type: ControllerType::SystolicOs,
            ms_network_type: MsNetworkType::OsMesh,
            ms_size: None,
            ms_rows: Some(rows),
            ms_cols: Some(cols),
            dn_bw: rows + cols,
            rn_bw: rows * cols,
            reduce_network_type: ReduceNetworkType::TemporalRn,
            sparsity_ratio: 0,
            accumulation_buffer: true,
        }
    }
}

/// File form; every field but the controller type is optional.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    controller_type: ControllerType,
    ms_network_type: Option<MsNetworkType>,
    ms_size: Option<u32>,
    ms_rows: Option<u32>,
    ms_cols: Option<u32>,
    dn_bw: Option<u32>,
    rn_bw: Option<u32>,
    reduce_network_type: Option<ReduceNetworkType>,
    sparsity_ratio: Option<u32>,
    accumulation_buffer: Option<bool>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigFileError {
    #[error("malformed config: {0}")]
    Malformed(String),
    #[error("{field}={value} out of range: {rule}")]
    OutOfRange {
        field: &'static str,
        value: u64,
        rule: &'static str,
    },
    #[error("{field} is required when {reason}")]
    MissingField { field: &'static str, reason: String },
}

/// Parses a config file, filling defaults for omitted optional fields.
///
/// Defaults: the network type follows the controller (OS_MESH for
/// SYSTOLIC_OS, LINEAR otherwise), bandwidths equal the multiplier count
/// (`ms_rows + ms_cols` / `ms_rows * ms_cols` on a mesh), the reduction
/// network is TEMPORALRN on a mesh and ASNETWORK otherwise, sparsity is 0,
/// and the accumulation buffer is on only for SYSTOLIC_OS.
pub fn load_config(text: &str) -> Result<HardwareConfig, ConfigFileError> {
    let raw: RawConfig = serde_json::from_str(text).map_err(|e| ConfigFileError::Malformed(e.to_string()))?;
    let systolic = raw.controller_type == ControllerType::SystolicOs;
    let ms_network_type = raw.ms_network_type.unwrap_or(if systolic {
        MsNetworkType::OsMesh
    } else {
        MsNetworkType::Linear
    });
    if let Some(v) = raw.sparsity_ratio {
        if v > 100 {
            return Err(ConfigFileError::OutOfRange {
                field: "sparsity_ratio",
                value: v as u64,
                rule: "must lie in 0..=100",
            });
        }
    }
    let (default_dn, default_rn) = match ms_network_type {
        MsNetworkType::Linear => {
            let size = raw.ms_size.ok_or_else(|| ConfigFileError::MissingField {
                field: "ms_size",
                reason: "ms_network_type is LINEAR".into(),
            })?;
            (size, size)
        }
        MsNetworkType::OsMesh => {
            let need = |v: Option<u32>, field| {
                v.ok_or_else(|| ConfigFileError::MissingField {
                    field,
                    reason: "ms_network_type is OS_MESH".into(),
                })
            };
            let rows = need(raw.ms_rows, "ms_rows")?;
            let cols = need(raw.ms_cols, "ms_cols")?;
            (rows.saturating_add(cols), rows.saturating_mul(cols))
        }
    };
    Ok(HardwareConfig {
        controller_type: raw.controller_type,
        ms_network_type,
        ms_size: raw.ms_size,
        ms_rows: raw.ms_rows,
        ms_cols: raw.ms_cols,
        dn_bw: raw.dn_bw.unwrap_or(default_dn),
        rn_bw: raw.rn_bw.unwrap_or(default_rn),
        reduce_network_type: raw.reduce_network_type.unwrap_or(match ms_network_type {
            MsNetworkType::OsMesh => ReduceNetworkType::TemporalRn,
            MsNetworkType::Linear => ReduceNetworkType::AsNetwork,
        }),
        sparsity_ratio: raw.sparsity_ratio.unwrap_or(0),
        accumulation_buffer: raw.accumulation_buffer.unwrap_or(systolic),
    })
}

pub fn save_config(cfg: &HardwareConfig) -> String {
    serde_json::to_string_pretty(cfg).expect("config serializes")
}

/// One broken rule.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigViolation {
    pub field: &'static str,
    pub rule: String,
}

impl fmt::Display for ConfigViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.rule)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid hardware config: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
pub struct ConfigErrors(pub Vec<ConfigViolation>);

impl ConfigErrors {
    pub fn violates(&self, field: &str) -> bool {
        self.0.iter().any(|v| v.field == field)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ConfigNotice {
    /// SYSTOLIC_OS bandwidths rewritten to their mandated values.
    BandwidthCorrected {
        dn_bw: (u32, u32),
        rn_bw: (u32, u32),
    },
    Warning(String),
}

impl fmt::Display for ConfigNotice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigNotice::BandwidthCorrected { dn_bw, rn_bw } => write!(
                f,
                "corrected SYSTOLIC_OS bandwidths: dn_bw {} -> {} (ms_rows+ms_cols), rn_bw {} -> {} (ms_rows*ms_cols)",
                dn_bw.0, dn_bw.1, rn_bw.0, rn_bw.1
            ),
            ConfigNotice::Warning(w) => write!(f, "warning: {w}"),
        }
    }
}

/// A config that passed every rule. Only [`validate_config`] builds one.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidatedConfig {
    cfg: HardwareConfig,
    tree_levels: u32,
    notices: Vec<ConfigNotice>,
}

impl ValidatedConfig {
    pub fn config(&self) -> &HardwareConfig {
        &self.cfg
    }

    pub fn controller(&self) -> ControllerType {
        self.cfg.controller_type
    }

    /// Total multipliers: `ms_size` on a linear array, `ms_rows * ms_cols`
    /// on a mesh.
    pub fn multipliers(&self) -> u64 {
        match self.cfg.ms_network_type {
            MsNetworkType::Linear => self.cfg.ms_size.unwrap_or(0) as u64,
            MsNetworkType::OsMesh => self.cfg.ms_rows.unwrap_or(0) as u64 * self.cfg.ms_cols.unwrap_or(0) as u64,
        }
    }

    pub fn mesh(&self) -> (u64, u64) {
        (
            self.cfg.ms_rows.unwrap_or(0) as u64,
            self.cfg.ms_cols.unwrap_or(0) as u64,
        )
    }

    /// Depth of the reduction tree, `ceil(log2(multipliers))`.
    pub fn tree_levels(&self) -> u32 {
        self.tree_levels
    }

    pub fn dn_bw(&self) -> u64 {
        self.cfg.dn_bw as u64
    }

    pub fn rn_bw(&self) -> u64 {
        self.cfg.rn_bw as u64
    }

    pub fn notices(&self) -> &[ConfigNotice] {
        &self.notices
    }
}

fn is_pow2(v: u32) -> bool {
    v != 0 && v.is_power_of_two()
}

/// Checks every rule and reports all violations together. SYSTOLIC_OS
/// bandwidths are corrected rather than rejected.
pub fn validate_config(cfg: &HardwareConfig) -> Result<ValidatedConfig, ConfigErrors> {
    let mut errs = Vec::new();
    let mut notices = Vec::new();
    let mut out = cfg.clone();
    let mut bad = |field: &'static str, rule: String| errs.push(ConfigViolation { field, rule });
    let systolic = cfg.controller_type == ControllerType::SystolicOs;

    match cfg.controller_type {
        ControllerType::SystolicOs => {
            if cfg.ms_network_type != MsNetworkType::OsMesh {
                bad("ms_network_type", "SYSTOLIC_OS requires OS_MESH".into());
            }
            if cfg.reduce_network_type != ReduceNetworkType::TemporalRn {
                bad("reduce_network_type", "SYSTOLIC_OS requires TEMPORALRN".into());
            }
            if !cfg.accumulation_buffer {
                bad(
                    "accumulation_buffer",
                    "SYSTOLIC_OS requires the accumulation buffer enabled".into(),
                );
            }
        }
        ControllerType::FlexLinear | ControllerType::SparseGemm => {
            if cfg.ms_network_type != MsNetworkType::Linear {
                bad("ms_network_type", format!("{} requires LINEAR", cfg.controller_type));
            }
        }
    }

    match cfg.ms_network_type {
        MsNetworkType::Linear => match cfg.ms_size {
            None => bad("ms_size", "required when ms_network_type is LINEAR".into()),
            Some(v) if !is_pow2(v) => bad("ms_size", format!("ms_size not a power of two ({v})")),
            Some(v) if v < 8 => bad("ms_size", format!("ms_size must be >= 8 ({v})")),
            Some(_) => {}
        },
        MsNetworkType::OsMesh => {
            for (field, v) in [("ms_rows", cfg.ms_rows), ("ms_cols", cfg.ms_cols)] {
                match v {
                    None => bad(field, "required when ms_network_type is OS_MESH".into()),
                    Some(v) if !is_pow2(v) => bad(field, format!("{field} not a power of two ({v})")),
                    Some(_) => {}
                }
            }
        }
    }

    if systolic {
        if let (Some(rows), Some(cols)) = (cfg.ms_rows, cfg.ms_cols) {
            let (dn, rn) = (rows + cols, rows * cols);
            if cfg.dn_bw != dn || cfg.rn_bw != rn {
                notices.push(ConfigNotice::BandwidthCorrected {
                    dn_bw: (cfg.dn_bw, dn),
                    rn_bw: (cfg.rn_bw, rn),
                });
                out.dn_bw = dn;
                out.rn_bw = rn;
            }
        }
    } else {
        for (field, v) in [("dn_bw", cfg.dn_bw), ("rn_bw", cfg.rn_bw)] {
            if !is_pow2(v) {
                bad(field, format!("{field} not a power of two ({v})"));
            }
        }
    }

    if cfg.sparsity_ratio > 100 {
        bad(
            "sparsity_ratio",
            format!("must lie in 0..=100 ({})", cfg.sparsity_ratio),
        );
    } else if cfg.sparsity_ratio != 0 && cfg.controller_type != ControllerType::SparseGemm {
        notices.push(ConfigNotice::Warning(format!(
            "sparsity_ratio={} is only used by SPARSE_GEMM and is ignored",
            cfg.sparsity_ratio
        )));
    }
    match cfg.ms_network_type {
        MsNetworkType::Linear if cfg.ms_rows.is_some() || cfg.ms_cols.is_some() => notices.push(ConfigNotice::Warning(
            "ms_rows/ms_cols are ignored on a LINEAR network".into(),
        )),
        MsNetworkType::OsMesh if cfg.ms_size.is_some() => {
            notices.push(ConfigNotice::Warning("ms_size is ignored on an OS_MESH network".into()))
        }
        _ => {}
    }

    if !errs.is_empty() {
        return Err(ConfigErrors(errs));
    }
    let mut validated = ValidatedConfig {
        cfg: out,
        tree_levels: 0,
        notices,
    };
    let m = validated.multipliers().max(1);
    validated.tree_levels = 64 - (m - 1).leading_zeros();
    Ok(validated)
}
