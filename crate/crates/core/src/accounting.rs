//! Exact trainable-parameter counts and fleet storage budgets.
//!
//! For a model with L finetuned layers, q adapted n x n modules per layer and
//! rank r, the counts are `L*q*r*2n` (plain low-rank pairs), `L*q*(n+r)`
//! (shared-projection scaling vectors) and `L*q*r^2` (latent-only adapters).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Lora,
    Vera,
    Loraxs,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Method::Lora => write!(f, "lora"),
            Method::Vera => write!(f, "vera"),
            Method::Loraxs => write!(f, "loraxs"),
        }
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "lora" => Ok(Method::Lora),
            "vera" => Ok(Method::Vera),
            "loraxs" | "lora-xs" => Ok(Method::Loraxs),
            other => Err(format!(
                "unknown method `{other}` (expected lora|vera|loraxs)"
            )),
        }
    }
}

/// Square-module model description (every adapted weight is n x n).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ModelSpec {
    pub layers_l: u64,
    pub modules_per_layer_q: u64,
    pub hidden_n: u64,
    pub rank_r: u64,
    /// Storage bytes per parameter (2 for 16-bit checkpoints).
    pub bytes_per_param: u64,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("layers_l", self.layers_l),
            ("modules_per_layer_q", self.modules_per_layer_q),
            ("hidden_n", self.hidden_n),
            ("rank_r", self.rank_r),
            ("bytes_per_param", self.bytes_per_param),
        ] {
            if v == 0 {
                return Err(Error::Param {
                    name,
                    reason: "must be positive".into(),
                });
            }
        }
        if self.rank_r > self.hidden_n {
            return Err(Error::Param {
                name: "rank_r",
                reason: format!(
                    "rank {} exceeds hidden dimension {}",
                    self.rank_r, self.hidden_n
                ),
            });
        }
        Ok(())
    }
}

fn checked(what: &str, v: Option<u64>) -> Result<u64> {
    v.ok_or_else(|| Error::Range { what: what.into() })
}

/// Trainable parameters for one adapted m x n module.
/// The shared-projection method assumes square modules.
pub fn per_module_params(method: Method, m: u64, n: u64, r: u64) -> Result<u64> {
    match method {
        Method::Lora => checked(
            "per-module count",
            r.checked_mul(m.checked_add(n).ok_or(Error::Range {
                what: "per-module count".into(),
            })?),
        ),
        Method::Vera => {
            if m != n {
                return Err(Error::Param {
                    name: "m",
                    reason: "the vera count formula is defined for square modules only".into(),
                });
            }
            checked("per-module count", n.checked_add(r))
        }
        Method::Loraxs => checked("per-module count", r.checked_mul(r)),
    }
}

/// Exact trainable-parameter count for the whole model.
pub fn count_params(method: Method, spec: &ModelSpec) -> Result<u64> {
    spec.validate()?;
    let per_module = per_module_params(method, spec.hidden_n, spec.hidden_n, spec.rank_r)?;
    let modules = checked(
        "module count",
        spec.layers_l.checked_mul(spec.modules_per_layer_q),
    )?;
    checked("parameter count", modules.checked_mul(per_module))
}

/// Ratio `count(a) / count(b)` as an exact reduced rational evaluated in f64.
pub fn param_ratio(method_a: Method, method_b: Method, spec: &ModelSpec) -> Result<f64> {
    let a = count_params(method_a, spec)?;
    let b = count_params(method_b, spec)?;
    let g = gcd(a, b);
    Ok((a / g) as f64 / (b / g) as f64)
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a.max(1)
}

/// Checkpoint and fleet storage for `params` trainable parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BudgetReport {
    pub method: Option<Method>,
    pub params: u64,
    pub bytes_per_param: u64,
    pub bytes_per_checkpoint: u64,
    pub n_models: u64,
    pub fleet_bytes: u64,
}

/// Computes `bytes_per_checkpoint = params * bytes_per_param` and
/// `fleet_bytes = bytes_per_checkpoint * n_models`, erroring past 2^63 bytes.
pub fn storage_budget(params: u64, bytes_per_param: u64, n_models: u64) -> Result<BudgetReport> {
    for (name, v) in [
        ("params", params),
        ("bytes_per_param", bytes_per_param),
        ("n_models", n_models),
    ] {
        if v == 0 {
            return Err(Error::Param {
                name,
                reason: "must be positive".into(),
            });
        }
    }
    let per = checked("checkpoint bytes", params.checked_mul(bytes_per_param))?;
    let fleet = checked("fleet bytes", per.checked_mul(n_models))?;
    if per > (1u64 << 63) || fleet > (1u64 << 63) {
        return Err(Error::Range {
            what: "storage budget".into(),
        });
    }
    Ok(BudgetReport {
        method: None,
        params,
        bytes_per_param,
        bytes_per_checkpoint: per,
        n_models,
        fleet_bytes: fleet,
    })
}

const BINARY_PREFIXES: [&str; 7] = ["B", "KiB", "MiB", "GiB", "TiB", "PiB", "EiB"];
const DECIMAL_PREFIXES: [&str; 7] = ["B", "KB", "MB", "GB", "TB", "PB", "EB"];

fn prefix_index(bytes: u64, base: f64) -> usize {
    let mut idx = 0;
    let mut v = bytes as f64;
    while v >= base && idx < BINARY_PREFIXES.len() - 1 {
        v /= base;
        idx += 1;
    }
    idx
}

/// `144.0 MiB` style rendering (largest binary prefix, one decimal).
pub fn format_bytes_binary(bytes: u64) -> String {
    let idx = prefix_index(bytes, 1024.0);
    if idx == 0 {
        return format!("{bytes} B");
    }
    format!(
        "{:.1} {}",
        bytes as f64 / 1024f64.powi(idx as i32),
        BINARY_PREFIXES[idx]
    )
}

/// `151.0 MB` style rendering (largest decimal prefix, one decimal).
pub fn format_bytes_decimal(bytes: u64) -> String {
    let idx = prefix_index(bytes, 1000.0);
    if idx == 0 {
        return format!("{bytes} B");
    }
    format!(
        "{:.1} {}",
        bytes as f64 / 1000f64.powi(idx as i32),
        DECIMAL_PREFIXES[idx]
    )
}

impl BudgetReport {
    /// The fleet figure as storage narratives usually quote it: the
    /// per-checkpoint binary numeral with the prefix escalated one step per
    /// 1000x of fleet size (so 144.0 MiB across 10^6 models reads
    /// "144.0 TiB"). Only defined when `n_models` is a power of 1000.
    pub fn stacked_units_fleet(&self) -> Option<String> {
        let mut k = 0usize;
        let mut n = self.n_models;
        while n.is_multiple_of(1000) {
            n /= 1000;
            k += 1;
        }
        if n != 1 || k == 0 {
            return None;
        }
        let idx = prefix_index(self.bytes_per_checkpoint, 1024.0);
        if idx + k >= BINARY_PREFIXES.len() {
            return None;
        }
        let value = self.bytes_per_checkpoint as f64 / 1024f64.powi(idx as i32);
        Some(format!("{:.1} {}", value, BINARY_PREFIXES[idx + k]))
    }
}

impl std::fmt::Display for BudgetReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if let Some(m) = self.method {
            writeln!(f, "method:              {m}")?;
        }
        writeln!(f, "params:              {}", self.params)?;
        writeln!(f, "bytes per param:     {}", self.bytes_per_param)?;
        writeln!(
            f,
            "per checkpoint:      {} B = {} ({})",
            self.bytes_per_checkpoint,
            format_bytes_binary(self.bytes_per_checkpoint),
            format_bytes_decimal(self.bytes_per_checkpoint)
        )?;
        writeln!(f, "models:              {}", self.n_models)?;
        write!(
            f,
            "fleet:               {} B = {} ({})",
            self.fleet_bytes,
            format_bytes_binary(self.fleet_bytes),
            format_bytes_decimal(self.fleet_bytes)
        )?;
        if let Some(stacked) = self.stacked_units_fleet() {
            write!(f, ", {stacked} in stacked units")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn encoder_example_spec() -> ModelSpec {
        ModelSpec {
            layers_l: 24,
            modules_per_layer_q: 2,
            hidden_n: 1024,
            rank_r: 16,
            bytes_per_param: 2,
        }
    }

    fn large_example_spec() -> ModelSpec {
        ModelSpec {
            layers_l: 96,
            modules_per_layer_q: 2,
            hidden_n: 12288,
            rank_r: 16,
            bytes_per_param: 2,
        }
    }

    #[test]
    fn worked_example_counts() {
        let spec = encoder_example_spec();
        assert_eq!(count_params(Method::Loraxs, &spec).unwrap(), 12_288);
        assert_eq!(count_params(Method::Lora, &spec).unwrap(), 1_572_864);
        assert_eq!(count_params(Method::Vera, &spec).unwrap(), 49_920);
        assert_eq!(count_params(Method::Loraxs, &large_example_spec()).unwrap(), 49_152);
        assert_eq!(
            count_params(Method::Lora, &large_example_spec()).unwrap(),
            75_497_472
        );
    }

    #[test]
    fn worked_example_ratios() {
        let spec = encoder_example_spec();
        assert_eq!(
            param_ratio(Method::Lora, Method::Loraxs, &spec).unwrap(),
            128.0
        );
        assert_eq!(
            param_ratio(Method::Vera, Method::Loraxs, &spec).unwrap(),
            4.0625
        );
        let lora_vera = param_ratio(Method::Lora, Method::Vera, &spec).unwrap();
        assert!((lora_vera - 1_572_864.0 / 49_920.0).abs() < 1e-12);
        assert!((lora_vera - 31.5).abs() < 0.02);
    }

    #[test]
    fn ratio_identities_hold_exactly() {
        for (l, q, n, r) in [(2u64, 3u64, 64u64, 4u64), (7, 1, 333, 9), (12, 4, 4096, 25)] {
            let spec = ModelSpec {
                layers_l: l,
                modules_per_layer_q: q,
                hidden_n: n,
                rank_r: r,
                bytes_per_param: 2,
            };
            let lora_over_xs = param_ratio(Method::Lora, Method::Loraxs, &spec).unwrap();
            assert_eq!(lora_over_xs, 2.0 * n as f64 / r as f64);
            let vera_over_xs = param_ratio(Method::Vera, Method::Loraxs, &spec).unwrap();
            assert_eq!(vera_over_xs, (n + r) as f64 / (r * r) as f64);
        }
    }

    #[test]
    fn counts_are_monotone() {
        let base = ModelSpec {
            layers_l: 4,
            modules_per_layer_q: 3,
            hidden_n: 128,
            rank_r: 8,
            bytes_per_param: 2,
        };
        for method in [Method::Lora, Method::Vera, Method::Loraxs] {
            let c0 = count_params(method, &base).unwrap();
            for grown in [
                ModelSpec {
                    layers_l: 5,
                    ..base
                },
                ModelSpec {
                    modules_per_layer_q: 4,
                    ..base
                },
                ModelSpec { rank_r: 9, ..base },
            ] {
                assert!(
                    count_params(method, &grown).unwrap() > c0,
                    "{method} not monotone"
                );
            }
            // n only appears in the lora and vera formulas.
            let grown_n = ModelSpec {
                hidden_n: 129,
                ..base
            };
            let cn = count_params(method, &grown_n).unwrap();
            match method {
                Method::Loraxs => assert_eq!(cn, c0),
                _ => assert!(cn > c0),
            }
        }
    }

    #[test]
    fn rectangular_module_counts() {
        assert_eq!(per_module_params(Method::Lora, 8, 24, 2).unwrap(), 64);
        assert_eq!(per_module_params(Method::Loraxs, 8, 24, 2).unwrap(), 4);
        assert!(per_module_params(Method::Vera, 8, 24, 2).is_err());
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = encoder_example_spec();
        spec.rank_r = 4096;
        assert!(count_params(Method::Lora, &spec).is_err());
        spec = encoder_example_spec();
        spec.layers_l = 0;
        assert!(count_params(Method::Lora, &spec).is_err());
    }

    #[test]
    fn storage_budget_worked_example() {
        let report = storage_budget(75_497_472, 2, 1_000_000).unwrap();
        assert_eq!(report.bytes_per_checkpoint, 150_994_944);
        assert_eq!(report.fleet_bytes, 150_994_944_000_000);
        assert_eq!(
            format_bytes_binary(report.bytes_per_checkpoint),
            "144.0 MiB"
        );
        assert_eq!(report.stacked_units_fleet().unwrap(), "144.0 TiB");

        let small = storage_budget(49_152, 2, 1_000_000).unwrap();
        assert_eq!(small.bytes_per_checkpoint, 98_304);
        assert_eq!(small.fleet_bytes, 98_304_000_000);
        assert_eq!(format_bytes_binary(small.bytes_per_checkpoint), "96.0 KiB");
        assert_eq!(small.stacked_units_fleet().unwrap(), "96.0 GiB");
        // The true decimal figure stays within a few percent of the
        // stacked-unit narrative number.
        assert_eq!(format_bytes_decimal(small.fleet_bytes), "98.3 GB");
    }

    #[test]
    fn storage_budget_overflow_is_a_range_error() {
        assert!(storage_budget(u64::MAX / 2, 8, 10).is_err());
        assert!(storage_budget(1u64 << 62, 2, 2).is_err());
    }

    #[test]
    fn fleet_is_per_checkpoint_times_models() {
        let r = storage_budget(1234, 4, 77).unwrap();
        assert_eq!(r.fleet_bytes, r.bytes_per_checkpoint * r.n_models);
        assert!(r.stacked_units_fleet().is_none());
    }
}
