//! Static parameter / multiply-accumulate accounting.
//!
//! Conventions: a convolution costs `Cout·(Cin/groups)·kh·kw·H'·W'` MACs,
//! a linear map `rows·d_in·d_out`, attention score and value products
//! `2·T²·d` per sequence, and every bilinear sample 4 MACs per channel.
//! Norms, activations, pooling and additions cost nothing.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostRow {
    pub name: String,
    pub kind: String,
    pub params: u64,
    pub macs: u64,
    pub output_shape: Vec<usize>,
}

impl CostRow {
    pub fn new(name: &str, kind: &str, params: u64, macs: u64, output_shape: Vec<usize>) -> Self {
        Self { name: name.to_string(), kind: kind.to_string(), params, macs, output_shape }
    }
}

/// Deviation of a measured total from a reference value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceCheck {
    pub label: String,
    pub reference: f64,
    pub measured: f64,
    pub relative_deviation: f64,
    pub within_tolerance: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub input_shape: Vec<usize>,
    pub rows: Vec<CostRow>,
    pub total_params: u64,
    pub total_macs: u64,
    pub params_m: f64,
    pub gmacs: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub reference: Vec<ReferenceCheck>,
}

impl CostReport {
    pub fn from_rows(input_shape: Vec<usize>, rows: Vec<CostRow>) -> Self {
        let total_params = rows.iter().map(|r| r.params).sum();
        let total_macs = rows.iter().map(|r| r.macs).sum();
        Self {
            input_shape,
            rows,
            total_params,
            total_macs,
            params_m: total_params as f64 / 1e6,
            gmacs: total_macs as f64 / 1e9,
            reference: Vec::new(),
        }
    }

    /// Sum over rows whose name starts with `prefix` followed by `.` (or equals it).
    pub fn subtotal(&self, prefix: &str) -> (u64, u64) {
        self.rows
            .iter()
            .filter(|r| r.name == prefix || r.name.starts_with(&format!("{prefix}.")))
            .fold((0, 0), |(p, m), r| (p + r.params, m + r.macs))
    }

    /// Compares totals against reference params (millions) and MACs (GMac).
    pub fn check_against(&mut self, params_m: Option<f64>, gmacs: Option<f64>, tolerance: f64) -> bool {
        let mut ok = true;
        for (label, reference, measured) in [("params_m", params_m, self.params_m), ("gmacs", gmacs, self.gmacs)] {
            let Some(reference) = reference else { continue };
            let dev = (measured - reference) / reference;
            let within = dev.abs() <= tolerance;
            ok &= within;
            self.reference.push(ReferenceCheck {
                label: label.to_string(),
                reference,
                measured,
                relative_deviation: dev,
                within_tolerance: within,
            });
        }
        ok
    }

    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let w = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(5).max(5);
        let mut s = String::new();
        let _ = writeln!(s, "{:<w$}  {:<9}  {:>10}  {:>14}  output", "layer", "kind", "params", "macs");
        for r in &self.rows {
            let _ = writeln!(s, "{:<w$}  {:<9}  {:>10}  {:>14}  {:?}", r.name, r.kind, r.params, r.macs, r.output_shape);
        }
        let _ = writeln!(s, "{:<w$}  {:<9}  {:>10}  {:>14}", "total", "", self.total_params, self.total_macs);
        let _ = writeln!(s, "input {:?}: {:.3} M params, {:.3} GMac", self.input_shape, self.params_m, self.gmacs);
        for c in &self.reference {
            let _ = writeln!(
                s,
                "reference {}: {:.3} vs {:.3} ({:+.1}%) {}",
                c.label,
                c.measured,
                c.reference,
                100.0 * c.relative_deviation,
                if c.within_tolerance { "ok" } else { "OUT OF TOLERANCE" }
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn totals_are_column_sums() {
        let rows = vec![
            CostRow::new("a.conv", "conv", 448, 5_419_008, vec![16, 112, 112]),
            CostRow::new("a.bn", "norm", 32, 0, vec![16, 112, 112]),
            CostRow::new("b", "conv", 64, 1024, vec![8, 4, 4]),
        ];
        let mut r = CostReport::from_rows(vec![3, 224, 224], rows);
        assert_eq!((r.total_params, r.total_macs), (544, 5_420_032));
        assert_eq!(r.subtotal("a"), (480, 5_419_008));
        assert!(!r.check_against(Some(1.0), None, 0.1));
        assert!(r.to_table().contains("OUT OF TOLERANCE"));
    }
}
