//! Degradation-delta report over the reference accuracy tables.

use std::fmt::Write as _;

use serde::Serialize;

use crate::recog::{delta_between, ConditionMatrix, RecogError};
use crate::reference::{
    identification_cross_spectral, verification_full_face, verification_periocular, CLAIMED_RESIDUAL_PERCENT,
    EXTERNAL_BENCHMARK_PERCENT, PERIOCULAR_BEST_PERCENT, THERMAL_MASKED_QUOTED,
};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Operand {
    pub table: String,
    pub train: String,
    pub test: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeltaLine {
    pub label: String,
    pub baseline: Operand,
    pub degraded: Operand,
    pub delta: f64,
    /// `delta` to four decimals.
    pub rounded: String,
}

impl DeltaLine {
    fn compute(
        label: &str,
        (bt, bm): (&str, &ConditionMatrix),
        b: (&str, &str),
        (dt, dm): (&str, &ConditionMatrix),
        d: (&str, &str),
    ) -> Result<Self, RecogError> {
        let delta = delta_between(bm, b, dm, d)?;
        Ok(Self::from_values(
            label,
            operand(bt, b, bm.cell(b.0, b.1)?.mean),
            operand(dt, d, dm.cell(d.0, d.1)?.mean),
        )
        .with_delta(delta))
    }

    fn from_values(label: &str, baseline: Operand, degraded: Operand) -> Self {
        let delta = baseline.value - degraded.value;
        Self {
            label: label.to_string(),
            baseline,
            degraded,
            delta,
            rounded: format!("{delta:.4}"),
        }
    }

    fn with_delta(mut self, delta: f64) -> Self {
        self.delta = delta;
        self.rounded = format!("{delta:.4}");
        self
    }
}

fn operand(table: &str, (train, test): (&str, &str), value: f64) -> Operand {
    Operand {
        table: table.to_string(),
        train: train.to_string(),
        test: test.to_string(),
        value,
    }
}

/// Two readings of a figure that does not follow from a single subtraction.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Discrepancy {
    pub claimed: f64,
    pub derivations: Vec<(String, f64)>,
    pub consistent: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReferenceReport {
    pub deltas: Vec<DeltaLine>,
    /// The masked-thermal delta recomputed from the table cell rather than the quoted value.
    pub table_cell_variant: DeltaLine,
    pub residual: Discrepancy,
    pub tables: Vec<(String, ConditionMatrix)>,
}

pub const FULL_FACE: &str = "verification_full_face";
pub const PERIOCULAR: &str = "verification_periocular";
pub const CROSS_SPECTRAL: &str = "identification_cross_spectral";

/// Recomputes every degradation figure from the reference tables.
pub fn reference_report() -> Result<ReferenceReport, RecogError> {
    let full = verification_full_face();
    let peri = verification_periocular();
    let ident = identification_cross_spectral();

    let mask_wearing = DeltaLine::compute(
        "mask-wearing degradation, full-face verification",
        (FULL_FACE, &full),
        ("a", "a"),
        (FULL_FACE, &full),
        ("a", "c"),
    )?;
    let periocular_gain = DeltaLine::compute(
        "periocular recovery on masked pairs",
        (PERIOCULAR, &peri),
        ("a", "c"),
        (FULL_FACE, &full),
        ("a", "c"),
    )?;
    let visual = DeltaLine::compute(
        "visual identification, masked probes",
        (CROSS_SPECTRAL, &ident),
        ("visual", "visual"),
        (CROSS_SPECTRAL, &ident),
        ("visual", "masked-visual"),
    )?;
    let thermal_base = ident.cell("thermal", "thermal")?.mean;
    let thermal = DeltaLine::from_values(
        "thermal identification, masked probes (quoted value)",
        operand(CROSS_SPECTRAL, ("thermal", "thermal"), thermal_base),
        operand("quoted", ("thermal", "masked-thermal"), THERMAL_MASKED_QUOTED),
    );
    let table_cell_variant = DeltaLine::compute(
        "thermal identification, masked probes (table cell)",
        (CROSS_SPECTRAL, &ident),
        ("thermal", "thermal"),
        (CROSS_SPECTRAL, &ident),
        ("thermal", "masked-thermal"),
    )?;

    let from_full = 100.0 - PERIOCULAR_BEST_PERCENT;
    let from_benchmark = EXTERNAL_BENCHMARK_PERCENT - PERIOCULAR_BEST_PERCENT;
    let close = |x: f64| (x - CLAIMED_RESIDUAL_PERCENT).abs() < 5e-3;
    let residual = Discrepancy {
        claimed: CLAIMED_RESIDUAL_PERCENT,
        derivations: vec![
            (format!("100.00 - {PERIOCULAR_BEST_PERCENT:.2}"), round2(from_full)),
            (
                format!("{EXTERNAL_BENCHMARK_PERCENT:.2} - {PERIOCULAR_BEST_PERCENT:.2}"),
                round2(from_benchmark),
            ),
        ],
        consistent: close(from_full) && close(from_benchmark),
    };

    Ok(ReferenceReport {
        deltas: vec![mask_wearing, periocular_gain, visual, thermal],
        table_cell_variant,
        residual,
        tables: vec![
            (FULL_FACE.to_string(), full),
            (PERIOCULAR.to_string(), peri),
            (CROSS_SPECTRAL.to_string(), ident),
        ],
    })
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

impl ReferenceReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (name, m) in &self.tables {
            out.push_str(&m.to_text_table(name));
            out.push('\n');
        }
        let _ = writeln!(out, "Degradation deltas");
        for d in self.deltas.iter().chain(std::iter::once(&self.table_cell_variant)) {
            let _ = writeln!(
                out,
                "  {:<55} {:.4} - {:.4} = {}",
                d.label, d.baseline.value, d.degraded.value, d.rounded
            );
        }
        let _ = writeln!(out, "Residual degradation claim: {:.2}%", self.residual.claimed);
        for (expr, v) in &self.residual.derivations {
            let _ = writeln!(out, "  {expr} = {v:.2}");
        }
        if !self.residual.consistent {
            let _ = writeln!(out, "  WARNING: derivations disagree; the claim does not follow from one subtraction");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reproduces_quoted_deltas() {
        let r = reference_report().unwrap();
        let rounded: Vec<&str> = r.deltas.iter().map(|d| d.rounded.as_str()).collect();
        assert_eq!(rounded, ["0.3678", "0.3634", "0.5793", "0.6844"]);
        assert_eq!(r.table_cell_variant.rounded, "0.6864");
    }

    #[test]
    fn residual_flagged() {
        let r = reference_report().unwrap();
        assert!(!r.residual.consistent);
        assert_eq!(r.residual.derivations[0].1, 1.79);
        assert_eq!(r.residual.derivations[1].1, 1.69);
        assert!(r.to_text().contains("WARNING"));
    }
}
