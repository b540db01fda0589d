//! Risk scoring: criterion ratings, the majority rule and the catalog audit.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attacks::{AttackId, CatalogEntry};

/// Ordered `High > Medium > Low`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CriterionRating {
    Low,
    Medium,
    High,
}

impl CriterionRating {
    pub const ALL: [CriterionRating; 3] = [
        CriterionRating::High,
        CriterionRating::Medium,
        CriterionRating::Low,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CriterionRating::High => "High",
            CriterionRating::Medium => "Medium",
            CriterionRating::Low => "Low",
        }
    }
}

impl fmt::Display for CriterionRating {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CriterionRating {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "high" | "h" => Ok(CriterionRating::High),
            "medium" | "m" => Ok(CriterionRating::Medium),
            "low" | "l" => Ok(CriterionRating::Low),
            _ => Err(format!("unknown rating {s:?}")),
        }
    }
}

/// Majority of the three criteria; Medium when all three differ.
pub fn overall_rating(
    r: CriterionRating,
    i: CriterionRating,
    s: CriterionRating,
) -> CriterionRating {
    if r == i || r == s {
        r
    } else if i == s {
        i
    } else {
        CriterionRating::Medium
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RiskAssessment {
    pub reproducibility: CriterionRating,
    pub impact: CriterionRating,
    pub stealthiness: CriterionRating,
    pub overall: CriterionRating,
    pub published_label: CriterionRating,
}

impl RiskAssessment {
    pub fn new(
        reproducibility: CriterionRating,
        impact: CriterionRating,
        stealthiness: CriterionRating,
        published_label: CriterionRating,
    ) -> Self {
        RiskAssessment {
            reproducibility,
            impact,
            stealthiness,
            overall: overall_rating(reproducibility, impact, stealthiness),
            published_label,
        }
    }

    pub fn is_discrepant(&self) -> bool {
        self.overall != self.published_label
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum AuditError {
    #[error("catalog has {0} entries, expected 16")]
    CatalogSizeMismatch(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub id: AttackId,
    pub assessment: RiskAssessment,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditResult {
    /// Rows sorted by attack id.
    pub rows: Vec<AuditRow>,
    /// Count of rows per transcribed label.
    pub distribution: BTreeMap<CriterionRating, usize>,
    pub discrepancies: Vec<AttackId>,
}

impl AuditResult {
    pub fn matching_rows(&self) -> usize {
        self.rows.len() - self.discrepancies.len()
    }
}

/// Audits the full 16-row catalog.
pub fn audit_catalog(catalog: &[CatalogEntry]) -> Result<AuditResult, AuditError> {
    if catalog.len() != AttackId::ALL.len() {
        return Err(AuditError::CatalogSizeMismatch(catalog.len()));
    }
    Ok(audit_rows(catalog))
}

/// Audits any subset of the catalog.
pub fn audit_rows(entries: &[CatalogEntry]) -> AuditResult {
    let mut rows: Vec<AuditRow> = entries
        .iter()
        .map(|e| AuditRow {
            id: e.id,
            assessment: RiskAssessment::new(
                e.reproducibility,
                e.impact,
                e.stealthiness,
                e.published_label,
            ),
        })
        .collect();
    rows.sort_by_key(|r| r.id);
    let mut distribution: BTreeMap<CriterionRating, usize> =
        CriterionRating::ALL.iter().map(|&r| (r, 0)).collect();
    for row in &rows {
        *distribution
            .entry(row.assessment.published_label)
            .or_default() += 1;
    }
    let discrepancies = rows
        .iter()
        .filter(|r| r.assessment.is_discrepant())
        .map(|r| r.id)
        .collect();
    AuditResult {
        rows,
        distribution,
        discrepancies,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReportFormat {
    Table,
    Records,
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "table" => Ok(ReportFormat::Table),
            "records" => Ok(ReportFormat::Records),
            _ => Err(format!("unknown format {s:?} (expected table or records)")),
        }
    }
}

/// One JSON object per line in `Records` form: a line per row, then a
/// summary line.
pub fn render_report(audit: &AuditResult, format: ReportFormat) -> String {
    match format {
        ReportFormat::Table => render_table(audit),
        ReportFormat::Records => render_records(audit),
    }
}

fn render_table(audit: &AuditResult) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<5} {:<15} {:<9} {:<12} {:<12} {:<8} {:<12} flag",
        "id", "name", "repro", "impact", "stealth", "rule", "label"
    );
    for row in &audit.rows {
        let a = &row.assessment;
        let _ = writeln!(
            out,
            "{:<5} {:<15} {:<9} {:<12} {:<12} {:<8} {:<12} {}",
            row.id.to_string(),
            truncate(row.id.name(), 15),
            a.reproducibility.name(),
            a.impact.name(),
            a.stealthiness.name(),
            a.overall.name(),
            a.published_label.name(),
            if a.is_discrepant() { "MISMATCH" } else { "" }
        );
    }
    let dist: Vec<String> = CriterionRating::ALL
        .iter()
        .map(|r| {
            format!(
                "{}: {}",
                r.name(),
                audit.distribution.get(r).copied().unwrap_or(0)
            )
        })
        .collect();
    let _ = writeln!(out, "distribution: {}", dist.join(", "));
    let _ = writeln!(
        out,
        "rule matches label: {}/{}",
        audit.matching_rows(),
        audit.rows.len()
    );
    if audit.discrepancies.is_empty() {
        let _ = writeln!(out, "no discrepancies");
    } else {
        let ids: Vec<String> = audit
            .discrepancies
            .iter()
            .map(|id| id.to_string())
            .collect();
        let _ = writeln!(out, "discrepancies: {}", ids.join(", "));
    }
    out
}

fn truncate(s: &str, n: usize) -> String {
    s.chars().take(n).collect()
}

#[derive(Serialize)]
struct RowRecord<'a> {
    record: &'static str,
    id: AttackId,
    name: &'a str,
    reproducibility: CriterionRating,
    impact: CriterionRating,
    stealthiness: CriterionRating,
    overall: CriterionRating,
    published_label: CriterionRating,
    discrepant: bool,
}

#[derive(Serialize)]
struct SummaryRecord<'a> {
    record: &'static str,
    distribution: &'a BTreeMap<CriterionRating, usize>,
    matching: usize,
    total: usize,
    discrepancies: &'a [AttackId],
}

fn render_records(audit: &AuditResult) -> String {
    let mut out = String::new();
    for row in &audit.rows {
        let a = &row.assessment;
        let rec = RowRecord {
            record: "row",
            id: row.id,
            name: row.id.name(),
            reproducibility: a.reproducibility,
            impact: a.impact,
            stealthiness: a.stealthiness,
            overall: a.overall,
            published_label: a.published_label,
            discrepant: a.is_discrepant(),
        };
        out.push_str(&serde_json::to_string(&rec).expect("plain record serializes"));
        out.push('\n');
    }
    let summary = SummaryRecord {
        record: "summary",
        distribution: &audit.distribution,
        matching: audit.matching_rows(),
        total: audit.rows.len(),
        discrepancies: &audit.discrepancies,
    };
    out.push_str(&serde_json::to_string(&summary).expect("plain record serializes"));
    out.push('\n');
    out
}

#[cfg(test)]
mod tests {
    use super::CriterionRating::*;
    use super::*;

    #[test]
    fn table_rows() {
        assert_eq!(overall_rating(High, High, Low), High);
        assert_eq!(overall_rating(High, Medium, Low), Medium);
        assert_eq!(overall_rating(High, Low, Low), Low);
        assert_eq!(overall_rating(Low, High, Medium), Medium);
    }

    #[test]
    fn rating_order() {
        assert!(High > Medium && Medium > Low);
    }

    #[test]
    fn wrong_size_catalog_is_rejected() {
        let cat = crate::attacks::catalog();
        assert_eq!(
            audit_catalog(&cat[..15]),
            Err(AuditError::CatalogSizeMismatch(15))
        );
    }
}
