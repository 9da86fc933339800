use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::ratings::{AnnotationRecord, Metric};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum KappaError {
    #[error("table has no items")]
    EmptyTable,
    #[error("need at least two raters per item, got {0}")]
    TooFewRaters(u64),
    #[error("row {row} has {got} categories, expected {expected}")]
    RaggedTable { row: usize, expected: usize, got: usize },
    #[error("row {row} sums to {sum}, expected {expected}")]
    RowSumMismatch { row: usize, sum: u64, expected: u64 },
    #[error("expected agreement is 1 but observed agreement is below 1")]
    DegenerateAgreement,
    #[error("items have differing rater counts: {0}")]
    UnevenRaters(String),
}

/// Fleiss' kappa over an items x categories count table where every row
/// sums to `raters`.
pub fn fleiss_kappa(table: &[Vec<u64>], raters: u64) -> Result<f64, KappaError> {
    if table.is_empty() {
        return Err(KappaError::EmptyTable);
    }
    if raters < 2 {
        return Err(KappaError::TooFewRaters(raters));
    }
    let categories = table[0].len();
    let mut column_totals = vec![0u64; categories];
    let mut observed = 0.0;
    let pairs = (raters * (raters - 1)) as f64;
    for (row, counts) in table.iter().enumerate() {
        if counts.len() != categories {
            return Err(KappaError::RaggedTable {
                row,
                expected: categories,
                got: counts.len(),
            });
        }
        let sum: u64 = counts.iter().sum();
        if sum != raters {
            return Err(KappaError::RowSumMismatch {
                row,
                sum,
                expected: raters,
            });
        }
        let agreeing: u64 = counts.iter().map(|&c| c * c.saturating_sub(1)).sum();
        observed += agreeing as f64 / pairs;
        for (total, &c) in column_totals.iter_mut().zip(counts) {
            *total += c;
        }
    }
    let items = table.len() as f64;
    let p_bar = observed / items;
    let all = items * raters as f64;
    let p_e: f64 = column_totals.iter().map(|&t| (t as f64 / all).powi(2)).sum();
    if column_totals.iter().filter(|&&t| t > 0).count() <= 1 {
        // every rating fell in one category: P_e = 1
        return if p_bar == 1.0 {
            Ok(1.0)
        } else {
            Err(KappaError::DegenerateAgreement)
        };
    }
    Ok((p_bar - p_e) / (1.0 - p_e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricKappa {
    pub metric: Metric,
    pub kappa: f64,
    pub items: usize,
    pub raters: u64,
}

fn category(record: &AnnotationRecord, metric: Metric) -> usize {
    match metric {
        Metric::Grammatical => record.grammatical as usize,
        Metric::Relevant => record.relevant as usize,
        Metric::Factual => record.factual as usize,
        Metric::Helpfulness => record.helpfulness.category_index(),
    }
}

/// Fleiss' kappa per metric, with each rated statement as one item.
pub fn kappa_tables(records: &[AnnotationRecord]) -> Result<Vec<MetricKappa>, KappaError> {
    let mut items: BTreeMap<(u64, usize), Vec<&AnnotationRecord>> = BTreeMap::new();
    for r in records {
        items.entry((r.question_id, r.statement_index)).or_default().push(r);
    }
    let raters = items.values().next().map(|v| v.len() as u64).ok_or(KappaError::EmptyTable)?;
    if let Some(((q, s), v)) = items.iter().find(|(_, v)| v.len() as u64 != raters) {
        return Err(KappaError::UnevenRaters(format!(
            "question {q} statement {s} has {} ratings, expected {raters}",
            v.len()
        )));
    }
    Metric::ALL
        .iter()
        .map(|&metric| {
            let width = metric.categories();
            let table: Vec<Vec<u64>> = items
                .values()
                .map(|rs| {
                    let mut row = vec![0u64; width];
                    for r in rs {
                        row[category(r, metric)] += 1;
                    }
                    row
                })
                .collect();
            Ok(MetricKappa {
                metric,
                kappa: fleiss_kappa(&table, raters)?,
                items: table.len(),
                raters,
            })
        })
        .collect()
}
