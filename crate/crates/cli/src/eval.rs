//! Per-site metric tables.

use std::io::Write;

use diffnet_core::data::Mask;
use diffnet_core::metrics::{aggregate, confusion_counts, metrics_from_counts, METRIC_NAMES};
use diffnet_core::{ConfusionCounts, MetricSet};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct EvalTable {
    pub rows: Vec<(String, MetricSet)>,
    pub mean: MetricSet,
    pub std: MetricSet,
}

/// Scores each site's counts and appends the mean and sample std over sites.
pub fn evaluate_counts(sites: &[(String, ConfusionCounts)]) -> Result<EvalTable> {
    if sites.is_empty() {
        return Err(CliError::Usage("no sites to evaluate".into()));
    }
    let rows = sites
        .iter()
        .map(|(name, c)| Ok((name.clone(), metrics_from_counts(c)?)))
        .collect::<Result<Vec<_>>>()?;
    let sets: Vec<MetricSet> = rows.iter().map(|(_, m)| *m).collect();
    let (mean, std) = aggregate(&sets)?;
    Ok(EvalTable { rows, mean, std })
}

pub fn site_counts(site: &str, pred: &Mask, truth: &Mask) -> Result<ConfusionCounts> {
    if (pred.height, pred.width) != (truth.height, truth.width) {
        return Err(CliError::Usage(format!(
            "site {site}: prediction is {}x{} but truth is {}x{}",
            pred.height, pred.width, truth.height, truth.width
        )));
    }
    Ok(confusion_counts(&pred.values, &truth.values)?)
}

/// CSV with header `site,accuracy,precision,recall,f1,iou,dice`, one row per
/// site in input order, then `mean` and `std`. Values have six decimals.
pub fn write_eval_csv<W: Write>(table: &EvalTable, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["site"];
    header.extend(METRIC_NAMES);
    w.write_record(&header)?;
    let rows = table
        .rows
        .iter()
        .map(|(n, m)| (n.as_str(), m))
        .chain([("mean", &table.mean), ("std", &table.std)]);
    for (name, m) in rows {
        let mut record = vec![name.to_string()];
        record.extend(m.values().iter().map(|v| format!("{v:.6}")));
        w.write_record(&record)?;
    }
    w.flush().map_err(|e| CliError::Data(format!("csv: {e}")))?;
    Ok(())
}

pub fn eval_csv_string(table: &EvalTable) -> Result<String> {
    let mut buf = Vec::new();
    write_eval_csv(table, &mut buf)?;
    String::from_utf8(buf).map_err(|e| CliError::Data(e.to_string()))
}
