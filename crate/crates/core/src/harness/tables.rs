//! CSV and aligned-text rendering of evaluation reports.

use super::eval::EvalReport;
use crate::error::Result;

pub const COLUMNS: [&str; 11] = [
    "model",
    "mode",
    "policy",
    "way",
    "shots",
    "labeled_fraction",
    "episodes",
    "accuracy",
    "half_width",
    "query_hit_rate",
    "config_hash",
];

/// One CSV row per report under a fixed header, fields in [`COLUMNS`]
/// order; missing optional values are empty fields.
pub fn to_csv(reports: &[EvalReport]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(COLUMNS)?;
    for r in reports {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn from_csv(text: &str) -> Result<Vec<EvalReport>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.deserialize().map(|row| Ok(row?)).collect()
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

/// Space-aligned table; accuracy and interval are shown as percentages.
pub fn to_text(reports: &[EvalReport]) -> String {
    let header: Vec<String> = COLUMNS.iter().map(|c| c.to_string()).collect();
    let mut rows = vec![header];
    for r in reports {
        rows.push(vec![
            r.model.clone(),
            r.mode.clone(),
            r.policy.clone(),
            r.way.to_string(),
            r.shots.to_string(),
            r.labeled_fraction.to_string(),
            r.episodes.to_string(),
            pct(r.accuracy),
            r.half_width.map_or("n/a".into(), pct),
            r.query_hit_rate.map_or("-".into(), pct),
            r.config_hash.clone(),
        ]);
    }
    let widths: Vec<usize> = (0..COLUMNS.len())
        .map(|c| rows.iter().map(|row| row[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in rows {
        let cells: Vec<String> = row.iter().zip(&widths).map(|(cell, &w)| format!("{cell:<w$}")).collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    out
}

/// Both renderings: `(csv, text)`.
pub fn emit_tables(reports: &[EvalReport]) -> Result<(String, String)> {
    Ok((to_csv(reports)?, to_text(reports)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report() -> EvalReport {
        EvalReport {
            model: "gnn".into(),
            mode: "fewshot".into(),
            policy: "-".into(),
            way: 5,
            shots: 1,
            labeled_fraction: 1.0,
            episodes: 1000,
            accuracy: 0.9731,
            half_width: Some(0.010045),
            query_hit_rate: None,
            config_hash: "0123456789abcdef".into(),
        }
    }

    #[test]
    fn empty_list_is_header_only() {
        let (csv, text) = emit_tables(&[]).unwrap();
        assert_eq!(csv, COLUMNS.join(",") + "\n");
        assert_eq!(text.lines().count(), 1);
        assert!(from_csv(&csv).unwrap().is_empty());
    }

    #[test]
    fn one_report_one_row_in_column_order() {
        let (csv, text) = emit_tables(&[report()]).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[1], "gnn,fewshot,-,5,1,1.0,1000,0.9731,0.010045,,0123456789abcdef");
        assert!(text.lines().nth(1).unwrap().contains("97.31"));
    }

    #[test]
    fn csv_round_trip() {
        let mut b = report();
        b.half_width = None;
        b.query_hit_rate = Some(0.6125);
        b.accuracy = 1.0 / 3.0;
        let reports = vec![report(), b];
        assert_eq!(from_csv(&to_csv(&reports).unwrap()).unwrap(), reports);
    }

    #[test]
    fn missing_interval_prints_not_applicable() {
        let mut r = report();
        r.half_width = None;
        assert!(to_text(&[r]).contains("n/a"));
    }
}
