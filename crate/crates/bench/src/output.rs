//! CSV and JSON writers. Floats are written with 17 significant digits so
//! the files round-trip exactly.

use std::fs;
use std::path::Path;

use enki_core::enki::IterationRecord;
use serde::Serialize;

use crate::error::BenchError;

pub fn float(x: f64) -> String {
    format!("{x:.16e}")
}

fn opt_float(x: Option<f64>) -> String {
    x.map(float).unwrap_or_default()
}

pub const HISTORY_COLUMNS: [&str; 11] = [
    "k",
    "loss",
    "rel_change",
    "spread",
    "alpha",
    "alpha_min",
    "alpha_max",
    "alpha_mean",
    "delta_k",
    "eps_delta_current",
    "rel_error_vs_truth",
];

/// `alpha` holds the shared factor; it is empty when particles use their own.
pub fn history_rows(history: &[IterationRecord]) -> Vec<Vec<String>> {
    history
        .iter()
        .map(|r| {
            let shared = (r.alpha_min == r.alpha_max).then_some(r.alpha_mean);
            vec![
                r.k.to_string(),
                float(r.loss),
                float(r.rel_change),
                float(r.spread),
                opt_float(shared),
                float(r.alpha_min),
                float(r.alpha_max),
                float(r.alpha_mean),
                opt_float(r.delta_k),
                opt_float(r.eps_delta),
                opt_float(r.rel_error),
            ]
        })
        .collect()
}

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), BenchError> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::CRLF).from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), BenchError> {
    let text = serde_json::to_string_pretty(value).expect("artifact serializes");
    fs::write(path, text + "\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip() {
        for x in [0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23, f64::MIN_POSITIVE] {
            assert_eq!(float(x).parse::<f64>().unwrap(), x);
        }
        assert_eq!(float(1.0), "1.0000000000000000e0");
    }

    #[test]
    fn csv_quotes_per_rfc4180() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        write_csv(&path, &["a", "b"], &[vec!["x,y".into(), "say \"hi\"".into()]]).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text, "a,b\r\n\"x,y\",\"say \"\"hi\"\"\"\r\n");
    }
}
