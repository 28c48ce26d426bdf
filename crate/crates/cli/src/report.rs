use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use crate::config::Variant;

/// First line of every metrics file.
pub const SCHEMA_LINE: &str = "# latentkf metrics v1";

pub const COLUMNS: [&str; 9] = [
    "variant",
    "noise_level",
    "mse_db",
    "std_db",
    "latency_us_per_step",
    "param_count",
    "op_count",
    "seed",
    "config_hash",
];

/// One row of `metrics.csv`. A variant whose training diverged is kept
/// with NaN metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub variant: Variant,
    pub noise_level: f64,
    pub mse_db: f64,
    pub std_db: f64,
    pub latency_us_per_step: f64,
    pub param_count: usize,
    pub op_count: usize,
    pub seed: u64,
    pub config_hash: String,
}

pub fn write_metrics<W: Write>(out: W, rows: &[MetricRecord]) -> anyhow::Result<()> {
    let mut out = out;
    writeln!(out, "{SCHEMA_LINE}")?;
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    if rows.is_empty() {
        w.write_record(COLUMNS)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_metrics(path: &Path, rows: &[MetricRecord]) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let f = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    write_metrics(std::io::BufWriter::new(f), rows)
}

/// Parse a metrics file. Errors name the offending line (1-based, counting
/// the schema line).
pub fn read_metrics<R: Read>(input: R) -> anyhow::Result<Vec<MetricRecord>> {
    let mut reader = BufReader::new(input);
    let mut first = String::new();
    reader.read_line(&mut first)?;
    if first.trim_end() != SCHEMA_LINE {
        bail!("line 1: expected `{SCHEMA_LINE}`, found `{}`", first.trim_end());
    }
    let mut r = csv::Reader::from_reader(reader);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != COLUMNS {
        bail!("line 2: unexpected columns {header:?}");
    }
    let mut rows = Vec::new();
    for rec in r.deserialize::<MetricRecord>() {
        match rec {
            Ok(v) => rows.push(v),
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line() + 1);
                bail!("line {line}: {e}");
            }
        }
    }
    Ok(rows)
}

pub fn load_metrics(path: &Path) -> anyhow::Result<Vec<MetricRecord>> {
    let f = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_metrics(f).with_context(|| format!("parsing {}", path.display()))
}

/// Human-readable table for the terminal.
pub fn format_table(rows: &[MetricRecord]) -> String {
    let mut s = format!(
        "{:<20} {:>7} {:>9} {:>8} {:>12} {:>8} {:>10} {:>5}\n",
        "variant", "level", "MSE[dB]", "std[dB]", "us/step", "params", "ops/step", "seed"
    );
    for r in rows {
        s.push_str(&format!(
            "{:<20} {:>7.2} {:>9.3} {:>8.3} {:>12.2} {:>8} {:>10} {:>5}\n",
            r.variant.name(),
            r.noise_level,
            r.mse_db,
            r.std_db,
            r.latency_us_per_step,
            r.param_count,
            r.op_count,
            r.seed
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: Variant, mse: f64) -> MetricRecord {
        MetricRecord {
            variant: v,
            noise_level: 23.0,
            mse_db: mse,
            std_db: 0.5,
            latency_us_per_step: 120.25,
            param_count: 2804,
            op_count: 100,
            seed: 0,
            config_hash: "00ff".into(),
        }
    }

    #[test]
    fn round_trip() {
        let rows = vec![row(Variant::Encoder, -3.0), row(Variant::LatentKalmanNet, f64::NAN)];
        let mut buf = Vec::new();
        write_metrics(&mut buf, &rows).unwrap();
        let back = read_metrics(buf.as_slice()).unwrap();
        assert_eq!(back[0], rows[0]);
        assert!(back[1].mse_db.is_nan());
    }

    #[test]
    fn empty_table_still_has_a_header() {
        let mut buf = Vec::new();
        write_metrics(&mut buf, &[]).unwrap();
        assert!(read_metrics(buf.as_slice()).unwrap().is_empty());
    }

    #[test]
    fn malformed_row_reports_its_line() {
        let text = format!("{SCHEMA_LINE}\n{}\nencoder,23,-3,0.5,1,2,3,0,ab\nencoder,23,oops,0.5,1,2,3,0,ab\n", COLUMNS.join(","));
        let err = read_metrics(text.as_bytes()).unwrap_err().to_string();
        assert!(err.starts_with("line 4:"), "{err}");
    }

    #[test]
    fn missing_schema_line_is_rejected() {
        let text = format!("{}\n", COLUMNS.join(","));
        let err = read_metrics(text.as_bytes()).unwrap_err().to_string();
        assert!(err.starts_with("line 1:"), "{err}");
    }
}
