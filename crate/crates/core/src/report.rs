//! Output bundles: CSV tables, a run manifest and minimal SVG plots.

use crate::config::Config;
use crate::error::Result;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

/// Version of the CSV column layouts, bumped whenever a header changes.
pub const SCHEMA_VERSION: u32 = 1;

/// A header plus rows of already formatted cells.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CsvTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

/// Shortest representation that parses back to the same `f64`.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

impl CsvTable {
    pub fn new<S: AsRef<str>>(header: &[S]) -> Self {
        CsvTable {
            header: header.iter().map(|s| s.as_ref().to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    /// Row of numbers.
    pub fn push_f64(&mut self, row: &[f64]) {
        self.push(row.iter().map(|&v| fmt_f64(v)).collect());
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        let bytes = w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("utf-8 cells"))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv_string()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let header = r.headers()?.iter().map(str::to_string).collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|r| r.iter().map(str::to_string).collect()))
            .collect::<std::result::Result<_, _>>()?;
        Ok(CsvTable { header, rows })
    }

    /// Column by name, parsed as numbers.
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.header.iter().position(|h| h == name)?;
        self.rows.iter().map(|r| r[j].parse().ok()).collect()
    }
}

/// Description of one run, written as `manifest.toml`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub toolkit_version: String,
    pub command: String,
    pub config_hash: String,
    #[serde(with = "crate::config::seed_repr")]
    pub master_seed: u64,
    pub schema_version: u32,
    pub wall_time_secs: f64,
    /// File name to column list, for every CSV in the bundle.
    pub tables: Vec<TableSchema>,
    pub warnings: Vec<String>,
    /// Full configuration echo.
    pub config: Config,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableSchema {
    pub file: String,
    pub columns: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, config: &Config) -> Self {
        RunManifest {
            toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config_hash: config.hash(),
            master_seed: config.seed,
            schema_version: SCHEMA_VERSION,
            wall_time_secs: 0.0,
            tables: Vec::new(),
            warnings: Vec::new(),
            config: config.clone(),
        }
    }

    pub fn register(&mut self, file: &str, table: &CsvTable) {
        self.tables.push(TableSchema {
            file: file.to_string(),
            columns: table.header.clone(),
        });
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_toml())?;
        Ok(())
    }
}

/// A named series for [`svg_lines`].
pub struct Series<'a> {
    pub label: &'a str,
    pub x: &'a [f64],
    pub y: &'a [f64],
}

const W: f64 = 480.0;
const H: f64 = 320.0;
const PAD: f64 = 48.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

fn range(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}

fn frame(title: &str, (x0, x1): (f64, f64), (y0, y1): (f64, f64)) -> String {
    let mut s = String::new();
    let _ = write!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"18\" text-anchor=\"middle\">{title}</text>\n\
         <polyline points=\"{PAD},{PAD} {PAD},{} {},{}\" fill=\"none\" stroke=\"black\"/>\n\
         <text x=\"{PAD}\" y=\"{}\">{x0:.3}</text><text x=\"{}\" y=\"{}\" text-anchor=\"end\">{x1:.3}</text>\n\
         <text x=\"4\" y=\"{}\">{y0:.3}</text><text x=\"4\" y=\"{}\">{y1:.3}</text>\n",
        W / 2.0,
        H - PAD,
        W - PAD,
        H - PAD,
        H - PAD + 14.0,
        W - PAD,
        H - PAD + 14.0,
        H - PAD,
        PAD + 4.0,
    );
    s
}

/// Line plot of one or more series sharing axes.
pub fn svg_lines(title: &str, series: &[Series]) -> String {
    let xr = range(series.iter().flat_map(|s| s.x.iter().copied()));
    let yr = range(series.iter().flat_map(|s| s.y.iter().copied()));
    let mut out = frame(title, xr, yr);
    let px = |x: f64| PAD + (x - xr.0) / (xr.1 - xr.0) * (W - 2.0 * PAD);
    let py = |y: f64| H - PAD - (y - yr.0) / (yr.1 - yr.0) * (H - 2.0 * PAD);
    for (k, s) in series.iter().enumerate() {
        let pts: Vec<String> = s
            .x
            .iter()
            .zip(s.y)
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|(&x, &y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        let c = COLORS[k % COLORS.len()];
        let _ = writeln!(out, "<polyline points=\"{}\" fill=\"none\" stroke=\"{c}\"/>", pts.join(" "));
        let _ = writeln!(
            out,
            "<text x=\"{}\" y=\"{}\" fill=\"{c}\" text-anchor=\"end\">{}</text>",
            W - PAD,
            PAD + 14.0 * k as f64,
            s.label
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Histogram of `samples` with `bins` equal-width bins.
pub fn svg_histogram(title: &str, samples: &[f64], bins: usize) -> String {
    let bins = bins.max(1);
    let xr = range(samples.iter().copied());
    let mut counts = vec![0usize; bins];
    for &v in samples.iter().filter(|v| v.is_finite()) {
        let b = ((v - xr.0) / (xr.1 - xr.0) * bins as f64) as usize;
        counts[b.min(bins - 1)] += 1;
    }
    let top = counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let mut out = frame(title, xr, (0.0, top));
    let bw = (W - 2.0 * PAD) / bins as f64;
    for (b, &c) in counts.iter().enumerate() {
        let h = c as f64 / top * (H - 2.0 * PAD);
        let _ = writeln!(
            out,
            "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{}\" stroke=\"white\"/>",
            PAD + b as f64 * bw,
            H - PAD - h,
            bw,
            h,
            COLORS[0]
        );
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_with_quoting() {
        let mut t = CsvTable::new(&["name", "value"]);
        t.push(vec!["a,b".into(), fmt_f64(0.1 + 0.2)]);
        t.push(vec!["say \"hi\"".into(), fmt_f64(-1e-300)]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        t.write(&p).unwrap();
        let back = CsvTable::read(&p).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.column("value").unwrap()[0], 0.1 + 0.2);
        assert!(t.to_csv_string().unwrap().contains("\"a,b\""));
    }

    #[test]
    fn manifest_echoes_config() {
        let c = Config::default();
        let mut m = RunManifest::new("lln", &c);
        m.register("lln.csv", &CsvTable::new(&["T", "mean"]));
        let back: RunManifest = toml::from_str(&m.to_toml()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.config_hash, c.hash());
    }

    #[test]
    fn svg_is_well_formed_enough() {
        let s = svg_lines(
            "t",
            &[Series {
                label: "a",
                x: &[0.0, 1.0],
                y: &[1.0, 2.0],
            }],
        );
        assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"));
        let h = svg_histogram("h", &[1.0, 1.0, 2.0], 4);
        assert_eq!(h.matches("<rect").count(), 5);
    }
}
