//! Run reports and artifact writers. The report JSON is byte-reproducible
//! for a fixed (config, build): wall-clock timings go to a separate
//! timings.txt that is excluded from the reproducibility contract.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

use crate::config::ExperimentConfig;

#[derive(Clone, Debug, Serialize)]
pub struct StageReport {
    pub name: String,
    pub ok: bool,
    pub artifacts: Vec<String>,
    pub notes: Vec<String>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub build: String,
    pub config: ExperimentConfig,
    pub stages: Vec<StageReport>,
    pub gates: Option<Vec<igff::acceptance::GateResult>>,
}

impl RunReport {
    pub fn new(config: &ExperimentConfig) -> Self {
        RunReport {
            build: format!("igff {}", env!("CARGO_PKG_VERSION")),
            config: config.clone(),
            stages: Vec::new(),
            gates: None,
        }
    }

    pub fn all_ok(&self) -> bool {
        self.stages.iter().all(|s| s.ok)
            && self
                .gates
                .as_ref()
                .map(|g| g.iter().all(|x| x.pass))
                .unwrap_or(true)
    }

    pub fn write(&self, out_dir: &Path) -> Result<PathBuf> {
        let path = out_dir.join("report.json");
        let json = serde_json::to_string_pretty(self)?;
        fs::write(&path, json.as_bytes()).with_context(|| format!("writing {path:?}"))?;
        Ok(path)
    }
}

pub struct Timings {
    lines: Vec<String>,
}

impl Timings {
    pub fn new() -> Self {
        Timings { lines: Vec::new() }
    }

    pub fn record(&mut self, stage: &str, seconds: f64) {
        self.lines.push(format!("{stage}\t{seconds:.3}s"));
    }

    pub fn write(&self, out_dir: &Path) -> Result<()> {
        let mut f = fs::File::create(out_dir.join("timings.txt"))?;
        for line in &self.lines {
            writeln!(f, "{line}")?;
        }
        Ok(())
    }
}

/// Write a CSV with a header row; floats carry 17 significant digits so the
/// round trip through text is lossless.
pub fn write_csv(
    out_dir: &Path,
    name: &str,
    header: &str,
    rows: impl IntoIterator<Item = Vec<CsvCell>>,
) -> Result<String> {
    let path = out_dir.join(name);
    let mut f = fs::File::create(&path).with_context(|| format!("creating {path:?}"))?;
    writeln!(f, "{header}")?;
    for row in rows {
        let line: Vec<String> = row.into_iter().map(|c| c.render()).collect();
        writeln!(f, "{}", line.join(","))?;
    }
    Ok(name.to_string())
}

pub enum CsvCell {
    UInt(u64),
    Float(f64),
}

impl CsvCell {
    fn render(self) -> String {
        match self {
            CsvCell::UInt(x) => x.to_string(),
            CsvCell::Float(x) => format!("{x:.16e}"),
        }
    }
}

/// Tag for embedding a float in a file name: 1.5 -> "1p5".
pub fn float_tag(x: f64) -> String {
    let mut s = format!("{x}");
    s = s.replace('.', "p").replace('-', "m");
    s
}

/// Read back a CSV of floats (header skipped); used by plotdata and the
/// cascade match stage.
pub fn read_float_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {path:?}"))?;
    let mut out = Vec::new();
    for line in text.lines().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|cell| cell.trim().parse::<f64>().unwrap_or(f64::NAN))
            .collect();
        out.push(row);
    }
    Ok(out)
}
