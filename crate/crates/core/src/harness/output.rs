use std::fmt::Write as _;
use std::path::Path;

use super::{ExperimentConfig, HarnessError};

/// A CSV body plus the notes that go into its trailing metadata line.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CsvTable {
    pub header: String,
    pub rows: Vec<String>,
    pub notes: Vec<(String, String)>,
}

impl CsvTable {
    pub fn new(header: &str) -> Self {
        Self {
            header: header.to_string(),
            ..Self::default()
        }
    }

    pub fn note(mut self, key: &str, value: impl ToString) -> Self {
        self.notes.push((key.to_string(), value.to_string()));
        self
    }

    /// Header, rows, then `# config_hash=... seed=... seeds=...` and any notes.
    pub fn render(&self, cfg: &ExperimentConfig) -> String {
        let mut out = String::new();
        out.push_str(&self.header);
        out.push('\n');
        for r in &self.rows {
            out.push_str(r);
            out.push('\n');
        }
        let seeds: Vec<String> = cfg.seeds.iter().map(u64::to_string).collect();
        write!(
            out,
            "# config_hash={} seed={} seeds={}",
            cfg.hash(),
            cfg.seed,
            seeds.join(";")
        )
        .unwrap();
        for (k, v) in &self.notes {
            write!(out, " {k}={v}").unwrap();
        }
        out.push('\n');
        out
    }
}

pub fn write_csv(path: &Path, table: &CsvTable, cfg: &ExperimentConfig) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, table.render(cfg))?;
    Ok(())
}
