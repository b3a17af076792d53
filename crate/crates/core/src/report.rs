//! Result tables: tab-delimited text plus a JSON sidecar, and trace CSVs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::engine::IterationRecord;
use crate::error::{Error, Result};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// One (strategy, scenario) row. Rates are percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub strategy: String,
    pub scenario: String,
    pub samples: usize,
    pub a_all: f64,
    pub a_avg: f64,
    pub per_task: Vec<f64>,
    /// Mean final task weights; empty when not applicable.
    pub weights: Vec<f64>,
    pub natural_accuracy: Option<f64>,
    pub robust_accuracy: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub spec_hash: String,
    pub seed: u64,
    pub tool_version: String,
    pub rows: Vec<ResultRow>,
}

const HEADER: &str = "# tamoo results";
const COLUMNS: &str = "strategy\tscenario\tsamples\ta_all\ta_avg\ta_i\tw_i\tnat_acc\trob_acc\tseconds";

fn in_percent(v: f64) -> bool {
    (0.0..=100.0).contains(&v)
}

impl ResultRow {
    pub fn check(&self) -> Result<()> {
        let label = format!("{}/{}", self.strategy, self.scenario);
        let rates = [self.a_all, self.a_avg]
            .into_iter()
            .chain(self.per_task.iter().copied())
            .chain(self.natural_accuracy)
            .chain(self.robust_accuracy);
        for v in rates {
            if !in_percent(v) {
                return Err(Error::Invariant(format!("{label}: rate {v} outside [0, 100]")));
            }
        }
        if self.a_all > self.a_avg {
            return Err(Error::Invariant(format!(
                "{label}: A-All {} exceeds A-Avg {}",
                self.a_all, self.a_avg
            )));
        }
        for field in [&self.strategy, &self.scenario] {
            if field.is_empty() || field.contains(['\t', '\n']) {
                return Err(Error::Invariant(format!("{label}: bad key `{field}`")));
            }
        }
        Ok(())
    }
}

fn join(v: &[f64]) -> String {
    if v.is_empty() {
        "-".into()
    } else {
        v.iter().map(f64::to_string).collect::<Vec<_>>().join(";")
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| x.to_string())
}

impl ResultTable {
    pub fn new(spec_hash: impl Into<String>, seed: u64) -> Self {
        Self {
            spec_hash: spec_hash.into(),
            seed,
            tool_version: TOOL_VERSION.into(),
            rows: Vec::new(),
        }
    }

    pub fn row(&self, strategy: &str, scenario: &str) -> Option<&ResultRow> {
        self.rows
            .iter()
            .find(|r| r.strategy == strategy && r.scenario == scenario)
    }

    fn render(&self, with_seconds: bool) -> String {
        let mut out = format!(
            "{HEADER}\n# spec_hash={}\n# seed={}\n# tool_version={}\n{COLUMNS}\n",
            self.spec_hash, self.seed, self.tool_version
        );
        for r in &self.rows {
            let seconds = if with_seconds { r.seconds } else { 0.0 };
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.strategy,
                r.scenario,
                r.samples,
                r.a_all,
                r.a_avg,
                join(&r.per_task),
                join(&r.weights),
                opt(r.natural_accuracy),
                opt(r.robust_accuracy),
                seconds
            )
            .expect("write to string");
        }
        out
    }

    /// The text encoding written by [`write_report`].
    pub fn to_text(&self) -> String {
        self.render(true)
    }

    /// Text encoding with the wall-clock column zeroed.
    pub fn canonical_text(&self) -> String {
        self.render(false)
    }

    /// SHA-256 of [`Self::canonical_text`], hex.
    pub fn content_hash(&self) -> String {
        hex(&Sha256::digest(self.canonical_text().as_bytes()))
    }

    pub fn check(&self) -> Result<()> {
        self.rows.iter().try_for_each(ResultRow::check)
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes the table and its JSON sidecar. Refuses tables that break a
/// row invariant.
pub fn write_report(table: &ResultTable, path: &Path) -> Result<()> {
    table.check()?;
    std::fs::write(path, table.to_text()).map_err(|e| Error::io(path, e))?;
    let sidecar = sidecar_path(path);
    let json = serde_json::to_string_pretty(table)?;
    std::fs::write(&sidecar, json + "\n").map_err(|e| Error::io(&sidecar, e))
}

pub fn read_report(path: &Path) -> Result<ResultTable> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_report(&text, path)
}

pub fn parse_report(text: &str, path: &Path) -> Result<ResultTable> {
    let err = |line: usize, reason: String| Error::Parse {
        path: path.into(),
        line,
        reason,
    };
    let lines: Vec<&str> = text.lines().collect();
    if lines.first() != Some(&HEADER) {
        return Err(err(1, "missing results header".into()));
    }
    let meta = |idx: usize, key: &str| -> Result<&str> {
        lines
            .get(idx)
            .and_then(|l| l.strip_prefix("# "))
            .and_then(|l| l.strip_prefix(key))
            .and_then(|l| l.strip_prefix('='))
            .ok_or_else(|| err(idx + 1, format!("expected `# {key}=...`")))
    };
    let spec_hash = meta(1, "spec_hash")?.to_string();
    let seed = meta(2, "seed")?.parse().map_err(|e| err(3, format!("bad seed: {e}")))?;
    let tool_version = meta(3, "tool_version")?.to_string();
    if lines.get(4) != Some(&COLUMNS) {
        return Err(err(5, "unexpected column header".into()));
    }
    let mut rows = Vec::new();
    for (k, line) in lines.iter().enumerate().skip(5) {
        let lineno = k + 1;
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 10 {
            return Err(err(lineno, format!("expected 10 fields, found {}", f.len())));
        }
        let num = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|e| err(lineno, format!("bad {what} `{s}`: {e}")))
        };
        let list = |s: &str, what: &str| -> Result<Vec<f64>> {
            if s == "-" {
                Ok(Vec::new())
            } else {
                s.split(';').map(|v| num(v, what)).collect()
            }
        };
        let optional = |s: &str, what: &str| -> Result<Option<f64>> {
            if s == "-" {
                Ok(None)
            } else {
                num(s, what).map(Some)
            }
        };
        let row = ResultRow {
            strategy: f[0].to_string(),
            scenario: f[1].to_string(),
            samples: f[2]
                .parse()
                .map_err(|e| err(lineno, format!("bad sample count: {e}")))?,
            a_all: num(f[3], "a_all")?,
            a_avg: num(f[4], "a_avg")?,
            per_task: list(f[5], "a_i")?,
            weights: list(f[6], "w_i")?,
            natural_accuracy: optional(f[7], "nat_acc")?,
            robust_accuracy: optional(f[8], "rob_acc")?,
            seconds: num(f[9], "seconds")?,
        };
        row.check().map_err(|e| err(lineno, e.to_string()))?;
        rows.push(row);
    }
    Ok(ResultTable {
        spec_hash,
        seed,
        tool_version,
        rows,
    })
}

/// Long-format trace: one line per (sample, iteration, task).
pub fn trace_csv(traces: &[(usize, &[IterationRecord])]) -> String {
    let mut out = String::from("sample,iteration,task,loss,weight,grad_norm,achieved\n");
    for (sample, records) in traces {
        for rec in *records {
            for task in 0..rec.losses.len() {
                let weight = rec.weights.get(task).map_or_else(String::new, f64::to_string);
                let achieved = rec.achieved.get(task).map_or("", |&a| if a { "1" } else { "0" });
                writeln!(
                    out,
                    "{sample},{},{task},{},{weight},{},{achieved}",
                    rec.iteration, rec.losses[task], rec.grad_norms[task]
                )
                .expect("write to string");
            }
        }
    }
    out
}

pub fn write_trace_csv(traces: &[(usize, &[IterationRecord])], path: &Path) -> Result<()> {
    std::fs::write(path, trace_csv(traces)).map_err(|e| Error::io(path, e))
}
