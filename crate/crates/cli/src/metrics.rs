//! Append-only JSONL metrics with monotone steps per phase.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use dfbf_core::error::Result;

#[derive(Debug, Serialize)]
struct MetricsRow<'a> {
    phase: &'a str,
    step: usize,
    metric: &'a str,
    value: f64,
    wall_ms: u64,
}

pub struct MetricsWriter {
    out: BufWriter<File>,
    started: Instant,
    next_step: HashMap<String, usize>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<MetricsWriter> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(MetricsWriter { out: BufWriter::new(file), started: Instant::now(), next_step: HashMap::new() })
    }

    /// Record one metric; the step counter advances per (phase, metric).
    pub fn record(&mut self, phase: &str, metric: &str, value: f64) -> Result<()> {
        let key = format!("{phase}/{metric}");
        let step = self.next_step.entry(key).or_insert(0);
        *step += 1;
        let row = MetricsRow {
            phase,
            step: *step,
            metric,
            value,
            wall_ms: self.started.elapsed().as_millis() as u64,
        };
        serde_json::to_writer(&mut self.out, &row)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }
}
