use std::io::Write;

use crate::error::Result;

pub const METRICS_HEADER: [&str; 8] = [
    "wall_clock_s",
    "env_steps",
    "updates",
    "mean_return",
    "std_return",
    "policy_loss",
    "value_loss",
    "entropy",
];

/// One line of the training metrics stream. Returns summarize the most
/// recent completed episodes and are NaN before the first one ends.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub wall_clock_s: f64,
    pub env_steps: u64,
    pub updates: u64,
    pub mean_return: f64,
    pub std_return: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
}

/// Append-only CSV writer; the header goes out with the first row.
pub struct MetricsWriter<W: Write> {
    inner: csv::Writer<W>,
    wrote_header: bool,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(w: W) -> Self {
        Self {
            inner: csv::Writer::from_writer(w),
            wrote_header: false,
        }
    }

    /// For appending to a stream that already has its header.
    pub fn continuing(w: W) -> Self {
        Self {
            inner: csv::Writer::from_writer(w),
            wrote_header: true,
        }
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        if !self.wrote_header {
            self.inner.write_record(METRICS_HEADER)?;
            self.wrote_header = true;
        }
        self.inner.write_record([
            row.wall_clock_s.to_string(),
            row.env_steps.to_string(),
            row.updates.to_string(),
            row.mean_return.to_string(),
            row.std_return.to_string(),
            row.policy_loss.to_string(),
            row.value_loss.to_string(),
            row.entropy.to_string(),
        ])?;
        self.inner.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> Result<W> {
        self.inner
            .into_inner()
            .map_err(|e| crate::error::TitError::Io(e.into_error()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_then_rows() {
        let mut w = MetricsWriter::new(Vec::new());
        let row = MetricsRow {
            wall_clock_s: 0.0,
            env_steps: 256,
            updates: 1,
            mean_return: f64::NAN,
            std_return: f64::NAN,
            policy_loss: -0.5,
            value_loss: 2.25,
            entropy: 0.625,
        };
        w.write(&row).unwrap();
        w.write(&row).unwrap();
        let text = String::from_utf8(w.into_inner().unwrap()).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], METRICS_HEADER.join(","));
        assert_eq!(lines[1], "0,256,1,NaN,NaN,-0.5,2.25,0.625");
    }
}
