//! CSV run reports, loss curves and timing sidecars.

use std::path::{Path, PathBuf};

use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};
use crate::pipeline::{Handoff, StageCost};
use crate::train::LossRecord;

/// Metric name/value pairs plus a configuration snapshot and seed. Rows
/// keep insertion order, so a fixed sequence of calls yields fixed bytes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunReport {
    pub command: String,
    pub seed: u64,
    pub config: Vec<(String, String)>,
    pub metrics: Vec<(String, String)>,
    /// Wall-clock entries (ms); written to the sidecar only.
    pub timings: Vec<(String, f64)>,
}

/// Shortest round-trip formatting, so equal values print identically.
fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

impl RunReport {
    pub fn new(command: impl Into<String>, seed: u64) -> Self {
        Self {
            command: command.into(),
            seed,
            ..Self::default()
        }
    }

    pub fn config(&mut self, key: impl Into<String>, value: impl ToString) -> &mut Self {
        self.config.push((key.into(), value.to_string()));
        self
    }

    pub fn metric(&mut self, key: impl Into<String>, value: f64) -> &mut Self {
        self.metrics.push((key.into(), fmt_f64(value)));
        self
    }

    pub fn note(&mut self, key: impl Into<String>, value: impl ToString) -> &mut Self {
        self.metrics.push((key.into(), value.to_string()));
        self
    }

    pub fn timing(&mut self, key: impl Into<String>, ms: f64) -> &mut Self {
        self.timings.push((key.into(), ms));
        self
    }

    pub fn metric_value(&self, key: &str) -> Option<f64> {
        self.metrics.iter().find(|(k, _)| k == key).and_then(|(_, v)| v.parse().ok())
    }

    /// Records the sparse/dense handoff indices.
    pub fn handoff(&mut self, prefix: &str, h: &Handoff) -> &mut Self {
        let opt = |t: Option<usize>| t.map_or_else(|| "clean".to_string(), |t| t.to_string());
        self.note(format!("{prefix}.pre_exit_timestep"), opt(h.pre_timestep));
        self.metric(format!("{prefix}.pre_exit_alpha_bar"), h.pre_alpha_bar);
        self.note(format!("{prefix}.reentry_step"), h.reentry_step);
        self.note(format!("{prefix}.reentry_timestep"), opt(h.reentry_timestep));
        self.metric(format!("{prefix}.reentry_alpha_bar"), h.reentry_alpha_bar)
    }

    /// FLOP counts go in the report; stage times go in the sidecar.
    pub fn stage_cost(&mut self, prefix: &str, c: &StageCost) -> &mut Self {
        self.note(format!("{prefix}.pre_flops"), c.pre_flops);
        self.note(format!("{prefix}.crf_flops"), c.crf_flops);
        self.note(format!("{prefix}.post_flops"), c.post_flops);
        self.timing(format!("{prefix}.pre"), c.pre_ms);
        self.timing(format!("{prefix}.crf"), c.crf_ms);
        self.timing(format!("{prefix}.post"), c.post_ms);
        self.timing(format!("{prefix}.total"), c.total_ms)
    }

    /// `section,key,value` rows: meta, then config, then metrics.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["section", "key", "value"]).map_err(csv_err)?;
        w.write_record(["meta", "command", &self.command]).map_err(csv_err)?;
        w.write_record(["meta", "seed", &self.seed.to_string()]).map_err(csv_err)?;
        for (k, v) in &self.config {
            w.write_record(["config", k, v]).map_err(csv_err)?;
        }
        for (k, v) in &self.metrics {
            w.write_record(["metric", k, v]).map_err(csv_err)?;
        }
        w.into_inner().map_err(|e| Error::invalid(format!("csv: {e}")))
    }

    pub fn timings_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["stage", "ms"]).map_err(csv_err)?;
        for (k, v) in &self.timings {
            w.write_record([k.as_str(), &format!("{v:.4}")]).map_err(csv_err)?;
        }
        w.into_inner().map_err(|e| Error::invalid(format!("csv: {e}")))
    }

    /// Writes `path` and, if there are timings, the `<stem>.timings.csv`
    /// sidecar next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_csv()?)?;
        if !self.timings.is_empty() {
            write_atomic(&timings_path(path), &self.timings_csv()?)?;
        }
        Ok(())
    }
}

pub fn timings_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
    path.with_file_name(format!("{stem}.timings.csv"))
}

fn csv_err(e: csv::Error) -> Error {
    Error::invalid(format!("csv: {e}"))
}

/// `step,L_NT,L_adv,L_disc,L_DT,step_size`, blank where a stage has no
/// value.
pub fn loss_curve_csv(losses: &[LossRecord]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["step", "L_NT", "L_adv", "L_disc", "L_DT", "step_size"])
        .map_err(csv_err)?;
    let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
    for r in losses {
        w.write_record([
            r.step.to_string(),
            opt(r.l_nt),
            opt(r.l_adv),
            opt(r.l_disc),
            opt(r.l_dt),
            fmt_f64(r.step_size),
        ])
        .map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Error::invalid(format!("csv: {e}")))
}

/// A two-column series such as a variance or convergence curve.
pub fn series_csv(index_name: &str, value_name: &str, values: &[f64], first_index: usize) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([index_name, value_name]).map_err(csv_err)?;
    for (i, v) in values.iter().enumerate() {
        w.write_record([(first_index + i).to_string(), fmt_f64(*v)]).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Error::invalid(format!("csv: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_layout_is_stable() {
        let mut r = RunReport::new("eval", 7);
        r.config("pipeline.pre_steps", 31).metric("fd", 0.25).timing("total", 3.5);
        let text = String::from_utf8(r.to_csv().unwrap()).unwrap();
        assert_eq!(
            text,
            "section,key,value\nmeta,command,eval\nmeta,seed,7\nconfig,pipeline.pre_steps,31\nmetric,fd,0.25\n"
        );
        assert_eq!(r.metric_value("fd"), Some(0.25));
        assert!(String::from_utf8(r.timings_csv().unwrap()).unwrap().contains("total,3.5000"));
    }

    #[test]
    fn loss_rows_leave_other_stage_blank() {
        let rows = [LossRecord {
            step: 0,
            l_nt: None,
            l_adv: None,
            l_disc: None,
            l_dt: Some(1.5),
            step_size: 1e-3,
        }];
        let text = String::from_utf8(loss_curve_csv(&rows).unwrap()).unwrap();
        assert_eq!(text.lines().nth(1), Some("0,,,,1.5,0.001"));
    }

    #[test]
    fn sidecar_sits_next_to_report() {
        assert_eq!(timings_path(Path::new("/x/run.csv")), PathBuf::from("/x/run.timings.csv"));
    }
}
