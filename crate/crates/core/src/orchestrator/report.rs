//! Metrics files and the `report` summary of a finished run.

use std::io::Write;
use std::path::Path;

use super::{read_manifest, JobError};
use crate::model_federation::RoundMetrics;

pub fn write_metrics(path: &Path, metrics: &[RoundMetrics]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["round", "train_loss", "eval_metric"])?;
    for m in metrics {
        w.write_record([m.round.to_string(), m.train_loss.to_string(), m.eval_metric.to_string()])?;
    }
    w.flush()
}

pub fn read_metrics(path: &Path) -> Result<Vec<RoundMetrics>, JobError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| JobError::Io(e.into()))?;
    let mut out = Vec::new();
    for rec in r.deserialize() {
        let m: RoundMetrics = rec.map_err(|e| JobError::Io(e.into()))?;
        out.push(m);
    }
    Ok(out)
}

/// Trailing moving average; the first `window − 1` entries average what is
/// available so far.
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for (i, v) in values.iter().enumerate() {
        sum += v;
        if i >= window {
            sum -= values[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub job_id: String,
    pub rounds: usize,
    pub first_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub final_eval: Option<f64>,
    pub best_eval: Option<f64>,
    pub summary: String,
}

const SMOOTHING: usize = 10;

/// Writes `loss_curve.csv` (`round,train_loss,smoothed_loss`) and
/// `summary.txt` into the run directory.
pub fn report(run_dir: &Path) -> Result<Report, JobError> {
    let metrics = read_metrics(&run_dir.join("metrics.csv"))?;
    let manifest = read_manifest(&run_dir.join("manifest.txt"))?;
    let get = |k: &str| manifest.iter().find(|(key, _)| key == k).map(|(_, v)| v.clone());
    let losses: Vec<f64> = metrics.iter().map(|m| m.train_loss).collect();
    let smooth = smoothed(&losses, SMOOTHING);

    let mut w = csv::Writer::from_path(run_dir.join("loss_curve.csv")).map_err(|e| JobError::Io(e.into()))?;
    w.write_record(["round", "train_loss", "smoothed_loss"]).map_err(|e| JobError::Io(e.into()))?;
    for (m, s) in metrics.iter().zip(&smooth) {
        w.write_record([m.round.to_string(), m.train_loss.to_string(), s.to_string()]).map_err(|e| JobError::Io(e.into()))?;
    }
    w.flush()?;

    let best_eval = metrics.iter().map(|m| m.eval_metric).filter(|v| v.is_finite()).fold(None, |b: Option<f64>, v| {
        Some(b.map_or(v, |b| b.max(v)))
    });
    let rep = Report {
        job_id: get("job_id").unwrap_or_default(),
        rounds: metrics.len(),
        first_loss: losses.first().copied(),
        final_loss: losses.last().copied(),
        final_eval: metrics.last().map(|m| m.eval_metric),
        best_eval,
        summary: String::new(),
    };
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.6}"));
    let mut s = String::new();
    s.push_str(&format!("job:          {}\n", rep.job_id));
    for key in ["kind", "level", "layout", "seed"] {
        s.push_str(&format!("{:<14}{}\n", format!("{key}:"), get(key).unwrap_or_default()));
    }
    s.push_str(&format!("rounds:       {}\n", rep.rounds));
    s.push_str(&format!("first loss:   {}\n", fmt(rep.first_loss)));
    s.push_str(&format!("final loss:   {}\n", fmt(rep.final_loss)));
    s.push_str(&format!("final eval:   {}\n", fmt(rep.final_eval)));
    s.push_str(&format!("best eval:    {}\n", fmt(rep.best_eval)));
    if let Some(d) = get("knowledge_sha256") {
        s.push_str(&format!("knowledge:    sha256 {d}\n"));
    }
    let mut f = std::fs::File::create(run_dir.join("summary.txt"))?;
    f.write_all(s.as_bytes())?;
    Ok(Report { summary: s, ..rep })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moving_average() {
        assert_eq!(smoothed(&[4.0, 2.0, 6.0, 0.0], 2), vec![4.0, 3.0, 4.0, 3.0]);
        assert_eq!(smoothed(&[], 3), Vec::<f64>::new());
    }

    #[test]
    fn metrics_roundtrip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let m = vec![
            RoundMetrics { round: 1, train_loss: 0.1 + 0.2, eval_metric: 2.0f64.sqrt() },
            RoundMetrics { round: 2, train_loss: 1e-300, eval_metric: 0.5 },
        ];
        write_metrics(&p, &m).unwrap();
        assert!(std::fs::read_to_string(&p).unwrap().starts_with("round,train_loss,eval_metric\n"));
        assert_eq!(read_metrics(&p).unwrap(), m);
    }
}
