//! Runs several algorithms over several seeds on the same task.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::Algo;

use super::config::RunConfig;
use super::train::{train, CurveRecord};

/// Mean and spread of `mean_match` across seeds at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub algo: Algo,
    pub mean: f64,
    /// Population std across seeds.
    pub std: f64,
}

/// Steps-to-threshold for one (algo, seed) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub algo: Algo,
    pub seed: u64,
    /// First step whose trailing-window mean match reaches the threshold;
    /// empty when never reached.
    pub steps_to_threshold: Option<usize>,
    pub final_window_match: f64,
}

#[derive(Debug, Clone)]
pub struct CompareResult {
    pub curves: Vec<CurvePoint>,
    pub summary: Vec<SummaryRow>,
    pub runs: Vec<(Algo, u64, Vec<CurveRecord>)>,
}

/// First step `s` with mean(match[s+1-window..=s]) >= threshold.
pub fn steps_to_threshold(matches: &[f64], threshold: f64, window: usize) -> Option<usize> {
    if window == 0 {
        return None;
    }
    matches.windows(window).position(|w| w.iter().sum::<f64>() / window as f64 >= threshold).map(|i| i + window - 1)
}

fn trailing_mean(xs: &[f64], window: usize) -> f64 {
    let tail = &xs[xs.len().saturating_sub(window)..];
    if tail.is_empty() {
        0.0
    } else {
        tail.iter().sum::<f64>() / tail.len() as f64
    }
}

/// Trains every (algo, seed) pair from `cfg.compare`, with `train.seed` set
/// to each seed. Runs are independent and execute in parallel; results come
/// back in (algo, seed) order.
pub fn compare(cfg: &RunConfig) -> Result<CompareResult> {
    cfg.validate()?;
    let c = &cfg.compare;
    if c.algos.is_empty() || c.seeds.is_empty() {
        return Err(Error::Config("compare needs at least one algo and one seed".into()));
    }
    let task = cfg.task.build()?;
    let pairs: Vec<(Algo, u64)> = c.algos.iter().flat_map(|&a| c.seeds.iter().map(move |&s| (a, s))).collect();
    let runs: Vec<(Algo, u64, Vec<CurveRecord>)> = pairs
        .par_iter()
        .map(|&(algo, seed)| {
            let mut train_cfg = cfg.train.clone();
            train_cfg.objective.algo = algo;
            train_cfg.seed = seed;
            train(&train_cfg, &cfg.task, &task).map(|r| (algo, seed, r.records))
        })
        .collect::<Result<_>>()?;

    let mut summary = Vec::with_capacity(runs.len());
    for (algo, seed, records) in &runs {
        let m: Vec<f64> = records.iter().map(|r| r.mean_match).collect();
        summary.push(SummaryRow {
            algo: *algo,
            seed: *seed,
            steps_to_threshold: steps_to_threshold(&m, c.threshold, c.window),
            final_window_match: trailing_mean(&m, c.window),
        });
    }

    let mut curves = Vec::new();
    for &algo in &c.algos {
        let of_algo: Vec<&Vec<CurveRecord>> = runs.iter().filter(|r| r.0 == algo).map(|r| &r.2).collect();
        for step in 0..cfg.train.steps {
            let xs: Vec<f64> = of_algo.iter().map(|r| r[step].mean_match).collect();
            let n = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            curves.push(CurvePoint { step, algo, mean, std: var.sqrt() });
        }
    }
    Ok(CompareResult { curves, summary, runs })
}

impl CompareResult {
    /// Algorithms ordered by mean steps-to-threshold, treating a miss as the
    /// run length. Ties keep config order.
    pub fn ordering(&self, steps: usize) -> Vec<(Algo, f64)> {
        let mut algos: Vec<Algo> = Vec::new();
        for row in &self.summary {
            if !algos.contains(&row.algo) {
                algos.push(row.algo);
            }
        }
        let mut out: Vec<(Algo, f64)> = algos
            .into_iter()
            .map(|a| {
                let rows: Vec<f64> = self
                    .summary
                    .iter()
                    .filter(|r| r.algo == a)
                    .map(|r| r.steps_to_threshold.unwrap_or(steps) as f64)
                    .collect();
                (a, rows.iter().sum::<f64>() / rows.len() as f64)
            })
            .collect();
        out.sort_by(|x, y| x.1.total_cmp(&y.1));
        out
    }

    pub fn write_curves_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for p in &self.curves {
            out.serialize(p)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_summary_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.summary {
            out.serialize(r)?;
        }
        out.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_uses_trailing_window() {
        let m = [0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0];
        assert_eq!(steps_to_threshold(&m, 0.9, 3), Some(6));
        assert_eq!(steps_to_threshold(&m, 0.6, 3), Some(2));
        assert_eq!(steps_to_threshold(&m, 0.6, 10), None);
        assert_eq!(steps_to_threshold(&[0.5; 4], 0.6, 1), None);
    }

    #[test]
    fn small_compare_shapes() {
        let mut cfg = RunConfig::default();
        cfg.train.steps = 3;
        cfg.train.batch_groups = 2;
        cfg.train.group_size = 4;
        cfg.compare.seeds = vec![1, 2];
        cfg.compare.window = 2;
        let r = compare(&cfg).unwrap();
        assert_eq!(r.summary.len(), 6);
        assert_eq!(r.curves.len(), 9);
        assert_eq!(r.ordering(3).len(), 3);
        let mut buf = Vec::new();
        r.write_summary_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("algo,seed,steps_to_threshold,final_window_match\n"));
    }
}
