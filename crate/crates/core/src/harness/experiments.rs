//! Multi-seed experiment drivers: height-embedding ablation, window schemes
//! with their attention cost, and extrinsics-noise robustness.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::eval::{evaluate_baseline, evaluate_cft, Evaluation};
use super::train::{train_baseline, train_cft};
use crate::costmodel::{cost_table, CostReport};
use crate::error::Result;
use crate::metrics::MetricsReport;
use crate::pa::PaDesign;
use crate::scenegen::dataset::Dataset;
use crate::scenegen::perturb_extrinsics;
use crate::va::SchemeKind;

/// Offset separating evaluation scene seeds from training scene seeds.
const EVAL_SEED_OFFSET: u64 = 1 << 32;

/// One trained-and-evaluated configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment: String,
    pub variant: String,
    pub seed: u64,
    /// Rotation noise in degrees, zero outside the noise study.
    pub noise_deg: f64,
    pub draw: usize,
    pub map: f64,
    pub mate: f64,
    pub mase: f64,
    pub maoe: f64,
    pub mave: f64,
    pub maae: f64,
    pub nds: f64,
    pub final_loss: f64,
}

impl ResultRow {
    pub fn new(experiment: &str, variant: &str, seed: u64, report: &MetricsReport, final_loss: f64) -> Self {
        Self {
            experiment: experiment.into(),
            variant: variant.into(),
            seed,
            noise_deg: 0.0,
            draw: 0,
            map: report.map,
            mate: report.mate,
            mase: report.mase,
            maoe: report.maoe,
            mave: report.mave,
            maae: report.maae,
            nds: report.nds,
            final_loss,
        }
    }
}

/// Mean and sample standard deviation of NDS and mAP over the rows of one
/// variant (and noise level).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub variant: String,
    pub noise_deg: f64,
    pub runs: usize,
    pub nds_mean: f64,
    pub nds_std: f64,
    pub map_mean: f64,
    pub map_std: f64,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Groups rows by (variant, noise level) in first-seen order.
pub fn summarize(rows: &[ResultRow]) -> Vec<Summary> {
    let mut keys: Vec<(String, f64)> = Vec::new();
    for r in rows {
        if !keys.iter().any(|(v, n)| *v == r.variant && *n == r.noise_deg) {
            keys.push((r.variant.clone(), r.noise_deg));
        }
    }
    keys.into_iter()
        .map(|(variant, noise_deg)| {
            let sel: Vec<&ResultRow> = rows.iter().filter(|r| r.variant == variant && r.noise_deg == noise_deg).collect();
            let (nds_mean, nds_std) = mean_std(&sel.iter().map(|r| r.nds).collect::<Vec<_>>());
            let (map_mean, map_std) = mean_std(&sel.iter().map(|r| r.map).collect::<Vec<_>>());
            Summary { variant, noise_deg, runs: sel.len(), nds_mean, nds_std, map_mean, map_std }
        })
        .collect()
}

/// Training and evaluation scenes of one experiment seed.
pub fn datasets(cfg: &RunConfig, seed: u64) -> Result<(Dataset, Dataset)> {
    let train = Dataset::generate(&cfg.scene, seed, cfg.train.train_scenes)?;
    let eval = Dataset::generate(&cfg.scene, seed.wrapping_add(EVAL_SEED_OFFSET), cfg.train.eval_scenes)?;
    Ok((train, eval))
}

fn final_loss(log: &[super::train::EpochLog]) -> f64 {
    log.last().map_or(f64::NAN, |l| l.loss)
}

fn run_cft(cfg: &RunConfig, train: &Dataset, eval: &Dataset) -> Result<(Evaluation, f64)> {
    let t = train_cft(cfg, train)?;
    Ok((evaluate_cft(&t.detector, &t.store, cfg, eval)?, final_loss(&t.log)))
}

/// The three height-embedding designs over every experiment seed.
pub fn exp_embedding(cfg: &RunConfig) -> Result<Vec<ResultRow>> {
    let mut rows = Vec::new();
    for &seed in &cfg.experiment_seeds {
        let (train, eval) = datasets(cfg, seed)?;
        for design in PaDesign::ALL {
            let c = RunConfig { seed, design, ..cfg.clone() };
            let (e, loss) = run_cft(&c, &train, &eval)?;
            rows.push(ResultRow::new("embedding", design.name(), seed, &e.report, loss));
        }
    }
    Ok(rows)
}

/// Every window scheme over every seed, plus the attention cost table at the
/// configured model size.
pub fn exp_windows(cfg: &RunConfig) -> Result<(Vec<ResultRow>, Vec<CostReport>)> {
    let costs = cost_table(&cfg.model, cfg.seed)?;
    let mut rows = Vec::new();
    for &seed in &cfg.experiment_seeds {
        let (train, eval) = datasets(cfg, seed)?;
        for scheme in SchemeKind::ALL {
            let c = RunConfig { seed, scheme, ..cfg.clone() };
            let (e, loss) = run_cft(&c, &train, &eval)?;
            rows.push(ResultRow::new("windows", scheme.name(), seed, &e.report, loss));
        }
    }
    Ok((rows, costs))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseStudy {
    pub rows: Vec<ResultRow>,
    /// Whether every CFT head output matched the noise-free run bit for bit.
    pub cft_bit_identical: bool,
}

/// Trains both detectors on the true rig, then evaluates them with the
/// baseline lifting through perturbed rigs. The transformer never sees a
/// rig, so its outputs are recomputed per draw and compared bitwise.
pub fn exp_noise(cfg: &RunConfig) -> Result<NoiseStudy> {
    let rig = cfg.scene.rig()?;
    let mut rows = Vec::new();
    let mut identical = true;
    for &seed in &cfg.experiment_seeds {
        let c = RunConfig { seed, ..cfg.clone() };
        let (train, eval) = datasets(&c, seed)?;
        let cft = train_cft(&c, &train)?;
        let base = train_baseline(&c, &train, &rig)?;
        let reference: Vec<_> =
            eval.scenes.iter().map(|s| cft.detector.infer(&cft.store, &s.images)).collect::<Result<_>>()?;
        let cft_eval = evaluate_cft(&cft.detector, &cft.store, &c, &eval)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0e15_e000);
        for &deg in &cfg.noise.rotation_deg {
            let draws = if deg == 0.0 && cfg.noise.translation_m == 0.0 { 1 } else { cfg.noise.draws };
            for draw in 0..draws {
                let noisy = perturb_extrinsics(&rig, deg, cfg.noise.translation_m, &mut rng)?;
                let b = evaluate_baseline(&base.detector, &base.store, &c, &eval, &noisy)?;
                let mut row = ResultRow::new("noise", "baseline", seed, &b.report, final_loss(&base.log));
                row.noise_deg = deg;
                row.draw = draw;
                rows.push(row);

                for (s, r) in eval.scenes.iter().zip(&reference) {
                    let again = cft.detector.infer(&cft.store, &s.images)?;
                    identical &= again.heatmap.data() == r.heatmap.data() && again.regression.data() == r.regression.data();
                }
                let mut row = ResultRow::new("noise", "cft", seed, &cft_eval.report, final_loss(&cft.log));
                row.noise_deg = deg;
                row.draw = draw;
                rows.push(row);
            }
        }
    }
    Ok(NoiseStudy { rows, cft_bit_identical: identical })
}

/// Writes `<stem>.csv` and `<stem>.json` under `dir`.
pub fn write_records<R: Serialize>(dir: &Path, stem: &str, records: &[R]) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir)?;
    let csv_path = dir.join(format!("{stem}.csv"));
    let mut w = csv::Writer::from_path(&csv_path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    let json_path = dir.join(format!("{stem}.json"));
    std::fs::write(&json_path, serde_json::to_string_pretty(records)?)?;
    Ok((csv_path, json_path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[7.0]), (7.0, 0.0));
    }

    #[test]
    fn summaries_group_by_variant_and_level() {
        let report = MetricsReport::default();
        let mut rows = Vec::new();
        for (v, deg, nds) in [("a", 0.0, 0.1), ("b", 0.0, 0.5), ("a", 0.0, 0.3), ("a", 4.0, 0.0)] {
            let mut r = ResultRow::new("x", v, 0, &report, 0.0);
            r.noise_deg = deg;
            r.nds = nds;
            rows.push(r);
        }
        let s = summarize(&rows);
        assert_eq!(s.len(), 3);
        assert_eq!((s[0].variant.as_str(), s[0].runs), ("a", 2));
        assert!((s[0].nds_mean - 0.2).abs() < 1e-15);
        assert_eq!(s[2].noise_deg, 4.0);
    }

    #[test]
    fn records_round_trip_through_csv_and_json() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![ResultRow::new("x", "v", 3, &MetricsReport::default(), 1.5)];
        let (c, j) = write_records(dir.path(), "rows", &rows).unwrap();
        let back: Vec<ResultRow> = serde_json::from_str(&std::fs::read_to_string(j).unwrap()).unwrap();
        assert_eq!(back, rows);
        let mut r = csv::Reader::from_path(c).unwrap();
        let parsed: Vec<ResultRow> = r.deserialize().collect::<std::result::Result<_, _>>().unwrap();
        assert_eq!(parsed, rows);
    }
}
