//! Mini-batch training with AdamW and a step learning-rate schedule.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{RunConfig, TrainConfig};
use super::detector::{height_targets, BaselineDetector, CftDetector, Prediction};
use crate::dethead::{focal_loss, make_targets, output_grid, reg_l1_loss, HeadConfig, Targets};
use crate::encodings::BevConfig;
use crate::error::{Error, Result};
use crate::numerics::{AdamW, Bound, Graph, ParamStore, Real, Tensor, Var};
use crate::pa::{height_loss, HeightTarget, PaDesign};
use crate::scenegen::dataset::Dataset;
use crate::scenegen::CameraRig;

/// Supervision of one scene.
#[derive(Clone, Debug)]
pub struct Supervision {
    pub targets: Targets,
    pub heights: Vec<HeightTarget>,
}

pub fn supervision(dataset: &Dataset, bev: &BevConfig, head: &HeadConfig) -> Result<Vec<Supervision>> {
    let grid = output_grid(bev);
    dataset
        .scenes
        .iter()
        .map(|s| Ok(Supervision { targets: make_targets(&s.boxes, &grid, head)?, heights: height_targets(s, bev) }))
        .collect()
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub focal: Var,
    pub regression: Var,
    pub height: Var,
}

/// Focal + regression L1 + height L1 (explicit design only), unit weights.
pub fn loss_terms<T: Real>(g: &mut Graph<T>, pred: &Prediction, sup: &Supervision, design: PaDesign) -> Result<LossTerms> {
    let focal = focal_loss(g, pred.head.heat_logits, &sup.targets)?;
    let regression = reg_l1_loss(g, pred.head.regression, &sup.targets)?;
    let height = match pred.z_ref {
        Some(z) => height_loss(g, z, &sup.heights, design)?,
        None => g.constant(Tensor::scalar(T::zero()))?,
    };
    let a = g.add(focal, regression)?;
    let total = g.add(a, height)?;
    Ok(LossTerms { total, focal, regression, height })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub focal: f64,
    pub regression: f64,
    pub height: f64,
    pub grad_norm: f64,
}

fn diverged(epoch: usize, step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(op) => Error::Diverged { epoch, step, detail: format!("non-finite value in {op}") },
        other => other,
    }
}

/// Runs the optimization loop; `forward` maps a scene index to a prediction.
pub fn fit<T, F>(
    store: &mut ParamStore<T>,
    train: &TrainConfig,
    design: PaDesign,
    sup: &[Supervision],
    seed: u64,
    forward: F,
) -> Result<Vec<EpochLog>>
where
    T: Real,
    F: Fn(&mut Graph<T>, &Bound, usize) -> Result<Prediction>,
{
    let mut opt = AdamW::new(store, train.weight_decay, train.clip_norm);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f00_0de5);
    let mut order: Vec<usize> = (0..sup.len()).collect();
    let mut log = Vec::with_capacity(train.epochs);
    let mut step = 0;
    for epoch in 0..train.epochs {
        let lr = train.schedule.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut sums = [0.0; 4];
        let mut norm_sum = 0.0;
        let mut batches = 0;
        for batch in order.chunks(train.batch_size) {
            store.zero_grad();
            for &i in batch {
                let mut g = Graph::new();
                let p = store.bind(&mut g)?;
                let run = |g: &mut Graph<T>| -> Result<(LossTerms, _)> {
                    let pred = forward(g, &p, i)?;
                    let terms = loss_terms(g, &pred, &sup[i], design)?;
                    let grads = g.backward(terms.total)?;
                    Ok((terms, grads))
                };
                let (terms, grads) = run(&mut g).map_err(|e| diverged(epoch, step, e))?;
                for (k, v) in [terms.total, terms.focal, terms.regression, terms.height].into_iter().enumerate() {
                    sums[k] += g.value(v).item().as_f64();
                }
                store.accumulate(&p, &grads);
            }
            norm_sum += opt.step(store, lr, 1.0 / batch.len() as f64);
            if store.iter().any(|p| p.value.data().iter().any(|v| !v.is_finite())) {
                return Err(Error::Diverged { epoch, step, detail: "parameters became non-finite".into() });
            }
            batches += 1;
            step += 1;
        }
        let n = sup.len().max(1) as f64;
        log.push(EpochLog {
            epoch,
            lr,
            loss: sums[0] / n,
            focal: sums[1] / n,
            regression: sums[2] / n,
            height: sums[3] / n,
            grad_norm: norm_sum / batches.max(1) as f64,
        });
    }
    Ok(log)
}

pub struct Trained<D> {
    pub detector: D,
    pub store: ParamStore<f32>,
    pub log: Vec<EpochLog>,
}

pub fn train_cft(cfg: &RunConfig, data: &Dataset) -> Result<Trained<CftDetector>> {
    let mut store = ParamStore::new();
    let detector = CftDetector::new(&mut store, cfg, cfg.seed)?;
    let sup = supervision(data, detector.bev(), &cfg.head)?;
    let log = fit(&mut store, &cfg.train, cfg.design, &sup, cfg.seed, |g, p, i| {
        detector.predict(g, p, &data.scenes[i].images)
    })?;
    Ok(Trained { detector, store, log })
}

/// Trains the baseline on images lifted through `rig`.
pub fn train_baseline(cfg: &RunConfig, data: &Dataset, rig: &CameraRig) -> Result<Trained<BaselineDetector>> {
    let mut store = ParamStore::new();
    let detector = BaselineDetector::new(&mut store, cfg, cfg.seed)?;
    let lifted = data.scenes.iter().map(|s| detector.lift(cfg, s, rig)).collect::<Result<Vec<_>>>()?;
    let sup = supervision(data, &cfg.model.bev, &cfg.head)?;
    let log = fit(&mut store, &cfg.train, PaDesign::Implicit, &sup, cfg.seed, |g, p, i| {
        detector.predict(g, p, &lifted[i])
    })?;
    Ok(Trained { detector, store, log })
}
