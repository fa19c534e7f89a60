use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::{loss_gradients, TripletLossConfig};
use super::model::{EncoderModel, Gradients};
use crate::error::{Error, Result};
use crate::patching::Triplet;
use crate::scalar::Real;
use crate::seeding::{stream, SeededRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub triplets_per_epoch: usize,
    /// Draw fresh negatives every epoch.
    pub negative_resampling: bool,
    pub loss: TripletLossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            learning_rate: 1e-3,
            momentum: 0.9,
            batch_size: 16,
            seed: 0,
            triplets_per_epoch: 0,
            negative_resampling: true,
            loss: TripletLossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        self.loss.validate()
    }
}

/// Supplies the triplets for one epoch.
pub trait TripletSource<T: Real> {
    /// `fresh_negatives` is false when the caller wants the epoch-0 set again.
    fn epoch(&mut self, epoch: usize, fresh_negatives: bool, rng: &mut SeededRng) -> Result<Vec<Triplet<T>>>;
}

/// A fixed set of triplets.
impl<T: Real> TripletSource<T> for Vec<Triplet<T>> {
    fn epoch(&mut self, _: usize, _: bool, _: &mut SeededRng) -> Result<Vec<Triplet<T>>> {
        Ok(self.clone())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T: Real> {
    pub us_model: EncoderModel<T>,
    pub sdf_model: EncoderModel<T>,
    /// Mean loss per epoch.
    pub history: Vec<f64>,
}

struct Momentum<T> {
    velocity: Gradients<T>,
}

impl<T: Real> Momentum<T> {
    fn new(model: &EncoderModel<T>) -> Self {
        Self {
            velocity: model.zero_gradients(),
        }
    }

    // v ← μv + g ; w ← w − lr·v
    fn step(&mut self, model: &mut EncoderModel<T>, grads: &Gradients<T>, lr: T, mu: T) {
        for ((w, v), g) in model.params_mut().iter_mut().zip(&mut self.velocity).zip(grads) {
            for ((wi, vi), gi) in w.iter_mut().zip(v.iter_mut()).zip(g) {
                *vi = mu * *vi + *gi;
                *wi -= lr * *vi;
            }
        }
    }
}

fn accumulate<T: Real>(acc: &mut Gradients<T>, g: &Gradients<T>, scale: T) {
    for (a, b) in acc.iter_mut().zip(g) {
        for (x, y) in a.iter_mut().zip(b) {
            *x += *y * scale;
        }
    }
}

/// Minibatch SGD with momentum on the mean batch loss. Per-triplet
/// gradients are computed in parallel and summed in batch order, so the
/// result does not depend on the thread count.
pub fn train<T: Real, S: TripletSource<T> + ?Sized>(
    us_model: EncoderModel<T>,
    sdf_model: EncoderModel<T>,
    source: &mut S,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let mut us = us_model;
    let mut sdf = sdf_model;
    let mut us_opt = Momentum::new(&us);
    let mut sdf_opt = Momentum::new(&sdf);
    let lr = T::lit(cfg.learning_rate);
    let mu = T::lit(cfg.momentum);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut data_rng = stream(cfg.seed, "train.triplets");
    let mut shuffle_rng = stream(cfg.seed, "train.shuffle");
    let mut fixed: Option<Vec<Triplet<T>>> = None;

    for epoch in 0..cfg.epochs {
        let mut triplets = match (&fixed, cfg.negative_resampling) {
            (Some(t), false) => t.clone(),
            _ => {
                let t = source.epoch(epoch, cfg.negative_resampling || epoch == 0, &mut data_rng)?;
                if !cfg.negative_resampling {
                    fixed = Some(t.clone());
                }
                t
            }
        };
        if triplets.is_empty() {
            return Err(Error::invalid("triplet source produced no triplets"));
        }
        triplets.shuffle(&mut shuffle_rng);
        if cfg.triplets_per_epoch > 0 {
            triplets.truncate(cfg.triplets_per_epoch);
        }

        let mut total = 0.0;
        for batch in triplets.chunks(cfg.batch_size) {
            let results: Vec<_> = batch
                .par_iter()
                .map(|t| loss_gradients(&us, &sdf, t, &cfg.loss))
                .collect();
            let scale = T::one() / T::from_usize_lossy(batch.len());
            let mut gu = us.zero_gradients();
            let mut gs = sdf.zero_gradients();
            for r in results {
                let r = match r {
                    Ok(r) => r,
                    Err(e) => {
                        return Err(Error::Diverged {
                            epoch,
                            history: history.clone(),
                            reason: e.to_string(),
                        })
                    }
                };
                total += r.loss.as_f64();
                accumulate(&mut gu, &r.us, scale);
                accumulate(&mut gs, &r.sdf, scale);
            }
            us_opt.step(&mut us, &gu, lr, mu);
            sdf_opt.step(&mut sdf, &gs, lr, mu);
        }
        let mean = total / triplets.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Diverged {
                epoch,
                history,
                reason: "non-finite epoch loss".into(),
            });
        }
        history.push(mean);
    }
    Ok(TrainOutcome {
        us_model: us,
        sdf_model: sdf,
        history,
    })
}
