use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::model::DiffusionModel;
use super::schedule::{forward_noise, NoiseSchedule};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::nn::{Adam, AdamConfig};
use crate::tensor::Tensor;
use crate::vocab::CaptionTokens;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Fraction of batches conditioned on the null prompt.
    pub null_rate: f64,
    /// Fixed (example, t, noise) triples re-evaluated after every epoch.
    pub probe_size: usize,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 8,
            batch_size: 8,
            null_rate: 0.1,
            probe_size: 32,
            adam: AdamConfig::default(),
        }
    }
}

/// One clean latent clip with its caption.
#[derive(Clone, Debug)]
pub struct TrainExample {
    pub z0: Tensor,
    pub caption: CaptionTokens,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub untrained_probe_loss: f64,
    /// Probe loss after each epoch.
    pub probe_losses: Vec<f64>,
    pub final_loss: f64,
    pub steps: usize,
}

pub fn gaussian(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.sample(StandardNormal)).collect()).expect("shape matches")
}

struct Probe {
    items: Vec<(usize, usize, Tensor)>,
}

impl Probe {
    fn new(data: &[TrainExample], size: usize, t_train: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0050_524f_4245);
        let items = (0..size.min(data.len()))
            .map(|i| {
                let t = rng.random_range(1..=t_train);
                (i, t, gaussian(&mut rng, data[i].z0.shape()))
            })
            .collect();
        Self { items }
    }

    fn loss(&self, model: &DiffusionModel, data: &[TrainExample], s: &NoiseSchedule) -> Result<f64> {
        if self.items.is_empty() {
            return Ok(0.0);
        }
        let mut acc = 0.0;
        for (i, t, eps) in &self.items {
            let ex = &data[*i];
            let zt = forward_noise(&ex.z0, *t, eps, s)?;
            let cond = model.encode_text(&ex.caption)?;
            let pred = model.predict_eps(&zt, *t, &cond);
            acc += pred.zip_map(eps, |a, b| (a - b) * (a - b)).mean();
        }
        Ok(acc / self.items.len() as f64)
    }
}

/// Minimises `E || eps - eps_theta(z_t, t, c) ||^2` with Adam. `on_epoch` runs
/// after each epoch with the 1-based epoch number and that epoch's mean loss.
pub fn train_denoiser(
    model: &mut DiffusionModel,
    data: &[TrainExample],
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    seed: u64,
    on_epoch: &mut dyn FnMut(usize, &DiffusionModel, f64) -> Result<()>,
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if cfg.batch_size == 0 || !(0.0..=1.0).contains(&cfg.null_rate) {
        return Err(Error::Config("batch_size must be >= 1 and null_rate in [0, 1]".into()));
    }
    let t_train = schedule.t_train();
    let probe = Probe::new(data, cfg.probe_size, t_train, seed);
    let mut report = TrainReport {
        untrained_probe_loss: probe.loss(model, data, schedule)?,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = Adam::new(model.params(), cfg.adam.clone());
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
            let use_null = rng.random_bool(cfg.null_rate);
            let mut grads: Option<Vec<Tensor>> = None;
            let mut batch_loss = 0.0;
            for &i in batch {
                let ex = &data[i];
                let t = rng.random_range(1..=t_train);
                let eps = gaussian(&mut rng, ex.z0.shape());
                let zt = forward_noise(&ex.z0, t, &eps, schedule)?;

                let mut g = Graph::new();
                let b = model.bind(&mut g, true);
                let caption = if use_null { CaptionTokens::null() } else { ex.caption.clone() };
                let cond = model.encode_text_graph(&mut g, &b, &caption, None)?;
                let z = g.constant(zt);
                let pred = model.eps_graph(&mut g, &b, z, t, cond);
                let target = g.constant(eps);
                let diff = g.sub(pred, target);
                let sq = g.square(diff);
                let mse = g.mean(sq);
                let loss = g.scale(mse, 1.0 / batch.len() as f64);
                batch_loss += g.value(loss).item();

                let mut gr = g.backward(loss);
                let these = model.params().grads_of(&mut gr, b.vars());
                match grads.as_mut() {
                    None => grads = Some(these),
                    Some(acc) => {
                        for (a, x) in acc.iter_mut().zip(&these) {
                            for (p, q) in a.data_mut().iter_mut().zip(x.data()) {
                                *p += q;
                            }
                        }
                    }
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "denoiser loss is {batch_loss} at epoch {epoch}, batch {bi}"
                )));
            }
            adam.step(model.params_mut(), &grads.expect("batch is nonempty"));
            if !model.params().all_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite denoiser weights after epoch {epoch}, batch {bi}"
                )));
            }
            epoch_loss += batch_loss * batch.len() as f64;
            report.steps += 1;
        }
        let mean = epoch_loss / data.len() as f64;
        report.epoch_losses.push(mean);
        report.probe_losses.push(probe.loss(model, data, schedule)?);
        report.final_loss = mean;
        on_epoch(epoch, model, mean)?;
    }
    Ok(report)
}
