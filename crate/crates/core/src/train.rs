//! Training loop: per-sample graphs (optionally in parallel), gradients summed
//! in sample order, AdamW under the warm-up/poly schedule.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vidseg_tensor::{par, Tape, Tensor};

use crate::assign::IGNORE_LABEL;
use crate::config::TrainConfig;
use crate::data::{gen_dataset, SyntheticSequence};
use crate::error::{Error, Result};
use crate::metrics::{Confusion, MetricsReport};
use crate::model::Msaf;
use crate::optim::{AdamW, AdamWConfig};
use crate::params::ParamStore;

/// Independent seed for one use of the run seed (data, init, sampling).
pub fn derived_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.gen()
}

const DATA_STREAM: u64 = 1;
const INIT_STREAM: u64 = 2;
const SAMPLING_STREAM: u64 = 3;

pub fn init_seed(cfg: &TrainConfig) -> u64 {
    derived_seed(cfg.seed, INIT_STREAM)
}

/// The training clips a config describes.
pub fn training_data(cfg: &TrainConfig) -> Result<Vec<SyntheticSequence>> {
    gen_dataset(derived_seed(cfg.seed, DATA_STREAM), cfg.samples, &cfg.data)
}

/// Total loss of one clip and its gradient for every parameter, in store order.
pub fn sample_gradients(
    model: &Msaf,
    store: &ParamStore<f32>,
    sample: &SyntheticSequence,
) -> Result<(f64, Vec<Tensor<f32>>)> {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let frames = [0, 1, 2].map(|i| tape.constant(sample.frames[i].clone()));
    let out = model.forward(&mut tape, &p, frames)?;
    let losses = model.losses(&mut tape, &out, &sample.gt)?;
    let loss = tape.value(losses.total).item() as f64;
    let grads = tape.backward(losses.total)?;
    let g = p
        .vars()
        .iter()
        .map(|&v| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.shape(v))))
        .collect();
    Ok((loss, g))
}

fn sample_loss(model: &Msaf, store: &ParamStore<f32>, sample: &SyntheticSequence) -> Result<f64> {
    let mut tape = Tape::new();
    let p = store.bind_frozen(&mut tape);
    let frames = [0, 1, 2].map(|i| tape.constant(sample.frames[i].clone()));
    let out = model.forward(&mut tape, &p, frames)?;
    let losses = model.losses(&mut tape, &out, &sample.gt)?;
    Ok(tape.value(losses.total).item() as f64)
}

/// Mean total loss over `data`, without augmentation.
pub fn dataset_loss(model: &Msaf, store: &ParamStore<f32>, data: &[SyntheticSequence]) -> Result<f64> {
    let losses = par::map_indexed(data.len(), |i| sample_loss(model, store, &data[i]));
    let mut sum = 0.0;
    for l in losses {
        sum += l?;
    }
    Ok(sum / data.len() as f64)
}

/// mIoU and pixel accuracy over all of `data`, pooled into one confusion matrix.
pub fn evaluate(model: &Msaf, store: &ParamStore<f32>, data: &[SyntheticSequence]) -> Result<MetricsReport> {
    let preds = par::map_indexed(data.len(), |i| model.predict(store, &data[i].frames));
    let mut confusion = Confusion::new(model.cfg.classes, IGNORE_LABEL);
    for (pred, sample) in preds.into_iter().zip(data) {
        confusion.add(&pred?, &sample.gt)?;
    }
    confusion.report()
}

pub struct TrainOutcome {
    pub model: Msaf,
    pub store: ParamStore<f32>,
    /// Mean batch loss at each iteration.
    pub loss_curve: Vec<f64>,
    /// Mean loss over the training clips before the first update.
    pub initial_loss: f64,
    /// Mean loss over the training clips after the last update.
    pub final_loss: f64,
    /// Metrics on the training clips after the last update.
    pub metrics: MetricsReport,
}

/// Trains on `data` for `cfg.iterations` steps. `progress` sees each
/// iteration's index and mean batch loss.
pub fn train(
    cfg: &TrainConfig,
    data: &[SyntheticSequence],
    mut progress: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Parameter("no training data".into()));
    }
    let schedule = cfg.schedule()?;
    let (model, mut store) = Msaf::new::<f32>(cfg.model, init_seed(cfg))?;
    let mut opt = AdamW::new(
        AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
        &store,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(derived_seed(cfg.seed, SAMPLING_STREAM));
    let mut order: Vec<usize> = Vec::new();
    let initial_loss = dataset_loss(&model, &store, data)?;
    let mut loss_curve = Vec::with_capacity(cfg.iterations);
    for iter in 0..cfg.iterations {
        let batch: Vec<SyntheticSequence> = (0..cfg.batch)
            .map(|_| {
                if order.is_empty() {
                    order = (0..data.len()).collect();
                    order.shuffle(&mut rng);
                }
                let s = &data[order.pop().expect("refilled")];
                if cfg.flip && rng.gen_bool(0.5) {
                    s.flipped()
                } else {
                    s.clone()
                }
            })
            .collect();
        let results = par::map_indexed(batch.len(), |i| sample_gradients(&model, &store, &batch[i]));
        let mut total = 0.0;
        let mut sum: Option<Vec<Vec<f32>>> = None;
        for r in results {
            let (loss, grads) = r?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { iteration: iter, value: loss });
            }
            total += loss;
            match &mut sum {
                None => sum = Some(grads.into_iter().map(Tensor::into_vec).collect()),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&grads) {
                        for (x, y) in a.iter_mut().zip(g.data()) {
                            *x += *y;
                        }
                    }
                }
            }
        }
        let scale = 1.0 / cfg.batch as f32;
        let grads: Vec<Tensor<f32>> = sum
            .expect("batch is non-empty")
            .into_iter()
            .zip(store.values())
            .map(|(g, v)| Tensor::from_vec(v.shape(), g.into_iter().map(|x| x * scale).collect()))
            .collect::<vidseg_tensor::Result<_>>()?;
        let mean = total / cfg.batch as f64;
        loss_curve.push(mean);
        progress(iter, mean);
        opt.step(&mut store, &grads, schedule.lr(iter))?;
    }
    let final_loss = dataset_loss(&model, &store, data)?;
    let mut metrics = evaluate(&model, &store, data)?;
    metrics.loss_curve = loss_curve.clone();
    Ok(TrainOutcome {
        model,
        store,
        loss_curve,
        initial_loss,
        final_loss,
        metrics,
    })
}
