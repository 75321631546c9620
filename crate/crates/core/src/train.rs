//! Training loop, density statistics fitting and IoU evaluation.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::augment::{augment_pipeline, AugmentConfig};
use crate::density::{density_for_cloud, BeamProfile};
use crate::error::{Error, Result};
use crate::io::{parse_key_values, parse_value};
use crate::model::{Ablation, DdfeParams, Model, SampleInputs};
use crate::nn::{Adam, LrSchedule};
use crate::sensor::{ProjectionParams, SensorConfig};
use crate::sim::LabeledCloud;
use crate::stats::{ClipParams, ReservoirState};
use crate::voxel::{majority_label, DEFAULT_VOXEL_SIZE};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub voxel_size: f64,
    pub seed: u64,
    pub num_classes: usize,
    pub schedule: LrSchedule,
    pub ablation: Ablation,
    /// Augment each sample afresh every epoch when set.
    pub augment: Option<AugmentConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch: 2,
            voxel_size: DEFAULT_VOXEL_SIZE,
            seed: 0,
            num_classes: crate::sim::CLASS_NAMES.len(),
            schedule: LrSchedule::default(),
            ablation: Ablation::default(),
            augment: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::InvalidArgument("epochs and batch must be positive".into()));
        }
        if !(self.voxel_size > 0.0 && self.voxel_size.is_finite()) {
            return Err(Error::InvalidArgument(format!("voxel size {}", self.voxel_size)));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidArgument("need at least 2 classes".into()));
        }
        if !(self.schedule.initial > 0.0 && self.schedule.decay > 0.0) {
            return Err(Error::InvalidArgument(
                "learning rate and decay must be positive".into(),
            ));
        }
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        Ok(())
    }

    /// Reads `key=value` overrides: `epochs`, `batch`, `voxel_size`, `seed`,
    /// `classes`, `lr`, `lr_decay`.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        for (line, key, value) in parse_key_values(text, path)? {
            match key.as_str() {
                "epochs" => cfg.epochs = parse_value(path, line, &key, &value)?,
                "batch" => cfg.batch = parse_value(path, line, &key, &value)?,
                "voxel_size" => cfg.voxel_size = parse_value(path, line, &key, &value)?,
                "seed" => cfg.seed = parse_value(path, line, &key, &value)?,
                "classes" => cfg.num_classes = parse_value(path, line, &key, &value)?,
                "lr" => cfg.schedule.initial = parse_value(path, line, &key, &value)?,
                "lr_decay" => cfg.schedule.decay = parse_value(path, line, &key, &value)?,
                _ => {
                    return Err(Error::Parse {
                        path: path.display().to_string(),
                        line,
                        msg: format!("unknown key {key:?}"),
                    })
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }
}

/// Inverse class frequency `n / (C n_c)`, clamped to `[0.1, 10]`. Classes
/// with no points get weight 1.
pub fn class_weights<'a>(labels: impl IntoIterator<Item = &'a [u32]>, num_classes: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0u64; num_classes];
    for set in labels {
        for (i, &l) in set.iter().enumerate() {
            let slot = counts.get_mut(l as usize).ok_or(Error::InvalidLabel {
                index: i,
                label: l,
                classes: num_classes,
            })?;
            *slot += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    Ok(counts
        .iter()
        .map(|&c| {
            if c == 0 {
                1.0
            } else {
                (total as f64 / (num_classes as f64 * c as f64)).clamp(0.1, 10.0)
            }
        })
        .collect())
}

/// Streams every cloud's density through per-channel reservoirs and fits
/// the clip parameters.
pub fn fit_density_stats(clouds: &[LabeledCloud], profile: &BeamProfile, seed: u64) -> Result<ClipParams> {
    let mut state = ReservoirState::new(seed);
    for (i, c) in clouds.iter().enumerate() {
        let emb =
            density_for_cloud(profile, &c.points).map_err(|e| Error::InvalidArgument(format!("cloud {i}: {e}")))?;
        state.update(&emb)?;
    }
    state.fit_clip()
}

fn check_sample(i: usize, c: &LabeledCloud, num_classes: usize) -> Result<()> {
    if c.points.is_empty() {
        return Err(Error::InvalidArgument(format!("sample {i} is empty")));
    }
    if c.labels.len() != c.points.len() {
        return Err(Error::LabelCount {
            expected: c.points.len(),
            found: c.labels.len(),
        });
    }
    if let Some(j) = c.labels.iter().position(|&l| l as usize >= num_classes) {
        return Err(Error::InvalidLabel {
            index: j,
            label: c.labels[j],
            classes: num_classes,
        });
    }
    Ok(())
}

struct Prepared {
    inputs: SampleInputs,
    labels: Vec<u32>,
    voxel_labels: Vec<u32>,
}

fn prepare(model: &Model, profile: &BeamProfile, cloud: &LabeledCloud) -> Result<Prepared> {
    let inputs = model.prepare(&cloud.points, profile)?;
    let voxel_labels = majority_label(&inputs.grid, &cloud.labels)?;
    Ok(Prepared {
        inputs,
        labels: cloud.labels.clone(),
        voxel_labels,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean total loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub class_weights: Vec<f64>,
    pub steps: u64,
}

impl TrainReport {
    pub fn final_loss(&self) -> f64 {
        *self.epoch_losses.last().expect("at least one epoch")
    }
}

pub fn profile_for(sensor: &SensorConfig) -> Result<BeamProfile> {
    BeamProfile::new(sensor, &ProjectionParams::default())
}

/// Trains from scratch. Single-threaded apart from input preparation, so
/// results are bit-reproducible for a given seed.
pub fn train(dataset: &[LabeledCloud], sensor: &SensorConfig, cfg: &TrainConfig) -> Result<(Model, TrainReport)> {
    train_with_progress(dataset, sensor, cfg, |_, _| {})
}

pub fn train_with_progress(
    dataset: &[LabeledCloud],
    sensor: &SensorConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<(Model, TrainReport)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    for (i, c) in dataset.iter().enumerate() {
        check_sample(i, c, cfg.num_classes)?;
    }
    let profile = profile_for(sensor)?;
    let weights = class_weights(dataset.iter().map(|c| c.labels.as_slice()), cfg.num_classes)?;
    let clip = fit_density_stats(dataset, &profile, cfg.seed)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Model {
        params: DdfeParams::new(cfg.num_classes, &mut rng)?,
        clip,
        ablation: cfg.ablation,
        voxel_size: cfg.voxel_size,
    };
    let fixed: Option<Vec<Prepared>> = match cfg.augment {
        None => Some(
            dataset
                .par_iter()
                .map(|c| prepare(&model, &profile, c))
                .collect::<Result<_>>()?,
        ),
        Some(_) => None,
    };

    let mut adam = Adam::default();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let lr = cfg.schedule.lr(epoch);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch) {
            model.params.zero_grad();
            let mut batch_loss = 0.0;
            for &i in chunk {
                let owned;
                let sample = match (&fixed, &cfg.augment) {
                    (Some(f), _) => &f[i],
                    (None, Some(aug)) => {
                        let (cloud, _) = augment_pipeline(&dataset[i], sensor, aug, dataset, &mut rng)?;
                        owned = prepare(&model, &profile, &cloud)?;
                        &owned
                    }
                    (None, None) => unreachable!("inputs are fixed without augmentation"),
                };
                let terms = model.params.train_step(
                    &sample.inputs,
                    model.ablation,
                    &sample.labels,
                    &sample.voxel_labels,
                    &weights,
                )?;
                batch_loss += terms.total();
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step });
            }
            model.params.scale_grads(1.0 / chunk.len() as f64);
            adam.step(&mut model.params.tensors_mut(), lr)?;
            epoch_loss += batch_loss;
            step += 1;
        }
        let mean = epoch_loss / dataset.len() as f64;
        on_epoch(epoch, mean);
        epoch_losses.push(mean);
    }
    Ok((
        model,
        TrainReport {
            epoch_losses,
            class_weights: weights,
            steps: adam.steps_taken(),
        },
    ))
}

/// Ground truth by row, prediction by column.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Confusion {
    pub num_classes: usize,
    pub counts: Vec<u64>,
}

impl Confusion {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn add(&mut self, truth: &[u32], pred: &[u32]) -> Result<()> {
        if truth.len() != pred.len() {
            return Err(Error::LabelCount {
                expected: truth.len(),
                found: pred.len(),
            });
        }
        let c = self.num_classes;
        for (i, (&t, &p)) in truth.iter().zip(pred).enumerate() {
            if t as usize >= c || p as usize >= c {
                return Err(Error::InvalidLabel {
                    index: i,
                    label: t.max(p),
                    classes: c,
                });
            }
            self.counts[t as usize * c + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Confusion) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    fn at(&self, t: usize, p: usize) -> u64 {
        self.counts[t * self.num_classes + p]
    }

    /// `TP / (TP + FP + FN)` per class; `None` for classes absent from the
    /// ground truth.
    pub fn iou(&self) -> Vec<Option<f64>> {
        let c = self.num_classes;
        (0..c)
            .map(|k| {
                let tp = self.at(k, k);
                let gt: u64 = (0..c).map(|p| self.at(k, p)).sum();
                let pred: u64 = (0..c).map(|t| self.at(t, k)).sum();
                (gt > 0).then(|| tp as f64 / (gt + pred - tp) as f64)
            })
            .collect()
    }

    /// Mean IoU over classes present in the ground truth.
    pub fn miou(&self) -> Option<f64> {
        let present: Vec<f64> = self.iou().into_iter().flatten().collect();
        (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
    }

    pub fn format_report(&self, class_names: &[&str]) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "class\tiou");
        for (k, iou) in self.iou().iter().enumerate() {
            let name = class_names.get(k).copied().unwrap_or("?");
            match iou {
                Some(v) => writeln!(s, "{name}\t{v:.4}"),
                None => writeln!(s, "{name}\tn/a"),
            }
            .expect("write to string");
        }
        let miou = self.miou().map_or("n/a".to_string(), |m| format!("{m:.4}"));
        let _ = writeln!(s, "mIoU\t{miou}");
        let _ = write!(s, "\n# confusion (rows truth, columns prediction)\n");
        for t in 0..self.num_classes {
            let row: Vec<String> = (0..self.num_classes).map(|p| self.at(t, p).to_string()).collect();
            let name = class_names.get(t).copied().unwrap_or("?");
            let _ = writeln!(s, "{name}\t{}", row.join("\t"));
        }
        s
    }
}

/// Point-level confusion of `model` over `dataset` scanned by `sensor`.
pub fn evaluate(model: &Model, dataset: &[LabeledCloud], sensor: &SensorConfig) -> Result<Confusion> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("evaluation set is empty".into()));
    }
    let classes = model.params.num_classes();
    for (i, c) in dataset.iter().enumerate() {
        check_sample(i, c, classes)?;
    }
    let profile = profile_for(sensor)?;
    let parts: Vec<Confusion> = dataset
        .par_iter()
        .map(|c| {
            let inputs = model.prepare(&c.points, &profile)?;
            let pred = model.params.predict(&inputs, model.ablation)?;
            let mut conf = Confusion::new(classes);
            conf.add(&c.labels, &pred)?;
            Ok(conf)
        })
        .collect::<Result<_>>()?;
    let mut total = Confusion::new(classes);
    for p in &parts {
        total.merge(p);
    }
    Ok(total)
}
