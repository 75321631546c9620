//! Density augmentation: dropping vertical beams and mixing in a second,
//! rotated and shifted scene.

use std::f64::consts::TAU;

use rand::Rng;

use crate::error::{Error, Result};
use crate::sensor::{beam_inclinations, to_spherical, SensorConfig};
use crate::sim::LabeledCloud;

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    /// Probability of each augmentation firing.
    pub apply_prob: f64,
    /// Fractions of vertical beams kept by beam sampling; one is drawn per
    /// sample.
    pub keep_fractions: Vec<f64>,
    /// Maximum shift of the mixed scene along +x, meters.
    pub mix_translation_max: f64,
    /// Yaw range for the mixed scene, radians.
    pub mix_yaw: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            apply_prob: 0.5,
            keep_fractions: vec![0.5, 0.75],
            mix_translation_max: 20.0,
            mix_yaw: (0.0, TAU),
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.apply_prob) {
            return Err(Error::InvalidArgument(format!(
                "apply_prob {} not in [0, 1]",
                self.apply_prob
            )));
        }
        if self.keep_fractions.is_empty() || self.keep_fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return Err(Error::InvalidArgument(format!(
                "keep fractions {:?} must be non-empty and in (0, 1]",
                self.keep_fractions
            )));
        }
        if !(self.mix_translation_max >= 0.0 && self.mix_translation_max.is_finite()) {
            return Err(Error::InvalidArgument("mix translation must be finite and >= 0".into()));
        }
        let (lo, hi) = self.mix_yaw;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::InvalidArgument(format!("yaw range {lo}..{hi}")));
        }
        Ok(())
    }
}

/// 1-based index of the vertical beam whose inclination is closest to each
/// point's elevation.
pub fn assign_beams(cloud: &LabeledCloud, config: &SensorConfig) -> Result<Vec<usize>> {
    let elevations = beam_inclinations(config).elevation_rad();
    cloud
        .points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let phi = to_spherical(*p).map_err(|e| Error::at_point(i, e))?.elevation;
            let mut best = 0;
            for (j, c) in elevations.iter().enumerate() {
                if (phi - c).abs() < (phi - elevations[best]).abs() {
                    best = j;
                }
            }
            Ok(best + 1)
        })
        .collect()
}

/// Keeps points whose nearest vertical beam is in `keep` (1-based).
pub fn beam_sample(cloud: &LabeledCloud, config: &SensorConfig, keep: &[usize]) -> Result<LabeledCloud> {
    if keep.is_empty() {
        return Err(Error::InvalidArgument("beam keep set is empty".into()));
    }
    if let Some(b) = keep.iter().find(|&&b| b == 0 || b > config.v_beams) {
        return Err(Error::InvalidArgument(format!(
            "beam {b} outside 1..={}",
            config.v_beams
        )));
    }
    if cloud.labels.len() != cloud.points.len() {
        return Err(Error::LabelCount {
            expected: cloud.points.len(),
            found: cloud.labels.len(),
        });
    }
    let mut mask = vec![false; config.v_beams + 1];
    for &b in keep {
        mask[b] = true;
    }
    let beams = assign_beams(cloud, config)?;
    let mut out = LabeledCloud::default();
    for ((p, l), b) in cloud.points.iter().zip(&cloud.labels).zip(beams) {
        if mask[b] {
            out.points.push(*p);
            out.labels.push(*l);
        }
    }
    Ok(out)
}

/// A random `round(fraction * V_b)` beams (at least one), sorted.
pub fn random_keep_set(v_beams: usize, fraction: f64, rng: &mut impl Rng) -> Vec<usize> {
    let k = ((fraction * v_beams as f64).round() as usize).clamp(1, v_beams);
    let mut keep: Vec<usize> = rand::seq::index::sample(rng, v_beams, k)
        .into_iter()
        .map(|i| i + 1)
        .collect();
    keep.sort_unstable();
    keep
}

/// Rotates `b` by `yaw` about z, shifts it by `shift` along +x and appends it
/// to `a`.
pub fn mix_with_transform(a: &LabeledCloud, b: &LabeledCloud, yaw: f64, shift: f64) -> LabeledCloud {
    let (s, c) = yaw.sin_cos();
    let mut out = a.clone();
    out.points.extend(
        b.points
            .iter()
            .map(|p| [c * p[0] - s * p[1] + shift, s * p[0] + c * p[1], p[2]]),
    );
    out.labels.extend_from_slice(&b.labels);
    out
}

pub fn enhanced_mix3d(a: &LabeledCloud, b: &LabeledCloud, cfg: &AugmentConfig, rng: &mut impl Rng) -> LabeledCloud {
    let (lo, hi) = cfg.mix_yaw;
    let yaw = if hi > lo { rng.random_range(lo..hi) } else { lo };
    let shift = if cfg.mix_translation_max > 0.0 {
        rng.random_range(0.0..=cfg.mix_translation_max)
    } else {
        0.0
    };
    mix_with_transform(a, b, yaw, shift)
}

/// Which augmentations fired for one sample.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AugmentRecord {
    pub keep: Option<Vec<usize>>,
    pub mix_partner: Option<usize>,
}

/// Beam sampling is applied to the primary scan before mixing, since a
/// shifted partner no longer lines up with the sensor's beams.
pub fn augment_pipeline(
    sample: &LabeledCloud,
    sensor: &SensorConfig,
    cfg: &AugmentConfig,
    pool: &[LabeledCloud],
    rng: &mut impl Rng,
) -> Result<(LabeledCloud, AugmentRecord)> {
    cfg.validate()?;
    let do_beam = rng.random_bool(cfg.apply_prob);
    let do_mix = rng.random_bool(cfg.apply_prob);
    let mut record = AugmentRecord::default();
    let mut out = if do_beam {
        let fraction = cfg.keep_fractions[rng.random_range(0..cfg.keep_fractions.len())];
        let keep = random_keep_set(sensor.v_beams, fraction, rng);
        let sampled = beam_sample(sample, sensor, &keep)?;
        record.keep = Some(keep);
        sampled
    } else {
        sample.clone()
    };
    if do_mix {
        if pool.is_empty() {
            return Err(Error::InvalidArgument("mixing needs a non-empty scene pool".into()));
        }
        let partner = rng.random_range(0..pool.len());
        out = enhanced_mix3d(&out, &pool[partner], cfg, rng);
        record.mix_partner = Some(partner);
    }
    Ok((out, record))
}
