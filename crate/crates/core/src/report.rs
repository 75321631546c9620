//! Cross-sensor tables: beam density against distance, and distances between
//! range-binned mean voxel features.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::density::{point_density, BeamProfile, Density};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::sensor::{ProjectionParams, SensorConfig, SphericalCoords};
use crate::sim::LabeledCloud;
use crate::Point;

/// Beam density at the given angle and range.
pub fn density_at(profile: &BeamProfile, azimuth: f64, elevation: f64, range: f64) -> Result<Density> {
    point_density(
        profile,
        &SphericalCoords {
            azimuth,
            elevation,
            range,
        },
    )
}

/// Finest-scale density at the sensor's band-center elevation, facing -x.
pub fn band_center_density(profile: &BeamProfile, config: &SensorConfig, range: f64) -> Result<f64> {
    Ok(density_at(profile, std::f64::consts::PI, config.band_center_rad(), range)?[0])
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatch {
    pub sensors: Vec<String>,
    pub distances: Vec<f64>,
    /// `density[s][d]`, finest smoothing scale.
    pub density: Vec<Vec<f64>>,
    /// When one distance is given per sensor: density of sensor `i` at
    /// distance `i` over that of sensor 0 at distance 0.
    pub paired_ratios: Option<Vec<f64>>,
    /// Distance at which each sensor matches sensor 0's density at the first
    /// distance.
    pub matched_distance: Vec<f64>,
}

pub fn density_match(sensors: &[SensorConfig], distances: &[f64]) -> Result<DensityMatch> {
    if sensors.is_empty() || distances.is_empty() {
        return Err(Error::InvalidArgument(
            "need at least one sensor and one distance".into(),
        ));
    }
    if let Some(d) = distances.iter().find(|d| !(**d > 0.0 && d.is_finite())) {
        return Err(Error::InvalidArgument(format!("distance {d} must be positive")));
    }
    let params = ProjectionParams::default();
    let profiles = sensors
        .iter()
        .map(|s| BeamProfile::new(s, &params))
        .collect::<Result<Vec<_>>>()?;
    let density = sensors
        .iter()
        .zip(&profiles)
        .map(|(s, p)| distances.iter().map(|&d| band_center_density(p, s, d)).collect())
        .collect::<Result<Vec<Vec<f64>>>>()?;
    let paired_ratios =
        (distances.len() == sensors.len()).then(|| (0..sensors.len()).map(|i| density[i][i] / density[0][0]).collect());
    // density scales as 1/r, so the matching range follows from one sample
    let target = density[0][0];
    let matched_distance = density.iter().map(|row| row[0] * distances[0] / target).collect();
    Ok(DensityMatch {
        sensors: sensors.iter().map(|s| s.name.clone()).collect(),
        distances: distances.to_vec(),
        density,
        paired_ratios,
        matched_distance,
    })
}

impl DensityMatch {
    pub fn to_text(&self) -> String {
        let mut s = String::from("# beam density (sigma=10) at band-center elevation\nsensor");
        for d in &self.distances {
            let _ = write!(s, "\t{d}m");
        }
        s.push('\n');
        for (name, row) in self.sensors.iter().zip(&self.density) {
            s.push_str(name);
            for v in row {
                let _ = write!(s, "\t{v:.6}");
            }
            s.push('\n');
        }
        let _ = writeln!(
            s,
            "\n# distance matching {}@{}m\nsensor\tdistance_m",
            self.sensors[0], self.distances[0]
        );
        for (name, d) in self.sensors.iter().zip(&self.matched_distance) {
            let _ = writeln!(s, "{name}\t{d:.2}");
        }
        if let Some(r) = &self.paired_ratios {
            let _ = writeln!(s, "\n# paired\nsensor\tdistance_m\tdensity\tratio_to_first");
            for (i, ratio) in r.iter().enumerate() {
                let _ = writeln!(
                    s,
                    "{}\t{}\t{:.6}\t{:.4}",
                    self.sensors[i], self.distances[i], self.density[i][i], ratio
                );
            }
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("sensor,distance_m,density\n");
        for (name, row) in self.sensors.iter().zip(&self.density) {
            for (d, v) in self.distances.iter().zip(row) {
                let _ = writeln!(s, "{name},{d},{v}");
            }
        }
        s
    }
}

pub const BIN_WIDTH: f64 = 5.0;
pub const NUM_BINS: usize = 10;

fn bin_of(center: &Point) -> Option<usize> {
    let r = center.iter().map(|c| c * c).sum::<f64>().sqrt();
    let b = (r / BIN_WIDTH).floor() as usize;
    (b < NUM_BINS).then_some(b)
}

/// Mean fused voxel feature per 5 m range bin over 0-50 m. `None` for empty
/// bins.
pub fn binned_voxel_features(
    model: &Model,
    clouds: &[LabeledCloud],
    sensor: &SensorConfig,
) -> Result<Vec<Option<Vec<f64>>>> {
    let profile = BeamProfile::new(sensor, &ProjectionParams::default())?;
    let parts: Vec<(Vec<Vec<f64>>, Vec<u64>)> = clouds
        .par_iter()
        .map(|c| {
            let inputs = model.prepare(&c.points, &profile)?;
            let cache = model.params.forward(&inputs, model.ablation)?;
            let feats = cache.voxel_features();
            let mut sums = vec![vec![0.0; feats.cols]; NUM_BINS];
            let mut counts = vec![0u64; NUM_BINS];
            for (j, center) in inputs.grid.centers.iter().enumerate() {
                if let Some(b) = bin_of(center) {
                    counts[b] += 1;
                    for (s, f) in sums[b].iter_mut().zip(feats.row(j)) {
                        *s += f;
                    }
                }
            }
            Ok((sums, counts))
        })
        .collect::<Result<_>>()?;
    let width = crate::model::VOXEL_CHANNELS;
    let mut sums = vec![vec![0.0; width]; NUM_BINS];
    let mut counts = vec![0u64; NUM_BINS];
    for (s, c) in parts {
        for b in 0..NUM_BINS {
            counts[b] += c[b];
            for (a, v) in sums[b].iter_mut().zip(&s[b]) {
                *a += v;
            }
        }
    }
    Ok(sums
        .into_iter()
        .zip(counts)
        .map(|(s, c)| (c > 0).then(|| s.into_iter().map(|v| v / c as f64).collect()))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSimilarity {
    pub sensor_a: String,
    pub sensor_b: String,
    /// `distance[i][j]`: L2 between bin `i` of A and bin `j` of B.
    pub distance: Vec<Vec<Option<f64>>>,
    /// Finest-scale band-center density at each bin center, per sensor.
    pub density_a: Vec<f64>,
    pub density_b: Vec<f64>,
}

pub fn feature_similarity(
    model: &Model,
    sensor_a: &SensorConfig,
    clouds_a: &[LabeledCloud],
    sensor_b: &SensorConfig,
    clouds_b: &[LabeledCloud],
) -> Result<FeatureSimilarity> {
    let fa = binned_voxel_features(model, clouds_a, sensor_a)?;
    let fb = binned_voxel_features(model, clouds_b, sensor_b)?;
    let distance = fa
        .iter()
        .map(|a| {
            fb.iter()
                .map(|b| match (a, b) {
                    (Some(a), Some(b)) => Some(a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()),
                    _ => None,
                })
                .collect()
        })
        .collect();
    let params = ProjectionParams::default();
    let centers: Vec<f64> = (0..NUM_BINS).map(|b| (b as f64 + 0.5) * BIN_WIDTH).collect();
    let dens = |s: &SensorConfig| -> Result<Vec<f64>> {
        let p = BeamProfile::new(s, &params)?;
        centers.iter().map(|&r| band_center_density(&p, s, r)).collect()
    };
    Ok(FeatureSimilarity {
        sensor_a: sensor_a.name.clone(),
        sensor_b: sensor_b.name.clone(),
        distance,
        density_a: dens(sensor_a)?,
        density_b: dens(sensor_b)?,
    })
}

fn argmin(row: &[Option<f64>]) -> Option<usize> {
    row.iter()
        .enumerate()
        .filter_map(|(j, v)| v.map(|v| (j, v)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(j, _)| j)
}

impl FeatureSimilarity {
    /// For each bin of A, the bin of B with the closest mean feature.
    pub fn nearest_feature_bin(&self) -> Vec<Option<usize>> {
        self.distance.iter().map(|row| argmin(row)).collect()
    }

    /// For each bin of A, the bin of B with the closest beam density.
    pub fn nearest_density_bin(&self) -> Vec<usize> {
        self.density_a
            .iter()
            .map(|da| {
                let row: Vec<Option<f64>> = self.density_b.iter().map(|db| Some((da - db).abs())).collect();
                argmin(&row).expect("non-empty")
            })
            .collect()
    }

    pub fn to_text(&self) -> String {
        let label = |b: usize| format!("{}-{}", b as f64 * BIN_WIDTH, (b + 1) as f64 * BIN_WIDTH);
        let mut s = format!(
            "# L2 distance between mean voxel features, rows {} bins, columns {} bins (m)\nbin",
            self.sensor_a, self.sensor_b
        );
        for j in 0..NUM_BINS {
            let _ = write!(s, "\t{}", label(j));
        }
        s.push('\n');
        for (i, row) in self.distance.iter().enumerate() {
            s.push_str(&label(i));
            for v in row {
                match v {
                    Some(v) => write!(s, "\t{v:.4}"),
                    None => write!(s, "\t-"),
                }
                .expect("write to string");
            }
            s.push('\n');
        }
        let _ = writeln!(
            s,
            "\n# per {} bin: closest {} bin by feature, by density, by distance",
            self.sensor_a, self.sensor_b
        );
        let _ = writeln!(s, "bin\tfeature\tdensity\tdistance");
        let feat = self.nearest_feature_bin();
        for (i, d) in self.nearest_density_bin().into_iter().enumerate() {
            let f = feat[i].map_or("-".to_string(), label);
            let _ = writeln!(s, "{}\t{}\t{}\t{}", label(i), f, label(d), label(i));
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_a,bin_b,l2\n");
        for (i, row) in self.distance.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                let v = v.map_or(String::new(), |v| v.to_string());
                let _ = writeln!(s, "{i},{j},{v}");
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::model::{Ablation, DdfeParams};
    use crate::sim::make_dataset;
    use crate::stats::ClipParams;

    #[test]
    fn waymo_nuscenes_pair() {
        let t = density_match(&[SensorConfig::waymo(), SensorConfig::nuscenes()], &[35.0, 12.0]).unwrap();
        let r = t.paired_ratios.as_ref().unwrap();
        assert_eq!(r[0], 1.0);
        assert!((0.8..=1.25).contains(&(1.0 / r[1])), "{r:?}");
        assert!(t.to_text().contains("ratio_to_first"));
        // the matched distance reproduces the reference density
        let p = BeamProfile::new(&SensorConfig::nuscenes(), &ProjectionParams::default()).unwrap();
        let d = band_center_density(&p, &SensorConfig::nuscenes(), t.matched_distance[1]).unwrap();
        assert!((d / t.density[0][0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn unpaired_table() {
        let t = density_match(&[SensorConfig::nuscenes()], &[5.0, 10.0, 20.0]).unwrap();
        assert!(t.paired_ratios.is_none());
        assert!((t.density[0][0] / t.density[0][1] - 2.0).abs() < 1e-9);
        assert_eq!(t.to_csv().lines().count(), 4);
        assert!(density_match(&[], &[1.0]).is_err());
        assert!(density_match(&[SensorConfig::nuscenes()], &[-1.0]).is_err());
    }

    #[test]
    fn similarity_matrix_shape() {
        let a = SensorConfig::new("a", 256, 32, -24.8, 2.0).unwrap();
        let b = SensorConfig::new("b", 256, 16, -24.8, 2.0).unwrap();
        let model = Model {
            params: DdfeParams::new(4, &mut ChaCha8Rng::seed_from_u64(0)).unwrap(),
            clip: ClipParams::from_mid_half_span([0.02; 4], [0.01; 4]),
            ablation: Ablation::default(),
            voxel_size: 0.2,
        };
        let fs = feature_similarity(
            &model,
            &a,
            &make_dataset(1, &a, 1).unwrap(),
            &b,
            &make_dataset(1, &b, 1).unwrap(),
        )
        .unwrap();
        assert_eq!(fs.distance.len(), NUM_BINS);
        assert!(fs.distance.iter().all(|r| r.len() == NUM_BINS));
        assert!(fs.distance[2][2].is_some());
        // halving beams shifts equal density to shorter range
        let nd = fs.nearest_density_bin();
        assert!(nd.iter().enumerate().all(|(i, &j)| j <= i));
        assert!(fs.to_text().lines().count() > NUM_BINS);
    }
}
