//! Beam density from sensor geometry.
//!
//! A sensor's beam inclinations are rasterized into binary indicator vectors
//! over the projected image axes and smoothed with four sum-normalized
//! Gaussian kernels. Smoothed values read as expected beams per pixel, so the
//! density of a point at pixel `(col, row)` and range `r` is
//! `sqrt(h[col] * v[row]) / r` per kernel width.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::sensor::{beam_inclinations, project, to_spherical, ProjectionParams, SensorConfig, SphericalCoords};
use crate::Point;

/// Number of density channels, one per kernel width.
pub const DENSITY_CHANNELS: usize = 4;

/// Kernel widths in pixels of the projected image.
pub const DEFAULT_SIGMAS: [f64; DENSITY_CHANNELS] = [10.0, 30.0, 50.0, 70.0];

/// Kernel support in standard deviations on each side.
const KERNEL_TRUNCATION: f64 = 4.0;

pub type Density = [f64; DENSITY_CHANNELS];

/// Rasterized and smoothed beam indicators of one sensor under one
/// projection.
#[derive(Debug, Clone)]
pub struct BeamProfile {
    pub params: ProjectionParams,
    pub sigmas: [f64; DENSITY_CHANNELS],
    /// Azimuth indicator, length `width`.
    pub raw_h: Vec<u8>,
    /// Elevation indicator, length `height`.
    pub raw_v: Vec<u8>,
    /// One smoothed azimuth row per sigma.
    pub smooth_h: Vec<Vec<f64>>,
    /// One smoothed elevation row per sigma.
    pub smooth_v: Vec<Vec<f64>>,
}

impl BeamProfile {
    /// Builds the profile of `config` with the default kernel widths.
    pub fn new(config: &SensorConfig, params: &ProjectionParams) -> Result<Self> {
        Self::with_sigmas(config, params, DEFAULT_SIGMAS)
    }

    pub fn with_sigmas(
        config: &SensorConfig,
        params: &ProjectionParams,
        sigmas: [f64; DENSITY_CHANNELS],
    ) -> Result<Self> {
        config.validate()?;
        params.validate()?;
        let (raw_h, raw_v) = rasterize_beams(config, params);
        smooth_profile(raw_h, raw_v, sigmas, params)
    }

    pub fn point_density(&self, coords: &SphericalCoords) -> Result<Density> {
        point_density(self, coords)
    }
}

/// Binary indicator vectors `(raw_h, raw_v)` of the beam inclinations.
/// Beams falling into the same pixel collapse into a single 1.
pub fn rasterize_beams(config: &SensorConfig, params: &ProjectionParams) -> (Vec<u8>, Vec<u8>) {
    let mut raw_h = vec![0u8; params.width];
    let mut raw_v = vec![0u8; params.height];
    // Exact integer form of floor((2*pi*i/H_b) / (2*pi) * W) mod W; the float
    // route can land one column low on exact multiples.
    let (w, hb) = (params.width as u128, config.h_beams as u128);
    for i in 1..=hb {
        raw_h[((i * w / hb) % w) as usize] = 1;
    }
    for deg in beam_inclinations(config).elevation_deg {
        raw_v[params.row_of_deg(deg)] = 1;
    }
    (raw_h, raw_v)
}

/// Sum-normalized Gaussian of standard deviation `sigma`, truncated at
/// `±ceil(4 sigma)` taps. Returns the kernel and its radius.
pub fn gaussian_kernel(sigma: f64) -> Result<(Vec<f64>, usize)> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "kernel sigma must be positive, got {sigma}"
        )));
    }
    let radius = (KERNEL_TRUNCATION * sigma).ceil() as usize;
    let mut kernel: Vec<f64> = (0..=2 * radius)
        .map(|k| {
            let x = k as f64 - radius as f64;
            (-0.5 * x * x / (sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|v| *v /= total);
    Ok((kernel, radius))
}

/// Circular convolution (azimuth is periodic).
fn convolve_circular(raw: &[u8], kernel: &[f64], radius: usize) -> Vec<f64> {
    let n = raw.len() as i64;
    let mut out = vec![0.0; raw.len()];
    for (c, _) in raw.iter().enumerate().filter(|(_, &b)| b != 0) {
        for (k, &w) in kernel.iter().enumerate() {
            let idx = (c as i64 + k as i64 - radius as i64).rem_euclid(n);
            out[idx as usize] += w;
        }
    }
    out
}

/// Zero-padded convolution; mass spilling past either end is dropped.
fn convolve_zero_padded(raw: &[u8], kernel: &[f64], radius: usize) -> Vec<f64> {
    let n = raw.len() as i64;
    let mut out = vec![0.0; raw.len()];
    for (c, _) in raw.iter().enumerate().filter(|(_, &b)| b != 0) {
        for (k, &w) in kernel.iter().enumerate() {
            let idx = c as i64 + k as i64 - radius as i64;
            if (0..n).contains(&idx) {
                out[idx as usize] += w;
            }
        }
    }
    out
}

pub fn smooth_profile(
    raw_h: Vec<u8>,
    raw_v: Vec<u8>,
    sigmas: [f64; DENSITY_CHANNELS],
    params: &ProjectionParams,
) -> Result<BeamProfile> {
    if raw_h.len() != params.width || raw_v.len() != params.height {
        return Err(Error::shape(
            &[raw_h.len(), raw_v.len()],
            &[params.width, params.height],
        ));
    }
    if raw_h.iter().chain(&raw_v).any(|&b| b > 1) {
        return Err(Error::InvalidArgument("beam indicators must be binary".into()));
    }
    let mut smooth_h = Vec::with_capacity(DENSITY_CHANNELS);
    let mut smooth_v = Vec::with_capacity(DENSITY_CHANNELS);
    for &sigma in &sigmas {
        let (kernel, radius) = gaussian_kernel(sigma)?;
        smooth_h.push(convolve_circular(&raw_h, &kernel, radius));
        smooth_v.push(convolve_zero_padded(&raw_v, &kernel, radius));
    }
    Ok(BeamProfile {
        params: params.clone(),
        sigmas,
        raw_h,
        raw_v,
        smooth_h,
        smooth_v,
    })
}

/// Per-channel density `sqrt(h * v / r^2)` at the point's own pixel.
pub fn point_density(profile: &BeamProfile, coords: &SphericalCoords) -> Result<Density> {
    if !(coords.range > 0.0) || !coords.range.is_finite() {
        return Err(Error::DegeneratePoint);
    }
    let px = project(coords, &profile.params);
    let r2 = coords.range * coords.range;
    let mut out = [0.0; DENSITY_CHANNELS];
    for (k, d) in out.iter_mut().enumerate() {
        *d = (profile.smooth_h[k][px.col] * profile.smooth_v[k][px.row] / r2).sqrt();
    }
    Ok(out)
}

/// Per-point densities of a cloud, one row per point in input order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DensityEmbedding {
    pub values: Vec<Density>,
}

impl DensityEmbedding {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn channel(&self, k: usize) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().map(move |row| row[k])
    }
}

pub fn density_for_cloud(profile: &BeamProfile, cloud: &[Point]) -> Result<DensityEmbedding> {
    let rows: Vec<Result<Density>> = cloud
        .par_iter()
        .map(|&p| to_spherical(p).and_then(|s| point_density(profile, &s)))
        .collect();
    let mut values = Vec::with_capacity(rows.len());
    for (index, row) in rows.into_iter().enumerate() {
        values.push(row.map_err(|e| Error::at_point(index, e))?);
    }
    Ok(DensityEmbedding { values })
}

#[cfg(test)]
mod tests {
    use std::f64::consts::PI;

    use super::*;

    fn popcount(v: &[u8]) -> usize {
        v.iter().filter(|&&b| b == 1).count()
    }

    fn at(profile: &BeamProfile, azimuth: f64, elevation: f64, range: f64) -> Density {
        profile
            .point_density(&SphericalCoords {
                azimuth,
                elevation,
                range,
            })
            .unwrap()
    }

    #[test]
    fn waymo_columns_every_other() {
        let p = ProjectionParams::default();
        let (h, _) = rasterize_beams(&SensorConfig::waymo(), &p);
        assert_eq!(popcount(&h), 2560);
        assert!(h.iter().step_by(2).all(|&b| b == 1));
    }

    #[test]
    fn nuscenes_rows_no_collisions() {
        let p = ProjectionParams::default();
        let (_, v) = rasterize_beams(&SensorConfig::nuscenes(), &p);
        assert_eq!(popcount(&v), 32);
    }

    #[test]
    fn colliding_beams_collapse() {
        let p = ProjectionParams::default();
        // 10 beams over a 0.01 degree FOV all land in one row
        let cfg = SensorConfig::new("tight", 4, 10, 0.0, 0.01).unwrap();
        let (_, v) = rasterize_beams(&cfg, &p);
        assert_eq!(popcount(&v), 1);
    }

    #[test]
    fn presets_popcount_bounded() {
        let p = ProjectionParams::default();
        for cfg in SensorConfig::presets() {
            let (h, v) = rasterize_beams(&cfg, &p);
            assert!(popcount(&h) <= cfg.h_beams && popcount(&h) > 0);
            assert!(popcount(&v) <= cfg.v_beams && popcount(&v) > 0);
        }
    }

    #[test]
    fn zero_raw_smooths_to_zero() {
        let p = ProjectionParams::default();
        let prof = smooth_profile(vec![0; p.width], vec![0; p.height], DEFAULT_SIGMAS, &p).unwrap();
        assert!(prof.smooth_h.iter().flatten().all(|&x| x == 0.0));
        assert!(prof.smooth_v.iter().flatten().all(|&x| x == 0.0));
    }

    #[test]
    fn single_impulse_peak() {
        let p = ProjectionParams::default();
        let mut h = vec![0; p.width];
        h[100] = 1;
        let mut v = vec![0; p.height];
        v[256] = 1;
        let prof = smooth_profile(h, v, DEFAULT_SIGMAS, &p).unwrap();
        for (k, &sigma) in DEFAULT_SIGMAS.iter().enumerate() {
            let peak = 1.0 / (sigma * (2.0 * PI).sqrt());
            assert!((prof.smooth_h[k][100] - peak).abs() < 1e-4);
            assert!((prof.smooth_v[k][256] - peak).abs() < 1e-4);
            // bump is symmetric around the impulse
            assert!((prof.smooth_h[k][90] - prof.smooth_h[k][110]).abs() < 1e-15);
        }
        // wraps around the azimuth seam
        assert!(prof.smooth_h[3][p.width - 100] > 0.0);
    }

    #[test]
    fn bad_sigma_rejected() {
        let p = ProjectionParams::default();
        let err = smooth_profile(vec![0; p.width], vec![0; p.height], [10.0, 0.0, 5.0, 5.0], &p);
        assert!(err.is_err());
        assert!(gaussian_kernel(-1.0).is_err());
    }

    #[test]
    fn horizontal_mass_preserved() {
        let p = ProjectionParams::default();
        for cfg in SensorConfig::presets() {
            let prof = BeamProfile::new(&cfg, &p).unwrap();
            let pc = popcount(&prof.raw_h) as f64;
            for row in &prof.smooth_h {
                let s: f64 = row.iter().sum();
                assert!((s - pc).abs() < 1e-8 * pc, "{}: {s} vs {pc}", cfg.name);
                assert!(row.iter().all(|&x| x >= 0.0));
            }
        }
    }

    #[test]
    fn vertical_mass_preserved_away_from_edges() {
        // beams occupy rows ~140..~364; 4 sigma = 40 px stays inside
        let p = ProjectionParams::default();
        let cfg = SensorConfig::new("mid", 16, 32, -17.5, 2.5).unwrap();
        let prof = BeamProfile::new(&cfg, &p).unwrap();
        let s: f64 = prof.smooth_v[0].iter().sum();
        assert!((s - popcount(&prof.raw_v) as f64).abs() < 1e-9);
        // wide kernels lose mass through zero padding only at the edges
        let s3: f64 = prof.smooth_v[3].iter().sum();
        assert!(s3 <= s + 1e-9);
    }

    fn comb(height: usize, spacing: f64) -> Vec<u8> {
        let mut v = vec![0u8; height];
        let mut k = 0;
        loop {
            let idx = (k as f64 * spacing).round() as usize;
            if idx >= height {
                break;
            }
            v[idx] = 1;
            k += 1;
        }
        v
    }

    #[test]
    fn comb_ripple_small() {
        // a uniform comb of spacing s smoothed by sigma=10 reads 1/s in its
        // interior; Poisson summation bounds the ripple by 2 exp(-2 pi^2 sigma^2 / s^2)
        let p = ProjectionParams::default();
        for s in [14usize, 15] {
            let prof = smooth_profile(vec![0; p.width], comb(p.height, s as f64), DEFAULT_SIGMAS, &p).unwrap();
            let target = 1.0 / s as f64;
            for row in 150..360 {
                let rel = (prof.smooth_v[0][row] - target).abs() / target;
                assert!(rel < 1e-3, "s={s} row {row}: rel ripple {rel}");
            }
        }
    }

    #[test]
    fn rasterized_fractional_comb_close() {
        // spacing 14.2 cannot be uniform on integer pixels; the 14/15 pattern
        // repeats every 71 px, too slow for sigma=10 to average out, so the
        // ripple is ~3% while the mean stays at 1/14.2
        let p = ProjectionParams::default();
        let prof = smooth_profile(vec![0; p.width], comb(p.height, 14.2), DEFAULT_SIGMAS, &p).unwrap();
        let target = 1.0 / 14.2;
        let mean: f64 = prof.smooth_v[0][150..360].iter().sum::<f64>() / 210.0;
        assert!((mean - target).abs() / target < 2e-3);
        for row in 150..360 {
            assert!((prof.smooth_v[0][row] - target).abs() / target < 0.04);
        }
    }

    #[test]
    fn support_grows_with_sigma() {
        let p = ProjectionParams::default();
        let prof = BeamProfile::new(&SensorConfig::nuscenes(), &p).unwrap();
        for k in 1..DENSITY_CHANNELS {
            for (a, b) in prof.smooth_v[k - 1].iter().zip(&prof.smooth_v[k]) {
                if *a > 0.0 {
                    assert!(*b > 0.0);
                }
            }
        }
    }

    #[test]
    fn range_doubling_halves() {
        let prof = BeamProfile::new(&SensorConfig::semantic_kitti(), &ProjectionParams::default()).unwrap();
        let a = at(&prof, 1.0, -0.1, 7.0);
        let b = at(&prof, 1.0, -0.1, 14.0);
        for k in 0..DENSITY_CHANNELS {
            assert!((b[k] - 0.5 * a[k]).abs() <= 1e-15 * a[k]);
        }
    }

    #[test]
    fn nuscenes_band_center_value() {
        let cfg = SensorConfig::nuscenes();
        let prof = BeamProfile::new(&cfg, &ProjectionParams::default()).unwrap();
        let d = at(&prof, PI, cfg.band_center_rad(), 12.0);
        // expected beams per pixel: 1080/5120 horizontally, 32 per 455.1 px vertically
        let expected = ((1080.0f64 / 5120.0) * (32.0 / (40.0 / 45.0 * 512.0))).sqrt() / 12.0;
        assert!((d[0] - expected).abs() / expected < 0.01, "{} vs {expected}", d[0]);
        assert!((d[0] - 0.01015).abs() < 2e-4);
    }

    #[test]
    fn waymo_matches_nuscenes_at_35m() {
        let p = ProjectionParams::default();
        let w = SensorConfig::waymo();
        let n = SensorConfig::nuscenes();
        let pw = BeamProfile::new(&w, &p).unwrap();
        let pn = BeamProfile::new(&n, &p).unwrap();
        let dw = at(&pw, PI, w.band_center_rad(), 35.0)[0];
        let dn = at(&pn, PI, n.band_center_rad(), 12.0)[0];
        assert!((dw - 0.01071).abs() < 2e-4, "{dw}");
        assert!((dw / dn - 1.0).abs() < 0.1);
    }

    #[test]
    fn cloud_batching() {
        let prof = BeamProfile::new(&SensorConfig::nuscenes(), &ProjectionParams::default()).unwrap();
        assert!(density_for_cloud(&prof, &[]).unwrap().is_empty());

        let pts = [[5.0, 1.0, -0.5], [-3.0, 2.0, 0.1], [0.5, -8.0, -2.0]];
        let emb = density_for_cloud(&prof, &pts).unwrap();
        for (p, row) in pts.iter().zip(&emb.values) {
            assert_eq!(*row, prof.point_density(&to_spherical(*p).unwrap()).unwrap());
        }
        let permuted = [pts[2], pts[0], pts[1]];
        let emb2 = density_for_cloud(&prof, &permuted).unwrap();
        assert_eq!(emb2.values, vec![emb.values[2], emb.values[0], emb.values[1]]);
    }

    #[test]
    fn cloud_error_names_index() {
        let prof = BeamProfile::new(&SensorConfig::nuscenes(), &ProjectionParams::default()).unwrap();
        let err = density_for_cloud(&prof, &[[1.0, 0.0, 0.0], [0.0; 3]]).unwrap_err();
        assert!(matches!(err, Error::AtPoint { index: 1, .. }));
        assert!(err.to_string().contains("point 1"));
    }

    #[test]
    fn nonpositive_range_rejected() {
        let prof = BeamProfile::new(&SensorConfig::nuscenes(), &ProjectionParams::default()).unwrap();
        let c = SphericalCoords {
            azimuth: 0.0,
            elevation: 0.0,
            range: 0.0,
        };
        assert!(prof.point_density(&c).is_err());
    }
}
