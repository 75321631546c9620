//! LiDAR emission geometry: beam inclination sets, spherical coordinates and
//! the spherical-image projection used to rasterize beams and points.
//!
//! Angles are radians everywhere inside the crate. Degrees only appear in
//! [`SensorConfig`] and [`ProjectionParams`], which mirror the on-disk config
//! files.

use std::f64::consts::TAU;

use crate::error::{Error, Result};
use crate::Point;

/// Emission geometry of a spinning LiDAR: horizontal/vertical beam counts and
/// the vertical field of view in degrees.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorConfig {
    pub name: String,
    pub h_beams: usize,
    pub v_beams: usize,
    pub fov_min_deg: f64,
    pub fov_max_deg: f64,
}

impl SensorConfig {
    pub fn new(
        name: impl Into<String>,
        h_beams: usize,
        v_beams: usize,
        fov_min_deg: f64,
        fov_max_deg: f64,
    ) -> Result<Self> {
        let config = Self {
            name: name.into(),
            h_beams,
            v_beams,
            fov_min_deg,
            fov_max_deg,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.h_beams == 0 || self.v_beams == 0 {
            return Err(Error::InvalidConfig(format!(
                "beam counts must be positive (h_beams={}, v_beams={})",
                self.h_beams, self.v_beams
            )));
        }
        if !(self.fov_min_deg.is_finite() && self.fov_max_deg.is_finite()) || self.fov_min_deg >= self.fov_max_deg {
            return Err(Error::InvalidConfig(format!(
                "fov_min_deg ({}) must be below fov_max_deg ({})",
                self.fov_min_deg, self.fov_max_deg
            )));
        }
        Ok(())
    }

    pub fn waymo() -> Self {
        Self::preset("waymo", 2560, 64, -17.6, 2.4)
    }

    pub fn semantic_kitti() -> Self {
        Self::preset("semantickitti", 2048, 64, -24.8, 2.0)
    }

    pub fn nuscenes() -> Self {
        Self::preset("nuscenes", 1080, 32, -30.0, 10.0)
    }

    pub fn pandaset() -> Self {
        Self::preset("pandaset", 1800, 64, -25.0, 15.0)
    }

    pub fn semantic_poss() -> Self {
        Self::preset("semanticposs", 1800, 40, -16.0, 7.0)
    }

    /// All five dataset presets.
    pub fn presets() -> Vec<Self> {
        vec![
            Self::waymo(),
            Self::semantic_kitti(),
            Self::nuscenes(),
            Self::pandaset(),
            Self::semantic_poss(),
        ]
    }

    /// Looks up a preset by case-insensitive name.
    pub fn preset_by_name(name: &str) -> Option<Self> {
        let wanted = name.to_ascii_lowercase();
        let wanted = match wanted.as_str() {
            "kitti" => "semantickitti",
            "poss" => "semanticposs",
            other => other,
        };
        Self::presets().into_iter().find(|c| c.name == wanted)
    }

    fn preset(name: &str, h: usize, v: usize, lo: f64, hi: f64) -> Self {
        Self {
            name: name.to_string(),
            h_beams: h,
            v_beams: v,
            fov_min_deg: lo,
            fov_max_deg: hi,
        }
    }

    /// Vertical spacing between adjacent beams, degrees.
    pub fn v_step_deg(&self) -> f64 {
        (self.fov_max_deg - self.fov_min_deg) / self.v_beams as f64
    }

    /// Elevation halfway between the FOV bounds, radians.
    pub fn band_center_rad(&self) -> f64 {
        (0.5 * (self.fov_min_deg + self.fov_max_deg)).to_radians()
    }
}

/// Beam inclination sets of a sensor. Azimuths in radians, elevations in
/// degrees, both strictly increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamInclinations {
    pub azimuth_rad: Vec<f64>,
    pub elevation_deg: Vec<f64>,
}

impl BeamInclinations {
    pub fn elevation_rad(&self) -> Vec<f64> {
        self.elevation_deg.iter().map(|d| d.to_radians()).collect()
    }
}

/// Uniform beam model: `2*pi*i/H_b` for i in 1..=H_b and
/// `(f_max - f_min)*j/V_b + f_min` for j in 1..=V_b.
pub fn beam_inclinations(config: &SensorConfig) -> BeamInclinations {
    let h = config.h_beams as f64;
    let azimuth_rad = (1..=config.h_beams).map(|i| TAU * i as f64 / h).collect();
    let span = config.fov_max_deg - config.fov_min_deg;
    let v = config.v_beams as f64;
    let elevation_deg = (1..=config.v_beams)
        .map(|j| span * j as f64 / v + config.fov_min_deg)
        .collect();
    BeamInclinations {
        azimuth_rad,
        elevation_deg,
    }
}

/// Resolution and vertical FOV of the projected spherical image.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionParams {
    pub height: usize,
    pub width: usize,
    pub fov_min_deg: f64,
    pub fov_max_deg: f64,
}

impl Default for ProjectionParams {
    fn default() -> Self {
        Self {
            height: 512,
            width: 5120,
            fov_min_deg: -30.0,
            fov_max_deg: 15.0,
        }
    }
}

/// Pixel of the projected image. `col` indexes azimuth, `row` elevation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Pixel {
    pub col: usize,
    pub row: usize,
}

impl ProjectionParams {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.fov_min_deg >= self.fov_max_deg {
            return Err(Error::InvalidConfig(format!(
                "bad projection {}x{} over [{}, {}]",
                self.height, self.width, self.fov_min_deg, self.fov_max_deg
            )));
        }
        Ok(())
    }

    /// Column of an azimuth in radians, wrapped modulo the image width.
    pub fn col_of(&self, azimuth: f64) -> usize {
        let w = self.width as f64;
        let c = (azimuth / TAU * w).floor();
        (c as i64).rem_euclid(self.width as i64) as usize
    }

    /// Row of an elevation in radians, clamped into the image.
    pub fn row_of(&self, elevation: f64) -> usize {
        let lo = self.fov_min_deg.to_radians();
        let hi = self.fov_max_deg.to_radians();
        self.row_from_fraction((elevation - lo) / (hi - lo))
    }

    /// Row of an elevation given in degrees; used when rasterizing beam
    /// inclinations that are defined in degrees.
    pub fn row_of_deg(&self, elevation_deg: f64) -> usize {
        self.row_from_fraction((elevation_deg - self.fov_min_deg) / (self.fov_max_deg - self.fov_min_deg))
    }

    fn row_from_fraction(&self, frac: f64) -> usize {
        let r = (frac * self.height as f64).floor();
        if r.is_nan() || r < 0.0 {
            0
        } else {
            (r as usize).min(self.height - 1)
        }
    }

    /// Angular center `(azimuth, elevation)` of a pixel, radians.
    pub fn unproject(&self, pixel: Pixel) -> (f64, f64) {
        let azimuth = (pixel.col as f64 + 0.5) / self.width as f64 * TAU;
        let lo = self.fov_min_deg.to_radians();
        let hi = self.fov_max_deg.to_radians();
        let elevation = lo + (pixel.row as f64 + 0.5) / self.height as f64 * (hi - lo);
        (azimuth, elevation)
    }
}

/// Spherical form of a Cartesian point: azimuth in `[0, 2*pi)`, elevation in
/// `[-pi/2, pi/2]`, range in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SphericalCoords {
    pub azimuth: f64,
    pub elevation: f64,
    pub range: f64,
}

pub fn to_spherical(point: Point) -> Result<SphericalCoords> {
    let [x, y, z] = point;
    if !(x.is_finite() && y.is_finite() && z.is_finite()) {
        return Err(Error::NonFiniteCoordinate);
    }
    let range = (x * x + y * y + z * z).sqrt();
    if range == 0.0 {
        return Err(Error::DegeneratePoint);
    }
    let mut azimuth = y.atan2(x);
    if azimuth < 0.0 {
        azimuth += TAU;
    }
    // -0.0 + TAU rounds to TAU for tiny negative angles
    if azimuth >= TAU {
        azimuth = 0.0;
    }
    let elevation = (z / range).clamp(-1.0, 1.0).asin();
    Ok(SphericalCoords {
        azimuth,
        elevation,
        range,
    })
}

pub fn from_spherical(coords: SphericalCoords) -> Point {
    let (st, ct) = coords.azimuth.sin_cos();
    let (sp, cp) = coords.elevation.sin_cos();
    [coords.range * cp * ct, coords.range * cp * st, coords.range * sp]
}

pub fn project(coords: &SphericalCoords, params: &ProjectionParams) -> Pixel {
    Pixel {
        col: params.col_of(coords.azimuth),
        row: params.row_of(coords.elevation),
    }
}

#[cfg(test)]
mod tests {
    use std::f64::consts::PI;

    use super::*;

    #[test]
    fn presets_match_dataset_table() {
        let expected = [
            ("waymo", 2560, 64, -17.6, 2.4),
            ("semantickitti", 2048, 64, -24.8, 2.0),
            ("nuscenes", 1080, 32, -30.0, 10.0),
            ("pandaset", 1800, 64, -25.0, 15.0),
            ("semanticposs", 1800, 40, -16.0, 7.0),
        ];
        let presets = SensorConfig::presets();
        assert_eq!(presets.len(), expected.len());
        for (p, (name, h, v, lo, hi)) in presets.iter().zip(expected) {
            assert_eq!(p.name, name);
            assert_eq!((p.h_beams, p.v_beams), (h, v));
            assert_eq!((p.fov_min_deg, p.fov_max_deg), (lo, hi));
            p.validate().unwrap();
            let beams = beam_inclinations(p);
            assert_eq!(beams.azimuth_rad.len(), h);
            assert_eq!(beams.elevation_deg.len(), v);
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(SensorConfig::new("x", 0, 64, -10.0, 10.0).is_err());
        assert!(SensorConfig::new("x", 10, 0, -10.0, 10.0).is_err());
        assert!(SensorConfig::new("x", 10, 10, 10.0, 10.0).is_err());
        assert!(SensorConfig::new("x", 10, 10, 11.0, 10.0).is_err());
    }

    #[test]
    fn kitti_inclinations() {
        let b = beam_inclinations(&SensorConfig::semantic_kitti());
        assert!((b.elevation_deg[0] - (-24.38125)).abs() < 1e-12);
        assert!((b.elevation_deg[63] - 2.0).abs() < 1e-12);
        assert!((b.azimuth_rad[0] - 0.003_067_961_575_771_282).abs() < 1e-15);
        assert!(b.azimuth_rad.windows(2).all(|w| w[0] < w[1]));
        assert!(b.elevation_deg.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn nuscenes_inclinations_span_fov() {
        let b = beam_inclinations(&SensorConfig::nuscenes());
        assert_eq!(b.elevation_deg.len(), 32);
        assert!(b.elevation_deg[0] > -30.0);
        assert!((b.elevation_deg[31] - 10.0).abs() < 1e-12);
        for w in b.elevation_deg.windows(2) {
            assert!((w[1] - w[0] - 1.25).abs() < 1e-12);
        }
    }

    #[test]
    fn spherical_examples() {
        let s = to_spherical([1.0, 0.0, 0.0]).unwrap();
        assert_eq!((s.azimuth, s.elevation, s.range), (0.0, 0.0, 1.0));

        let s = to_spherical([0.0, 3.0, 4.0]).unwrap();
        assert!((s.azimuth - PI / 2.0).abs() < 1e-15);
        assert!((s.elevation - 0.927_295_218_001_612_2).abs() < 1e-12);
        assert!((s.range - 5.0).abs() < 1e-15);

        let err = to_spherical([0.0, 0.0, 0.0]).unwrap_err();
        assert_eq!(err.to_string(), "degenerate point at sensor origin");
    }

    #[test]
    fn azimuth_wrapped() {
        let s = to_spherical([1.0, -1e-300, 0.0]).unwrap();
        assert!((0.0..TAU).contains(&s.azimuth));
        let s = to_spherical([0.0, -1.0, 0.0]).unwrap();
        assert!((s.azimuth - 1.5 * PI).abs() < 1e-15);
    }

    #[test]
    fn projection_examples() {
        let p = ProjectionParams::default();
        let c = |azimuth: f64, deg: f64| SphericalCoords {
            azimuth,
            elevation: deg.to_radians(),
            range: 1.0,
        };
        assert_eq!(project(&c(PI, -7.5), &p), Pixel { col: 2560, row: 256 });
        assert_eq!(project(&c(0.0, -30.0), &p), Pixel { col: 0, row: 0 });
        let below_tau = TAU - 1e-12;
        assert_eq!(project(&c(below_tau, 15.0), &p), Pixel { col: 5119, row: 511 });
        // 2*pi itself wraps to column 0
        assert_eq!(p.col_of(TAU), 0);
        // out-of-FOV elevations clamp
        assert_eq!(project(&c(0.0, -80.0), &p).row, 0);
        assert_eq!(project(&c(0.0, 60.0), &p).row, 511);
    }

    #[test]
    fn unproject_round_trip_sampled() {
        let p = ProjectionParams::default();
        for row in (0..p.height).step_by(7) {
            for col in (0..p.width).step_by(13) {
                let px = Pixel { col, row };
                let (az, el) = p.unproject(px);
                let back = project(
                    &SphericalCoords {
                        azimuth: az,
                        elevation: el,
                        range: 1.0,
                    },
                    &p,
                );
                assert_eq!(back, px);
            }
        }
    }

    #[test]
    fn cartesian_round_trip() {
        let q = [3.0, -4.0, 1.5];
        let back = from_spherical(to_spherical(q).unwrap());
        for (a, b) in q.iter().zip(back) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    mod props {
        use proptest::prelude::*;

        use super::super::*;

        proptest! {
            #[test]
            fn row_monotone(a in -1.5f64..1.5, b in -1.5f64..1.5) {
                let p = ProjectionParams::default();
                let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                prop_assert!(p.row_of(lo) <= p.row_of(hi));
            }

            #[test]
            fn col_monotone(a in 0.0f64..TAU, b in 0.0f64..TAU) {
                let p = ProjectionParams::default();
                let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                prop_assert!(p.col_of(lo) <= p.col_of(hi));
            }

            #[test]
            fn spherical_ranges(x in -50.0f64..50.0, y in -50.0f64..50.0, z in -50.0f64..50.0) {
                prop_assume!(x * x + y * y + z * z > 1e-12);
                let s = to_spherical([x, y, z]).unwrap();
                prop_assert!((0.0..TAU).contains(&s.azimuth));
                prop_assert!(s.range > 0.0);
                prop_assert!(s.elevation.abs() <= std::f64::consts::FRAC_PI_2);
            }
        }
    }
}
