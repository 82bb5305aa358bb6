//! Equirectangular (ERP) sampling geometry and the lateral distortion
//! coefficient, plus sphere/pinhole/ERP coordinate mappings.
//!
//! Heights `h` are axial distances from the pole along the sphere's axis, in
//! the same units as the ERP width `W = 2 pi R`, so `h` ranges over `[0, W/pi]`
//! and the latitude circle at height `h` has radius `sqrt(h (W/pi - h))`.

use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::fmt::Write as _;

use crate::error::{DatrError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErpSpec {
    /// ERP width in arc-length units.
    pub width: f64,
    /// Pixels per latitude row.
    pub n: usize,
    /// Pixel steps between the two compared points along one row.
    pub n_prime: usize,
    /// Axial height from the pole.
    pub h: f64,
}

impl ErpSpec {
    pub fn new(width: f64, n: usize, n_prime: usize, h: f64) -> Self {
        Self { width, n, n_prime, h }
    }

    /// Height of the equator, `W / (2 pi)`.
    pub fn equator(width: f64) -> f64 {
        width / TAU
    }

    fn validate(&self) -> Result<()> {
        if !(self.width > 0.0) || self.n == 0 {
            return Err(DatrError::Domain(format!(
                "ERP width must be positive and n >= 1 (W={}, n={})",
                self.width, self.n
            )));
        }
        if self.n_prime > self.n {
            return Err(DatrError::Domain(format!("n' = {} exceeds n = {}", self.n_prime, self.n)));
        }
        let axis = self.width / PI;
        if !(0.0..=axis).contains(&self.h) {
            return Err(DatrError::Domain(format!("h = {} outside [0, {axis}]", self.h)));
        }
        Ok(())
    }

    /// Width of one ERP row pixel on the sphere: `(2 pi / n) sqrt(h (W/pi - h))`.
    pub fn pixel_width(&self) -> Result<f64> {
        self.validate()?;
        Ok(TAU / self.n as f64 * latitude_radius(self.width, self.h))
    }

    /// Nominal ERP pixel width `W / n`.
    pub fn erp_pixel_width(&self) -> f64 {
        self.width / self.n as f64
    }

    /// `Dis = (n'/n) (W - 2 pi sqrt(h (W/pi - h)))`: how much longer `n'`
    /// pixel steps are on the ERP row than on the sphere row.
    pub fn distortion_coefficient(&self) -> Result<f64> {
        self.validate()?;
        let chord = TAU * latitude_radius(self.width, self.h);
        Ok(self.n_prime as f64 / self.n as f64 * (self.width - chord))
    }
}

fn latitude_radius(width: f64, h: f64) -> f64 {
    (h * (width / PI - h)).max(0.0).sqrt()
}

/// Unit direction on the sphere.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SphereDir {
    /// Radians in `[-pi, pi)`.
    pub longitude: f64,
    /// Radians in `[-pi/2, pi/2]`.
    pub latitude: f64,
}

impl SphereDir {
    pub fn new(longitude: f64, latitude: f64) -> Self {
        Self {
            longitude: wrap_longitude(longitude),
            latitude: latitude.clamp(-FRAC_PI_2, FRAC_PI_2),
        }
    }

    /// Cartesian unit vector: x right, y up, z forward (longitude 0).
    pub fn to_vec3(self) -> [f64; 3] {
        let (sl, cl) = self.latitude.sin_cos();
        let (so, co) = self.longitude.sin_cos();
        [cl * so, sl, cl * co]
    }

    pub fn from_vec3(v: [f64; 3]) -> Self {
        let horiz = (v[0] * v[0] + v[2] * v[2]).sqrt();
        Self::new(v[0].atan2(v[2]), v[1].atan2(horiz))
    }

    /// Great-circle angle to another direction.
    pub fn angle_to(self, other: SphereDir) -> f64 {
        let a = self.to_vec3();
        let b = other.to_vec3();
        let dot = (a[0] * b[0] + a[1] * b[1] + a[2] * b[2]).clamp(-1.0, 1.0);
        dot.acos()
    }
}

pub fn wrap_longitude(lon: f64) -> f64 {
    let w = (lon + PI).rem_euclid(TAU) - PI;
    if w >= PI {
        w - TAU
    } else {
        w
    }
}

/// Pixel-center direction of ERP pixel `(u, v)` (column, row).
pub fn erp_to_dir(u: f64, v: f64, width_px: usize, height_px: usize) -> Result<SphereDir> {
    if !(0.0..width_px as f64).contains(&u) || !(0.0..height_px as f64).contains(&v) {
        return Err(DatrError::Domain(format!(
            "ERP pixel ({u}, {v}) outside {width_px}x{height_px}"
        )));
    }
    Ok(SphereDir {
        longitude: TAU * (u + 0.5) / width_px as f64 - PI,
        latitude: FRAC_PI_2 - PI * (v + 0.5) / height_px as f64,
    })
}

/// Inverse of [`erp_to_dir`]; returns continuous pixel coordinates.
pub fn dir_to_erp(dir: SphereDir, width_px: usize, height_px: usize) -> (f64, f64) {
    let u = (dir.longitude + PI) * width_px as f64 / TAU - 0.5;
    let v = (FRAC_PI_2 - dir.latitude) * height_px as f64 / PI - 0.5;
    (u, v)
}

fn focal_length(width_px: usize, hfov: f64) -> Result<f64> {
    if !(hfov > 0.0 && hfov < PI) {
        return Err(DatrError::Domain(format!("horizontal fov {hfov} outside (0, pi)")));
    }
    Ok(width_px as f64 / 2.0 / (hfov / 2.0).tan())
}

/// Ray through the center of pinhole pixel `(u, v)`; the principal axis looks
/// at longitude 0, latitude 0 and rows grow downward.
pub fn pinhole_to_dir(u: f64, v: f64, width_px: usize, height_px: usize, hfov: f64) -> Result<SphereDir> {
    let f = focal_length(width_px, hfov)?;
    let x = u + 0.5 - width_px as f64 / 2.0;
    let y = v + 0.5 - height_px as f64 / 2.0;
    Ok(SphereDir::from_vec3([x, -y, f]))
}

/// Inverse of [`pinhole_to_dir`]; `None` for directions behind the camera.
pub fn dir_to_pinhole(dir: SphereDir, width_px: usize, height_px: usize, hfov: f64) -> Result<Option<(f64, f64)>> {
    let f = focal_length(width_px, hfov)?;
    let [x, y, z] = dir.to_vec3();
    if z <= 1e-12 {
        return Ok(None);
    }
    let u = f * x / z + width_px as f64 / 2.0 - 0.5;
    let v = -f * y / z + height_px as f64 / 2.0 - 0.5;
    Ok(Some((u, v)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReportRow {
    pub h: f64,
    pub width: f64,
    pub dis: f64,
}

/// Sample `rows` heights at bin centers of `(0, W/pi)` and tabulate the row
/// pixel width and `Dis` for `n_prime` pixel steps.
pub fn distortion_report(width: f64, n: usize, n_prime: usize, rows: usize) -> Result<Vec<ReportRow>> {
    if rows < 2 {
        return Err(DatrError::Domain("distortion report needs at least 2 rows".into()));
    }
    let axis = width / PI;
    (0..rows)
        .map(|i| {
            let h = (i as f64 + 0.5) * axis / rows as f64;
            let spec = ErpSpec::new(width, n, n_prime, h);
            Ok(ReportRow {
                h,
                width: spec.pixel_width()?,
                dis: spec.distortion_coefficient()?,
            })
        })
        .collect()
}

/// CSV with header `h,width,dis`, `\n` line endings, 9 significant digits.
pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from("h,width,dis\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{}", sig9(r.h), sig9(r.width), sig9(r.dis));
    }
    out
}

/// `%.9g`-style formatting.
pub fn sig9(x: f64) -> String {
    format_sig(x, 9)
}

pub fn format_sig(x: f64, digits: usize) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { "0".into() } else { x.to_string() };
    }
    let sci = format!("{:.*e}", digits - 1, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("exponent");
    if exp < -5 || exp >= digits as i32 {
        let m = trim_zeros(mantissa);
        return format!("{m}e{}{:02}", if exp < 0 { '-' } else { '+' }, exp.abs());
    }
    let decimals = (digits as i32 - 1 - exp).max(0) as usize;
    trim_zeros(&format!("{x:.decimals$}")).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent 3-D construction: radius of the latitude circle `h` below
    /// the pole on a sphere of radius `r`, divided into `n` pixels.
    fn sphere_row_pixel(r: f64, h: f64, n: usize) -> f64 {
        let circle = (r * r - (r - h) * (r - h)).sqrt();
        TAU * circle / n as f64
    }

    #[test]
    fn equator_width_is_nominal() {
        let s = ErpSpec::new(TAU, 8, 4, 1.0);
        assert!((s.pixel_width().unwrap() - 0.785_398).abs() < 1e-6);
        assert!((s.pixel_width().unwrap() - TAU / 8.0).abs() < 1e-12);
        assert_eq!(s.distortion_coefficient().unwrap(), 0.0);
    }

    #[test]
    fn pole_collapses() {
        assert_eq!(ErpSpec::new(TAU, 8, 1, 0.0).pixel_width().unwrap(), 0.0);
    }

    #[test]
    fn worked_values_against_sphere_oracle() {
        let s = ErpSpec::new(TAU, 8, 4, 0.5);
        let oracle_w = sphere_row_pixel(1.0, 0.5, 8);
        assert!((oracle_w - 0.680_175).abs() < 5e-7);
        assert!((s.pixel_width().unwrap() - oracle_w).abs() < 1e-12);
        let oracle_dis = 4.0 * (TAU / 8.0 - oracle_w);
        assert!((oracle_dis - 0.420_894).abs() < 5e-7);
        assert!((s.distortion_coefficient().unwrap() - oracle_dis).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_height_is_domain_error() {
        assert!(matches!(ErpSpec::new(TAU, 8, 1, 2.5).pixel_width(), Err(DatrError::Domain(_))));
        assert!(ErpSpec::new(TAU, 8, 1, -0.1).distortion_coefficient().is_err());
        assert!(ErpSpec::new(TAU, 8, 9, 1.0).distortion_coefficient().is_err());
    }

    #[test]
    fn erp_pixel_center_convention() {
        let d = erp_to_dir(0.0, 0.0, 4, 2).unwrap();
        assert!((d.longitude - (-PI + PI / 4.0)).abs() < 1e-15);
        assert!((d.latitude - (FRAC_PI_2 - PI / 4.0)).abs() < 1e-15);
        // centre of an even-sized 2:1 panorama sits between pixels
        let d = erp_to_dir(63.5, 31.5, 128, 64).unwrap();
        assert!(d.longitude.abs() < 1e-12 && d.latitude.abs() < 1e-12);
        assert!(erp_to_dir(4.0, 0.0, 4, 2).is_err());
    }

    #[test]
    fn pinhole_principal_point_and_edge() {
        let d = pinhole_to_dir(63.5, 63.5, 128, 128, FRAC_PI_2).unwrap();
        assert!(d.longitude.abs() < 1e-12 && d.latitude.abs() < 1e-12);
        let d = pinhole_to_dir(127.0, 63.5, 128, 128, FRAC_PI_2).unwrap();
        let expect = (63.5f64 / 64.0).atan();
        assert!((d.longitude - expect).abs() < 1e-12);
        assert!((d.longitude - PI / 4.0).abs() < 0.01);
        assert!(pinhole_to_dir(0.0, 0.0, 8, 8, PI).is_err());
        assert!(pinhole_to_dir(0.0, 0.0, 8, 8, 0.0).is_err());
    }

    #[test]
    fn report_includes_equator_and_is_symmetric() {
        let rows = distortion_report(TAU, 8, 1, 3).unwrap();
        assert_eq!(rows[1].dis, 0.0);
        let rows = distortion_report(TAU, 16, 2, 10).unwrap();
        for i in 0..5 {
            assert!((rows[i].dis - rows[9 - i].dis).abs() < 1e-9);
            assert!((rows[i].width - rows[9 - i].width).abs() < 1e-9);
        }
        assert!(distortion_report(TAU, 8, 1, 1).is_err());
    }

    #[test]
    fn csv_format() {
        let csv = report_csv(&distortion_report(TAU, 8, 4, 3).unwrap());
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "h,width,dis");
        assert_eq!(lines.len(), 4);
        assert!(lines[2].starts_with("1,0.785398163,0"));
        assert!(csv.ends_with('\n') && !csv.contains('\r'));
    }

    #[test]
    fn significant_digit_formatting() {
        assert_eq!(sig9(0.785_398_163_397), "0.785398163");
        assert_eq!(sig9(1.0), "1");
        assert_eq!(sig9(123_456_789_012.0), "1.23456789e+11");
        assert_eq!(sig9(-2.5e-7), "-2.5e-07");
        assert_eq!(sig9(0.0), "0");
    }
}
