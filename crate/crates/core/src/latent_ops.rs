//! Latent-space operations: spherical interpolation, interpolation grids and
//! attribute vectors from differences of mean codes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CodeDecoder, ImageBatch, ImageEncoder, LatentCode};
use crate::tensor::dot;

/// Cosines this close to +-1 are treated as parallel.
pub const PARALLEL_TOLERANCE: f64 = 1e-7;

fn check_unit(z: &LatentCode) -> Result<()> {
    z.ensure_unit()
}

/// Great-circle interpolation between two unit codes.
///
/// Nearly parallel inputs fall back to normalized linear interpolation;
/// antipodal inputs have no unique path and are rejected.
pub fn slerp(z1: &LatentCode, z2: &LatentCode, t: f64) -> Result<LatentCode> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Argument(format!("t = {t} outside [0, 1]")));
    }
    if z1.dim() != z2.dim() {
        return Err(Error::Shape("slerp between codes of different dimension".into()));
    }
    check_unit(z1)?;
    check_unit(z2)?;
    let c = dot(z1.values(), z2.values()).clamp(-1.0, 1.0);
    if c < -1.0 + PARALLEL_TOLERANCE {
        return Err(Error::Argument("slerp between antipodal codes is undefined".into()));
    }
    if t == 0.0 {
        return Ok(z1.clone());
    }
    if t == 1.0 {
        return Ok(z2.clone());
    }
    if c > 1.0 - PARALLEL_TOLERANCE {
        return lerp(z1, z2, t);
    }
    let omega = c.acos();
    let s = omega.sin();
    let (a, b) = (((1.0 - t) * omega).sin() / s, (t * omega).sin() / s);
    LatentCode::normalized(
        z1.values()
            .iter()
            .zip(z2.values())
            .map(|(x, y)| a * x + b * y)
            .collect(),
    )
}

/// Linear interpolation projected back onto the sphere.
pub fn lerp(z1: &LatentCode, z2: &LatentCode, t: f64) -> Result<LatentCode> {
    if t == 0.0 {
        return Ok(z1.clone());
    }
    if t == 1.0 {
        return Ok(z2.clone());
    }
    LatentCode::normalized(
        z1.values()
            .iter()
            .zip(z2.values())
            .map(|(x, y)| (1.0 - t) * x + t * y)
            .collect(),
    )
}

/// Interpolation path between codes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    #[default]
    Slerp,
    Lerp,
}

impl Interpolation {
    pub fn apply(self, z1: &LatentCode, z2: &LatentCode, t: f64) -> Result<LatentCode> {
        match self {
            Interpolation::Slerp => slerp(z1, z2, t),
            Interpolation::Lerp => lerp(z1, z2, t),
        }
    }
}

/// Layout of an interpolation grid.
///
/// Two corners give a `1 x cols` strip, four give a `rows x cols` grid with
/// the corners in reading order (top-left, top-right, bottom-left,
/// bottom-right), and six give two four-corner grids side by side sharing the
/// middle column, corners ordered top row left to right, then bottom row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
}

impl GridSpec {
    pub fn strip(cells: usize) -> Self {
        Self { rows: 1, cols: cells }
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    fn validate(&self, corners: usize) -> Result<()> {
        let ok = match corners {
            2 => self.rows == 1 && self.cols >= 2,
            4 => self.rows >= 2 && self.cols >= 2,
            6 => self.rows >= 2 && self.cols >= 3 && self.cols % 2 == 1,
            _ => false,
        };
        if !ok {
            return Err(Error::Argument(format!(
                "{corners} corners do not fit a {}x{} grid (2 corners: 1xN, 4: RxC, 6: Rx(2k+1))",
                self.rows, self.cols
            )));
        }
        Ok(())
    }
}

fn frac(i: usize, n: usize) -> f64 {
    if i + 1 == n {
        1.0
    } else {
        i as f64 / (n - 1) as f64
    }
}

/// Codes of every grid cell in row-major order.
pub fn code_grid(corners: &[LatentCode], spec: GridSpec, how: Interpolation) -> Result<Vec<LatentCode>> {
    spec.validate(corners.len())?;
    let mut out = Vec::with_capacity(spec.cells());
    match corners.len() {
        2 => {
            for j in 0..spec.cols {
                out.push(how.apply(&corners[0], &corners[1], frac(j, spec.cols))?);
            }
        }
        4 => {
            for i in 0..spec.rows {
                let v = frac(i, spec.rows);
                for j in 0..spec.cols {
                    let u = frac(j, spec.cols);
                    let top = how.apply(&corners[0], &corners[1], u)?;
                    let bottom = how.apply(&corners[2], &corners[3], u)?;
                    out.push(how.apply(&top, &bottom, v)?);
                }
            }
        }
        _ => {
            let half = spec.cols / 2 + 1;
            let left = [&corners[0], &corners[1], &corners[3], &corners[4]].map(Clone::clone);
            let right = [&corners[1], &corners[2], &corners[4], &corners[5]].map(Clone::clone);
            let sub = GridSpec {
                rows: spec.rows,
                cols: half,
            };
            let l = code_grid(&left, sub, how)?;
            let r = code_grid(&right, sub, how)?;
            for i in 0..spec.rows {
                out.extend_from_slice(&l[i * half..(i + 1) * half]);
                out.extend_from_slice(&r[i * half + 1..(i + 1) * half]);
            }
        }
    }
    Ok(out)
}

/// Decoded interpolation grid.
#[derive(Clone, Debug)]
pub struct ImageGrid {
    pub spec: GridSpec,
    pub codes: Vec<LatentCode>,
    pub images: ImageBatch,
}

/// Encodes the corner images and decodes every grid cell.
pub fn interpolation_grid<M: ImageEncoder + CodeDecoder>(
    model: &M,
    corners: &ImageBatch,
    spec: GridSpec,
    how: Interpolation,
) -> Result<ImageGrid> {
    spec.validate(corners.len())?;
    let codes = code_grid(&model.encode(corners)?, spec, how)?;
    let images = model.decode(&codes)?;
    Ok(ImageGrid { spec, codes, images })
}

/// A latent direction from the difference of two sets' mean codes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeVector {
    pub name: String,
    pub direction: Vec<f64>,
    /// `(|A|, |B|)`.
    pub source_counts: (usize, usize),
    /// Hash of the configuration of the model the codes came from.
    #[serde(default)]
    pub config_hash: String,
}

fn mean_code(codes: &[LatentCode]) -> Vec<f64> {
    let d = codes[0].dim();
    let mut m = vec![0.0; d];
    for c in codes {
        for (a, v) in m.iter_mut().zip(c.values()) {
            *a += v;
        }
    }
    let inv = 1.0 / codes.len() as f64;
    m.iter_mut().for_each(|v| *v *= inv);
    m
}

/// `mean(A) - mean(B)` over already-encoded sets.
pub fn attribute_from_codes(name: &str, set_a: &[LatentCode], set_b: &[LatentCode]) -> Result<AttributeVector> {
    if set_a.is_empty() || set_b.is_empty() {
        return Err(Error::Argument("attribute sets must be non-empty".into()));
    }
    let d = set_a[0].dim();
    if set_a.iter().chain(set_b).any(|c| c.dim() != d) {
        return Err(Error::Shape("attribute sets mix code dimensions".into()));
    }
    let (ma, mb) = (mean_code(set_a), mean_code(set_b));
    let direction: Vec<f64> = ma.iter().zip(&mb).map(|(a, b)| a - b).collect();
    if direction.iter().any(|v| !v.is_finite()) {
        return Err(Error::Argument("attribute direction is not finite".into()));
    }
    Ok(AttributeVector {
        name: name.to_string(),
        direction,
        source_counts: (set_a.len(), set_b.len()),
        config_hash: String::new(),
    })
}

/// Encodes both image sets and takes the difference of their mean codes.
pub fn extract_attribute<E: ImageEncoder>(
    encoder: &E,
    name: &str,
    set_a: &ImageBatch,
    set_b: &ImageBatch,
) -> Result<AttributeVector> {
    if set_a.is_empty() || set_b.is_empty() {
        return Err(Error::Argument("attribute sets must be non-empty".into()));
    }
    attribute_from_codes(name, &encoder.encode(set_a)?, &encoder.encode(set_b)?)
}

/// `normalize(code + lambda * direction)`; `lambda == 0` returns the code itself.
pub fn edit_code(code: &LatentCode, direction: &[f64], lambda: f64) -> Result<LatentCode> {
    if !lambda.is_finite() {
        return Err(Error::Argument(format!("lambda {lambda} is not finite")));
    }
    if direction.len() != code.dim() {
        return Err(Error::Shape(format!(
            "direction has {} entries, code has {}",
            direction.len(),
            code.dim()
        )));
    }
    if lambda == 0.0 {
        return Ok(code.clone());
    }
    LatentCode::normalized(
        code.values()
            .iter()
            .zip(direction)
            .map(|(z, d)| z + lambda * d)
            .collect(),
    )
    .map_err(|_| Error::Argument("edited code is numerically zero".into()))
}

/// Edits every image of `batch` along `attr` with intensity `lambda`.
pub fn apply_attribute<M: ImageEncoder + CodeDecoder>(
    model: &M,
    batch: &ImageBatch,
    attr: &AttributeVector,
    lambda: f64,
) -> Result<ImageBatch> {
    let codes = model
        .encode(batch)?
        .iter()
        .map(|c| edit_code(c, &attr.direction, lambda))
        .collect::<Result<Vec<_>>>()?;
    model.decode(&codes)
}

/// One image edited at each `lambda`, frames in the given order.
pub fn lambda_sweep<M: ImageEncoder + CodeDecoder>(
    model: &M,
    image: &ImageBatch,
    attr: &AttributeVector,
    lambdas: &[f64],
) -> Result<ImageBatch> {
    if image.len() != 1 {
        return Err(Error::Argument("a sweep edits exactly one image".into()));
    }
    let code = model.encode(image)?.remove(0);
    let codes = lambdas
        .iter()
        .map(|&l| edit_code(&code, &attr.direction, l))
        .collect::<Result<Vec<_>>>()?;
    model.decode(&codes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(d: usize, i: usize) -> LatentCode {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        LatentCode::new(v)
    }

    #[test]
    fn slerp_endpoints_and_midpoint() {
        let (a, b) = (e(3, 0), e(3, 1));
        assert_eq!(slerp(&a, &b, 0.0).unwrap(), a);
        assert_eq!(slerp(&a, &b, 1.0).unwrap(), b);
        let m = slerp(&a, &b, 0.5).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((m.values()[0] - h).abs() < 1e-12 && (m.values()[1] - h).abs() < 1e-12);
    }

    #[test]
    fn slerp_rejects_antipodes_and_bad_t() {
        let a = e(2, 0);
        let b = LatentCode::new(vec![-1.0, 0.0]);
        assert!(slerp(&a, &b, 0.5).is_err());
        assert!(slerp(&a, &e(2, 1), 1.5).is_err());
        assert!(slerp(&a, &LatentCode::new(vec![2.0, 0.0]), 0.5).is_err());
    }

    #[test]
    fn slerp_parallel_falls_back() {
        let a = e(2, 0);
        assert_eq!(slerp(&a, &a, 0.3).unwrap(), a);
    }

    #[test]
    fn grid_corners_are_exact() {
        let c = [e(4, 0), e(4, 1), e(4, 2), e(4, 3)];
        let g = code_grid(&c, GridSpec { rows: 3, cols: 5 }, Interpolation::Slerp).unwrap();
        assert_eq!(g[0], c[0]);
        assert_eq!(g[4], c[1]);
        assert_eq!(g[10], c[2]);
        assert_eq!(g[14], c[3]);
    }

    #[test]
    fn six_corner_grid_shares_middle_column() {
        let c: Vec<LatentCode> = (0..6).map(|i| e(6, i)).collect();
        let g = code_grid(&c, GridSpec { rows: 2, cols: 5 }, Interpolation::Slerp).unwrap();
        assert_eq!(g.len(), 10);
        assert_eq!(g[0], c[0]);
        assert_eq!(g[2], c[1]);
        assert_eq!(g[4], c[2]);
        assert_eq!(g[5], c[3]);
        assert_eq!(g[7], c[4]);
        assert_eq!(g[9], c[5]);
    }

    #[test]
    fn mismatched_corner_counts_fail() {
        let c = [e(4, 0), e(4, 1), e(4, 2)];
        assert!(code_grid(&c, GridSpec::strip(4), Interpolation::Slerp).is_err());
        let c = [e(4, 0), e(4, 1)];
        assert!(code_grid(&c, GridSpec { rows: 2, cols: 2 }, Interpolation::Slerp).is_err());
    }

    #[test]
    fn attribute_of_identical_sets_is_zero() {
        let a = [e(3, 0), e(3, 1)];
        let attr = attribute_from_codes("x", &a, &a).unwrap();
        assert!(attr.direction.iter().all(|&v| v == 0.0));
        assert!(attribute_from_codes("x", &a, &[]).is_err());
    }

    #[test]
    fn edit_at_zero_is_identity_and_zero_result_fails() {
        let z = e(2, 0);
        assert_eq!(edit_code(&z, &[0.3, 0.4], 0.0).unwrap(), z);
        assert!(edit_code(&z, &[-1.0, 0.0], 1.0).is_err());
        let moved = edit_code(&z, &[0.0, 1.0], 1.0).unwrap();
        assert!((moved.norm() - 1.0).abs() < 1e-12);
    }
}
