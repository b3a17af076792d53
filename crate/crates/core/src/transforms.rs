//! Differentiable image transforms for the transformation-robust scenario.
//!
//! Images are planar `channels x side x side` vectors. Geometric transforms
//! are linear maps represented as sparse sampling matrices, so their
//! vector-Jacobian product is the transpose. Pointwise transforms carry
//! their elementwise derivative.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pixel floor applied before exponentiation in the gamma transform.
pub const GAMMA_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    Identity,
    Hflip,
    Vflip,
    CenterCrop,
    Brightness,
    Rotation,
    Gamma,
}

impl TransformKind {
    pub const ALL: [TransformKind; 7] = [
        TransformKind::Identity,
        TransformKind::Hflip,
        TransformKind::Vflip,
        TransformKind::CenterCrop,
        TransformKind::Brightness,
        TransformKind::Rotation,
        TransformKind::Gamma,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TransformKind::Identity => "identity",
            TransformKind::Hflip => "hflip",
            TransformKind::Vflip => "vflip",
            TransformKind::CenterCrop => "center_crop",
            TransformKind::Brightness => "brightness",
            TransformKind::Rotation => "rotation",
            TransformKind::Gamma => "gamma",
        }
    }

    /// Parameter used in deterministic mode (flip probability for flips).
    pub fn deterministic_param(self) -> f64 {
        match self {
            TransformKind::Identity => 0.0,
            TransformKind::Hflip | TransformKind::Vflip => 1.0,
            TransformKind::CenterCrop => 0.6,
            TransformKind::Brightness => 1.3,
            TransformKind::Rotation => 10.0,
            TransformKind::Gamma => 1.3,
        }
    }

    /// Range sampled in stochastic mode (flip probability for flips).
    pub fn stochastic_range(self) -> Sampling {
        match self {
            TransformKind::Identity => Sampling::Fixed(0.0),
            TransformKind::Hflip | TransformKind::Vflip => Sampling::Flip(0.5),
            TransformKind::CenterCrop => Sampling::Uniform(0.6, 1.0),
            TransformKind::Brightness => Sampling::Uniform(1.0, 1.3),
            TransformKind::Rotation => Sampling::Uniform(-10.0, 10.0),
            TransformKind::Gamma => Sampling::Uniform(0.7, 1.3),
        }
    }

    /// Admissible parameter interval.
    fn admissible(self) -> (f64, f64) {
        match self {
            TransformKind::Identity => (0.0, 0.0),
            TransformKind::Hflip | TransformKind::Vflip => (0.0, 1.0),
            TransformKind::CenterCrop => (0.6, 1.0),
            TransformKind::Brightness => (1.0, 1.3),
            TransformKind::Rotation => (-10.0, 10.0),
            TransformKind::Gamma => (0.7, 1.3),
        }
    }
}

impl std::str::FromStr for TransformKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TransformKind::ALL
            .into_iter()
            .find(|k| k.name() == s || (s.len() == 1 && k.name().starts_with(s)))
            .ok_or_else(|| Error::invalid("transform", format!("unknown transform `{s}`")))
    }
}

/// How a transform parameter is chosen for each evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    Fixed(f64),
    Uniform(f64, f64),
    /// Apply the flip with this probability.
    Flip(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    pub kind: TransformKind,
    pub sampling: Sampling,
}

impl TransformSpec {
    pub fn deterministic(kind: TransformKind) -> Self {
        let sampling = match kind {
            TransformKind::Hflip | TransformKind::Vflip => Sampling::Flip(1.0),
            _ => Sampling::Fixed(kind.deterministic_param()),
        };
        Self { kind, sampling }
    }

    pub fn stochastic(kind: TransformKind) -> Self {
        Self {
            kind,
            sampling: kind.stochastic_range(),
        }
    }

    /// A spec with explicit sampling; parameters must stay inside the
    /// admissible range of the family.
    pub fn custom(kind: TransformKind, sampling: Sampling) -> Result<Self> {
        let spec = Self { kind, sampling };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.kind.admissible();
        let inside = |v: f64| v.is_finite() && v >= lo - 1e-12 && v <= hi + 1e-12;
        let flip = matches!(self.kind, TransformKind::Hflip | TransformKind::Vflip);
        let ok = match self.sampling {
            Sampling::Fixed(v) => !flip && inside(v),
            Sampling::Uniform(a, b) => !flip && inside(a) && inside(b) && a <= b,
            Sampling::Flip(p) => flip && inside(p),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(
                "transform",
                format!(
                    "{:?} is outside the admissible range of {}",
                    self.sampling,
                    self.kind.name()
                ),
            ))
        }
    }

    pub fn is_stochastic(&self) -> bool {
        match self.sampling {
            Sampling::Fixed(_) => false,
            Sampling::Uniform(a, b) => a != b,
            Sampling::Flip(p) => p > 0.0 && p < 1.0,
        }
    }

    /// Draws a concrete transform.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Transform {
        let param = match self.sampling {
            Sampling::Fixed(v) => v,
            Sampling::Uniform(a, b) if a == b => a,
            Sampling::Uniform(a, b) => rng.random_range(a..b),
            Sampling::Flip(p) => {
                let apply = if p >= 1.0 {
                    true
                } else if p <= 0.0 {
                    false
                } else {
                    rng.random_bool(p)
                };
                if apply {
                    1.0
                } else {
                    0.0
                }
            }
        };
        Transform::with_param(self.kind, param)
    }

    /// The fixed member of the family used to judge success.
    pub fn center(&self) -> Transform {
        Transform::with_param(self.kind, self.kind.deterministic_param())
    }
}

/// A transform with its parameter drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Transform {
    Identity,
    Hflip,
    Vflip,
    CenterCrop { scale: f64 },
    Brightness { factor: f64 },
    Rotation { degrees: f64 },
    Gamma { gamma: f64, floor: f64 },
}

impl Transform {
    fn with_param(kind: TransformKind, param: f64) -> Self {
        match kind {
            TransformKind::Identity => Transform::Identity,
            TransformKind::Hflip if param > 0.5 => Transform::Hflip,
            TransformKind::Vflip if param > 0.5 => Transform::Vflip,
            TransformKind::Hflip | TransformKind::Vflip => Transform::Identity,
            TransformKind::CenterCrop => Transform::CenterCrop { scale: param },
            TransformKind::Brightness => Transform::Brightness { factor: param },
            TransformKind::Rotation => Transform::Rotation { degrees: param },
            TransformKind::Gamma => Transform::Gamma {
                gamma: param,
                floor: GAMMA_FLOOR,
            },
        }
    }
}

/// Shape of a planar image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub side: usize,
    pub channels: usize,
}

impl ImageShape {
    pub fn square(side: usize) -> Self {
        Self { side, channels: 1 }
    }

    pub fn len(&self) -> usize {
        self.side * self.side * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Sparse linear map acting on one channel plane: output pixel `r` is
/// `sum_k w_k * input[c_k]` over `taps[r]`.
#[derive(Debug, Clone)]
struct Sampler {
    taps: Vec<Vec<(usize, f64)>>,
}

impl Sampler {
    fn from_source(side: usize, source: impl Fn(f64, f64) -> (f64, f64)) -> Self {
        let mut taps = Vec::with_capacity(side * side);
        for r in 0..side {
            for c in 0..side {
                let (sy, sx) = source(r as f64, c as f64);
                taps.push(bilinear_taps(side, sy, sx));
            }
        }
        Self { taps }
    }

    fn permutation(side: usize, map: impl Fn(usize, usize) -> (usize, usize)) -> Self {
        let mut taps = Vec::with_capacity(side * side);
        for r in 0..side {
            for c in 0..side {
                let (sr, sc) = map(r, c);
                taps.push(vec![(sr * side + sc, 1.0)]);
            }
        }
        Self { taps }
    }

    fn apply(&self, plane: &[f64], out: &mut [f64]) {
        for (o, taps) in out.iter_mut().zip(&self.taps) {
            *o = taps.iter().map(|&(i, w)| w * plane[i]).sum();
        }
    }

    fn transpose_apply(&self, upstream: &[f64], out: &mut [f64]) {
        for (u, taps) in upstream.iter().zip(&self.taps) {
            for &(i, w) in taps {
                out[i] += w * u;
            }
        }
    }
}

/// Bilinear interpolation weights at `(sy, sx)` with zero padding.
fn bilinear_taps(side: usize, sy: f64, sx: f64) -> Vec<(usize, f64)> {
    let y0 = sy.floor();
    let x0 = sx.floor();
    let fy = sy - y0;
    let fx = sx - x0;
    let mut taps = Vec::with_capacity(4);
    for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
        for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
            let w = wy * wx;
            let (yy, xx) = (y0 + dy, x0 + dx);
            if w == 0.0 || yy < 0.0 || xx < 0.0 || yy >= side as f64 || xx >= side as f64 {
                continue;
            }
            taps.push((yy as usize * side + xx as usize, w));
        }
    }
    taps
}

fn geometric_sampler(t: &Transform, side: usize) -> Option<Sampler> {
    let n = side as f64;
    let center = (n - 1.0) / 2.0;
    match *t {
        Transform::Hflip => Some(Sampler::permutation(side, |r, c| (r, side - 1 - c))),
        Transform::Vflip => Some(Sampler::permutation(side, |r, c| (side - 1 - r, c))),
        Transform::CenterCrop { scale } => {
            let offset = n * (1.0 - scale) / 2.0;
            Some(Sampler::from_source(side, move |r, c| {
                (offset + (r + 0.5) * scale - 0.5, offset + (c + 0.5) * scale - 0.5)
            }))
        }
        Transform::Rotation { degrees } => {
            let (sin, cos) = degrees.to_radians().sin_cos();
            // Output pixel p samples the input at R(-theta) (p - center) + center.
            Some(Sampler::from_source(side, move |r, c| {
                let (y, x) = (r - center, c - center);
                (center + cos * y - sin * x, center + sin * y + cos * x)
            }))
        }
        _ => None,
    }
}

/// A transform applied at a specific image, ready to pull gradients back.
#[derive(Debug, Clone)]
pub struct Applied {
    pub output: Vec<f64>,
    shape: ImageShape,
    kind: AppliedKind,
}

#[derive(Debug, Clone)]
enum AppliedKind {
    Identity,
    Linear(Sampler),
    /// Elementwise derivative of a pointwise transform.
    Pointwise(Vec<f64>),
}

impl Applied {
    /// Vector-Jacobian product: maps a gradient on the output to one on
    /// the input.
    pub fn vjp(&self, upstream: &[f64]) -> Vec<f64> {
        match &self.kind {
            AppliedKind::Identity => upstream.to_vec(),
            AppliedKind::Pointwise(d) => upstream.iter().zip(d).map(|(u, d)| u * d).collect(),
            AppliedKind::Linear(sampler) => {
                let plane = self.shape.side * self.shape.side;
                let mut out = vec![0.0; upstream.len()];
                for (up, o) in upstream.chunks(plane).zip(out.chunks_mut(plane)) {
                    sampler.transpose_apply(up, o);
                }
                out
            }
        }
    }
}

/// Applies `t` to `image` and returns the output with its vjp.
pub fn apply_transform(t: &Transform, image: &[f64], shape: ImageShape) -> Result<Applied> {
    if image.len() != shape.len() {
        return Err(Error::DimensionMismatch {
            what: "image",
            expected: shape.len(),
            actual: image.len(),
        });
    }
    if let Some(index) = image.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    let (output, kind) = match *t {
        Transform::Identity => (image.to_vec(), AppliedKind::Identity),
        Transform::Brightness { factor } => {
            let mut out = Vec::with_capacity(image.len());
            let mut deriv = Vec::with_capacity(image.len());
            for &p in image {
                let v = factor * p;
                if v > 0.0 && v < 1.0 {
                    out.push(v);
                    deriv.push(factor);
                } else {
                    out.push(v.clamp(0.0, 1.0));
                    deriv.push(0.0);
                }
            }
            (out, AppliedKind::Pointwise(deriv))
        }
        Transform::Gamma { gamma, floor } => {
            let mut out = Vec::with_capacity(image.len());
            let mut deriv = Vec::with_capacity(image.len());
            for &p in image {
                let q = p.clamp(floor, 1.0);
                out.push(q.powf(gamma));
                let inside = p >= floor && p <= 1.0;
                deriv.push(if inside { gamma * q.powf(gamma - 1.0) } else { 0.0 });
            }
            (out, AppliedKind::Pointwise(deriv))
        }
        _ => {
            let sampler = geometric_sampler(t, shape.side).expect("geometric transform");
            let plane = shape.side * shape.side;
            let mut out = vec![0.0; image.len()];
            for (src, dst) in image.chunks(plane).zip(out.chunks_mut(plane)) {
                sampler.apply(src, dst);
            }
            (out, AppliedKind::Linear(sampler))
        }
    };
    Ok(Applied { output, shape, kind })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn smooth_image(side: usize) -> Vec<f64> {
        let n = side as f64;
        (0..side * side)
            .map(|i| {
                let (r, c) = ((i / side) as f64, (i % side) as f64);
                0.5 + 0.25 * (r / n) + 0.2 * (c / n)
            })
            .collect()
    }

    #[test]
    fn vflip_reverses_rows() {
        let out = apply_transform(&Transform::Vflip, &[1.0, 2.0, 3.0, 4.0], ImageShape::square(2)).unwrap();
        assert_eq!(out.output, vec![3.0, 4.0, 1.0, 2.0]);
    }

    #[test]
    fn hflip_is_an_involution() {
        let shape = ImageShape::square(5);
        let img: Vec<f64> = (0..25).map(|i| i as f64 * 0.037).collect();
        let once = apply_transform(&Transform::Hflip, &img, shape).unwrap().output;
        let twice = apply_transform(&Transform::Hflip, &once, shape).unwrap().output;
        assert_eq!(twice, img);
    }

    #[test]
    fn brightness_saturates() {
        let out = apply_transform(&Transform::Brightness { factor: 1.3 }, &[0.9], ImageShape::square(1)).unwrap();
        assert_eq!(out.output, vec![1.0]);
        assert_eq!(out.vjp(&[1.0]), vec![0.0]);
    }

    #[test]
    fn unit_gamma_is_identity_on_unit_interval() {
        let img = vec![0.0, 0.25, 0.5, 1.0];
        let t = Transform::Gamma { gamma: 1.0, floor: 0.0 };
        let out = apply_transform(&t, &img, ImageShape::square(2)).unwrap();
        assert_eq!(out.output, img);
    }

    #[test]
    fn rotation_round_trip_is_close_in_the_interior() {
        let side = 16;
        let shape = ImageShape::square(side);
        let img = smooth_image(side);
        let fwd = apply_transform(&Transform::Rotation { degrees: 10.0 }, &img, shape).unwrap();
        let back = apply_transform(&Transform::Rotation { degrees: -10.0 }, &fwd.output, shape).unwrap();
        let mut worst: f64 = 0.0;
        for r in 3..side - 3 {
            for c in 3..side - 3 {
                let i = r * side + c;
                worst = worst.max((back.output[i] - img[i]).abs());
            }
        }
        assert!(worst <= 0.1, "max interior error {worst}");
    }

    #[test]
    fn non_finite_pixels_are_rejected() {
        let err = apply_transform(&Transform::Identity, &[0.0, f64::NAN, 0.0, 0.0], ImageShape::square(2));
        assert!(matches!(err, Err(Error::NonFinite { index: 1 })));
    }

    #[test]
    fn specs_are_range_checked() {
        assert!(TransformSpec::custom(TransformKind::CenterCrop, Sampling::Fixed(0.5)).is_err());
        assert!(TransformSpec::custom(TransformKind::Rotation, Sampling::Uniform(-30.0, 10.0)).is_err());
        assert!(TransformSpec::custom(TransformKind::Gamma, Sampling::Flip(0.5)).is_err());
        assert!(TransformSpec::custom(TransformKind::Brightness, Sampling::Uniform(1.0, 1.2)).is_ok());
        for kind in TransformKind::ALL {
            TransformSpec::deterministic(kind).validate().unwrap();
            TransformSpec::stochastic(kind).validate().unwrap();
        }
    }

    #[test]
    fn stochastic_draws_stay_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let spec = TransformSpec::stochastic(TransformKind::Rotation);
        for _ in 0..200 {
            match spec.draw(&mut rng) {
                Transform::Rotation { degrees } => assert!((-10.0..=10.0).contains(&degrees)),
                other => panic!("unexpected {other:?}"),
            }
        }
    }
}
