//! Label-preserving geometric transforms and their text descriptors.
//!
//! Descriptors: `identity`, `hflip`, `vflip`, `rot:<degrees>` (counter-
//! clockwise) and `affine:<a>;<b>;<c>;<d>;<tx>;<ty>`. The affine linear part
//! acts about the image center and the translation is a fraction of the
//! image width and height.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};

use super::image::{round_u8, ImageBuffer};

/// Affine maps with `|det| <` this are rejected.
pub const DEGENERATE_DET: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub enum Transform {
    Identity,
    Rotate(f64),
    HFlip,
    VFlip,
    /// `[a, b, c, d, tx, ty]` for the matrix `[[a, b, tx], [c, d, ty]]`.
    Affine([f64; 6]),
}

impl fmt::Display for Transform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Transform::Identity => f.write_str("identity"),
            Transform::HFlip => f.write_str("hflip"),
            Transform::VFlip => f.write_str("vflip"),
            Transform::Rotate(deg) => write!(f, "rot:{deg}"),
            Transform::Affine(m) => write!(f, "affine:{};{};{};{};{};{}", m[0], m[1], m[2], m[3], m[4], m[5]),
        }
    }
}

impl FromStr for Transform {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Transform(format!("unrecognized descriptor `{s}`"));
        let t = match s.split_once(':') {
            None => match s {
                "identity" => Transform::Identity,
                "hflip" => Transform::HFlip,
                "vflip" => Transform::VFlip,
                _ => return Err(bad()),
            },
            Some(("rot", deg)) => Transform::Rotate(deg.parse().map_err(|_| bad())?),
            Some(("affine", rest)) => {
                let v: Vec<f64> = rest
                    .split(';')
                    .map(str::parse)
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad())?;
                Transform::Affine(v.try_into().map_err(|_| bad())?)
            }
            _ => return Err(bad()),
        };
        t.validate()?;
        Ok(t)
    }
}

impl Transform {
    pub fn validate(&self) -> Result<()> {
        match self {
            Transform::Rotate(d) if !d.is_finite() => Err(Error::Transform(format!("rotation angle {d} is not finite"))),
            Transform::Affine(m) => {
                if m.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Transform(format!("affine matrix {m:?} has non-finite entries")));
                }
                let det = m[0] * m[3] - m[1] * m[2];
                if det.abs() < DEGENERATE_DET {
                    return Err(Error::Transform(format!("degenerate affine matrix, determinant {det}")));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// One draw from the augmentation family: a rotation (half the time a
    /// right-angle multiple, otherwise uniform in ±30°), a horizontal or
    /// vertical flip, or a mild affine map with diagonal entries in
    /// [0.9, 1.1], shears in ±0.1 and translations up to 5% of the side.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        match rng.random_range(0..4u8) {
            0 => {
                if rng.random_bool(0.5) {
                    Transform::Rotate(90.0 * rng.random_range(1..=3u8) as f64)
                } else {
                    Transform::Rotate(rng.random_range(-30.0..30.0))
                }
            }
            1 => Transform::HFlip,
            2 => Transform::VFlip,
            _ => Transform::Affine([
                rng.random_range(0.9..=1.1),
                rng.random_range(-0.1..=0.1),
                rng.random_range(-0.1..=0.1),
                rng.random_range(0.9..=1.1),
                rng.random_range(-0.05..=0.05),
                rng.random_range(-0.05..=0.05),
            ]),
        }
    }
}

fn permute(img: &ImageBuffer, h: usize, w: usize, src: impl Fn(usize, usize) -> (usize, usize)) -> ImageBuffer {
    ImageBuffer::from_fn(h, w, |y, x| {
        let (sy, sx) = src(y, x);
        img.pixel(sy, sx)
    })
}

/// Resamples `img` on its own canvas: output pixel `q` takes the bilinear
/// sample at `inv·(q − center − shift) + center`, clamped to the border.
fn warp(img: &ImageBuffer, inv: [f64; 4], shift: [f64; 2]) -> ImageBuffer {
    let cy = (img.height() as f64 - 1.0) / 2.0;
    let cx = (img.width() as f64 - 1.0) / 2.0;
    ImageBuffer::from_fn(img.height(), img.width(), |y, x| {
        let qx = x as f64 - cx - shift[0];
        let qy = y as f64 - cy - shift[1];
        let sx = inv[0] * qx + inv[1] * qy + cx;
        let sy = inv[2] * qx + inv[3] * qy + cy;
        let v = img.sample(sy, sx);
        [round_u8(v[0]), round_u8(v[1]), round_u8(v[2])]
    })
}

pub fn apply_transform(img: &ImageBuffer, t: &Transform) -> Result<ImageBuffer> {
    t.validate()?;
    let (h, w) = (img.height(), img.width());
    Ok(match t {
        Transform::Identity => img.clone(),
        Transform::HFlip => permute(img, h, w, |y, x| (y, w - 1 - x)),
        Transform::VFlip => permute(img, h, w, |y, x| (h - 1 - y, x)),
        Transform::Rotate(deg) => {
            let turns = deg.rem_euclid(360.0);
            if turns == 0.0 {
                img.clone()
            } else if turns == 180.0 {
                permute(img, h, w, |y, x| (h - 1 - y, w - 1 - x))
            } else if turns == 90.0 && h == w {
                permute(img, h, w, |y, x| (x, w - 1 - y))
            } else if turns == 270.0 && h == w {
                permute(img, h, w, |y, x| (h - 1 - x, y))
            } else {
                let (s, c) = deg.to_radians().sin_cos();
                // counter-clockwise on screen with y pointing down
                warp(img, [c, -s, s, c], [0.0, 0.0])
            }
        }
        Transform::Affine(m) => {
            let det = m[0] * m[3] - m[1] * m[2];
            let inv = [m[3] / det, -m[1] / det, -m[2] / det, m[0] / det];
            warp(img, inv, [m[4] * w as f64, m[5] * h as f64])
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pattern(h: usize, w: usize) -> ImageBuffer {
        ImageBuffer::from_fn(h, w, |y, x| [(y * w + x) as u8, (x * 3) as u8, (y * 11) as u8])
    }

    #[test]
    fn flips_are_involutions() {
        let img = pattern(5, 7);
        for t in [Transform::HFlip, Transform::VFlip] {
            let once = apply_transform(&img, &t).unwrap();
            assert_ne!(once, img);
            assert_eq!(apply_transform(&once, &t).unwrap(), img);
        }
    }

    #[test]
    fn zero_rotation_is_identity() {
        let img = pattern(6, 9);
        assert_eq!(apply_transform(&img, &Transform::Rotate(0.0)).unwrap(), img);
        assert_eq!(apply_transform(&img, &Transform::Rotate(360.0)).unwrap(), img);
        let unit = Transform::Affine([1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        assert_eq!(apply_transform(&img, &unit).unwrap(), img);
    }

    #[test]
    fn quarter_turn_of_two_by_two() {
        // a b      b d
        // c d  ->  a c
        let px = |v: u8| [v, v, v];
        let img = ImageBuffer::from_fn(2, 2, |y, x| px([1, 2, 3, 4][y * 2 + x]));
        let r = apply_transform(&img, &Transform::Rotate(90.0)).unwrap();
        assert_eq!(r.data(), &[2, 2, 2, 4, 4, 4, 1, 1, 1, 3, 3, 3]);
        let back = apply_transform(&r, &Transform::Rotate(-90.0)).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn exact_and_resampled_quarter_turns_agree() {
        let img = pattern(5, 5);
        let exact = apply_transform(&img, &Transform::Rotate(90.0)).unwrap();
        let (s, c) = 90f64.to_radians().sin_cos();
        let resampled = warp(&img, [c, -s, s, c], [0.0, 0.0]);
        assert_eq!(exact, resampled);
        let half = apply_transform(&img, &Transform::Rotate(180.0)).unwrap();
        let twice = apply_transform(&exact, &Transform::Rotate(90.0)).unwrap();
        assert_eq!(half, twice);
    }

    #[test]
    fn degenerate_affine_is_rejected() {
        let img = pattern(3, 3);
        let flat = Transform::Affine([1.0, 2.0, 0.5, 1.0, 0.0, 0.0]);
        assert!(matches!(apply_transform(&img, &flat), Err(Error::Transform(_))));
        assert!("affine:1;2;0.5;1;0;0".parse::<Transform>().is_err());
    }

    #[test]
    fn descriptors_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let t = Transform::sample(&mut rng);
            let back: Transform = t.to_string().parse().unwrap();
            assert_eq!(back, t);
            assert!(!t.to_string().contains(','));
        }
        assert!("spin".parse::<Transform>().is_err());
        assert!("rot:abc".parse::<Transform>().is_err());
    }

    #[test]
    fn translation_shifts_content() {
        let img = ImageBuffer::from_fn(1, 20, |_, x| [(x * 10) as u8; 3]);
        let t = Transform::Affine([1.0, 0.0, 0.0, 1.0, 0.05, 0.0]);
        let out = apply_transform(&img, &t).unwrap();
        // one pixel to the right, left edge replicated
        assert_eq!(out.pixel(0, 5), img.pixel(0, 4));
        assert_eq!(out.pixel(0, 0), img.pixel(0, 0));
    }
}
