//! Corruption families with fixed severity tables (levels 1-5, level 0 is the
//! identity), spanning noise, blur, weather and digital categories.
//!
//! | family         | parameter            | 1    | 2    | 3    | 4    | 5    |
//! |----------------|----------------------|------|------|------|------|------|
//! | gaussian_noise | sigma                | 0.06 | 0.09 | 0.12 | 0.16 | 0.20 |
//! | shot_noise     | photons per unit     | 60   | 25   | 12   | 6    | 3    |
//! | impulse_noise  | corrupted fraction   | 0.03 | 0.06 | 0.10 | 0.17 | 0.27 |
//! | defocus_blur   | disk radius (px)     | 1.0  | 1.5  | 2.0  | 2.5  | 3.0  |
//! | motion_blur    | kernel length (px)   | 3    | 5    | 7    | 9    | 11   |
//! | fog            | fog weight           | 0.3  | 0.5  | 0.8  | 1.2  | 1.6  |
//! | brightness     | additive shift       | 0.10 | 0.20 | 0.30 | 0.40 | 0.50 |
//! | contrast       | contrast factor      | 0.40 | 0.30 | 0.20 | 0.10 | 0.05 |
//! | pixelate       | block size (px)      | 2    | 3    | 4    | 5    | 6    |
//! | jpeg_like      | block blend / levels | .2/24| .4/16| .6/10| .8/6 | 1/4  |
//!
//! `jpeg_like` has no DCT: it blends each pixel towards its 4x4 block mean and
//! quantizes intensities to a severity-dependent number of levels.
//!
//! Pixelation is idempotent. The other families compound when a level is
//! applied twice (contrast squares its factor, noise adds variance, blur
//! widens, brightness doubles its shift before clipping). Every output is
//! clipped to `[0, 1]`.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

use crate::error::{Error, Result};
use crate::seed::{derive_seed, Stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Family {
    GaussianNoise,
    ShotNoise,
    ImpulseNoise,
    DefocusBlur,
    MotionBlur,
    Fog,
    Brightness,
    Contrast,
    Pixelate,
    JpegLike,
}

impl Family {
    pub const ALL: [Family; 10] = [
        Family::GaussianNoise,
        Family::ShotNoise,
        Family::ImpulseNoise,
        Family::DefocusBlur,
        Family::MotionBlur,
        Family::Fog,
        Family::Brightness,
        Family::Contrast,
        Family::Pixelate,
        Family::JpegLike,
    ];

    pub const NOISE: [Family; 3] = [Family::GaussianNoise, Family::ShotNoise, Family::ImpulseNoise];

    pub fn name(self) -> &'static str {
        match self {
            Family::GaussianNoise => "gaussian_noise",
            Family::ShotNoise => "shot_noise",
            Family::ImpulseNoise => "impulse_noise",
            Family::DefocusBlur => "defocus_blur",
            Family::MotionBlur => "motion_blur",
            Family::Fog => "fog",
            Family::Brightness => "brightness",
            Family::Contrast => "contrast",
            Family::Pixelate => "pixelate",
            Family::JpegLike => "jpeg_like",
        }
    }

    pub fn index(self) -> usize {
        Family::ALL.iter().position(|&f| f == self).expect("listed")
    }

    pub fn is_noise(self) -> bool {
        Family::NOISE.contains(&self)
    }

    /// Severity parameter from the table above; `severity` in `1..=5`.
    pub fn parameter(self, severity: u8) -> f64 {
        let i = usize::from(severity.clamp(1, 5)) - 1;
        let table: [f64; 5] = match self {
            Family::GaussianNoise => [0.06, 0.09, 0.12, 0.16, 0.20],
            Family::ShotNoise => [60.0, 25.0, 12.0, 6.0, 3.0],
            Family::ImpulseNoise => [0.03, 0.06, 0.10, 0.17, 0.27],
            Family::DefocusBlur => [1.0, 1.5, 2.0, 2.5, 3.0],
            Family::MotionBlur => [3.0, 5.0, 7.0, 9.0, 11.0],
            Family::Fog => [0.3, 0.5, 0.8, 1.2, 1.6],
            Family::Brightness => [0.10, 0.20, 0.30, 0.40, 0.50],
            Family::Contrast => [0.40, 0.30, 0.20, 0.10, 0.05],
            Family::Pixelate => [2.0, 3.0, 4.0, 5.0, 6.0],
            Family::JpegLike => [0.2, 0.4, 0.6, 0.8, 1.0],
        };
        table[i]
    }

    fn jpeg_levels(severity: u8) -> f64 {
        [24.0, 16.0, 10.0, 6.0, 4.0][usize::from(severity.clamp(1, 5)) - 1]
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::UnknownFamily(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CorruptionSpec {
    pub family: Family,
    pub severity: u8,
    pub seed: u64,
}

/// Applies `spec` to every image of a `[batch, c, h, w]` tensor with values
/// in `[0, 1]`. Image `i` draws from its own seeded stream.
pub fn corrupt(images: &Tensor, spec: &CorruptionSpec) -> Result<Tensor> {
    if spec.severity > 5 {
        return Err(Error::OutOfRange(format!("severity {}", spec.severity)));
    }
    let s = images.shape();
    if s.len() != 4 {
        return Err(Error::Geometry {
            expected: vec![0, 0, 0, 0],
            found: s.to_vec(),
        });
    }
    if let Some(v) = images.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::OutOfRange(format!("pixel value {v} outside [0, 1]")));
    }
    if spec.severity == 0 {
        return Ok(images.clone());
    }
    let (c, h, w) = (s[1], s[2], s[3]);
    let mut out = images.clone();
    let p = spec.family.parameter(spec.severity);
    for (i, img) in out.data_mut().chunks_exact_mut(c * h * w).enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, Stream::Corruption, i as u64));
        let img_shape = Img { c, h, w };
        match spec.family {
            Family::GaussianNoise => {
                let normal = Normal::new(0.0, p).expect("positive sigma");
                img.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
            }
            Family::ShotNoise => {
                for v in img.iter_mut() {
                    let mean = *v * p;
                    *v = if mean > 0.0 {
                        Poisson::new(mean).expect("positive mean").sample(&mut rng) / p
                    } else {
                        0.0
                    };
                }
            }
            Family::ImpulseNoise => {
                for v in img.iter_mut() {
                    if rng.random::<f64>() < p {
                        *v = if rng.random::<bool>() { 1.0 } else { 0.0 };
                    }
                }
            }
            Family::DefocusBlur => {
                let r = p;
                let reach = r.floor() as isize;
                let taps: Vec<(isize, isize)> = (-reach..=reach)
                    .flat_map(|dy| (-reach..=reach).map(move |dx| (dy, dx)))
                    .filter(|&(dy, dx)| ((dy * dy + dx * dx) as f64) <= r * r)
                    .collect();
                img_shape.filter(img, &taps);
            }
            Family::MotionBlur => {
                let angle = rng.random_range(0.0..std::f64::consts::PI);
                let (sa, ca) = angle.sin_cos();
                let half = (p - 1.0) / 2.0;
                let taps: Vec<(isize, isize)> = (0..p as usize)
                    .map(|k| {
                        let t = k as f64 - half;
                        ((t * sa).round() as isize, (t * ca).round() as isize)
                    })
                    .collect();
                img_shape.filter(img, &taps);
            }
            Family::Fog => {
                let field = fog_field(h, w, &mut rng);
                for ch in 0..c {
                    for (v, f) in img[ch * h * w..][..h * w].iter_mut().zip(&field) {
                        *v = (*v + p * f) / (1.0 + p);
                    }
                }
            }
            Family::Brightness => img.iter_mut().for_each(|v| *v += p),
            Family::Contrast => {
                let mean = img.iter().sum::<f64>() / img.len() as f64;
                img.iter_mut().for_each(|v| *v = mean + (*v - mean) * p);
            }
            Family::Pixelate => img_shape.block_mean(img, p as usize, 1.0),
            Family::JpegLike => {
                img_shape.block_mean(img, 4, p);
                let levels = Family::jpeg_levels(spec.severity) - 1.0;
                img.iter_mut()
                    .for_each(|v| *v = (v.clamp(0.0, 1.0) * levels).round() / levels);
            }
        }
        img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }
    Ok(out)
}

#[derive(Clone, Copy)]
struct Img {
    c: usize,
    h: usize,
    w: usize,
}

impl Img {
    /// Mean over the given offsets with clamp-to-edge borders.
    fn filter(self, img: &mut [f64], taps: &[(isize, isize)]) {
        let k = 1.0 / taps.len() as f64;
        let (h, w) = (self.h as isize, self.w as isize);
        for ch in 0..self.c {
            let plane = &mut img[ch * self.h * self.w..][..self.h * self.w];
            let src = plane.to_vec();
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for &(dy, dx) in taps {
                        let yy = (y + dy).clamp(0, h - 1) as usize;
                        let xx = (x + dx).clamp(0, w - 1) as usize;
                        acc += src[yy * self.w + xx];
                    }
                    plane[y as usize * self.w + x as usize] = acc * k;
                }
            }
        }
    }

    /// Blends every pixel towards the mean of its `block x block` cell.
    fn block_mean(self, img: &mut [f64], block: usize, blend: f64) {
        for ch in 0..self.c {
            let plane = &mut img[ch * self.h * self.w..][..self.h * self.w];
            for by in (0..self.h).step_by(block) {
                for bx in (0..self.w).step_by(block) {
                    let (ey, ex) = ((by + block).min(self.h), (bx + block).min(self.w));
                    let mut sum = 0.0;
                    for y in by..ey {
                        sum += plane[y * self.w + bx..y * self.w + ex].iter().sum::<f64>();
                    }
                    let mean = sum / ((ey - by) * (ex - bx)) as f64;
                    for y in by..ey {
                        for v in &mut plane[y * self.w + bx..y * self.w + ex] {
                            *v += blend * (mean - *v);
                        }
                    }
                }
            }
        }
    }
}

/// Smooth random field in `[0, 1]`: two octaves of bilinearly upsampled
/// uniform noise.
fn fog_field(h: usize, w: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut field = vec![0.0; h * w];
    for (cells, amp) in [(4usize, 1.0), (8usize, 0.5)] {
        let grid: Vec<f64> = (0..(cells + 1) * (cells + 1)).map(|_| rng.random::<f64>()).collect();
        for y in 0..h {
            let gy = y as f64 * cells as f64 / (h - 1).max(1) as f64;
            let (y0, ty) = ((gy.floor() as usize).min(cells - 1), gy - (gy.floor()).min((cells - 1) as f64));
            for x in 0..w {
                let gx = x as f64 * cells as f64 / (w - 1).max(1) as f64;
                let (x0, tx) = ((gx.floor() as usize).min(cells - 1), gx - (gx.floor()).min((cells - 1) as f64));
                let at = |yy: usize, xx: usize| grid[yy * (cells + 1) + xx];
                let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
                let bot = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
                field[y * w + x] += amp * (top * (1.0 - ty) + bot * ty);
            }
        }
    }
    let (lo, hi) = field
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = (hi - lo).max(1e-12);
    field.iter_mut().for_each(|v| *v = (*v - lo) / span);
    field
}
