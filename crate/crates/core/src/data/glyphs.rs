//! Procedural glyph classes on 3x32x32 images.
//!
//! Each class is a parametric intensity pattern (horizontal and vertical
//! stripes, diamond rings, a bright upper half, rings, checkerboard, plus,
//! blob, X, square frame) rendered with per-sample jitter in position,
//! rotation, phase and colour. Every template is symmetric under a horizontal
//! flip up to phase, so flipping never changes the class.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::classifier::Geometry;
use crate::error::{Error, Result};
use crate::seed::{derive_seed, Stream};
use crate::tensor::Tensor;

pub const GLYPH_GEOMETRY: Geometry = Geometry::new(3, 32, 32);
pub const MAX_CLASSES: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct GlyphDataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub seed: u64,
}

/// Rendering jitter of one sample.
#[derive(Debug, Clone, Copy)]
struct Jitter {
    dx: f64,
    dy: f64,
    angle: f64,
    phase: f64,
    period: f64,
    fg: [f64; 3],
    bg: [f64; 3],
}

impl Jitter {
    const TEMPLATE: Jitter = Jitter {
        dx: 0.0,
        dy: 0.0,
        angle: 0.0,
        phase: 0.0,
        period: 8.0,
        fg: [1.0; 3],
        bg: [0.0; 3],
    };

    fn sample(rng: &mut impl Rng) -> Self {
        let mut fg = [0.0; 3];
        let mut bg = [0.0; 3];
        for c in 0..3 {
            bg[c] = rng.random_range(0.1..0.5);
            fg[c] = bg[c] + rng.random_range(0.15..0.4);
        }
        Self {
            dx: rng.random_range(-3.0..3.0),
            dy: rng.random_range(-3.0..3.0),
            angle: rng.random_range(-10.0..10.0) * PI / 180.0,
            phase: rng.random_range(0.0..2.0 * PI),
            period: rng.random_range(7.0..9.0),
            fg,
            bg,
        }
    }
}

/// Soft square wave in `[0, 1]`.
fn wave(t: f64, period: f64, phase: f64) -> f64 {
    (0.5 + 2.0 * (2.0 * PI * t / period + phase).sin()).clamp(0.0, 1.0)
}

fn band(d: f64, half_width: f64) -> f64 {
    (half_width + 0.5 - d.abs()).clamp(0.0, 1.0)
}

/// Pattern intensity of class `class` at pixel `(y, x)`.
fn pattern(class: usize, y: usize, x: usize, j: &Jitter, geometry: Geometry) -> f64 {
    let cy = (geometry.height as f64 - 1.0) / 2.0 + j.dy;
    let cx = (geometry.width as f64 - 1.0) / 2.0 + j.dx;
    let (s, c) = j.angle.sin_cos();
    let (v0, u0) = (y as f64 - cy, x as f64 - cx);
    let u = c * u0 - s * v0;
    let v = s * u0 + c * v0;
    let r = (u * u + v * v).sqrt();
    let diag = std::f64::consts::FRAC_1_SQRT_2;
    match class {
        0 => wave(v, j.period, j.phase),
        1 => wave(u, j.period, j.phase),
        2 => wave((u.abs() + v.abs()) * diag, j.period, j.phase),
        3 => 1.0 / (1.0 + (v / 1.5).exp()),
        4 => wave(r, j.period, j.phase),
        5 => {
            let cell = j.period * 0.75;
            let a = ((u / cell + j.phase).floor() + (v / cell).floor()) as i64;
            (a.rem_euclid(2)) as f64
        }
        6 => {
            let inside = if r < 12.0 { 1.0 } else { 0.0 };
            band(u, 2.0).max(band(v, 2.0)) * inside
        }
        7 => (-(r * r) / (2.0 * 6.0 * 6.0)).exp(),
        8 => {
            let inside = if r < 13.0 { 1.0 } else { 0.0 };
            band((u - v) * diag, 2.0).max(band((u + v) * diag, 2.0)) * inside
        }
        9 => {
            let m = u.abs().max(v.abs());
            band(m - 8.5, 1.5)
        }
        _ => unreachable!("class index checked by caller"),
    }
}

fn render(class: usize, j: &Jitter, geometry: Geometry, out: &mut Vec<f64>) {
    for ch in 0..geometry.channels {
        let (fg, bg) = (j.fg[ch % 3], j.bg[ch % 3]);
        for y in 0..geometry.height {
            for x in 0..geometry.width {
                let p = pattern(class, y, x, j, geometry);
                out.push((bg + (fg - bg) * p).clamp(0.0, 1.0));
            }
        }
    }
}

/// The noiseless white-on-black template of every class, `[classes, 3, 32, 32]`.
pub fn class_templates(classes: usize) -> Result<Tensor> {
    check_classes(classes)?;
    let mut data = Vec::with_capacity(classes * GLYPH_GEOMETRY.pixels());
    for k in 0..classes {
        render(k, &Jitter::TEMPLATE, GLYPH_GEOMETRY, &mut data);
    }
    Ok(Tensor::new(GLYPH_GEOMETRY.batch_shape(classes), data)?)
}

fn check_classes(classes: usize) -> Result<()> {
    if !(2..=MAX_CLASSES).contains(&classes) {
        return Err(Error::Config(format!(
            "glyph classes must lie in 2..={MAX_CLASSES}, got {classes}"
        )));
    }
    Ok(())
}

/// `n` glyphs, class-balanced within one sample, in seeded random order.
pub fn generate_glyphs(n: usize, classes: usize, seed: u64) -> Result<GlyphDataset> {
    check_classes(classes)?;
    if n < classes {
        return Err(Error::Config(format!("need at least one sample per class: N={n} < C={classes}")));
    }
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, Stream::Glyphs, u64::MAX)));
    let mut data = Vec::with_capacity(n * GLYPH_GEOMETRY.pixels());
    for (i, &y) in labels.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, Stream::Glyphs, i as u64));
        render(y, &Jitter::sample(&mut rng), GLYPH_GEOMETRY, &mut data);
    }
    Ok(GlyphDataset {
        images: Tensor::new(GLYPH_GEOMETRY.batch_shape(n), data)?,
        labels,
        classes,
        seed,
    })
}

/// Clean source split: `(train, test)` drawn from independent seeds.
pub fn source_split(train: usize, test: usize, classes: usize, seed: u64) -> Result<(GlyphDataset, GlyphDataset)> {
    Ok((
        generate_glyphs(train, classes, derive_seed(seed, Stream::Split, 0))?,
        generate_glyphs(test, classes, derive_seed(seed, Stream::Split, 1))?,
    ))
}

impl GlyphDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.set_meta("dataset.classes", self.classes);
        c.set_meta("dataset.seed", self.seed);
        c.push_tensor("dataset.images", self.images.clone());
        c.push_tensor(
            "dataset.labels",
            Tensor::from_vec(self.labels.iter().map(|&y| y as f64).collect()),
        );
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let classes: usize = c.parse_meta("dataset.classes")?;
        let images = c.require_tensor("dataset.images")?.clone();
        let n = GLYPH_GEOMETRY.check(&images)?;
        let labels: Vec<usize> = c
            .require_tensor("dataset.labels")?
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 && (v as usize) < classes {
                    Ok(v as usize)
                } else {
                    Err(Error::LabelOutOfRange {
                        label: v as usize,
                        classes,
                    })
                }
            })
            .collect::<Result<_>>()?;
        if labels.len() != n {
            return Err(Error::Config(format!("{n} images but {} labels", labels.len())));
        }
        Ok(Self {
            images,
            labels,
            classes,
            seed: c.parse_meta("dataset.seed")?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_and_reproducible() {
        let d = generate_glyphs(1000, 10, 7).unwrap();
        for k in 0..10 {
            assert_eq!(d.labels.iter().filter(|&&y| y == k).count(), 100);
        }
        let again = generate_glyphs(1000, 10, 7).unwrap();
        assert!(d.images.bit_eq(&again.images));
        assert_eq!(d.labels, again.labels);

        let odd = generate_glyphs(23, 10, 1).unwrap();
        let counts: Vec<usize> = (0..10).map(|k| odd.labels.iter().filter(|&&y| y == k).count()).collect();
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
    }

    #[test]
    fn pixels_are_in_unit_range() {
        let d = generate_glyphs(200, 10, 3).unwrap();
        assert!(d.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn templates_are_pairwise_distinct() {
        let t = class_templates(10).unwrap();
        let px = GLYPH_GEOMETRY.pixels();
        for a in 0..10 {
            for b in a + 1..10 {
                let (ta, tb) = (&t.data()[a * px..][..px], &t.data()[b * px..][..px]);
                let differing = ta.iter().zip(tb).filter(|(x, y)| (*x - *y).abs() >= 0.2).count();
                assert!(differing * 10 >= px, "classes {a} and {b} differ on only {differing} of {px} pixels");
            }
        }
    }

    #[test]
    fn flipped_templates_stay_in_their_class_family() {
        // A flip may shift the phase of a periodic pattern, so compare the
        // flipped template against each class rendered over a phase grid.
        let px = GLYPH_GEOMETRY.pixels();
        let render_phase = |k: usize, phase: f64| {
            let mut out = Vec::with_capacity(px);
            render(k, &Jitter { phase, ..Jitter::TEMPLATE }, GLYPH_GEOMETRY, &mut out);
            out
        };
        let phases: Vec<f64> = (0..32).map(|i| i as f64 * PI / 16.0).collect();
        for a in 0..10 {
            let mut flipped = render_phase(a, 0.0);
            flipped.chunks_exact_mut(GLYPH_GEOMETRY.width).for_each(|row| row.reverse());
            let dist = |k: usize| {
                phases
                    .iter()
                    .map(|&p| render_phase(k, p).iter().zip(&flipped).map(|(x, y)| (x - y).powi(2)).sum::<f64>())
                    .fold(f64::INFINITY, f64::min)
            };
            let nearest = (0..10).min_by(|&x, &y| dist(x).total_cmp(&dist(y))).unwrap();
            assert_eq!(nearest, a);
            assert!(dist(a) < 1e-6 * px as f64, "class {a}: {}", dist(a));
        }
    }

    #[test]
    fn rejects_bad_sizes() {
        assert!(generate_glyphs(5, 10, 0).is_err());
        assert!(generate_glyphs(100, 1, 0).is_err());
        assert!(generate_glyphs(100, 11, 0).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let d = generate_glyphs(12, 4, 5).unwrap();
        let back = GlyphDataset::from_checkpoint(&Checkpoint::parse(&d.to_checkpoint().to_text()).unwrap()).unwrap();
        assert_eq!(back, d);
    }
}
