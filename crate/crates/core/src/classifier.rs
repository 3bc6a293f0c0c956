//! The source model `q(y|x)`: a small convolutional classifier that is trained
//! once on clean source data and then frozen for the whole adaptation run.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::error::{Error, Result};
use crate::tensor::{NodeId, Padding, Tape, Tensor};

/// Image geometry `channels x height x width`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Geometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Geometry {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn pixels(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn batch_shape(&self, batch: usize) -> Vec<usize> {
        vec![batch, self.channels, self.height, self.width]
    }

    /// Checks that `images` is `[batch, c, h, w]` with this geometry.
    pub fn check(&self, images: &Tensor) -> Result<usize> {
        let s = images.shape();
        if s.len() != 4 || s[1..] != [self.channels, self.height, self.width] {
            return Err(Error::Geometry {
                expected: self.batch_shape(s.first().copied().unwrap_or(1)),
                found: s.to_vec(),
            });
        }
        Ok(s[0])
    }
}

impl fmt::Display for Geometry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

impl FromStr for Geometry {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let parts: Vec<usize> = s
            .split('x')
            .map(|p| p.parse().map_err(|_| format!("bad geometry {s:?}")))
            .collect::<std::result::Result<_, _>>()?;
        match parts[..] {
            [c, h, w] if c > 0 && h > 0 && w > 0 => Ok(Self::new(c, h, w)),
            _ => Err(format!("bad geometry {s:?}")),
        }
    }
}

/// One stage of the feed-forward stack. A softmax over classes is implied
/// after the last layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layer {
    Conv {
        out_channels: usize,
        kernel: usize,
        padding: Padding,
    },
    Relu,
    AvgPool2,
    Flatten,
    Affine {
        outputs: usize,
    },
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Layer::Conv {
                out_channels,
                kernel,
                padding,
            } => {
                let pad = match padding {
                    Padding::Valid => "valid",
                    Padding::Same => "same",
                };
                write!(f, "conv{kernel}{pad}:{out_channels}")
            }
            Layer::Relu => f.write_str("relu"),
            Layer::AvgPool2 => f.write_str("avgpool2"),
            Layer::Flatten => f.write_str("flatten"),
            Layer::Affine { outputs } => write!(f, "affine:{outputs}"),
        }
    }
}

impl FromStr for Layer {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let bad = || format!("bad layer descriptor {s:?}");
        Ok(match s {
            "relu" => Layer::Relu,
            "avgpool2" => Layer::AvgPool2,
            "flatten" => Layer::Flatten,
            _ => {
                let (kind, n) = s.split_once(':').ok_or_else(bad)?;
                let n: usize = n.parse().map_err(|_| bad())?;
                if kind == "affine" {
                    Layer::Affine { outputs: n }
                } else {
                    let rest = kind.strip_prefix("conv").ok_or_else(bad)?;
                    let (k, padding) = if let Some(k) = rest.strip_suffix("same") {
                        (k, Padding::Same)
                    } else if let Some(k) = rest.strip_suffix("valid") {
                        (k, Padding::Valid)
                    } else {
                        return Err(bad());
                    };
                    Layer::Conv {
                        out_channels: n,
                        kernel: k.parse().map_err(|_| bad())?,
                        padding,
                    }
                }
            }
        })
    }
}

/// Hyper-parameters of source training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 0.05,
            momentum: 0.9,
            batch_size: 50,
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("train.epochs must be >= 1".into()));
        }
        // lr = 0 is accepted so a run can be checked for "no update".
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("train.lr must be finite and non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("train.momentum must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Class probabilities and per-sample max-probability confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probs: Tensor,
    pub confidence: Vec<f64>,
}

impl Prediction {
    fn from_probs(probs: Tensor) -> Self {
        let classes = probs.shape()[1];
        let confidence = probs
            .data()
            .chunks_exact(classes)
            .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        Self { probs, confidence }
    }

    /// Arg-max class per sample; ties resolve to the lowest index.
    pub fn labels(&self) -> Vec<usize> {
        let classes = self.probs.shape()[1];
        self.probs
            .data()
            .chunks_exact(classes)
            .map(|r| {
                let mut best = 0;
                for (i, &v) in r.iter().enumerate() {
                    if v > r[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }

    pub fn mean_confidence(&self) -> f64 {
        self.confidence.iter().sum::<f64>() / self.confidence.len() as f64
    }

    /// Fraction of samples whose arg-max differs from `labels`.
    pub fn error_rate(&self, labels: &[usize]) -> f64 {
        let wrong = self
            .labels()
            .iter()
            .zip(labels)
            .filter(|(p, y)| p != y)
            .count();
        wrong as f64 / labels.len() as f64
    }
}

/// Output of [`Classifier::forward`].
#[derive(Debug, Clone)]
pub struct Forward {
    pub logits: NodeId,
    /// Parameter nodes in [`Classifier::params`] order.
    pub params: Vec<NodeId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    classes: usize,
    geometry: Geometry,
    layers: Vec<Layer>,
    params: Vec<(String, Tensor)>,
    frozen: bool,
}

impl Classifier {
    /// conv 3x3 same (->8) + relu, conv 3x3 valid (->16) + relu, avgpool2,
    /// flatten, affine (->64) + relu, affine (->classes).
    pub fn default_layers(classes: usize) -> Vec<Layer> {
        vec![
            Layer::Conv {
                out_channels: 8,
                kernel: 3,
                padding: Padding::Same,
            },
            Layer::Relu,
            Layer::Conv {
                out_channels: 16,
                kernel: 3,
                padding: Padding::Valid,
            },
            Layer::Relu,
            Layer::AvgPool2,
            Layer::Flatten,
            Layer::Affine { outputs: 64 },
            Layer::Relu,
            Layer::Affine { outputs: classes },
        ]
    }

    pub fn build_default(classes: usize, geometry: Geometry, seed: u64) -> Result<Self> {
        Self::build(classes, geometry, Self::default_layers(classes), seed)
    }

    /// He-normal weights and zero biases, drawn from a seeded stream.
    pub fn build(classes: usize, geometry: Geometry, layers: Vec<Layer>, seed: u64) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {classes}")));
        }
        let shapes = param_shapes(classes, geometry, &layers)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = shapes
            .into_iter()
            .map(|(name, shape, fan_in)| {
                let t = if name.ends_with(".weight") {
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                    let n = shape.iter().product();
                    Tensor::new(shape, (0..n).map(|_| normal.sample(&mut rng)).collect())
                        .expect("shape matches length")
                } else {
                    Tensor::zeros(&shape)
                };
                (name, t)
            })
            .collect();
        Ok(Self {
            classes,
            geometry,
            layers,
            params,
            frozen: false,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.len()).sum()
    }

    /// Sets the frozen flag. From here on parameters enter every tape as
    /// constants and training is refused.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn architecture(&self) -> String {
        self.layers.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(" ")
    }

    /// Records the forward pass on `tape` and returns the logits node.
    /// Parameters are leaves only when the model is unfrozen and the tape armed.
    pub fn forward(&self, tape: &mut Tape, input: NodeId) -> Result<Forward> {
        self.geometry.check(tape.value(input))?;
        let params: Vec<NodeId> = self
            .params
            .iter()
            .map(|(_, t)| {
                if self.frozen {
                    tape.constant(t.clone())
                } else {
                    tape.leaf(t.clone())
                }
            })
            .collect();
        let mut x = input;
        let mut p = params.iter().copied();
        for layer in &self.layers {
            x = match *layer {
                Layer::Conv { padding, .. } => {
                    let (w, b) = (p.next().expect("weight"), p.next().expect("bias"));
                    tape.conv2d(x, w, b, padding)?
                }
                Layer::Relu => tape.relu(x)?,
                Layer::AvgPool2 => tape.avgpool2(x)?,
                Layer::Flatten => tape.flatten(x)?,
                Layer::Affine { .. } => {
                    let (w, b) = (p.next().expect("weight"), p.next().expect("bias"));
                    tape.affine(x, w, b)?
                }
            };
        }
        Ok(Forward { logits: x, params })
    }

    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::unarmed();
        let x = tape.constant(images.clone());
        let fwd = self.forward(&mut tape, x)?;
        Ok(tape.into_value(fwd.logits))
    }

    /// Class probabilities and per-sample confidence. Pure in (weights, input).
    pub fn predict(&self, images: &Tensor) -> Result<Prediction> {
        let logits = self.logits(images)?;
        Ok(Prediction::from_probs(crate::tensor::softmax_rows(&logits)?))
    }

    /// [`Classifier::predict`] in chunks of `chunk` samples.
    pub fn predict_chunked(&self, images: &Tensor, chunk: usize) -> Result<Prediction> {
        let n = self.geometry.check(images)?;
        let mut parts = Vec::new();
        let mut start = 0;
        while start < n {
            let end = (start + chunk.max(1)).min(n);
            parts.push(self.predict(&images.slice_outer(start, end))?.probs);
            start = end;
        }
        Ok(Prediction::from_probs(Tensor::concat_outer(&parts)?))
    }

    /// Minibatch SGD with momentum on hard-label cross-entropy. Returns the
    /// mean training loss of every epoch.
    pub fn train_source(&mut self, images: &Tensor, labels: &[usize], cfg: &TrainConfig) -> Result<Vec<f64>> {
        if self.frozen {
            return Err(Error::Frozen);
        }
        cfg.validate()?;
        let n = self.geometry.check(images).map_err(|e| match images.shape().first() {
            Some(0) | None => Error::EmptyDataset,
            _ => e,
        })?;
        if labels.len() != n {
            return Err(Error::Config(format!("{n} images but {} labels", labels.len())));
        }
        if let Some(&label) = labels.iter().find(|&&y| y >= self.classes) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: self.classes,
            });
        }

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut velocity: Vec<Tensor> = self.params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        let mut order: Vec<usize> = (0..n).collect();
        let mut curve = Vec::with_capacity(cfg.epochs);
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for batch in order.chunks(cfg.batch_size) {
                let x = images.select_outer(batch);
                let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
                let mut tape = Tape::new();
                let input = tape.constant(x);
                let fwd = self.forward(&mut tape, input)?;
                let lp = tape.log_softmax(fwd.logits)?;
                let loss = tape.soft_cross_entropy(&one_hot(&y, self.classes), lp)?;
                let value = tape.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::NonFinite {
                        step: epoch,
                        detail: "source training loss".into(),
                    });
                }
                total += value * batch.len() as f64;
                let mut grads = tape.backward(loss)?;
                for ((id, (_, param)), v) in fwd.params.iter().zip(&mut self.params).zip(&mut velocity) {
                    let g = grads.remove(*id).expect("every parameter is a leaf");
                    for (vi, gi) in v.data_mut().iter_mut().zip(g.data()) {
                        *vi = cfg.momentum * *vi + gi;
                    }
                    param.add_scaled(v, -cfg.lr)?;
                }
            }
            curve.push(total / n as f64);
        }
        Ok(curve)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        self.write_into(&mut c);
        c
    }

    pub fn write_into(&self, c: &mut Checkpoint) {
        c.set_meta("model.classes", self.classes);
        c.set_meta("model.geometry", self.geometry);
        c.set_meta("model.layers", self.architecture());
        c.set_meta("model.frozen", u8::from(self.frozen));
        for (name, t) in &self.params {
            c.push_tensor(&format!("model.{name}"), t.clone());
        }
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let classes: usize = c.parse_meta("model.classes")?;
        let geometry: Geometry = c
            .require_meta("model.geometry")?
            .parse()
            .map_err(|reason| CheckpointError::InvalidMeta {
                key: "model.geometry".into(),
                reason,
            })?;
        let layers = c
            .require_meta("model.layers")?
            .split(' ')
            .map(str::parse)
            .collect::<std::result::Result<Vec<Layer>, _>>()
            .map_err(|reason| CheckpointError::InvalidMeta {
                key: "model.layers".into(),
                reason,
            })?;
        let frozen = match c.require_meta("model.frozen")? {
            "0" => false,
            "1" => true,
            other => {
                return Err(CheckpointError::InvalidMeta {
                    key: "model.frozen".into(),
                    reason: format!("expected 0 or 1, got {other:?}"),
                }
                .into())
            }
        };
        let shapes = param_shapes(classes, geometry, &layers)?;
        let mut params = Vec::with_capacity(shapes.len());
        for (name, shape, _) in shapes {
            let key = format!("model.{name}");
            let t = c.require_tensor(&key)?;
            if t.shape() != shape.as_slice() {
                return Err(CheckpointError::Geometry {
                    name: key,
                    expected: shape,
                    found: t.shape().to_vec(),
                }
                .into());
            }
            params.push((name, t.clone()));
        }
        Ok(Self {
            classes,
            geometry,
            layers,
            params,
            frozen,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.to_checkpoint().write(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::read(path)?)
    }

    /// SHA-256 over the serialized weights and metadata.
    pub fn checksum(&self) -> String {
        self.to_checkpoint().digest()
    }
}

/// One-hot rows for hard labels.
pub fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, &y) in labels.iter().enumerate() {
        t.data_mut()[i * classes + y] = 1.0;
    }
    t
}

/// `(name, shape, fan_in)` for every parameter, validating the layer stack
/// against the input geometry.
fn param_shapes(classes: usize, geometry: Geometry, layers: &[Layer]) -> Result<Vec<(String, Vec<usize>, usize)>> {
    let bad = |msg: String| Error::Config(format!("architecture {geometry}: {msg}"));
    let mut shape = vec![geometry.channels, geometry.height, geometry.width];
    let mut out = Vec::new();
    for (i, layer) in layers.iter().enumerate() {
        match *layer {
            Layer::Conv {
                out_channels,
                kernel,
                padding,
            } => {
                if shape.len() != 3 {
                    return Err(bad(format!("layer {i}: conv after flatten")));
                }
                let pad = match padding {
                    Padding::Valid => 0,
                    Padding::Same => kernel / 2,
                };
                if kernel == 0 || shape[1] + 2 * pad < kernel || shape[2] + 2 * pad < kernel {
                    return Err(bad(format!("layer {i}: kernel {kernel} does not fit {shape:?}")));
                }
                let cin = shape[0];
                out.push((format!("layer{i}.weight"), vec![out_channels, cin, kernel, kernel], cin * kernel * kernel));
                out.push((format!("layer{i}.bias"), vec![out_channels], 0));
                shape = vec![
                    out_channels,
                    shape[1] + 2 * pad - kernel + 1,
                    shape[2] + 2 * pad - kernel + 1,
                ];
            }
            Layer::Relu => {}
            Layer::AvgPool2 => {
                if shape.len() != 3 || shape[1] < 2 || shape[2] < 2 {
                    return Err(bad(format!("layer {i}: cannot pool {shape:?}")));
                }
                shape = vec![shape[0], shape[1] / 2, shape[2] / 2];
            }
            Layer::Flatten => shape = vec![shape.iter().product()],
            Layer::Affine { outputs } => {
                if shape.len() != 1 {
                    return Err(bad(format!("layer {i}: affine before flatten")));
                }
                out.push((format!("layer{i}.weight"), vec![outputs, shape[0]], shape[0]));
                out.push((format!("layer{i}.bias"), vec![outputs], 0));
                shape = vec![outputs];
            }
        }
    }
    if shape != [classes] {
        return Err(bad(format!("final output {shape:?} is not [{classes}]")));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_data(n: usize, geom: Geometry, classes: usize, seed: u64) -> (Tensor, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.1).unwrap();
        let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
        let mut data = Vec::with_capacity(n * geom.pixels());
        for &y in &labels {
            for c in 0..geom.channels {
                for r in 0..geom.height {
                    for col in 0..geom.width {
                        let base = if (y == 0) == (r < geom.height / 2) { 1.0 } else { 0.0 };
                        let _ = (c, col);
                        data.push(base + normal.sample(&mut rng));
                    }
                }
            }
        }
        (Tensor::new(geom.batch_shape(n), data).unwrap(), labels)
    }

    #[test]
    fn output_shapes_follow_geometry() {
        let m = Classifier::build_default(10, Geometry::new(3, 32, 32), 1).unwrap();
        let p = m.predict(&Tensor::zeros(&[4, 3, 32, 32])).unwrap();
        assert_eq!(p.probs.shape(), &[4, 10]);
        let m = Classifier::build_default(2, Geometry::new(1, 16, 16), 1).unwrap();
        let p = m.predict(&Tensor::zeros(&[3, 1, 16, 16])).unwrap();
        assert_eq!(p.probs.shape(), &[3, 2]);
        for row in p.probs.data().chunks(2) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn default_parameter_count() {
        // conv1 8*3*9+8, conv2 16*8*9+16, fc1 64*(16*15*15)+64, fc2 10*64+10
        let expected = (216 + 8) + (1152 + 16) + (64 * 3600 + 64) + (640 + 10);
        assert_eq!(expected, 232_506);
        let m = Classifier::build_default(10, Geometry::new(3, 32, 32), 0).unwrap();
        assert_eq!(m.param_count(), expected);
    }

    #[test]
    fn rejects_degenerate_inputs() {
        assert!(Classifier::build_default(1, Geometry::new(3, 32, 32), 0).is_err());
        assert!(Classifier::build_default(2, Geometry::new(3, 2, 2), 0).is_err());
        let m = Classifier::build_default(2, Geometry::new(1, 8, 8), 0).unwrap();
        assert!(matches!(
            m.predict(&Tensor::zeros(&[1, 3, 8, 8])),
            Err(Error::Geometry { .. })
        ));
    }

    #[test]
    fn uniform_logits_give_confidence_one_over_c() {
        let mut m = Classifier::build_default(4, Geometry::new(1, 8, 8), 0).unwrap();
        for (_, t) in &mut m.params {
            t.data_mut().fill(0.0);
        }
        let p = m.predict(&Tensor::filled(&[5, 1, 8, 8], 0.3)).unwrap();
        assert_eq!(p.confidence.len(), 5);
        assert!(p.confidence.iter().all(|&c| (c - 0.25).abs() < 1e-15));
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let geom = Geometry::new(1, 8, 8);
        let (x, y) = tiny_data(40, geom, 2, 3);
        let cfg = TrainConfig {
            epochs: 3,
            lr: 0.05,
            momentum: 0.9,
            batch_size: 8,
            seed: 11,
        };
        let mut a = Classifier::build_default(2, geom, 5).unwrap();
        let mut b = a.clone();
        let ca = a.train_source(&x, &y, &cfg).unwrap();
        let cb = b.train_source(&x, &y, &cfg).unwrap();
        assert!(ca.last().unwrap() < ca.first().unwrap(), "{ca:?}");
        assert_eq!(ca.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), cb.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(a.checksum(), b.checksum());
    }

    #[test]
    fn zero_lr_keeps_loss_constant() {
        let geom = Geometry::new(1, 8, 8);
        let (x, y) = tiny_data(24, geom, 2, 4);
        let mut m = Classifier::build_default(2, geom, 5).unwrap();
        let before = m.checksum();
        let cfg = TrainConfig {
            epochs: 3,
            lr: 0.0,
            batch_size: 5,
            ..TrainConfig::default()
        };
        let curve = m.train_source(&x, &y, &cfg).unwrap();
        for v in &curve {
            assert!((v - curve[0]).abs() <= 1e-12 * curve[0].abs());
        }
        assert_eq!(m.checksum(), before);
    }

    #[test]
    fn training_errors() {
        let geom = Geometry::new(1, 8, 8);
        let mut m = Classifier::build_default(2, geom, 5).unwrap();
        let x = Tensor::zeros(&[2, 1, 8, 8]);
        assert!(matches!(
            m.train_source(&x, &[0, 2], &TrainConfig::default()),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
        m.freeze();
        assert!(matches!(m.train_source(&x, &[0, 1], &TrainConfig::default()), Err(Error::Frozen)));
    }

    #[test]
    fn frozen_forward_has_no_parameter_leaves() {
        let geom = Geometry::new(1, 8, 8);
        let mut m = Classifier::build_default(2, geom, 5).unwrap();
        let x = Tensor::filled(&[2, 1, 8, 8], 0.5);
        let before = m.predict(&x).unwrap();
        m.freeze();
        assert_eq!(m.predict(&x).unwrap(), before);
        let mut tape = Tape::new();
        let input = tape.leaf(x);
        let fwd = m.forward(&mut tape, input).unwrap();
        let lp = tape.log_softmax(fwd.logits).unwrap();
        let loss = tape.soft_cross_entropy(&one_hot(&[0, 1], 2), lp).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.ids().collect::<Vec<_>>(), vec![input]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut m = Classifier::build_default(3, Geometry::new(2, 10, 10), 9).unwrap();
        m.freeze();
        m.save(&path).unwrap();
        let back = Classifier::load(&path).unwrap();
        assert_eq!(back, m);
        let path2 = dir.path().join("m2.ckpt");
        back.save(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
        let x = Tensor::filled(&[2, 2, 10, 10], 0.25);
        assert!(m.predict(&x).unwrap().probs.bit_eq(&back.predict(&x).unwrap().probs));

        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, &text[..text.len() - 200]).unwrap();
        assert!(matches!(Classifier::load(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn load_rejects_geometry_mismatch() {
        let m = Classifier::build_default(3, Geometry::new(2, 10, 10), 9).unwrap();
        let mut c = m.to_checkpoint();
        c.set_meta("model.geometry", "2x12x12");
        let err = Classifier::from_checkpoint(&Checkpoint::parse(&c.to_text()).unwrap()).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(CheckpointError::Geometry { .. })), "{err}");
    }
}
