//! Model families and the clip-level prediction contract.
//!
//! | family       | stack                                                                 |
//! |--------------|-----------------------------------------------------------------------|
//! | `FbfCnn`     | C(64,5,1) → P → C(32,5,1) → P → FC(1000) → Softmax(2), per frame      |
//! | `CnnLstm`    | [C(16,3,1) → C(16,3,1) → P → D(0.2) → FC(200) → FC(50)] per frame → LSTM(q,20) → Softmax(2) |
//! | `FtSoftmax`  | precomputed feature → Softmax(2), per frame                           |
//! | `FtLstm`     | precomputed feature sequence → LSTM(q,20) → Softmax(2)                |
//!
//! `C(r,w,s)` is a same-padded convolution with `r` filters of size `w×w` and
//! stride `s`, `P` a 2×2 max pool, `D` dropout, `FC(h)` a sigmoid dense layer.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{
    Conv2DLayer, DenseLayer, DropoutLayer, Flatten, Layer, MaxPoolLayer, Mode, Padding, Param, Sequential,
};
use crate::lstm::{LstmCell, LstmLayer};
use crate::tensor::{io as tensor_io, softmax_rows, Activation, Tensor};

pub const CHANNELS: usize = 3;
pub const LSTM_HIDDEN: usize = 20;
pub const TRUNK_FEATURES: usize = 50;
pub const DROPOUT_P: f64 = 0.2;
pub const CLASSES: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Family {
    FbfCnn,
    CnnLstm,
    FtSoftmax,
    FtLstm,
}

impl Family {
    /// True for families that classify every frame independently.
    pub fn is_frame_level(self) -> bool {
        matches!(self, Family::FbfCnn | Family::FtSoftmax)
    }

    pub fn uses_features(self) -> bool {
        matches!(self, Family::FtSoftmax | Family::FtLstm)
    }

    pub fn cli_name(self) -> &'static str {
        match self {
            Family::FbfCnn => "fbf-cnn",
            Family::CnnLstm => "cnn-lstm",
            Family::FtSoftmax => "ft-softmax",
            Family::FtLstm => "ft-lstm",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::FbfCnn => "FbF CNN",
            Family::CnnLstm => "CNN+LSTM",
            Family::FtSoftmax => "FbF FT",
            Family::FtLstm => "FT+LSTM",
        })
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fbf-cnn" => Ok(Family::FbfCnn),
            "cnn-lstm" => Ok(Family::CnnLstm),
            "ft-softmax" => Ok(Family::FtSoftmax),
            "ft-lstm" => Ok(Family::FtLstm),
            other => Err(Error::Config(format!(
                "unknown architecture '{other}' (expected fbf-cnn, cnn-lstm, ft-softmax, ft-lstm)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum InputMode {
    Raw,
    Masked,
    Features,
}

impl InputMode {
    pub fn as_str(self) -> &'static str {
        match self {
            InputMode::Raw => "raw",
            InputMode::Masked => "masked",
            InputMode::Features => "features",
        }
    }
}

impl fmt::Display for InputMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InputMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(InputMode::Raw),
            "masked" => Ok(InputMode::Masked),
            "features" => Ok(InputMode::Features),
            other => Err(Error::Config(format!(
                "unknown input mode '{other}' (expected raw, masked, features)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelSpec {
    pub family: Family,
    pub input_mode: InputMode,
    /// Frames per model input: 1 for frame-level families, `q` otherwise.
    pub frames: usize,
    /// `(height, width)` in pixels, image modes only.
    pub resolution: (usize, usize),
    /// Feature width, features mode only.
    pub feature_dim: Option<usize>,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let fam = self.family;
        if fam.uses_features() != (self.input_mode == InputMode::Features) {
            return Err(Error::Config(format!(
                "{fam} cannot take '{}' input",
                self.input_mode
            )));
        }
        if fam.uses_features() {
            match self.feature_dim {
                Some(d) if d >= 1 => {}
                _ => return Err(Error::Config(format!("{fam} needs a positive feature dimension"))),
            }
        }
        if fam.is_frame_level() && self.frames != 1 {
            return Err(Error::Config(format!(
                "{fam} is frame-level and takes T = 1, got {}",
                self.frames
            )));
        }
        if self.frames == 0 {
            return Err(Error::Config("T must be at least 1".into()));
        }
        let (h, w) = self.resolution;
        match fam {
            Family::FbfCnn if h == 0 || w == 0 || h % 4 != 0 || w % 4 != 0 => Err(Error::Config(format!(
                "FbF CNN resolution {h}×{w} must be divisible by 4"
            ))),
            Family::CnnLstm if h == 0 || w == 0 || h % 2 != 0 || w % 2 != 0 => Err(Error::Config(format!(
                "CNN+LSTM resolution {h}×{w} must be divisible by 2"
            ))),
            _ => Ok(()),
        }
    }

    /// Architecture label in the reporting convention (`SMT+` for masked input).
    pub fn label(&self) -> String {
        match (self.family, self.input_mode) {
            (Family::FbfCnn, InputMode::Masked) => "FbF SMT+CNN".into(),
            (Family::CnnLstm, InputMode::Masked) => "SMT+CNN+LSTM".into(),
            (f, _) => f.to_string(),
        }
    }

    /// Shape of a single frame (or feature row) as fed to the model.
    pub fn frame_shape(&self) -> Vec<usize> {
        if self.family.uses_features() {
            vec![self.feature_dim.unwrap_or(0)]
        } else {
            vec![self.resolution.0, self.resolution.1, CHANNELS]
        }
    }
}

/// A classifier from one of the [`Family`] variants.
pub struct Model {
    spec: ModelSpec,
    trunk: Sequential,
    lstm: Option<LstmLayer>,
    head: DenseLayer,
}

fn trunk_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn build_fbf_cnn(resolution: (usize, usize), input_mode: InputMode, seed: u64) -> Result<Model> {
    let spec = ModelSpec {
        family: Family::FbfCnn,
        input_mode,
        frames: 1,
        resolution,
        feature_dim: None,
    };
    spec.validate()?;
    let mut rng = trunk_rng(seed);
    let (h, w) = resolution;
    let mut trunk = Sequential::new();
    trunk.push(Conv2DLayer::new("conv1", CHANNELS, 64, 5, 1, Padding::Same, &mut rng)?);
    trunk.push(MaxPoolLayer::new("pool1"));
    trunk.push(Conv2DLayer::new("conv2", 64, 32, 5, 1, Padding::Same, &mut rng)?);
    trunk.push(MaxPoolLayer::new("pool2"));
    trunk.push(Flatten::new("flatten"));
    trunk.push(DenseLayer::new("fc1", (h / 4) * (w / 4) * 32, 1000, Activation::Sigmoid, &mut rng)?);
    let head = DenseLayer::new("softmax", 1000, CLASSES, Activation::Linear, &mut rng)?;
    Ok(Model {
        spec,
        trunk,
        lstm: None,
        head,
    })
}

pub fn build_cnn_lstm(resolution: (usize, usize), steps: usize, input_mode: InputMode, seed: u64) -> Result<Model> {
    let spec = ModelSpec {
        family: Family::CnnLstm,
        input_mode,
        frames: steps,
        resolution,
        feature_dim: None,
    };
    spec.validate()?;
    let mut rng = trunk_rng(seed);
    let (h, w) = resolution;
    let mut trunk = Sequential::new();
    trunk.push(Conv2DLayer::new("conv1", CHANNELS, 16, 3, 1, Padding::Same, &mut rng)?);
    trunk.push(Conv2DLayer::new("conv2", 16, 16, 3, 1, Padding::Same, &mut rng)?);
    trunk.push(MaxPoolLayer::new("pool1"));
    trunk.push(DropoutLayer::new("dropout", DROPOUT_P, seed ^ 0xD409)?);
    trunk.push(Flatten::new("flatten"));
    trunk.push(DenseLayer::new("fc1", (h / 2) * (w / 2) * 16, 200, Activation::Sigmoid, &mut rng)?);
    trunk.push(DenseLayer::new("fc2", 200, TRUNK_FEATURES, Activation::Sigmoid, &mut rng)?);
    let cell = LstmCell::new(TRUNK_FEATURES, LSTM_HIDDEN, steps, &mut rng)?;
    let head = DenseLayer::new("softmax", LSTM_HIDDEN, CLASSES, Activation::Linear, &mut rng)?;
    Ok(Model {
        spec,
        trunk,
        lstm: Some(LstmLayer::new("lstm", cell)),
        head,
    })
}

pub fn build_ft_softmax(feature_dim: usize, seed: u64) -> Result<Model> {
    let spec = ModelSpec {
        family: Family::FtSoftmax,
        input_mode: InputMode::Features,
        frames: 1,
        resolution: (0, 0),
        feature_dim: Some(feature_dim),
    };
    spec.validate()?;
    let mut rng = trunk_rng(seed);
    let head = DenseLayer::new("softmax", feature_dim, CLASSES, Activation::Linear, &mut rng)?;
    Ok(Model {
        spec,
        trunk: Sequential::new(),
        lstm: None,
        head,
    })
}

pub fn build_ft_lstm(feature_dim: usize, steps: usize, seed: u64) -> Result<Model> {
    let spec = ModelSpec {
        family: Family::FtLstm,
        input_mode: InputMode::Features,
        frames: steps,
        resolution: (0, 0),
        feature_dim: Some(feature_dim),
    };
    spec.validate()?;
    let mut rng = trunk_rng(seed);
    let cell = LstmCell::new(feature_dim, LSTM_HIDDEN, steps, &mut rng)?;
    let head = DenseLayer::new("softmax", LSTM_HIDDEN, CLASSES, Activation::Linear, &mut rng)?;
    Ok(Model {
        spec,
        trunk: Sequential::new(),
        lstm: Some(LstmLayer::new("lstm", cell)),
        head,
    })
}

impl Model {
    pub fn from_spec(spec: &ModelSpec, seed: u64) -> Result<Model> {
        spec.validate()?;
        match spec.family {
            Family::FbfCnn => build_fbf_cnn(spec.resolution, spec.input_mode, seed),
            Family::CnnLstm => build_cnn_lstm(spec.resolution, spec.frames, spec.input_mode, seed),
            Family::FtSoftmax => build_ft_softmax(spec.feature_dim.unwrap_or(0), seed),
            Family::FtLstm => build_ft_lstm(spec.feature_dim.unwrap_or(0), spec.frames, seed),
        }
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn trunk(&self) -> &Sequential {
        &self.trunk
    }

    pub fn lstm(&self) -> Option<&LstmLayer> {
        self.lstm.as_ref()
    }

    pub fn head(&self) -> &DenseLayer {
        &self.head
    }

    pub fn is_frame_level(&self) -> bool {
        self.spec.family.is_frame_level()
    }

    /// Shape of one training input: a frame for frame-level models, a
    /// `[T × frame]` sequence otherwise.
    pub fn sample_shape(&self) -> Vec<usize> {
        let mut s = self.spec.frame_shape();
        if !self.is_frame_level() {
            s.insert(0, self.spec.frames);
        }
        s
    }

    fn check_batch(&self, batch: &Tensor) -> Result<usize> {
        let want = self.sample_shape();
        if batch.rank() != want.len() + 1 || batch.shape()[1..] != want[..] {
            return Err(Error::dim(format!(
                "{} expects a batch of {want:?}, got {:?}",
                self.spec.label(),
                batch.shape()
            )));
        }
        Ok(batch.shape()[0])
    }

    /// Class logits `[B × 2]` for a batch of inputs.
    pub fn forward(&mut self, batch: &Tensor, mode: Mode) -> Result<Tensor> {
        let b = self.check_batch(batch)?;
        let mut cur = batch.clone();
        if let Some(lstm) = &mut self.lstm {
            let q = self.spec.frames;
            if !self.trunk.is_empty() {
                let mut frames_shape = vec![b * q];
                frames_shape.extend(self.spec.frame_shape());
                let z = self.trunk.forward(&cur.reshape(&frames_shape)?, mode)?;
                let width = z.shape()[1];
                cur = z.reshape(&[b, q, width])?;
            }
            cur = lstm.forward(&cur)?;
        } else if !self.trunk.is_empty() {
            cur = self.trunk.forward(&cur, mode)?;
        }
        self.head.forward(&cur)
    }

    /// Backpropagates logit gradients `[B × 2]` and accumulates parameter gradients.
    pub fn backward(&mut self, grad_logits: &Tensor) -> Result<()> {
        let mut g = Layer::backward(&mut self.head, grad_logits)?;
        if let Some(lstm) = &mut self.lstm {
            if self.trunk.is_empty() {
                lstm.backward_accumulate(&g)?;
                return Ok(());
            }
            let seq = lstm.backward_accumulate(&g)?;
            let [b, q, width] = *seq.shape() else {
                return Err(Error::State("unexpected LSTM gradient shape".into()));
            };
            g = seq.reshape(&[b * q, width])?;
        } else if self.trunk.is_empty() {
            return Ok(());
        }
        self.trunk.backward(&g, false)?;
        Ok(())
    }

    /// Softmax class probabilities `[B × 2]` in inference mode.
    pub fn probabilities(&mut self, batch: &Tensor) -> Result<Tensor> {
        let logits = self.forward(batch, Mode::Infer)?;
        self.clear_cache();
        softmax_rows(&logits)
    }

    /// Risk score in `[0, 1]` for one clip given as `[T × frame]`.
    ///
    /// Sequence models need exactly their `T` frames and return the risky
    /// class probability. Frame-level models score every frame and return
    /// the mean risky probability.
    pub fn predict_clip(&mut self, clip: &Tensor) -> Result<f64> {
        let frame = self.spec.frame_shape();
        if clip.rank() != frame.len() + 1 || clip.shape()[1..] != frame[..] {
            return Err(Error::dim(format!(
                "clip must be [T × {frame:?}], got {:?}",
                clip.shape()
            )));
        }
        let t = clip.shape()[0];
        if self.is_frame_level() {
            let p = self.probabilities(clip)?;
            Ok(frame_mean_score(p.data().chunks_exact(CLASSES).map(|r| r[1])))
        } else {
            if t != self.spec.frames {
                return Err(Error::dim(format!(
                    "model takes T = {} frames, clip has {t}",
                    self.spec.frames
                )));
            }
            let mut shape = vec![1];
            shape.extend_from_slice(clip.shape());
            let p = self.probabilities(&clip.clone().reshape(&shape)?)?;
            Ok(p.data()[1])
        }
    }

    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.trunk.params();
        if let Some(l) = &self.lstm {
            out.extend(l.params());
        }
        out.extend(Layer::params(&self.head));
        out
    }

    pub fn params_mut(&mut self) -> Vec<Param<'_>> {
        let mut out = self.trunk.params_mut();
        if let Some(l) = &mut self.lstm {
            out.extend(l.params_mut());
        }
        out.extend(Layer::params_mut(&mut self.head));
        out
    }

    pub fn zero_grad(&mut self) {
        self.trunk.zero_grad();
        if let Some(l) = &mut self.lstm {
            l.zero_grad();
        }
        Layer::zero_grad(&mut self.head);
    }

    pub fn reseed(&mut self, seed: u64) {
        self.trunk.reseed(seed);
    }

    pub fn clear_cache(&mut self) {
        self.trunk.clear_cache();
        if let Some(l) = &mut self.lstm {
            l.clear_cache();
        }
        Layer::clear_cache(&mut self.head);
    }

    pub fn param_count(&self) -> usize {
        count_params(self)
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = encode_checkpoint(&self.params());
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    /// Loads parameters saved by [`Model::save_checkpoint`] into a model of
    /// the same architecture.
    pub fn load_checkpoint(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let records = decode_checkpoint(&bytes)?;
        let mut params = self.params_mut();
        if records.len() != params.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} tensors, model has {}",
                records.len(),
                params.len()
            )));
        }
        for ((name, tensor), p) in records.into_iter().zip(params.iter_mut()) {
            if name != p.name || tensor.shape() != p.value.shape() {
                return Err(Error::Data(format!(
                    "checkpoint record {name} {:?} does not match parameter {} {:?}",
                    tensor.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            *p.value = tensor;
        }
        Ok(())
    }
}

/// Mean of per-frame risky probabilities.
pub fn frame_mean_score(per_frame: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = per_frame.into_iter().fold((0.0, 0usize), |(s, n), p| (s + p, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Total element count over all trainable tensors.
pub fn count_params(model: &Model) -> usize {
    model.params().iter().map(|(_, t)| t.len()).sum()
}

/// Named-record checkpoint: for each tensor, a little-endian u32 name
/// length, the UTF-8 name, then a `TNSR` blob (f64).
pub fn encode_checkpoint(params: &[(String, &Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    for (name, t) in params {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend(tensor_io::encode(t, tensor_io::DType::F64));
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < bytes.len() {
        if bytes.len() < pos + 4 {
            return Err(Error::format(pos, "truncated record name length"));
        }
        let len = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
        pos += 4;
        if bytes.len() < pos + len {
            return Err(Error::format(pos, "truncated record name"));
        }
        let name = std::str::from_utf8(&bytes[pos..pos + len])
            .map_err(|_| Error::format(pos, "record name is not UTF-8"))?
            .to_string();
        pos += len;
        let (t, used) = tensor_io::decode_prefix(&bytes[pos..], pos)?;
        pos += used;
        out.push((name, t));
    }
    Ok(out)
}
