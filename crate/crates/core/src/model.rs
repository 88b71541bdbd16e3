//! PointNet-style classifier: a shared per-point MLP, max-pooling over points,
//! a trunk layer, a classification head and an L2-normalised projection head
//! for the contrastive losses. Also the `AMCK` checkpoint format.
//!
//! `AMCK` layout, little-endian:
//!
//! ```text
//! "AMCK" | u32 version=1 | u64 epoch | u32 tensor_count
//! per tensor: u16 name_len | name (UTF-8) | u8 rank | rank * u32 dims | f32 payload
//! ```

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Parameter, Tensor, Var};
use crate::pcdata::PointCloud;
use crate::rng::{self, Tag};

pub const POINT_HIDDEN: usize = 64;
pub const FEATURE_DIM: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub classes: usize,
    pub proj_dim: usize,
}

impl Architecture {
    pub fn new(classes: usize, proj_dim: usize) -> Self {
        Architecture { classes, proj_dim }
    }

    /// Parameter names and shapes, in storage order.
    pub fn layout(&self) -> Vec<(&'static str, Vec<usize>)> {
        vec![
            ("point1.weight", vec![3, POINT_HIDDEN]),
            ("point1.bias", vec![1, POINT_HIDDEN]),
            ("point2.weight", vec![POINT_HIDDEN, FEATURE_DIM]),
            ("point2.bias", vec![1, FEATURE_DIM]),
            ("trunk.weight", vec![FEATURE_DIM, FEATURE_DIM]),
            ("trunk.bias", vec![1, FEATURE_DIM]),
            ("head.weight", vec![FEATURE_DIM, self.classes]),
            ("head.bias", vec![1, self.classes]),
            ("proj.weight", vec![FEATURE_DIM, self.proj_dim]),
            ("proj.bias", vec![1, self.proj_dim]),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointClassifier {
    pub arch: Architecture,
    pub params: Vec<Parameter>,
}

/// Graph handles of the model outputs for one batch.
#[derive(Debug, Clone, Copy)]
pub struct Outputs {
    pub logits: Var,
    pub probs: Var,
    pub embedding: Var,
}

/// Plain values of the model outputs, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub batch: usize,
    pub classes: usize,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub embedding: Vec<f64>,
}

impl Prediction {
    pub fn probs_row(&self, i: usize) -> &[f64] {
        &self.probs[i * self.classes..(i + 1) * self.classes]
    }
}

/// Parameters bound into a particular graph.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl PointClassifier {
    /// Uniform fan-in initialisation: every entry of a layer with fan-in `f`
    /// is drawn from `U(-1/sqrt(f), 1/sqrt(f))`.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        if arch.classes == 0 || arch.proj_dim == 0 {
            return Err(Error::InvalidArgument(
                "classes and proj_dim must be positive".into(),
            ));
        }
        let params = arch
            .layout()
            .into_iter()
            .enumerate()
            .map(|(i, (name, shape))| {
                let fan_in = if name.ends_with("weight") {
                    shape[0]
                } else {
                    match name.split('.').next().unwrap() {
                        "point1" => 3,
                        "point2" => POINT_HIDDEN,
                        _ => FEATURE_DIM,
                    }
                };
                let bound = 1.0 / (fan_in as f64).sqrt();
                let mut r = rng::stream(seed, Tag::Init, &[i as u64]);
                let n: usize = shape.iter().product();
                let data = (0..n).map(|_| r.random_range(-bound..bound)).collect();
                Parameter::new(name, Tensor { shape, data })
            })
            .collect();
        Ok(PointClassifier { arch, params })
    }

    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|p| g.param(p.value.clone()))
                .collect(),
        }
    }

    /// Adds the gradients accumulated in `g` to the parameters.
    pub fn accumulate_grads(&mut self, g: &Graph, bound: &Bound) {
        for (p, v) in self.params.iter_mut().zip(&bound.vars) {
            if let Some(gr) = g.grad(*v) {
                for (acc, x) in p.grad.iter_mut().zip(gr) {
                    *acc += x;
                }
            }
        }
    }

    pub fn forward(&self, g: &mut Graph, bound: &Bound, clouds: &[&PointCloud]) -> Result<Outputs> {
        let b = clouds.len();
        if b == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let m = clouds[0].len();
        if let Some(c) = clouds.iter().find(|c| c.len() != m) {
            return Err(Error::InvalidArgument(format!(
                "ragged batch: clouds with {m} and {} points",
                c.len()
            )));
        }
        let mut data = Vec::with_capacity(b * m * 3);
        for c in clouds {
            data.extend(c.points().iter().flatten());
        }
        let w = &bound.vars;
        let x = g.constant(Tensor::new(vec![b * m, 3], data)?);
        let h = g.matmul(x, w[0])?;
        let h = g.add(h, w[1])?;
        let h = g.relu(h);
        let h = g.matmul(h, w[2])?;
        let h = g.add(h, w[3])?;
        let h = g.relu(h);
        let h = g.reshape(h, vec![b, m, FEATURE_DIM])?;
        let h = g.max_axis(h, 1)?;
        let h = g.matmul(h, w[4])?;
        let h = g.add(h, w[5])?;
        let feat = g.relu(h);
        let logits = g.matmul(feat, w[6])?;
        let logits = g.add(logits, w[7])?;
        let probs = g.softmax_rows(logits)?;
        let z = g.matmul(feat, w[8])?;
        let z = g.add(z, w[9])?;
        let embedding = g.l2_normalize_rows(z)?;
        Ok(Outputs {
            logits,
            probs,
            embedding,
        })
    }

    /// Forward pass without gradient tracking.
    pub fn predict(&self, clouds: &[&PointCloud]) -> Result<Prediction> {
        let mut g = Graph::new();
        let bound = Bound {
            vars: self
                .params
                .iter()
                .map(|p| g.constant(p.value.clone()))
                .collect(),
        };
        let out = self.forward(&mut g, &bound, clouds)?;
        Ok(Prediction {
            batch: clouds.len(),
            classes: self.arch.classes,
            logits: g.value(out.logits).to_vec(),
            probs: g.value(out.probs).to_vec(),
            embedding: g.value(out.embedding).to_vec(),
        })
    }

    pub fn to_checkpoint(&self, epoch: u64) -> Checkpoint {
        Checkpoint {
            epoch,
            tensors: self
                .params
                .iter()
                .map(|p| (p.name.clone(), p.value.clone()))
                .collect(),
        }
    }

    /// Rebuilds a model from checkpoint tensors, checking every parameter
    /// against `arch`. Tensors with other names are ignored.
    pub fn from_checkpoint(arch: Architecture, ckpt: &Checkpoint) -> Result<Self> {
        let params = arch
            .layout()
            .into_iter()
            .map(|(name, shape)| {
                let t = ckpt
                    .get(name)
                    .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
                if t.shape != shape {
                    return Err(Error::Checkpoint(format!(
                        "shape mismatch for `{name}`: file has {:?}, architecture expects {shape:?}",
                        t.shape
                    )));
                }
                Ok(Parameter::new(name, t.clone()))
            })
            .collect::<Result<_>>()?;
        Ok(PointClassifier { arch, params })
    }
}

const CKPT_MAGIC: &[u8; 4] = b"AMCK";
const CKPT_VERSION: u32 = 1;

/// Named tensors plus the epoch they were saved at. Values are stored as f32.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub epoch: u64,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let nb = name.as_bytes();
            let len = u16::try_from(nb.len())
                .map_err(|_| Error::Checkpoint(format!("tensor name too long: {name}")))?;
            let rank = u8::try_from(t.shape.len())
                .map_err(|_| Error::Checkpoint(format!("rank too large for `{name}`")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(nb);
            out.push(rank);
            for &d in &t.shape {
                let d = u32::try_from(d)
                    .map_err(|_| Error::Checkpoint(format!("dimension too large for `{name}`")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for &v in &t.data {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut take = |n: usize, what: &str| -> Result<&[u8]> {
            if buf.len() - pos < n {
                return Err(Error::Checkpoint(format!(
                    "truncated at byte {pos} while reading {what}"
                )));
            }
            let s = &buf[pos..pos + n];
            pos += n;
            Ok(s)
        };
        if take(4, "magic")? != CKPT_MAGIC {
            return Err(Error::Checkpoint("bad magic, expected \"AMCK\"".into()));
        }
        let version = u32::from_le_bytes(take(4, "version")?.try_into().unwrap());
        if version != CKPT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let epoch = u64::from_le_bytes(take(8, "epoch")?.try_into().unwrap());
        let count = u32::from_le_bytes(take(4, "tensor count")?.try_into().unwrap());
        let mut tensors = Vec::new();
        for _ in 0..count {
            let len = u16::from_le_bytes(take(2, "name length")?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(len, "name")?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let rank = take(1, "rank")?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32::from_le_bytes(take(4, "dimension")?.try_into().unwrap()) as usize);
            }
            let n: usize = shape.iter().product();
            let payload = take(n * 4, "payload")?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            tensors.push((name, Tensor { shape, data }));
        }
        if pos != buf.len() {
            return Err(Error::Checkpoint(format!(
                "trailing bytes after byte {pos}"
            )));
        }
        Ok(Checkpoint { epoch, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::decode(&buf)
    }
}

pub fn save_checkpoint(model: &PointClassifier, epoch: u64, path: &Path) -> Result<()> {
    model.to_checkpoint(epoch).save(path)
}

pub fn load_checkpoint(path: &Path, arch: Architecture) -> Result<(PointClassifier, u64)> {
    let ckpt = Checkpoint::load(path)?;
    Ok((PointClassifier::from_checkpoint(arch, &ckpt)?, ckpt.epoch))
}
