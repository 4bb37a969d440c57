//! The two classifiers and what they share: Glorot-uniform init, softmax,
//! per-band standardization, and the model file format.

pub mod ast;
pub mod cnn;
pub mod io;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::signal::FeatureMatrix;
use crate::tensor::Tensor;

pub use ast::{
    ast_forward, ast_forward_trace, ast_from_model_file, ast_to_model_file, AstParams, AstShape,
    AstTrace,
};
pub use cnn::{
    cnn_forward, cnn_forward_trace, cnn_from_model_file, cnn_to_model_file, CnnParams, CnnShape,
    CnnTrace,
};
pub use io::{ArchId, ModelFile, NamedTensor, TensorData};

pub const N_CLASSES: usize = 3;

/// Meta tensor carrying the feature geometry: [input_h, input_w]. The
/// weight shapes alone cannot recover it once pooling has floored.
pub const INPUT_DIMS_NAME: &str = "input.dims";
pub const NORM_MEAN_NAME: &str = "norm.mean";
pub const NORM_STD_NAME: &str = "norm.std";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arch {
    Cnn,
    Ast,
}

impl std::str::FromStr for Arch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cnn" => Ok(Arch::Cnn),
            "ast" => Ok(Arch::Ast),
            other => Err(Error::invalid(format!("unknown architecture '{other}'"))),
        }
    }
}

/// Parameter collections expose their tensors in a fixed declaration
/// order; init, SGD updates and serialization all walk the same list.
pub trait ParamSet: Sized {
    fn tensor_names(&self) -> Vec<String>;
    fn tensors(&self) -> Vec<&Tensor>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }
}

/// Numerically stable softmax: shift by the max, exponentiate, normalize.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

/// Glorot-uniform fill: bound = sqrt(6 / (fan_in + fan_out)).
pub(crate) fn glorot_fill(t: &mut Tensor, fan_in: usize, fan_out: usize, rng: &mut Rng) {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    for v in t.data.iter_mut() {
        *v = rng.uniform(-bound, bound);
    }
}

/// Per-band feature standardization, fitted on a training split and
/// persisted with every checkpoint so inference applies the exact same
/// affine map.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(n_bands: usize) -> Self {
        Standardizer { mean: vec![0.0; n_bands], std: vec![1.0; n_bands] }
    }

    /// Fits per-band mean and standard deviation over all frames of all
    /// given feature matrices. Bands with no spread get a unit std.
    pub fn fit(features: &[&FeatureMatrix]) -> Result<Self> {
        let first = features
            .first()
            .ok_or_else(|| Error::invalid("cannot fit standardizer on an empty set"))?;
        let n_bands = first.n_mels;
        let mut sum = vec![0.0f64; n_bands];
        let mut sum_sq = vec![0.0f64; n_bands];
        let mut count = 0usize;
        for fm in features {
            if fm.n_mels != n_bands {
                return Err(Error::invalid("inconsistent band counts across features"));
            }
            count += fm.n_frames;
            for band in 0..n_bands {
                for &v in fm.row(band) {
                    sum[band] += v;
                    sum_sq[band] += v * v;
                }
            }
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std: Vec<f64> = sum_sq
            .iter()
            .zip(&mean)
            .map(|(sq, m)| ((sq / n - m * m).max(0.0)).sqrt().max(1e-6))
            .collect();
        Ok(Standardizer { mean, std })
    }

    pub fn apply(&self, fm: &FeatureMatrix) -> Result<FeatureMatrix> {
        if fm.n_mels != self.mean.len() {
            return Err(Error::invalid(format!(
                "standardizer fitted for {} bands, features have {}",
                self.mean.len(),
                fm.n_mels
            )));
        }
        let mut out = fm.clone();
        for band in 0..fm.n_mels {
            let (m, s) = (self.mean[band], self.std[band]);
            for t in 0..fm.n_frames {
                out.values[band * fm.n_frames + t] = (fm.at(band, t) - m) / s;
            }
        }
        Ok(out)
    }

    pub(crate) fn to_tensors(&self) -> [NamedTensor; 2] {
        [
            NamedTensor::f64(NORM_MEAN_NAME, &[self.mean.len()], self.mean.clone()),
            NamedTensor::f64(NORM_STD_NAME, &[self.std.len()], self.std.clone()),
        ]
    }

    pub(crate) fn from_file(file: &ModelFile, n_bands: usize) -> Result<Self> {
        let mean = file.require(NORM_MEAN_NAME)?.data.as_f64()?.to_vec();
        let std = file.require(NORM_STD_NAME)?.data.as_f64()?.to_vec();
        if mean.len() != n_bands || std.len() != n_bands {
            return Err(Error::InvalidModel(format!(
                "normalization vectors have {} / {} entries, model input has {n_bands} bands",
                mean.len(),
                std.len()
            )));
        }
        if std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidModel("non-positive normalization scale".into()));
        }
        Ok(Standardizer { mean, std })
    }
}

pub(crate) fn input_dims_tensor(input_h: usize, input_w: usize) -> NamedTensor {
    NamedTensor::f64(INPUT_DIMS_NAME, &[2], vec![input_h as f64, input_w as f64])
}

pub(crate) fn read_input_dims(file: &ModelFile) -> Result<(usize, usize)> {
    let t = file.require(INPUT_DIMS_NAME)?;
    let v = t.data.as_f64()?;
    if v.len() != 2 {
        return Err(Error::InvalidModel("input.dims must hold two values".into()));
    }
    let to_usize = |x: f64| -> Result<usize> {
        if x.fract() == 0.0 && x >= 1.0 && x <= u32::MAX as f64 {
            Ok(x as usize)
        } else {
            Err(Error::InvalidModel(format!("bad input dimension {x}")))
        }
    };
    Ok((to_usize(v[0])?, to_usize(v[1])?))
}

/// Serializes every parameter tensor under its canonical name.
pub(crate) fn params_to_named<P: ParamSet>(params: &P) -> Vec<NamedTensor> {
    params
        .tensor_names()
        .into_iter()
        .zip(params.tensors())
        .map(|(name, t)| NamedTensor::f64(&name, &t.dims, t.data.clone()))
        .collect()
}

/// Copies named float tensors from a model file into a zeroed parameter
/// set, insisting on exact dimension agreement.
pub(crate) fn fill_params_from_file<P: ParamSet>(params: &mut P, file: &ModelFile) -> Result<()> {
    for (name, tensor) in params.tensor_names().into_iter().zip(params.tensors_mut()) {
        let stored = file.require(&name)?;
        if stored.dims != tensor.dims {
            return Err(Error::InvalidModel(format!(
                "tensor \"{name}\" has dims {:?}, expected {:?}",
                stored.dims, tensor.dims
            )));
        }
        tensor.data.copy_from_slice(stored.data.as_f64()?);
    }
    Ok(())
}
