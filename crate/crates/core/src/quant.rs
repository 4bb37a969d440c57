//! Post-training int8 quantization of the CNN: min/max calibration,
//! per-tensor affine quantized tensors, integer-accumulation inference,
//! and the arch-2 checkpoint layout.
//!
//! Every rounding in this module is round-half-away-from-zero (f64::round),
//! the zero-point computation included.

use crate::error::{Error, Result};
use crate::models::cnn::{cnn_forward_trace, CnnParams, CnnShape};
use crate::models::{self, ArchId, ModelFile, NamedTensor, Standardizer, TensorData};
use crate::signal::FeatureMatrix;
use crate::tensor::Tensor;

/// Smallest observed range calibrate will accept before flooring.
pub const RANGE_FLOOR: f64 = 1e-8;
/// Calibration set size floor for quantize_model.
pub const MIN_CALIB: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantParams {
    pub scale: f64,
    pub zero_point: i32,
}

impl QuantParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(Error::invalid("quantization scale must be positive and finite"));
        }
        if !(-128..=127).contains(&self.zero_point) {
            return Err(Error::invalid("zero point must fit in int8"));
        }
        Ok(())
    }

    /// Affine parameters mapping [min, max] onto the int8 range; the range
    /// is floored so constant inputs still get a usable scale.
    pub fn from_range(min: f64, max: f64) -> Self {
        let scale = (max - min).max(RANGE_FLOOR) / 255.0;
        let zp = (-128.0 - min / scale).round().clamp(-128.0, 127.0) as i32;
        QuantParams { scale, zero_point: zp }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedTensor {
    pub dims: Vec<usize>,
    pub data: Vec<i8>,
    pub qparams: QuantParams,
}

/// Min/max scan over every value in every slice.
pub fn calibrate(activations: &[&[f64]]) -> Result<QuantParams> {
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    let mut seen = false;
    for slice in activations {
        for &v in *slice {
            if !v.is_finite() {
                return Err(Error::invalid("calibration values must be finite"));
            }
            min = min.min(v);
            max = max.max(v);
            seen = true;
        }
    }
    if !seen {
        return Err(Error::invalid("empty calibration input"));
    }
    Ok(QuantParams::from_range(min, max))
}

fn quantize_value(r: f64, q: QuantParams) -> i8 {
    ((r / q.scale).round() + q.zero_point as f64).clamp(-128.0, 127.0) as i8
}

pub fn quantize_tensor(t: &Tensor, q: QuantParams) -> QuantizedTensor {
    QuantizedTensor {
        dims: t.dims.clone(),
        data: t.data.iter().map(|&r| quantize_value(r, q)).collect(),
        qparams: q,
    }
}

pub fn dequantize(qt: &QuantizedTensor) -> Tensor {
    let q = qt.qparams;
    Tensor {
        dims: qt.dims.clone(),
        data: qt.data.iter().map(|&v| q.scale * (v as i32 - q.zero_point) as f64).collect(),
    }
}

/// Symmetric per-tensor weight quantization: scale = max|w|/127, zero
/// point 0. All-zero tensors fall back to the floored scale.
pub fn quantize_symmetric(t: &Tensor) -> QuantizedTensor {
    let peak = t.data.iter().fold(0.0f64, |m, &v| m.max(v.abs())).max(RANGE_FLOOR);
    let q = QuantParams { scale: peak / 127.0, zero_point: 0 };
    quantize_tensor(t, q)
}

fn quantize_biases(biases: &[f64], scale: f64) -> Vec<i32> {
    biases
        .iter()
        .map(|&b| (b / scale).round().clamp(i32::MIN as f64, i32::MAX as f64) as i32)
        .collect()
}

#[derive(Clone, Debug)]
pub struct QuantizedModel {
    pub shape: CnnShape,
    pub norm: Standardizer,
    pub conv1_w: QuantizedTensor,
    pub conv1_b: Vec<i32>,
    pub conv2_w: QuantizedTensor,
    pub conv2_b: Vec<i32>,
    pub dense1_w: QuantizedTensor,
    pub dense1_b: Vec<i32>,
    pub dense2_w: QuantizedTensor,
    pub dense2_b: Vec<i32>,
    pub act_input: QuantParams,
    pub act_conv1: QuantParams,
    pub act_conv2: QuantParams,
    pub act_dense1: QuantParams,
}

struct Range {
    min: f64,
    max: f64,
}

impl Range {
    fn new() -> Self {
        Range { min: f64::INFINITY, max: f64::NEG_INFINITY }
    }

    fn fold(&mut self, values: &[f64]) {
        for &v in values {
            self.min = self.min.min(v);
            self.max = self.max.max(v);
        }
    }

    fn params(&self) -> QuantParams {
        QuantParams::from_range(self.min, self.max)
    }
}

/// Calibrates activation ranges with a float forward pass over the
/// (standardized) calibration set, then quantizes weights symmetrically
/// and biases to i32 at the scale of the accumulator feeding them.
pub fn quantize_model(
    params: &CnnParams,
    norm: &Standardizer,
    calib: &[FeatureMatrix],
) -> Result<QuantizedModel> {
    if calib.len() < MIN_CALIB {
        return Err(Error::invalid(format!(
            "calibration set has {} examples; need at least {MIN_CALIB}",
            calib.len()
        )));
    }
    let mut r_input = Range::new();
    let mut r_conv1 = Range::new();
    let mut r_conv2 = Range::new();
    let mut r_dense1 = Range::new();
    for fm in calib {
        let standardized = norm.apply(fm)?;
        let trace = cnn_forward_trace(params, &standardized)?;
        r_input.fold(&standardized.values);
        r_conv1.fold(&trace.conv1_pre);
        r_conv2.fold(&trace.conv2_pre);
        r_dense1.fold(&trace.dense1_pre);
    }
    let act_input = r_input.params();
    let act_conv1 = r_conv1.params();
    let act_conv2 = r_conv2.params();
    let act_dense1 = r_dense1.params();

    let conv1_w = quantize_symmetric(&params.conv1_w);
    let conv2_w = quantize_symmetric(&params.conv2_w);
    let dense1_w = quantize_symmetric(&params.dense1_w);
    let dense2_w = quantize_symmetric(&params.dense2_w);
    let conv1_b = quantize_biases(&params.conv1_b.data, conv1_w.qparams.scale * act_input.scale);
    let conv2_b = quantize_biases(&params.conv2_b.data, conv2_w.qparams.scale * act_conv1.scale);
    let dense1_b =
        quantize_biases(&params.dense1_b.data, dense1_w.qparams.scale * act_conv2.scale);
    let dense2_b =
        quantize_biases(&params.dense2_b.data, dense2_w.qparams.scale * act_dense1.scale);

    Ok(QuantizedModel {
        shape: params.shape,
        norm: norm.clone(),
        conv1_w,
        conv1_b,
        conv2_w,
        conv2_b,
        dense1_w,
        dense1_b,
        dense2_w,
        dense2_b,
        act_input,
        act_conv1,
        act_conv2,
        act_dense1,
    })
}

// ---------------------------------------------------------------------------
// Integer inference
// ---------------------------------------------------------------------------

/// 3x3 same-padding convolution on int8 operands with i32 accumulation.
/// Input zero point is subtracted inside the accumulator; worst case
/// 5376 * 127 * 255 + bias stays far below i32::MAX.
fn conv3x3_int(
    input: &[i8],
    z_in: i32,
    in_c: usize,
    h: usize,
    w: usize,
    weights: &[i8],
    biases: &[i32],
    out_c: usize,
    out: &mut [i32],
) {
    const K: usize = 3;
    for oc in 0..out_c {
        let w_oc = &weights[oc * in_c * K * K..(oc + 1) * in_c * K * K];
        let o_base = oc * h * w;
        for y in 0..h {
            for x in 0..w {
                let mut acc = biases[oc];
                for ic in 0..in_c {
                    let i_base = ic * h * w;
                    for ky in 0..K {
                        let iy = y as isize + ky as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = i_base + iy as usize * w;
                        for kx in 0..K {
                            let ix = x as isize + kx as isize - 1;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let wv = w_oc[ic * K * K + ky * K + kx] as i32;
                            let xv = input[row + ix as usize] as i32 - z_in;
                            acc += wv * xv;
                        }
                    }
                }
                out[o_base + y * w + x] = acc;
            }
        }
    }
}

/// Dense layer on int8 operands: weights [n_in, n_out] row-major, i32
/// accumulation with the input zero point subtracted per operand.
fn dense_int(
    input: &[i8],
    z_in: i32,
    weights: &[i8],
    biases: &[i32],
    n_out: usize,
    out: &mut [i32],
) {
    out.copy_from_slice(biases);
    for (i, &xq) in input.iter().enumerate() {
        let xv = xq as i32 - z_in;
        if xv == 0 {
            continue;
        }
        let w_row = &weights[i * n_out..(i + 1) * n_out];
        for (o, &wv) in w_row.iter().enumerate() {
            out[o] += wv as i32 * xv;
        }
    }
}

/// Accumulator back to int8 through the calibrated output parameters.
fn requantize(acc: &[i32], multiplier: f64, z_out: i32, out: &mut Vec<i8>) {
    out.clear();
    out.extend(acc.iter().map(|&a| {
        ((a as f64 * multiplier).round() + z_out as f64).clamp(-128.0, 127.0) as i8
    }));
}

/// ReLU in the integer domain: the zero point is the image of real zero.
fn relu_int(q: &mut [i8], zp: i32) {
    let z = zp as i8;
    for v in q.iter_mut() {
        if *v < z {
            *v = z;
        }
    }
}

/// 2x2 max pooling with floored output dims; max of int8 codes equals the
/// quantization of the float max because the map is monotone.
fn maxpool_int(input: &[i8], channels: usize, h: usize, w: usize) -> Vec<i8> {
    let (ph, pw) = (h / 2, w / 2);
    let mut out = vec![0i8; channels * ph * pw];
    for c in 0..channels {
        for py in 0..ph {
            for px in 0..pw {
                let y0 = py * 2;
                let x0 = px * 2;
                let mut best = i8::MIN;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let v = input[c * h * w + (y0 + dy) * w + x0 + dx];
                        if v > best {
                            best = v;
                        }
                    }
                }
                out[c * ph * pw + py * pw + px] = best;
            }
        }
    }
    out
}

/// Full integer pipeline; only the requantization multipliers and the
/// final logit dequantization touch floating point.
pub fn quantized_forward(qm: &QuantizedModel, fm: &FeatureMatrix) -> Result<Vec<f64>> {
    let s = qm.shape;
    if fm.n_mels != s.input_h || fm.n_frames != s.input_w {
        return Err(Error::invalid(format!(
            "feature matrix is {}x{}, model expects {}x{}",
            fm.n_mels, fm.n_frames, s.input_h, s.input_w
        )));
    }
    let standardized = qm.norm.apply(fm)?;
    let q_in: Vec<i8> =
        standardized.values.iter().map(|&r| quantize_value(r, qm.act_input)).collect();

    let (h, w) = (s.input_h, s.input_w);
    let mut acc = vec![0i32; s.conv1_filters * h * w];
    conv3x3_int(
        &q_in,
        qm.act_input.zero_point,
        1,
        h,
        w,
        &qm.conv1_w.data,
        &qm.conv1_b,
        s.conv1_filters,
        &mut acc,
    );
    let m1 = qm.conv1_w.qparams.scale * qm.act_input.scale / qm.act_conv1.scale;
    let mut q1 = Vec::new();
    requantize(&acc, m1, qm.act_conv1.zero_point, &mut q1);
    relu_int(&mut q1, qm.act_conv1.zero_point);
    let q1 = maxpool_int(&q1, s.conv1_filters, h, w);

    let (h2, w2) = (s.pool1_h(), s.pool1_w());
    let mut acc = vec![0i32; s.conv2_filters * h2 * w2];
    conv3x3_int(
        &q1,
        qm.act_conv1.zero_point,
        s.conv1_filters,
        h2,
        w2,
        &qm.conv2_w.data,
        &qm.conv2_b,
        s.conv2_filters,
        &mut acc,
    );
    let m2 = qm.conv2_w.qparams.scale * qm.act_conv1.scale / qm.act_conv2.scale;
    let mut q2 = Vec::new();
    requantize(&acc, m2, qm.act_conv2.zero_point, &mut q2);
    relu_int(&mut q2, qm.act_conv2.zero_point);
    let q2 = maxpool_int(&q2, s.conv2_filters, h2, w2);

    let mut acc = vec![0i32; s.dense_hidden];
    dense_int(
        &q2,
        qm.act_conv2.zero_point,
        &qm.dense1_w.data,
        &qm.dense1_b,
        s.dense_hidden,
        &mut acc,
    );
    let m3 = qm.dense1_w.qparams.scale * qm.act_conv2.scale / qm.act_dense1.scale;
    let mut q3 = Vec::new();
    requantize(&acc, m3, qm.act_dense1.zero_point, &mut q3);
    relu_int(&mut q3, qm.act_dense1.zero_point);

    let mut acc = vec![0i32; s.n_classes];
    dense_int(
        &q3,
        qm.act_dense1.zero_point,
        &qm.dense2_w.data,
        &qm.dense2_b,
        s.n_classes,
        &mut acc,
    );
    let logit_scale = qm.dense2_w.qparams.scale * qm.act_dense1.scale;
    Ok(acc.iter().map(|&a| a as f64 * logit_scale).collect())
}

// ---------------------------------------------------------------------------
// Checkpoint layout (arch id 2)
// ---------------------------------------------------------------------------

const WEIGHT_NAMES: [&str; 4] = ["conv1.w", "conv2.w", "dense1.w", "dense2.w"];
const BIAS_NAMES: [&str; 4] = ["conv1.b", "conv2.b", "dense1.b", "dense2.b"];
const ACT_NAMES: [&str; 4] = ["input", "conv1", "conv2", "dense1"];

fn act_tensors(layer: &str, q: QuantParams) -> [NamedTensor; 2] {
    [
        NamedTensor::f64(&format!("act.{layer}.scale"), &[1], vec![q.scale]),
        NamedTensor {
            name: format!("act.{layer}.zp"),
            dims: vec![1],
            data: TensorData::I32(vec![q.zero_point]),
        },
    ]
}

fn read_act(file: &ModelFile, layer: &str) -> Result<QuantParams> {
    let scale_name = format!("act.{layer}.scale");
    let scale = match &file.require(&scale_name)?.data {
        TensorData::F64(v) if v.len() == 1 => v[0],
        _ => {
            return Err(Error::InvalidModel(format!(
                "tensor \"{scale_name}\" must be a single f64"
            )))
        }
    };
    let zp_name = format!("act.{layer}.zp");
    let zp = match &file.require(&zp_name)?.data {
        TensorData::I32(v) if v.len() == 1 => v[0],
        _ => {
            return Err(Error::InvalidModel(format!(
                "tensor \"{zp_name}\" must be a single i32"
            )))
        }
    };
    let q = QuantParams { scale, zero_point: zp };
    q.validate().map_err(|e| Error::InvalidModel(e.to_string()))?;
    Ok(q)
}

pub fn quant_to_model_file(qm: &QuantizedModel) -> ModelFile {
    let mut file = ModelFile::new(ArchId::CnnInt8);
    let weights = [&qm.conv1_w, &qm.conv2_w, &qm.dense1_w, &qm.dense2_w];
    let biases = [&qm.conv1_b, &qm.conv2_b, &qm.dense1_b, &qm.dense2_b];
    for ((wname, qt), (bname, b)) in
        WEIGHT_NAMES.iter().zip(weights).zip(BIAS_NAMES.iter().zip(biases))
    {
        file.tensors.push(NamedTensor {
            name: wname.to_string(),
            dims: qt.dims.clone(),
            data: TensorData::I8 {
                data: qt.data.clone(),
                scale: qt.qparams.scale,
                zero_point: qt.qparams.zero_point,
            },
        });
        file.tensors.push(NamedTensor {
            name: bname.to_string(),
            dims: vec![b.len()],
            data: TensorData::I32(b.to_vec()),
        });
    }
    let acts = [qm.act_input, qm.act_conv1, qm.act_conv2, qm.act_dense1];
    for (layer, q) in ACT_NAMES.iter().zip(acts) {
        file.tensors.extend(act_tensors(layer, q));
    }
    file.tensors.extend(qm.norm.to_tensors());
    file.tensors.push(models::input_dims_tensor(qm.shape.input_h, qm.shape.input_w));
    file
}

fn read_quant_weight(file: &ModelFile, name: &str) -> Result<QuantizedTensor> {
    let t = file.require(name)?;
    match &t.data {
        TensorData::I8 { data, scale, zero_point } => {
            if *zero_point != 0 {
                return Err(Error::InvalidModel(format!(
                    "weight tensor \"{name}\" must have zero point 0"
                )));
            }
            if !(*scale > 0.0) || !scale.is_finite() {
                return Err(Error::InvalidModel(format!(
                    "weight tensor \"{name}\" has a bad scale"
                )));
            }
            Ok(QuantizedTensor {
                dims: t.dims.clone(),
                data: data.clone(),
                qparams: QuantParams { scale: *scale, zero_point: 0 },
            })
        }
        _ => Err(Error::InvalidModel(format!("tensor \"{name}\" must be int8"))),
    }
}

fn read_biases(file: &ModelFile, name: &str, expect: usize) -> Result<Vec<i32>> {
    match &file.require(name)?.data {
        TensorData::I32(v) if v.len() == expect => Ok(v.clone()),
        TensorData::I32(v) => Err(Error::InvalidModel(format!(
            "tensor \"{name}\" has {} values, expected {expect}",
            v.len()
        ))),
        _ => Err(Error::InvalidModel(format!("tensor \"{name}\" must be i32"))),
    }
}

pub fn quant_from_model_file(file: &ModelFile) -> Result<QuantizedModel> {
    if file.arch != ArchId::CnnInt8 {
        return Err(Error::InvalidModel(format!(
            "expected a quantized cnn checkpoint, found arch id {}",
            file.arch.code()
        )));
    }
    let (input_h, input_w) = models::read_input_dims(file)?;
    let conv1_w = read_quant_weight(file, "conv1.w")?;
    let conv2_w = read_quant_weight(file, "conv2.w")?;
    let dense1_w = read_quant_weight(file, "dense1.w")?;
    let dense2_w = read_quant_weight(file, "dense2.w")?;
    if conv1_w.dims.len() != 4 || conv2_w.dims.len() != 4 {
        return Err(Error::InvalidModel("conv weights must be rank 4".into()));
    }
    if dense1_w.dims.len() != 2 || dense2_w.dims.len() != 2 {
        return Err(Error::InvalidModel("dense weights must be rank 2".into()));
    }
    let shape = CnnShape {
        input_h,
        input_w,
        conv1_filters: conv1_w.dims[0],
        conv2_filters: conv2_w.dims[0],
        dense_hidden: dense1_w.dims[1],
        n_classes: dense2_w.dims[1],
    };
    shape.validate().map_err(|e| Error::InvalidModel(e.to_string()))?;
    if conv1_w.dims != [shape.conv1_filters, 1, 3, 3]
        || conv2_w.dims != [shape.conv2_filters, shape.conv1_filters, 3, 3]
        || dense1_w.dims != [shape.flat_len(), shape.dense_hidden]
        || dense2_w.dims != [shape.dense_hidden, shape.n_classes]
    {
        return Err(Error::InvalidModel("weight shapes do not chain together".into()));
    }
    let qm = QuantizedModel {
        shape,
        norm: Standardizer::from_file(file, input_h)?,
        conv1_b: read_biases(file, "conv1.b", shape.conv1_filters)?,
        conv2_b: read_biases(file, "conv2.b", shape.conv2_filters)?,
        dense1_b: read_biases(file, "dense1.b", shape.dense_hidden)?,
        dense2_b: read_biases(file, "dense2.b", shape.n_classes)?,
        conv1_w,
        conv2_w,
        dense1_w,
        dense2_w,
        act_input: read_act(file, "input")?,
        act_conv1: read_act(file, "conv1")?,
        act_conv2: read_act(file, "conv2")?,
        act_dense1: read_act(file, "dense1")?,
    };
    Ok(qm)
}
