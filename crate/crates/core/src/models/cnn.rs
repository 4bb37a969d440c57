//! Small convolutional classifier.
//!
//! conv 3x3 (pad 1) -> ReLU -> maxpool 2x2 -> conv 3x3 -> ReLU -> maxpool
//! 2x2 -> dense -> ReLU -> dense. At the default feature geometry
//! (64 x 85) the stages are 8x64x85, 8x32x42, 16x32x42, 16x16x21, a 5376
//! flatten, 32 hidden units and 3 logits: 173,411 parameters.

use crate::error::{Error, Result};
use crate::models::{self, glorot_fill, ArchId, ModelFile, ParamSet, Standardizer, N_CLASSES};
use crate::rng::Rng;
use crate::signal::FeatureMatrix;
use crate::tensor::Tensor;

const K: usize = 3; // square kernels, padding 1, stride 1

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CnnShape {
    pub input_h: usize,
    pub input_w: usize,
    pub conv1_filters: usize,
    pub conv2_filters: usize,
    pub dense_hidden: usize,
    pub n_classes: usize,
}

impl CnnShape {
    /// The production geometry for 64 x 85 log-mel inputs.
    pub fn base() -> Self {
        CnnShape {
            input_h: 64,
            input_w: 85,
            conv1_filters: 8,
            conv2_filters: 16,
            dense_hidden: 32,
            n_classes: N_CLASSES,
        }
    }

    /// Reduced geometry for gradient checking: 8 x 8 input, two filters per
    /// conv stage, dense 4 -> 3.
    pub fn tiny() -> Self {
        CnnShape {
            input_h: 8,
            input_w: 8,
            conv1_filters: 2,
            conv2_filters: 2,
            dense_hidden: 4,
            n_classes: N_CLASSES,
        }
    }

    pub fn for_input(h: usize, w: usize) -> Self {
        CnnShape { input_h: h, input_w: w, ..CnnShape::base() }
    }

    pub fn pool1_h(&self) -> usize {
        self.input_h / 2
    }
    pub fn pool1_w(&self) -> usize {
        self.input_w / 2
    }
    pub fn pool2_h(&self) -> usize {
        self.pool1_h() / 2
    }
    pub fn pool2_w(&self) -> usize {
        self.pool1_w() / 2
    }
    pub fn flat_len(&self) -> usize {
        self.conv2_filters * self.pool2_h() * self.pool2_w()
    }

    pub fn validate(&self) -> Result<()> {
        if self.pool2_h() == 0 || self.pool2_w() == 0 {
            return Err(Error::invalid("input too small to pool twice"));
        }
        if self.conv1_filters == 0 || self.conv2_filters == 0 || self.dense_hidden == 0 {
            return Err(Error::invalid("layer widths must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CnnParams {
    pub shape: CnnShape,
    pub conv1_w: Tensor, // [f1, 1, 3, 3]
    pub conv1_b: Tensor, // [f1]
    pub conv2_w: Tensor, // [f2, f1, 3, 3]
    pub conv2_b: Tensor, // [f2]
    pub dense1_w: Tensor, // [flat, hidden]
    pub dense1_b: Tensor, // [hidden]
    pub dense2_w: Tensor, // [hidden, classes]
    pub dense2_b: Tensor, // [classes]
}

impl CnnParams {
    pub fn zeros(shape: CnnShape) -> Self {
        CnnParams {
            shape,
            conv1_w: Tensor::zeros(&[shape.conv1_filters, 1, K, K]),
            conv1_b: Tensor::zeros(&[shape.conv1_filters]),
            conv2_w: Tensor::zeros(&[shape.conv2_filters, shape.conv1_filters, K, K]),
            conv2_b: Tensor::zeros(&[shape.conv2_filters]),
            dense1_w: Tensor::zeros(&[shape.flat_len(), shape.dense_hidden]),
            dense1_b: Tensor::zeros(&[shape.dense_hidden]),
            dense2_w: Tensor::zeros(&[shape.dense_hidden, shape.n_classes]),
            dense2_b: Tensor::zeros(&[shape.n_classes]),
        }
    }

    /// Glorot-uniform weights (conv fans count kernel taps), zero biases.
    /// The fill order is the tensor declaration order, so a seed pins every
    /// parameter bit.
    pub fn init(shape: CnnShape, seed: u64) -> Result<Self> {
        shape.validate()?;
        let mut p = CnnParams::zeros(shape);
        let mut rng = Rng::new(seed);
        glorot_fill(&mut p.conv1_w, K * K, K * K * shape.conv1_filters, &mut rng);
        glorot_fill(
            &mut p.conv2_w,
            K * K * shape.conv1_filters,
            K * K * shape.conv2_filters,
            &mut rng,
        );
        glorot_fill(&mut p.dense1_w, shape.flat_len(), shape.dense_hidden, &mut rng);
        glorot_fill(&mut p.dense2_w, shape.dense_hidden, shape.n_classes, &mut rng);
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        CnnParams::zeros(self.shape)
    }
}

impl ParamSet for CnnParams {
    fn tensor_names(&self) -> Vec<String> {
        ["conv1.w", "conv1.b", "conv2.w", "conv2.b", "dense1.w", "dense1.b", "dense2.w",
            "dense2.b"]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }

    fn tensors(&self) -> Vec<&Tensor> {
        vec![
            &self.conv1_w,
            &self.conv1_b,
            &self.conv2_w,
            &self.conv2_b,
            &self.dense1_w,
            &self.dense1_b,
            &self.dense2_w,
            &self.dense2_b,
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.conv1_w,
            &mut self.conv1_b,
            &mut self.conv2_w,
            &mut self.conv2_b,
            &mut self.dense1_w,
            &mut self.dense1_b,
            &mut self.dense2_w,
            &mut self.dense2_b,
        ]
    }
}

/// Every intermediate the backward pass needs.
#[derive(Clone, Debug)]
pub struct CnnTrace {
    pub input: Vec<f64>,      // [h * w]
    pub conv1_pre: Vec<f64>,  // [f1 * h * w], before ReLU
    pub pool1: Vec<f64>,      // [f1 * h/2 * w/2], after ReLU + pool
    pub pool1_src: Vec<usize>, // winning conv1 grid index per pooled cell
    pub conv2_pre: Vec<f64>,
    pub pool2: Vec<f64>,
    pub pool2_src: Vec<usize>,
    pub dense1_pre: Vec<f64>,
    pub dense1_post: Vec<f64>,
    pub logits: Vec<f64>,
}

/// 3x3 convolution, stride 1, zero padding 1. Channels-major layout.
pub(crate) fn conv3x3(
    input: &[f64],
    in_c: usize,
    h: usize,
    w: usize,
    weights: &[f64], // [out_c, in_c, 3, 3]
    biases: &[f64],
    out: &mut [f64], // [out_c, h, w]
) {
    let out_c = biases.len();
    debug_assert_eq!(weights.len(), out_c * in_c * K * K);
    debug_assert_eq!(out.len(), out_c * h * w);
    for oc in 0..out_c {
        let w_oc = &weights[oc * in_c * K * K..(oc + 1) * in_c * K * K];
        let o_base = oc * h * w;
        for y in 0..h {
            for x in 0..w {
                let mut acc = biases[oc];
                for ic in 0..in_c {
                    let w_ic = &w_oc[ic * K * K..(ic + 1) * K * K];
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
                            acc += w_ic[ky * K + kx] * input[row + ix as usize];
                        }
                    }
                }
                out[o_base + y * w + x] = acc;
            }
        }
    }
}

/// ReLU then 2x2 max pool with floor division; records the winning source
/// index, first maximum in row-major order on ties.
pub(crate) fn relu_maxpool(
    pre: &[f64],
    channels: usize,
    h: usize,
    w: usize,
    out: &mut [f64],
    src: &mut [usize],
) {
    let oh = h / 2;
    let ow = w / 2;
    debug_assert_eq!(out.len(), channels * oh * ow);
    for c in 0..channels {
        for py in 0..oh {
            for px in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let idx = c * h * w + (2 * py + dy) * w + (2 * px + dx);
                        let v = pre[idx].max(0.0);
                        if v > best {
                            best = v;
                            best_idx = idx;
                        }
                    }
                }
                out[c * oh * ow + py * ow + px] = best;
                src[c * oh * ow + py * ow + px] = best_idx;
            }
        }
    }
}

pub(crate) fn dense(input: &[f64], weights: &[f64], biases: &[f64], out: &mut [f64]) {
    let n_out = biases.len();
    debug_assert_eq!(weights.len(), input.len() * n_out);
    out.copy_from_slice(biases);
    for (i, &x) in input.iter().enumerate() {
        if x == 0.0 {
            continue;
        }
        let row = &weights[i * n_out..(i + 1) * n_out];
        for (o, wv) in out.iter_mut().zip(row) {
            *o += x * wv;
        }
    }
}

pub fn cnn_forward_trace(params: &CnnParams, fm: &FeatureMatrix) -> Result<CnnTrace> {
    let s = params.shape;
    if fm.n_mels != s.input_h || fm.n_frames != s.input_w {
        return Err(Error::invalid(format!(
            "feature matrix {}x{} does not match model input {}x{}",
            fm.n_mels, fm.n_frames, s.input_h, s.input_w
        )));
    }
    let (h, w) = (s.input_h, s.input_w);
    let (h2, w2) = (s.pool1_h(), s.pool1_w());
    let (h4, w4) = (s.pool2_h(), s.pool2_w());

    let input = fm.values.clone();
    let mut conv1_pre = vec![0.0; s.conv1_filters * h * w];
    conv3x3(&input, 1, h, w, &params.conv1_w.data, &params.conv1_b.data, &mut conv1_pre);
    let mut pool1 = vec![0.0; s.conv1_filters * h2 * w2];
    let mut pool1_src = vec![0usize; pool1.len()];
    relu_maxpool(&conv1_pre, s.conv1_filters, h, w, &mut pool1, &mut pool1_src);

    let mut conv2_pre = vec![0.0; s.conv2_filters * h2 * w2];
    conv3x3(
        &pool1,
        s.conv1_filters,
        h2,
        w2,
        &params.conv2_w.data,
        &params.conv2_b.data,
        &mut conv2_pre,
    );
    let mut pool2 = vec![0.0; s.conv2_filters * h4 * w4];
    let mut pool2_src = vec![0usize; pool2.len()];
    relu_maxpool(&conv2_pre, s.conv2_filters, h2, w2, &mut pool2, &mut pool2_src);

    let mut dense1_pre = vec![0.0; s.dense_hidden];
    dense(&pool2, &params.dense1_w.data, &params.dense1_b.data, &mut dense1_pre);
    let dense1_post: Vec<f64> = dense1_pre.iter().map(|&v| v.max(0.0)).collect();
    let mut logits = vec![0.0; s.n_classes];
    dense(&dense1_post, &params.dense2_w.data, &params.dense2_b.data, &mut logits);

    Ok(CnnTrace {
        input,
        conv1_pre,
        pool1,
        pool1_src,
        conv2_pre,
        pool2,
        pool2_src,
        dense1_pre,
        dense1_post,
        logits,
    })
}

pub fn cnn_forward(params: &CnnParams, fm: &FeatureMatrix) -> Result<Vec<f64>> {
    Ok(cnn_forward_trace(params, fm)?.logits)
}

pub fn cnn_to_model_file(params: &CnnParams, norm: &Standardizer) -> Result<ModelFile> {
    let s = params.shape;
    if norm.mean.len() != s.input_h {
        return Err(Error::invalid(format!(
            "normalization has {} bands, model input has {}",
            norm.mean.len(),
            s.input_h
        )));
    }
    let mut file = ModelFile::new(ArchId::CnnF64);
    file.tensors = models::params_to_named(params);
    file.tensors.extend(norm.to_tensors());
    file.tensors.push(models::input_dims_tensor(s.input_h, s.input_w));
    Ok(file)
}

pub fn cnn_from_model_file(file: &ModelFile) -> Result<(CnnParams, Standardizer)> {
    if file.arch != ArchId::CnnF64 {
        return Err(Error::InvalidModel("not a float CNN model".into()));
    }
    let (input_h, input_w) = models::read_input_dims(file)?;
    let dims_of = |name: &str| -> Result<Vec<usize>> {
        Ok(file.require(name)?.dims.clone())
    };
    let conv1 = dims_of("conv1.w")?;
    let conv2 = dims_of("conv2.w")?;
    let dense1 = dims_of("dense1.w")?;
    let dense2 = dims_of("dense2.w")?;
    if conv1.len() != 4 || conv2.len() != 4 || dense1.len() != 2 || dense2.len() != 2 {
        return Err(Error::InvalidModel("unexpected weight ranks".into()));
    }
    let shape = CnnShape {
        input_h,
        input_w,
        conv1_filters: conv1[0],
        conv2_filters: conv2[0],
        dense_hidden: dense2[0],
        n_classes: dense2[1],
    };
    shape.validate()?;
    if dense1[0] != shape.flat_len() {
        return Err(Error::InvalidModel(format!(
            "dense input {} does not match {} pooled activations",
            dense1[0],
            shape.flat_len()
        )));
    }
    let mut params = CnnParams::zeros(shape);
    models::fill_params_from_file(&mut params, file)?;
    let norm = Standardizer::from_file(file, input_h)?;
    Ok((params, norm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::FeatureConfig;

    fn random_features(shape: &CnnShape, seed: u64) -> FeatureMatrix {
        let mut rng = Rng::new(seed);
        let values: Vec<f64> = (0..shape.input_h * shape.input_w)
            .map(|_| rng.uniform(-2.0, 2.0))
            .collect();
        FeatureMatrix::from_values(
            shape.input_h,
            shape.input_w,
            values,
            FeatureConfig::default(),
        )
    }

    #[test]
    fn base_shape_parameter_count() {
        let p = CnnParams::init(CnnShape::base(), 0).unwrap();
        assert_eq!(p.param_count(), 173_411);
        assert_eq!(p.shape.flat_len(), 5376);
    }

    #[test]
    fn stage_dimensions_match_the_design() {
        let s = CnnShape::base();
        assert_eq!((s.pool1_h(), s.pool1_w()), (32, 42));
        assert_eq!((s.pool2_h(), s.pool2_w()), (16, 21));
        let p = CnnParams::init(s, 1).unwrap();
        let trace = cnn_forward_trace(&p, &random_features(&s, 2)).unwrap();
        assert_eq!(trace.conv1_pre.len(), 8 * 64 * 85);
        assert_eq!(trace.pool1.len(), 8 * 32 * 42);
        assert_eq!(trace.conv2_pre.len(), 16 * 32 * 42);
        assert_eq!(trace.pool2.len(), 16 * 16 * 21);
        assert_eq!(trace.dense1_pre.len(), 32);
        assert_eq!(trace.logits.len(), 3);
    }

    #[test]
    fn init_is_seeded_bounded_and_zero_biased() {
        let a = CnnParams::init(CnnShape::base(), 9).unwrap();
        let b = CnnParams::init(CnnShape::base(), 9).unwrap();
        assert_eq!(a, b);
        let c = CnnParams::init(CnnShape::base(), 10).unwrap();
        assert_ne!(a, c);
        let bound = (6.0f64 / (9.0 + 72.0)).sqrt();
        let max_w = a.conv1_w.data.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        assert!(max_w <= bound);
        assert!(max_w > 0.8 * bound, "fill should use the whole range");
        for bias in [&a.conv1_b, &a.conv2_b, &a.dense1_b, &a.dense2_b] {
            assert!(bias.data.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_logits() {
        let s = CnnShape::base();
        let p = CnnParams::init(s, 3).unwrap();
        let fm = FeatureMatrix::from_values(
            s.input_h,
            s.input_w,
            vec![0.0; s.input_h * s.input_w],
            FeatureConfig::default(),
        );
        let logits = cnn_forward(&p, &fm).unwrap();
        assert_eq!(logits, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn forward_is_positively_homogeneous_with_zero_biases() {
        let s = CnnShape::tiny();
        let p = CnnParams::init(s, 7).unwrap();
        let fm = random_features(&s, 8);
        let scaled = FeatureMatrix::from_values(
            s.input_h,
            s.input_w,
            fm.values.iter().map(|v| 2.5 * v).collect(),
            fm.config.clone(),
        );
        let base = cnn_forward(&p, &fm).unwrap();
        let big = cnn_forward(&p, &scaled).unwrap();
        for (a, b) in base.iter().zip(&big) {
            assert!((2.5 * a - b).abs() < 1e-9 * b.abs().max(1.0));
        }
    }

    #[test]
    fn forward_is_pure() {
        let s = CnnShape::tiny();
        let p = CnnParams::init(s, 5).unwrap();
        let fm = random_features(&s, 6);
        assert_eq!(cnn_forward(&p, &fm).unwrap(), cnn_forward(&p, &fm).unwrap());
    }

    #[test]
    fn pool_tie_breaks_to_first_in_row_major_order() {
        let pre = vec![1.0, 1.0, 1.0, 1.0]; // one channel, 2x2, all equal
        let mut out = vec![0.0; 1];
        let mut src = vec![0usize; 1];
        relu_maxpool(&pre, 1, 2, 2, &mut out, &mut src);
        assert_eq!(out[0], 1.0);
        assert_eq!(src[0], 0);
        // A later strict maximum does win.
        let pre2 = vec![1.0, 1.0, 1.0, 2.0];
        relu_maxpool(&pre2, 1, 2, 2, &mut out, &mut src);
        assert_eq!(src[0], 3);
        // All-negative cells pool to zero (the ReLU floor).
        let pre3 = vec![-1.0, -2.0, -3.0, -4.0];
        relu_maxpool(&pre3, 1, 2, 2, &mut out, &mut src);
        assert_eq!(out[0], 0.0);
    }

    #[test]
    fn odd_sizes_floor_on_pooling() {
        let s = CnnShape::for_input(5, 7);
        assert_eq!((s.pool1_h(), s.pool1_w()), (2, 3));
        assert_eq!((s.pool2_h(), s.pool2_w()), (1, 1));
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let p = CnnParams::init(CnnShape::base(), 0).unwrap();
        let fm = FeatureMatrix::from_values(32, 85, vec![0.0; 32 * 85], FeatureConfig::default());
        assert!(cnn_forward(&p, &fm).is_err());
    }

    #[test]
    fn model_file_roundtrip_preserves_params_and_norm() {
        let p = CnnParams::init(CnnShape::base(), 21).unwrap();
        let norm = Standardizer {
            mean: (0..64).map(|i| i as f64 * 0.1 - 3.0).collect(),
            std: (0..64).map(|i| 1.0 + i as f64 * 0.01).collect(),
        };
        let file = cnn_to_model_file(&p, &norm).unwrap();
        let bytes = file.to_bytes().unwrap();
        let (p2, norm2) = cnn_from_model_file(&ModelFile::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(p2, p);
        assert_eq!(norm2, norm);
    }

    #[test]
    fn model_file_rejects_the_wrong_arch_and_band_count() {
        let p = CnnParams::init(CnnShape::base(), 22).unwrap();
        let norm = Standardizer::identity(64);
        let mut file = cnn_to_model_file(&p, &norm).unwrap();
        file.arch = crate::models::ArchId::AstF64;
        assert!(cnn_from_model_file(&file).is_err());
        assert!(cnn_to_model_file(&p, &Standardizer::identity(32)).is_err());
    }
}
