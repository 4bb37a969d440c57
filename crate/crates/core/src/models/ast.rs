//! Toy audio spectrogram transformer.
//!
//! The log-mel matrix is cut into non-overlapping square patches (columns
//! past the last full patch are dropped), each patch is linearly embedded,
//! a learned class token is prepended, and learned positional embeddings
//! are added. Pre-norm encoder blocks follow: LayerNorm -> multi-head
//! self-attention -> residual, LayerNorm -> two-layer ReLU MLP -> residual.
//! A final LayerNorm feeds a linear head on the class token.

use crate::error::{Error, Result};
use crate::models::{
    self, glorot_fill, softmax, ArchId, ModelFile, NamedTensor, ParamSet, Standardizer, N_CLASSES,
};
use crate::rng::Rng;
use crate::signal::FeatureMatrix;
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AstShape {
    pub input_h: usize,
    pub input_w: usize,
    pub patch: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub mlp_hidden: usize,
    pub n_classes: usize,
}

impl AstShape {
    /// Production geometry: 16 x 16 patches over 64 x 85 features give a
    /// 4 x 5 patch grid, 21 tokens with the class token, width 32.
    pub fn base() -> Self {
        AstShape {
            input_h: 64,
            input_w: 85,
            patch: 16,
            d_model: 32,
            n_heads: 2,
            n_layers: 2,
            mlp_hidden: 64,
            n_classes: N_CLASSES,
        }
    }

    /// Reduced geometry for gradient checking.
    pub fn tiny() -> Self {
        AstShape {
            input_h: 4,
            input_w: 8,
            patch: 4,
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            mlp_hidden: 16,
            n_classes: N_CLASSES,
        }
    }

    pub fn patch_rows(&self) -> usize {
        self.input_h / self.patch
    }
    pub fn patch_cols(&self) -> usize {
        self.input_w / self.patch
    }
    /// Columns actually consumed; the rest are ignored.
    pub fn used_w(&self) -> usize {
        self.patch_cols() * self.patch
    }
    pub fn n_patches(&self) -> usize {
        self.patch_rows() * self.patch_cols()
    }
    /// Patches plus the class token.
    pub fn n_tokens(&self) -> usize {
        self.n_patches() + 1
    }
    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch
    }
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.input_h % self.patch != 0 {
            return Err(Error::invalid("input height must be a multiple of the patch size"));
        }
        if self.input_w < self.patch {
            return Err(Error::invalid("input narrower than one patch"));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::invalid("model width must divide evenly into heads"));
        }
        if self.n_layers == 0 || self.mlp_hidden == 0 {
            return Err(Error::invalid("layer counts must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AstLayerParams {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub wq: Tensor, // [d, d]
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub mlp_w1: Tensor, // [d, mlp]
    pub mlp_b1: Tensor,
    pub mlp_w2: Tensor, // [mlp, d]
    pub mlp_b2: Tensor,
}

impl AstLayerParams {
    fn zeros(d: usize, mlp: usize) -> Self {
        AstLayerParams {
            ln1_g: Tensor::zeros(&[d]),
            ln1_b: Tensor::zeros(&[d]),
            wq: Tensor::zeros(&[d, d]),
            bq: Tensor::zeros(&[d]),
            wk: Tensor::zeros(&[d, d]),
            bk: Tensor::zeros(&[d]),
            wv: Tensor::zeros(&[d, d]),
            bv: Tensor::zeros(&[d]),
            wo: Tensor::zeros(&[d, d]),
            bo: Tensor::zeros(&[d]),
            ln2_g: Tensor::zeros(&[d]),
            ln2_b: Tensor::zeros(&[d]),
            mlp_w1: Tensor::zeros(&[d, mlp]),
            mlp_b1: Tensor::zeros(&[mlp]),
            mlp_w2: Tensor::zeros(&[mlp, d]),
            mlp_b2: Tensor::zeros(&[d]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AstParams {
    pub shape: AstShape,
    pub cls_token: Tensor, // [1, d]
    pub patch_w: Tensor,   // [patch*patch, d]
    pub patch_b: Tensor,   // [d]
    pub pos_embed: Tensor, // [tokens, d]
    pub layers: Vec<AstLayerParams>,
    pub ln_f_g: Tensor,
    pub ln_f_b: Tensor,
    pub head_w: Tensor, // [d, classes]
    pub head_b: Tensor, // [classes]
}

impl AstParams {
    pub fn zeros(shape: AstShape) -> Self {
        let d = shape.d_model;
        AstParams {
            shape,
            cls_token: Tensor::zeros(&[1, d]),
            patch_w: Tensor::zeros(&[shape.patch_dim(), d]),
            patch_b: Tensor::zeros(&[d]),
            pos_embed: Tensor::zeros(&[shape.n_tokens(), d]),
            layers: (0..shape.n_layers)
                .map(|_| AstLayerParams::zeros(d, shape.mlp_hidden))
                .collect(),
            ln_f_g: Tensor::zeros(&[d]),
            ln_f_b: Tensor::zeros(&[d]),
            head_w: Tensor::zeros(&[d, shape.n_classes]),
            head_b: Tensor::zeros(&[shape.n_classes]),
        }
    }

    /// Glorot-uniform projections, unit norm gains, everything else zero.
    /// Positional embeddings start at zero and are learned. One RNG stream
    /// in declaration order pins the whole set to the seed.
    pub fn init(shape: AstShape, seed: u64) -> Result<Self> {
        shape.validate()?;
        let d = shape.d_model;
        let mut p = AstParams::zeros(shape);
        let mut rng = Rng::new(seed);
        glorot_fill(&mut p.cls_token, d, d, &mut rng);
        glorot_fill(&mut p.patch_w, shape.patch_dim(), d, &mut rng);
        for layer in &mut p.layers {
            layer.ln1_g.data.fill(1.0);
            glorot_fill(&mut layer.wq, d, d, &mut rng);
            glorot_fill(&mut layer.wk, d, d, &mut rng);
            glorot_fill(&mut layer.wv, d, d, &mut rng);
            glorot_fill(&mut layer.wo, d, d, &mut rng);
            layer.ln2_g.data.fill(1.0);
            glorot_fill(&mut layer.mlp_w1, d, shape.mlp_hidden, &mut rng);
            glorot_fill(&mut layer.mlp_w2, shape.mlp_hidden, d, &mut rng);
        }
        p.ln_f_g.data.fill(1.0);
        glorot_fill(&mut p.head_w, d, shape.n_classes, &mut rng);
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        AstParams::zeros(self.shape)
    }
}

impl ParamSet for AstParams {
    fn tensor_names(&self) -> Vec<String> {
        let mut names = vec![
            "cls_token".to_string(),
            "patch_embed.w".to_string(),
            "patch_embed.b".to_string(),
            "pos_embed".to_string(),
        ];
        for i in 0..self.layers.len() {
            for field in [
                "ln1.gamma", "ln1.beta", "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv",
                "attn.bv", "attn.wo", "attn.bo", "ln2.gamma", "ln2.beta", "mlp.w1", "mlp.b1",
                "mlp.w2", "mlp.b2",
            ] {
                names.push(format!("enc{i}.{field}"));
            }
        }
        names.extend(
            ["ln_f.gamma", "ln_f.beta", "head.w", "head.b"].iter().map(|s| s.to_string()),
        );
        names
    }

    fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.cls_token, &self.patch_w, &self.patch_b, &self.pos_embed];
        for l in &self.layers {
            out.extend([
                &l.ln1_g, &l.ln1_b, &l.wq, &l.bq, &l.wk, &l.bk, &l.wv, &l.bv, &l.wo, &l.bo,
                &l.ln2_g, &l.ln2_b, &l.mlp_w1, &l.mlp_b1, &l.mlp_w2, &l.mlp_b2,
            ]);
        }
        out.extend([&self.ln_f_g, &self.ln_f_b, &self.head_w, &self.head_b]);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> =
            vec![&mut self.cls_token, &mut self.patch_w, &mut self.patch_b, &mut self.pos_embed];
        for l in &mut self.layers {
            out.push(&mut l.ln1_g);
            out.push(&mut l.ln1_b);
            out.push(&mut l.wq);
            out.push(&mut l.bq);
            out.push(&mut l.wk);
            out.push(&mut l.bk);
            out.push(&mut l.wv);
            out.push(&mut l.bv);
            out.push(&mut l.wo);
            out.push(&mut l.bo);
            out.push(&mut l.ln2_g);
            out.push(&mut l.ln2_b);
            out.push(&mut l.mlp_w1);
            out.push(&mut l.mlp_b1);
            out.push(&mut l.mlp_w2);
            out.push(&mut l.mlp_b2);
        }
        out.push(&mut self.ln_f_g);
        out.push(&mut self.ln_f_b);
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }
}

/// Per-row LayerNorm cache: normalized values and 1/sqrt(var + eps).
#[derive(Clone, Debug)]
pub struct LnTrace {
    pub xhat: Vec<f64>,    // [rows * d]
    pub inv_std: Vec<f64>, // [rows]
}

#[derive(Clone, Debug)]
pub struct AstLayerTrace {
    pub x_in: Vec<f64>, // [T * d], block input
    pub ln1: LnTrace,
    pub q: Vec<f64>,         // [T * d]
    pub k: Vec<f64>,         // [T * d]
    pub v: Vec<f64>,         // [T * d]
    pub probs: Vec<f64>,     // [heads * T * T], softmaxed attention rows
    pub heads_out: Vec<f64>, // [T * d], concatenated head outputs
    pub x_mid: Vec<f64>,     // [T * d], after the attention residual
    pub ln2: LnTrace,
    pub mlp_pre: Vec<f64>,  // [T * mlp]
    pub mlp_post: Vec<f64>, // [T * mlp]
}

#[derive(Clone, Debug)]
pub struct AstTrace {
    pub patches: Vec<f64>, // [n_patches * patch_dim]
    pub x0: Vec<f64>,      // [T * d], embedded sequence
    pub layers: Vec<AstLayerTrace>,
    pub x_final: Vec<f64>, // [T * d]
    pub final_ln: LnTrace, // class token row only
    pub logits: Vec<f64>,
}

/// x [rows, d_in] @ w [d_in, d_out] + b, row-major throughout.
pub(crate) fn linear(x: &[f64], rows: usize, d_in: usize, w: &[f64], b: &[f64], out: &mut [f64]) {
    let d_out = b.len();
    debug_assert_eq!(x.len(), rows * d_in);
    debug_assert_eq!(w.len(), d_in * d_out);
    debug_assert_eq!(out.len(), rows * d_out);
    for r in 0..rows {
        let xr = &x[r * d_in..(r + 1) * d_in];
        let or = &mut out[r * d_out..(r + 1) * d_out];
        or.copy_from_slice(b);
        for (i, &xv) in xr.iter().enumerate() {
            let wrow = &w[i * d_out..(i + 1) * d_out];
            for (o, wv) in or.iter_mut().zip(wrow) {
                *o += xv * wv;
            }
        }
    }
}

/// Row-wise LayerNorm with affine gain and shift.
pub(crate) fn layer_norm(
    x: &[f64],
    rows: usize,
    d: usize,
    gamma: &[f64],
    beta: &[f64],
    out: &mut [f64],
) -> LnTrace {
    let mut xhat = vec![0.0; rows * d];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std[r] = is;
        for c in 0..d {
            let h = (xr[c] - mean) * is;
            xhat[r * d + c] = h;
            out[r * d + c] = gamma[c] * h + beta[c];
        }
    }
    LnTrace { xhat, inv_std }
}

/// Cut the used columns into row-major patch vectors; token order is
/// patch-row major.
pub(crate) fn extract_patches(fm: &FeatureMatrix, shape: &AstShape) -> Vec<f64> {
    let p = shape.patch;
    let mut patches = vec![0.0; shape.n_patches() * shape.patch_dim()];
    for py in 0..shape.patch_rows() {
        for px in 0..shape.patch_cols() {
            let t = py * shape.patch_cols() + px;
            let base = t * shape.patch_dim();
            for dy in 0..p {
                for dx in 0..p {
                    patches[base + dy * p + dx] = fm.at(py * p + dy, px * p + dx);
                }
            }
        }
    }
    patches
}

pub fn ast_forward_trace(params: &AstParams, fm: &FeatureMatrix) -> Result<AstTrace> {
    let s = params.shape;
    if fm.n_mels != s.input_h || fm.n_frames != s.input_w {
        return Err(Error::invalid(format!(
            "feature matrix {}x{} does not match model input {}x{}",
            fm.n_mels, fm.n_frames, s.input_h, s.input_w
        )));
    }
    let d = s.d_model;
    let t_n = s.n_tokens();
    let hd = s.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();

    let patches = extract_patches(fm, &s);
    let mut x0 = vec![0.0; t_n * d];
    x0[..d].copy_from_slice(&params.cls_token.data);
    linear(
        &patches,
        s.n_patches(),
        s.patch_dim(),
        &params.patch_w.data,
        &params.patch_b.data,
        &mut x0[d..],
    );
    for (xv, pv) in x0.iter_mut().zip(&params.pos_embed.data) {
        *xv += pv;
    }

    let mut x = x0.clone();
    let mut layers = Vec::with_capacity(s.n_layers);
    for lp in &params.layers {
        let x_in = x.clone();
        let mut h = vec![0.0; t_n * d];
        let ln1 = layer_norm(&x_in, t_n, d, &lp.ln1_g.data, &lp.ln1_b.data, &mut h);

        let mut q = vec![0.0; t_n * d];
        let mut k = vec![0.0; t_n * d];
        let mut v = vec![0.0; t_n * d];
        linear(&h, t_n, d, &lp.wq.data, &lp.bq.data, &mut q);
        linear(&h, t_n, d, &lp.wk.data, &lp.bk.data, &mut k);
        linear(&h, t_n, d, &lp.wv.data, &lp.bv.data, &mut v);

        let mut probs = vec![0.0; s.n_heads * t_n * t_n];
        let mut heads_out = vec![0.0; t_n * d];
        for head in 0..s.n_heads {
            let off = head * hd;
            for i in 0..t_n {
                let qi = &q[i * d + off..i * d + off + hd];
                let mut scores = vec![0.0; t_n];
                for j in 0..t_n {
                    let kj = &k[j * d + off..j * d + off + hd];
                    scores[j] = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
                }
                let row = softmax(&scores);
                let o = &mut heads_out[i * d + off..i * d + off + hd];
                for j in 0..t_n {
                    let vj = &v[j * d + off..j * d + off + hd];
                    for (ov, vv) in o.iter_mut().zip(vj) {
                        *ov += row[j] * vv;
                    }
                }
                probs[(head * t_n + i) * t_n..(head * t_n + i + 1) * t_n].copy_from_slice(&row);
            }
        }
        let mut attn_out = vec![0.0; t_n * d];
        linear(&heads_out, t_n, d, &lp.wo.data, &lp.bo.data, &mut attn_out);
        let x_mid: Vec<f64> = x_in.iter().zip(&attn_out).map(|(a, b)| a + b).collect();

        let mut h2 = vec![0.0; t_n * d];
        let ln2 = layer_norm(&x_mid, t_n, d, &lp.ln2_g.data, &lp.ln2_b.data, &mut h2);
        let mut mlp_pre = vec![0.0; t_n * s.mlp_hidden];
        linear(&h2, t_n, d, &lp.mlp_w1.data, &lp.mlp_b1.data, &mut mlp_pre);
        let mlp_post: Vec<f64> = mlp_pre.iter().map(|&u| u.max(0.0)).collect();
        let mut mlp_out = vec![0.0; t_n * d];
        linear(&mlp_post, t_n, s.mlp_hidden, &lp.mlp_w2.data, &lp.mlp_b2.data, &mut mlp_out);
        for (xv, (m, o)) in x.iter_mut().zip(x_mid.iter().zip(&mlp_out)) {
            *xv = m + o;
        }

        layers.push(AstLayerTrace {
            x_in,
            ln1,
            q,
            k,
            v,
            probs,
            heads_out,
            x_mid,
            ln2,
            mlp_pre,
            mlp_post,
        });
    }

    // Only the class token reaches the head, so the final norm is applied
    // to that row alone.
    let x_final = x;
    let mut cls_norm = vec![0.0; d];
    let final_ln =
        layer_norm(&x_final[..d], 1, d, &params.ln_f_g.data, &params.ln_f_b.data, &mut cls_norm);
    let mut logits = vec![0.0; s.n_classes];
    linear(&cls_norm, 1, d, &params.head_w.data, &params.head_b.data, &mut logits);

    Ok(AstTrace { patches, x0, layers, x_final, final_ln, logits })
}

pub fn ast_forward(params: &AstParams, fm: &FeatureMatrix) -> Result<Vec<f64>> {
    Ok(ast_forward_trace(params, fm)?.logits)
}

/// Head count is stored as its own meta tensor; nothing in the projection
/// shapes records how the width splits.
const N_HEADS_NAME: &str = "attn.n_heads";

pub fn ast_to_model_file(params: &AstParams, norm: &Standardizer) -> Result<ModelFile> {
    let s = params.shape;
    if norm.mean.len() != s.input_h {
        return Err(Error::invalid(format!(
            "normalization has {} bands, model input has {}",
            norm.mean.len(),
            s.input_h
        )));
    }
    let mut file = ModelFile::new(ArchId::AstF64);
    file.tensors = models::params_to_named(params);
    file.tensors.extend(norm.to_tensors());
    file.tensors.push(models::input_dims_tensor(s.input_h, s.input_w));
    file.tensors.push(NamedTensor::scalar(N_HEADS_NAME, s.n_heads as f64));
    Ok(file)
}

pub fn ast_from_model_file(file: &ModelFile) -> Result<(AstParams, Standardizer)> {
    if file.arch != ArchId::AstF64 {
        return Err(Error::InvalidModel("not a float AST model".into()));
    }
    let (input_h, input_w) = models::read_input_dims(file)?;
    let patch_dims = file.require("patch_embed.w")?.dims.clone();
    let pos_dims = file.require("pos_embed")?.dims.clone();
    let mlp_dims = file.require("enc0.mlp.w1")?.dims.clone();
    let head_dims = file.require("head.w")?.dims.clone();
    if patch_dims.len() != 2 || pos_dims.len() != 2 || mlp_dims.len() != 2
        || head_dims.len() != 2
    {
        return Err(Error::InvalidModel("unexpected weight ranks".into()));
    }
    let patch = (patch_dims[0] as f64).sqrt().round() as usize;
    if patch * patch != patch_dims[0] {
        return Err(Error::InvalidModel("patch embedding is not square".into()));
    }
    let heads_t = file.require(N_HEADS_NAME)?;
    let heads_v = heads_t.data.as_f64()?;
    if heads_v.len() != 1 || heads_v[0].fract() != 0.0 || heads_v[0] < 1.0 {
        return Err(Error::InvalidModel("bad head count".into()));
    }
    let mut n_layers = 0;
    while file.get(&format!("enc{n_layers}.ln1.gamma")).is_some() {
        n_layers += 1;
    }
    let shape = AstShape {
        input_h,
        input_w,
        patch,
        d_model: patch_dims[1],
        n_heads: heads_v[0] as usize,
        n_layers,
        mlp_hidden: mlp_dims[1],
        n_classes: head_dims[1],
    };
    shape.validate()?;
    if pos_dims[0] != shape.n_tokens() {
        return Err(Error::InvalidModel(format!(
            "{} positional rows for {} tokens",
            pos_dims[0],
            shape.n_tokens()
        )));
    }
    let mut params = AstParams::zeros(shape);
    models::fill_params_from_file(&mut params, file)?;
    let norm = Standardizer::from_file(file, input_h)?;
    Ok((params, norm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::FeatureConfig;

    fn random_features(h: usize, w: usize, seed: u64) -> FeatureMatrix {
        let mut rng = Rng::new(seed);
        let values: Vec<f64> = (0..h * w).map(|_| rng.uniform(-2.0, 2.0)).collect();
        FeatureMatrix::from_values(h, w, values, FeatureConfig::default())
    }

    #[test]
    fn base_shape_parameter_count_and_tokens() {
        let s = AstShape::base();
        assert_eq!(s.n_tokens(), 21);
        assert_eq!(s.used_w(), 80);
        let p = AstParams::init(s, 0).unwrap();
        assert_eq!(p.param_count(), 26_179);
        assert_eq!(p.tensor_names().len(), p.tensors().len());
    }

    #[test]
    fn attention_rows_are_probability_distributions() {
        let s = AstShape::base();
        let p = AstParams::init(s, 1).unwrap();
        let trace = ast_forward_trace(&p, &random_features(64, 85, 2)).unwrap();
        let t_n = s.n_tokens();
        for layer in &trace.layers {
            for row in layer.probs.chunks(t_n) {
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-12, "row sums to {sum}");
                assert!(row.iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn zero_query_and_key_projections_attend_uniformly() {
        let s = AstShape::tiny();
        let mut p = AstParams::init(s, 3).unwrap();
        for l in &mut p.layers {
            l.wq.data.fill(0.0);
            l.bq.data.fill(0.0);
            l.wk.data.fill(0.0);
            l.bk.data.fill(0.0);
        }
        let trace = ast_forward_trace(&p, &random_features(4, 8, 4)).unwrap();
        let t_n = s.n_tokens();
        let expect = 1.0 / t_n as f64;
        for &pv in &trace.layers[0].probs {
            assert!((pv - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn patch_order_does_not_matter_without_positions() {
        // Initial positional embeddings are zero, so swapping the two
        // patches of the tiny input must leave the class logits unchanged.
        let s = AstShape::tiny();
        let p = AstParams::init(s, 5).unwrap();
        assert!(p.pos_embed.data.iter().all(|&v| v == 0.0));
        let fm = random_features(4, 8, 6);
        let mut swapped = fm.values.clone();
        for row in 0..4 {
            for col in 0..4 {
                swapped.swap(row * 8 + col, row * 8 + col + 4);
            }
        }
        let fm2 = FeatureMatrix::from_values(4, 8, swapped, fm.config.clone());
        let a = ast_forward(&p, &fm).unwrap();
        let b = ast_forward(&p, &fm2).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn columns_past_the_last_full_patch_are_ignored() {
        let s = AstShape::base();
        let p = AstParams::init(s, 7).unwrap();
        let fm = random_features(64, 85, 8);
        let mut altered = fm.values.clone();
        for row in 0..64 {
            for col in 80..85 {
                altered[row * 85 + col] = 1e6;
            }
        }
        let fm2 = FeatureMatrix::from_values(64, 85, altered, fm.config.clone());
        assert_eq!(ast_forward(&p, &fm).unwrap(), ast_forward(&p, &fm2).unwrap());
    }

    #[test]
    fn init_is_seeded_and_structured() {
        let s = AstShape::base();
        let a = AstParams::init(s, 11).unwrap();
        let b = AstParams::init(s, 11).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, AstParams::init(s, 12).unwrap());
        assert!(a.layers[0].ln1_g.data.iter().all(|&v| v == 1.0));
        assert!(a.layers[1].ln2_b.data.iter().all(|&v| v == 0.0));
        assert!(a.pos_embed.data.iter().all(|&v| v == 0.0));
        assert_eq!(a.pos_embed.dims, vec![21, 32]);
    }

    #[test]
    fn forward_is_pure_and_shape_checked() {
        let s = AstShape::tiny();
        let p = AstParams::init(s, 13).unwrap();
        let fm = random_features(4, 8, 14);
        assert_eq!(ast_forward(&p, &fm).unwrap(), ast_forward(&p, &fm).unwrap());
        let bad = random_features(8, 8, 15);
        assert!(ast_forward(&p, &bad).is_err());
    }

    #[test]
    fn model_file_roundtrip_preserves_params_and_norm() {
        let p = AstParams::init(AstShape::base(), 31).unwrap();
        let norm = Standardizer {
            mean: (0..64).map(|i| i as f64 * 0.2 - 6.0).collect(),
            std: (0..64).map(|i| 0.5 + i as f64 * 0.02).collect(),
        };
        let file = ast_to_model_file(&p, &norm).unwrap();
        let bytes = file.to_bytes().unwrap();
        let (p2, norm2) = ast_from_model_file(&ModelFile::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(p2, p);
        assert_eq!(norm2, norm);
        assert_eq!(p2.shape.n_heads, 2);
        assert_eq!(p2.shape.n_layers, 2);
    }

    #[test]
    fn geometry_validation_rejects_misfits() {
        let mut s = AstShape::base();
        s.input_h = 60; // not a multiple of 16
        assert!(s.validate().is_err());
        let mut s2 = AstShape::base();
        s2.n_heads = 3; // 32 not divisible
        assert!(s2.validate().is_err());
        let mut s3 = AstShape::base();
        s3.input_w = 10; // narrower than a patch
        assert!(s3.validate().is_err());
    }
}
