//! Road-type classification from tyre noise, end to end on one desk.
//!
//! The crate covers the whole loop: physically grounded synthesis of
//! labeled road-noise audio, log-mel feature extraction, two small
//! classifiers (a CNN and a toy audio spectrogram transformer) trained
//! from scratch, post-training int8 quantization of the CNN, and a
//! streaming runtime that windows live audio and smooths its decisions.

pub mod audio;
pub mod error;
pub mod fft;
pub mod models;
pub mod quant;
pub mod rng;
pub mod runtime;
pub mod signal;
pub mod synth;
pub mod tensor;
pub mod train;

pub use audio::{read_wav, write_wav, AudioClip, SAMPLE_RATE};
pub use error::{Error, Result};
pub use models::{
    ast_forward, cnn_forward, softmax, Arch, AstParams, AstShape, CnnParams, CnnShape, ModelFile,
    Standardizer,
};
pub use quant::{
    calibrate, dequantize, quant_from_model_file, quant_to_model_file, quantize_model,
    quantize_tensor, quantized_forward, QuantParams, QuantizedModel, QuantizedTensor,
};
pub use runtime::{
    bench, flip_rate, smooth, Classifier, ClassificationEvent, LatencyStats, RoadStream,
    StreamConfig,
};
pub use signal::{extract_logmel, FeatureConfig, FeatureMatrix};
pub use synth::{
    band_level, default_profile, read_manifest, synth_clip, synth_corpus, write_manifest,
    CorpusManifest, ManifestEntry, RoadClass, SubProfile, SurfaceProfile, SynthSpec,
};
pub use tensor::Tensor;
pub use train::{
    grad_check, load_examples, train, write_report, LabeledExample, TrainConfig, TrainOutcome,
    TrainReport, TrainedModel,
};
