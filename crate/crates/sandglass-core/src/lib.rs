//! Building blocks for mobile-CNN experiments around the sandglass
//! bottleneck design: NCHW tensors, direct convolutions, competing residual
//! block families, full network builders with a static complexity analyzer,
//! a reverse-mode tape with finite-difference gradient checking, and
//! post-training affine quantization with simulated-quantization inference.
//!
//! Everything is deterministic: fixed seeds produce bitwise-identical
//! weights, forwards, and serialized artifacts across runs.
//!
//! # Quick tour
//!
//! ```
//! use sandglass_core::{analyze, build_model, ModelConfig, Rng, Shape, Tensor};
//!
//! let mut model = build_model::<f32>(&ModelConfig::default()).unwrap();
//! model.init_weights(7).unwrap();
//!
//! let report = analyze(&model, false);
//! assert_eq!(report.total_params, 3_236_064);
//!
//! let mut rng = Rng::new(1);
//! let x = Tensor::random_normal(Shape::new(1, 3, 224, 224), &mut rng, 0.0, 1.0).unwrap();
//! let logits = model.forward(&x).unwrap();
//! assert_eq!(logits.shape(), Shape::new(1, 1000, 1, 1));
//! ```

pub mod blocks;
pub mod complexity;
pub mod error;
pub mod model;
pub mod ops;
pub mod quant;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use blocks::{Activation, BlockGraph, BlockKind, BlockSpec, ConvUnit};
pub use complexity::{analyze, display_millions, ComplexityReport, LayerRow};
pub use error::{Error, Result};
pub use model::{
    build_model, export_model_spec, import_model_spec, load_weights, parse_model_spec,
    read_weights, save_weights, write_weights, Family, ForwardHook, LayerPlacement, ModelBlock,
    ModelConfig, ModelGraph, NoHook, ParsedModelSpec, StageSpec, MOBILENETV2_STAGES,
    MOBILENEXT_STAGES, WEIGHTS_MAGIC,
};
pub use ops::{
    add, batchnorm, conv2d, conv_out_len, global_avgpool, partial_residual_add, partial_split,
    relu6, round_channels, round_half_up, same_padding, BatchNorm, BN_EPS,
};
pub use quant::{
    calibrate, calibrate_tensor, fold_batchnorms, load_quantized, quant_error_report,
    quantize_model, read_quantized, save_quantized, write_quantized, QuantErrorReport,
    QuantOptions, QuantParams, QuantizedModel, QuantizedWeight, SnrRow, QUANT_MAGIC,
};
pub use rng::Rng;
pub use tape::{gradcheck, nudge_from_kinks, GradCheckReport, Gradients, NodeId, Tape};
pub use tensor::{
    read_tensor, read_tensor_file, write_tensor, write_tensor_file, AnyTensor, Dtype, Element,
    Shape, Tensor, TENSOR_MAGIC,
};
