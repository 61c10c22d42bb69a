//! Physics-driven MRI reconstruction with an FFT-free data-fidelity unit and an
//! int8-quantized CNN regularizer.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: complex image types and deterministic reductions
//! - [`fourier`]: orthonormal DFTs with a transform counter
//! - [`sim`]: phantoms, coil maps, equispaced masks and the k-space encoding operator
//! - [`fftfree`]: the image-domain foldover operator and its aliasing-set systems
//! - [`solve`]: CG, the data-fidelity update and the CG-SENSE baseline
//! - [`nn`] / [`quant`]: float and int8 ResNet regularizers
//! - [`recon`]: the unrolled variable-splitting pipeline
//! - [`train`]: loss, backprop and Adam training of the regularizer
//! - [`eval`]: PSNR, SSIM and the benchmark report
//! - [`format`]: binary dataset, weight and image files

pub mod error;
pub mod eval;
pub mod fftfree;
pub mod format;
pub mod fourier;
pub mod nn;
pub mod quant;
pub mod recon;
pub mod sim;
pub mod solve;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use fourier::TransformCounter;
pub use tensor::{ComplexImage, MultiCoilImage, Precision, Real};

pub use num_complex::Complex;
