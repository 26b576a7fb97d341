//! Minimal CPU neural-network engine: NCHW tensors, convolution kernels,
//! a reverse-mode tape, Adam and checkpoints.

pub mod checkpoint;
pub mod graph;
pub mod kernels;
pub mod layers;
pub mod optim;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use graph::{Graph, NodeId};
pub use kernels::{ConvSpec, PadMode};
pub use layers::{Conv2d, Ctx, Init, ParamStore};
pub use optim::Adam;
pub use tensor::Tensor;

use crate::raster::GrayImage;

/// Maps `[0, 255]` pixels to `[-1, 1]` as a `[1, 1, h, w]` tensor.
pub fn image_to_tensor(img: &GrayImage) -> Tensor {
    Tensor::from_vec(
        [1, 1, img.height(), img.width()],
        img.pixels().iter().map(|&v| v as f32 / 127.5 - 1.0).collect(),
    )
    .expect("image shape")
}

/// Inverse of [`image_to_tensor`] for one single-channel item, clipped.
pub fn tensor_to_image(t: &[f32], width: usize, height: usize) -> GrayImage {
    let v: Vec<f32> = t.iter().map(|&x| (x + 1.0) * 127.5).collect();
    GrayImage::from_f32(width, height, &v).expect("image shape")
}
