//! Toy text-conditioned denoiser, its noise schedule, synthetic training
//! scenes, training loop and checkpoint format.

mod checkpoint;
mod denoiser;
mod scene;
mod schedule;
mod train;
mod vocab;

pub use checkpoint::{
    checkpoint_from_str, checkpoint_to_string, load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT,
    CHECKPOINT_VERSION,
};
pub use denoiser::{BoundParams, ModelConfig, Pass, ToyDenoiser, ATTENTION_LAYERS};
pub use scene::{
    make_dataset, make_scene, make_scene_with, parse_manifest, random_manifest, shape_covers, Color,
    ObjectGroup, PlacedObject, SceneConfig, SceneSpec, Shape, SyntheticScene, BACKGROUND,
};
pub use schedule::{forward_noise, NoiseSchedule};
pub use train::{loss_curve_to_csv, train, LossPoint, TrainConfig};
pub use vocab::{TokenVocabulary, COLOR_WORDS, COUNT_WORDS, END_TOKEN, SHAPE_WORDS, START_TOKEN};

use crate::numeric::Tensor;

/// Maps an image in `[0, 1]` to the model's `[-1, 1]` sample space.
pub fn image_to_latent(image: &Tensor) -> Tensor {
    image.map(|v| 2.0 * v - 1.0)
}

/// Inverse of [`image_to_latent`], clamped to `[0, 1]`.
pub fn latent_to_image(z: &Tensor) -> Tensor {
    z.map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0))
}
