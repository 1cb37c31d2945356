#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rmgpmsi::backbone::BackboneSpec;
use rmgpmsi::image::{ImageTensor, ValueRange};
use rmgpmsi::model::ModelConfig;

/// Three-stage 16×16 backbone with small widths; fast enough for finite
/// differences.
pub fn tiny_model(stage_num: usize, classes: usize, interaction: bool) -> ModelConfig {
    ModelConfig {
        backbone: BackboneSpec {
            stages: 3,
            channels: vec![4, 6, 8],
            input_size: 16,
            input_channels: 3,
            layers_per_stage: 1,
            norm: true,
            bias: true,
        },
        stage_num,
        c: 6,
        mlp_hidden: 6,
        classes,
        interaction,
        input_norm: None,
        init_seed: 5,
    }
}

pub fn random_image(size: usize, seed: u64) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImageTensor::from_fn(size, size, 3, ValueRange::UnitFloat, |_, _, _| rng.gen::<f32>())
}

pub fn bits(values: impl IntoIterator<Item = f64>) -> Vec<u64> {
    values.into_iter().map(f64::to_bits).collect()
}
