//! Shared fixtures for the criterion benches.

use medunic::model::{ModelConfig, ModelParams};
use medunic::synth::ImageGrid;
use medunic::text::{TokenSequence, CLS, PAD, SEP};
use medunic::{seed, Tensor};

/// Desk-scale model with a 200-token vocabulary.
pub fn model() -> ModelParams {
    let cfg = ModelConfig {
        vocab_size: 200,
        max_len: 34,
        d_l: 32,
        heads: 2,
        layers: 4,
        ffn: 64,
        dropout: 0.1,
        image_size: 32,
        patch: 8,
        patch_dim: 16,
        d_v: 32,
        d: 32,
        d_prime: 64,
    };
    ModelParams::init(cfg, 1).expect("valid config")
}

/// `k` reports of 20 tokens padded to 34.
pub fn reports(k: usize) -> Vec<TokenSequence> {
    (0..k)
        .map(|i| {
            let mut ids = vec![CLS];
            ids.extend((0..18).map(|j| 10 + ((i * 7 + j * 13) % 190) as u32));
            ids.push(SEP);
            let mut attention = vec![1; ids.len()];
            ids.resize(34, PAD);
            attention.resize(34, 0);
            TokenSequence { ids, attention }
        })
        .collect()
}

pub fn images(k: usize) -> Vec<ImageGrid> {
    let mut rng = seed::rng(3);
    (0..k)
        .map(|_| ImageGrid {
            size: 32,
            pixels: Tensor::randn(&[32 * 32], 1.0, &mut rng).into_data(),
        })
        .collect()
}

/// Two `[k, d]` standard normal matrices.
pub fn pair(k: usize, d: usize) -> (Tensor, Tensor) {
    let mut rng = seed::rng(seed::derive(2, "bench", (k * 1000 + d) as u64));
    (Tensor::randn(&[k, d], 1.0, &mut rng), Tensor::randn(&[k, d], 1.0, &mut rng))
}
