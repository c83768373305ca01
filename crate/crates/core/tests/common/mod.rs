#![allow(dead_code)]

use tilefuse::encoder::{EncoderConfig, InputView};
use tilefuse::fusion::FusionStrategy;
use tilefuse::lm::LmConfig;
use tilefuse::model::{ModelConfig, TilingConfig};
use tilefuse::tiler::ImageBuffer;

pub fn encoder(patch: usize, dim: usize, grid: usize, r: usize) -> EncoderConfig {
    EncoderConfig {
        patch_size: patch,
        embed_dim: dim,
        depth: 1,
        heads: 1,
        grid_side: grid,
        unshuffle_r: r,
        norm_mean: vec![0.5; 3],
        norm_std: vec![0.25; 3],
        frozen: true,
        view: InputView::Full,
    }
}

/// A few thousand parameters: 8-pixel tiles, 4 tokens per tile per branch.
pub fn tiny_model(fusion: FusionStrategy) -> ModelConfig {
    ModelConfig {
        encoder_a: Some(encoder(2, 4, 4, 2)),
        encoder_b: Some(encoder(1, 4, 8, 4)),
        projector_hidden: 8,
        fusion,
        lm: LmConfig {
            d_lm: 8,
            layers: 1,
            heads: 2,
            vocab: 262,
            context_limit: 96,
        },
        tiling: TilingConfig {
            enabled: true,
            max_tiles: 6,
            thumbnail: false,
        },
    }
}

/// The paper-scale shapes: 448-pixel tiles, r = 2 and r = 4 branches.
pub fn paper_encoders() -> (EncoderConfig, EncoderConfig) {
    let mut a = encoder(14, 1024, 32, 2);
    let mut b = encoder(7, 256, 64, 4);
    a.heads = 16;
    b.heads = 16;
    (a, b)
}

pub fn pattern_image(h: usize, w: usize, seed: u64) -> ImageBuffer {
    ImageBuffer::from_fn(h, w, 3, |y, x, c| {
        ((y as u64 * 37 + x as u64 * 11 + c as u64 * 5 + seed * 13) % 29) as f64 / 29.0
    })
    .unwrap()
}

/// A complete experiment small enough to train in well under a second:
/// 32-pixel tiles, a few samples, a handful of steps per stage.
pub fn tiny_experiment(id: &str, kind: &str, width: usize, height: usize) -> serde_json::Value {
    serde_json::json!({
        "id": id,
        "seed": 3,
        "task": {"generate": {
            "kind": kind, "image_width": width, "image_height": height, "tile_size": 32,
            "n_classes": if kind == "complementary" { 16 } else { 8 },
            "n_train": 12, "n_eval": 6, "seed": 3
        }},
        "model": {
            "encoder_a": {"patch_size": 8, "embed_dim": 8, "depth": 1, "heads": 2, "grid_side": 4, "unshuffle_r": 2},
            "encoder_b": {"patch_size": 4, "embed_dim": 4, "depth": 1, "heads": 1, "grid_side": 8, "unshuffle_r": 4},
            "projector_hidden": 8,
            "fusion": "post-interleave",
            "lm": {"d_lm": 8, "layers": 1, "heads": 2, "context_limit": 96},
            "tiling": {"enabled": true}
        },
        "training": {
            "batch_size": 4,
            "stage1": {"lr": 0.01, "steps": 3},
            "stage2": {"lr": 0.01, "steps": 3}
        }
    })
}
