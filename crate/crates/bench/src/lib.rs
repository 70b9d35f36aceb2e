//! Shared inputs for the criterion benches.

use mi2v_core::attention::{AttentionParams, BenchShape};
use mi2v_core::{random_normal, Rng, Tensor};

/// The benchmark attention shape: one batch, four heads of width 32.
pub const SHAPE: BenchShape = BenchShape {
    batch: 1,
    heads: 4,
    head_dim: 32,
};

/// Token count of a 1280x720, 17-frame clip after the latent encoder.
pub const CLIP_TOKENS: usize = 2760;

pub struct AttentionInput {
    pub params: AttentionParams,
    pub x: Tensor,
}

impl AttentionInput {
    pub fn new(length: usize, seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let c = SHAPE.heads * SHAPE.head_dim;
        let params = AttentionParams::random(c, SHAPE.heads, &mut rng).expect("valid shape");
        let x = random_normal(&mut rng, &[SHAPE.batch, length, c]).expect("valid shape");
        Self { params, x }
    }
}
