use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ttct_core::encoders::{AlignmentModel, EncoderConfig, Vocab};

/// d = 8, one layer, two heads.
pub fn tiny_model(seed: u64) -> AlignmentModel {
    let cfg = EncoderConfig {
        d_model: 8,
        layers: 1,
        heads: 2,
        ff_dim: 8,
        max_traj_len: 40,
        max_text_len: 64,
        seed,
        ..EncoderConfig::default()
    };
    AlignmentModel::new(cfg, Vocab::build(64), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}
