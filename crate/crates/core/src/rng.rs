use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent ChaCha stream `stream` under `seed`; used for per-trial and
/// per-window randomness so that parallel work is order independent.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// A derived 64-bit seed for APIs that take a plain seed.
pub fn sub_seed(seed: u64, stream: u64) -> u64 {
    use rand::RngCore;
    stream_rng(seed, stream).next_u64()
}
