use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer; used to derive independent sub-seeds.
pub(crate) fn mix(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn seeded(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, salt))
}

// Stream tags so that different consumers of one seed never share a sequence.
pub(crate) const SALT_SPLIT: u64 = 0x0053_504c_4954;
pub(crate) const SALT_INIT: u64 = 0x494e_4954;
pub(crate) const SALT_SHUFFLE: u64 = 0x5348_5546;
pub(crate) const SALT_SAMPLE: u64 = 0x5341_4d50;
pub(crate) const SALT_LAYER: u64 = 0x4c41_5945;
pub(crate) const SALT_SYNTH_FACTORS: u64 = 0x5346_4143;
pub(crate) const SALT_SYNTH_MASK: u64 = 0x534d_4153;
pub(crate) const SALT_SYNTH_NOISE: u64 = 0x534e_4f49;
pub(crate) const SALT_GRADCHECK: u64 = 0x4752_4144;
