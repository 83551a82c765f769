use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer mixing `seed` with `index`; used to derive
/// independent child seeds (per block, per subject, per run).
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-based random stream: a ChaCha8 key plus a 64-bit stream id.
///
/// The stream id for dropout site `site` in forward pass `pass` is
/// `pass * 256 + site`, so every (pass, site) pair reads its own keystream
/// regardless of the order in which passes execute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngStream {
    pub seed: u64,
    pub stream: u64,
}

pub const MAX_SITES: u64 = 256;

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self { seed, stream }
    }

    pub fn for_site(seed: u64, pass: u64, site: usize) -> Self {
        debug_assert!((site as u64) < MAX_SITES);
        Self { seed, stream: pass * MAX_SITES + site as u64 }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.seed);
        r.set_stream(self.stream);
        r
    }
}
