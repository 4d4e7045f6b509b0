//! Counter-based noise.
//!
//! Gaussian increments are a pure function of
//! `(seed, replica, step, particle, coordinate)`, so any path can be replayed
//! without replaying the ones before it, and the result does not depend on how
//! work is split across threads.

use statrs::function::erf::erfc_inv;

const M0: u32 = 0xD251_1F53;
const M1: u32 = 0xCD9E_8D57;
const W0: u32 = 0x9E37_79B9;
const W1: u32 = 0xBB67_AE85;

#[inline]
fn mulhilo(a: u32, b: u32) -> (u32, u32) {
    let p = u64::from(a) * u64::from(b);
    ((p >> 32) as u32, p as u32)
}

/// Philox4x32 with ten rounds.
pub fn philox4x32(ctr: [u32; 4], key: [u32; 2]) -> [u32; 4] {
    let mut c = ctr;
    let mut k = key;
    for round in 0..10 {
        if round > 0 {
            k[0] = k[0].wrapping_add(W0);
            k[1] = k[1].wrapping_add(W1);
        }
        let (hi0, lo0) = mulhilo(M0, c[0]);
        let (hi1, lo1) = mulhilo(M1, c[2]);
        c = [hi1 ^ c[1] ^ k[0], lo1, hi0 ^ c[3] ^ k[1], lo0];
    }
    c
}

/// splitmix64 finaliser.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Maps 53 random bits to the open interval (0, 1).
#[inline]
pub fn open_unit(bits: u64) -> f64 {
    ((bits >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

/// Standard normal quantile.
#[inline]
pub fn normal_quantile(u: f64) -> f64 {
    -std::f64::consts::SQRT_2 * erfc_inv(2.0 * u)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoiseStream {
    seed: u64,
}

impl NoiseStream {
    pub fn new(seed: u64) -> Self {
        NoiseStream { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream labelled by `tag`.
    pub fn derive(&self, tag: u64) -> Self {
        NoiseStream {
            seed: splitmix64(self.seed ^ splitmix64(tag)),
        }
    }

    fn key(&self) -> [u32; 2] {
        [self.seed as u32, (self.seed >> 32) as u32]
    }

    /// Two uniforms for one coordinate pair.
    pub fn uniform_pair(&self, replica: u32, step: u32, particle: u32, block: u32) -> [f64; 2] {
        let r = philox4x32([replica, step, particle, block], self.key());
        let a = (u64::from(r[0]) << 32) | u64::from(r[1]);
        let b = (u64::from(r[2]) << 32) | u64::from(r[3]);
        [open_unit(a), open_unit(b)]
    }

    /// Fills `out` with standard normals for one `(replica, step, particle)`.
    pub fn normals(&self, replica: u32, step: u32, particle: u32, out: &mut [f64]) {
        for (block, chunk) in out.chunks_mut(2).enumerate() {
            let u = self.uniform_pair(replica, step, particle, block as u32);
            for (slot, ui) in chunk.iter_mut().zip(u) {
                *slot = normal_quantile(ui);
            }
        }
    }

    /// A single standard normal at coordinate `coord`.
    pub fn normal(&self, replica: u32, step: u32, particle: u32, coord: u32) -> f64 {
        let u = self.uniform_pair(replica, step, particle, coord / 2);
        normal_quantile(u[(coord % 2) as usize])
    }

    pub fn uniform(&self, replica: u32, step: u32, particle: u32, coord: u32) -> f64 {
        self.uniform_pair(replica, step, particle, coord / 2)[(coord % 2) as usize]
    }
}
