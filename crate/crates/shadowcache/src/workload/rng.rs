//! Counter-based pseudo-random generator used by every synthetic workload.
//!
//! The algorithm is SplitMix64, fixed here so that any implementation in any
//! language can replay the exact streams:
//!
//! ```text
//! state_0   = seed
//! state_i+1 = state_i + 0x9E3779B97F4A7C15            (wrapping)
//! output_i  = mix(state_i+1), where
//!   mix(z): z ^= z >> 30; z *= 0xBF58476D1CE4E5B9;    (wrapping)
//!           z ^= z >> 27; z *= 0x94D049BB133111EB;    (wrapping)
//!           z ^= z >> 31
//! ```
//!
//! Uniform doubles take the top 53 bits: `(output >> 11) * 2^-53`.
//! Gaussians are Box-Muller over consecutive uniform pairs, with the second
//! value of each pair cached. Independent substreams are derived by hashing
//! the parent seed with a stream tag: `derived = mix(seed ^ mix(tag))`.

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic SplitMix64 stream.
#[derive(Debug, Clone)]
pub struct CounterRng {
    state: u64,
    cached_gaussian: Option<f64>,
}

impl CounterRng {
    pub fn new(seed: u64) -> Self {
        Self { state: seed, cached_gaussian: None }
    }

    /// Independent substream for `tag`, decoupled from draws on `self`.
    pub fn derive(seed: u64, tag: u64) -> Self {
        Self::new(mix(seed ^ mix(tag)))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix(self.state)
    }

    /// Uniform in `[0, 1)` with 53-bit resolution.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via Box-Muller.
    pub fn next_gaussian(&mut self) -> f64 {
        if let Some(g) = self.cached_gaussian.take() {
            return g;
        }
        // Box-Muller needs u1 > 0.
        let u1 = loop {
            let u = self.next_f64();
            if u > 0.0 {
                break u;
            }
        };
        let u2 = self.next_f64();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = 2.0 * std::f64::consts::PI * u2;
        self.cached_gaussian = Some(radius * angle.sin());
        radius * angle.cos()
    }

    pub fn next_gaussian_f32(&mut self) -> f32 {
        self.next_gaussian() as f32
    }

    /// Uniform integer in `[0, bound)` by rejection, bias-free.
    pub fn next_below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0, "bound must be positive");
        let zone = u64::MAX - (u64::MAX % bound);
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % bound;
            }
        }
    }
}
