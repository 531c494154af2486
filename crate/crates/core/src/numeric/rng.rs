use crate::numeric::Tensor;

/// Deterministic seeded generator: xoshiro256++ state initialized through
/// splitmix64, with polar Box-Muller for normals (the spare draw is cached
/// and part of the serialized state).
///
/// Identical seeds give identical streams across platforms and runs. Child
/// streams come from [`RngState::split`], never from sharing one state.
#[derive(Debug, Clone, PartialEq)]
pub struct RngState {
    seed: u64,
    s: [u64; 4],
    spare: Option<f64>,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        let mut sm = seed;
        let s = [
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
        ];
        RngState {
            seed,
            s,
            spare: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Derive an independent child stream. The child seed is
    /// splitmix64(seed XOR splitmix64(stream_index)), so children for
    /// distinct indices are decorrelated and reproducible.
    pub fn split(&self, stream_index: u64) -> RngState {
        let mut h = stream_index;
        let mixed = splitmix64(&mut h);
        let mut m = self.seed ^ mixed;
        RngState::new(splitmix64(&mut m))
    }

    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.s;
        let result = s[0]
            .wrapping_add(s[3])
            .rotate_left(23)
            .wrapping_add(s[0]);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [lo, hi] inclusive.
    pub fn uniform_int(&mut self, lo: i64, hi: i64) -> i64 {
        debug_assert!(lo <= hi);
        let span = (hi - lo + 1) as u64;
        lo + (self.next_u64() % span) as i64
    }

    /// Standard normal draw via polar Box-Muller. Rejection loop: draw
    /// (u, v) uniform on [-1,1)^2 until 0 < s = u^2+v^2 < 1, then both
    /// u*sqrt(-2 ln s / s) and v*sqrt(-2 ln s / s) are N(0,1); the second
    /// is cached as the spare.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        loop {
            let u = 2.0 * self.uniform() - 1.0;
            let v = 2.0 * self.uniform() - 1.0;
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                let f = (-2.0 * s.ln() / s).sqrt();
                self.spare = Some(v * f);
                return u * f;
            }
        }
    }

    pub fn normal_tensor(&mut self, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| self.normal()).collect();
        Tensor::new(shape.to_vec(), data).expect("shape/data consistent by construction")
    }

    /// Full state as words; restoring continues the identical stream.
    pub fn save_state(&self) -> Vec<u64> {
        let mut words = vec![self.seed, self.s[0], self.s[1], self.s[2], self.s[3]];
        match self.spare {
            Some(z) => {
                words.push(1);
                words.push(z.to_bits());
            }
            None => words.push(0),
        }
        words
    }

    pub fn restore_state(words: &[u64]) -> Option<RngState> {
        if words.len() < 6 {
            return None;
        }
        let spare = match words[5] {
            0 => None,
            1 => Some(f64::from_bits(*words.get(6)?)),
            _ => return None,
        };
        Some(RngState {
            seed: words[0],
            s: [words[1], words[2], words[3], words[4]],
            spare,
        })
    }
}
