//! Simulation draws for the random-coefficients integral.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DrawScheme {
    /// Halton sequence in bases 2, 3, 5, ... with a seeded random shift.
    #[default]
    Halton,
    PseudoRandom,
}

/// Standard-normal taste draws, `count x dims`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Draws {
    pub count: usize,
    pub dims: usize,
    pub values: Vec<f64>,
}

const PRIMES: [u64; 20] = [
    2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71,
];

/// Radical inverse of `index` in `base`.
pub fn halton(mut index: u64, base: u64) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while index > 0 {
        f /= base as f64;
        r += f * (index % base) as f64;
        index /= base;
    }
    r
}

impl Draws {
    pub fn generate(count: usize, dims: usize, scheme: DrawScheme, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = match scheme {
            DrawScheme::PseudoRandom => (0..count * dims)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect(),
            DrawScheme::Halton => {
                assert!(dims <= PRIMES.len(), "at most {} Halton dimensions", PRIMES.len());
                let normal = Normal::standard();
                let shifts: Vec<f64> = (0..dims).map(|_| rng.random::<f64>()).collect();
                let mut v = Vec::with_capacity(count * dims);
                for i in 0..count {
                    for d in 0..dims {
                        let u = (halton(i as u64 + 1, PRIMES[d]) + shifts[d]).fract();
                        v.push(normal.inverse_cdf(u.clamp(1e-12, 1.0 - 1e-12)));
                    }
                }
                v
            }
        };
        Self {
            count,
            dims,
            values,
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dims..(i + 1) * self.dims]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn halton_base_two_prefix() {
        let seq: Vec<f64> = (1..=4).map(|i| halton(i, 2)).collect();
        assert_eq!(seq, vec![0.5, 0.25, 0.75, 0.125]);
        assert!((halton(1, 3) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn halton_draws_have_unit_moments() {
        let d = Draws::generate(4000, 2, DrawScheme::Halton, 3);
        for dim in 0..2 {
            let xs: Vec<f64> = (0..d.count).map(|i| d.row(i)[dim]).collect();
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64;
            assert!(m.abs() < 0.01, "mean {m}");
            assert!((v - 1.0).abs() < 0.02, "var {v}");
        }
    }

    #[test]
    fn draws_are_seeded() {
        for scheme in [DrawScheme::Halton, DrawScheme::PseudoRandom] {
            assert_eq!(Draws::generate(10, 2, scheme, 5), Draws::generate(10, 2, scheme, 5));
            assert_ne!(Draws::generate(10, 2, scheme, 5), Draws::generate(10, 2, scheme, 6));
        }
    }
}
