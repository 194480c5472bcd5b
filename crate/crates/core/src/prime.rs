//! Probabilistic primality and safe-prime search.

use num_bigint::{BigUint, RandBigInt};
use num_integer::Integer;
use num_traits::{One, Zero};
use rand::RngCore;

/// Miller-Rabin rounds used everywhere in the crate.
pub const MR_ROUNDS: usize = 64;

const SMALL_PRIMES: [u32; 54] = [
    3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89, 97, 101, 103, 107, 109, 113, 127, 131, 137,
    139, 149, 151, 157, 163, 167, 173, 179, 181, 191, 193, 197, 199, 211, 223, 227, 229, 233, 239, 241, 251, 257,
];

/// Miller-Rabin with `rounds` random bases drawn from `rng`.
pub fn is_probable_prime<R: RngCore + ?Sized>(n: &BigUint, rounds: usize, rng: &mut R) -> bool {
    let two = BigUint::from(2u32);
    if *n < two {
        return false;
    }
    if *n == two || *n == BigUint::from(3u32) {
        return true;
    }
    if n.is_even() {
        return false;
    }
    for &sp in SMALL_PRIMES.iter() {
        let sp = BigUint::from(sp);
        if *n == sp {
            return true;
        }
        if (n % &sp).is_zero() {
            return false;
        }
    }

    let n_minus_one = n - 1u32;
    let shift = n_minus_one.trailing_zeros().unwrap_or(0);
    let d = &n_minus_one >> shift;
    // bases in [2, n-2]
    let upper = n - 1u32;

    'witness: for _ in 0..rounds {
        let a = rng.gen_biguint_range(&two, &upper);
        let mut x = a.modpow(&d, n);
        if x.is_one() || x == n_minus_one {
            continue;
        }
        for _ in 1..shift {
            x = (&x * &x) % n;
            if x == n_minus_one {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

/// Searches for a safe prime `p = 2q + 1` of exactly `bits` bits.
///
/// Candidates for `q` are walked incrementally from a random start with a
/// small-prime sieve applied to both `q` and `2q + 1`. Returns `None` once
/// `max_candidates` values of `q` have been rejected.
pub fn find_safe_prime<R: RngCore + ?Sized>(bits: u64, max_candidates: usize, rng: &mut R) -> Option<(BigUint, BigUint)> {
    assert!(bits >= 3);
    let q_bits = bits - 1;
    let top = BigUint::one() << (q_bits - 1);
    let limit = BigUint::one() << q_bits;
    // Small sizes: no sieve, the table would reject small primes themselves.
    let sieve = bits > 24;

    let mut tried = 0usize;
    while tried < max_candidates {
        let mut q = rng.gen_biguint_below(&top) + &top;
        q |= BigUint::one();
        let mut residues: Vec<u32> = if sieve {
            SMALL_PRIMES.iter().map(|&sp| (&q % sp).to_u32_digits().first().copied().unwrap_or(0)).collect()
        } else {
            Vec::new()
        };

        // walk a window of odd candidates from this start before resampling
        for _ in 0..4096 {
            if q >= limit || tried >= max_candidates {
                break;
            }
            tried += 1;
            let sieved_out = sieve && SMALL_PRIMES.iter().zip(residues.iter()).any(|(&sp, &r)| r == 0 || (2 * r + 1) % sp == 0);
            if !sieved_out {
                let p = (&q << 1) + 1u32;
                // one cheap round on each before the full battery
                if is_probable_prime(&q, 1, rng)
                    && is_probable_prime(&p, 1, rng)
                    && is_probable_prime(&q, MR_ROUNDS, rng)
                    && is_probable_prime(&p, MR_ROUNDS, rng)
                    && p.bits() == bits
                {
                    return Some((p, q));
                }
            }
            q += 2u32;
            if sieve {
                for (r, &sp) in residues.iter_mut().zip(SMALL_PRIMES.iter()) {
                    *r = (*r + 2) % sp;
                }
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn small_values_against_trial_division() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        for n in 0u32..2000 {
            let trial = n >= 2 && (2..n).take_while(|d| d * d <= n).all(|d| n % d != 0);
            assert_eq!(is_probable_prime(&BigUint::from(n), 16, &mut rng), trial, "n = {n}");
        }
    }

    #[test]
    fn carmichael_numbers_rejected() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        for n in [561u32, 1105, 1729, 2465, 2821, 6601, 8911, 41041, 825265] {
            assert!(!is_probable_prime(&BigUint::from(n), MR_ROUNDS, &mut rng));
        }
    }

    #[test]
    fn safe_prime_shape() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for bits in [16u64, 32, 64, 128] {
            let (p, q) = find_safe_prime(bits, 1 << 20, &mut rng).unwrap();
            assert_eq!(p.bits(), bits);
            assert_eq!(p, (&q << 1) + 1u32);
        }
    }
}
