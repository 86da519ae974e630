//! Exact perforation rates.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// A perforation rate `p/q` with `0 ≤ p/q < 1`, kept in lowest terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Rate {
    num: u32,
    den: u32,
}

fn gcd(mut a: u32, mut b: u32) -> u32 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

impl Rate {
    pub const ZERO: Rate = Rate { num: 0, den: 1 };

    pub fn new(num: u32, den: u32) -> Result<Self> {
        if den == 0 {
            return Err(Error::invalid("rate denominator is zero"));
        }
        if num >= den {
            return Err(Error::invalid(format!("rate {num}/{den} must be below 1")));
        }
        let g = gcd(num, den).max(1);
        Ok(Rate {
            num: num / g,
            den: den / g,
        })
    }

    pub fn numer(self) -> u32 {
        self.num
    }

    pub fn denom(self) -> u32 {
        self.den
    }

    pub fn is_zero(self) -> bool {
        self.num == 0
    }

    pub fn as_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// Number of exact positions `N = (1 − r)|Ω|`, rounded half-up and kept
    /// at least 1.
    pub fn kept(self, omega: usize) -> usize {
        let keep = (self.den - self.num) as u128 * omega as u128;
        let den = self.den as u128;
        (((2 * keep + den) / (2 * den)) as usize).clamp(1, omega.max(1))
    }

    /// Batch stacking factor `⌊1/(1 − r)⌋`.
    pub fn stack_factor(self) -> usize {
        (self.den / (self.den - self.num)) as usize
    }
}

impl fmt::Display for Rate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_zero() {
            f.write_str("0")
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

impl FromStr for Rate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let parse = |v: &str| {
            v.trim()
                .parse::<u32>()
                .map_err(|_| Error::format("rate", format!("`{s}` is not a fraction p/q")))
        };
        match s.split_once('/') {
            Some((p, q)) => Rate::new(parse(p)?, parse(q)?),
            None => match s.split_once('.') {
                // exact decimal: 0.8 -> 8/10
                Some((int, frac)) if !frac.is_empty() && frac.len() <= 9 => {
                    if !matches!(int, "" | "0") || !frac.bytes().all(|b| b.is_ascii_digit()) {
                        return Err(Error::format("rate", format!("`{s}` is not a rate below 1")));
                    }
                    Rate::new(parse(frac)?, 10u32.pow(frac.len() as u32))
                }
                None if s == "0" => Ok(Rate::ZERO),
                _ => Err(Error::format("rate", format!("`{s}` is not a fraction p/q"))),
            },
        }
    }
}

/// Increasing list of non-zero rates. Level 0 means unperforated; level
/// `k ≥ 1` selects `rates[k - 1]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RateLadder {
    rates: Vec<Rate>,
}

impl RateLadder {
    pub fn new(rates: Vec<Rate>) -> Result<Self> {
        if rates.is_empty() {
            return Err(Error::invalid("rate ladder is empty"));
        }
        if rates[0].is_zero() {
            return Err(Error::invalid("ladder rates must be positive"));
        }
        for w in rates.windows(2) {
            if w[0].as_f64() >= w[1].as_f64() {
                return Err(Error::invalid(format!(
                    "ladder must be increasing, got {} then {}",
                    w[0], w[1]
                )));
            }
        }
        Ok(RateLadder { rates })
    }

    /// 1/3 followed by k/(k+1) for k = 1..=19: twenty rates.
    pub fn standard() -> Self {
        let mut rates = vec![Rate::new(1, 3).unwrap()];
        rates.extend((1..=19).map(|k| Rate::new(k, k + 1).unwrap()));
        RateLadder { rates }
    }

    /// The first `steps` rates of the standard ladder.
    pub fn standard_prefix(steps: usize) -> Result<Self> {
        let std = Self::standard();
        if steps == 0 || steps > std.rates.len() {
            return Err(Error::invalid(format!("ladder prefix of {steps} steps")));
        }
        Ok(RateLadder {
            rates: std.rates[..steps].to_vec(),
        })
    }

    /// Number of non-zero levels.
    pub fn steps(&self) -> usize {
        self.rates.len()
    }

    pub fn rate(&self, level: usize) -> Rate {
        if level == 0 {
            Rate::ZERO
        } else {
            self.rates[level - 1]
        }
    }

    pub fn level_of(&self, rate: Rate) -> Option<usize> {
        if rate.is_zero() {
            return Some(0);
        }
        self.rates.iter().position(|&r| r == rate).map(|i| i + 1)
    }

    pub fn rates(&self) -> &[Rate] {
        &self.rates
    }
}

impl Default for RateLadder {
    fn default() -> Self {
        Self::standard()
    }
}
