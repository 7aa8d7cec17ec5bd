use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Number of target classes.
pub const NUM_CLASSES: usize = 4;

/// Rhythm class of a whole record. The discriminant is the fixed class order
/// (N, A, O, ~) used by every probability vector in the crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Class {
    #[serde(rename = "N")]
    Normal = 0,
    #[serde(rename = "A")]
    AFib = 1,
    #[serde(rename = "O")]
    Other = 2,
    #[serde(rename = "~")]
    Noisy = 3,
}

impl Class {
    pub const ALL: [Class; NUM_CLASSES] = [Class::Normal, Class::AFib, Class::Other, Class::Noisy];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Class> {
        Self::ALL.get(i).copied()
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Class::Normal => "N",
            Class::AFib => "A",
            Class::Other => "O",
            Class::Noisy => "~",
        }
    }
}

impl fmt::Display for Class {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

impl FromStr for Class {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "N" => Ok(Class::Normal),
            "A" => Ok(Class::AFib),
            "O" => Ok(Class::Other),
            "~" => Ok(Class::Noisy),
            other => Err(Error::UnknownClass(other.to_string())),
        }
    }
}

/// Probability vector over the four classes in (N, A, O, ~) order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassProbabilities(pub [f64; NUM_CLASSES]);

impl ClassProbabilities {
    pub fn uniform() -> Self {
        ClassProbabilities([1.0 / NUM_CLASSES as f64; NUM_CLASSES])
    }

    /// Numerically stable softmax of raw scores.
    pub fn softmax(scores: &[f64; NUM_CLASSES]) -> Self {
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut p = [0.0; NUM_CLASSES];
        if max == f64::NEG_INFINITY {
            return Self::uniform();
        }
        let mut sum = 0.0;
        for (pi, &s) in p.iter_mut().zip(scores) {
            *pi = (s - max).exp();
            sum += *pi;
        }
        for pi in &mut p {
            *pi /= sum;
        }
        ClassProbabilities(p)
    }

    pub fn get(&self, c: Class) -> f64 {
        self.0[c.index()]
    }

    /// Most probable class; ties resolve to the earlier class in (N, A, O, ~).
    pub fn argmax(&self) -> Class {
        let mut best = 0;
        for i in 1..NUM_CLASSES {
            if self.0[i] > self.0[best] {
                best = i;
            }
        }
        Class::ALL[best]
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        self.0.iter().all(|p| p.is_finite() && *p >= 0.0)
            && (self.0.iter().sum::<f64>() - 1.0).abs() <= tol
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_display_round_trip() {
        for c in Class::ALL {
            assert_eq!(c.symbol().parse::<Class>().unwrap(), c);
        }
        assert!(matches!("X".parse::<Class>(), Err(Error::UnknownClass(_))));
    }

    #[test]
    fn argmax_ties_prefer_class_order() {
        let p = ClassProbabilities([0.1, 0.4, 0.4, 0.1]);
        assert_eq!(p.argmax(), Class::AFib);
        assert_eq!(ClassProbabilities::uniform().argmax(), Class::Normal);
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let a = ClassProbabilities::softmax(&[1.0, 2.0, 0.5, -1.0]);
        let b = ClassProbabilities::softmax(&[101.0, 102.0, 100.5, 99.0]);
        for i in 0..NUM_CLASSES {
            assert!((a.0[i] - b.0[i]).abs() < 1e-12);
        }
        assert!(a.is_valid(1e-12));
    }
}
