use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Vertical/horizontal magnification `(r_v, r_h)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScalePair {
    pub v: f64,
    pub h: f64,
}

/// Slack added before flooring `size · r`, so that e.g. `100 · 2.3` yields 230.
const SIZE_SLACK: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum RoundMode {
    #[default]
    Floor,
    Round,
}

impl RoundMode {
    pub fn apply(self, len: usize, r: f64) -> usize {
        let x = len as f64 * r;
        match self {
            RoundMode::Floor => (x + SIZE_SLACK).floor() as usize,
            RoundMode::Round => x.round() as usize,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            RoundMode::Floor => "floor",
            RoundMode::Round => "round",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "floor" => Some(RoundMode::Floor),
            "round" => Some(RoundMode::Round),
            _ => None,
        }
    }
}

impl ScalePair {
    pub const fn new(v: f64, h: f64) -> Self {
        ScalePair { v, h }
    }

    pub const fn uniform(r: f64) -> Self {
        ScalePair { v: r, h: r }
    }

    pub fn is_symmetric(&self) -> bool {
        self.v == self.h
    }

    pub fn max(&self) -> f64 {
        self.v.max(self.h)
    }

    /// Reciprocal scales `(1/r_v, 1/r_h)`: the conditioning features.
    pub fn features(&self) -> [f64; 2] {
        [1.0 / self.v, 1.0 / self.h]
    }

    /// Errors unless both factors lie in `[1, max]`.
    pub fn check(&self, max: f64) -> Result<()> {
        for (axis, r) in [("r_v", self.v), ("r_h", self.h)] {
            if !r.is_finite() || r < 1.0 {
                return Err(Error::Range(format!(
                    "{axis} = {r} is below the lower bound 1"
                )));
            }
            if r > max {
                return Err(Error::Range(format!(
                    "{axis} = {r} exceeds the upper bound {max}"
                )));
            }
        }
        Ok(())
    }

    pub fn output_dims(&self, h: usize, w: usize, mode: RoundMode) -> (usize, usize) {
        (mode.apply(h, self.v), mode.apply(w, self.h))
    }

    /// Ceiling of the larger factor: the border crop used by the metrics.
    pub fn crop_border(&self) -> usize {
        (self.max() - SIZE_SLACK).ceil().max(0.0) as usize
    }
}

impl fmt::Display for ScalePair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.v, self.h)
    }
}

impl FromStr for ScalePair {
    type Err = Error;

    /// Accepts `2`, `2.5` or `2x3` (vertical × horizontal).
    fn from_str(s: &str) -> Result<Self> {
        let parse = |t: &str| -> Result<f64> {
            let v: f64 = t
                .trim()
                .parse()
                .map_err(|_| Error::arg(format!("bad scale `{s}`: expected RV or RVxRH")))?;
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::arg(format!(
                    "bad scale `{s}`: factors must be positive"
                )));
            }
            Ok(v)
        };
        match s.split_once(['x', 'X']) {
            Some((v, h)) => Ok(ScalePair::new(parse(v)?, parse(h)?)),
            None => Ok(ScalePair::uniform(parse(s)?)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_scale_grammar() {
        assert_eq!("2".parse::<ScalePair>().unwrap(), ScalePair::uniform(2.0));
        assert_eq!("2.5".parse::<ScalePair>().unwrap(), ScalePair::uniform(2.5));
        assert_eq!(
            "2x3".parse::<ScalePair>().unwrap(),
            ScalePair::new(2.0, 3.0)
        );
        for bad in ["", "x", "2x", "abc", "-1", "2x3x4"] {
            assert!(bad.parse::<ScalePair>().is_err(), "{bad}");
        }
    }

    #[test]
    fn guard_names_the_bound() {
        let e = ScalePair::uniform(0.5).check(4.5).unwrap_err().to_string();
        assert!(e.contains("lower bound 1"), "{e}");
        let e = ScalePair::new(2.0, 5.0).check(4.5).unwrap_err().to_string();
        assert!(e.contains("upper bound 4.5"), "{e}");
        assert!(ScalePair::new(1.0, 4.5).check(4.5).is_ok());
    }

    #[test]
    fn floor_sizes() {
        assert_eq!(RoundMode::Floor.apply(64, 3.3), 211);
        assert_eq!(RoundMode::Floor.apply(100, 2.3), 230);
        assert_eq!(RoundMode::Floor.apply(7, 1.5), 10);
        assert_eq!(RoundMode::Round.apply(7, 1.5), 11);
        assert_eq!(ScalePair::uniform(2.0).crop_border(), 2);
        assert_eq!(ScalePair::new(1.7, 2.2).crop_border(), 3);
    }
}
