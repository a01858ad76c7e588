use std::fmt;

use serde::{Deserialize, Serialize};

use crate::ir::IcmpPred;

/// Closed integer interval; a missing bound is infinite. Bit widths are not
/// modelled, so wrap-around is never assumed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Interval {
    pub lo: Option<i64>,
    pub hi: Option<i64>,
}

impl Interval {
    pub const TOP: Interval = Interval { lo: None, hi: None };

    pub fn exact(c: i64) -> Self {
        Interval { lo: Some(c), hi: Some(c) }
    }

    pub fn new(lo: Option<i64>, hi: Option<i64>) -> Self {
        Interval { lo, hi }
    }

    pub fn is_empty(&self) -> bool {
        matches!((self.lo, self.hi), (Some(l), Some(h)) if l > h)
    }

    pub fn is_bounded(&self) -> bool {
        self.lo.is_some() && self.hi.is_some()
    }

    pub fn meet(&self, o: &Interval) -> Interval {
        Interval {
            lo: max_opt(self.lo, o.lo),
            hi: min_opt(self.hi, o.hi),
        }
    }

    /// Smallest interval containing both; empty operands are ignored.
    pub fn hull(&self, o: &Interval) -> Interval {
        if self.is_empty() {
            return *o;
        }
        if o.is_empty() {
            return *self;
        }
        Interval {
            lo: self.lo.zip(o.lo).map(|(a, b)| a.min(b)),
            hi: self.hi.zip(o.hi).map(|(a, b)| a.max(b)),
        }
    }

    pub fn add(&self, o: &Interval) -> Interval {
        Interval {
            lo: self.lo.zip(o.lo).and_then(|(a, b)| a.checked_add(b)),
            hi: self.hi.zip(o.hi).and_then(|(a, b)| a.checked_add(b)),
        }
    }

    pub fn sub(&self, o: &Interval) -> Interval {
        Interval {
            lo: self.lo.zip(o.hi).and_then(|(a, b)| a.checked_sub(b)),
            hi: self.hi.zip(o.lo).and_then(|(a, b)| a.checked_sub(b)),
        }
    }

    pub fn mul(&self, o: &Interval) -> Interval {
        let (Some(a), Some(b), Some(c), Some(d)) = (self.lo, self.hi, o.lo, o.hi) else {
            // a nonnegative range times a nonnegative range stays nonnegative
            let nonneg = self.lo.is_some_and(|l| l >= 0) && o.lo.is_some_and(|l| l >= 0);
            return if nonneg { Interval::new(Some(0), None) } else { Interval::TOP };
        };
        let ps = [a.checked_mul(c), a.checked_mul(d), b.checked_mul(c), b.checked_mul(d)];
        if ps.iter().any(Option::is_none) {
            return Interval::TOP;
        }
        let ps = ps.map(Option::unwrap);
        Interval::new(ps.iter().min().copied(), ps.iter().max().copied())
    }

    /// Scales by a nonnegative constant stride.
    pub fn scale(&self, k: u64) -> Interval {
        self.mul(&Interval::exact(i64::try_from(k).unwrap_or(i64::MAX)))
    }

    /// Zero extension: nonnegative ranges are kept, anything else becomes
    /// `[0, +inf)`.
    pub fn zext(&self) -> Interval {
        if self.lo.is_some_and(|l| l >= 0) {
            *self
        } else {
            Interval::new(Some(0), None)
        }
    }

    /// Values of `x` for which `x pred c` holds. Unsigned predicates also
    /// confine `x` to nonnegative values.
    pub fn satisfying(pred: IcmpPred, c: i64) -> Interval {
        use IcmpPred::*;
        let unsigned = matches!(pred, Ugt | Uge | Ult | Ule);
        let r = match pred {
            Eq => Interval::exact(c),
            Ne => Interval::TOP,
            Ugt | Sgt => Interval::new(c.checked_add(1), None),
            Uge | Sge => Interval::new(Some(c), None),
            Ult | Slt => Interval::new(None, c.checked_sub(1)),
            Ule | Sle => Interval::new(None, Some(c)),
        };
        if unsigned {
            r.meet(&Interval::new(Some(0), None))
        } else {
            r
        }
    }
}

fn max_opt(a: Option<i64>, b: Option<i64>) -> Option<i64> {
    match (a, b) {
        (Some(x), Some(y)) => Some(x.max(y)),
        (x, None) | (None, x) => x,
    }
}

fn min_opt(a: Option<i64>, b: Option<i64>) -> Option<i64> {
    match (a, b) {
        (Some(x), Some(y)) => Some(x.min(y)),
        (x, None) | (None, x) => x,
    }
}

impl fmt::Display for Interval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.lo {
            Some(l) => write!(f, "[{l}, ")?,
            None => write!(f, "(-inf, ")?,
        }
        match self.hi {
            Some(h) => write!(f, "{h}]"),
            None => write!(f, "+inf)"),
        }
    }
}
