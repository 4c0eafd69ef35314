//! The error-hazard family `λ(t) = eᵗ / (1 + r·eᵗ)`.
//!
//! `r = 0` gives the extreme-value error (proportional hazards), `r = 1` the
//! logistic error (proportional odds). Any `r ≥ 0` is accepted.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{LtmError, Result};

/// Above this argument the `r > 0` forms switch to `e^{-t}` expressions.
const STABLE_SWITCH: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HazardFamily {
    r: f64,
}

impl HazardFamily {
    pub const PROPORTIONAL_HAZARDS: HazardFamily = HazardFamily { r: 0.0 };
    pub const PROPORTIONAL_ODDS: HazardFamily = HazardFamily { r: 1.0 };

    pub fn new(r: f64) -> Result<Self> {
        if !r.is_finite() || r < 0.0 {
            return Err(LtmError::Domain(format!("family index r must be finite and >= 0, got {r}")));
        }
        Ok(Self { r })
    }

    pub fn r(&self) -> f64 {
        self.r
    }

    pub fn describe(&self) -> String {
        if self.r == 0.0 {
            "proportional hazards (r = 0)".to_string()
        } else if self.r == 1.0 {
            "proportional odds (r = 1)".to_string()
        } else {
            format!("transformation family r = {}", self.r)
        }
    }

    pub fn hazard(&self, t: f64) -> Result<f64> {
        check_finite(t)?;
        Ok(self.lambda(t))
    }

    pub fn cumulative_hazard(&self, t: f64) -> Result<f64> {
        check_finite(t)?;
        Ok(self.cumhaz(t))
    }

    pub fn hazard_derivative(&self, t: f64) -> Result<f64> {
        check_finite(t)?;
        Ok(self.dlambda(t))
    }

    /// Inverse survival: the `t` with `exp(-Λ(t)) = u`.
    pub fn sample_error(&self, u: f64) -> Result<f64> {
        if !(u > 0.0 && u < 1.0) {
            return Err(LtmError::Domain(format!("u must lie in (0, 1), got {u}")));
        }
        Ok(self.inverse_survival(u))
    }

    pub(crate) fn inverse_survival(&self, u: f64) -> f64 {
        let neg_log_u = -u.ln();
        if self.r == 0.0 {
            neg_log_u.ln()
        } else {
            // u^(-r) - 1 = expm1(-r ln u)
            ((self.r * neg_log_u).exp_m1() / self.r).ln()
        }
    }

    #[inline]
    pub(crate) fn lambda(&self, t: f64) -> f64 {
        if self.r == 0.0 {
            saturating_exp(t)
        } else if t > 0.0 {
            1.0 / (self.r + (-t).exp())
        } else {
            let e = t.exp();
            e / (1.0 + self.r * e)
        }
    }

    #[inline]
    pub(crate) fn cumhaz(&self, t: f64) -> f64 {
        if self.r == 0.0 {
            saturating_exp(t)
        } else if t > STABLE_SWITCH {
            (t + self.r.ln() + ((-t).exp() / self.r).ln_1p()) / self.r
        } else {
            (self.r * t.exp()).ln_1p() / self.r
        }
    }

    #[inline]
    pub(crate) fn dlambda(&self, t: f64) -> f64 {
        if self.r == 0.0 {
            saturating_exp(t)
        } else if t > 0.0 {
            let e = (-t).exp();
            let d = self.r + e;
            e / (d * d)
        } else {
            let e = t.exp();
            let d = 1.0 + self.r * e;
            e / (d * d)
        }
    }

    /// `Λ(hi) − Λ(lo)` for `hi ≥ lo`, without cancellation.
    #[inline]
    pub(crate) fn cumhaz_increment(&self, lo: f64, hi: f64) -> f64 {
        let gap = hi - lo;
        if self.r == 0.0 {
            if gap > STABLE_SWITCH {
                return saturating_exp(hi) - saturating_exp(lo);
            }
            return saturating_exp(lo) * gap.exp_m1();
        }
        if gap > STABLE_SWITCH {
            return self.cumhaz(hi) - self.cumhaz(lo);
        }
        // r e^lo / (1 + r e^lo) = r λ(lo)
        let share = self.r * self.lambda(lo);
        (share * gap.exp_m1()).ln_1p() / self.r
    }
}

impl Default for HazardFamily {
    fn default() -> Self {
        Self::PROPORTIONAL_HAZARDS
    }
}

impl fmt::Display for HazardFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.r == 0.0 {
            write!(f, "ph")
        } else if self.r == 1.0 {
            write!(f, "po")
        } else {
            write!(f, "r={}", self.r)
        }
    }
}

impl FromStr for HazardFamily {
    type Err = LtmError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "ph" => Ok(Self::PROPORTIONAL_HAZARDS),
            "po" => Ok(Self::PROPORTIONAL_ODDS),
            other => {
                let value = other.strip_prefix("r=").ok_or_else(|| {
                    LtmError::Validation(format!("unknown family '{other}', expected ph, po or r=<float>"))
                })?;
                let r: f64 = value
                    .parse()
                    .map_err(|_| LtmError::Validation(format!("cannot parse family index '{value}'")))?;
                Self::new(r)
            }
        }
    }
}

#[inline]
fn saturating_exp(t: f64) -> f64 {
    let e = t.exp();
    if e.is_infinite() {
        f64::MAX
    } else {
        e
    }
}

fn check_finite(t: f64) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(LtmError::Domain(format!("argument must be finite, got {t}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn fam(r: f64) -> HazardFamily {
        HazardFamily::new(r).unwrap()
    }

    #[test]
    fn hazard_values() {
        assert_eq!(fam(0.0).hazard(0.0).unwrap(), 1.0);
        assert_eq!(fam(1.0).hazard(0.0).unwrap(), 0.5);
        assert_relative_eq!(fam(2.0).hazard(0.0).unwrap(), 1.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn cumulative_hazard_values() {
        assert_eq!(fam(0.0).cumulative_hazard(0.0).unwrap(), 1.0);
        assert_relative_eq!(fam(1.0).cumulative_hazard(0.0).unwrap(), 2f64.ln(), epsilon = 1e-15);
        assert_relative_eq!(fam(0.0).cumulative_hazard(2f64.ln()).unwrap(), 2.0, epsilon = 1e-15);
    }

    #[test]
    fn hazard_derivative_values() {
        assert_eq!(fam(1.0).hazard_derivative(0.0).unwrap(), 0.25);
        assert_eq!(fam(0.0).hazard_derivative(0.0).unwrap(), 1.0);
        let f = fam(1.0);
        let h = 1e-6;
        let fd = (f.hazard(1.0 + h).unwrap() - f.hazard(1.0 - h).unwrap()) / (2.0 * h);
        assert!((f.hazard_derivative(1.0).unwrap() - fd).abs() < 1e-6);
    }

    #[test]
    fn sample_error_values() {
        assert!(fam(1.0).sample_error(0.5).unwrap().abs() < 1e-15);
        assert!(fam(0.0).sample_error((-1.0f64).exp()).unwrap().abs() < 1e-15);
        assert_relative_eq!(fam(1.0).sample_error(0.25).unwrap(), 3f64.ln(), epsilon = 1e-14);
    }

    #[test]
    fn domain_errors() {
        assert!(fam(0.0).hazard(f64::NAN).is_err());
        assert!(fam(1.0).cumulative_hazard(f64::INFINITY).is_err());
        assert!(fam(1.0).hazard_derivative(f64::NEG_INFINITY).is_err());
        assert!(fam(1.0).sample_error(0.0).is_err());
        assert!(fam(1.0).sample_error(1.0).is_err());
        assert!(HazardFamily::new(-0.5).is_err());
    }

    #[test]
    fn derivative_of_cumulative_matches_hazard() {
        for &r in &[0.0, 0.5, 1.0, 2.0, 7.5] {
            let f = fam(r);
            let mut t: f64 = -10.0;
            while t <= 5.0 {
                let h = 1e-5 * (1.0 + t.abs());
                let fd = (f.cumhaz(t + h) - f.cumhaz(t - h)) / (2.0 * h);
                let exact = f.lambda(t);
                assert!(((fd - exact) / exact).abs() < 1e-6, "r={r} t={t} fd={fd} exact={exact}");
                t += 0.25;
            }
        }
    }

    #[test]
    fn survival_round_trip() {
        for &r in &[0.0, 0.5, 1.0, 3.0] {
            let f = fam(r);
            for &u in &[0.01, 0.1, 0.5, 0.9, 0.99] {
                let t = f.sample_error(u).unwrap();
                let back = (-f.cumulative_hazard(t).unwrap()).exp();
                assert!((back - u).abs() < 1e-10, "r={r} u={u}");
            }
        }
    }

    #[test]
    fn hazard_vanishes_in_left_tail() {
        for &r in &[0.0, 1.0, 4.0] {
            assert!(fam(r).hazard(-30.0).unwrap() < 1e-12);
        }
    }

    #[test]
    fn large_arguments_are_finite() {
        let po = fam(1.0);
        assert_relative_eq!(po.lambda(800.0), 1.0, epsilon = 1e-15);
        assert_relative_eq!(po.cumhaz(800.0), 800.0, epsilon = 1e-12);
        assert!(po.dlambda(800.0) >= 0.0);
        assert_eq!(fam(0.0).lambda(1000.0), f64::MAX);
        // continuity across the switch
        assert_relative_eq!(po.cumhaz(30.0), po.cumhaz(30.0 + 1e-12), epsilon = 1e-10);
    }

    #[test]
    fn increment_matches_difference() {
        for &r in &[0.0, 1.0, 2.5] {
            let f = fam(r);
            for &(lo, hi) in &[(-3.0, -2.0), (0.0, 0.5), (10.0, 45.0), (-50.0, -49.999), (28.0, 33.0)] {
                let direct = f.cumhaz(hi) - f.cumhaz(lo);
                assert_relative_eq!(f.cumhaz_increment(lo, hi), direct, max_relative = 1e-9);
            }
        }
    }

    #[test]
    fn parse_family_flags() {
        assert_eq!("ph".parse::<HazardFamily>().unwrap().r(), 0.0);
        assert_eq!("po".parse::<HazardFamily>().unwrap().r(), 1.0);
        assert_eq!("r=2.5".parse::<HazardFamily>().unwrap().r(), 2.5);
        assert!("r=-1".parse::<HazardFamily>().is_err());
        assert!("weibull".parse::<HazardFamily>().is_err());
        assert_eq!(fam(2.5).to_string(), "r=2.5");
    }
}
