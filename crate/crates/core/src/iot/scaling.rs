//! Response time against the number of concurrent clients, fitted through
//! two measured anchor points per learning mode.

use serde::{Deserialize, Serialize};

use super::pipeline::ControlPath;
use crate::error::{Error, Result};

/// Two measured points `(n, seconds)` on a response-time curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Anchors {
    pub low_clients: u32,
    pub low_seconds: f64,
    pub high_clients: u32,
    pub high_seconds: f64,
}

impl Anchors {
    pub fn validate(&self) -> Result<()> {
        if !(self.low_clients >= 1 && self.high_clients > self.low_clients) {
            return Err(Error::config("scaling anchors need 1 <= low_clients < high_clients"));
        }
        if !(self.low_seconds >= 0.0 && self.high_seconds >= self.low_seconds && self.high_seconds.is_finite()) {
            return Err(Error::config("scaling anchors need 0 <= low_seconds <= high_seconds"));
        }
        Ok(())
    }

    fn slope(&self) -> f64 {
        (self.high_seconds - self.low_seconds) / f64::from(self.high_clients - self.low_clients)
    }

    /// Intercept of the line through both anchors.
    pub fn base(&self) -> f64 {
        self.low_seconds - self.slope() * f64::from(self.low_clients)
    }

    /// The line through both anchors. When that line would go negative near
    /// zero clients, the segment below the low anchor is replaced by the line
    /// from the origin to the low anchor.
    pub fn predict(&self, n: u32) -> f64 {
        let n = f64::from(n);
        let (lo, hi) = (f64::from(self.low_clients), f64::from(self.high_clients));
        if n < lo && self.base() < 0.0 {
            return self.low_seconds * n / lo;
        }
        // Measure from the nearer anchor so both anchors come out exact.
        if n - lo <= hi - n {
            self.low_seconds + (n - lo) * self.slope()
        } else {
            self.high_seconds - (hi - n) * self.slope()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalingCalibration {
    pub fl: Anchors,
    pub cl: Anchors,
}

impl Default for ScalingCalibration {
    fn default() -> Self {
        Self {
            fl: Anchors {
                low_clients: 10,
                low_seconds: 0.4,
                high_clients: 100,
                high_seconds: 4.8,
            },
            cl: Anchors {
                low_clients: 10,
                low_seconds: 1.1,
                high_clients: 100,
                high_seconds: 9.5,
            },
        }
    }
}

impl ScalingCalibration {
    pub fn validate(&self) -> Result<()> {
        self.fl.validate()?;
        self.cl.validate()
    }
}

/// Predicted response time with `n_clients` clients. Only the local FL and
/// remote CL paths are calibrated.
pub fn scaling_model(path: ControlPath, n_clients: u32, calib: &ScalingCalibration) -> Result<f64> {
    if n_clients < 1 {
        return Err(Error::config("n_clients must be >= 1"));
    }
    match path {
        ControlPath::LocalFl => Ok(calib.fl.predict(n_clients)),
        ControlPath::RemoteCl => Ok(calib.cl.predict(n_clients)),
        other => Err(Error::config(format!("no scaling calibration for {other}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anchors_are_exact() {
        let c = ScalingCalibration::default();
        assert_eq!(scaling_model(ControlPath::LocalFl, 10, &c).unwrap(), 0.4);
        assert_eq!(scaling_model(ControlPath::LocalFl, 100, &c).unwrap(), 4.8);
        assert_eq!(scaling_model(ControlPath::RemoteCl, 10, &c).unwrap(), 1.1);
        assert_eq!(scaling_model(ControlPath::RemoteCl, 100, &c).unwrap(), 9.5);
    }

    #[test]
    fn negative_intercept_is_replaced_below_the_low_anchor() {
        let c = ScalingCalibration::default();
        assert!(c.fl.base() < 0.0);
        assert!(c.cl.base() > 0.0);
        let fl1 = scaling_model(ControlPath::LocalFl, 1, &c).unwrap();
        assert!((fl1 - 0.04).abs() < 1e-15);
    }

    #[test]
    fn rejects_zero_clients_and_uncalibrated_paths() {
        let c = ScalingCalibration::default();
        assert!(scaling_model(ControlPath::LocalFl, 0, &c).is_err());
        assert!(scaling_model(ControlPath::RemoteFl, 10, &c).is_err());
    }
}
