//! Monotone maps from expertness to reward, the beta schedule, and global
//! sculpting of the map.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Family {
    Identity,
    Logistic { mid: f64, steep: f64 },
    Piecewise { knots: Vec<(f64, f64)> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MappingParams {
    pub family: Family,
    /// Outputs are forced to zero for every l at or below this level.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub suppress_below: Option<f64>,
    pub version: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum SculptDirective {
    SuppressBelow { a: f64 },
    Sharpen { mid: f64, steep: f64 },
    SetKnots { knots: Vec<(f64, f64)> },
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn check_knots(knots: &[(f64, f64)]) -> Result<()> {
    if knots.len() < 2 {
        return Err(Error::NotMonotone("need at least two knots".into()));
    }
    if knots[0].0 != 0.0 || knots[knots.len() - 1].0 != 1.0 {
        return Err(Error::NotMonotone(
            "knots must start at x=0 and end at x=1".into(),
        ));
    }
    for (x, y) in knots {
        if !(0.0..=1.0).contains(x) || !(0.0..=1.0).contains(y) {
            return Err(Error::NotMonotone(format!(
                "knot ({x}, {y}) outside [0,1]^2"
            )));
        }
    }
    for w in knots.windows(2) {
        if w[1].0 <= w[0].0 {
            return Err(Error::NotMonotone(format!(
                "knot x values not increasing at {}",
                w[1].0
            )));
        }
        if w[1].1 < w[0].1 {
            return Err(Error::NotMonotone(format!(
                "knot y decreases at x={}",
                w[1].0
            )));
        }
    }
    Ok(())
}

fn check_logistic(mid: f64, steep: f64) -> Result<()> {
    if !(mid > 0.0 && mid < 1.0) || !(steep > 0.0 && steep.is_finite()) {
        return Err(invalid(format!(
            "logistic needs mid in (0,1) and steep > 0, got ({mid}, {steep})"
        )));
    }
    Ok(())
}

impl MappingParams {
    pub fn identity() -> Self {
        MappingParams {
            family: Family::Identity,
            suppress_below: None,
            version: 0,
        }
    }

    pub fn logistic(mid: f64, steep: f64) -> Result<Self> {
        check_logistic(mid, steep)?;
        Ok(MappingParams {
            family: Family::Logistic { mid, steep },
            suppress_below: None,
            version: 0,
        })
    }

    pub fn piecewise(knots: Vec<(f64, f64)>) -> Result<Self> {
        check_knots(&knots)?;
        Ok(MappingParams {
            family: Family::Piecewise { knots },
            suppress_below: None,
            version: 0,
        })
    }

    fn base(&self, l: f64) -> f64 {
        match &self.family {
            Family::Identity => l,
            Family::Logistic { mid, steep } => {
                let f0 = sigmoid(-steep * mid);
                let f1 = sigmoid(steep * (1.0 - mid));
                ((sigmoid(steep * (l - mid)) - f0) / (f1 - f0)).clamp(0.0, 1.0)
            }
            Family::Piecewise { knots } => {
                let i = knots
                    .partition_point(|(x, _)| *x <= l)
                    .clamp(1, knots.len() - 1);
                let (x0, y0) = knots[i - 1];
                let (x1, y1) = knots[i];
                (y0 + (y1 - y0) * (l - x0) / (x1 - x0)).clamp(0.0, 1.0)
            }
        }
    }

    /// g(l) without the range check.
    pub fn eval(&self, l: f64) -> f64 {
        match self.suppress_below {
            Some(a) if l <= a => 0.0,
            _ => self.base(l),
        }
    }
}

pub fn apply_mapping(psi: &MappingParams, l: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&l) {
        return Err(invalid(format!("mapping input {l} outside [0,1]")));
    }
    Ok(psi.eval(l))
}

pub fn sculpt(psi: &MappingParams, directive: &SculptDirective) -> Result<MappingParams> {
    let mut out = psi.clone();
    match directive {
        SculptDirective::SuppressBelow { a } => {
            if !(0.0..=1.0).contains(a) {
                return Err(invalid("suppress_below level must lie in [0,1]"));
            }
            out.suppress_below = Some(out.suppress_below.map_or(*a, |b| b.max(*a)));
        }
        SculptDirective::Sharpen { mid, steep } => {
            check_logistic(*mid, *steep)?;
            out.family = Family::Logistic {
                mid: *mid,
                steep: *steep,
            };
        }
        SculptDirective::SetKnots { knots } => {
            check_knots(knots)?;
            out.family = Family::Piecewise {
                knots: knots.clone(),
            };
        }
    }
    out.version = psi.version + 1;
    if !validate_monotone(&out, 1001) {
        return Err(Error::NotMonotone(
            "sculpt result failed the grid check".into(),
        ));
    }
    Ok(out)
}

pub fn validate_monotone(psi: &MappingParams, grid_n: usize) -> bool {
    if grid_n < 2 {
        return false;
    }
    let mut prev = f64::NEG_INFINITY;
    for i in 0..grid_n {
        let v = psi.eval(i as f64 / (grid_n - 1) as f64);
        if !(0.0..=1.0).contains(&v) || v < prev - 1e-12 {
            return false;
        }
        prev = v;
    }
    true
}

/// Candidate maps searched when fitting: identity then logistic over a fixed grid.
pub fn psi_grid() -> Vec<MappingParams> {
    let mut out = vec![MappingParams::identity()];
    for mid in [0.3, 0.4, 0.5, 0.6, 0.7] {
        for steep in [4.0, 8.0, 16.0] {
            out.push(MappingParams::logistic(mid, steep).expect("grid values are valid"));
        }
    }
    out
}

/// Pick the grid map with the largest expert-minus-negative contrast. Earlier
/// candidates win ties.
pub fn select_mapping(l_expert: &[f64], l_neg: &[f64]) -> Result<(MappingParams, f64)> {
    if l_expert.is_empty() || l_neg.is_empty() {
        return Err(invalid("select_mapping needs non-empty score sets"));
    }
    let mean = |psi: &MappingParams, v: &[f64]| {
        v.iter().map(|l| psi.eval(*l)).sum::<f64>() / v.len() as f64
    };
    let mut best: Option<(MappingParams, f64)> = None;
    for psi in psi_grid() {
        let c = mean(&psi, l_expert) - mean(&psi, l_neg);
        if best.as_ref().is_none_or(|(_, b)| c > *b) {
            best = Some((psi, c));
        }
    }
    Ok(best.expect("grid is non-empty"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Decay {
    None,
    Exponential { lambda: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaSchedule {
    pub beta0: f64,
    pub decay: Decay,
}

impl Default for BetaSchedule {
    fn default() -> Self {
        BetaSchedule {
            beta0: 1.0,
            decay: Decay::None,
        }
    }
}

impl BetaSchedule {
    pub fn new(beta0: f64, decay: Decay) -> Result<Self> {
        if !(beta0 > 0.0 && beta0.is_finite()) {
            return Err(invalid("beta0 must be positive"));
        }
        if let Decay::Exponential { lambda } = decay {
            if !(lambda >= 0.0 && lambda.is_finite()) {
                return Err(invalid("decay lambda must be >= 0"));
            }
        }
        Ok(BetaSchedule { beta0, decay })
    }

    pub fn at(&self, t: u64) -> f64 {
        match self.decay {
            Decay::None => self.beta0,
            Decay::Exponential { lambda } => self.beta0 * (-lambda * t as f64).exp(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn families() {
        assert_eq!(apply_mapping(&MappingParams::identity(), 0.3).unwrap(), 0.3);
        let l = MappingParams::logistic(0.5, 1000.0).unwrap();
        assert!(l.eval(0.49) < 0.01 && l.eval(0.51) > 0.99);
        assert_eq!(l.eval(0.0), 0.0);
        assert_eq!(l.eval(1.0), 1.0);
        let p = MappingParams::piecewise(vec![(0.0, 0.0), (0.5, 0.0), (1.0, 1.0)]).unwrap();
        assert_eq!(p.eval(0.4), 0.0);
        assert!((p.eval(0.75) - 0.5).abs() < 1e-15);
        assert!(apply_mapping(&p, 1.5).is_err());
    }

    #[test]
    fn sculpt_directives() {
        let id = MappingParams::identity();
        let s = sculpt(&id, &SculptDirective::SuppressBelow { a: 0.6 }).unwrap();
        assert_eq!(s.eval(0.5), 0.0);
        assert!(s.eval(0.8) > 0.0);
        assert_eq!(s.version, 1);
        assert_eq!(id, MappingParams::identity());
        let bad = SculptDirective::SetKnots {
            knots: vec![(0.0, 0.5), (1.0, 0.2)],
        };
        assert!(matches!(sculpt(&id, &bad), Err(Error::NotMonotone(_))));
        let sh = sculpt(
            &s,
            &SculptDirective::Sharpen {
                mid: 0.7,
                steep: 50.0,
            },
        )
        .unwrap();
        assert!(validate_monotone(&sh, 1001));
        assert_eq!(sh.version, 2);
    }

    #[test]
    fn hand_built_invalid_fails_grid_check() {
        let psi = MappingParams {
            family: Family::Piecewise {
                knots: vec![(0.0, 0.0), (0.5, 0.9), (1.0, 0.1)],
            },
            suppress_below: None,
            version: 0,
        };
        assert!(!validate_monotone(&psi, 1001));
        assert!(validate_monotone(&MappingParams::identity(), 1001));
    }

    #[test]
    fn beta() {
        let b = BetaSchedule::new(
            1.0,
            Decay::Exponential {
                lambda: std::f64::consts::LN_2,
            },
        )
        .unwrap();
        assert!((b.at(1) - 0.5).abs() < 1e-15);
        assert!(BetaSchedule::new(0.0, Decay::None).is_err());
    }
}
