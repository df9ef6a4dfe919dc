//! Sensitivity sweeps over code book size, commitment ceiling and latent
//! width, with the trend checks used to judge them.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::evalgen::{evaluate, EvalError};
use crate::train::{train_stage_one, EncodedCorpus, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    Codes,
    BetaMax,
    LatentDim,
}

impl SweepAxis {
    /// Reference grid swept for each axis.
    pub fn reference_grid(self) -> Vec<f64> {
        match self {
            SweepAxis::Codes => vec![128.0, 256.0, 512.0, 1024.0],
            SweepAxis::BetaMax => vec![0.1, 0.5, 1.0, 2.0, 5.0, 10.0, 20.0],
            SweepAxis::LatentDim => vec![8.0, 16.0, 32.0, 64.0, 128.0, 256.0],
        }
    }

    /// Expected shape of validation Rec along the reference grid.
    pub fn expected_trend(self) -> Trend {
        match self {
            SweepAxis::Codes => Trend::NonIncreasing { slack: 0.0 },
            SweepAxis::BetaMax => Trend::InteriorMinimum,
            SweepAxis::LatentDim => Trend::Flat { band: 0.1 },
        }
    }

    /// `base` with this axis set to `value`.
    pub fn apply(self, base: &TrainConfig, value: f64) -> Result<TrainConfig, EvalError> {
        let mut cfg = base.clone();
        let whole = || {
            if value >= 1.0 && value.fract() == 0.0 {
                Ok(value as usize)
            } else {
                Err(EvalError::Config(format!("{self} needs a positive integer, got {value}")))
            }
        };
        match self {
            SweepAxis::Codes => cfg.codes = whole()?,
            SweepAxis::LatentDim => cfg.latent_dim = whole()?,
            SweepAxis::BetaMax => {
                cfg.beta_max = value;
                cfg.beta_start = cfg.beta_start.min(value);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::Codes => "codes",
            SweepAxis::BetaMax => "beta-max",
            SweepAxis::LatentDim => "latent-dim",
        })
    }
}

impl FromStr for SweepAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "codes" | "k" => Ok(SweepAxis::Codes),
            "beta-max" | "beta_max" | "beta" => Ok(SweepAxis::BetaMax),
            "latent-dim" | "latent_dim" | "latent" => Ok(SweepAxis::LatentDim),
            other => Err(format!("unknown sweep axis {other:?} (codes, beta-max, latent-dim)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub axis: SweepAxis,
    pub value: f64,
    /// Validation metrics of the kept (best) stage-one checkpoint.
    pub rec: f64,
    pub ppl: f64,
    pub kl: f64,
}

/// Trains one stage-one model per value and evaluates each on the
/// validation split. Runs are independent and share every other setting,
/// seeds included.
pub fn run_sweep(
    corpus: &EncodedCorpus,
    base: &TrainConfig,
    axis: SweepAxis,
    values: &[f64],
    mut progress: impl FnMut(&SweepPoint),
) -> Result<Vec<SweepPoint>, EvalError> {
    let mut out = Vec::with_capacity(values.len());
    for &value in values {
        let cfg = axis.apply(base, value)?;
        let run = train_stage_one(corpus, &cfg)?;
        let report = evaluate(&run.checkpoint.model, &corpus.valid, cfg.batch_size)?;
        let point = SweepPoint {
            axis,
            value,
            rec: report.rec,
            ppl: report.ppl,
            kl: report.kl,
        };
        progress(&point);
        out.push(point);
    }
    Ok(out)
}

/// Shape a sweep's Rec curve is expected to have.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Trend {
    /// Each point at most `slack` (relative) above its predecessor.
    NonIncreasing { slack: f64 },
    /// The smallest value is neither the first nor the last point.
    InteriorMinimum,
    /// Every point within `band` (relative) of the mean.
    Flat { band: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrendCheck {
    pub holds: bool,
    pub detail: String,
}

/// Judges `rec` (in sweep order) against `trend`. Fewer than two points
/// (three for an interior minimum) never hold.
pub fn check_trend(rec: &[f64], trend: Trend) -> TrendCheck {
    let fmt_all = rec.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>().join(", ");
    let need = if trend == Trend::InteriorMinimum { 3 } else { 2 };
    if rec.len() < need || rec.iter().any(|r| !r.is_finite()) {
        return TrendCheck {
            holds: false,
            detail: format!("need {need} finite points, got [{fmt_all}]"),
        };
    }
    match trend {
        Trend::NonIncreasing { slack } => {
            let worst = rec
                .windows(2)
                .map(|w| (w[1] - w[0]) / w[0].abs().max(f64::MIN_POSITIVE))
                .fold(f64::NEG_INFINITY, f64::max);
            TrendCheck {
                holds: worst <= slack,
                detail: format!("rec [{fmt_all}], largest relative rise {worst:+.4} (slack {slack})"),
            }
        }
        Trend::InteriorMinimum => {
            let arg = rec
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap_or(0);
            TrendCheck {
                holds: arg != 0 && arg != rec.len() - 1,
                detail: format!("rec [{fmt_all}], minimum at index {arg}"),
            }
        }
        Trend::Flat { band } => {
            let mean = rec.iter().sum::<f64>() / rec.len() as f64;
            let dev = rec.iter().map(|r| (r - mean).abs() / mean).fold(0.0, f64::max);
            TrendCheck {
                holds: dev <= band,
                detail: format!("rec [{fmt_all}], largest deviation {dev:.4} of mean {mean:.3} (band {band})"),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trend_checks() {
        assert!(check_trend(&[3.0, 2.0, 2.0, 1.0], Trend::NonIncreasing { slack: 0.0 }).holds);
        assert!(!check_trend(&[3.0, 2.0, 2.1], Trend::NonIncreasing { slack: 0.0 }).holds);
        assert!(check_trend(&[3.0, 2.0, 2.1], Trend::NonIncreasing { slack: 0.06 }).holds);
        assert!(check_trend(&[3.0, 1.0, 2.0], Trend::InteriorMinimum).holds);
        assert!(!check_trend(&[1.0, 2.0, 3.0], Trend::InteriorMinimum).holds);
        assert!(!check_trend(&[2.0, 1.0], Trend::InteriorMinimum).holds);
        assert!(check_trend(&[10.0, 10.5, 9.5], Trend::Flat { band: 0.1 }).holds);
        assert!(!check_trend(&[10.0, 13.0], Trend::Flat { band: 0.1 }).holds);
        assert!(!check_trend(&[1.0, f64::NAN], Trend::Flat { band: 0.1 }).holds);
    }

    #[test]
    fn axis_application() {
        let base = TrainConfig::desk_scale(crate::models::ModelKind::Davam);
        assert_eq!(SweepAxis::Codes.apply(&base, 512.0).unwrap().codes, 512);
        assert!(SweepAxis::Codes.apply(&base, 2.5).is_err());
        let b = SweepAxis::BetaMax.apply(&base, 0.05).unwrap();
        assert_eq!((b.beta_max, b.beta_start), (0.05, 0.05));
        assert_eq!("beta-max".parse::<SweepAxis>().unwrap(), SweepAxis::BetaMax);
        assert_eq!(SweepAxis::LatentDim.reference_grid().len(), 6);
    }
}
