//! Extrapolation planner: how far batch size, noise multiplier and dataset
//! size must be scaled together to reach a target ε.
//!
//! For a scale factor `k` the noise multiplier becomes `k·z0` and the batch
//! `k·B0`. The dataset size depends on the mode:
//!
//! | mode        | dataset      | sampling rate     |
//! |-------------|--------------|-------------------|
//! | `batch`     | `n0`         | `k·B0 / n0`       |
//! | `equal`     | `k·n0`       | `B0 / n0`         |
//! | `headstart` | `10·k·n0`    | `B0 / (10·n0)`    |
//!
//! δ always follows the scaled dataset size via [`delta_rule`]. The number
//! of training steps stays fixed.

use std::fmt::Write as _;
use std::str::FromStr;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::accountant::{account, default_orders, delta_rule, AccountingResult, MechanismParams};
use crate::error::{Error, Result};

/// Base dataset size used for extrapolation, in examples.
pub const DEFAULT_BASE_DATASET: f64 = 2.85e6;
pub const DEFAULT_BASE_BATCH: f64 = 512.0;
pub const DEFAULT_STEPS: u64 = 1_000_000;
/// Batch multipliers above this are not reported in batch-only curves.
pub const BATCH_ONLY_K_CAP: f64 = 1000.0;
/// Largest scale factor the planner searches.
pub const MAX_SCALE: u64 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    BatchOnly,
    EqualScale,
    DatasetHeadstart10x,
}

impl ScaleMode {
    pub fn label(&self) -> &'static str {
        match self {
            ScaleMode::BatchOnly => "batch",
            ScaleMode::EqualScale => "equal",
            ScaleMode::DatasetHeadstart10x => "headstart",
        }
    }

    pub const ALL: [ScaleMode; 3] = [
        ScaleMode::BatchOnly,
        ScaleMode::EqualScale,
        ScaleMode::DatasetHeadstart10x,
    ];
}

impl FromStr for ScaleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "batch" | "batch_only" => Ok(ScaleMode::BatchOnly),
            "equal" | "equal_scale" => Ok(ScaleMode::EqualScale),
            "headstart" | "headstart10x" | "dataset_headstart_10x" => Ok(ScaleMode::DatasetHeadstart10x),
            other => Err(Error::Config(format!(
                "unknown scale mode `{other}` (expected batch, equal or headstart)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct PlanBase {
    pub n0: f64,
    pub b0: f64,
    pub steps: u64,
}

impl Default for PlanBase {
    fn default() -> Self {
        Self {
            n0: DEFAULT_BASE_DATASET,
            b0: DEFAULT_BASE_BATCH,
            steps: DEFAULT_STEPS,
        }
    }
}

impl PlanBase {
    pub fn validate(&self) -> Result<()> {
        if !(self.n0 >= 2.0 && self.b0 >= 1.0 && self.b0 <= self.n0) {
            return Err(Error::Config(format!("invalid base sizes {self:?}")));
        }
        Ok(())
    }
}

/// A fully resolved point of a scale plan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalePlan {
    pub mode: ScaleMode,
    pub k: f64,
    pub z0: f64,
    pub base: PlanBase,
}

impl ScalePlan {
    pub fn batch(&self) -> f64 {
        self.k * self.base.b0
    }

    pub fn dataset(&self) -> f64 {
        match self.mode {
            ScaleMode::BatchOnly => self.base.n0,
            ScaleMode::EqualScale => self.k * self.base.n0,
            ScaleMode::DatasetHeadstart10x => 10.0 * self.k * self.base.n0,
        }
    }

    pub fn noise(&self) -> f64 {
        self.k * self.z0
    }

    pub fn sampling_rate(&self) -> f64 {
        self.batch() / self.dataset()
    }

    pub fn delta(&self) -> Result<f64> {
        delta_rule(self.dataset())
    }

    pub fn mechanism(&self) -> MechanismParams {
        MechanismParams {
            q: self.sampling_rate(),
            z: self.noise(),
            steps: self.base.steps,
        }
    }

    pub fn account(&self, orders: &[f64]) -> Result<AccountingResult> {
        if !(self.k >= 1.0) {
            return Err(Error::Domain(format!("scale factor must be >= 1, got {}", self.k)));
        }
        account(&self.mechanism(), self.delta()?, orders)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanOutcome {
    pub plan: ScalePlan,
    pub result: AccountingResult,
}

/// Largest k for which the mode yields a valid sampling rate.
fn max_scale(base: &PlanBase, mode: ScaleMode) -> u64 {
    match mode {
        ScaleMode::BatchOnly => ((base.n0 / base.b0).floor() as u64).clamp(1, MAX_SCALE),
        _ => MAX_SCALE,
    }
}

/// Smallest integer k with ε(k) ≤ `target_eps`.
///
/// ε is first evaluated on a doubling grid of k to check that it does not
/// increase with k; a bisection over integers then finds the crossing.
pub fn plan_scale(z0: f64, target_eps: f64, mode: ScaleMode, base: &PlanBase) -> Result<PlanOutcome> {
    base.validate()?;
    if !(target_eps > 0.0) {
        return Err(Error::Config(format!("target ε must be positive, got {target_eps}")));
    }
    if !(z0 > 0.0 && z0.is_finite()) {
        return Err(Error::Config(format!("z0 must be positive, got {z0}")));
    }
    let orders = default_orders();
    let eval = |k: u64| -> Result<AccountingResult> {
        ScalePlan {
            mode,
            k: k as f64,
            z0,
            base: *base,
        }
        .account(&orders)
    };
    let k_max = max_scale(base, mode);
    let mut grid = vec![1u64];
    while *grid.last().unwrap() < k_max {
        grid.push((grid.last().unwrap() * 2).min(k_max));
    }
    let mut prev: Option<(u64, f64)> = None;
    let mut bracket = None;
    for &k in &grid {
        let eps = eval(k)?.epsilon;
        if let Some((pk, pe)) = prev {
            if eps > pe * (1.0 + 1e-9) {
                return Err(Error::Planner(format!(
                    "ε is not monotone in k for mode {}: ε({pk}) = {pe:.4} < ε({k}) = {eps:.4}",
                    mode.label()
                )));
            }
        }
        if eps <= target_eps {
            bracket = Some((prev.map_or(0, |(pk, _)| pk), k));
            break;
        }
        prev = Some((k, eps));
    }
    let (mut lo, mut hi) = bracket.ok_or_else(|| {
        Error::Planner(format!(
            "target ε = {target_eps} unreachable for z0 = {z0} within k ≤ {k_max} (mode {})",
            mode.label()
        ))
    })?;
    // Invariant: ε(hi) ≤ target, and lo == 0 or ε(lo) > target.
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if eval(mid)?.epsilon <= target_eps {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let plan = ScalePlan {
        mode,
        k: hi as f64,
        z0,
        base: *base,
    };
    Ok(PlanOutcome {
        result: plan.account(&orders)?,
        plan,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub mode: ScaleMode,
    pub z0: f64,
    pub k: f64,
    pub batch: f64,
    pub n: f64,
    pub delta: f64,
    pub epsilon: f64,
    pub opt_order: f64,
}

pub const CURVE_HEADER: &str = "mode,z0,k,batch,n,delta,epsilon,opt_order";

/// Default k grid for curve sweeps.
pub fn default_k_grid() -> Vec<f64> {
    vec![
        1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0, 200.0, 400.0, 500.0, 1000.0, 2000.0, 5000.0, 10000.0,
    ]
}

/// Noise multipliers used for the extrapolation curves.
pub fn default_z0_grid() -> Vec<f64> {
    vec![1e-4, 5e-4, 1e-3, 5e-3, 1e-2, 1e-1]
}

/// ε over a (z0, k) grid for each mode. Batch-only rows stop at
/// k = [`BATCH_ONLY_K_CAP`].
pub fn sweep_curves(z0s: &[f64], ks: &[f64], modes: &[ScaleMode], base: &PlanBase) -> Result<Vec<CurveRow>> {
    base.validate()?;
    let orders = default_orders();
    let mut rows = Vec::new();
    for &mode in modes {
        for &z0 in z0s {
            for &k in ks {
                if mode == ScaleMode::BatchOnly && k > BATCH_ONLY_K_CAP {
                    continue;
                }
                let plan = ScalePlan {
                    mode,
                    k,
                    z0,
                    base: *base,
                };
                if plan.sampling_rate() > 1.0 {
                    continue;
                }
                let r = plan.account(&orders)?;
                rows.push(CurveRow {
                    mode,
                    z0,
                    k,
                    batch: plan.batch(),
                    n: plan.dataset(),
                    delta: r.delta,
                    epsilon: r.epsilon,
                    opt_order: r.optimal_order,
                });
            }
        }
    }
    Ok(rows)
}

pub fn curves_csv(rows: &[CurveRow]) -> String {
    let mut out = format!("{CURVE_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{:e},{},{}",
            r.mode.label(),
            r.z0,
            r.k,
            r.batch,
            r.n,
            r.delta,
            r.epsilon,
            r.opt_order
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_parsing() {
        assert_eq!("equal".parse::<ScaleMode>().unwrap(), ScaleMode::EqualScale);
        assert_eq!("batch".parse::<ScaleMode>().unwrap(), ScaleMode::BatchOnly);
        assert_eq!(
            "headstart".parse::<ScaleMode>().unwrap(),
            ScaleMode::DatasetHeadstart10x
        );
        assert!("bogus".parse::<ScaleMode>().is_err());
    }

    #[test]
    fn equal_scale_keeps_q_fixed() {
        let base = PlanBase::default();
        let q1 = ScalePlan {
            mode: ScaleMode::EqualScale,
            k: 1.0,
            z0: 0.01,
            base,
        }
        .sampling_rate();
        for k in [2.0, 52.0, 530.0, 5450.0] {
            let q = ScalePlan {
                mode: ScaleMode::EqualScale,
                k,
                z0: 0.01,
                base,
            }
            .sampling_rate();
            assert_eq!(q, q1);
        }
    }

    #[test]
    fn headstart_has_tenfold_dataset() {
        let base = PlanBase::default();
        let p = ScalePlan {
            mode: ScaleMode::DatasetHeadstart10x,
            k: 3.0,
            z0: 0.01,
            base,
        };
        assert_eq!(p.dataset(), 30.0 * base.n0);
        assert_eq!(p.batch(), 3.0 * base.b0);
    }

    #[test]
    fn unreachable_target_is_planner_error() {
        let base = PlanBase {
            n0: 1000.0,
            b0: 500.0,
            steps: 1_000_000,
        };
        let err = plan_scale(1e-6, 1e-3, ScaleMode::BatchOnly, &base).unwrap_err();
        assert!(matches!(err, Error::Planner(_)), "{err}");
    }

    #[test]
    fn plan_round_trips() {
        let base = PlanBase::default();
        let out = plan_scale(1e-2, 10.0, ScaleMode::EqualScale, &base).unwrap();
        assert!(out.result.epsilon <= 10.0);
        let prev = ScalePlan {
            k: out.plan.k - 1.0,
            ..out.plan
        }
        .account(&default_orders())
        .unwrap();
        assert!(prev.epsilon > 10.0);
    }

    #[test]
    fn batch_only_curve_is_capped() {
        let rows = sweep_curves(&[0.1], &default_k_grid(), &[ScaleMode::BatchOnly], &PlanBase::default()).unwrap();
        assert!(rows.iter().all(|r| r.k <= BATCH_ONLY_K_CAP));
        assert!(!rows.is_empty());
    }

    #[test]
    fn csv_has_fixed_header() {
        let rows = sweep_curves(&[0.01], &[1.0, 2.0], &[ScaleMode::EqualScale], &PlanBase::default()).unwrap();
        let csv = curves_csv(&rows);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(CURVE_HEADER));
        assert_eq!(lines.count(), 2);
    }
}
