//! Complexity-triggered spawn policy.
//!
//! Five runtime metrics are min/max normalized against a running
//! calibration window, combined with fixed weights into a spawn score, and
//! compared with the spawn threshold. When the score clears the threshold
//! and the depth, concurrency and cooldown gates are open, the dominant
//! normalized metric picks the child's specialization.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::{clamp_unit, Scalar};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("normalization bounds inverted: min {min} > max {max}")]
    InvertedBounds { min: f64, max: f64 },
    #[error("metric {metric} = {value} out of range")]
    MetricOutOfRange { metric: Metric, value: f64 },
    #[error("invalid policy config: {0}")]
    InvalidConfig(String),
}

/// The five monitored metrics, in weight order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Metric {
    /// Files requiring coordinated changes.
    #[serde(rename = "I_f")]
    Interdependency,
    /// Maximum cyclomatic complexity of modified functions.
    #[serde(rename = "C_c")]
    Cyclomatic,
    /// Tests failing after recent changes.
    #[serde(rename = "F_c")]
    FailureCascade,
    /// Fraction of the context window in use.
    #[serde(rename = "O_c")]
    ContextOccupancy,
    /// Negative log probability of the next action.
    #[serde(rename = "U_c")]
    Uncertainty,
}

impl Metric {
    pub const ALL: [Metric; 5] = [
        Metric::Interdependency,
        Metric::Cyclomatic,
        Metric::FailureCascade,
        Metric::ContextOccupancy,
        Metric::Uncertainty,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Metric::Interdependency => "I_f",
            Metric::Cyclomatic => "C_c",
            Metric::FailureCascade => "F_c",
            Metric::ContextOccupancy => "O_c",
            Metric::Uncertainty => "U_c",
        }
    }

    pub fn specialization(self) -> Specialization {
        match self {
            Metric::Interdependency => Specialization::Refactoring,
            Metric::Cyclomatic => Specialization::Simplification,
            Metric::FailureCascade => Specialization::TestingDebugging,
            Metric::ContextOccupancy => Specialization::ContextCompression,
            Metric::Uncertainty => Specialization::ResearchAnalysis,
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Specialization {
    Refactoring,
    Simplification,
    TestingDebugging,
    ContextCompression,
    ResearchAnalysis,
}

impl Specialization {
    pub const ALL: [Specialization; 5] = [
        Specialization::Refactoring,
        Specialization::Simplification,
        Specialization::TestingDebugging,
        Specialization::ContextCompression,
        Specialization::ResearchAnalysis,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Specialization::Refactoring => "refactoring",
            Specialization::Simplification => "simplification",
            Specialization::TestingDebugging => "testing_debugging",
            Specialization::ContextCompression => "context_compression",
            Specialization::ResearchAnalysis => "research_analysis",
        }
    }

    /// Human-readable role name.
    pub fn title(self) -> &'static str {
        match self {
            Specialization::Refactoring => "Refactoring specialist",
            Specialization::Simplification => "Code simplification agent",
            Specialization::TestingDebugging => "Testing and debugging expert",
            Specialization::ContextCompression => "Context compression agent",
            Specialization::ResearchAnalysis => "Research and analysis agent",
        }
    }
}

impl fmt::Display for Specialization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Specialization {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Specialization::ALL
            .into_iter()
            .find(|sp| sp.as_str() == s)
            .ok_or_else(|| format!("unknown specialization `{s}`"))
    }
}

/// Raw metric observation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct ComplexityMetrics<S> {
    #[serde(rename = "I_f")]
    pub interdependency: S,
    #[serde(rename = "C_c")]
    pub cyclomatic: S,
    #[serde(rename = "F_c")]
    pub failure_cascade: S,
    #[serde(rename = "O_c")]
    pub context_occupancy: S,
    #[serde(rename = "U_c")]
    pub uncertainty: S,
}

impl<S: Scalar> ComplexityMetrics<S> {
    pub fn new(values: [S; 5]) -> Self {
        let [interdependency, cyclomatic, failure_cascade, context_occupancy, uncertainty] = values;
        Self {
            interdependency,
            cyclomatic,
            failure_cascade,
            context_occupancy,
            uncertainty,
        }
    }

    pub fn zero() -> Self {
        Self::new([S::zero(); 5])
    }

    pub fn values(&self) -> [S; 5] {
        [
            self.interdependency,
            self.cyclomatic,
            self.failure_cascade,
            self.context_occupancy,
            self.uncertainty,
        ]
    }

    pub fn get(&self, metric: Metric) -> S {
        self.values()[metric.index()]
    }

    /// All metrics finite and nonnegative; occupancy at most one.
    pub fn validate(&self) -> Result<(), PolicyError> {
        for metric in Metric::ALL {
            let v = self.get(metric);
            let bad = !v.is_finite()
                || v < S::zero()
                || (metric == Metric::ContextOccupancy && v > S::one());
            if bad {
                return Err(PolicyError::MetricOutOfRange {
                    metric,
                    value: v.as_f64(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct Bounds<S> {
    pub min: S,
    pub max: S,
}

impl<S: Scalar> Bounds<S> {
    pub fn new(min: S, max: S) -> Self {
        Self { min, max }
    }
}

/// Running per-metric min/max, seeded with prior bounds. Only ever widens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct CalibrationState<S> {
    pub bounds: [Bounds<S>; 5],
}

impl<S: Scalar> CalibrationState<S> {
    pub fn with_priors(bounds: [Bounds<S>; 5]) -> Result<Self, PolicyError> {
        for b in &bounds {
            if !(b.min <= b.max) {
                return Err(PolicyError::InvertedBounds {
                    min: b.min.as_f64(),
                    max: b.max.as_f64(),
                });
            }
        }
        Ok(Self { bounds })
    }

    /// Normalizes each metric against the current bounds.
    pub fn normalize(&self, metrics: &ComplexityMetrics<S>) -> [S; 5] {
        let raw = metrics.values();
        std::array::from_fn(|i| {
            let b = self.bounds[i];
            normalize_metric(raw[i], b.min, b.max).unwrap_or_else(|_| S::zero())
        })
    }
}

impl<S: Scalar> Default for CalibrationState<S> {
    /// Priors: I_f [0,20], C_c [0,50], F_c [0,100], O_c [0,1], U_c [0,10].
    fn default() -> Self {
        let b = |hi: f64| Bounds::new(S::zero(), S::lit(hi));
        Self {
            bounds: [b(20.0), b(50.0), b(100.0), b(1.0), b(10.0)],
        }
    }
}

/// Widens the calibration window to include `metrics`.
pub fn update_calibration<S: Scalar>(state: &CalibrationState<S>, metrics: &ComplexityMetrics<S>) -> CalibrationState<S> {
    let raw = metrics.values();
    let mut next = *state;
    for (b, &v) in next.bounds.iter_mut().zip(raw.iter()) {
        if v.is_finite() {
            b.min = b.min.min(v);
            b.max = b.max.max(v);
        }
    }
    next
}

/// Linear map of `value` from `[min, max]` onto `[0, 1]`, clamped. A
/// degenerate window (`min == max`) maps everything to zero.
pub fn normalize_metric<S: Scalar>(value: S, min: S, max: S) -> Result<S, PolicyError> {
    if min > max {
        return Err(PolicyError::InvertedBounds {
            min: min.as_f64(),
            max: max.as_f64(),
        });
    }
    if max == min {
        return Ok(S::zero());
    }
    Ok(clamp_unit((value - min) / (max - min)))
}

/// Weighted sum of normalized metrics.
pub fn spawn_score<S: Scalar>(normalized: &[S; 5], weights: &[S; 5]) -> S {
    normalized
        .iter()
        .zip(weights)
        .fold(S::zero(), |acc, (&n, &w)| acc + w * n)
}

/// Specialization for the largest normalized metric; ties go to the metric
/// listed first (I_f, C_c, F_c, O_c, U_c).
pub fn dominant_specialization<S: Scalar>(normalized: &[S; 5]) -> Specialization {
    let mut best = 0;
    for i in 1..5 {
        if normalized[i] > normalized[best] {
            best = i;
        }
    }
    Metric::ALL[best].specialization()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct SpawnPolicyConfig<S> {
    /// Weights for I_f, C_c, F_c, O_c, U_c.
    pub weights: [S; 5],
    pub spawn_threshold: S,
    pub max_depth: u32,
    pub concurrent_limit: usize,
    pub cooldown_steps: u64,
}

impl<S: Scalar> Default for SpawnPolicyConfig<S> {
    fn default() -> Self {
        Self {
            weights: [0.30, 0.20, 0.25, 0.15, 0.10].map(S::lit),
            spawn_threshold: S::lit(0.7),
            max_depth: 3,
            concurrent_limit: 4,
            cooldown_steps: 5,
        }
    }
}

impl<S: Scalar> SpawnPolicyConfig<S> {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.weights.iter().any(|&w| !w.is_finite() || w < S::zero()) {
            return Err(PolicyError::InvalidConfig("weights must be nonnegative".into()));
        }
        let sum = self.weights.iter().fold(S::zero(), |a, &b| a + b);
        if (sum - S::one()).abs() > S::weight_tolerance() {
            return Err(PolicyError::InvalidConfig(format!("weights sum to {sum}, expected 1")));
        }
        if !(self.spawn_threshold >= S::zero() && self.spawn_threshold <= S::one()) {
            return Err(PolicyError::InvalidConfig("spawn_threshold must lie in [0, 1]".into()));
        }
        if self.max_depth == 0 {
            return Err(PolicyError::InvalidConfig("max_depth must be positive".into()));
        }
        if self.concurrent_limit == 0 {
            return Err(PolicyError::InvalidConfig("concurrent_limit must be positive".into()));
        }
        Ok(())
    }
}

/// Agent-local state the gates look at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RuntimeState {
    pub depth: u32,
    pub active_children: usize,
    /// Steps since this agent last spawned; `None` if it never has.
    pub steps_since_last_spawn: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpawnAction {
    Continue,
    Spawn,
}

/// Why a decision came out as `Continue`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gate {
    BelowThreshold,
    DepthLimit,
    ConcurrencyLimit,
    Cooldown,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpawnDecision<S> {
    pub action: SpawnAction,
    /// Present iff `action == Spawn`.
    pub specialization: Option<Specialization>,
    pub score: S,
    pub normalized: [S; 5],
    pub blocked_by: Option<Gate>,
}

impl<S: Scalar> SpawnDecision<S> {
    pub fn is_spawn(&self) -> bool {
        self.action == SpawnAction::Spawn
    }
}

/// Spawn iff the score is strictly above the threshold and every gate is open.
pub fn decide_spawn<S: Scalar>(
    metrics: &ComplexityMetrics<S>,
    calibration: &CalibrationState<S>,
    config: &SpawnPolicyConfig<S>,
    runtime: &RuntimeState,
) -> SpawnDecision<S> {
    let normalized = calibration.normalize(metrics);
    let score = spawn_score(&normalized, &config.weights);
    let blocked_by = if !(score > config.spawn_threshold) {
        Some(Gate::BelowThreshold)
    } else if runtime.depth >= config.max_depth {
        Some(Gate::DepthLimit)
    } else if runtime.active_children >= config.concurrent_limit {
        Some(Gate::ConcurrencyLimit)
    } else if runtime
        .steps_since_last_spawn
        .is_some_and(|s| s < config.cooldown_steps)
    {
        Some(Gate::Cooldown)
    } else {
        None
    };
    let (action, specialization) = match blocked_by {
        None => (SpawnAction::Spawn, Some(dominant_specialization(&normalized))),
        Some(_) => (SpawnAction::Continue, None),
    };
    SpawnDecision {
        action,
        specialization,
        score,
        normalized,
        blocked_by,
    }
}

/// Source of per-step metric observations.
pub trait MetricProvider<S: Scalar> {
    /// `Ok(None)` means the task has no further steps.
    fn next_metrics(&mut self) -> Result<Option<ComplexityMetrics<S>>, ProviderError>;
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("metric provider failed: {0}")]
pub struct ProviderError(pub String);

/// Replays a fixed list of observations.
#[derive(Debug, Clone)]
pub struct TraceProvider<S> {
    trace: Vec<ComplexityMetrics<S>>,
    cursor: usize,
}

impl<S: Scalar> TraceProvider<S> {
    pub fn new(trace: Vec<ComplexityMetrics<S>>) -> Self {
        Self { trace, cursor: 0 }
    }
}

impl<S: Scalar> MetricProvider<S> for TraceProvider<S> {
    fn next_metrics(&mut self) -> Result<Option<ComplexityMetrics<S>>, ProviderError> {
        let next = self.trace.get(self.cursor).copied();
        self.cursor += 1;
        Ok(next)
    }
}
