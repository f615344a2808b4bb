use super::{Action, ActionKind, ProtocolError};

/// Reduces a child's execution trace to the actions worth replaying.
pub trait TraceSummarizer {
    fn summarize(&self, trace: &[Action]) -> Vec<Action>;
}

/// Keeps every decision plus the first and last action.
#[derive(Debug, Clone, Copy, Default)]
pub struct KeyDecisionSummarizer;

impl TraceSummarizer for KeyDecisionSummarizer {
    fn summarize(&self, trace: &[Action]) -> Vec<Action> {
        let last = trace.len().saturating_sub(1);
        trace
            .iter()
            .enumerate()
            .filter(|(i, a)| *i == 0 || *i == last || a.kind == ActionKind::Decision)
            .map(|(_, a)| a.clone())
            .collect()
    }
}

/// Runs `summarizer` and checks its output: steps strictly increasing, every
/// action drawn from `trace`, and non-empty whenever `trace` is.
pub fn summarize_trace(trace: &[Action], summarizer: &dyn TraceSummarizer) -> Result<Vec<Action>, ProtocolError> {
    let summary = summarizer.summarize(trace);
    if summary.is_empty() && !trace.is_empty() {
        return Err(ProtocolError::EmptySummary);
    }
    for (i, pair) in summary.windows(2).enumerate() {
        if pair[1].step <= pair[0].step {
            return Err(ProtocolError::SummaryOutOfOrder(i + 1));
        }
    }
    if let Some(a) = summary.iter().find(|a| !trace.contains(a)) {
        return Err(ProtocolError::SummaryNotSubset(a.step));
    }
    Ok(summary)
}
