//! Span penalties and the max-norm projection.

use std::fmt;
use std::str::FromStr;

use crate::attention::{raw_span_for, span_from_raw, span_var};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{Bound, WorldModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SpanPenalty {
    None,
    L1,
    L2,
    MaxNorm,
}

impl SpanPenalty {
    pub const ALL: [SpanPenalty; 4] = [
        SpanPenalty::None,
        SpanPenalty::L1,
        SpanPenalty::L2,
        SpanPenalty::MaxNorm,
    ];

    pub fn token(self) -> &'static str {
        match self {
            SpanPenalty::None => "none",
            SpanPenalty::L1 => "l1",
            SpanPenalty::L2 => "l2",
            SpanPenalty::MaxNorm => "maxnorm",
        }
    }
}

impl fmt::Display for SpanPenalty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for SpanPenalty {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SpanPenalty::ALL.into_iter().find(|p| p.token() == s).ok_or_else(|| {
            Error::config(
                "span_penalty",
                format!("unknown penalty `{s}`; expected none, l1, l2 or maxnorm"),
            )
        })
    }
}

/// `lambda * sum(L)` on the tape.
pub fn l1_penalty(tape: &mut Tape, spans: Var, lambda: f64) -> Result<Var> {
    let s = tape.sum(spans)?;
    tape.scale(s, lambda)
}

/// `lambda * sum(L^2)` on the tape.
pub fn l2_penalty(tape: &mut Tape, spans: Var, lambda: f64) -> Result<Var> {
    let sq = tape.square(spans)?;
    let s = tape.sum(sq)?;
    tape.scale(s, lambda)
}

pub fn l1_value(spans: &[f64], lambda: f64) -> f64 {
    lambda * spans.iter().sum::<f64>()
}

pub fn l2_value(spans: &[f64], lambda: f64) -> f64 {
    lambda * spans.iter().map(|l| l * l).sum::<f64>()
}

/// Penalty over the spans of every layer, or `None` when the kind has no
/// span or the penalty is not additive.
pub fn span_penalty_term(
    tape: &mut Tape,
    model: &WorldModel,
    bound: &Bound,
    penalty: SpanPenalty,
    lambda: f64,
) -> Result<Option<Var>> {
    let ids = model.span_ids();
    if ids.is_empty() || matches!(penalty, SpanPenalty::None | SpanPenalty::MaxNorm) {
        return Ok(None);
    }
    let max_span = model.config().max_adaptive_span;
    let mut total: Option<Var> = None;
    for id in ids {
        let spans = span_var(tape, bound.var(id), max_span)?;
        let term = match penalty {
            SpanPenalty::L1 => l1_penalty(tape, spans, lambda)?,
            _ => l2_penalty(tape, spans, lambda)?,
        };
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    Ok(total)
}

/// Resets every raw span whose derived span exceeds `c` so that the span
/// becomes `c`. Returns the number of heads changed.
pub fn maxnorm_project(raw_spans: &mut [f64], c: f64, max_span: f64) -> Result<usize> {
    if !(c > 0.0) {
        return Err(Error::config("maxnorm_c", format!("cap must be positive, got {c}")));
    }
    let mut target = raw_span_for(c)?;
    while span_from_raw(target, max_span) > c {
        target = target.next_down();
    }
    let mut changed = 0;
    for s in raw_spans.iter_mut() {
        if span_from_raw(*s, max_span) > c {
            *s = target;
            changed += 1;
        }
    }
    Ok(changed)
}

/// Applies [`maxnorm_project`] to every layer of `model`.
pub fn project_model_spans(model: &mut WorldModel, c: f64) -> Result<usize> {
    let max_span = model.config().max_adaptive_span;
    let mut changed = 0;
    for id in model.span_ids() {
        changed += maxnorm_project(model.params_mut().get_mut(id).tensor.data_mut(), c, max_span)?;
    }
    Ok(changed)
}

/// Derived spans of every layer and head, layer-major.
pub fn model_spans(model: &WorldModel) -> Vec<f64> {
    model.prior_snapshot().iter().filter_map(|p| p.span).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokens_parse() {
        for p in SpanPenalty::ALL {
            assert_eq!(p.token().parse::<SpanPenalty>().unwrap(), p);
        }
        assert!("l3".parse::<SpanPenalty>().is_err());
    }
}
