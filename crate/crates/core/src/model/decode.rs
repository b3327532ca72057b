use serde::{Deserialize, Serialize};

use super::forward::{forward_cached, PromptInput, Sequence};
use super::hooks::HookSet;
use super::math::softmax;
use super::ModelWeights;
use crate::error::{LabError, Result};
use crate::tokens::{TokenId, EOS};

/// Generated tokens with the distribution each was chosen from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodedSequence {
    pub tokens: Vec<TokenId>,
    pub distributions: Vec<Vec<f64>>,
}

impl DecodedSequence {
    pub fn first_token(&self) -> Option<TokenId> {
        self.tokens.first().copied()
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding for up to `max_new` tokens, stopping after `<EOS>`.
pub fn greedy_decode(
    weights: &ModelWeights,
    input: &PromptInput,
    hooks: &HookSet,
    max_new: usize,
) -> Result<DecodedSequence> {
    check_budget(weights, input, max_new)?;
    step_decode(max_new, |generated| {
        let seq = Sequence::from_prompt(input, generated);
        let (trace, _) = forward_cached(weights, &seq, hooks)?;
        Ok(softmax(&trace.next_token_logits().to_vec()))
    })
}

pub(crate) fn check_budget(weights: &ModelWeights, input: &PromptInput, max_new: usize) -> Result<()> {
    input.validate(weights)?;
    if max_new == 0 {
        return Err(LabError::config("max_new must be at least 1"));
    }
    let needed = input.num_visual() + input.text.len() + max_new - 1;
    if needed > weights.config.max_seq_len {
        return Err(LabError::config(format!(
            "decoding budget needs {needed} positions, max_seq_len is {}",
            weights.config.max_seq_len
        )));
    }
    Ok(())
}

/// Shared greedy loop: `next` maps the generated prefix to a distribution.
pub(crate) fn step_decode(
    max_new: usize,
    mut next: impl FnMut(&[TokenId]) -> Result<Vec<f64>>,
) -> Result<DecodedSequence> {
    let mut out = DecodedSequence {
        tokens: Vec::with_capacity(max_new),
        distributions: Vec::with_capacity(max_new),
    };
    for _ in 0..max_new {
        let dist = next(&out.tokens)?;
        let tok = argmax(&dist);
        out.tokens.push(tok);
        out.distributions.push(dist);
        if tok == EOS {
            break;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_picks_largest() {
        assert_eq!(argmax(&[0.1, 0.7, 0.2]), 1);
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.1, 0.45, 0.45]), 1);
    }
}
