use crate::error::Result;
use crate::tensor::{Tape, Var};

/// Sum of token NLLs over labelled rows, with the labelled-row count.
/// `None` when every label is IGNORE.
pub fn token_nll_sum(tape: &mut Tape<'_>, logits: Var, labels: &[Option<usize>]) -> Result<Option<(Var, usize)>> {
    let count = labels.iter().filter(|l| l.is_some()).count();
    if count == 0 {
        return Ok(None);
    }
    Ok(Some((tape.cross_entropy_sum(logits, labels)?, count)))
}

/// Mean token NLL over labelled rows; `None` when every label is IGNORE.
pub fn token_cross_entropy(tape: &mut Tape<'_>, logits: Var, labels: &[Option<usize>]) -> Result<Option<Var>> {
    Ok(token_nll_sum(tape, logits, labels)?.map(|(sum, count)| tape.scale(sum, 1.0 / count as f64)))
}
