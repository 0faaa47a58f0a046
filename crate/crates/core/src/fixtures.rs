//! Hand-constructed tabular models with known behavior.
//!
//! Used by the test suites, the benches and the CLI demo fixtures.

use crate::error::Result;
use crate::toy::{TabularLM, ToyOptions};
use crate::vocab::TokenId;

/// Every row is the same distribution, so the response is independent of
/// every prompt token.
pub fn constant_rows(v: usize, order: usize) -> Result<TabularLM> {
    TabularLM::from_weights(v, order, ToyOptions::default(), |_| (1..=v).map(|i| i as f64).collect())
}

/// Order-1 model over 3 tokens where prompt `[0, 1]` with response `[2]`
/// gets a negative score at position 1: token 1 makes `2` unlikely while the
/// other replacements make it likely.
pub fn dominant_alternative() -> Result<TabularLM> {
    TabularLM::from_weights(3, 1, ToyOptions::default(), |c| match c.last() {
        None => vec![0.6, 0.2, 0.2],
        Some(0) => vec![0.1, 0.3, 0.6],
        Some(1) => vec![0.5, 0.45, 0.05],
        Some(_) => vec![0.05, 0.05, 0.9],
    })
}

/// Order-1 model over 4 tokens built for the replacement experiment on the
/// one-token prompt `[0]`.
///
/// Greedy decoding of two tokens yields exactly `distinct` different
/// responses (1..=3) across the 90%-mass candidates, each response produced
/// by the same number of candidates. For 1 and 3 the first-token
/// distribution is `(0.4, 0.3, 0.25, 0.05)` (candidates `{0, 1, 2}`); for 2
/// it is `(0.5, 0.45, 0.03, 0.02)` (candidates `{0, 1}`).
pub fn replacement_outcomes(distinct: usize) -> Result<TabularLM> {
    assert!((1..=3).contains(&distinct), "distinct outcomes must be 1, 2 or 3");
    // argmax successor per token
    let next: [TokenId; 4] = if distinct == 1 { [3, 3, 3, 3] } else { [3, 2, 1, 0] };
    let first = if distinct == 2 {
        vec![0.5, 0.45, 0.03, 0.02]
    } else {
        vec![0.4, 0.3, 0.25, 0.05]
    };
    TabularLM::from_weights(4, 1, ToyOptions::default(), move |c| match c.last() {
        None => first.clone(),
        Some(&t) => {
            let mut w = vec![0.1; 4];
            w[next[t as usize] as usize] = 0.7;
            w
        }
    })
}

/// Prompt used with [`replacement_outcomes`].
pub const REPLACEMENT_PROMPT: [TokenId; 1] = [0];

/// Order-2 model over 4 tokens with padding token 0 and a 4-token prompt
/// `[3, 1, 2, 3]` / response `[2, 1]` for evaluation-metric checks.
pub fn eval_fixture() -> Result<(TabularLM, Vec<TokenId>, Vec<TokenId>)> {
    let base = TabularLM::random_tabular(4, 2, 21)?;
    let m = base.with_options(ToyOptions {
        pad: Some(0),
        ..Default::default()
    })?;
    Ok((m, vec![3, 1, 2, 3], vec![2, 1]))
}

/// Order-2 model over 4 tokens (padding token 0) where the token after a
/// two-token context depends only on the older of the two. For prompt
/// `[1, 2]` and response `[3]`, position 0 is the single causal token and
/// position 1 is inert.
pub fn single_cause() -> Result<(TabularLM, Vec<TokenId>, Vec<TokenId>)> {
    let m = TabularLM::from_weights(
        4,
        2,
        ToyOptions {
            pad: Some(0),
            ..Default::default()
        },
        |c| match c {
            [] => vec![1.0, 1.0, 1.0, 1.0],
            [_] => vec![1.0, 1.0, 1.0, 1.0],
            [a, _] if *a == 1 => vec![0.05, 0.05, 0.05, 0.85],
            _ => vec![0.3, 0.3, 0.3, 0.1],
        },
    )?;
    Ok((m, vec![1, 2], vec![3]))
}
