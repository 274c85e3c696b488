use super::{Prompt, TokenId, World};
use crate::error::{Error, Result};

pub const DEFAULT_CANDIDATE_CAP: u64 = 1_000_000;

#[derive(Clone, Debug, PartialEq)]
pub struct OracleResult {
    pub prompt: Prompt,
    pub score: f64,
    pub candidates: u64,
}

fn binomial(n: u64, k: u64) -> u64 {
    let k = k.min(n - k);
    (0..k).fold(1u64, |acc, i| acc.saturating_mul(n - i) / (i + 1))
}

/// Number of multisets of size `<= extra` over `alphabet` tokens: C(alphabet + extra, extra).
pub fn candidate_count(alphabet: usize, extra: usize) -> u64 {
    binomial((alphabet + extra) as u64, extra as u64)
}

/// Exhaustive search over `user_prompt` followed by every multiset of at most
/// `max_extra_tokens` content tokens (capped by the world's `max_len`), scored
/// noise-free against `user_prompt`. Ties go to the lexicographically
/// smallest candidate.
pub fn oracle_best_prompt(world: &World, user_prompt: &Prompt, max_extra_tokens: usize, cap: u64) -> Result<OracleResult> {
    world.check_prompt(user_prompt)?;
    let alphabet = world.vocab().n_content();
    let extra = max_extra_tokens.min(world.max_len() - user_prompt.len());
    let count = candidate_count(alphabet, extra);
    if count > cap {
        return Err(Error::Resource(format!(
            "oracle search space has {count} candidates, cap is {cap}"
        )));
    }

    let mut tokens: Vec<TokenId> = user_prompt.tokens().to_vec();
    let base_len = tokens.len();
    let mut best = OracleResult {
        prompt: user_prompt.clone(),
        score: f64::NEG_INFINITY,
        candidates: 0,
    };
    // Preorder walk over nondecreasing extensions visits candidates in
    // lexicographic order, so strict improvement implements the tie rule.
    fn walk(world: &World, user: &Prompt, tokens: &mut Vec<TokenId>, base_len: usize, extra: usize, alphabet: usize, best: &mut OracleResult) {
        let candidate = Prompt::from_raw(tokens.clone());
        let score = world.preference(&world.render_unchecked(&candidate), user);
        best.candidates += 1;
        if score > best.score {
            best.score = score;
            best.prompt = candidate;
        }
        if tokens.len() - base_len == extra {
            return;
        }
        let start = if tokens.len() > base_len { tokens[tokens.len() - 1] } else { 0 };
        for t in start..alphabet as TokenId {
            tokens.push(t);
            walk(world, user, tokens, base_len, extra, alphabet, best);
            tokens.pop();
        }
    }
    walk(world, user_prompt, &mut tokens, base_len, extra, alphabet, &mut best);
    debug_assert_eq!(best.candidates, count);
    Ok(best)
}
