//! Vocabulary binding and token sequences.

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

/// Static description of a model vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabInfo {
    pub size: usize,
    pub model_id: String,
    pub tokenizer_fingerprint: String,
    pub special_token_ids: BTreeSet<TokenId>,
}

impl VocabInfo {
    pub fn new(
        size: usize,
        model_id: impl Into<String>,
        tokenizer_fingerprint: impl Into<String>,
        special_token_ids: impl IntoIterator<Item = TokenId>,
    ) -> Result<Self> {
        if size < 2 {
            return Err(Error::usage(format!("vocabulary size {size} is below 2")));
        }
        let special_token_ids: BTreeSet<TokenId> = special_token_ids.into_iter().collect();
        if let Some(&bad) = special_token_ids.iter().find(|&&t| t as usize >= size) {
            return Err(Error::usage(format!(
                "special token {bad} outside vocabulary of size {size}"
            )));
        }
        Ok(Self {
            size,
            model_id: model_id.into(),
            tokenizer_fingerprint: tokenizer_fingerprint.into(),
            special_token_ids,
        })
    }

    pub fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        match tokens.iter().find(|&&t| t as usize >= self.size) {
            Some(&bad) => Err(Error::usage(format!(
                "token {bad} outside vocabulary of size {}",
                self.size
            ))),
            None => Ok(()),
        }
    }

    pub fn is_special(&self, token: TokenId) -> bool {
        self.special_token_ids.contains(&token)
    }
}

/// Token IDs bound to the vocabulary they were drawn from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    tokens: Vec<TokenId>,
    vocab: Arc<VocabInfo>,
}

impl TokenSequence {
    pub fn new(tokens: Vec<TokenId>, vocab: Arc<VocabInfo>) -> Result<Self> {
        vocab.check_tokens(&tokens)?;
        Ok(Self { tokens, vocab })
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn vocab(&self) -> &Arc<VocabInfo> {
        &self.vocab
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// A prompt and the response it induced, plus the prompt positions to attribute.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptResponsePair {
    prompt: TokenSequence,
    response: TokenSequence,
    mask: Vec<usize>,
}

impl PromptResponsePair {
    /// Builds a pair attributing every prompt position.
    pub fn new(prompt: TokenSequence, response: TokenSequence) -> Result<Self> {
        let mask = (0..prompt.len()).collect();
        Self::with_mask(prompt, response, mask)
    }

    pub fn with_mask(
        prompt: TokenSequence,
        response: TokenSequence,
        mut mask: Vec<usize>,
    ) -> Result<Self> {
        if prompt.is_empty() {
            return Err(Error::usage("prompt must contain at least one token"));
        }
        if response.is_empty() {
            return Err(Error::usage("response must contain at least one token"));
        }
        if prompt.vocab() != response.vocab() {
            return Err(Error::usage("prompt and response use different vocabularies"));
        }
        mask.sort_unstable();
        mask.dedup();
        if let Some(&bad) = mask.iter().find(|&&m| m >= prompt.len()) {
            return Err(Error::usage(format!(
                "mask position {bad} outside prompt of length {}",
                prompt.len()
            )));
        }
        Ok(Self {
            prompt,
            response,
            mask,
        })
    }

    /// Convenience constructor from raw token lists.
    pub fn from_tokens(
        vocab: Arc<VocabInfo>,
        prompt: Vec<TokenId>,
        response: Vec<TokenId>,
    ) -> Result<Self> {
        Self::new(
            TokenSequence::new(prompt, vocab.clone())?,
            TokenSequence::new(response, vocab)?,
        )
    }

    pub fn prompt(&self) -> &[TokenId] {
        self.prompt.tokens()
    }

    pub fn response(&self) -> &[TokenId] {
        self.response.tokens()
    }

    pub fn vocab(&self) -> &Arc<VocabInfo> {
        self.prompt.vocab()
    }

    /// Sorted, deduplicated positions eligible for attribution.
    pub fn mask(&self) -> &[usize] {
        &self.mask
    }

    pub fn is_masked(&self, position: usize) -> bool {
        self.mask.binary_search(&position).is_ok()
    }

    /// Same pair with a different attribution mask.
    pub fn remask(&self, mask: Vec<usize>) -> Result<Self> {
        Self::with_mask(self.prompt.clone(), self.response.clone(), mask)
    }

    /// The prompt with `token` substituted at `position`.
    pub fn prompt_with(&self, position: usize, token: TokenId) -> Vec<TokenId> {
        let mut p = self.prompt().to_vec();
        p[position] = token;
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(size: usize) -> Arc<VocabInfo> {
        Arc::new(VocabInfo::new(size, "m", "fp", []).unwrap())
    }

    #[test]
    fn vocab_rejects_tiny_and_out_of_range_specials() {
        assert!(VocabInfo::new(1, "m", "f", []).is_err());
        assert!(VocabInfo::new(4, "m", "f", [4]).is_err());
        assert!(VocabInfo::new(4, "m", "f", [3]).is_ok());
    }

    #[test]
    fn sequence_checks_range_and_allows_empty() {
        let v = vocab(3);
        assert!(TokenSequence::new(vec![0, 3], v.clone()).is_err());
        assert!(TokenSequence::new(vec![], v).unwrap().is_empty());
    }

    #[test]
    fn pair_validates_lengths_and_mask() {
        let v = vocab(3);
        assert!(PromptResponsePair::from_tokens(v.clone(), vec![], vec![1]).is_err());
        assert!(PromptResponsePair::from_tokens(v.clone(), vec![1], vec![]).is_err());
        let pair = PromptResponsePair::from_tokens(v.clone(), vec![0, 1, 2], vec![1]).unwrap();
        assert_eq!(pair.mask(), &[0, 1, 2]);
        assert!(pair.remask(vec![3]).is_err());
        let re = pair.remask(vec![2, 0, 2]).unwrap();
        assert_eq!(re.mask(), &[0, 2]);
        assert_eq!(pair.prompt_with(1, 2), vec![0, 2, 2]);

        let other = vocab(4);
        let p = TokenSequence::new(vec![0], v).unwrap();
        let r = TokenSequence::new(vec![0], other).unwrap();
        assert!(PromptResponsePair::new(p, r).is_err());
    }
}
