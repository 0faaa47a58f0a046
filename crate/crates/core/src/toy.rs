//! Exactly enumerable tabular language models.
//!
//! A [`TabularLM`] of order `k` conditions each token on at most the `k`
//! tokens before it. It doubles as a backend and as the brute-force oracle
//! the attribution engine is checked against.
//!
//! # Fixture file grammar
//!
//! Plain UTF-8 text, one directive per line. `#` starts a comment; blank
//! lines are ignored. Probabilities are decimal strings parsed as IEEE-754
//! doubles (shortest round-trip form is written back out).
//!
//! ```text
//! tokattr-toy 1                 # header, required, first directive
//! vocab <V>                     # 2 <= V <= 16
//! order <k>                     # 1 or 2
//! model <id>                    # optional
//! stop <token>                  # optional stop token for generation
//! pad <token>                   # optional baseline token
//! special <token> ...           # optional special token IDs
//! names <piece_0> ... <piece_V-1>   # optional display pieces
//! row : <p_0> ... <p_V-1>       # first-token distribution
//! row <t> : <p_0> ... <p_V-1>   # context suffix of length 1
//! row <t1> <t2> : ...           # context suffix of length 2 (order 2)
//! ```
//!
//! Every context suffix of length `0..=k` needs exactly one row, and every
//! row must sum to one within `1e-12`.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backend::{generate_with, Detokenized, ScoringBackend, Strategy};
use crate::dist::{LogDistribution, EPS_TOY};
use crate::error::{Error, Result};
use crate::vocab::{TokenId, VocabInfo};

pub const MAX_VOCAB: usize = 16;
/// Upper bound on `V^N` for [`TabularLM::enumerate_joint`].
pub const MAX_JOINT_SIZE: u64 = 10_000_000;
/// Longest sequence the path-product oracle accepts.
pub const MAX_ORACLE_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct TabularLM {
    vocab: Arc<VocabInfo>,
    order: usize,
    rows: Vec<Vec<f64>>,
    log_rows: Vec<Vec<f64>>,
    stop: Option<TokenId>,
    pad: Option<TokenId>,
    names: Option<Vec<String>>,
}

/// Optional extras for a tabular model.
#[derive(Debug, Clone, Default)]
pub struct ToyOptions {
    pub model_id: Option<String>,
    pub stop: Option<TokenId>,
    pub pad: Option<TokenId>,
    pub special: Vec<TokenId>,
    pub names: Option<Vec<String>>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn row_count(v: usize, order: usize) -> usize {
    (0..=order).map(|l| v.pow(l as u32)).sum()
}

impl TabularLM {
    /// Builds a model from normalized rows in canonical order: the first-token
    /// row, then contexts of length 1 in lexicographic order, then length 2.
    pub fn new(v: usize, order: usize, rows: Vec<Vec<f64>>, opts: ToyOptions) -> Result<Self> {
        if !(2..=MAX_VOCAB).contains(&v) {
            return Err(Error::usage(format!("vocabulary size {v} outside [2, {MAX_VOCAB}]")));
        }
        if !(1..=2).contains(&order) {
            return Err(Error::usage(format!("order {order} must be 1 or 2")));
        }
        let expected = row_count(v, order);
        if rows.len() != expected {
            return Err(Error::usage(format!(
                "order-{order} model over {v} tokens needs {expected} rows, got {}",
                rows.len()
            )));
        }
        for (i, row) in rows.iter().enumerate() {
            if row.len() != v {
                return Err(Error::usage(format!("row {i} has {} entries, expected {v}", row.len())));
            }
            if row.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
                return Err(Error::usage(format!("row {i} has a negative or non-finite entry")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > EPS_TOY {
                return Err(Error::usage(format!("row {i} sums to {s}, not 1")));
            }
        }
        for t in [opts.stop, opts.pad].into_iter().flatten() {
            if t as usize >= v {
                return Err(Error::usage(format!("token {t} outside vocabulary")));
            }
        }
        if let Some(n) = &opts.names {
            if n.len() != v {
                return Err(Error::usage(format!("{} names for {v} tokens", n.len())));
            }
        }
        let log_rows = rows
            .iter()
            .map(|r| r.iter().map(|p| p.ln()).collect())
            .collect();
        let mut model = Self {
            vocab: Arc::new(VocabInfo::new(v, "", "", opts.special.iter().copied())?),
            order,
            rows,
            log_rows,
            stop: opts.stop,
            pad: opts.pad,
            names: opts.names,
        };
        let text = model.to_fixture_string();
        let digest = fnv1a(text.as_bytes());
        let names_digest = fnv1a(model.names.as_ref().map(|n| n.join("\u{1f}")).unwrap_or_default().as_bytes());
        let model_id = opts
            .model_id
            .unwrap_or_else(|| format!("toy-tabular-{digest:016x}"));
        model.vocab = Arc::new(VocabInfo::new(
            v,
            model_id,
            format!("toy-v{v}-{names_digest:016x}"),
            opts.special,
        )?);
        Ok(model)
    }

    /// Builds a model from unnormalized non-negative weights produced per
    /// context suffix; each row is divided by its sum.
    pub fn from_weights<F>(v: usize, order: usize, opts: ToyOptions, mut weights: F) -> Result<Self>
    where
        F: FnMut(&[TokenId]) -> Vec<f64>,
    {
        if !(2..=MAX_VOCAB).contains(&v) {
            return Err(Error::usage(format!("vocabulary size {v} outside [2, {MAX_VOCAB}]")));
        }
        let mut rows = Vec::new();
        for ctx in contexts(v, order) {
            let w = weights(&ctx);
            let s: f64 = w.iter().sum();
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::usage(format!("weights for context {ctx:?} have no mass")));
            }
            rows.push(w.iter().map(|x| x / s).collect());
        }
        Self::new(v, order, rows, opts)
    }

    /// Rows drawn from a symmetric Dirichlet(1), reproducible from `seed`.
    pub fn random_tabular(v: usize, order: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::from_weights(v, order, ToyOptions::default(), |_| {
            (0..v).map(|_| -(1.0 - rng.gen::<f64>()).ln()).collect()
        })
    }

    /// Like [`random_tabular`](Self::random_tabular) but each entry is zeroed
    /// with probability `zero_prob` (one entry per row always survives).
    pub fn random_sparse_tabular(v: usize, order: usize, seed: u64, zero_prob: f64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::from_weights(v, order, ToyOptions::default(), |_| {
            let mut w: Vec<f64> = (0..v).map(|_| -(1.0 - rng.gen::<f64>()).ln()).collect();
            let keep = rng.gen_range(0..v);
            for (i, x) in w.iter_mut().enumerate() {
                if i != keep && rng.gen::<f64>() < zero_prob {
                    *x = 0.0;
                }
            }
            w
        })
    }

    /// A model whose every row is uniform.
    pub fn uniform(v: usize, order: usize) -> Result<Self> {
        Self::from_weights(v, order, ToyOptions::default(), |_| vec![1.0; v])
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.size
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Rows in canonical order (see [`contexts`]).
    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// Same tables with different extras.
    pub fn with_options(&self, opts: ToyOptions) -> Result<Self> {
        Self::new(self.vocab.size, self.order, self.rows.clone(), opts)
    }

    pub fn names(&self) -> Option<&[String]> {
        self.names.as_deref()
    }

    fn row_index(&self, context: &[TokenId]) -> usize {
        let v = self.vocab.size;
        let l = context.len().min(self.order);
        let suffix = &context[context.len() - l..];
        let offset: usize = (0..l).map(|j| v.pow(j as u32)).sum();
        offset + suffix.iter().fold(0usize, |acc, &t| acc * v + t as usize)
    }

    /// Conditional probabilities of the next token after `context`.
    pub fn row(&self, context: &[TokenId]) -> &[f64] {
        &self.rows[self.row_index(context)]
    }

    pub fn log_row(&self, context: &[TokenId]) -> &[f64] {
        &self.log_rows[self.row_index(context)]
    }

    /// Linear-space probability of a whole sequence from position 0, as a
    /// plain product of table entries.
    pub fn path_prob(&self, seq: &[TokenId]) -> f64 {
        let mut p = 1.0;
        for i in 0..seq.len() {
            p *= self.row(&seq[..i])[seq[i] as usize];
        }
        p
    }

    /// Probability of every length-`n` sequence, indexed lexicographically.
    pub fn enumerate_joint(&self, n: usize) -> Result<JointTable> {
        let v = self.vocab.size;
        let size = (v as u64)
            .checked_pow(n as u32)
            .filter(|&s| s <= MAX_JOINT_SIZE)
            .ok_or_else(|| Error::usage(format!("{v}^{n} sequences exceed {MAX_JOINT_SIZE}")))?;
        let mut probs = Vec::with_capacity(size as usize);
        let mut seq = vec![0 as TokenId; n];
        for idx in 0..size {
            let mut rest = idx;
            for slot in seq.iter_mut().rev() {
                *slot = (rest % v as u64) as TokenId;
                rest /= v as u64;
            }
            probs.push(self.path_prob(&seq));
        }
        Ok(JointTable { v, n, probs })
    }

    /// Ground-truth attribution by direct marginalization:
    /// `ln [Pr(p⊕r)/Pr(p)] - ln [Σ_x Pr(p_x⊕r) / Σ_x Pr(p_x)]` where `p_x` is
    /// the prompt with `x` at `position`. No Bayes inversion is involved.
    pub fn oracle_attribution(&self, prompt: &[TokenId], response: &[TokenId], position: usize) -> Result<f64> {
        self.check_oracle_args(prompt, response, position)?;
        let full = self.path_prob(&[prompt, response].concat());
        let prompt_p = self.path_prob(prompt);
        let mut marg_joint = 0.0;
        let mut marg_prompt = 0.0;
        for x in 0..self.vocab.size as TokenId {
            let mut alt = prompt.to_vec();
            alt[position] = x;
            marg_prompt += self.path_prob(&alt);
            alt.extend_from_slice(response);
            marg_joint += self.path_prob(&alt);
        }
        if full == 0.0 || prompt_p == 0.0 || marg_joint == 0.0 {
            return Err(Error::degenerate("zero-probability prompt or response"));
        }
        Ok(((full / prompt_p) / (marg_joint / marg_prompt)).ln())
    }

    /// Ground-truth `Pr(r | p)` as a ratio of path products.
    pub fn oracle_response_prob(&self, prompt: &[TokenId], response: &[TokenId]) -> f64 {
        self.path_prob(&[prompt, response].concat()) / self.path_prob(prompt)
    }

    /// Ground-truth contextual distributions at `position`: the prompt-only
    /// conditional and the prompt+response conditional, in linear space.
    pub fn oracle_contextual(
        &self,
        prompt: &[TokenId],
        response: &[TokenId],
        position: usize,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_oracle_args(prompt, response, position)?;
        let mut q_p = Vec::with_capacity(self.vocab.size);
        let mut q_pr = Vec::with_capacity(self.vocab.size);
        for x in 0..self.vocab.size as TokenId {
            let mut alt = prompt.to_vec();
            alt[position] = x;
            q_p.push(self.path_prob(&alt));
            alt.extend_from_slice(response);
            q_pr.push(self.path_prob(&alt));
        }
        let sp: f64 = q_p.iter().sum();
        let spr: f64 = q_pr.iter().sum();
        if sp == 0.0 || spr == 0.0 {
            return Err(Error::degenerate("zero-probability context"));
        }
        Ok((q_p.iter().map(|x| x / sp).collect(), q_pr.iter().map(|x| x / spr).collect()))
    }

    fn check_oracle_args(&self, prompt: &[TokenId], response: &[TokenId], position: usize) -> Result<()> {
        if position >= prompt.len() {
            return Err(Error::usage(format!(
                "position {position} outside prompt of length {}",
                prompt.len()
            )));
        }
        if prompt.len() + response.len() > MAX_ORACLE_LEN {
            return Err(Error::usage(format!("oracle sequence longer than {MAX_ORACLE_LEN}")));
        }
        self.vocab.check_tokens(prompt)?;
        self.vocab.check_tokens(response)
    }

    /// Serializes the model in the fixture grammar.
    pub fn to_fixture_string(&self) -> String {
        let mut s = String::from("tokattr-toy 1\n");
        let _ = writeln!(s, "vocab {}", self.vocab.size);
        let _ = writeln!(s, "order {}", self.order);
        if !self.vocab.model_id.is_empty() && !self.vocab.model_id.starts_with("toy-tabular-") {
            let _ = writeln!(s, "model {}", self.vocab.model_id);
        }
        if let Some(t) = self.stop {
            let _ = writeln!(s, "stop {t}");
        }
        if let Some(t) = self.pad {
            let _ = writeln!(s, "pad {t}");
        }
        if !self.vocab.special_token_ids.is_empty() {
            let ids: Vec<String> = self.vocab.special_token_ids.iter().map(|t| t.to_string()).collect();
            let _ = writeln!(s, "special {}", ids.join(" "));
        }
        if let Some(n) = &self.names {
            let _ = writeln!(s, "names {}", n.join(" "));
        }
        for (ctx, row) in contexts(self.vocab.size, self.order).iter().zip(&self.rows) {
            let ctx: Vec<String> = ctx.iter().map(|t| t.to_string()).collect();
            let vals: Vec<String> = row.iter().map(|p| format!("{p:?}")).collect();
            if ctx.is_empty() {
                let _ = writeln!(s, "row : {}", vals.join(" "));
            } else {
                let _ = writeln!(s, "row {} : {}", ctx.join(" "), vals.join(" "));
            }
        }
        s
    }

    pub fn from_fixture_str(text: &str) -> Result<Self> {
        let bad = |line: usize, msg: &str| Error::usage(format!("fixture line {line}: {msg}"));
        let mut header = false;
        let mut v = None;
        let mut order = None;
        let mut opts = ToyOptions::default();
        let mut rows: Vec<(Vec<TokenId>, Vec<f64>)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut words = line.split_whitespace();
            let head = words.next().unwrap_or("");
            let rest: Vec<&str> = words.collect();
            if !header {
                if head != "tokattr-toy" || rest != ["1"] {
                    return Err(bad(lineno, "expected header 'tokattr-toy 1'"));
                }
                header = true;
                continue;
            }
            let one_int = |rest: &[&str]| -> Result<usize> {
                match rest {
                    [x] => x.parse().map_err(|_| bad(lineno, "expected an integer")),
                    _ => Err(bad(lineno, "expected exactly one value")),
                }
            };
            let tokens = |rest: &[&str]| -> Result<Vec<TokenId>> {
                rest.iter()
                    .map(|x| x.parse::<TokenId>().map_err(|_| bad(lineno, "expected token IDs")))
                    .collect()
            };
            match head {
                "vocab" => v = Some(one_int(&rest)?),
                "order" => order = Some(one_int(&rest)?),
                "model" => opts.model_id = Some(rest.join(" ")),
                "stop" => opts.stop = Some(one_int(&rest)? as TokenId),
                "pad" => opts.pad = Some(one_int(&rest)? as TokenId),
                "special" => opts.special = tokens(&rest)?,
                "names" => opts.names = Some(rest.iter().map(|s| s.to_string()).collect()),
                "row" => {
                    let colon = rest
                        .iter()
                        .position(|w| *w == ":")
                        .ok_or_else(|| bad(lineno, "row needs ':'"))?;
                    let ctx = tokens(&rest[..colon])?;
                    let vals = rest[colon + 1..]
                        .iter()
                        .map(|x| x.parse::<f64>().map_err(|_| bad(lineno, "expected decimal probability")))
                        .collect::<Result<Vec<_>>>()?;
                    rows.push((ctx, vals));
                }
                other => return Err(bad(lineno, &format!("unknown directive '{other}'"))),
            }
        }
        if !header {
            return Err(Error::usage("empty fixture"));
        }
        let v = v.ok_or_else(|| Error::usage("fixture lacks 'vocab'"))?;
        let order = order.ok_or_else(|| Error::usage("fixture lacks 'order'"))?;
        if !(2..=MAX_VOCAB).contains(&v) || !(1..=2).contains(&order) {
            return Err(Error::usage("fixture vocab or order out of range"));
        }
        let want = contexts(v, order);
        let mut ordered: Vec<Option<Vec<f64>>> = vec![None; want.len()];
        for (ctx, vals) in rows {
            let idx = want
                .iter()
                .position(|c| *c == ctx)
                .ok_or_else(|| Error::usage(format!("row for unexpected context {ctx:?}")))?;
            if ordered[idx].replace(vals).is_some() {
                return Err(Error::usage(format!("duplicate row for context {ctx:?}")));
            }
        }
        let rows = ordered
            .into_iter()
            .zip(&want)
            .map(|(r, c)| r.ok_or_else(|| Error::usage(format!("missing row for context {c:?}"))))
            .collect::<Result<Vec<_>>>()?;
        Self::new(v, order, rows, opts)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::usage(format!("cannot read fixture {}: {e}", path.display())))?;
        Self::from_fixture_str(&text)
    }
}

/// Every context suffix of length `0..=order`, in canonical row order.
pub fn contexts(v: usize, order: usize) -> Vec<Vec<TokenId>> {
    let mut out = vec![vec![]];
    let mut level: Vec<Vec<TokenId>> = vec![vec![]];
    for _ in 0..order {
        level = level
            .iter()
            .flat_map(|c| {
                (0..v as TokenId).map(move |t| {
                    let mut n = c.clone();
                    n.push(t);
                    n
                })
            })
            .collect();
        out.extend(level.iter().cloned());
    }
    out
}

/// Exhaustive joint distribution over fixed-length sequences.
#[derive(Debug, Clone)]
pub struct JointTable {
    v: usize,
    n: usize,
    probs: Vec<f64>,
}

impl JointTable {
    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.n
    }

    fn index(&self, seq: &[TokenId]) -> usize {
        seq.iter().fold(0usize, |acc, &t| acc * self.v + t as usize)
    }

    pub fn prob(&self, seq: &[TokenId]) -> f64 {
        assert_eq!(seq.len(), self.n, "sequence length mismatch");
        self.probs[self.index(seq)]
    }

    pub fn total(&self) -> f64 {
        self.probs.iter().sum()
    }

    /// Mass of all sequences starting with `prefix`.
    pub fn prefix_mass(&self, prefix: &[TokenId]) -> f64 {
        let span = self.v.pow((self.n - prefix.len()) as u32);
        let start = self.index(prefix) * span;
        self.probs[start..start + span].iter().sum()
    }

    /// Sum over sequences that agree with `pattern` wherever it is `Some`.
    pub fn pattern_mass(&self, pattern: &[Option<TokenId>]) -> f64 {
        assert_eq!(pattern.len(), self.n, "pattern length mismatch");
        self.iter()
            .filter(|(seq, _)| pattern.iter().zip(seq).all(|(p, t)| p.map_or(true, |p| p == *t)))
            .map(|(_, p)| p)
            .sum()
    }

    /// `(sequence, probability)` pairs in lexicographic order.
    pub fn iter(&self) -> impl Iterator<Item = (Vec<TokenId>, f64)> + '_ {
        self.probs.iter().enumerate().map(move |(idx, &p)| {
            let mut seq = vec![0 as TokenId; self.n];
            let mut rest = idx;
            for slot in seq.iter_mut().rev() {
                *slot = (rest % self.v) as TokenId;
                rest /= self.v;
            }
            (seq, p)
        })
    }
}

impl ScoringBackend for TabularLM {
    fn vocab(&self) -> Arc<VocabInfo> {
        self.vocab.clone()
    }

    fn is_deterministic(&self) -> bool {
        true
    }

    fn describe(&self) -> String {
        format!("toy:{}", self.vocab.model_id)
    }

    fn next_dist(&self, context: &[TokenId], top_mass: f64) -> Result<LogDistribution> {
        self.vocab.check_tokens(context)?;
        let d = LogDistribution::dense_unchecked(self.log_row(context).to_vec(), true);
        d.truncate_to_mass(top_mass)
    }

    fn token_logprobs(&self, context: &[TokenId], continuation: &[TokenId]) -> Result<Vec<f64>> {
        self.vocab.check_tokens(context)?;
        self.vocab.check_tokens(continuation)?;
        let mut seq = context.to_vec();
        let mut out = Vec::with_capacity(continuation.len());
        for &t in continuation {
            out.push(self.log_row(&seq)[t as usize]);
            seq.push(t);
        }
        Ok(out)
    }

    fn generate(&self, context: &[TokenId], strategy: &Strategy, max_new: usize) -> Result<Vec<TokenId>> {
        self.vocab.check_tokens(context)?;
        generate_with(self, context, strategy, max_new)
    }

    fn stop_token(&self) -> Option<TokenId> {
        self.stop
    }

    fn pad_token(&self) -> Option<TokenId> {
        self.pad
    }

    /// Whitespace-separated pieces: token names when the fixture has them,
    /// otherwise decimal token IDs.
    fn tokenize(&self, text: &str) -> Result<Vec<TokenId>> {
        text.split_whitespace()
            .map(|w| {
                if let Some(names) = &self.names {
                    if let Some(i) = names.iter().position(|n| n == w) {
                        return Ok(i as TokenId);
                    }
                }
                let t: TokenId = w
                    .parse()
                    .map_err(|_| Error::usage(format!("unknown token '{w}'")))?;
                self.vocab.check_tokens(&[t])?;
                Ok(t)
            })
            .collect()
    }

    fn detokenize(&self, tokens: &[TokenId]) -> Result<Detokenized> {
        self.vocab.check_tokens(tokens)?;
        let pieces: Vec<String> = tokens
            .iter()
            .map(|&t| match &self.names {
                Some(n) => n[t as usize].clone(),
                None => t.to_string(),
            })
            .collect();
        Ok(Detokenized {
            text: pieces.join(" "),
            pieces,
        })
    }
}
