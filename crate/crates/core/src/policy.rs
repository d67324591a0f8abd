//! Autoregressive next-token policies.
//!
//! A policy maps the last `window` tokens of a sequence to logits over the
//! vocabulary. Two parameterizations share one flat parameter vector:
//!
//! * **Tabular**: one logit per (context, token). Contexts are allocated on
//!   first registration; an unregistered context reads its deterministic
//!   initial row, so registration never changes the distribution.
//! * **Neural**: a feed-forward network over the concatenated embeddings of
//!   the last `window` tokens (left-padded), `tanh` hidden layers.
//!
//! A constrained policy renormalizes over [`env::allowed_next`].

use std::borrow::Cow;
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::env;
use crate::error::{Error, Result};
use crate::problem::{Problem, Trajectory};
use crate::util::{log_sum_exp, rng_for, Fnv};
use crate::vocab::{TokenId, Vocab};

/// Logit used for zero-probability entries in hand-built tables.
const NEG_LOGIT: f64 = -1000.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum PolicySpec {
    Tabular { window: usize, init_scale: f64 },
    Neural { window: usize, embed: usize, hidden: usize, layers: usize },
}

impl Default for PolicySpec {
    fn default() -> Self {
        PolicySpec::Tabular { window: 3, init_scale: 0.0 }
    }
}

impl PolicySpec {
    pub fn neural_default() -> Self {
        PolicySpec::Neural { window: 3, embed: 16, hidden: 64, layers: 1 }
    }
}

#[derive(Debug, Clone, Default)]
struct ContextTable {
    rows: HashMap<Vec<TokenId>, usize>,
    keys: Vec<Vec<TokenId>>,
}

#[derive(Debug, Clone)]
struct Tabular {
    window: usize,
    init_scale: f64,
    init_seed: u64,
    table: ContextTable,
}

#[derive(Debug, Clone)]
struct Neural {
    window: usize,
    embed: usize,
    hidden: usize,
    layers: usize,
    vocab_size: usize,
    init_seed: u64,
}

impl Neural {
    fn input_dim(&self) -> usize {
        self.window * self.embed
    }

    fn emb_offset(&self) -> usize {
        0
    }

    fn layer_offset(&self, l: usize) -> usize {
        let emb = (self.vocab_size + 1) * self.embed;
        let first = self.hidden * self.input_dim() + self.hidden;
        let rest = self.hidden * self.hidden + self.hidden;
        emb + if l == 0 { 0 } else { first + (l - 1) * rest }
    }

    fn layer_in(&self, l: usize) -> usize {
        if l == 0 {
            self.input_dim()
        } else {
            self.hidden
        }
    }

    fn head_offset(&self) -> usize {
        self.layer_offset(self.layers)
    }

    fn param_len(&self, out_dim: usize) -> usize {
        self.head_offset() + out_dim * self.hidden + out_dim
    }

    /// Embedding rows for the last `window` tokens, left-padded.
    fn rows(&self, seq: &[TokenId]) -> Vec<usize> {
        let start = seq.len().saturating_sub(self.window);
        let ctx = &seq[start..];
        let pad = self.window - ctx.len();
        (0..pad).map(|_| self.vocab_size).chain(ctx.iter().map(|t| t.index())).collect()
    }
}

#[derive(Debug, Clone)]
enum Arch {
    Tabular(Tabular),
    Neural(Neural),
}

/// Parameterized map from a token context to `out_dim` real outputs.
#[derive(Debug, Clone)]
pub struct Net {
    arch: Arch,
    params: Vec<f64>,
    out_dim: usize,
}

impl Net {
    pub fn new(spec: &PolicySpec, vocab_size: usize, out_dim: usize, seed: u64) -> Self {
        match *spec {
            PolicySpec::Tabular { window, init_scale } => Net {
                arch: Arch::Tabular(Tabular { window, init_scale, init_seed: seed, table: ContextTable::default() }),
                params: Vec::new(),
                out_dim,
            },
            PolicySpec::Neural { window, embed, hidden, layers } => {
                let n = Neural { window, embed, hidden, layers, vocab_size, init_seed: seed };
                let mut params = vec![0.0; n.param_len(out_dim)];
                let mut rng = rng_for(seed, &[0x6e65_7572]);
                for p in &mut params[..n.layer_offset(0)] {
                    *p = StandardNormal.sample(&mut rng);
                }
                for l in 0..layers {
                    let fan_in = n.layer_in(l);
                    let std = 1.0 / (fan_in as f64).sqrt();
                    let off = n.layer_offset(l);
                    for p in &mut params[off..off + hidden * fan_in] {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        *p = z * std;
                    }
                }
                let off = n.head_offset();
                let std = 1.0 / (hidden as f64).sqrt();
                for p in &mut params[off..off + out_dim * hidden] {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *p = z * std;
                }
                Net { arch: Arch::Neural(n), params, out_dim }
            }
        }
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn spec(&self) -> PolicySpec {
        match &self.arch {
            Arch::Tabular(t) => PolicySpec::Tabular { window: t.window, init_scale: t.init_scale },
            Arch::Neural(n) => {
                PolicySpec::Neural { window: n.window, embed: n.embed, hidden: n.hidden, layers: n.layers }
            }
        }
    }

    /// Number of allocated tabular contexts (0 for neural nets).
    pub fn context_count(&self) -> usize {
        match &self.arch {
            Arch::Tabular(t) => t.table.keys.len(),
            Arch::Neural(_) => 0,
        }
    }

    fn tab_context(window: usize, seq: &[TokenId]) -> &[TokenId] {
        &seq[seq.len().saturating_sub(window)..]
    }

    fn init_row(t: &Tabular, ctx: &[TokenId], out_dim: usize) -> Vec<f64> {
        if t.init_scale == 0.0 {
            return vec![0.0; out_dim];
        }
        let mut h = Fnv::new();
        for id in ctx {
            h.write(&id.0.to_le_bytes());
        }
        let mut rng = rng_for(t.init_seed, &[h.finish(), ctx.len() as u64]);
        (0..out_dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * t.init_scale
            })
            .collect()
    }

    /// Allocates parameters for the context ending `seq`; true if new.
    pub fn register(&mut self, seq: &[TokenId]) -> bool {
        let Arch::Tabular(t) = &mut self.arch else {
            return false;
        };
        let ctx = Self::tab_context(t.window, seq);
        if t.table.rows.contains_key(ctx) {
            return false;
        }
        let row = Self::init_row(t, ctx, self.out_dim);
        let base = self.params.len();
        self.params.extend_from_slice(&row);
        t.table.rows.insert(ctx.to_vec(), base);
        t.table.keys.push(ctx.to_vec());
        true
    }

    /// Parameter offset of the context's row, if allocated.
    fn row_base(&self, seq: &[TokenId]) -> Option<usize> {
        match &self.arch {
            Arch::Tabular(t) => t.table.rows.get(Self::tab_context(t.window, seq)).copied(),
            Arch::Neural(_) => None,
        }
    }

    fn hidden(&self, n: &Neural, seq: &[TokenId]) -> Vec<f64> {
        let p = &self.params;
        let mut x: Vec<f64> = Vec::with_capacity(n.input_dim());
        for r in n.rows(seq) {
            x.extend_from_slice(&p[n.emb_offset() + r * n.embed..][..n.embed]);
        }
        for l in 0..n.layers {
            let fan_in = n.layer_in(l);
            let off = n.layer_offset(l);
            let bias = off + n.hidden * fan_in;
            x = (0..n.hidden)
                .map(|k| {
                    let w = &p[off + k * fan_in..][..fan_in];
                    (w.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>() + p[bias + k]).tanh()
                })
                .collect();
        }
        x
    }

    /// All outputs for the context ending `seq`.
    pub fn outputs(&self, seq: &[TokenId]) -> Cow<'_, [f64]> {
        match &self.arch {
            Arch::Tabular(t) => match self.row_base(seq) {
                Some(b) => Cow::Borrowed(&self.params[b..b + self.out_dim]),
                None => Cow::Owned(Self::init_row(t, Self::tab_context(t.window, seq), self.out_dim)),
            },
            Arch::Neural(n) => {
                let h = self.hidden(n, seq);
                let off = n.head_offset();
                let bias = off + self.out_dim * n.hidden;
                Cow::Owned(
                    (0..self.out_dim)
                        .map(|j| {
                            let w = &self.params[off + j * n.hidden..][..n.hidden];
                            w.iter().zip(&h).map(|(a, b)| a * b).sum::<f64>() + self.params[bias + j]
                        })
                        .collect(),
                )
            }
        }
    }

    /// Selected outputs as tape nodes. Unregistered tabular contexts yield
    /// constants.
    pub fn outputs_on_tape(&self, tape: &mut Tape<'_>, seq: &[TokenId], which: &[usize]) -> Vec<Var> {
        match &self.arch {
            Arch::Tabular(t) => match self.row_base(seq) {
                Some(b) => which.iter().map(|&j| tape.param(b + j)).collect(),
                None => {
                    let row = Self::init_row(t, Self::tab_context(t.window, seq), self.out_dim);
                    which.iter().map(|&j| tape.constant(row[j])).collect()
                }
            },
            Arch::Neural(n) => {
                let mut x: Vec<Var> = Vec::with_capacity(n.input_dim());
                for r in n.rows(seq) {
                    for d in 0..n.embed {
                        x.push(tape.param(n.emb_offset() + r * n.embed + d));
                    }
                }
                for l in 0..n.layers {
                    let fan_in = n.layer_in(l);
                    let off = n.layer_offset(l);
                    let bias = off + n.hidden * fan_in;
                    x = (0..n.hidden)
                        .map(|k| {
                            let w: Vec<Var> = (0..fan_in).map(|i| tape.param(off + k * fan_in + i)).collect();
                            let z = tape.dot(&w, &x);
                            let b = tape.param(bias + k);
                            let z = tape.add(z, b);
                            tape.tanh(z)
                        })
                        .collect();
                }
                let off = n.head_offset();
                let bias = off + self.out_dim * n.hidden;
                which
                    .iter()
                    .map(|&j| {
                        let w: Vec<Var> = (0..n.hidden).map(|i| tape.param(off + j * n.hidden + i)).collect();
                        let z = tape.dot(&w, &x);
                        let b = tape.param(bias + j);
                        tape.add(z, b)
                    })
                    .collect()
            }
        }
    }
}

/// Per-prefix log-probabilities of one trajectory as tape nodes.
///
/// For `i` in `0..=n` (prefix of `i` generated tokens): `token[i]` is
/// `log π(s_{i+1} | s_{1:i})`, with `s_{n+1}` the stop symbol, and `stop[i]`
/// is `log π(s_T | s_{1:i})`.
#[derive(Debug, Clone)]
pub struct PrefixLogProbs {
    pub token: Vec<Var>,
    pub stop: Vec<Var>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecodeMode {
    #[serde(rename = "GREEDY", alias = "greedy")]
    Greedy,
    #[serde(rename = "SAMPLE", alias = "sample")]
    Sample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeCfg {
    pub mode: DecodeMode,
    pub temperature: f64,
    pub top_p: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for DecodeCfg {
    fn default() -> Self {
        Self { mode: DecodeMode::Sample, temperature: 0.6, top_p: 0.9, max_new_tokens: 64, seed: 0 }
    }
}

impl DecodeCfg {
    /// Plain ancestral sampling (temperature 1, no truncation).
    pub fn exact() -> Self {
        Self { temperature: 1.0, top_p: 1.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::InvalidConfig(format!("temperature {} must be > 0", self.temperature)));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::InvalidConfig(format!("top_p {} must lie in (0, 1]", self.top_p)));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::InvalidConfig("max_new_tokens must be positive".into()));
        }
        Ok(())
    }
}

/// Exact distribution over terminated solutions.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalDistribution {
    /// `(generated tokens, probability)` in depth-first order.
    pub terminals: Vec<(Vec<TokenId>, f64)>,
    /// Mass of sequences still running at `max_len` generated tokens.
    pub overflow: f64,
}

impl TerminalDistribution {
    pub fn total_mass(&self) -> f64 {
        self.terminals.iter().map(|(_, p)| p).sum::<f64>() + self.overflow
    }

    pub fn prob(&self, generated: &[TokenId]) -> f64 {
        self.terminals.iter().find(|(g, _)| g == generated).map_or(0.0, |(_, p)| *p)
    }
}

/// Conditional next-token distribution `π_θ(· | context)`.
#[derive(Debug, Clone)]
pub struct Policy {
    net: Net,
    vocab: Arc<Vocab>,
    constrained: bool,
}

impl Policy {
    pub fn new(spec: &PolicySpec, vocab: Arc<Vocab>, constrained: bool, seed: u64) -> Self {
        let net = Net::new(spec, vocab.size(), vocab.size(), seed);
        Self { net, vocab, constrained }
    }

    pub fn vocab(&self) -> &Arc<Vocab> {
        &self.vocab
    }

    pub fn constrained(&self) -> bool {
        self.constrained
    }

    pub fn spec(&self) -> PolicySpec {
        self.net.spec()
    }

    pub fn net(&self) -> &Net {
        &self.net
    }

    pub fn params(&self) -> &[f64] {
        self.net.params()
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        self.net.params_mut()
    }

    pub fn param_len(&self) -> usize {
        self.net.params.len()
    }

    fn full_seq(problem: &Problem, generated: &[TokenId]) -> Vec<TokenId> {
        let mut seq = Vec::with_capacity(problem.prompt.len() + generated.len());
        seq.extend_from_slice(&problem.prompt);
        seq.extend_from_slice(generated);
        seq
    }

    /// Tokens the policy may emit after `generated`.
    pub fn allowed(&self, problem: &Problem, generated: &[TokenId]) -> Vec<TokenId> {
        if self.constrained {
            env::allowed_next(problem, &self.vocab, generated)
        } else {
            (0..self.vocab.size() as u32).map(TokenId).collect()
        }
    }

    /// `(allowed tokens, their log-probabilities)` after `generated`.
    pub fn next_dist(&self, problem: &Problem, generated: &[TokenId]) -> (Vec<TokenId>, Vec<f64>) {
        let allowed = self.allowed(problem, generated);
        let seq = Self::full_seq(problem, generated);
        let out = self.net.outputs(&seq);
        let logits: Vec<f64> = allowed.iter().map(|t| out[t.index()]).collect();
        let lse = log_sum_exp(logits.iter().copied());
        let lp = logits.into_iter().map(|l| l - lse).collect();
        (allowed, lp)
    }

    /// Dense next-token log-probabilities (`-inf` where disallowed).
    pub fn next_logprobs(&self, problem: &Problem, generated: &[TokenId]) -> Vec<f64> {
        let (allowed, lp) = self.next_dist(problem, generated);
        let mut dense = vec![f64::NEG_INFINITY; self.vocab.size()];
        for (t, l) in allowed.into_iter().zip(lp) {
            dense[t.index()] = l;
        }
        dense
    }

    /// `log π(token_t | preceding)` for every generated token, stop included.
    pub fn logprob(&self, problem: &Problem, traj: &Trajectory) -> Result<Vec<f64>> {
        if traj.prompt_len != problem.prompt.len() || traj.tokens.get(..traj.prompt_len) != Some(&problem.prompt[..]) {
            return Err(Error::InconsistentTrajectory("prompt does not match problem".into()));
        }
        let gen = &traj.tokens[traj.prompt_len..];
        let mut out = Vec::with_capacity(gen.len());
        for (i, &tok) in gen.iter().enumerate() {
            let lp = self.next_logprobs(problem, &gen[..i])[tok.index()];
            if lp == f64::NEG_INFINITY {
                return Err(Error::InconsistentTrajectory(format!("token {tok} not admissible at step {i}")));
            }
            out.push(lp);
        }
        Ok(out)
    }

    /// Autoregressive draw with temperature scaling then nucleus truncation.
    /// Recorded log-probabilities are those of the untempered policy.
    pub fn sample_with<R: Rng + ?Sized>(&self, problem: &Problem, cfg: &DecodeCfg, rng: &mut R) -> Trajectory {
        let stop = self.vocab.stop_id();
        let mut generated = Vec::new();
        let mut logprobs = Vec::new();
        loop {
            let (allowed, lp) = self.next_dist(problem, &generated);
            let at_limit = generated.len() >= cfg.max_new_tokens;
            let pick = if at_limit {
                allowed.iter().position(|&t| t == stop).expect("stop always admissible")
            } else {
                match cfg.mode {
                    DecodeMode::Greedy => argmax(&lp),
                    DecodeMode::Sample => nucleus_pick(&lp, cfg.temperature, cfg.top_p, rng),
                }
            };
            let tok = allowed[pick];
            logprobs.push(lp[pick]);
            if tok == stop {
                break;
            }
            generated.push(tok);
        }
        Trajectory::terminated(problem, &generated, stop, logprobs)
    }

    /// [`Policy::sample_with`] seeded from `cfg.seed`.
    pub fn sample(&self, problem: &Problem, cfg: &DecodeCfg) -> Trajectory {
        let mut rng = rng_for(cfg.seed, &[problem.id]);
        self.sample_with(problem, cfg, &mut rng)
    }

    /// Argmax at every step, ties to the lowest token id; stop is forced
    /// after `max_new_tokens`.
    pub fn greedy_decode(&self, problem: &Problem, max_new_tokens: usize) -> Trajectory {
        let cfg = DecodeCfg { mode: DecodeMode::Greedy, max_new_tokens, ..DecodeCfg::default() };
        let mut rng = rng_for(0, &[]);
        self.sample_with(problem, &cfg, &mut rng)
    }

    /// Exact probability of every terminated solution of at most `max_len`
    /// generated tokens.
    pub fn terminal_distribution(&self, problem: &Problem, max_len: usize) -> Result<TerminalDistribution> {
        let mut dist = TerminalDistribution { terminals: Vec::new(), overflow: 0.0 };
        let mut prefix = Vec::new();
        let mut visited = 0usize;
        self.terminal_rec(problem, max_len, &mut prefix, 0.0, &mut dist, &mut visited)?;
        Ok(dist)
    }

    fn terminal_rec(
        &self,
        problem: &Problem,
        max_len: usize,
        prefix: &mut Vec<TokenId>,
        logp: f64,
        dist: &mut TerminalDistribution,
        visited: &mut usize,
    ) -> Result<()> {
        *visited += 1;
        if *visited > env::MAX_TERMINALS {
            return Err(Error::SpaceTooLarge { limit: env::MAX_TERMINALS });
        }
        let stop = self.vocab.stop_id();
        let (allowed, lp) = self.next_dist(problem, prefix);
        let mut continue_mass = 0.0;
        for (&t, &l) in allowed.iter().zip(&lp) {
            if t == stop {
                dist.terminals.push((prefix.clone(), (logp + l).exp()));
                continue;
            }
            let p = (logp + l).exp();
            if p == 0.0 {
                continue;
            }
            if prefix.len() >= max_len {
                continue_mass += p;
                continue;
            }
            prefix.push(t);
            self.terminal_rec(problem, max_len, prefix, logp + l, dist, visited)?;
            prefix.pop();
        }
        dist.overflow += continue_mass;
        Ok(())
    }

    /// Allocates tabular rows for every prefix of a solution (no-op for
    /// neural policies). Returns the number of new contexts.
    pub fn register(&mut self, problem: &Problem, generated: &[TokenId]) -> usize {
        let mut seq = problem.prompt.clone();
        let mut added = usize::from(self.net.register(&seq));
        for &t in generated {
            seq.push(t);
            added += usize::from(self.net.register(&seq));
        }
        added
    }

    /// Records the per-prefix log-probabilities of `generated` (followed by
    /// the stop symbol) on `tape`. The tape must read this policy's
    /// parameters.
    pub fn trace(&self, tape: &mut Tape<'_>, problem: &Problem, generated: &[TokenId]) -> Result<PrefixLogProbs> {
        let stop = self.vocab.stop_id();
        let n = generated.len();
        let mut token = Vec::with_capacity(n + 1);
        let mut stops = Vec::with_capacity(n + 1);
        let mut seq = problem.prompt.clone();
        for i in 0..=n {
            let next = if i < n { generated[i] } else { stop };
            let allowed = self.allowed(problem, &generated[..i]);
            let pick = allowed.binary_search(&next).map_err(|_| {
                Error::InconsistentTrajectory(format!("token {next} not admissible after {i} generated tokens"))
            })?;
            let stop_pick = allowed.binary_search(&stop).expect("stop always admissible");
            let which: Vec<usize> = allowed.iter().map(|t| t.index()).collect();
            let logits = self.net.outputs_on_tape(tape, &seq, &which);
            let tok_lp = tape.log_softmax(&logits, pick);
            let stop_lp = if stop_pick == pick { tok_lp } else { tape.log_softmax(&logits, stop_pick) };
            token.push(tok_lp);
            stops.push(stop_lp);
            if i < n {
                seq.push(generated[i]);
            }
        }
        Ok(PrefixLogProbs { token, stop: stops })
    }

    /// Overwrites a tabular context's row so that the allowed tokens get the
    /// given probabilities (unlisted tokens get probability ~0).
    pub fn set_distribution(&mut self, seq: &[TokenId], probs: &[(TokenId, f64)]) -> Result<()> {
        if !matches!(self.net.arch, Arch::Tabular(_)) {
            return Err(Error::InvalidConfig("set_distribution requires a tabular policy".into()));
        }
        self.net.register(seq);
        let base = self.net.row_base(seq).expect("registered");
        let row = &mut self.net.params[base..base + self.net.out_dim];
        row.iter_mut().for_each(|x| *x = NEG_LOGIT);
        for &(t, p) in probs {
            row[t.index()] = if p > 0.0 { p.ln() } else { NEG_LOGIT };
        }
        Ok(())
    }

    /// Number of allocated tabular contexts.
    pub fn context_count(&self) -> usize {
        self.net.context_count()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        write_checkpoint(&mut f, &self.net, self.vocab.fingerprint(), self.constrained)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path, vocab: Arc<Vocab>) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let (net, fingerprint, constrained) = read_checkpoint(&mut f)?;
        if fingerprint != vocab.fingerprint() {
            return Err(Error::Checkpoint("vocabulary fingerprint mismatch".into()));
        }
        if net.out_dim != vocab.size() {
            return Err(Error::Checkpoint("output width differs from vocabulary size".into()));
        }
        Ok(Self { net, vocab, constrained })
    }
}

/// State-value estimator with the policy's architecture and a scalar head.
#[derive(Debug, Clone)]
pub struct Critic {
    net: Net,
}

impl Critic {
    pub fn new(spec: &PolicySpec, vocab_size: usize, seed: u64) -> Self {
        let spec = match *spec {
            // values start at zero
            PolicySpec::Tabular { window, .. } => PolicySpec::Tabular { window, init_scale: 0.0 },
            ref s => s.clone(),
        };
        Self { net: Net::new(&spec, vocab_size, 1, seed) }
    }

    pub fn params(&self) -> &[f64] {
        self.net.params()
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        self.net.params_mut()
    }

    pub fn param_len(&self) -> usize {
        self.net.params.len()
    }

    /// `V(s)` for the state ending in `seq` (prompt included).
    pub fn value(&self, seq: &[TokenId]) -> f64 {
        self.net.outputs(seq)[0]
    }

    pub fn value_on_tape(&self, tape: &mut Tape<'_>, seq: &[TokenId]) -> Var {
        self.net.outputs_on_tape(tape, seq, &[0])[0]
    }

    pub fn register(&mut self, seq: &[TokenId]) -> bool {
        self.net.register(seq)
    }
}

fn argmax(lp: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in lp.iter().enumerate() {
        if x > lp[best] {
            best = i;
        }
    }
    best
}

/// Temperature-scaled, top-p-truncated draw over `lp` (indices ascend by
/// token id, so probability ties sort to the lower id).
fn nucleus_pick<R: Rng + ?Sized>(lp: &[f64], temperature: f64, top_p: f64, rng: &mut R) -> usize {
    let scaled: Vec<f64> = lp.iter().map(|l| l / temperature).collect();
    let lse = log_sum_exp(scaled.iter().copied());
    let probs: Vec<f64> = scaled.iter().map(|s| (s - lse).exp()).collect();
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut kept = 0;
    let mut cum = 0.0;
    for &i in &order {
        kept += 1;
        cum += probs[i];
        if cum >= top_p - 1e-12 {
            break;
        }
    }
    let nucleus = &order[..kept];
    let total: f64 = nucleus.iter().map(|&i| probs[i]).sum();
    let mut u = rng.random::<f64>() * total;
    for &i in nucleus {
        u -= probs[i];
        if u < 0.0 {
            return i;
        }
    }
    *nucleus.last().expect("non-empty nucleus")
}

const MAGIC: &[u8; 8] = b"FLOWSEQ\0";
const VERSION: u32 = 1;

fn write_checkpoint<W: Write>(w: &mut W, net: &Net, fingerprint: u64, constrained: bool) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let kind: u8 = match net.arch {
        Arch::Tabular(_) => 0,
        Arch::Neural(_) => 1,
    };
    w.write_all(&[kind, u8::from(constrained)])?;
    w.write_all(&(net.out_dim as u32).to_le_bytes())?;
    w.write_all(&fingerprint.to_le_bytes())?;
    match &net.arch {
        Arch::Tabular(t) => {
            w.write_all(&(t.window as u64).to_le_bytes())?;
            w.write_all(&t.init_scale.to_le_bytes())?;
            w.write_all(&t.init_seed.to_le_bytes())?;
            w.write_all(&(t.table.keys.len() as u64).to_le_bytes())?;
            for k in &t.table.keys {
                w.write_all(&(k.len() as u32).to_le_bytes())?;
                for id in k {
                    w.write_all(&id.0.to_le_bytes())?;
                }
            }
        }
        Arch::Neural(n) => {
            for d in [n.window, n.embed, n.hidden, n.layers, n.vocab_size] {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            w.write_all(&n.init_seed.to_le_bytes())?;
        }
    }
    w.write_all(&(net.params.len() as u64).to_le_bytes())?;
    for p in &net.params {
        w.write_all(&p.to_le_bytes())?;
    }
    Ok(())
}

fn read_array<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|e| Error::Checkpoint(format!("truncated file: {e}")))?;
    Ok(b)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    Ok(u32::from_le_bytes(read_array(r)?))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    Ok(u64::from_le_bytes(read_array(r)?))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    Ok(f64::from_le_bytes(read_array(r)?))
}

fn read_checkpoint<R: Read>(r: &mut R) -> Result<(Net, u64, bool)> {
    if &read_array::<_, 8>(r)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let [kind, constrained] = read_array::<_, 2>(r)?;
    let out_dim = read_u32(r)? as usize;
    let fingerprint = read_u64(r)?;
    let arch = match kind {
        0 => {
            let window = read_u64(r)? as usize;
            let init_scale = read_f64(r)?;
            let init_seed = read_u64(r)?;
            let n = read_u64(r)? as usize;
            let mut table = ContextTable::default();
            for i in 0..n {
                let len = read_u32(r)? as usize;
                let key = (0..len).map(|_| read_u32(r).map(TokenId)).collect::<Result<Vec<_>>>()?;
                table.rows.insert(key.clone(), i * out_dim);
                table.keys.push(key);
            }
            Arch::Tabular(Tabular { window, init_scale, init_seed, table })
        }
        1 => {
            let d: Vec<usize> = (0..5).map(|_| read_u64(r).map(|x| x as usize)).collect::<Result<_>>()?;
            let init_seed = read_u64(r)?;
            Arch::Neural(Neural {
                window: d[0],
                embed: d[1],
                hidden: d[2],
                layers: d[3],
                vocab_size: d[4],
                init_seed,
            })
        }
        k => return Err(Error::Checkpoint(format!("unknown policy kind {k}"))),
    };
    let n = read_u64(r)? as usize;
    let expected = match &arch {
        Arch::Tabular(t) => t.table.keys.len() * out_dim,
        Arch::Neural(nn) => nn.param_len(out_dim),
    };
    if n != expected {
        return Err(Error::Checkpoint(format!("expected {expected} parameters, found {n}")));
    }
    let params = (0..n).map(|_| read_f64(r)).collect::<Result<Vec<_>>>()?;
    Ok((Net { arch, params, out_dim }, fingerprint, constrained != 0))
}
