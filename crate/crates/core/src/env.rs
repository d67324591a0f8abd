//! Synthetic multi-solution derivation tasks and their programmatic rewards.
//!
//! Two task families share one vocabulary:
//!
//! * `SUMPATH`: prompt `SUM N :`; a solution is a sequence of addends drawn
//!   from the problem's admissible parts. Its implicit answer is the sum.
//! * `ARITH`: prompt `TARGET t FROM a b [c] :`; a solution is a series of
//!   `a op b = c` lines followed by `ANSWER v`.
//!
//! [`allowed_next`] is the grammar used for constrained decoding. The stop
//! symbol is admissible after every prefix, so every prefix is terminable.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problem::{Example, Problem, Rational, Solution, TaskKind};
use crate::util::rng_for;
use crate::vocab::{self, TokenId, Vocab};

/// Upper bound on sequences visited by the exhaustive enumerators.
pub const MAX_TERMINALS: usize = 10_000_000;

const MAX_ATTEMPTS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RewardMode {
    #[serde(rename = "TERMINAL", alias = "terminal")]
    Terminal,
    #[serde(rename = "SHAPED", alias = "shaped")]
    Shaped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub task_kind: TaskKind,
    /// Bounds for targets; the upper bound is also the largest number token.
    pub value_range: (i64, i64),
    /// Largest addend (SUMPATH) or largest starting operand (ARITH).
    pub operand_max: i64,
    /// Max addends (SUMPATH) or max derivation lines (ARITH).
    pub max_parts: usize,
    pub reward_floor: f64,
    pub reward_mode: RewardMode,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self::arith()
    }
}

impl TaskConfig {
    pub fn sumpath() -> Self {
        Self {
            task_kind: TaskKind::SumPath,
            value_range: (3, 6),
            operand_max: 3,
            max_parts: 6,
            reward_floor: 1e-4,
            reward_mode: RewardMode::Terminal,
        }
    }

    pub fn arith() -> Self {
        Self {
            task_kind: TaskKind::Arith,
            value_range: (1, 20),
            operand_max: 9,
            max_parts: 2,
            reward_floor: 1e-4,
            reward_mode: RewardMode::Shaped,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        let (lo, hi) = self.value_range;
        if lo < 0 || lo > hi {
            return bad(format!("value_range ({lo}, {hi}) must satisfy 0 <= lo <= hi"));
        }
        if self.operand_max < 1 || self.operand_max > hi {
            return bad(format!("operand_max {} must lie in [1, {hi}]", self.operand_max));
        }
        if self.max_parts < 2 && self.task_kind == TaskKind::SumPath {
            return bad("max_parts must be >= 2".into());
        }
        if self.max_parts < 1 {
            return bad("max_parts must be >= 1".into());
        }
        if !(self.reward_floor > 0.0 && self.reward_floor <= 0.01) {
            return bad(format!("reward_floor {} must lie in (0, 0.01]", self.reward_floor));
        }
        Ok(())
    }

    /// Vocabulary with number tokens up to the upper value bound.
    pub fn vocab(&self) -> Vocab {
        Vocab::arithmetic(self.value_range.1.max(0) as u32)
    }

    pub fn reward_fn(&self, vocab: &Vocab) -> RewardFn {
        RewardFn::new(vocab.clone(), self.reward_floor, self.reward_mode)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AnswerState {
    None,
    Correct,
    Wrong,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepVerdict {
    pub valid_steps: usize,
    pub total_steps: usize,
    pub answer_state: AnswerState,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ArithOp {
    Add,
    Sub,
    Mul,
}

impl ArithOp {
    pub const ALL: [ArithOp; 3] = [ArithOp::Add, ArithOp::Sub, ArithOp::Mul];

    pub fn symbol(self) -> &'static str {
        match self {
            ArithOp::Add => vocab::PLUS,
            ArithOp::Sub => vocab::MINUS,
            ArithOp::Mul => vocab::TIMES,
        }
    }

    pub fn from_symbol(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|o| o.symbol() == s)
    }

    pub fn apply(self, a: i64, b: i64) -> i64 {
        match self {
            ArithOp::Add => a + b,
            ArithOp::Sub => a - b,
            ArithOp::Mul => a * b,
        }
    }
}

/// A reward over solution prefixes, each treated as if terminated.
pub trait Reward: Sync {
    /// `generated` excludes the prompt and the stop symbol.
    fn reward(&self, problem: &Problem, generated: &[TokenId]) -> f64;
}

/// Programmatic stand-in for a step-level reward model.
#[derive(Debug, Clone)]
pub struct RewardFn {
    vocab: Vocab,
    floor: f64,
    mode: RewardMode,
}

impl RewardFn {
    pub fn new(vocab: Vocab, floor: f64, mode: RewardMode) -> Self {
        Self { vocab, floor, mode }
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    pub fn mode(&self) -> RewardMode {
        self.mode
    }
}

impl Reward for RewardFn {
    fn reward(&self, problem: &Problem, generated: &[TokenId]) -> f64 {
        reward(problem, &self.vocab, generated, self.floor, self.mode)
    }
}

/// `ε + (1-ε)·s·[answer correct]` with `s = 1` (terminal) or the fraction of
/// valid derivation lines (shaped).
pub fn reward(problem: &Problem, vocab: &Vocab, generated: &[TokenId], floor: f64, mode: RewardMode) -> f64 {
    let v = verify_prefix(problem, vocab, generated);
    if v.answer_state != AnswerState::Correct {
        return floor;
    }
    let score = match mode {
        RewardMode::Terminal => 1.0,
        RewardMode::Shaped => v.valid_steps as f64 / v.total_steps.max(1) as f64,
    };
    floor + (1.0 - floor) * score
}

fn strip_stop<'a>(generated: &'a [TokenId], vocab: &Vocab) -> &'a [TokenId] {
    match generated.split_last() {
        Some((&last, rest)) if last == vocab.stop_id() => rest,
        _ => generated,
    }
}

/// Tokens before the last `ANSWER` marker.
fn step_part<'a>(generated: &'a [TokenId], vocab: &Vocab) -> &'a [TokenId] {
    let answer = vocab.id(vocab::ANSWER);
    match generated.iter().rposition(|&t| Some(t) == answer) {
        Some(i) => &generated[..i],
        None => generated,
    }
}

/// Checks the derivation lines and answer of a solution prefix.
///
/// `generated` may carry a trailing stop symbol, which is ignored.
pub fn verify_prefix(problem: &Problem, vocab: &Vocab, generated: &[TokenId]) -> StepVerdict {
    let generated = strip_stop(generated, vocab);
    let steps = step_part(generated, vocab);
    let (valid_steps, total_steps, implicit) = match problem.task_kind {
        TaskKind::Arith => {
            let (valid, total) = count_lines(steps, vocab);
            (valid, total, None)
        }
        TaskKind::SumPath => {
            let addends: Vec<i64> = steps.iter().filter_map(|&t| vocab.value(t)).collect();
            let valid = addends.iter().filter(|a| problem.operands.contains(a)).count();
            let sum = (!addends.is_empty()).then(|| Rational::from_integer(addends.iter().sum()));
            (valid, addends.len(), sum)
        }
    };
    let text = vocab.decode(generated).unwrap_or_default();
    let answer = parse_final_answer(&text).or(implicit);
    let answer_state = match answer {
        None => AnswerState::None,
        Some(a) if answers_match(a, problem.target) => AnswerState::Correct,
        Some(_) => AnswerState::Wrong,
    };
    StepVerdict { valid_steps, total_steps, answer_state }
}

/// Scans for complete `a op b = c` lines; returns (valid, total).
fn count_lines(tokens: &[TokenId], vocab: &Vocab) -> (usize, usize) {
    let eq = vocab.id(vocab::EQUALS);
    let (mut valid, mut total, mut i) = (0, 0, 0);
    while i + 5 <= tokens.len() {
        let w = &tokens[i..i + 5];
        let a = vocab.value(w[0]);
        let op = vocab.token(w[1]).ok().and_then(ArithOp::from_symbol);
        let b = vocab.value(w[2]);
        let c = vocab.value(w[4]);
        match (a, op, b, Some(w[3]) == eq, c) {
            (Some(a), Some(op), Some(b), true, Some(c)) => {
                total += 1;
                if op.apply(a, b) == c {
                    valid += 1;
                }
                i += 5;
            }
            _ => i += 1,
        }
    }
    (valid, total)
}

/// Value after the last `ANSWER` marker: an integer or a fraction `p/q`.
pub fn parse_final_answer(text: &str) -> Option<Rational> {
    let units: Vec<&str> = text.split_whitespace().collect();
    let pos = units.iter().rposition(|&u| u == vocab::ANSWER)?;
    parse_value(units.get(pos + 1)?)
}

fn parse_value(s: &str) -> Option<Rational> {
    match s.split_once('/') {
        Some((p, q)) => {
            let p: i64 = p.parse().ok()?;
            let q: i64 = q.parse().ok()?;
            (q != 0).then(|| Rational::new(p, q))
        }
        None => s.parse::<i64>().ok().map(Rational::from_integer),
    }
}

fn round6(r: Rational) -> i128 {
    let n = i128::from(*r.numer()) * 1_000_000;
    let d = i128::from(*r.denom());
    // round half away from zero
    let q = n / d;
    let rem = n % d;
    if 2 * rem.abs() >= d.abs() {
        q + if (n < 0) != (d < 0) { -1 } else { 1 }
    } else {
        q
    }
}

/// Equality after rounding both values to six decimal places.
pub fn answers_match(a: Rational, b: Rational) -> bool {
    round6(a) == round6(b)
}

/// Decodes a generated token sequence into a [`Solution`].
pub fn solution(problem: &Problem, vocab: &Vocab, generated: &[TokenId]) -> Solution {
    let generated = strip_stop(generated, vocab);
    let verdict = verify_prefix(problem, vocab, generated);
    let text = vocab.decode(generated).unwrap_or_default();
    let steps = step_part(generated, vocab);
    let final_answer = parse_final_answer(&text).or_else(|| match problem.task_kind {
        TaskKind::SumPath if !steps.is_empty() => {
            Some(Rational::from_integer(steps.iter().filter_map(|&t| vocab.value(t)).sum()))
        }
        _ => None,
    });
    Solution {
        text,
        final_answer,
        correct: verdict.answer_state == AnswerState::Correct,
        step_tokens: steps.to_vec(),
    }
}

// ---------------------------------------------------------------------------
// Grammar

#[derive(Debug, Clone, Copy, PartialEq)]
enum Phase {
    LineStart,
    Lhs(i64),
    Op(i64),
    Rhs(i64, i64),
    Eq(i64, i64),
    AnswerKw,
    Done,
    Invalid,
}

struct ArithScan {
    avail: Vec<i64>,
    lines: usize,
    phase: Phase,
}

fn max_lines(problem: &Problem) -> usize {
    problem.max_solution_len.saturating_sub(2) / 5
}

fn remove_one(v: &mut Vec<i64>, x: i64) -> bool {
    match v.iter().position(|&y| y == x) {
        Some(i) => {
            v.remove(i);
            true
        }
        None => false,
    }
}

fn scan_arith(problem: &Problem, vocab: &Vocab, generated: &[TokenId]) -> ArithScan {
    let limit = max_lines(problem);
    let mut s = ArithScan { avail: problem.operands.clone(), lines: 0, phase: Phase::LineStart };
    for &t in generated {
        let num = vocab.value(t);
        let tok = vocab.token(t).unwrap_or("");
        s.phase = match (s.phase, num) {
            (Phase::LineStart, Some(a)) if s.lines < limit && s.avail.len() >= 2 && s.avail.contains(&a) => {
                Phase::Lhs(a)
            }
            (Phase::LineStart, None) if tok == vocab::ANSWER => Phase::AnswerKw,
            (Phase::Lhs(a), None) => match ArithOp::from_symbol(tok) {
                Some(_) => Phase::Op(a),
                None => Phase::Invalid,
            },
            (Phase::Op(a), Some(b)) => {
                let mut rest = s.avail.clone();
                remove_one(&mut rest, a);
                if rest.contains(&b) {
                    Phase::Rhs(a, b)
                } else {
                    Phase::Invalid
                }
            }
            (Phase::Rhs(a, b), None) if tok == vocab::EQUALS => Phase::Eq(a, b),
            (Phase::Eq(a, b), Some(c)) => {
                remove_one(&mut s.avail, a);
                remove_one(&mut s.avail, b);
                s.avail.push(c);
                s.lines += 1;
                Phase::LineStart
            }
            (Phase::AnswerKw, Some(v)) if s.avail.contains(&v) => Phase::Done,
            _ => Phase::Invalid,
        };
        if s.phase == Phase::Invalid {
            break;
        }
    }
    s
}

fn distinct_number_tokens(values: &[i64], vocab: &Vocab) -> impl Iterator<Item = TokenId> {
    let set: BTreeSet<i64> = values.iter().copied().collect();
    set.into_iter().filter_map(|v| vocab.number(v)).collect::<Vec<_>>().into_iter()
}

/// Grammatical next tokens after `generated`, ascending by id.
///
/// Always contains the stop symbol. Ungrammatical prefixes admit only stop.
pub fn allowed_next(problem: &Problem, vocab: &Vocab, generated: &[TokenId]) -> Vec<TokenId> {
    let mut out: Vec<TokenId> = Vec::new();
    if generated.len() < problem.max_solution_len {
        match problem.task_kind {
            TaskKind::SumPath => {
                let n = problem.target.to_integer();
                let mut sum = 0;
                let mut grammatical = true;
                for &t in generated {
                    match vocab.value(t) {
                        Some(v) if problem.operands.contains(&v) => sum += v,
                        _ => grammatical = false,
                    }
                }
                if grammatical {
                    out.extend(distinct_number_tokens(
                        &problem.operands.iter().copied().filter(|&p| sum + p <= n).collect::<Vec<_>>(),
                        vocab,
                    ));
                }
            }
            TaskKind::Arith => {
                let s = scan_arith(problem, vocab, generated);
                match s.phase {
                    Phase::LineStart => {
                        if s.lines < max_lines(problem) && s.avail.len() >= 2 {
                            out.extend(distinct_number_tokens(&s.avail, vocab));
                        }
                        out.extend(vocab.id(vocab::ANSWER));
                    }
                    Phase::Lhs(_) => {
                        out.extend(ArithOp::ALL.iter().filter_map(|o| vocab.id(o.symbol())));
                    }
                    Phase::Op(a) => {
                        let mut rest = s.avail.clone();
                        remove_one(&mut rest, a);
                        out.extend(distinct_number_tokens(&rest, vocab));
                    }
                    Phase::Rhs(..) => out.extend(vocab.id(vocab::EQUALS)),
                    Phase::Eq(..) => {
                        out.extend((0..vocab.size() as u32).map(TokenId).filter(|&t| vocab.value(t).is_some()));
                    }
                    Phase::AnswerKw => out.extend(distinct_number_tokens(&s.avail, vocab)),
                    Phase::Done | Phase::Invalid => {}
                }
            }
        }
    }
    out.push(vocab.stop_id());
    out.sort_unstable();
    out.dedup();
    out
}

// ---------------------------------------------------------------------------
// Enumeration

/// A terminated solution (prompt and stop symbol omitted) with its reward.
#[derive(Debug, Clone, PartialEq)]
pub struct Terminal {
    pub generated: Vec<TokenId>,
    pub reward: f64,
}

/// Every grammatical terminated solution with its reward, in depth-first
/// order. The rewards sum to the partition function `Z`.
pub fn enumerate_terminals(problem: &Problem, vocab: &Vocab, reward: &dyn Reward) -> Result<Vec<Terminal>> {
    let mut out = Vec::new();
    let mut prefix = Vec::with_capacity(problem.max_solution_len);
    enumerate_rec(problem, vocab, reward, &mut prefix, &mut out)?;
    Ok(out)
}

fn enumerate_rec(
    problem: &Problem,
    vocab: &Vocab,
    reward: &dyn Reward,
    prefix: &mut Vec<TokenId>,
    out: &mut Vec<Terminal>,
) -> Result<()> {
    if out.len() >= MAX_TERMINALS {
        return Err(Error::SpaceTooLarge { limit: MAX_TERMINALS });
    }
    out.push(Terminal { generated: prefix.clone(), reward: reward.reward(problem, prefix) });
    for t in allowed_next(problem, vocab, prefix) {
        if t == vocab.stop_id() {
            continue;
        }
        prefix.push(t);
        enumerate_rec(problem, vocab, reward, prefix, out)?;
        prefix.pop();
    }
    Ok(())
}

pub fn partition_function(terminals: &[Terminal]) -> f64 {
    terminals.iter().map(|t| t.reward).sum()
}

/// One `a op b = c` derivation line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct Line {
    a: i64,
    op: ArithOp,
    b: i64,
    c: i64,
}

/// All arithmetically valid derivations (as line lists) of up to `max_lines`
/// lines, starting from `operands`, with every value in `[0, hi]`.
fn derivations(operands: &[i64], max_lines: usize, hi: i64) -> BTreeSet<Vec<Line>> {
    fn rec(avail: &[i64], lines: &mut Vec<Line>, max_lines: usize, hi: i64, out: &mut BTreeSet<Vec<Line>>) {
        if !lines.is_empty() {
            out.insert(lines.clone());
        }
        if lines.len() == max_lines || avail.len() < 2 {
            return;
        }
        for i in 0..avail.len() {
            for j in 0..avail.len() {
                if i == j {
                    continue;
                }
                for op in ArithOp::ALL {
                    let (a, b) = (avail[i], avail[j]);
                    let c = op.apply(a, b);
                    if !(0..=hi).contains(&c) {
                        continue;
                    }
                    let mut next: Vec<i64> =
                        avail.iter().enumerate().filter(|&(k, _)| k != i && k != j).map(|(_, &v)| v).collect();
                    next.push(c);
                    lines.push(Line { a, op, b, c });
                    rec(&next, lines, max_lines, hi, out);
                    lines.pop();
                }
            }
        }
    }
    let mut out = BTreeSet::new();
    rec(operands, &mut Vec::new(), max_lines, hi, &mut out);
    out
}

fn line_tokens(lines: &[Line], vocab: &Vocab) -> Option<Vec<TokenId>> {
    let mut out = Vec::with_capacity(lines.len() * 5 + 2);
    for l in lines {
        out.push(vocab.number(l.a)?);
        out.push(vocab.id(l.op.symbol())?);
        out.push(vocab.number(l.b)?);
        out.push(vocab.id(vocab::EQUALS)?);
        out.push(vocab.number(l.c)?);
    }
    Some(out)
}

/// Reference derivations: every grammatical solution that reaches the target
/// through valid steps, in lexicographic token order.
///
/// SUMPATH: all compositions of `N` into admissible parts. ARITH: all valid
/// derivations whose last line produces the target, followed by `ANSWER t`.
pub fn reference_solutions(problem: &Problem, vocab: &Vocab) -> Vec<Vec<TokenId>> {
    let mut out = BTreeSet::new();
    match problem.task_kind {
        TaskKind::SumPath => {
            fn rec(parts: &[i64], rem: i64, max_len: usize, cur: &mut Vec<i64>, out: &mut BTreeSet<Vec<i64>>) {
                if rem == 0 && !cur.is_empty() {
                    out.insert(cur.clone());
                    return;
                }
                if cur.len() == max_len {
                    return;
                }
                for &p in parts {
                    if p <= rem {
                        cur.push(p);
                        rec(parts, rem - p, max_len, cur, out);
                        cur.pop();
                    }
                }
            }
            let parts: BTreeSet<i64> = problem.operands.iter().copied().collect();
            let parts: Vec<i64> = parts.into_iter().collect();
            let mut seqs = BTreeSet::new();
            rec(&parts, problem.target.to_integer(), problem.max_solution_len, &mut Vec::new(), &mut seqs);
            for s in seqs {
                if let Some(toks) = s.iter().map(|&v| vocab.number(v)).collect::<Option<Vec<_>>>() {
                    out.insert(toks);
                }
            }
        }
        TaskKind::Arith => {
            if !problem.target.is_integer() {
                return Vec::new();
            }
            let t = problem.target.to_integer();
            let hi = vocab.max_number().unwrap_or(0);
            for d in derivations(&problem.operands, max_lines(problem), hi) {
                if d.last().map(|l| l.c) != Some(t) {
                    continue;
                }
                if let (Some(mut toks), Some(ans), Some(tt)) =
                    (line_tokens(&d, vocab), vocab.id(vocab::ANSWER), vocab.number(t))
                {
                    toks.push(ans);
                    toks.push(tt);
                    out.insert(toks);
                }
            }
        }
    }
    out.into_iter().collect()
}

/// Pairs every problem with [`reference_solutions`].
pub fn examples(problems: &[Problem], vocab: &Vocab) -> Vec<Example> {
    problems
        .iter()
        .map(|p| Example { problem: p.clone(), references: reference_solutions(p, vocab) })
        .collect()
}

// ---------------------------------------------------------------------------
// Problem construction

/// `SUM n :` with admissible parts and at most `max_len` addends.
pub fn sumpath_problem(vocab: &Vocab, id: u64, n: i64, parts: &[i64], max_len: usize) -> Result<Problem> {
    let prompt = vec![
        vocab.id(vocab::SUM).ok_or_else(|| Error::UnknownToken(vocab::SUM.into()))?,
        vocab.number(n).ok_or_else(|| Error::UnknownToken(n.to_string()))?,
        vocab.id(vocab::COLON).ok_or_else(|| Error::UnknownToken(vocab::COLON.into()))?,
    ];
    Problem::new(id, TaskKind::SumPath, prompt, Rational::from_integer(n), parts.to_vec(), max_len)
}

/// `TARGET t FROM a b [c] :` allowing up to `lines` derivation lines.
pub fn arith_problem(vocab: &Vocab, id: u64, target: i64, operands: &[i64], lines: usize) -> Result<Problem> {
    let mut text = format!("{} {target} {}", vocab::TARGET, vocab::FROM);
    for o in operands {
        text.push_str(&format!(" {o}"));
    }
    text.push_str(&format!(" {}", vocab::COLON));
    Problem::new(
        id,
        TaskKind::Arith,
        vocab.encode(&text)?,
        Rational::from_integer(target),
        operands.to_vec(),
        5 * lines + 2,
    )
}

/// Draws a problem with at least two distinct reference solutions.
/// Deterministic in `seed`.
pub fn make_problem(cfg: &TaskConfig, vocab: &Vocab, id: u64, seed: u64) -> Result<Problem> {
    cfg.validate()?;
    let mut rng = rng_for(seed, &[id]);
    let (lo, hi) = cfg.value_range;
    for _ in 0..MAX_ATTEMPTS {
        let problem = match cfg.task_kind {
            TaskKind::SumPath => {
                let n = rng.random_range(lo.max(1)..=hi);
                let parts: Vec<i64> = (1..=cfg.operand_max).collect();
                sumpath_problem(vocab, id, n, &parts, cfg.max_parts)?
            }
            TaskKind::Arith => {
                let max_ops = (cfg.max_parts + 1).min(3);
                let count = rng.random_range(2..=max_ops.max(2));
                let operands: Vec<i64> = (0..count).map(|_| rng.random_range(lo.max(1)..=cfg.operand_max)).collect();
                let lines = cfg.max_parts.min(count - 1);
                let mut per_target: BTreeMap<i64, usize> = BTreeMap::new();
                for d in derivations(&operands, lines, hi) {
                    *per_target.entry(d.last().expect("non-empty").c).or_default() += 1;
                }
                let eligible: Vec<i64> = per_target
                    .into_iter()
                    .filter(|&(t, n)| n >= 2 && t >= lo && t <= hi && !operands.contains(&t))
                    .map(|(t, _)| t)
                    .collect();
                if eligible.is_empty() {
                    continue;
                }
                let t = eligible[rng.random_range(0..eligible.len())];
                arith_problem(vocab, id, t, &operands, lines)?
            }
        };
        if reference_solutions(&problem, vocab).len() >= 2 {
            return Ok(problem);
        }
    }
    Err(Error::Unsatisfiable(MAX_ATTEMPTS))
}

/// `n` problems with ids `0..n`.
pub fn make_dataset(cfg: &TaskConfig, vocab: &Vocab, n: usize, seed: u64) -> Result<Vec<Problem>> {
    (0..n as u64).map(|id| make_problem(cfg, vocab, id, seed)).collect()
}
