//! Problems, trajectories and decoded solutions.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{TokenId, Vocab};

pub type Rational = Ratio<i64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskKind {
    #[serde(rename = "SUMPATH", alias = "sumpath")]
    SumPath,
    #[serde(rename = "ARITH", alias = "arith")]
    Arith,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::SumPath => "SUMPATH",
            TaskKind::Arith => "ARITH",
        })
    }
}

/// A prompt `X = s_1..s_k` with its exact target.
///
/// For `SumPath`, `operands` lists the admissible addend values; for `Arith`
/// it lists the numbers the derivation may start from.
#[derive(Debug, Clone, PartialEq)]
pub struct Problem {
    pub id: u64,
    pub task_kind: TaskKind,
    pub prompt: Vec<TokenId>,
    pub target: Rational,
    pub operands: Vec<i64>,
    pub max_solution_len: usize,
}

impl Problem {
    pub fn new(
        id: u64,
        task_kind: TaskKind,
        prompt: Vec<TokenId>,
        target: Rational,
        operands: Vec<i64>,
        max_solution_len: usize,
    ) -> Result<Self> {
        if prompt.is_empty() {
            return Err(Error::InvalidProblem("empty prompt".into()));
        }
        if max_solution_len == 0 {
            return Err(Error::InvalidProblem("max_solution_len must be positive".into()));
        }
        if operands.iter().any(|&o| o <= 0) {
            return Err(Error::InvalidProblem("operands must be positive".into()));
        }
        Ok(Self { id, task_kind, prompt, target, operands, max_solution_len })
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt.len()
    }
}

/// JSON Lines form of a [`Problem`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemRecord {
    pub id: u64,
    pub task_kind: TaskKind,
    pub prompt: String,
    pub target: String,
    pub operands: Vec<i64>,
    pub max_solution_len: usize,
}

impl ProblemRecord {
    pub fn from_problem(p: &Problem, vocab: &Vocab) -> Result<Self> {
        Ok(Self {
            id: p.id,
            task_kind: p.task_kind,
            prompt: vocab.decode(&p.prompt)?,
            target: p.target.to_string(),
            operands: p.operands.clone(),
            max_solution_len: p.max_solution_len,
        })
    }

    pub fn to_problem(&self, vocab: &Vocab) -> Result<Problem> {
        let target = Rational::from_str(&self.target)
            .map_err(|_| Error::InvalidProblem(format!("bad target `{}`", self.target)))?;
        Problem::new(
            self.id,
            self.task_kind,
            vocab.encode(&self.prompt)?,
            target,
            self.operands.clone(),
            self.max_solution_len,
        )
    }
}

pub fn write_problems<W: Write>(mut w: W, problems: &[Problem], vocab: &Vocab) -> Result<()> {
    for p in problems {
        serde_json::to_writer(&mut w, &ProblemRecord::from_problem(p, vocab)?)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_problems<R: BufRead>(r: R, vocab: &Vocab) -> Result<Vec<Problem>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ProblemRecord = serde_json::from_str(&line)?;
        out.push(rec.to_problem(vocab)?);
    }
    Ok(out)
}

/// Prompt followed by generated tokens and, when terminated, the stop symbol.
///
/// `logprobs` holds one entry per generated token including the stop symbol.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub prompt_len: usize,
    pub tokens: Vec<TokenId>,
    pub logprobs: Vec<f64>,
    pub terminated: bool,
}

impl Trajectory {
    /// Terminated trajectory `prompt ++ generated ++ [stop]`.
    pub fn terminated(problem: &Problem, generated: &[TokenId], stop: TokenId, logprobs: Vec<f64>) -> Self {
        let mut tokens = Vec::with_capacity(problem.prompt.len() + generated.len() + 1);
        tokens.extend_from_slice(&problem.prompt);
        tokens.extend_from_slice(generated);
        tokens.push(stop);
        Self { prompt_len: problem.prompt.len(), tokens, logprobs, terminated: true }
    }

    pub fn prompt(&self) -> &[TokenId] {
        &self.tokens[..self.prompt_len]
    }

    /// Generated tokens, excluding the stop symbol.
    pub fn generated(&self) -> &[TokenId] {
        let end = self.tokens.len() - usize::from(self.terminated);
        &self.tokens[self.prompt_len..end]
    }

    /// `log π(Y|X)` as recorded at sampling time.
    pub fn logprob_sum(&self) -> f64 {
        self.logprobs.iter().sum()
    }

    pub fn validate(&self, problem: &Problem, stop: TokenId) -> Result<()> {
        let bad = |m: &str| Err(Error::InconsistentTrajectory(m.to_string()));
        if self.prompt_len != problem.prompt.len() || self.tokens.get(..self.prompt_len) != Some(&problem.prompt[..]) {
            return bad("prompt does not match problem");
        }
        let gen = &self.tokens[self.prompt_len..];
        let stops = gen.iter().filter(|&&t| t == stop).count();
        let ends_in_stop = gen.last() == Some(&stop);
        if self.terminated != (stops == 1 && ends_in_stop) || (!self.terminated && stops > 0) {
            return bad("stop symbol must appear exactly once, at the end, iff terminated");
        }
        if !self.logprobs.is_empty() && self.logprobs.len() != gen.len() {
            return bad("logprobs length differs from generated length");
        }
        if self.logprobs.iter().any(|&l| l > 0.0 || l.is_nan()) {
            return bad("log-probabilities must be <= 0");
        }
        Ok(())
    }
}

/// A training problem with its reference solutions (generated tokens, no
/// stop symbol).
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub problem: Problem,
    pub references: Vec<Vec<TokenId>>,
}

/// A decoded solution with its parsed answer.
#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub text: String,
    pub final_answer: Option<Rational>,
    pub correct: bool,
    pub step_tokens: Vec<TokenId>,
}

/// JSON Lines form of a sampled solution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionRecord {
    pub problem_id: u64,
    pub text: String,
    pub final_answer: Option<String>,
    pub correct: bool,
    pub logprob_sum: f64,
}

impl SolutionRecord {
    pub fn new(problem_id: u64, solution: &Solution, traj: &Trajectory) -> Self {
        Self {
            problem_id,
            text: solution.text.clone(),
            final_answer: solution.final_answer.map(|a| a.to_string()),
            correct: solution.correct,
            logprob_sum: traj.logprob_sum(),
        }
    }
}

pub fn write_solutions<W: Write>(mut w: W, records: &[SolutionRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn problem(v: &Vocab) -> Problem {
        Problem::new(7, TaskKind::SumPath, v.encode("SUM 3 :").unwrap(), Rational::from_integer(3), vec![1, 2], 3)
            .unwrap()
    }

    #[test]
    fn rejects_empty_prompt_and_bad_operands() {
        assert!(Problem::new(0, TaskKind::Arith, vec![], Rational::from_integer(1), vec![], 3).is_err());
        assert!(Problem::new(0, TaskKind::Arith, vec![TokenId(1)], Rational::from_integer(1), vec![0], 3).is_err());
    }

    #[test]
    fn record_round_trip() {
        let v = Vocab::arithmetic(9);
        let p = problem(&v);
        let mut buf = Vec::new();
        write_problems(&mut buf, std::slice::from_ref(&p), &v).unwrap();
        let line = String::from_utf8(buf.clone()).unwrap();
        assert!(line.contains("\"task_kind\":\"SUMPATH\""));
        assert!(line.contains("\"prompt\":\"SUM 3 :\""));
        assert_eq!(read_problems(&buf[..], &v).unwrap(), vec![p]);
    }

    #[test]
    fn trajectory_views_and_validation() {
        let v = Vocab::arithmetic(9);
        let p = problem(&v);
        let gen = v.encode("1 2").unwrap();
        let t = Trajectory::terminated(&p, &gen, v.stop_id(), vec![-0.5, -0.25, -0.1]);
        assert_eq!(t.generated(), &gen[..]);
        assert_eq!(t.prompt(), &p.prompt[..]);
        assert!((t.logprob_sum() + 0.85).abs() < 1e-12);
        t.validate(&p, v.stop_id()).unwrap();

        let mut wrong = t.clone();
        wrong.logprobs[0] = 0.5;
        assert!(wrong.validate(&p, v.stop_id()).is_err());
        let mut unterminated = t.clone();
        unterminated.terminated = false;
        assert!(unterminated.validate(&p, v.stop_id()).is_err());
    }

    #[test]
    fn solution_record_fields() {
        let v = Vocab::arithmetic(9);
        let p = problem(&v);
        let t = Trajectory::terminated(&p, &v.encode("1 2").unwrap(), v.stop_id(), vec![-1.0, -1.0, -1.0]);
        let s = Solution {
            text: "1 2".into(),
            final_answer: Some(Rational::from_integer(3)),
            correct: true,
            step_tokens: v.encode("1 2").unwrap(),
        };
        let json = serde_json::to_string(&SolutionRecord::new(p.id, &s, &t)).unwrap();
        assert_eq!(json, r#"{"problem_id":7,"text":"1 2","final_answer":"3","correct":true,"logprob_sum":-3.0}"#);
    }
}
