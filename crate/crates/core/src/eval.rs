//! Accuracy and diversity metrics: greedy accuracy, pass@k, ROUGE-L and
//! distinct correct solutions.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env;
use crate::error::{Error, Result};
use crate::policy::{DecodeCfg, Policy};
use crate::problem::{Problem, Solution, SolutionRecord};
use crate::util::rng_for;

pub const DISTINCT_THRESHOLD: f64 = 0.7;
pub const DEFAULT_EVAL_K: usize = 8;

/// Length of the longest common subsequence.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F1; 0 when either side is empty or nothing is shared.
pub fn rouge_l<T: PartialEq>(a: &[T], b: &[T]) -> f64 {
    let l = lcs_len(a, b);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / a.len() as f64;
    let r = l as f64 / b.len() as f64;
    2.0 * p * r / (p + r)
}

/// Correct solutions kept by greedy clustering in input order: a solution
/// counts if its step-token ROUGE-L against every kept one is below
/// `threshold`.
pub fn distinct_correct_count(solutions: &[Solution], threshold: f64) -> usize {
    let mut kept: Vec<&[crate::vocab::TokenId]> = Vec::new();
    for s in solutions.iter().filter(|s| s.correct) {
        if kept.iter().all(|k| rouge_l(k, &s.step_tokens) < threshold) {
            kept.push(&s.step_tokens);
        }
    }
    kept.len()
}

/// Fraction of rows whose first `k` entries contain a success.
pub fn pass_at_k(rows: &[Vec<bool>], k: usize) -> Result<f64> {
    if rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if let Some(short) = rows.iter().find(|r| r.len() < k) {
        return Err(Error::KTooLarge { k, len: short.len() });
    }
    let hits = rows.iter().filter(|r| r[..k].iter().any(|&c| c)).count();
    Ok(hits as f64 / rows.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub k: usize,
    /// Use the greedy path as sample 0 (then `k − 1` stochastic samples).
    pub prepend_greedy: bool,
    pub threshold: f64,
    #[serde(skip)]
    pub decode: DecodeCfg,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { k: DEFAULT_EVAL_K, prepend_greedy: false, threshold: DISTINCT_THRESHOLD, decode: DecodeCfg::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProblemEval {
    pub id: u64,
    pub greedy_correct: bool,
    pub sample_correct: Vec<bool>,
    pub distinct_correct: usize,
    pub samples: Vec<SolutionRecord>,
}

impl ProblemEval {
    pub fn n_correct(&self) -> usize {
        self.sample_correct.iter().filter(|&&c| c).count()
    }
}

/// Aggregate metrics, serialized as the JSON report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub method: String,
    pub n_problems: usize,
    pub k: usize,
    pub greedy_accuracy: f64,
    /// `pass@1 ..= pass@k`, keyed by k.
    pub pass_at_k: BTreeMap<usize, f64>,
    pub mean_distinct_correct: f64,
    pub distinct_threshold: f64,
    pub clustering: String,
    pub prepend_greedy: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub summary: EvalSummary,
    pub problems: Vec<ProblemEval>,
}

impl EvalReport {
    pub fn pass_at(&self, k: usize) -> Option<f64> {
        self.summary.pass_at_k.get(&k).copied()
    }

    pub fn write_json<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer_pretty(w, &self.summary)?;
        Ok(())
    }

    /// Per-problem rows: id, greedy_correct, n_correct, distinct_correct and
    /// one 0/1 column per sample.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["id".to_string(), "greedy_correct".into(), "n_correct".into(), "distinct_correct".into()];
        header.extend((0..self.summary.k).map(|i| format!("sample_{i}")));
        out.write_record(&header)?;
        for p in &self.problems {
            let mut row = vec![
                p.id.to_string(),
                u8::from(p.greedy_correct).to_string(),
                p.n_correct().to_string(),
                p.distinct_correct.to_string(),
            ];
            row.extend(p.sample_correct.iter().map(|&c| u8::from(c).to_string()));
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Writes `<stem>.json`, `<stem>.csv` and `<stem>_samples.jsonl` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let mut json = std::fs::File::create(dir.join(format!("{stem}.json")))?;
        self.write_json(&mut json)?;
        json.write_all(b"\n")?;
        self.write_csv(std::fs::File::create(dir.join(format!("{stem}.csv")))?)?;
        let records: Vec<SolutionRecord> = self.problems.iter().flat_map(|p| p.samples.iter().cloned()).collect();
        let f = std::io::BufWriter::new(std::fs::File::create(dir.join(format!("{stem}_samples.jsonl")))?);
        crate::problem::write_solutions(f, &records)
    }

    pub fn load_summary(path: &Path) -> Result<EvalSummary> {
        Ok(serde_json::from_reader(std::io::BufReader::new(std::fs::File::open(path)?))?)
    }
}

fn eval_problem(policy: &Policy, problem: &Problem, cfg: &EvalConfig) -> ProblemEval {
    let vocab = policy.vocab();
    let greedy = policy.greedy_decode(problem, cfg.decode.max_new_tokens);
    let greedy_sol = env::solution(problem, vocab, greedy.generated());
    let mut rng = rng_for(cfg.decode.seed, &[0x6576_616c, problem.id]);
    let mut trajs = Vec::with_capacity(cfg.k);
    if cfg.prepend_greedy && cfg.k > 0 {
        trajs.push(greedy.clone());
    }
    while trajs.len() < cfg.k {
        trajs.push(policy.sample_with(problem, &cfg.decode, &mut rng));
    }
    let sols: Vec<Solution> = trajs.iter().map(|t| env::solution(problem, vocab, t.generated())).collect();
    ProblemEval {
        id: problem.id,
        greedy_correct: greedy_sol.correct,
        sample_correct: sols.iter().map(|s| s.correct).collect(),
        distinct_correct: distinct_correct_count(&sols, cfg.threshold),
        samples: sols.iter().zip(&trajs).map(|(s, t)| SolutionRecord::new(problem.id, s, t)).collect(),
    }
}

/// Greedy decode plus `k` samples per problem, in parallel across problems.
pub fn evaluate(policy: &Policy, problems: &[Problem], cfg: &EvalConfig, method: &str) -> Result<EvalReport> {
    if problems.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if cfg.k == 0 {
        return Err(Error::InvalidConfig("eval k must be >= 1".into()));
    }
    cfg.decode.validate()?;
    let rows: Vec<ProblemEval> = problems.par_iter().map(|p| eval_problem(policy, p, cfg)).collect();
    let n = rows.len() as f64;
    let matrix: Vec<Vec<bool>> = rows.iter().map(|r| r.sample_correct.clone()).collect();
    let pass = (1..=cfg.k).map(|k| pass_at_k(&matrix, k).map(|v| (k, v))).collect::<Result<BTreeMap<_, _>>>()?;
    let summary = EvalSummary {
        method: method.to_string(),
        n_problems: rows.len(),
        k: cfg.k,
        greedy_accuracy: rows.iter().filter(|r| r.greedy_correct).count() as f64 / n,
        pass_at_k: pass,
        mean_distinct_correct: rows.iter().map(|r| r.distinct_correct as f64).sum::<f64>() / n,
        distinct_threshold: cfg.threshold,
        clustering: "greedy in sampling order over reasoning-step tokens".into(),
        prepend_greedy: cfg.prepend_greedy,
    };
    Ok(EvalReport { summary, problems: rows })
}
