//! End-to-end method comparison on one problem suite: a shared SFT
//! initialization, then each fine-tuning method, each evaluated on the suite.

use std::sync::Arc;

use crate::baselines::{dpo_train, ppo_train, rft_train, sft_train};
use crate::config::{Method, RunConfig};
use crate::env::{self, RewardFn};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::gflownet::train_gflownet;
use crate::policy::{Critic, Policy};
use crate::problem::{Example, Problem, TaskKind};
use crate::train::TrainReport;
use crate::vocab::Vocab;

/// Problems with references, the shared vocabulary and the reward.
#[derive(Debug, Clone)]
pub struct Suite {
    pub vocab: Arc<Vocab>,
    pub reward: RewardFn,
    pub data: Vec<Example>,
}

impl Suite {
    pub fn from_problems(cfg: &RunConfig, problems: &[Problem]) -> Result<Self> {
        if problems.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let vocab = Arc::new(cfg.task.vocab());
        let reward = cfg.task.reward_fn(&vocab);
        let data = env::examples(problems, &vocab);
        Ok(Self { vocab, reward, data })
    }

    /// `cfg.n_problems` fresh problems from the data seed.
    pub fn generate(cfg: &RunConfig) -> Result<Self> {
        let vocab = cfg.task.vocab();
        let problems = env::make_dataset(&cfg.task, &vocab, cfg.n_problems, cfg.data_seed()?)?;
        Self::from_problems(cfg, &problems)
    }

    pub fn problems(&self) -> Vec<Problem> {
        self.data.iter().map(|e| e.problem.clone()).collect()
    }
}

/// Untrained policy for a run.
pub fn fresh_policy(cfg: &RunConfig, vocab: &Arc<Vocab>, seed: u64) -> Policy {
    Policy::new(&cfg.policy.spec(), vocab.clone(), cfg.policy.constrained, seed)
}

/// Trains `policy` in place with one method's objective.
pub fn train_method(method: Method, policy: &mut Policy, suite: &Suite, cfg: &RunConfig, seed: u64) -> Result<TrainReport> {
    match method {
        Method::Sft => sft_train(policy, &suite.data, &cfg.sft_cfg(seed)),
        Method::Rft => rft_train(policy, &suite.data, &suite.reward, &cfg.rft_cfg(seed)),
        Method::Dpo => dpo_train(policy, &suite.data, &suite.reward, &cfg.dpo_cfg(seed)),
        Method::Ppo => {
            let mut critic = Critic::new(&cfg.policy.spec(), suite.vocab.size(), seed ^ 0x00c0_ffee);
            ppo_train(policy, &mut critic, &suite.data, &suite.reward, &cfg.ppo_cfg(seed))
        }
        Method::Gflownet => {
            // ARITH terminal spaces run to ~1e5 sequences; only SUMPATH is cheap
            // enough to enumerate during training
            let diagnostic = suite.data.first().map(|e| &e.problem).filter(|p| p.task_kind == TaskKind::SumPath);
            train_gflownet(policy, &suite.data, &suite.reward, &cfg.gfn_cfg(seed), diagnostic)
        }
    }
}

/// One trained and evaluated method.
#[derive(Debug, Clone)]
pub struct MethodRun {
    pub method: Method,
    pub policy: Policy,
    pub train: TrainReport,
    pub eval: EvalReport,
}

/// SFT from a fresh policy, then every other requested method from the SFT
/// policy. Results follow `methods` order, SFT first when requested.
pub fn run_comparison(cfg: &RunConfig, suite: &Suite, seed: u64, methods: &[Method]) -> Result<Vec<MethodRun>> {
    let mut sft = fresh_policy(cfg, &suite.vocab, seed);
    let sft_report = train_method(Method::Sft, &mut sft, suite, cfg, seed)?;
    let problems = suite.problems();
    let eval_cfg = cfg.eval_cfg(seed);
    let mut out = Vec::new();
    for &m in methods {
        let (policy, train) = if m == Method::Sft {
            (sft.clone(), sft_report.clone())
        } else {
            let mut p = sft.clone();
            let r = train_method(m, &mut p, suite, cfg, seed)?;
            (p, r)
        };
        let eval = evaluate(&policy, &problems, &eval_cfg, m.name())?;
        log::info!(
            "{m}: greedy {:.3} pass@8 {:?} distinct {:.3}",
            eval.summary.greedy_accuracy,
            eval.pass_at(8),
            eval.summary.mean_distinct_correct
        );
        out.push(MethodRun { method: m, policy, train, eval });
    }
    Ok(out)
}
