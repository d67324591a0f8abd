//! Reward-maximizing comparison methods: SFT, RFT, DPO and PPO.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamState, Tape, Var, DEFAULT_LR};
use crate::env::Reward;
use crate::error::{Error, Result};
use crate::gflownet::sft_loss;
use crate::policy::{Critic, DecodeCfg, Policy};
use crate::problem::{Example, Problem};
use crate::train::{descend, TrainReport, TrainRow};
use crate::util::rng_for;
use crate::vocab::TokenId;

pub const DEFAULT_RFT_K: usize = 4;
pub const DEFAULT_DPO_BETA: f64 = 0.01;
pub const DEFAULT_KL_BETA: f64 = 0.1;
pub const DEFAULT_GAMMA: f64 = 1.0;
pub const DEFAULT_GAE_LAMBDA: f64 = 0.95;

/// `k` independent draws for one problem. Each draw has its own stream, so
/// results do not depend on the worker count.
pub fn sample_group(policy: &Policy, problem: &Problem, k: usize, decode: &DecodeCfg, stream: u64) -> Vec<Vec<TokenId>> {
    (0..k)
        .into_par_iter()
        .map(|s| {
            let mut rng = rng_for(decode.seed, &[stream, s as u64, problem.id]);
            policy.sample_with(problem, decode, &mut rng).generated().to_vec()
        })
        .collect()
}

fn check_lr(lr: f64) -> Result<()> {
    if lr > 0.0 && lr.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("learning rate {lr} must be positive")))
    }
}

/// Maximum-likelihood passes over `(example index, solution)` items.
#[allow(clippy::too_many_arguments)]
fn fit(
    policy: &mut Policy,
    data: &[Example],
    items: &[(usize, Vec<TokenId>)],
    epochs: usize,
    batch_size: usize,
    adam: &mut AdamState,
    seed: u64,
    report: &mut TrainReport,
    reward_stat: Option<f64>,
) -> Result<()> {
    let batch = if batch_size == 0 { items.len().max(1) } else { batch_size };
    let mut order: Vec<usize> = (0..items.len()).collect();
    for epoch in 0..epochs {
        if batch < items.len() {
            order.shuffle(&mut rng_for(seed, &[0x7366_7400, report.rows.len() as u64, epoch as u64]));
        }
        for chunk in order.chunks(batch) {
            for &i in chunk {
                let (ex, g) = &items[i];
                policy.register(&data[*ex].problem, g);
            }
            let (loss, _) = descend(policy, adam, |tape, pol| {
                let refs: Vec<(&Problem, &[TokenId])> =
                    chunk.iter().map(|&i| (&data[items[i].0].problem, items[i].1.as_slice())).collect();
                Ok((sft_loss(tape, pol, &refs)?, vec![]))
            })?;
            report.rows.push(TrainRow {
                step: report.rows.len(),
                loss,
                sft_loss: loss,
                mean_terminal_reward: reward_stat,
                buffer_size: 0,
                l1_to_target: None,
            });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SftConfig {
    pub epochs: usize,
    pub lr: f64,
    /// References per update; 0 means full batch.
    pub batch_size: usize,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self { epochs: 1, lr: DEFAULT_LR, batch_size: 16, seed: 0 }
    }
}

/// Supervised fine-tuning on every reference of every example.
pub fn sft_train(policy: &mut Policy, data: &[Example], cfg: &SftConfig) -> Result<TrainReport> {
    check_lr(cfg.lr)?;
    let items: Vec<(usize, Vec<TokenId>)> =
        data.iter().enumerate().flat_map(|(i, e)| e.references.iter().map(move |r| (i, r.clone()))).collect();
    if items.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut report = TrainReport::new("sft");
    let mut adam = AdamState::new(policy.param_len(), cfg.lr);
    fit(policy, data, &items, cfg.epochs, cfg.batch_size, &mut adam, cfg.seed, &mut report, None)?;
    Ok(report)
}

/// Index of the highest reward, ties to the earliest.
pub fn rft_select<T>(samples: &[T], rewards: &[f64]) -> Result<usize> {
    if samples.len() != rewards.len() || samples.is_empty() {
        return Err(Error::LengthMismatch(samples.len(), rewards.len()));
    }
    let mut best = 0;
    for (i, &r) in rewards.iter().enumerate() {
        if r > rewards[best] {
            best = i;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RftConfig {
    pub k: usize,
    /// Sample-then-fit rounds.
    pub rounds: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    #[serde(skip)]
    pub decode: DecodeCfg,
}

impl Default for RftConfig {
    fn default() -> Self {
        Self { k: DEFAULT_RFT_K, rounds: 1, epochs: 1, lr: DEFAULT_LR, batch_size: 16, decode: DecodeCfg::default() }
    }
}

/// Rejection-sampling fine-tuning: keep the best of `k` samples per problem
/// and fit them by maximum likelihood.
pub fn rft_train(policy: &mut Policy, data: &[Example], reward: &dyn Reward, cfg: &RftConfig) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if cfg.k == 0 {
        return Err(Error::InvalidConfig("rft k must be >= 1".into()));
    }
    check_lr(cfg.lr)?;
    cfg.decode.validate()?;
    let mut report = TrainReport::new("rft");
    let mut adam = AdamState::new(policy.param_len(), cfg.lr);
    for round in 0..cfg.rounds {
        let groups: Vec<(Vec<Vec<TokenId>>, Vec<f64>)> = data
            .iter()
            .map(|ex| {
                let s = sample_group(policy, &ex.problem, cfg.k, &cfg.decode, round as u64);
                let r = s.iter().map(|g| reward.reward(&ex.problem, g)).collect();
                (s, r)
            })
            .collect();
        let mut kept = Vec::with_capacity(data.len());
        let mut total = 0.0;
        for (i, (s, r)) in groups.into_iter().enumerate() {
            total += r.iter().sum::<f64>();
            let best = rft_select(&s, &r)?;
            kept.push((i, s[best].clone()));
        }
        let mean = total / (data.len() * cfg.k) as f64;
        fit(policy, data, &kept, cfg.epochs, cfg.batch_size, &mut adam, cfg.decode.seed, &mut report, Some(mean))?;
    }
    Ok(report)
}

/// Highest- and lowest-reward solutions of one problem.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferencePair {
    pub example: usize,
    pub chosen: Vec<TokenId>,
    pub rejected: Vec<TokenId>,
    pub chosen_reward: f64,
    pub rejected_reward: f64,
}

/// Pairs the first maximum with the first minimum; `None` when all rewards
/// are equal, since such a pair carries no preference.
pub fn preference_pair(example: usize, samples: &[Vec<TokenId>], rewards: &[f64]) -> Result<Option<PreferencePair>> {
    let hi = rft_select(samples, rewards)?;
    let mut lo = 0;
    for (i, &r) in rewards.iter().enumerate() {
        if r < rewards[lo] {
            lo = i;
        }
    }
    if rewards[hi] == rewards[lo] {
        return Ok(None);
    }
    Ok(Some(PreferencePair {
        example,
        chosen: samples[hi].clone(),
        rejected: samples[lo].clone(),
        chosen_reward: rewards[hi],
        rejected_reward: rewards[lo],
    }))
}

/// `log π(Y s_T | X)` summed over generated tokens and the stop symbol.
pub fn sequence_logprob(policy: &Policy, problem: &Problem, generated: &[TokenId]) -> Result<f64> {
    let mut tape = Tape::new(policy.params());
    let lp = policy.trace(&mut tape, problem, generated)?;
    Ok(lp.token.iter().map(|&v| tape.value(v)).sum())
}

/// `−log σ(β·[(log π_θ(c) − log π_ref(c)) − (log π_θ(r) − log π_ref(r))])`
/// with the reference terms given as constants.
#[allow(clippy::too_many_arguments)]
pub fn dpo_loss_from_ref(
    tape: &mut Tape<'_>,
    policy: &Policy,
    problem: &Problem,
    chosen: &[TokenId],
    rejected: &[TokenId],
    ref_chosen: f64,
    ref_rejected: f64,
    beta: f64,
) -> Result<Var> {
    let c = policy.trace(tape, problem, chosen)?;
    let c = tape.sum(&c.token);
    let r = policy.trace(tape, problem, rejected)?;
    let r = tape.sum(&r.token);
    let d = tape.sub(c, r);
    let margin = tape.offset(d, ref_rejected - ref_chosen);
    let neg = tape.scale(margin, -beta);
    Ok(tape.softplus(neg))
}

pub fn dpo_loss(
    tape: &mut Tape<'_>,
    policy: &Policy,
    reference: &Policy,
    problem: &Problem,
    pair: &PreferencePair,
    beta: f64,
) -> Result<Var> {
    let rc = sequence_logprob(reference, problem, &pair.chosen)?;
    let rr = sequence_logprob(reference, problem, &pair.rejected)?;
    dpo_loss_from_ref(tape, policy, problem, &pair.chosen, &pair.rejected, rc, rr, beta)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DpoConfig {
    pub beta: f64,
    pub samples_per_problem: usize,
    pub rounds: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    #[serde(skip)]
    pub decode: DecodeCfg,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self {
            beta: DEFAULT_DPO_BETA,
            samples_per_problem: 8,
            rounds: 1,
            epochs: 1,
            lr: DEFAULT_LR,
            batch_size: 16,
            decode: DecodeCfg::default(),
        }
    }
}

/// Direct preference optimization against a frozen copy of the incoming
/// policy, on highest-vs-lowest reward pairs from its own samples.
pub fn dpo_train(policy: &mut Policy, data: &[Example], reward: &dyn Reward, cfg: &DpoConfig) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !(cfg.beta > 0.0) || cfg.samples_per_problem < 2 {
        return Err(Error::InvalidConfig("dpo needs beta > 0 and at least 2 samples per problem".into()));
    }
    check_lr(cfg.lr)?;
    cfg.decode.validate()?;
    let reference = policy.clone();
    let mut report = TrainReport::new("dpo");
    let mut adam = AdamState::new(policy.param_len(), cfg.lr);
    let batch = cfg.batch_size.max(1);
    for round in 0..cfg.rounds {
        let mut pairs = Vec::new();
        let mut total = 0.0;
        for (i, ex) in data.iter().enumerate() {
            let s = sample_group(policy, &ex.problem, cfg.samples_per_problem, &cfg.decode, round as u64);
            let r: Vec<f64> = s.iter().map(|g| reward.reward(&ex.problem, g)).collect();
            total += r.iter().sum::<f64>();
            if let Some(p) = preference_pair(i, &s, &r)? {
                let rc = sequence_logprob(&reference, &ex.problem, &p.chosen)?;
                let rr = sequence_logprob(&reference, &ex.problem, &p.rejected)?;
                pairs.push((p, rc, rr));
            }
        }
        let mean = total / (data.len() * cfg.samples_per_problem) as f64;
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng_for(cfg.decode.seed, &[0x6470_6f00, round as u64, epoch as u64]));
            for chunk in order.chunks(batch) {
                for &i in chunk {
                    let (p, ..) = &pairs[i];
                    let problem = &data[p.example].problem;
                    policy.register(problem, &p.chosen);
                    policy.register(problem, &p.rejected);
                }
                let (loss, _) = descend(policy, &mut adam, |tape, pol| {
                    let mut terms = Vec::with_capacity(chunk.len());
                    for &i in chunk {
                        let (p, rc, rr) = &pairs[i];
                        let problem = &data[p.example].problem;
                        terms.push(dpo_loss_from_ref(tape, pol, problem, &p.chosen, &p.rejected, *rc, *rr, cfg.beta)?);
                    }
                    let total = tape.sum(&terms);
                    Ok((tape.scale(total, 1.0 / chunk.len() as f64), vec![]))
                })?;
                report.rows.push(TrainRow {
                    step: report.rows.len(),
                    loss,
                    sft_loss: 0.0,
                    mean_terminal_reward: Some(mean),
                    buffer_size: pairs.len(),
                    l1_to_target: None,
                });
            }
        }
    }
    Ok(report)
}

/// `A_t = Σ_{l≥0} (γλ)^l δ_{t+l}` with `δ_t = r_t + γ v_{t+1} − v_t`;
/// `values` carries the bootstrap value last.
pub fn gae_advantages(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Result<Vec<f64>> {
    if values.len() != rewards.len() + 1 {
        return Err(Error::LengthMismatch(values.len(), rewards.len() + 1));
    }
    let mut adv = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        let delta = rewards[t] + gamma * values[t + 1] - values[t];
        acc = delta + gamma * lambda * acc;
        adv[t] = acc;
    }
    Ok(adv)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub clip: f64,
    pub kl_beta: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub steps: usize,
    /// Problems per update.
    pub batch_size: usize,
    pub samples_per_problem: usize,
    pub epochs: usize,
    pub lr: f64,
    pub critic_lr: f64,
    #[serde(skip)]
    pub decode: DecodeCfg,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip: 0.2,
            kl_beta: DEFAULT_KL_BETA,
            gamma: DEFAULT_GAMMA,
            gae_lambda: DEFAULT_GAE_LAMBDA,
            steps: 200,
            batch_size: 8,
            samples_per_problem: 1,
            epochs: 1,
            lr: DEFAULT_LR,
            critic_lr: 3e-3,
            decode: DecodeCfg::default(),
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return bad(format!("clip {} must lie in (0, 1)", self.clip));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma {} must lie in (0, 1]", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad(format!("gae_lambda {} must lie in [0, 1]", self.gae_lambda));
        }
        if !(self.kl_beta >= 0.0) {
            return bad(format!("kl_beta {} must be >= 0", self.kl_beta));
        }
        if self.batch_size == 0 || self.samples_per_problem == 0 {
            return bad("batch_size and samples_per_problem must be >= 1".into());
        }
        check_lr(self.lr)?;
        check_lr(self.critic_lr)?;
        self.decode.validate()
    }
}

/// One sampled solution with everything the PPO update needs. Per-token
/// vectors have one entry per generated token plus the stop symbol.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub example: usize,
    pub generated: Vec<TokenId>,
    pub old_logprobs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    pub env_reward: f64,
}

/// States `prompt ++ generated[..t]` for `t = 0..=n`.
fn states(problem: &Problem, generated: &[TokenId]) -> Vec<Vec<TokenId>> {
    (0..=generated.len())
        .map(|t| {
            let mut s = problem.prompt.clone();
            s.extend_from_slice(&generated[..t]);
            s
        })
        .collect()
}

/// Scores a sampled solution: KL-shaped per-token rewards, critic values
/// and GAE advantages.
#[allow(clippy::too_many_arguments)]
pub fn make_rollout(
    policy: &Policy,
    reference: &Policy,
    critic: &Critic,
    reward: &dyn Reward,
    example: usize,
    problem: &Problem,
    generated: Vec<TokenId>,
    cfg: &PpoConfig,
) -> Result<Rollout> {
    let old = token_logprobs(policy, problem, &generated)?;
    let refl = token_logprobs(reference, problem, &generated)?;
    let env_reward = reward.reward(problem, &generated);
    let n = old.len();
    let mut rewards: Vec<f64> = old.iter().zip(&refl).map(|(o, r)| -cfg.kl_beta * (o - r)).collect();
    rewards[n - 1] += env_reward;
    let mut values: Vec<f64> = states(problem, &generated).iter().map(|s| critic.value(s)).collect();
    values.push(0.0);
    let advantages = gae_advantages(&rewards, &values, cfg.gamma, cfg.gae_lambda)?;
    let returns = advantages.iter().zip(&values).map(|(a, v)| a + v).collect();
    Ok(Rollout { example, generated, old_logprobs: old, advantages, returns, env_reward })
}

fn token_logprobs(policy: &Policy, problem: &Problem, generated: &[TokenId]) -> Result<Vec<f64>> {
    let mut tape = Tape::new(policy.params());
    let lp = policy.trace(&mut tape, problem, generated)?;
    Ok(lp.token.iter().map(|&v| tape.value(v)).collect())
}

/// Clipped surrogate `Σ_t min(ρ_t A_t, clip(ρ_t, 1−ε, 1+ε) A_t)` with
/// `ρ_t = π_θ/π_old`. The branch is chosen on forward values; a clipped
/// branch is a constant.
pub fn ppo_surrogate(
    tape: &mut Tape<'_>,
    policy: &Policy,
    problem: &Problem,
    generated: &[TokenId],
    old_logprobs: &[f64],
    advantages: &[f64],
    clip: f64,
) -> Result<Var> {
    let lp = policy.trace(tape, problem, generated)?;
    if old_logprobs.len() != lp.token.len() || advantages.len() != lp.token.len() {
        return Err(Error::LengthMismatch(old_logprobs.len().min(advantages.len()), lp.token.len()));
    }
    let mut terms = Vec::with_capacity(lp.token.len());
    for ((&l, &old), &a) in lp.token.iter().zip(old_logprobs).zip(advantages) {
        let d = tape.offset(l, -old);
        let ratio = tape.exp(d);
        let r = tape.value(ratio);
        let unclipped = r * a;
        let clipped = r.clamp(1.0 - clip, 1.0 + clip) * a;
        terms.push(if unclipped <= clipped { tape.scale(ratio, a) } else { tape.constant(clipped) });
    }
    Ok(tape.sum(&terms))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PpoStepStats {
    /// Mean clipped surrogate per token before the update.
    pub surrogate: f64,
    pub value_loss: f64,
    /// Extreme per-token probability ratios after the update.
    pub ratio_min: f64,
    pub ratio_max: f64,
}

/// One PPO update: `epochs` passes of the clipped surrogate on the actor and
/// squared-error regression of the critic onto the returns.
pub fn ppo_step(
    policy: &mut Policy,
    critic: &mut Critic,
    data: &[Example],
    rollouts: &[Rollout],
    cfg: &PpoConfig,
    actor_opt: &mut AdamState,
    critic_opt: &mut AdamState,
) -> Result<PpoStepStats> {
    let n_tokens: usize = rollouts.iter().map(|r| r.old_logprobs.len()).sum();
    if n_tokens == 0 {
        return Err(Error::EmptyDataset);
    }
    for r in rollouts {
        let p = &data[r.example].problem;
        policy.register(p, &r.generated);
        for s in states(p, &r.generated) {
            critic.register(&s);
        }
    }
    let mut surrogate = 0.0;
    for epoch in 0..cfg.epochs.max(1) {
        let (loss, _) = descend(policy, actor_opt, |tape, pol| {
            let mut terms = Vec::with_capacity(rollouts.len());
            for r in rollouts {
                let p = &data[r.example].problem;
                terms.push(ppo_surrogate(tape, pol, p, &r.generated, &r.old_logprobs, &r.advantages, cfg.clip)?);
            }
            let total = tape.sum(&terms);
            Ok((tape.scale(total, -1.0 / n_tokens as f64), vec![]))
        })?;
        if epoch == 0 {
            surrogate = -loss;
        }
    }
    let (value_loss, grad) = {
        let mut tape = Tape::new(critic.params());
        let mut terms = Vec::with_capacity(n_tokens);
        for r in rollouts {
            let p = &data[r.example].problem;
            for (s, &ret) in states(p, &r.generated).iter().zip(&r.returns) {
                let v = critic.value_on_tape(&mut tape, s);
                let d = tape.offset(v, -ret);
                terms.push(tape.square(d));
            }
        }
        let total = tape.sum(&terms);
        let loss = tape.scale(total, 1.0 / n_tokens as f64);
        (tape.value(loss), tape.backward(loss)?)
    };
    critic_opt.resize(critic.param_len());
    critic_opt.step_sparse(critic.params_mut(), &grad)?;
    let (mut ratio_min, mut ratio_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for r in rollouts {
        let new = token_logprobs(policy, &data[r.example].problem, &r.generated)?;
        for (n, o) in new.iter().zip(&r.old_logprobs) {
            let ratio = (n - o).exp();
            ratio_min = ratio_min.min(ratio);
            ratio_max = ratio_max.max(ratio);
        }
    }
    Ok(PpoStepStats { surrogate, value_loss, ratio_min, ratio_max })
}

/// PPO with a KL penalty against a frozen copy of the incoming policy.
pub fn ppo_train(
    policy: &mut Policy,
    critic: &mut Critic,
    data: &[Example],
    reward: &dyn Reward,
    cfg: &PpoConfig,
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    cfg.validate()?;
    let reference = policy.clone();
    let mut rng = rng_for(cfg.decode.seed, &[0x7070_6f00]);
    let mut actor_opt = AdamState::new(policy.param_len(), cfg.lr);
    let mut critic_opt = AdamState::new(critic.param_len(), cfg.critic_lr);
    let mut report = TrainReport::new("ppo");
    for step in 0..cfg.steps {
        let picks: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..data.len())).collect();
        let mut rollouts = Vec::with_capacity(picks.len() * cfg.samples_per_problem);
        for (b, &ex) in picks.iter().enumerate() {
            let problem = &data[ex].problem;
            let stream = (step * cfg.batch_size + b) as u64;
            for g in sample_group(policy, problem, cfg.samples_per_problem, &cfg.decode, stream) {
                rollouts.push(make_rollout(policy, &reference, critic, reward, ex, problem, g, cfg)?);
            }
        }
        let mean_reward = rollouts.iter().map(|r| r.env_reward).sum::<f64>() / rollouts.len() as f64;
        let stats = ppo_step(policy, critic, data, &rollouts, cfg, &mut actor_opt, &mut critic_opt)?;
        log::debug!(
            "ppo step {step}: surrogate {:.5} value {:.5} ratio [{:.3}, {:.3}]",
            stats.surrogate,
            stats.value_loss,
            stats.ratio_min,
            stats.ratio_max
        );
        report.rows.push(TrainRow {
            step,
            loss: -stats.surrogate,
            sft_loss: 0.0,
            mean_terminal_reward: Some(mean_reward),
            buffer_size: rollouts.len(),
            l1_to_target: None,
        });
    }
    Ok(report)
}
