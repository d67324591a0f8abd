//! Subtrajectory-balance fine-tuning: losses, replay buffer and the
//! sample / score / update loop.

use std::collections::{HashMap, VecDeque};
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamState, Tape, Var, DEFAULT_LR};
use crate::env::{self, Reward};
use crate::error::{Error, Result};
use crate::policy::{DecodeCfg, Policy, PolicySpec};
use crate::problem::{Example, Problem};
#[cfg(test)]
use crate::problem::Trajectory;
use crate::train::{descend, TrainReport, TrainRow};
use crate::util::rng_for;
use crate::vocab::{TokenId, Vocab};

pub const DEFAULT_BUFFER_CAPACITY: usize = 1000;
pub const DEFAULT_SFT_COEFF: f64 = 30.0;
pub const DEFAULT_SAMPLES_PER_PROBLEM: usize = 8;

/// Where the stop probabilities sit in each subtrajectory ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum StopPlacement {
    /// `π(s_T|s_{1:j})` in the numerator, `π(s_T|s_{1:i})` in the denominator.
    #[default]
    #[serde(rename = "PRINTED", alias = "printed")]
    Printed,
    /// The two stop factors exchanged.
    #[serde(rename = "SWAPPED", alias = "swapped")]
    Swapped,
}

/// Fixed-capacity FIFO store, sampled uniformly with replacement.
#[derive(Debug, Clone)]
pub struct ReplayBuffer<T> {
    capacity: usize,
    entries: VecDeque<T>,
    inserted: u64,
}

impl<T: Clone> ReplayBuffer<T> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay buffer capacity must be positive");
        Self { capacity, entries: VecDeque::with_capacity(capacity.min(4096)), inserted: 0 }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total pushes so far, evicted items included.
    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    pub fn push(&mut self, item: T) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(item);
        self.inserted += 1;
    }

    /// Oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.entries.iter()
    }

    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<Vec<T>> {
        if self.entries.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        Ok((0..batch).map(|_| self.entries[rng.random_range(0..self.entries.len())].clone()).collect())
    }
}

/// A replayed solution with its cached prefix rewards `R(s_{1:i} s_T)`,
/// `i = 0..=n`.
#[derive(Debug, Clone, PartialEq)]
pub struct BufferEntry {
    pub example: usize,
    pub generated: Vec<TokenId>,
    pub prefix_rewards: Vec<f64>,
}

/// `R(s_{1:i} s_T)` for every prefix length `i = 0..=n`.
pub fn prefix_rewards(reward: &dyn Reward, problem: &Problem, generated: &[TokenId]) -> Result<Vec<f64>> {
    (0..=generated.len())
        .map(|i| {
            let r = reward.reward(problem, &generated[..i]);
            if r > 0.0 && r.is_finite() {
                Ok(r)
            } else {
                Err(Error::NonPositiveReward(r))
            }
        })
        .collect()
}

/// Subtrajectory balance with precomputed prefix rewards.
///
/// Every pair term is a difference of per-prefix potentials
/// `φ_i = log R_i − Σ_{k≤i} log π(s_k|·) ∓ log π(s_T|s_{1:i})`, so the tape
/// holds `O(n)` potentials and `O(n²)` squared differences.
pub fn subtb_with_rewards(
    tape: &mut Tape<'_>,
    policy: &Policy,
    problem: &Problem,
    generated: &[TokenId],
    rewards: &[f64],
    lambda: f64,
    placement: StopPlacement,
) -> Result<Var> {
    let n = generated.len();
    if rewards.len() != n + 1 {
        return Err(Error::LengthMismatch(rewards.len(), n + 1));
    }
    if let Some(&r) = rewards.iter().find(|&&r| !(r > 0.0 && r.is_finite())) {
        return Err(Error::NonPositiveReward(r));
    }
    let lp = policy.trace(tape, problem, generated)?;
    let mut phi = Vec::with_capacity(n + 1);
    let mut prefix_sum = tape.constant(0.0);
    for (i, r) in rewards.iter().enumerate() {
        let base = tape.constant(r.ln());
        let base = tape.sub(base, prefix_sum);
        let p = match placement {
            StopPlacement::Printed => tape.sub(base, lp.stop[i]),
            StopPlacement::Swapped => tape.add(base, lp.stop[i]),
        };
        phi.push(p);
        if i < n {
            prefix_sum = tape.add(prefix_sum, lp.token[i]);
        }
    }
    let mut terms = Vec::with_capacity(n * (n + 1) / 2);
    for i in 0..n {
        for j in i + 1..=n {
            let d = tape.sub(phi[i], phi[j]);
            let sq = tape.square(d);
            terms.push(if lambda == 1.0 { sq } else { tape.scale(sq, lambda.powi((j - i) as i32)) });
        }
    }
    Ok(tape.sum(&terms))
}

/// `Σ_{0≤i<j≤n} λ^{j−i} (log[R_i Π_{k=i+1..j} π(s_k|·) π(s_T|s_{1:j})] − log[R_j π(s_T|s_{1:i})])²`
/// for a terminated solution `generated`, where `R_i` is the reward of the
/// first `i` generated tokens followed by the stop symbol.
pub fn subtb_loss(
    tape: &mut Tape<'_>,
    policy: &Policy,
    reward: &dyn Reward,
    problem: &Problem,
    generated: &[TokenId],
    lambda: f64,
    placement: StopPlacement,
) -> Result<Var> {
    let rewards = prefix_rewards(reward, problem, generated)?;
    subtb_with_rewards(tape, policy, problem, generated, &rewards, lambda, placement)
}

/// Trajectory balance `(log Z + log π(Y s_T|X) − log R(Y s_T))²`.
pub fn tb_loss(
    tape: &mut Tape<'_>,
    policy: &Policy,
    reward: &dyn Reward,
    problem: &Problem,
    generated: &[TokenId],
    log_z: Var,
) -> Result<Var> {
    let r = reward.reward(problem, generated);
    if !(r > 0.0 && r.is_finite()) {
        return Err(Error::NonPositiveReward(r));
    }
    let lp = policy.trace(tape, problem, generated)?;
    let total = tape.sum(&lp.token);
    let d = tape.add(log_z, total);
    let d = tape.offset(d, -r.ln());
    Ok(tape.square(d))
}

/// Mean negative log-likelihood per reference token (stop symbol included).
pub fn sft_loss(tape: &mut Tape<'_>, policy: &Policy, refs: &[(&Problem, &[TokenId])]) -> Result<Var> {
    let mut lps = Vec::new();
    for (problem, generated) in refs {
        lps.extend(policy.trace(tape, problem, generated)?.token);
    }
    if lps.is_empty() {
        return Ok(tape.constant(0.0));
    }
    let total = tape.sum(&lps);
    Ok(tape.scale(total, -1.0 / lps.len() as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GfnConfig {
    pub samples_per_problem: usize,
    pub sft_coeff: f64,
    pub subtb_lambda: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub buffer_capacity: usize,
    pub stop_placement: StopPlacement,
    /// Evaluate the proportionality diagnostic every this many steps (0:
    /// only after the last step). The CLI uses the first problem of a
    /// SUMPATH dataset as the diagnostic.
    pub diag_every: usize,
    /// Sampling temperature for training rollouts, with top-p off. SubTB
    /// holds off-policy, and tempering keeps rarely sampled branches in
    /// play. Unset: the run's own sampling settings.
    pub explore_temperature: Option<f64>,
    #[serde(skip)]
    pub decode: DecodeCfg,
}

impl Default for GfnConfig {
    fn default() -> Self {
        Self {
            samples_per_problem: DEFAULT_SAMPLES_PER_PROBLEM,
            sft_coeff: DEFAULT_SFT_COEFF,
            subtb_lambda: 1.0,
            batch_size: 8,
            steps: 500,
            lr: DEFAULT_LR,
            buffer_capacity: DEFAULT_BUFFER_CAPACITY,
            stop_placement: StopPlacement::Printed,
            diag_every: 0,
            explore_temperature: None,
            decode: DecodeCfg::default(),
        }
    }
}

impl GfnConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.samples_per_problem < 1 {
            return bad("samples_per_problem must be >= 1".into());
        }
        if !(self.sft_coeff >= 0.0) {
            return bad(format!("sft_coeff {} must be >= 0", self.sft_coeff));
        }
        if !(self.subtb_lambda > 0.0) {
            return bad(format!("subtb_lambda {} must be > 0", self.subtb_lambda));
        }
        if self.batch_size < 1 || self.buffer_capacity < 1 {
            return bad("batch_size and buffer_capacity must be >= 1".into());
        }
        if !(self.lr > 0.0) {
            return bad(format!("lr {} must be > 0", self.lr));
        }
        if let Some(t) = self.explore_temperature {
            if !(t > 0.0 && t.is_finite()) {
                return bad(format!("explore_temperature {t} must be > 0"));
            }
        }
        self.decode.validate()
    }
}

/// Runs the GFlowNet loop: each step draws a problem, samples
/// `samples_per_problem` solutions, scores and buffers them, then minimizes
/// the mean SubTB loss over a replayed batch plus `sft_coeff` times the SFT
/// loss on the drawn problem's references. `diagnostic`, if given, must be
/// enumerable.
pub fn train_gflownet(
    policy: &mut Policy,
    data: &[Example],
    reward: &dyn Reward,
    cfg: &GfnConfig,
    diagnostic: Option<&Problem>,
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    cfg.validate()?;
    let seed = cfg.decode.seed;
    let decode = match cfg.explore_temperature {
        Some(t) => DecodeCfg { temperature: t, top_p: 1.0, ..cfg.decode.clone() },
        None => cfg.decode.clone(),
    };
    let mut rng = rng_for(seed, &[0x6766_6e00]);
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity);
    let mut adam = AdamState::new(policy.param_len(), cfg.lr);
    let mut report = TrainReport::new("subtb");
    let target = match diagnostic {
        Some(p) => Some(target_distribution(p, policy.vocab(), reward)?),
        None => None,
    };
    for step in 0..cfg.steps {
        let ex = rng.random_range(0..data.len());
        let problem = &data[ex].problem;
        let samples: Vec<Vec<TokenId>> = (0..cfg.samples_per_problem)
            .into_par_iter()
            .map(|s| {
                let mut r = rng_for(seed, &[step as u64, s as u64, problem.id]);
                policy.sample_with(problem, &decode, &mut r).generated().to_vec()
            })
            .collect();
        let mut reward_sum = 0.0;
        for g in samples {
            let rewards = prefix_rewards(reward, problem, &g)?;
            reward_sum += rewards[g.len()];
            buffer.push(BufferEntry { example: ex, generated: g, prefix_rewards: rewards });
        }
        let batch = buffer.sample(cfg.batch_size, &mut rng)?;
        for e in &batch {
            policy.register(&data[e.example].problem, &e.generated);
        }
        let use_sft = cfg.sft_coeff > 0.0 && !data[ex].references.is_empty();
        if use_sft {
            for r in &data[ex].references {
                policy.register(problem, r);
            }
        }
        let (_, aux) = descend(policy, &mut adam, |tape, pol| {
            let mut terms = Vec::with_capacity(batch.len());
            for e in &batch {
                terms.push(subtb_with_rewards(
                    tape,
                    pol,
                    &data[e.example].problem,
                    &e.generated,
                    &e.prefix_rewards,
                    cfg.subtb_lambda,
                    cfg.stop_placement,
                )?);
            }
            let total = tape.sum(&terms);
            let mean = tape.scale(total, 1.0 / batch.len() as f64);
            let sft = if use_sft {
                let refs: Vec<(&Problem, &[TokenId])> =
                    data[ex].references.iter().map(|r| (problem, r.as_slice())).collect();
                sft_loss(tape, pol, &refs)?
            } else {
                tape.constant(0.0)
            };
            let weighted = tape.scale(sft, cfg.sft_coeff);
            Ok((tape.add(mean, weighted), vec![mean, sft]))
        })?;
        let last = step + 1 == cfg.steps;
        let diag_now = last || (cfg.diag_every > 0 && (step + 1) % cfg.diag_every == 0);
        let l1 = match (&target, diagnostic) {
            (Some(t), Some(p)) if diag_now => Some(l1_against(policy, p, t)?),
            _ => None,
        };
        report.rows.push(TrainRow {
            step,
            loss: aux[0],
            sft_loss: aux[1],
            mean_terminal_reward: Some(reward_sum / cfg.samples_per_problem as f64),
            buffer_size: buffer.len(),
            l1_to_target: l1,
        });
        log::debug!("gfn step {step}: subtb {:.5} sft {:.5}", aux[0], aux[1]);
    }
    Ok(report)
}

/// `R(x)/Z` for every grammatical terminal.
pub fn target_distribution(problem: &Problem, vocab: &Vocab, reward: &dyn Reward) -> Result<HashMap<Vec<TokenId>, f64>> {
    let terms = env::enumerate_terminals(problem, vocab, reward)?;
    let z = env::partition_function(&terms);
    Ok(terms.into_iter().map(|t| (t.generated, t.reward / z)).collect())
}

fn l1_against(policy: &Policy, problem: &Problem, target: &HashMap<Vec<TokenId>, f64>) -> Result<f64> {
    let dist = policy.terminal_distribution(problem, problem.max_solution_len)?;
    let mut l1 = dist.overflow;
    let mut seen = 0.0;
    for (g, p) in &dist.terminals {
        let q = target.get(g).copied().unwrap_or(0.0);
        seen += q;
        l1 += (p - q).abs();
    }
    // target mass the policy cannot reach
    l1 += (1.0 - seen).max(0.0);
    Ok(l1)
}

/// `Σ_x |π(x) − R(x)/Z|` over terminated solutions of an enumerable problem.
pub fn proportionality_l1(policy: &Policy, problem: &Problem, reward: &dyn Reward) -> Result<f64> {
    let target = target_distribution(problem, policy.vocab(), reward)?;
    l1_against(policy, problem, &target)
}

/// A constrained tabular policy with `π(t|s) = F(s t)/F(s)` and
/// `π(s_T|s) = R(s s_T)/F(s)`, where `F(s)` sums the rewards of all
/// terminals extending `s`. Its terminal distribution is exactly `R/Z` on
/// every listed problem.
pub fn flow_consistent_policy(problems: &[Problem], vocab: Arc<Vocab>, reward: &dyn Reward) -> Result<Policy> {
    let window = problems.iter().map(|p| p.prompt.len() + p.max_solution_len + 1).max().unwrap_or(1);
    let mut policy = Policy::new(&PolicySpec::Tabular { window, init_scale: 0.0 }, vocab.clone(), true, 0);
    let stop = vocab.stop_id();
    for problem in problems {
        let terms = env::enumerate_terminals(problem, &vocab, reward)?;
        let mut flow: HashMap<&[TokenId], f64> = HashMap::new();
        let mut own: HashMap<&[TokenId], f64> = HashMap::new();
        for t in &terms {
            own.insert(&t.generated, t.reward);
            for i in 0..=t.generated.len() {
                *flow.entry(&t.generated[..i]).or_default() += t.reward;
            }
        }
        let mut prefixes: Vec<&[TokenId]> = flow.keys().copied().collect();
        prefixes.sort();
        for s in prefixes {
            let f = flow[s];
            let mut probs = vec![(stop, own.get(s).copied().unwrap_or(0.0) / f)];
            for t in env::allowed_next(problem, &vocab, s) {
                if t == stop {
                    continue;
                }
                let mut child = s.to_vec();
                child.push(t);
                probs.push((t, flow.get(child.as_slice()).copied().unwrap_or(0.0) / f));
            }
            let mut seq = problem.prompt.clone();
            seq.extend_from_slice(s);
            policy.set_distribution(&seq, &probs)?;
        }
    }
    Ok(policy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::evaluate;
    use crate::env::{sumpath_problem, RewardFn, RewardMode};
    use proptest::prelude::*;
    use std::collections::VecDeque;

    /// Reward given as an explicit table over solutions.
    struct TableReward(HashMap<Vec<TokenId>, f64>);

    impl Reward for TableReward {
        fn reward(&self, _: &Problem, generated: &[TokenId]) -> f64 {
            self.0.get(generated).copied().unwrap_or(1.0)
        }
    }

    struct Scaled<'a>(&'a dyn Reward, f64);

    impl Reward for Scaled<'_> {
        fn reward(&self, p: &Problem, g: &[TokenId]) -> f64 {
            self.1 * self.0.reward(p, g)
        }
    }

    fn vocab() -> Arc<Vocab> {
        Arc::new(Vocab::arithmetic(10))
    }

    /// One-step problem whose only non-stop move is the token `1`.
    fn one_step(v: &Vocab) -> (Problem, TokenId) {
        (sumpath_problem(v, 0, 1, &[1], 1).unwrap(), v.number(1).unwrap())
    }

    fn subtb_value(pol: &Policy, r: &dyn Reward, p: &Problem, g: &[TokenId]) -> f64 {
        evaluate(|t| subtb_loss(t, pol, r, p, g, 1.0, StopPlacement::Printed), pol.params()).unwrap()
    }

    #[test]
    fn flow_consistent_single_step_is_zero() {
        let v = vocab();
        let (p, a) = one_step(&v);
        let mut pol = Policy::new(&PolicySpec::Tabular { window: 8, init_scale: 0.0 }, v.clone(), true, 0);
        pol.set_distribution(&p.prompt, &[(v.stop_id(), 0.4), (a, 0.6)]).unwrap();
        let r = TableReward(HashMap::from([(vec![], 0.4), (vec![a], 0.6)]));
        assert!(subtb_value(&pol, &r, &p, &[a]).abs() < 1e-12);
    }

    #[test]
    fn hand_derived_single_step() {
        let v = vocab();
        let (p, a) = one_step(&v);
        let mut pol = Policy::new(&PolicySpec::Tabular { window: 8, init_scale: 0.0 }, v.clone(), true, 0);
        pol.set_distribution(&p.prompt, &[(v.stop_id(), 0.5), (a, 0.5)]).unwrap();
        let r = TableReward(HashMap::from([(vec![], 1.0), (vec![a], 3.0)]));
        let l = subtb_value(&pol, &r, &p, &[a]);
        assert!((l - 3f64.ln().powi(2)).abs() < 1e-9);
        // swapping the stop factors gives log[1·0.5·0.5] − log[3·1]
        let s = evaluate(|t| subtb_loss(t, &pol, &r, &p, &[a], 1.0, StopPlacement::Swapped), pol.params()).unwrap();
        assert!((s - (0.25f64 / 3.0).ln().powi(2)).abs() < 1e-9);
    }

    /// Term-by-term double sum with no shared potentials.
    fn straight_line(pol: &Policy, r: &dyn Reward, p: &Problem, g: &[TokenId], lambda: f64) -> f64 {
        let stop = pol.vocab().stop_id();
        let n = g.len();
        let lp = |i: usize, t: TokenId| pol.next_logprobs(p, &g[..i])[t.index()];
        let mut total = 0.0;
        for i in 0..n {
            for j in i + 1..=n {
                let mut num = r.reward(p, &g[..i]).ln() + lp(j, stop);
                for k in i + 1..=j {
                    num += lp(k - 1, g[k - 1]);
                }
                let den = r.reward(p, &g[..j]).ln() + lp(i, stop);
                total += lambda.powi((j - i) as i32) * (num - den).powi(2);
            }
        }
        total
    }

    #[test]
    fn matches_straight_line_oracle() {
        let v = vocab();
        let p = sumpath_problem(&v, 0, 6, &[1, 2, 3], 4).unwrap();
        let reward = RewardFn::new((*v).clone(), 1e-3, RewardMode::Terminal);
        for seed in 0..10 {
            let pol = Policy::new(&PolicySpec::Tabular { window: 3, init_scale: 1.0 }, v.clone(), true, seed);
            let t = pol.sample(&p, &DecodeCfg { seed, ..DecodeCfg::exact() });
            for lambda in [1.0, 0.7] {
                let got = evaluate(
                    |tape| subtb_loss(tape, &pol, &reward, &p, t.generated(), lambda, StopPlacement::Printed),
                    pol.params(),
                )
                .unwrap();
                let want = straight_line(&pol, &reward, &p, t.generated(), lambda);
                assert!((got - want).abs() <= 1e-9 * want.max(1.0), "{got} vs {want}");
            }
        }
    }

    #[test]
    fn non_positive_reward_is_rejected() {
        let v = vocab();
        let (p, a) = one_step(&v);
        let pol = Policy::new(&PolicySpec::default(), v.clone(), true, 0);
        let r = TableReward(HashMap::from([(vec![], 0.0)]));
        let err = evaluate(|t| subtb_loss(t, &pol, &r, &p, &[a], 1.0, StopPlacement::Printed), pol.params());
        assert!(matches!(err, Err(Error::NonPositiveReward(_))));
    }

    #[test]
    fn tb_zero_at_definitional_log_z() {
        let v = vocab();
        let (p, a) = one_step(&v);
        let pol = Policy::new(&PolicySpec::Tabular { window: 3, init_scale: 1.0 }, v.clone(), true, 3);
        let r = TableReward(HashMap::from([(vec![a], 2.5)]));
        let lp: f64 = pol.logprob(&p, &Trajectory::terminated(&p, &[a], v.stop_id(), vec![])).unwrap().iter().sum();
        let log_z = 2.5f64.ln() - lp;
        let l = evaluate(
            |t| {
                let z = t.constant(log_z);
                tb_loss(t, &pol, &r, &p, &[a], z)
            },
            pol.params(),
        )
        .unwrap();
        assert!(l.abs() < 1e-20);
    }

    #[test]
    fn tb_uniform_policy_cannot_match_unequal_rewards() {
        // Terminals "" and "1" both get probability 1/2 (only the stop symbol
        // follows "1"); with rewards 1 and 3 the best log Z leaves a residual
        // of (ln 3 / 2)^2 on each.
        let v = vocab();
        let (p, a) = one_step(&v);
        let pol = Policy::new(&PolicySpec::default(), v.clone(), true, 0);
        let r = TableReward(HashMap::from([(vec![], 1.0), (vec![a], 3.0)]));
        let lp0 = -(2f64.ln());
        let lp1 = -(2f64.ln());
        // minimize (z + lp0)^2 + (z + lp1 - ln 3)^2 over z
        let z = (-lp0 - lp1 + 3f64.ln()) / 2.0;
        let total: f64 = [(vec![], z), (vec![a], z)]
            .iter()
            .map(|(g, z)| {
                evaluate(
                    |t| {
                        let zv = t.constant(*z);
                        tb_loss(t, &pol, &r, &p, g, zv)
                    },
                    pol.params(),
                )
                .unwrap()
            })
            .sum();
        let closed = 2.0 * ((lp0 - lp1 + 3f64.ln()) / 2.0).powi(2);
        assert!((total - closed).abs() < 1e-12);
        assert!(total > 0.0);
    }

    #[test]
    fn sft_uniform_is_log_v_per_token() {
        let v = vocab();
        let p = sumpath_problem(&v, 0, 4, &[1, 2], 4).unwrap();
        let pol = Policy::new(&PolicySpec::default(), v.clone(), false, 0);
        let refs = [v.encode("2 2").unwrap(), v.encode("1 1 2").unwrap()];
        let pairs: Vec<(&Problem, &[TokenId])> = refs.iter().map(|r| (&p, r.as_slice())).collect();
        let l = evaluate(|t| sft_loss(t, &pol, &pairs), pol.params()).unwrap();
        assert!((l - (v.size() as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn sft_matches_manual_token_sum() {
        let v = vocab();
        let p = sumpath_problem(&v, 0, 4, &[1, 2], 4).unwrap();
        let pol = Policy::new(&PolicySpec::Tabular { window: 2, init_scale: 1.0 }, v.clone(), true, 6);
        let r = v.encode("1 2 1").unwrap();
        let manual: f64 = -pol.logprob(&p, &Trajectory::terminated(&p, &r, v.stop_id(), vec![])).unwrap().iter().sum::<f64>() / 4.0;
        let l = evaluate(|t| sft_loss(t, &pol, &[(&p, r.as_slice())]), pol.params()).unwrap();
        assert!((l - manual).abs() < 1e-12);
    }

    #[test]
    fn buffer_fifo_and_sampling() {
        let mut b = ReplayBuffer::new(1000);
        for i in 0..5 {
            b.push(i);
        }
        assert_eq!(b.len(), 5);
        for i in 5..1001 {
            b.push(i);
        }
        assert_eq!(b.len(), 1000);
        assert!(!b.iter().any(|&x| x == 0));
        assert_eq!(b.inserted(), 1001);

        let mut one = ReplayBuffer::new(3);
        one.push("x");
        assert_eq!(one.sample(4, &mut rng_for(0, &[])).unwrap(), vec!["x"; 4]);
        let empty: ReplayBuffer<u8> = ReplayBuffer::new(3);
        assert!(matches!(empty.sample(1, &mut rng_for(0, &[])), Err(Error::EmptyBuffer)));
    }

    #[test]
    fn buffer_sampling_is_uniform_and_seeded() {
        let mut b = ReplayBuffer::new(10);
        for i in 0..10usize {
            b.push(i);
        }
        let n = 100_000;
        let draws = b.sample(n, &mut rng_for(1, &[])).unwrap();
        let mut counts = [0usize; 10];
        for d in &draws {
            counts[*d] += 1;
        }
        let sd = (n as f64 * 0.1 * 0.9).sqrt();
        assert!(counts.iter().all(|&c| (c as f64 - n as f64 * 0.1).abs() <= 3.0 * sd));
        assert_eq!(b.sample(16, &mut rng_for(2, &[])).unwrap(), b.sample(16, &mut rng_for(2, &[])).unwrap());
    }

    proptest! {
        #[test]
        fn buffer_matches_queue_oracle(cap in 1usize..20, pushes in proptest::collection::vec(0u32..100, 0..80)) {
            let mut b = ReplayBuffer::new(cap);
            let mut q = VecDeque::new();
            for x in pushes {
                b.push(x);
                q.push_back(x);
                if q.len() > cap {
                    q.pop_front();
                }
            }
            prop_assert_eq!(b.iter().copied().collect::<Vec<_>>(), q.into_iter().collect::<Vec<_>>());
        }

        #[test]
        fn subtb_is_non_negative_and_scale_invariant(seed in 0u64..500, c in prop_oneof![Just(0.1), Just(10.0)]) {
            let v = vocab();
            let p = sumpath_problem(&v, 0, 5, &[1, 2, 3], 4).unwrap();
            let reward = RewardFn::new((*v).clone(), 1e-2, RewardMode::Terminal);
            let pol = Policy::new(&PolicySpec::Tabular { window: 3, init_scale: 1.0 }, v.clone(), true, seed);
            let t = pol.sample(&p, &DecodeCfg { seed, ..DecodeCfg::exact() });
            let base = subtb_value(&pol, &reward, &p, t.generated());
            let scaled = subtb_value(&pol, &Scaled(&reward, c), &p, t.generated());
            prop_assert!(base >= 0.0);
            prop_assert!((base - scaled).abs() < 1e-9);
        }
    }

    #[test]
    fn flow_consistent_policy_is_exact() {
        let v = vocab();
        let reward = RewardFn::new((*v).clone(), 1e-2, RewardMode::Terminal);
        let problems: Vec<Problem> = (4..=6).map(|n| sumpath_problem(&v, n as u64, n, &[1, 2, 3], 3).unwrap()).collect();
        let pol = flow_consistent_policy(&problems, v.clone(), &reward).unwrap();
        for p in &problems {
            assert!(proportionality_l1(&pol, p, &reward).unwrap() < 1e-9);
            let t = pol.sample(p, &DecodeCfg { seed: 3, ..DecodeCfg::exact() });
            assert!(subtb_value(&pol, &reward, p, t.generated()) < 1e-10);
        }
    }

    #[test]
    fn zero_steps_leave_parameters_unchanged() {
        let v = vocab();
        let p = sumpath_problem(&v, 0, 3, &[1, 2], 3).unwrap();
        let data = crate::env::examples(&[p], &v);
        let reward = RewardFn::new((*v).clone(), 1e-2, RewardMode::Terminal);
        let mut pol = Policy::new(&PolicySpec::neural_default(), v.clone(), true, 1);
        let before = pol.params().to_vec();
        let cfg = GfnConfig { steps: 0, ..GfnConfig::default() };
        let rep = train_gflownet(&mut pol, &data, &reward, &cfg, None).unwrap();
        assert!(rep.rows.is_empty());
        assert_eq!(pol.params(), &before[..]);
    }

    #[test]
    fn training_reaches_proportionality() {
        let v = vocab();
        let p = sumpath_problem(&v, 0, 4, &[1, 2, 3], 3).unwrap();
        let data = crate::env::examples(std::slice::from_ref(&p), &v);
        let reward = RewardFn::new((*v).clone(), 1e-2, RewardMode::Terminal);
        let mut pol = Policy::new(&PolicySpec::Tabular { window: 16, init_scale: 0.0 }, v.clone(), true, 0);
        let cfg = GfnConfig {
            sft_coeff: 0.0,
            steps: 1500,
            lr: 0.05,
            decode: DecodeCfg::exact(),
            ..GfnConfig::default()
        };
        let rep = train_gflownet(&mut pol, &data, &reward, &cfg, Some(&p)).unwrap();
        let l1 = rep.final_l1().unwrap();
        assert!(l1 <= 0.05, "l1 = {l1}");
    }
}
