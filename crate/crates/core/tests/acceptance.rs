//! Acceptance checks. Prints one `[PASS]`/`[FAIL]` line per criterion and
//! exits non-zero if any fails.
//!
//! Run alone with `cargo test --release --test acceptance`.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use flowseq::autodiff::{evaluate, finite_diff_check, Tape};
use flowseq::baselines::{
    dpo_loss, ppo_surrogate, ppo_train, PpoConfig, PreferencePair,
};
use flowseq::config::{Method, RunConfig};
use flowseq::env::{
    enumerate_terminals, examples, make_problem, sumpath_problem, Reward, RewardFn, RewardMode, TaskConfig,
};
use flowseq::eval::{lcs_len, pass_at_k, rouge_l};
use flowseq::experiment::{run_comparison, Suite};
use flowseq::gflownet::{
    flow_consistent_policy, proportionality_l1, sft_loss, subtb_loss, tb_loss, train_gflownet, GfnConfig,
    StopPlacement,
};
use flowseq::policy::{Critic, DecodeCfg, Policy, PolicySpec};
use flowseq::problem::Problem;
use flowseq::util::mix;
use flowseq::vocab::{TokenId, Vocab};

const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;
const FD_INSTANCES: u64 = 20;

type Check = fn() -> Result<String, String>;

fn main() {
    let checks: [(&str, Check); 8] = [
        ("1 proportionality", proportionality),
        ("2 subtb correctness", subtb_correctness),
        ("3 reward-scale invariance", scale_invariance),
        ("4 distinct correct solutions", distinct_and_accuracy_4),
        ("5 greedy accuracy parity", distinct_and_accuracy_5),
        ("6 metric oracles", metric_oracles),
        ("7 concentration vs spread", concentration_vs_spread),
        ("8 determinism", determinism),
    ];
    let filter = std::env::args().nth(1).filter(|a| !a.starts_with('-'));
    let mut failed = 0;
    for (name, check) in checks {
        if filter.as_deref().is_some_and(|f| !name.contains(f)) {
            continue;
        }
        let t = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|e| {
            Err(e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(msg) => println!("[PASS] {name}: {msg} ({secs:.1}s)"),
            Err(msg) => {
                failed += 1;
                println!("[FAIL] {name}: {msg} ({secs:.1}s)");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

// ---------------------------------------------------------------------------
// 1

fn proportionality() -> Result<String, String> {
    let v = Arc::new(Vocab::arithmetic(10));
    let reward = RewardFn::new((*v).clone(), 1e-4, RewardMode::Terminal);
    let mut notes = Vec::new();
    for n in [5, 6, 7] {
        let p = sumpath_problem(&v, n as u64, n, &[1, 2, 3], n as usize).map_err(|e| e.to_string())?;
        let terminals = enumerate_terminals(&p, &v, &reward).map_err(|e| e.to_string())?.len();
        ensure(terminals <= 5000, format!("N={n}: {terminals} terminals"))?;
        let t = Instant::now();
        let mut pol = Policy::new(&PolicySpec::Tabular { window: 64, init_scale: 0.0 }, v.clone(), true, n as u64);
        let cfg = GfnConfig {
            sft_coeff: 0.0,
            steps: 20_000,
            lr: 0.02,
            explore_temperature: Some(1.5),
            decode: DecodeCfg::exact(),
            ..GfnConfig::default()
        };
        train_gflownet(&mut pol, &examples(std::slice::from_ref(&p), &v), &reward, &cfg, None).map_err(|e| e.to_string())?;
        let l1 = proportionality_l1(&pol, &p, &reward).map_err(|e| e.to_string())?;
        let el = t.elapsed();
        ensure(l1 <= 0.05, format!("N={n}: L1 {l1:.4} > 0.05"))?;
        ensure(el <= Duration::from_secs(300), format!("N={n}: took {el:?}"))?;
        notes.push(format!("N={n} ({terminals} terminals) L1 {l1:.4} in {:.1}s", el.as_secs_f64()));
    }
    Ok(notes.join("; "))
}

// ---------------------------------------------------------------------------
// 2, 3

/// Arbitrary positive prefix reward, a pure function of the prefix.
struct HashReward(u64);

impl Reward for HashReward {
    fn reward(&self, p: &Problem, g: &[TokenId]) -> f64 {
        let mut h = mix(self.0 ^ p.id);
        for t in g {
            h = mix(h ^ t.index() as u64);
        }
        0.05 + 2.0 * (h >> 11) as f64 / (1u64 << 53) as f64
    }
}

struct Scaled<'a>(&'a dyn Reward, f64);

impl Reward for Scaled<'_> {
    fn reward(&self, p: &Problem, g: &[TokenId]) -> f64 {
        self.1 * self.0.reward(p, g)
    }
}

/// A random problem (SUMPATH or ARITH), a random tabular policy with its
/// contexts registered, and a sampled solution.
struct Instance {
    problem: Problem,
    policy: Policy,
    generated: Vec<TokenId>,
}

fn instance(seed: u64, vocab: &Arc<Vocab>) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed));
    let problem = if seed.is_multiple_of(2) {
        let n = rng.random_range(3..=7);
        let parts: Vec<i64> = (1..=3).filter(|_| rng.random_bool(0.7)).chain([1]).collect();
        sumpath_problem(vocab, seed, n, &parts, n as usize).unwrap()
    } else {
        make_problem(&TaskConfig::arith(), vocab, seed, seed).unwrap()
    };
    let window = rng.random_range(2..=8);
    let mut policy = Policy::new(&PolicySpec::Tabular { window, init_scale: 1.0 }, vocab.clone(), rng.random_bool(0.7), seed);
    let generated = policy.sample(&problem, &DecodeCfg { seed, max_new_tokens: 16, ..DecodeCfg::exact() }).generated().to_vec();
    policy.register(&problem, &generated);
    Instance { problem, policy, generated }
}

fn fd_worst(name: &str, worst: &mut f64, err: flowseq::Result<f64>) -> Result<(), String> {
    let e = err.map_err(|e| format!("{name}: {e}"))?;
    *worst = worst.max(e);
    ensure(e < FD_TOL, format!("{name}: relative error {e:.2e}"))
}

fn subtb_correctness() -> Result<String, String> {
    let v = Arc::new(TaskConfig::arith().vocab());

    // (a) flow-consistent policy
    let reward = RewardFn::new((*v).clone(), 1e-2, RewardMode::Terminal);
    let problems: Vec<Problem> = (4..=6).map(|n| sumpath_problem(&v, n as u64, n, &[1, 2, 3], 4).unwrap()).collect();
    let pol = flow_consistent_policy(&problems, v.clone(), &reward).map_err(|e| e.to_string())?;
    let mut flow_max: f64 = 0.0;
    for p in &problems {
        for seed in 0..20 {
            let g = pol.sample(p, &DecodeCfg { seed, ..DecodeCfg::exact() }).generated().to_vec();
            let l = evaluate(|t| subtb_loss(t, &pol, &reward, p, &g, 1.0, StopPlacement::Printed), pol.params())
                .map_err(|e| e.to_string())?;
            flow_max = flow_max.max(l);
        }
    }
    ensure(flow_max < 1e-10, format!("flow-consistent loss {flow_max:.2e}"))?;

    // (b) n = 1: uniform stop/continue, R("") = 1, R("1") = 3
    let p = sumpath_problem(&v, 0, 1, &[1], 1).unwrap();
    let a = v.number(1).unwrap();
    let mut pol = Policy::new(&PolicySpec::Tabular { window: 8, init_scale: 0.0 }, v.clone(), true, 0);
    pol.set_distribution(&p.prompt, &[(v.stop_id(), 0.5), (a, 0.5)]).unwrap();
    struct OneThree(TokenId);
    impl Reward for OneThree {
        fn reward(&self, _: &Problem, g: &[TokenId]) -> f64 {
            if g == [self.0] {
                3.0
            } else {
                1.0
            }
        }
    }
    let l = evaluate(|t| subtb_loss(t, &pol, &OneThree(a), &p, &[a], 1.0, StopPlacement::Printed), pol.params())
        .map_err(|e| e.to_string())?;
    let want = 3f64.ln().powi(2);
    ensure((l - want).abs() < 1e-9, format!("n=1 case {l} vs (ln 3)^2 = {want}"))?;

    // (c) gradients against central differences
    let mut worst: f64 = 0.0;
    for seed in 0..FD_INSTANCES {
        let Instance { problem: p, policy: pol, generated: g } = instance(seed, &v);
        let r = HashReward(seed);
        let lambda = [1.0, 0.9][seed as usize % 2];
        fd_worst(
            "subtb",
            &mut worst,
            finite_diff_check(|t| subtb_loss(t, &pol, &r, &p, &g, lambda, StopPlacement::Printed), pol.params(), FD_STEP),
        )?;

        // log Z rides along as one extra coordinate
        let mut theta = pol.params().to_vec();
        theta.push(0.3 * seed as f64 - 2.0);
        let z_index = pol.param_len();
        fd_worst(
            "tb",
            &mut worst,
            finite_diff_check(
                |t: &mut Tape<'_>| {
                    let z = t.param(z_index);
                    tb_loss(t, &pol, &r, &p, &g, z)
                },
                &theta,
                FD_STEP,
            ),
        )?;

        let refs = [(&p, g.as_slice())];
        fd_worst("sft", &mut worst, finite_diff_check(|t| sft_loss(t, &pol, &refs), pol.params(), FD_STEP))?;

        let other = pol.sample(&p, &DecodeCfg { seed: seed + 1000, max_new_tokens: 16, ..DecodeCfg::exact() }).generated().to_vec();
        let mut pol2 = pol.clone();
        pol2.register(&p, &other);
        let reference = Policy::new(&pol2.spec(), v.clone(), pol2.constrained(), seed + 77);
        let pair = PreferencePair { example: 0, chosen: g.clone(), rejected: other, chosen_reward: 1.0, rejected_reward: 0.0 };
        let beta = [0.01, 0.5][seed as usize % 2];
        fd_worst(
            "dpo",
            &mut worst,
            finite_diff_check(|t| dpo_loss(t, &pol2, &reference, &p, &pair, beta), pol2.params(), FD_STEP),
        )?;

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::new(pol.params());
        let lp = pol.trace(&mut tape, &p, &g).map_err(|e| e.to_string())?;
        let old: Vec<f64> = lp.token.iter().map(|&x| tape.value(x) + rng.random_range(-0.4..0.4)).collect();
        let adv: Vec<f64> = old.iter().map(|_| rng.random_range(-1.0..1.0)).collect();
        fd_worst(
            "ppo surrogate",
            &mut worst,
            finite_diff_check(|t| ppo_surrogate(t, &pol, &p, &g, &old, &adv, 0.2), pol.params(), FD_STEP),
        )?;
    }
    Ok(format!(
        "flow-consistent max {flow_max:.1e}; n=1 error {:.1e}; worst gradient error {worst:.1e} over {FD_INSTANCES}x5",
        (l - want).abs()
    ))
}

fn scale_invariance() -> Result<String, String> {
    let v = Arc::new(TaskConfig::arith().vocab());
    let shaped = RewardFn::new((*v).clone(), 1e-4, RewardMode::Shaped);
    let mut worst: f64 = 0.0;
    for seed in 0..200 {
        let Instance { problem: p, policy: pol, generated: g } = instance(seed, &v);
        let hashed = HashReward(seed);
        let base: &dyn Reward = if seed % 3 == 0 { &hashed } else { &shaped };
        let at = |r: &dyn Reward| {
            evaluate(|t| subtb_loss(t, &pol, r, &p, &g, 1.0, StopPlacement::Printed), pol.params()).unwrap()
        };
        let l = at(base);
        for c in [0.1, 10.0] {
            worst = worst.max((at(&Scaled(base, c)) - l).abs());
        }
    }
    ensure(worst < 1e-9, format!("max change {worst:.2e}"))?;
    Ok(format!("max change {worst:.1e} over 200 trajectories"))
}

// ---------------------------------------------------------------------------
// 4, 5

struct MethodStats {
    greedy: f64,
    distinct: f64,
}

type Comparison = Result<(HashMap<Method, MethodStats>, Duration), String>;

/// Every method on the shipped ARITH suite over three training seeds, run
/// once and shared by criteria 4 and 5.
fn comparison() -> &'static Comparison {
    static RESULT: std::sync::OnceLock<Comparison> = std::sync::OnceLock::new();
    RESULT.get_or_init(|| {
        let t = Instant::now();
        let cfg = RunConfig::load(&repo_root().join("configs/arith_compare.toml")).map_err(|e| e.to_string())?;
        let suite = Suite::generate(&cfg).map_err(|e| e.to_string())?;
        let methods = Method::ALL;
        let mut acc: HashMap<Method, MethodStats> = HashMap::new();
        let seeds = [0, 1, 2];
        for seed in seeds {
            for run in run_comparison(&cfg, &suite, seed, &methods).map_err(|e| e.to_string())? {
                let s = acc.entry(run.method).or_insert(MethodStats { greedy: 0.0, distinct: 0.0 });
                s.greedy += run.eval.summary.greedy_accuracy / seeds.len() as f64;
                s.distinct += run.eval.summary.mean_distinct_correct / seeds.len() as f64;
            }
        }
        Ok((acc, t.elapsed()))
    })
}

fn distinct_and_accuracy_4() -> Result<String, String> {
    let (stats, took) = comparison().as_ref().map_err(Clone::clone)?;
    let gfn = stats[&Method::Gflownet].distinct;
    let ppo = stats[&Method::Ppo].distinct;
    ensure(*took <= Duration::from_secs(1800), format!("comparison took {took:?}"))?;
    ensure(gfn >= ppo + 0.2, format!("distinct GFlowNet {gfn:.3} vs PPO {ppo:.3}"))?;
    Ok(format!("distinct GFlowNet {gfn:.3} vs PPO {ppo:.3} (3 seeds, {:.0}s)", took.as_secs_f64()))
}

fn distinct_and_accuracy_5() -> Result<String, String> {
    let (stats, _) = comparison().as_ref().map_err(Clone::clone)?;
    let g = |m: Method| stats[&m].greedy;
    let best = [Method::Rft, Method::Dpo, Method::Ppo].into_iter().max_by(|a, b| g(*a).total_cmp(&g(*b))).unwrap();
    let (gfn, base, sft) = (g(Method::Gflownet), g(best), g(Method::Sft));
    ensure((gfn - base).abs() <= 0.05, format!("greedy GFlowNet {gfn:.3} vs {} {base:.3}", best.name()))?;
    ensure(gfn > sft && base > sft, format!("SFT {sft:.3} not beaten (GFlowNet {gfn:.3}, {} {base:.3})", best.name()))?;
    Ok(format!("greedy GFlowNet {gfn:.3}, best baseline {} {base:.3}, SFT {sft:.3}", best.name()))
}

// ---------------------------------------------------------------------------
// 6

/// LCS by trying every subsequence of `a`, longest first.
fn brute_lcs(a: &[u8], b: &[u8]) -> usize {
    let is_subseq = |s: &[u8]| {
        let mut it = b.iter();
        s.iter().all(|x| it.any(|y| y == x))
    };
    let mut best = 0;
    for mask in 0u32..(1 << a.len()) {
        let len = mask.count_ones() as usize;
        if len <= best {
            continue;
        }
        let sub: Vec<u8> = (0..a.len()).filter(|i| mask >> i & 1 == 1).map(|i| a[i]).collect();
        if is_subseq(&sub) {
            best = len;
        }
    }
    best
}

fn metric_oracles() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for i in 0..1000 {
        let alphabet = rng.random_range(1..=4u8);
        let seq = |rng: &mut ChaCha8Rng| -> Vec<u8> {
            let n = rng.random_range(0..=10);
            (0..n).map(|_| rng.random_range(0..alphabet)).collect()
        };
        let (a, b) = (seq(&mut rng), seq(&mut rng));
        let l = brute_lcs(&a, &b);
        ensure(lcs_len(&a, &b) == l, format!("pair {i}: lcs {} vs brute {l}", lcs_len(&a, &b)))?;
        let want = if l == 0 {
            0.0
        } else {
            let (p, r) = (l as f64 / a.len() as f64, l as f64 / b.len() as f64);
            2.0 * p * r / (p + r)
        };
        ensure(rouge_l(&a, &b) == want, format!("pair {i}: rouge {} vs {want}", rouge_l(&a, &b)))?;
    }
    for i in 0..100 {
        let rows = rng.random_range(1..=30);
        let n = rng.random_range(1..=12);
        let p_hit = rng.random_range(0.0..0.5);
        let m: Vec<Vec<bool>> = (0..rows).map(|_| (0..n).map(|_| rng.random_bool(p_hit)).collect()).collect();
        let mut prev = 0.0;
        for k in 1..=n {
            let mut hits = 0;
            for row in &m {
                let mut any = false;
                for &c in row.iter().take(k) {
                    any |= c;
                }
                hits += any as usize;
            }
            let got = pass_at_k(&m, k).map_err(|e| e.to_string())?;
            ensure(got == hits as f64 / rows as f64, format!("matrix {i}, k={k}: {got} vs {hits}/{rows}"))?;
            ensure(got >= prev, format!("matrix {i}: pass@{k} {got} < pass@{} {prev}", k - 1))?;
            prev = got;
        }
    }
    Ok("1000 LCS/ROUGE-L pairs and 100 pass@k matrices match".into())
}

// ---------------------------------------------------------------------------
// 7

fn concentration_vs_spread() -> Result<String, String> {
    let v = Arc::new(Vocab::arithmetic(10));
    let eps = 1e-4;
    let reward = RewardFn::new((*v).clone(), eps, RewardMode::Terminal);
    let p = sumpath_problem(&v, 0, 1, &[1], 1).unwrap();
    let data = examples(std::slice::from_ref(&p), &v);
    let high = [v.number(1).unwrap()];
    let terminals = enumerate_terminals(&p, &v, &reward).map_err(|e| e.to_string())?;
    ensure(terminals.len() == 2, format!("{} terminals", terminals.len()))?;
    let z: f64 = terminals.iter().map(|t| t.reward).sum();
    let share = 1.0 / z;
    ensure((share - 1.0 / (1.0 + eps)).abs() < 1e-12, format!("target share {share}"))?;

    let spec = PolicySpec::Tabular { window: 8, init_scale: 0.0 };
    let mut ppo = Policy::new(&spec, v.clone(), true, 0);
    let mut critic = Critic::new(&spec, v.size(), 0);
    let cfg = PpoConfig { steps: 150, lr: 0.05, critic_lr: 0.05, decode: DecodeCfg::exact(), ..PpoConfig::default() };
    ppo_train(&mut ppo, &mut critic, &data, &reward, &cfg).map_err(|e| e.to_string())?;
    let ppo_mass = ppo.terminal_distribution(&p, 1).map_err(|e| e.to_string())?.prob(&high);

    let mut gfn = Policy::new(&spec, v.clone(), true, 0);
    let cfg = GfnConfig { steps: 1000, lr: 0.05, decode: DecodeCfg::exact(), ..GfnConfig::default() };
    train_gflownet(&mut gfn, &data, &reward, &cfg, None).map_err(|e| e.to_string())?;
    let gfn_mass = gfn.terminal_distribution(&p, 1).map_err(|e| e.to_string())?.prob(&high);

    ensure(ppo_mass >= 0.95, format!("PPO mass {ppo_mass:.4}"))?;
    ensure((gfn_mass - share).abs() <= 0.05, format!("GFlowNet mass {gfn_mass:.4} vs share {share:.4}"))?;
    Ok(format!("PPO mass {ppo_mass:.4}; GFlowNet mass {gfn_mass:.4} vs target {share:.4}"))
}

// ---------------------------------------------------------------------------
// 8

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

const PIPELINE_CONFIG: &str = r#"
method = "GFLOWNET"
n_problems = 12
eval_k = 4

[policy]
window = 64
init_scale = 1.0

[sft]
lr = 0.1

[gflownet]
steps = 40
lr = 0.05
"#;

fn flowseq(dir: &Path, args: &[&str], workers: usize) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_flowseq"))
        .current_dir(dir)
        .args(args)
        .args(["--workers", &workers.to_string()])
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), format!("flowseq {args:?}: {}", String::from_utf8_lossy(&out.stderr)))
}

/// gen-data, train and eval inside `dir` with relative paths (they end up in
/// run_meta.json), returning every output file.
fn pipeline(dir: &Path, config: &Path, workers: usize) -> Result<Vec<(String, Vec<u8>)>, String> {
    std::fs::create_dir_all(dir).map_err(|e| e.to_string())?;
    let cfg = config.to_string_lossy().into_owned();
    let run = |sub: &str, cmd: &[&str]| {
        let mut args = vec!["--config", &cfg, "--seed", "11", "--out", sub];
        args.extend_from_slice(cmd);
        flowseq(dir, &args, workers)
    };
    run("data", &["gen-data"])?;
    run("train", &["train", "--dataset", "data/problems.jsonl"])?;
    run("eval", &["eval", "--dataset", "data/problems.jsonl", "--checkpoint", "train/policy.ckpt"])?;
    let mut files = Vec::new();
    for sub in ["data", "train", "eval"] {
        let mut names: Vec<_> = std::fs::read_dir(dir.join(sub)).map_err(|e| e.to_string())?.map(|e| e.unwrap().path()).collect();
        names.sort();
        for path in names {
            let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
            files.push((format!("{sub}/{}", path.file_name().unwrap().to_string_lossy()), bytes));
        }
    }
    Ok(files)
}

fn determinism() -> Result<String, String> {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = tmp.path().join("run.toml");
    std::fs::write(&config, PIPELINE_CONFIG).map_err(|e| e.to_string())?;
    let a = pipeline(&tmp.path().join("a"), &config, 1)?;
    let b = pipeline(&tmp.path().join("b"), &config, 4)?;
    // the saved run_meta.json is itself a complete configuration
    let c = pipeline(&tmp.path().join("c"), &tmp.path().join("a/data/run_meta.json"), 2)?;
    for (other, label) in [(&b, "second run"), (&c, "run from run_meta.json")] {
        ensure(a.len() == other.len(), format!("{label}: file sets differ"))?;
        for ((na, ba), (nb, bb)) in a.iter().zip(other) {
            ensure(na == nb && ba == bb, format!("{label}: {na} differs"))?;
        }
    }
    let tabular = a.iter().filter(|(n, _)| n.ends_with(".csv") || n.ends_with(".json") || n.ends_with(".jsonl")).count();
    Ok(format!("{} files ({tabular} CSV/JSON) byte-identical across 3 runs", a.len()))
}
