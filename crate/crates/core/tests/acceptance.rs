//! Acceptance suite: ten end-to-end criteria, each printed as one pass/fail
//! line. Run with `cargo test -p explainrl-core --test acceptance`.

use rand::Rng;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use explainrl::advantage::{ReplayBuffer, Trajectory};
use explainrl::corpus::{gen_synthetic, Corpus, Interaction, Item};
use explainrl::exec::{stream_rng, Exec, SeedRng};
use explainrl::metrics::{bleu, fmr, rouge_l, rouge_n, spearman};
use explainrl::pareto::{gram, solve_weights, Certificate, PreferenceConstraint};
use explainrl::policy::{mse_loss, nll_loss, ExplanationPolicy, ModelDims, PretrainConfig, RecurrentPolicy};
use explainrl::rewards::{RewardVector, SimulatedProvider};
use explainrl::sampler::{category_probs, sample_unobserved, CategoryProfile};
use explainrl::trainer::{
    pretrain_stage, refine, surrogate_and_grad, sweep_beta, sweep_budget, BudgetPoint, PreparedTrajectory, Providers,
    SweepReport, TrainConfig, TrainReport,
};

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome {
            pass,
            detail: detail.into(),
        }
    }
}

fn uniform_vec(rng: &mut SeedRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn objective(grads: &[Vec<f64>], w: &[f64]) -> f64 {
    let g = gram(grads);
    (0..w.len())
        .map(|i| (0..w.len()).map(|j| w[i] * w[j] * g[i][j]).sum::<f64>())
        .sum()
}

/// Minimum over the 0.01-step simplex grid of points satisfying the floors.
fn grid_min(grads: &[Vec<f64>], floor: f64) -> f64 {
    let ok = |w: &[f64]| w.iter().all(|&x| x >= floor - 1e-12);
    let mut best = f64::INFINITY;
    match grads.len() {
        2 => {
            for i in 0..=100 {
                let w = [i as f64 / 100.0, (100 - i) as f64 / 100.0];
                if ok(&w) {
                    best = best.min(objective(grads, &w));
                }
            }
        }
        3 => {
            for i in 0..=100 {
                for j in 0..=(100 - i) {
                    let w = [i as f64 / 100.0, j as f64 / 100.0, (100 - i - j) as f64 / 100.0];
                    if ok(&w) {
                        best = best.min(objective(grads, &w));
                    }
                }
            }
        }
        _ => unreachable!(),
    }
    best
}

fn pareto_optimality() -> Outcome {
    let start = Instant::now();
    let mut rng = stream_rng(101, 0);
    let mut worst_gap = f64::NEG_INFINITY;
    let mut worst_feas = 0.0f64;
    for k in 0..1000 {
        let m = 2 + k % 2;
        let floored = (k / 2) % 2 == 1;
        let grads: Vec<Vec<f64>> = (0..m).map(|_| uniform_vec(&mut rng, 8)).collect();
        let constraints = if floored {
            PreferenceConstraint::one_hot_floors(m, 0.2)
        } else {
            Vec::new()
        };
        let sol = match solve_weights(&grads, &constraints) {
            Ok(s) => s,
            Err(e) => return Outcome::new(false, format!("instance {k}: {e}")),
        };
        let w = &sol.weights;
        let mut feas = (w.iter().sum::<f64>() - 1.0).abs();
        feas = feas.max(w.iter().map(|&x| (-x).max(0.0)).fold(0.0, f64::max));
        for c in &constraints {
            let lhs: f64 = c.h.iter().zip(w).map(|(h, x)| h * x).sum();
            feas = feas.max((c.beta - lhs).max(0.0));
        }
        worst_feas = worst_feas.max(feas);
        let floor = if floored { 0.2 } else { 0.0 };
        worst_gap = worst_gap.max(objective(&grads, w) - grid_min(&grads, floor));
    }
    let elapsed = start.elapsed();
    Outcome::new(
        worst_feas <= 1e-8 && worst_gap <= 1e-6 && elapsed < Duration::from_secs(10),
        format!("1000 instances, max infeasibility {worst_feas:.1e}, max objective minus grid {worst_gap:.1e}, {elapsed:.2?}"),
    )
}

fn min_norm_properties() -> Outcome {
    let mut rng = stream_rng(102, 0);
    let mut worst = f64::INFINITY;
    for k in 0..1000 {
        let m = 2 + k % 2;
        let grads: Vec<Vec<f64>> = (0..m).map(|_| uniform_vec(&mut rng, 8)).collect();
        let sol = solve_weights(&grads, &[]).unwrap();
        match sol.certificate {
            Certificate::Stationary { .. } => {}
            Certificate::DescentDirection { inner_products, .. } => {
                for ip in inner_products {
                    worst = worst.min(ip - sol.objective);
                }
            }
        }
    }
    let mut stationary = 0;
    let mut max_norm = 0.0f64;
    for k in 0..100 {
        let g1 = uniform_vec(&mut rng, 8);
        let grads = if k % 2 == 0 {
            let c = rng.gen_range(0.2..3.0);
            vec![g1.clone(), g1.iter().map(|x| -c * x).collect()]
        } else {
            let g2 = uniform_vec(&mut rng, 8);
            let (a, b) = (rng.gen_range(0.2..2.0), rng.gen_range(0.2..2.0));
            let g3 = g1.iter().zip(&g2).map(|(x, y)| -(a * x + b * y)).collect();
            vec![g1, g2, g3]
        };
        let sol = solve_weights(&grads, &[]).unwrap();
        if let Certificate::Stationary { norm_sq } = sol.certificate {
            stationary += 1;
            max_norm = max_norm.max(norm_sq);
        }
    }
    Outcome::new(
        worst >= -1e-6 && stationary == 100 && max_norm <= 1e-10,
        format!("min gᵀg_m - ‖g‖² = {worst:.1e} over 1000 instances; {stationary}/100 opposing instances stationary, max ‖g‖² {max_norm:.1e}"),
    )
}

/// Largest relative error `‖analytic - fd‖ / max(‖analytic‖, ‖fd‖)` over
/// all parameters.
fn fd_relative_error(policy: &RecurrentPolicy, analytic: &[f64], f: impl Fn(&RecurrentPolicy) -> f64) -> f64 {
    let h = 1e-5;
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nf = 0.0;
    for (k, &a) in analytic.iter().enumerate() {
        let mut p = policy.clone();
        p.params_mut()[k] += h;
        let up = f(&p);
        p.params_mut()[k] -= 2.0 * h;
        let down = f(&p);
        let fd = (up - down) / (2.0 * h);
        diff += (fd - a).powi(2);
        na += a * a;
        nf += fd * fd;
    }
    diff.sqrt() / na.sqrt().max(nf.sqrt()).max(1e-300)
}

fn random_policy(rng: &mut SeedRng, seed: u64) -> RecurrentPolicy {
    let dims = ModelDims {
        users: rng.gen_range(2..5),
        items: rng.gen_range(2..5),
        vocab: rng.gen_range(6..11),
        dim: rng.gen_range(2..6),
    };
    let mut p = RecurrentPolicy::init(dims, seed);
    for x in p.params_mut() {
        *x += rng.gen_range(-0.3..0.3);
    }
    p
}

fn random_tokens(rng: &mut SeedRng, vocab: usize) -> Vec<u32> {
    let len = rng.gen_range(1..7);
    let mut t: Vec<u32> = (0..len).map(|_| rng.gen_range(3..vocab as u32)).collect();
    t.push(2);
    t
}

fn gradient_checks() -> Outcome {
    let configs = 20;
    let mut worst = [0.0f64; 4];
    let mut rng = stream_rng(103, 0);
    for c in 0..configs {
        let policy = random_policy(&mut rng, c);
        let d = policy.dims();
        let pairs: Vec<(usize, usize)> = (0..rng.gen_range(2..6))
            .map(|_| (rng.gen_range(0..d.users), rng.gen_range(0..d.items)))
            .collect();

        let ratings: Vec<(usize, usize, f64)> = pairs.iter().map(|&(u, v)| (u, v, rng.gen_range(1.0..5.0))).collect();
        let (_, g) = mse_loss(&policy, &ratings);
        worst[0] = worst[0].max(fd_relative_error(&policy, &g, |p| mse_loss(p, &ratings).0));

        let texts: Vec<(usize, usize, Vec<u32>)> = pairs
            .iter()
            .map(|&(u, v)| (u, v, random_tokens(&mut rng, d.vocab)))
            .collect();
        let (_, g) = nll_loss(&policy, &texts);
        worst[1] = worst[1].max(fd_relative_error(&policy, &g, |p| nll_loss(p, &texts).0));

        let (u, v, x) = texts[0].clone();
        let mut g = vec![0.0; policy.num_params()];
        policy.accumulate_log_prob_grad(u, v, &x, 1.0, &mut g);
        worst[2] = worst[2].max(fd_relative_error(&policy, &g, |p| p.sequence_log_prob(u, v, &x)));

        let behavior = {
            let mut b = policy.clone();
            for x in b.params_mut() {
                *x += rng.gen_range(-0.1..0.1);
            }
            b
        };
        let batch: Vec<PreparedTrajectory> = texts
            .iter()
            .map(|(u, v, x)| PreparedTrajectory {
                user: *u,
                item: *v,
                tokens: x.clone(),
                logp_b: behavior.sequence_log_prob(*u, *v, x),
                advantages: vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
                rating: None,
            })
            .collect();
        let obj = (c % 2) as usize;
        let (_, g) = surrogate_and_grad(&policy, &batch, obj, 0.2);
        worst[3] = worst[3].max(fd_relative_error(&policy, &g, |p| {
            surrogate_and_grad(p, &batch, obj, 0.2).0
        }));
    }
    Outcome::new(
        worst.iter().all(|&e| e <= 1e-4),
        format!(
            "{configs} configs each, max relative error mse {:.1e}, nll {:.1e}, log-prob {:.1e}, surrogate {:.1e}",
            worst[0], worst[1], worst[2], worst[3]
        ),
    )
}

/// One user with `counts[c]` interactions in category `c`, plus five
/// unobserved items per category.
fn profile_corpus(counts: &[u64]) -> Corpus {
    let mut items = Vec::new();
    let mut interactions = Vec::new();
    for (c, &n) in counts.iter().enumerate() {
        for k in 0..(n as usize + 5) {
            if k < n as usize {
                interactions.push(Interaction {
                    user: 0,
                    item: items.len(),
                    rating: 4.0,
                    explanation: "fine".into(),
                });
            }
            items.push(Item {
                item_id: format!("c{c}i{k}"),
                title: String::new(),
                description: String::new(),
                category: format!("cat{c}"),
                features: vec!["fine".into()],
            });
        }
    }
    Corpus::from_parts(items, vec!["u0".into()], interactions)
}

fn sampler_distribution() -> Outcome {
    let draws = 100_000;
    let mut rng = stream_rng(104, 0);
    let mut profiles = vec![vec![0u64, 6]];
    for _ in 0..5 {
        let m = rng.gen_range(2..6);
        profiles.push((0..m).map(|_| rng.gen_range(0..20)).collect());
    }
    let mut worst = 0.0f64;
    let mut observed_hits = 0;
    let pair_dev = (category_probs(&CategoryProfile::new(vec![0, 6])).probs[0] - 0.75).abs();
    for (k, counts) in profiles.iter().enumerate() {
        let corpus = profile_corpus(counts);
        let observed = corpus.observed_items(0);
        let inv: Vec<f64> = counts.iter().map(|&n| 1.0 / ((n + 2) as f64).ln()).collect();
        let total: f64 = inv.iter().sum();
        let mut freq = vec![0usize; counts.len()];
        for (_, item) in sample_unobserved(&corpus, 0, draws, 500 + k as u64).unwrap() {
            observed_hits += observed.contains(&item) as usize;
            freq[corpus.item_category(item)] += 1;
        }
        for (c, &f) in freq.iter().enumerate() {
            // Categories are indexed in order of first appearance, which is
            // the profile order here.
            worst = worst.max((f as f64 / draws as f64 - inv[c] / total).abs());
        }
    }
    Outcome::new(
        worst <= 0.01 && observed_hits == 0 && pair_dev < 1e-3,
        format!("6 profiles × 1e5 draws, max frequency deviation {worst:.4}, observed pairs emitted {observed_hits}, p(N=0 vs 6) off 0.75 by {pair_dev:.1e}"),
    )
}

fn advantages_of(rewards: &[Vec<[f64; 2]>]) -> Vec<Vec<f64>> {
    let mut buf = ReplayBuffer::new();
    for (g, group) in rewards.iter().enumerate() {
        for r in group {
            buf.push(Trajectory {
                user: format!("u{g}"),
                item: "i".into(),
                tokens: vec![4, 2],
                rewards: RewardVector::Perspectives {
                    info: r[0],
                    persv: r[1],
                },
                logp_b: -1.0,
                advantages: None,
            });
        }
    }
    buf.group_advantages();
    buf.trajectories()
        .iter()
        .map(|t| t.advantages.as_ref().unwrap().components())
        .collect()
}

fn advantage_invariants() -> Outcome {
    let mut rng = stream_rng(105, 0);
    let groups: Vec<Vec<[f64; 2]>> = (0..1000)
        .map(|_| {
            (0..rng.gen_range(2..9))
                .map(|_| [rng.gen_range(1.0..3.0), rng.gen_range(1.0..3.0)])
                .collect()
        })
        .collect();
    let shifted: Vec<Vec<[f64; 2]>> = groups
        .iter()
        .map(|g| {
            let c = rng.gen_range(-5.0..5.0);
            g.iter().map(|r| [r[0] + c, r[1] + c]).collect()
        })
        .collect();
    let base = advantages_of(&groups);
    let moved = advantages_of(&shifted);
    let mut max_sum = 0.0f64;
    let mut at = 0;
    for g in &groups {
        for m in 0..2 {
            max_sum = max_sum.max(base[at..at + g.len()].iter().map(|a| a[m]).sum::<f64>().abs());
        }
        at += g.len();
    }
    let max_shift = base
        .iter()
        .zip(&moved)
        .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max);
    Outcome::new(
        max_sum <= 1e-9 && max_shift <= 1e-9,
        format!("1000 groups, max |Σ advantage| {max_sum:.1e}, max change under shift {max_shift:.1e}"),
    )
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

fn metric_fixtures() -> Outcome {
    let r1 = rouge_n(&words("the cream is nice"), &words("the cream feels great on skin"), 1);
    let r2 = rouge_n(&words("the cream is nice"), &words("the cream feels great on skin"), 2);
    let sample =
        |g: &str, t: &str, f: &[&str]| (words(g), words(t), f.iter().map(|s| s.to_string()).collect::<Vec<_>>());
    let fixtures: Vec<(&str, f64, f64)> = vec![
        ("rouge-1 f1", r1.f1, 0.4),
        (
            "rouge-1 precision and recall",
            r1.precision + r1.recall,
            0.5 + 1.0 / 3.0,
        ),
        ("rouge-2 f1", r2.f1, 0.25),
        ("rouge-l f1", rouge_l(&words("a b c d"), &words("a c b d")).f1, 0.75),
        (
            "bleu hand count",
            bleu(
                &words("the cream feels soft on skin"),
                &words("the cream feels great on my skin"),
                4,
            ),
            (-1.0f64 / 6.0).exp() * (5.0 / 6.0 * 2.0 / 5.0 * 1.0 / 4.0 * 1.0 / 4.0f64).powf(0.25),
        ),
        ("bleu identical", bleu(&words("a b c d e"), &words("a b c d e"), 4), 1.0),
        (
            "bleu disjoint",
            bleu(&words("w x y z"), &words("a b c d"), 4),
            (1.0f64 / 120.0).powf(0.25),
        ),
        (
            "fmr two of four",
            fmr(&[
                sample("nice scent", "the scent", &["scent"]),
                sample("good price", "low price", &["price"]),
                sample("nice scent", "great value", &["scent", "value"]),
                sample("it works", "it works", &["battery"]),
            ]),
            0.5,
        ),
        (
            "spearman swap",
            spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap(),
            0.8,
        ),
        (
            "spearman ties",
            spearman(&[1.0, 2.0, 2.0, 3.0], &[1.0, 2.0, 3.0, 4.0]).unwrap(),
            0.9f64.sqrt(),
        ),
    ];
    let failed: Vec<&str> = fixtures
        .iter()
        .filter(|(_, got, want)| (got - want).abs() > 1e-9)
        .map(|f| f.0)
        .collect();
    Outcome::new(
        failed.is_empty(),
        format!(
            "{}/{} fixtures within 1e-9{}",
            fixtures.len() - failed.len(),
            fixtures.len(),
            if failed.is_empty() {
                String::new()
            } else {
                format!(", failed {failed:?}")
            }
        ),
    )
}

/// Configuration for the end-to-end criteria on the 200/100/5 corpus.
fn e2e_config() -> TrainConfig {
    TrainConfig {
        seed: 7,
        iterations: 3,
        epochs: 2,
        explorations: 5,
        clip_epsilon: 0.2,
        model_dim: 32,
        minibatch: 128,
        pretrain: PretrainConfig {
            epochs: 60,
            learning_rate: 1e-2,
            ..PretrainConfig::default()
        },
        probe_size: 100,
        ..TrainConfig::default()
    }
}

struct PipelineRun {
    train: TrainReport,
    train_time: Duration,
    sweep: SweepReport,
    budgets: Vec<BudgetPoint>,
}

impl PipelineRun {
    fn bytes(&self) -> [String; 3] {
        [
            serde_json::to_string(&self.train).unwrap(),
            serde_json::to_string(&self.sweep).unwrap(),
            serde_json::to_string(&self.budgets).unwrap(),
        ]
    }
}

fn pipeline(exec: Exec) -> PipelineRun {
    let corpus = gen_synthetic(200, 100, 5, 7);
    let sim = SimulatedProvider::default();
    let providers = Providers::simulated(&sim);
    let config = TrainConfig { exec, ..e2e_config() };
    let start = Instant::now();
    let pre = pretrain_stage(&corpus, &config).unwrap();
    let train = refine(&corpus, &pre, &config, &providers, None).unwrap().report;
    let train_time = start.elapsed();
    let sweep = sweep_beta(&corpus, &pre, &config, &providers, &[[0.0, 0.8], [0.8, 0.0]]).unwrap();
    let budget_cfg = TrainConfig {
        observed_pairs: Some(0),
        ..config
    };
    let budgets = sweep_budget(&corpus, &pre, &budget_cfg, &providers, &[100, 200, 400], 3).unwrap();
    PipelineRun {
        train,
        train_time,
        sweep,
        budgets,
    }
}

fn end_to_end(run: &PipelineRun) -> Outcome {
    let before = run.train.probe_before.combined;
    let after = run.train.iterations.last().unwrap().probe.combined;
    let gain = (after - before) / before;
    let (fmr0, fmr1) = (run.train.eval_before.fmr, run.train.eval_after.fmr);
    Outcome::new(
        gain >= 0.05 && fmr1 >= fmr0 && run.train_time < Duration::from_secs(300),
        format!(
            "probe reward {before:.4} -> {after:.4} ({:+.1}%), test FMR {fmr0:.4} -> {fmr1:.4}, {:.1?}",
            100.0 * gain,
            run.train_time
        ),
    )
}

fn sweep_endpoints(run: &PipelineRun) -> Outcome {
    let persv_end = run.sweep.points[0].probe;
    let info_end = run.sweep.points[1].probe;
    Outcome::new(
        info_end.info >= persv_end.info && persv_end.persv >= info_end.persv,
        format!(
            "info-favoring (info {:.4}, persv {:.4}) vs persv-favoring (info {:.4}, persv {:.4})",
            info_end.info, info_end.persv, persv_end.info, persv_end.persv
        ),
    )
}

fn budget_trend(run: &PipelineRun) -> Outcome {
    let scores: Vec<f64> = run.budgets.iter().map(|b| b.probe.combined).collect();
    Outcome::new(
        scores.windows(2).all(|w| w[1] >= w[0] - 1e-9),
        format!(
            "budgets 100/200/400 -> probe reward {:.4} / {:.4} / {:.4}",
            scores[0], scores[1], scores[2]
        ),
    )
}

fn determinism(a: &PipelineRun, b: &PipelineRun) -> Outcome {
    let (x, y) = (a.bytes(), b.bytes());
    let same: Vec<bool> = x.iter().zip(&y).map(|(p, q)| p == q).collect();
    Outcome::new(
        same.iter().all(|&s| s),
        format!(
            "reports identical across runs (train {}, sweep {}, budget {}), {} bytes",
            same[0],
            same[1],
            same[2],
            x.iter().map(String::len).sum::<usize>()
        ),
    )
}

fn main() -> ExitCode {
    let mut results: Vec<(u32, &str, Outcome)> = vec![
        (1, "pareto optimality", pareto_optimality()),
        (2, "min-norm properties", min_norm_properties()),
        (3, "gradient checks", gradient_checks()),
        (4, "sampler distribution", sampler_distribution()),
        (5, "advantage invariants", advantage_invariants()),
        (6, "metric fixtures", metric_fixtures()),
    ];
    let first = pipeline(Exec::Parallel);
    let second = pipeline(Exec::Sequential);
    results.push((7, "end-to-end improvement", end_to_end(&first)));
    results.push((8, "preference sweep endpoints", sweep_endpoints(&first)));
    results.push((9, "sample budget trend", budget_trend(&first)));
    results.push((10, "determinism", determinism(&first, &second)));

    for (n, name, o) in &results {
        println!("[{}] {n:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    let failed: Vec<u32> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", results.len());
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed criteria {failed:?}");
        ExitCode::FAILURE
    }
}
