use spanpo::harness::task::Vocab;
use spanpo::harness::{compare, make_task, train, train_from, RunConfig, ToyTask};
use spanpo::policy::{sample_group_with, GradTable};
use spanpo::reward::breakdown;
use spanpo::segment::LayoutTag;
use spanpo::{
    tsgrpo_loss, Algo, CompletionRecord, Grammar, GroupBatch, ObjectiveConfig, PolicyMode, PolicyParams,
    RewardBreakdown, SpanMask, TokenId, WeightProfile,
};

fn small(algo: Algo) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.train.steps = 6;
    cfg.train.batch_groups = 3;
    cfg.train.group_size = 5;
    cfg.train.objective.algo = algo;
    cfg
}

/// Step `k`'s groups, resampled outside the trainer from the policy the
/// trainer held at the start of that step.
fn resample(cfg: &RunConfig, task: &ToyTask, k: usize) -> (PolicyParams, Vec<Vec<CompletionRecord>>) {
    let mut prefix = cfg.train.clone();
    prefix.steps = k;
    let params = if k == 0 {
        task.initial_policy(cfg.task.policy_mode, cfg.task.warm_start_bias).unwrap()
    } else {
        train(&prefix, &cfg.task, task).unwrap().params
    };
    let b = cfg.train.batch_groups;
    let groups = (0..b)
        .map(|g| {
            sample_group_with(&params, (k * b + g) as u64, cfg.train.group_size, cfg.train.seed, &cfg.train.sampler)
                .unwrap()
        })
        .collect();
    (params, groups)
}

#[test]
fn snapshot_and_reward_plumbing() {
    for algo in Algo::ALL {
        let cfg = small(algo);
        let task = cfg.task.build().unwrap();
        let run = train(&cfg.train, &cfg.task, &task).unwrap();
        for k in [0, 3, 5] {
            let (params, groups) = resample(&cfg, &task, k);
            let mut total = Vec::new();
            for m in groups.iter().flatten() {
                assert_eq!(m.logp_old, params.logprob(&m.tokens).unwrap());
                total.push(task.score(&m.tokens, &cfg.train.reward).unwrap().breakdown.r_total);
            }
            let want = total.iter().sum::<f64>() / total.len() as f64;
            assert!((run.records[k].mean_total_reward - want).abs() < 1e-12, "{algo} step {k}");
        }
    }
}

#[test]
fn first_surrogate_on_policy() {
    for algo in [Algo::Grpo, Algo::Gspo] {
        let cfg = small(algo);
        let task = cfg.task.build().unwrap();
        let run = train(&cfg.train, &cfg.task, &task).unwrap();
        assert!(run.records[0].surrogate.abs() < 1e-9, "{algo}: {}", run.records[0].surrogate);
    }
    // TS-GRPO: advantages of members with an empty span drop out, so the
    // on-policy value is the sum of the surviving advantages
    let cfg = small(Algo::Tsgrpo);
    let task = cfg.task.build().unwrap();
    let run = train(&cfg.train, &cfg.task, &task).unwrap();
    let (_, groups) = resample(&cfg, &task, 0);
    let mut per_group = Vec::new();
    for members in groups {
        let scored: Vec<_> = members.iter().map(|m| task.score(&m.tokens, &cfg.train.reward).unwrap()).collect();
        let ans: Vec<f64> = scored.iter().map(|s| s.breakdown.r_ans).collect();
        let rea: Vec<f64> = scored.iter().map(|s| s.breakdown.r_rea).collect();
        let norm = |r: &[f64]| {
            let g = r.len() as f64;
            let mean = r.iter().sum::<f64>() / g;
            let std = (r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / g).sqrt();
            r.iter().map(|x| if std < 1e-12 { 0.0 } else { (x - mean) / (std + 1e-6) }).collect::<Vec<f64>>()
        };
        let (aa, ar) = (norm(&ans), norm(&rea));
        let mut j = 0.0;
        for (i, s) in scored.iter().enumerate() {
            if !s.span.ans().is_empty() {
                j += aa[i];
            }
            if !s.span.rea().is_empty() {
                j += ar[i];
            }
        }
        per_group.push(j / scored.len() as f64);
    }
    let want = per_group.iter().sum::<f64>() / per_group.len() as f64;
    assert!((run.records[0].surrogate - want).abs() < 1e-12);
}

#[test]
fn single_group_first_surrogate_is_zero_when_spans_nonempty() {
    // warm start at a large bias: every sample follows the template, so every
    // member has both spans and the TS-GRPO value at theta_old is exactly 0
    let mut cfg = small(Algo::Tsgrpo);
    cfg.train.batch_groups = 1;
    cfg.train.steps = 1;
    cfg.task.warm_start_bias = 40.0;
    let task = cfg.task.build().unwrap();
    let run = train(&cfg.train, &cfg.task, &task).unwrap();
    assert!(run.records[0].surrogate.abs() < 1e-9);
}

fn one_token_group(ans: bool) -> (PolicyParams, GroupBatch) {
    let params = PolicyParams::new(PolicyMode::Positionwise, 1, 3, 2, vec![0.3, -0.2, 0.1]).unwrap();
    let member = |tok: TokenId| {
        let lp = params.logprob(&[tok]).unwrap();
        let span = if ans { SpanMask::all_answer(1, LayoutTag::PlanSql) } else { SpanMask::all_reasoning(1) };
        CompletionRecord { tokens: vec![tok], logp_old: lp.clone(), logp_new: lp, logp_ref: None, span }
    };
    let rewards = vec![RewardBreakdown::from_spans(1.0, 1.0, 2.0), RewardBreakdown::from_spans(0.0, 0.0, 0.0)];
    let batch = GroupBatch::from_rewards(0, vec![member(0), member(1)], rewards, true).unwrap();
    (params, batch)
}

#[test]
fn one_step_raises_positive_advantage_token() {
    for ans in [true, false] {
        let (mut params, batch) = one_token_group(ans);
        let report = tsgrpo_loss(&batch, &ObjectiveConfig::default()).unwrap();
        let grad = report.param_grad(&batch, &params).unwrap();
        // (1/G)(A (e0 - p) - A (e1 - p)) = (A/2)(e0 - e1) with A = 0.5 / (0.5 + 1e-6)
        let a = 0.5 / (0.5 + 1e-6);
        let want = [a / 2.0, -a / 2.0, 0.0];
        for (g, w) in grad.row(0).iter().zip(want) {
            assert!((g - w).abs() < 1e-12);
        }
        let before = params.row_probs(0);
        params.apply_update(&grad, 1e-3).unwrap();
        let after = params.row_probs(0);
        assert!(after[0] > before[0]);
        assert!(after[1] < before[1]);
    }
}

#[test]
fn zero_learning_rate_is_a_no_op() {
    let mut cfg = small(Algo::Tsgrpo);
    cfg.train.learning_rate = 0.0;
    let task = cfg.task.build().unwrap();
    let init = task.initial_policy(cfg.task.policy_mode, cfg.task.warm_start_bias).unwrap();
    let run = train_from(&cfg.train, &task, init.clone()).unwrap();
    assert_eq!(run.params, init);
    // every step samples from the initial policy
    for k in 0..cfg.train.steps {
        let b = cfg.train.batch_groups;
        let total: Vec<f64> = (0..b)
            .flat_map(|g| {
                sample_group_with(&init, (k * b + g) as u64, cfg.train.group_size, cfg.train.seed, &cfg.train.sampler)
                    .unwrap()
            })
            .map(|m| task.score(&m.tokens, &cfg.train.reward).unwrap().breakdown.r_total)
            .collect();
        let want = total.iter().sum::<f64>() / total.len() as f64;
        assert!((run.records[k].mean_total_reward - want).abs() < 1e-12);
    }
}

#[test]
fn shape_mismatch_rejected() {
    let cfg = small(Algo::Grpo);
    let task = cfg.task.build().unwrap();
    let wrong = PolicyParams::uniform(PolicyMode::Positionwise, 3, task.vocab_size(), task.eos()).unwrap();
    assert!(train_from(&cfg.train, &task, wrong).is_err());
}

#[test]
fn make_task_examples() {
    let a = make_task(11, 6, 3, 24, Grammar::PlanSql).unwrap();
    assert_eq!(a, make_task(11, 6, 3, 24, Grammar::PlanSql).unwrap());
    assert_eq!(a.gold_tables.len(), 3);
    assert_eq!(make_task(0, 2, 3, 24, Grammar::PlanSql).unwrap().gold_tables.len(), 1);
    assert_eq!(make_task(0, 5, 3, 24, Grammar::PlanSql).unwrap().gold_tables.len(), 3);
    assert!(make_task(0, 1, 3, 24, Grammar::PlanSql).is_err());
    // k=4, m=3: 7 tags + 2*2 tables + 3 answers
    assert!(make_task(0, 4, 3, 13, Grammar::PlanSql).is_err());
    assert!(make_task(0, 4, 3, 14, Grammar::PlanSql).is_ok());
}

#[test]
fn toy_scoring_examples() {
    for grammar in [Grammar::PlanSql, Grammar::ThinkAnswer] {
        let task = make_task(3, 2, 3, 24, grammar).unwrap();
        let thinkquel = WeightProfile::thinkquel();
        let gold = task.score(&task.gold_tokens(), &thinkquel).unwrap().breakdown;
        for c in [gold.format, gold.sl_table, gold.pf_table, gold.execution, gold.match_] {
            assert_eq!(c, 1.0);
        }
        // no columns on either side: vacuous agreement
        assert_eq!((gold.sl_column, gold.pf_column), (1.0, 1.0));
        assert!((gold.r_total - 1.0).abs() < 1e-12);

        // plan names the other table; the SQL still reads the gold one
        let other = task.vocab.table(1 - task.gold_tables[0]);
        let mut tokens = task.gold_tokens();
        tokens[2] = other;
        let b = task.score(&tokens, &thinkquel).unwrap().breakdown;
        assert_eq!((b.sl_table, b.pf_table), (0.0, 0.0));
        assert_eq!((b.execution, b.match_), (1.0, 1.0));

        // random tokens without tags
        let v = &task.vocab;
        let noise: Vec<TokenId> = vec![v.answer(0), v.filler(), v.table(0), v.answer(1), v.eos()];
        let s = task.score(&noise, &thinkquel).unwrap();
        assert_eq!(s.breakdown.format, 0.0);
        assert!(s.span.ans().is_empty());
        assert_eq!(
            (s.breakdown.execution, s.breakdown.match_, s.breakdown.pf_table, s.breakdown.pf_column),
            (0.0, 0.0, 0.0, 0.0)
        );
        assert_eq!(s.breakdown.r_ans, 0.0);
    }
}

#[test]
fn toy_scores_match_reward_stack() {
    // the toy reward is the standard aggregate of its own channels
    let task = make_task(5, 4, 3, 24, Grammar::PlanSql).unwrap();
    let mut tokens = task.gold_tokens();
    tokens[7] = Vocab::FENCE_CLOSE;
    for profile in [WeightProfile::spider(), WeightProfile::thinkquel()] {
        let b = task.score(&tokens, &profile).unwrap().breakdown;
        let channels = spanpo::reward::Channels {
            format: Some(b.format),
            sl_table: Some(b.sl_table),
            sl_column: Some(b.sl_column),
            pf_table: Some(b.pf_table),
            pf_column: Some(b.pf_column),
            execution: Some(b.execution),
            match_: Some(b.match_),
        };
        assert_eq!(breakdown(&channels, &profile), b);
    }
}

#[test]
fn compare_controls() {
    let mut cfg = small(Algo::Grpo);
    cfg.compare.algos = vec![Algo::Grpo, Algo::Grpo];
    cfg.compare.seeds = vec![4];
    let out = compare(&cfg).unwrap();
    let a: Vec<_> = out.curves.iter().filter(|p| p.algo == Algo::Grpo).collect();
    assert_eq!(a.len(), 2 * cfg.train.steps);
    for pair in a.chunks(2) {
        assert_eq!(pair[0].mean, pair[1].mean);
    }

    // one algo, one seed: the table is that run's match curve
    let mut one = small(Algo::Tsgrpo);
    one.compare.algos = vec![Algo::Tsgrpo];
    one.compare.seeds = vec![9];
    let table = compare(&one).unwrap();
    let mut t = one.train.clone();
    t.seed = 9;
    let run = train(&t, &one.task, &one.task.build().unwrap()).unwrap();
    assert_eq!(table.curves.len(), run.records.len());
    for (p, r) in table.curves.iter().zip(&run.records) {
        assert_eq!((p.step, p.mean, p.std), (r.step, r.mean_match, 0.0));
    }
}

#[test]
fn grad_accumulation_is_additive() {
    // the trainer sums per-group gradients; the reduction must not depend on grouping
    let (params, batch) = one_token_group(true);
    let r = tsgrpo_loss(&batch, &ObjectiveConfig::default()).unwrap();
    let whole = r.param_grad(&batch, &params).unwrap();
    let mut halves = GradTable::zeros_like(&params);
    r.accumulate_param_grad(&batch, &params, 0.5, &mut halves).unwrap();
    r.accumulate_param_grad(&batch, &params, 0.5, &mut halves).unwrap();
    for (a, b) in whole.as_slice().iter().zip(halves.as_slice()) {
        assert!((a - b).abs() < 1e-15);
    }
}
