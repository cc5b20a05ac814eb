use std::collections::{HashMap, HashSet};

use echo_core::adapt::{
    adapt, evaluate_loss, final_finetune, full_stage_adapt_observed, incremental_adapt,
    incremental_adapt_observed, pretrain, stage_update, Adam, AdamConfig, AdaptMode, Phase,
    StageObserver, StageReport, TrainConfig,
};
use echo_core::harness::checkpoint::{to_bytes, Dtype};
use echo_core::harness::corpus::{synthetic_bigram, Corpus, DataStream};
use echo_core::{EchoModel, ModelConfig};

const SEQ: usize = 17;

fn corpus(bytes: usize) -> Corpus {
    Corpus::from_bytes(&synthetic_bigram(bytes, 11), SEQ).unwrap()
}

fn baseline(layers: usize) -> EchoModel {
    EchoModel::init(ModelConfig::tiny(16, 2, layers, 258).with_seed(4)).unwrap()
}

fn cfg(steps: usize) -> TrainConfig {
    let mut c = TrainConfig::desk(4, SEQ).with_steps_per_stage(steps);
    c.lr = 3e-3;
    c.final_tokens = 3 * c.tokens_per_step();
    c
}

fn snapshot(model: &EchoModel) -> HashMap<String, Vec<u64>> {
    model
        .params()
        .into_iter()
        .map(|p| {
            (
                p.name.clone(),
                p.value.data().iter().map(|v| v.to_bits()).collect(),
            )
        })
        .collect()
}

/// Records the full parameter snapshot at every stage boundary.
#[derive(Default)]
struct Recorder {
    before: Option<HashMap<String, Vec<u64>>>,
    phases: Vec<(Phase, Vec<usize>, usize)>,
    changed_outside: Vec<String>,
    frozen_in_final: usize,
}

impl StageObserver for Recorder {
    fn stage_start(&mut self, phase: Phase, layers: &[usize], model: &EchoModel) {
        self.before = Some(snapshot(model));
        self.phases
            .push((phase, layers.to_vec(), model.n_self_layers()));
        if phase == Phase::Final {
            self.frozen_in_final += model.params().iter().filter(|p| p.frozen).count();
        }
    }

    fn stage_end(&mut self, report: &StageReport, model: &EchoModel) {
        if report.phase == Phase::Final {
            return;
        }
        let allowed: HashSet<String> = report
            .converted_layers
            .iter()
            .flat_map(|&l| model.layer_param_names(l))
            .chain(model.global_kv_param_names())
            .collect();
        let before = self.before.take().unwrap();
        for (name, bits) in snapshot(model) {
            if !allowed.contains(&name) && before[&name] != bits {
                self.changed_outside.push(name);
            }
        }
    }
}

#[test]
fn incremental_stages_run_deepest_first_and_respect_freezing() {
    let c = corpus(20_000);
    let mut rec = Recorder::default();
    let (m, reports) = incremental_adapt_observed(&baseline(6), 3, &cfg(4), &c, &mut rec).unwrap();
    assert_eq!(m.n_self_layers(), 3);
    let stages: Vec<_> = rec
        .phases
        .iter()
        .map(|(p, l, n)| (*p, l.clone(), *n))
        .collect();
    assert_eq!(
        stages,
        vec![
            (Phase::Stage(1), vec![6], 5),
            (Phase::Stage(2), vec![5], 4),
            (Phase::Stage(3), vec![4], 3),
            (Phase::Final, vec![], 3),
        ]
    );
    assert!(rec.changed_outside.is_empty(), "{:?}", rec.changed_outside);
    assert_eq!(rec.frozen_in_final, 0);
    assert_eq!(reports.len(), 4);
    assert!(m.params().iter().all(|p| !p.frozen));
}

#[test]
fn block_size_two_groups_layers() {
    let c = corpus(20_000);
    let mut train = cfg(2);
    train.block_size = 2;
    let mut rec = Recorder::default();
    incremental_adapt_observed(&baseline(6), 3, &train, &c, &mut rec).unwrap();
    let layers: Vec<_> = rec.phases.iter().map(|(_, l, _)| l.clone()).collect();
    assert_eq!(layers, vec![vec![6, 5], vec![4], vec![]]);
    assert!(rec.changed_outside.is_empty());
}

#[test]
fn token_budget_is_exact() {
    let c = corpus(20_000);
    let mut train = cfg(5);
    // the token cap binds before the step cap
    train.stage_tokens = 3 * train.tokens_per_step() + 7;
    let (_, reports) = incremental_adapt(&baseline(4), 2, &train, &c).unwrap();
    let stage_tokens: usize = reports[..2].iter().map(|r| r.tokens_seen).sum();
    assert_eq!(stage_tokens, 2 * 3 * train.tokens_per_step());
    for r in &reports[..2] {
        assert_eq!(r.steps_run, 3);
        assert_eq!(r.trace.len(), r.steps_run);
        assert!(r.tokens_seen <= train.stage_tokens);
    }
    assert_eq!(
        reports[2].tokens_seen,
        train.final_tokens.min(c.total_tokens())
    );
}

#[test]
fn final_finetune_is_capped_by_the_corpus() {
    let c = corpus(600);
    let mut m = baseline(2);
    m.convert_down_to(1).unwrap();
    let mut train = cfg(1);
    train.final_tokens = 1_000_000;
    let r = final_finetune(&mut m, &train, &c).unwrap();
    assert_eq!(r.tokens_seen, c.total_tokens());
    assert_eq!(r.steps_run, c.len().div_ceil(train.batch_size));
}

#[test]
fn full_stage_converts_everything_before_training() {
    let c = corpus(20_000);
    struct Seen(Vec<(Phase, usize)>);
    impl StageObserver for Seen {
        fn stage_start(&mut self, phase: Phase, _: &[usize], model: &EchoModel) {
            self.0.push((phase, model.n_self_layers()));
        }
    }
    let mut seen = Seen(Vec::new());
    let train = cfg(3);
    let (m, report) = full_stage_adapt_observed(&baseline(6), 3, &train, &c, &mut seen).unwrap();
    assert_eq!(seen.0, vec![(Phase::FullStage, 3)]);
    assert_eq!(m.n_self_layers(), 3);
    assert_eq!(report.converted_layers, vec![6, 5, 4]);
    assert_eq!(report.steps_run, 3 * train.stage_steps());
}

#[test]
fn both_modes_spend_the_same_tokens() {
    let c = corpus(20_000);
    let train = cfg(3);
    let inc = TrainConfig {
        mode: AdaptMode::Incremental,
        ..train.clone()
    };
    let fs = TrainConfig {
        mode: AdaptMode::FullStage,
        ..train
    };
    let total = |r: Vec<StageReport>| r.iter().map(|s| s.tokens_seen).sum::<usize>();
    let a = total(adapt(&baseline(4), 2, &inc, &c, &mut ()).unwrap().1);
    let b = total(adapt(&baseline(4), 2, &fs, &c, &mut ()).unwrap().1);
    assert_eq!(a, b);
}

#[test]
fn adaptation_is_deterministic() {
    let c = corpus(20_000);
    let run = || {
        to_bytes(
            &incremental_adapt(&baseline(4), 2, &cfg(3), &c).unwrap().0,
            Dtype::F64,
        )
    };
    assert_eq!(run(), run());
}

#[test]
fn stage_update_lowers_loss_on_bigram_data() {
    let c = Corpus::from_bytes(&synthetic_bigram(200 * SEQ, 2), SEQ).unwrap();
    assert!(c.len() >= 200);
    let mut m = baseline(2);
    m.convert_down_to(1).unwrap();
    let mut s = DataStream::cycling(&c).unwrap();
    let r = stage_update(&mut m, &[2], &mut s, &cfg(60)).unwrap();
    assert_eq!(r.trace.len(), 60);
    assert!(
        r.loss_end < r.loss_start,
        "{} -> {}",
        r.loss_start,
        r.loss_end
    );
}

#[test]
fn empty_trainable_set_makes_adam_a_no_op() {
    let mut m = baseline(2);
    m.freeze_all_except(&HashSet::new()).unwrap();
    let before = snapshot(&m);
    m.loss_and_grad(&[1, 2, 3], &[2, 3, 4], 1, 3).unwrap();
    Adam::new(AdamConfig::default()).step(m.params_mut());
    assert_eq!(snapshot(&m), before);
}

#[test]
fn unknown_name_is_rejected() {
    let mut m = baseline(2);
    let names: HashSet<String> = ["layer.9.attn.w_q".to_string()].into_iter().collect();
    assert!(m.freeze_all_except(&names).is_err());
}

#[test]
fn pretraining_reduces_held_out_loss() {
    let (train, eval) = corpus(40_000).split_holdout(0.1);
    let mut m = baseline(2);
    let before = evaluate_loss(&m, &eval, 8).unwrap();
    let r = pretrain(&mut m, &train, 80, &cfg(1)).unwrap();
    assert_eq!(r.steps_run, 80);
    assert!(evaluate_loss(&m, &eval, 8).unwrap() < before);
}
