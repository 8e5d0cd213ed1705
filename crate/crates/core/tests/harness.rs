use std::collections::BTreeMap;

use fgmoe_core::data::{batch_images, batch_target, generate_dataset, TaskSample};
use fgmoe_core::encoder::PREFIX;
use fgmoe_core::harness::{
    encode_samples, evaluate, grad_check_config, load_checkpoint, save_checkpoint, shared_pyramids, train,
    train_cached, Decoder, DecoderKind, ExperimentConfig, Mode, Model,
};
use fgmoe_core::layers::ForwardCtx;
use fgmoe_core::tasks::{task_loss, TaskId};
use fgmoe_core::tensor::Graph;
use fgmoe_core::Error;

fn small(steps: usize) -> ExperimentConfig {
    ExperimentConfig {
        steps,
        train_samples: 4,
        eval_samples: 2,
        log_routing_every: 1,
        ..grad_check_config()
    }
}

fn data(cfg: &ExperimentConfig, n: usize) -> Vec<TaskSample> {
    generate_dataset(&cfg.scene(), 0, n).unwrap()
}

fn bits(m: &Model, filter: impl Fn(&str) -> bool) -> Vec<(String, Vec<u64>)> {
    m.store
        .iter()
        .filter(|(_, p)| filter(&p.name))
        .map(|(_, p)| (p.name.clone(), p.value.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

fn weights(m: &Model) -> Vec<(String, Vec<u64>)> {
    bits(m, |_| true)
}

#[test]
fn training_is_deterministic() {
    let cfg = small(3);
    let d = data(&cfg, 4);
    let (a, la) = train(&cfg, &d, |_| Ok(())).unwrap();
    let (b, lb) = train(&cfg, &d, |_| Ok(())).unwrap();
    assert_eq!(la, lb);
    assert_eq!(weights(&a), weights(&b));
    assert!(la.iter().all(|s| s.routing.is_some()));
}

#[test]
fn seed_changes_the_run() {
    let cfg = small(2);
    let d = data(&cfg, 4);
    let (_, la) = train(&cfg, &d, |_| Ok(())).unwrap();
    let (_, lb) = train(&ExperimentConfig { seed: 7, ..cfg }, &d, |_| Ok(())).unwrap();
    assert_ne!(la[0].total, lb[0].total);
}

#[test]
fn decoder_only_leaves_encoder_untouched() {
    let cfg = ExperimentConfig {
        mode: Mode::DecoderOnly,
        ..small(3)
    };
    let d = data(&cfg, 4);
    let before = Model::build(&cfg).unwrap();
    let (after, _) = train(&cfg, &d, |_| Ok(())).unwrap();
    let enc = |n: &str| n.starts_with(PREFIX);
    assert_eq!(bits(&before, enc), bits(&after, enc));
    assert_ne!(bits(&before, |n| !enc(n)), bits(&after, |n| !enc(n)));
    for (_, p) in after.store.iter().filter(|(_, p)| p.name.starts_with(PREFIX)) {
        assert!(p.frozen() || p.kind == fgmoe_core::params::ParamKind::Buffer);
        assert!(p.velocity.is_none(), "{} has optimizer state", p.name);
    }
}

#[test]
fn full_mode_trains_the_encoder() {
    let cfg = small(2);
    assert_eq!(cfg.mode, Mode::Full);
    let d = data(&cfg, 4);
    let before = Model::build(&cfg).unwrap();
    let (after, _) = train(&cfg, &d, |_| Ok(())).unwrap();
    let enc = |n: &str| n.starts_with(PREFIX);
    assert_ne!(bits(&before, enc), bits(&after, enc));
}

#[test]
fn zero_learning_rate_keeps_weights() {
    let cfg = ExperimentConfig {
        lr: 0.0,
        ..small(1)
    };
    let d = data(&cfg, 4);
    let before = Model::build(&cfg).unwrap();
    let (after, _) = train(&cfg, &d, |_| Ok(())).unwrap();
    let not_buffer = |m: &Model| -> Vec<Vec<u64>> {
        m.store
            .iter()
            .filter(|(_, p)| p.kind == fgmoe_core::params::ParamKind::Weight)
            .map(|(_, p)| p.value.data().iter().map(|v| v.to_bits()).collect())
            .collect()
    };
    assert_eq!(not_buffer(&before), not_buffer(&after));
}

#[test]
fn census_reconciles_and_freezing_moves_counts() {
    let full = Model::build(&small(1)).unwrap().census();
    let frozen = Model::build(&ExperimentConfig {
        mode: Mode::DecoderOnly,
        ..small(1)
    })
    .unwrap()
    .census();
    assert!(full.reconciles() && frozen.reconciles());
    assert_eq!(full.total, frozen.total);
    let encoder = full.component("encoder").unwrap().total;
    assert_eq!(full.trainable - frozen.trainable, encoder);
    assert_eq!(frozen.frozen, encoder);
    let moe = full.component("global_moe").unwrap();
    let cfg = small(1);
    assert_eq!(moe.total, cfg.moe.layer_params(cfg.decoder_channels()));
    assert_eq!(
        moe.per_expert,
        Some(fgmoe_core::moe::expert_params(cfg.decoder_channels(), cfg.moe.hidden))
    );
}

#[test]
fn shared_mlp_matches_trainable_budget() {
    let base = ExperimentConfig {
        mode: Mode::DecoderOnly,
        ..small(1)
    };
    let fg = Model::build(&base).unwrap().census().trainable;
    let model = Model::build(&ExperimentConfig {
        decoder: DecoderKind::SharedMlp,
        ..base.clone()
    })
    .unwrap();
    let mlp = model.census().trainable;
    let c = base.decoder_channels();
    assert!(fg.abs_diff(mlp) <= 2 * c + 1, "{fg} vs {mlp}");
    let Decoder::SharedMlp { mlp, .. } = &model.decoder else { panic!("wrong decoder") };
    assert!(mlp.blocks.len() > 1);
    assert!(mlp.blocks.iter().all(|b| b.up.outputs <= base.moe.hidden));
}

#[test]
fn evaluation_is_repeatable_and_delta_m_is_zero_against_itself() {
    let cfg = small(2);
    let d = data(&cfg, 4);
    let (model, _) = train(&cfg, &d, |_| Ok(())).unwrap();
    let a = evaluate(&model, &d, None).unwrap();
    let b = evaluate(&model, &d, None).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.forward_passes, 2);
    let own: BTreeMap<TaskId, f64> = a.metrics.metrics.iter().map(|m| (m.task, m.value)).collect();
    let r = evaluate(&model, &d, Some(&own)).unwrap();
    assert_eq!(r.metrics.delta_m, Some(0.0));
    assert_eq!(r.metrics.recompute_delta_m().unwrap().unwrap(), 0.0);

    let mut partial = own.clone();
    partial.remove(&TaskId::Depth);
    assert!(matches!(evaluate(&model, &d, Some(&partial)), Err(Error::Config(_))));
    assert!(matches!(evaluate(&model, &[], None), Err(Error::Config(_))));
}

#[test]
fn cached_pyramids_reproduce_uncached_training() {
    let cfg = ExperimentConfig {
        mode: Mode::DecoderOnly,
        ..small(2)
    };
    let d = data(&cfg, 4);
    let (a, la) = train(&cfg, &d, |_| Ok(())).unwrap();
    let cache = shared_pyramids(&cfg, &d).unwrap().unwrap();
    let (b, lb) = train_cached(&cfg, &d, Some(&cache), |_| Ok(())).unwrap();
    assert_eq!(la, lb);
    assert_eq!(weights(&a), weights(&b));
    assert!(train_cached(&cfg, &d, Some(&cache[..3]), |_| Ok(())).is_err());
    assert!(shared_pyramids(&small(1), &d).unwrap().is_none());
}

#[test]
fn single_task_mode_shares_encoder_outputs() {
    let multi = ExperimentConfig {
        mode: Mode::DecoderOnly,
        ..small(1)
    };
    let single = ExperimentConfig {
        mode: Mode::Single(TaskId::Normal),
        seed: 11,
        ..multi.clone()
    };
    let d = data(&multi, 2);
    let a = encode_samples(&Model::build(&multi).unwrap(), &d).unwrap();
    let b = encode_samples(&Model::build(&single).unwrap(), &d).unwrap();
    assert!(a.iter().zip(&b).all(|(x, y)| x.bit_eq(y)));
    let m = Model::build(&single).unwrap();
    assert_eq!(m.tasks(), vec![TaskId::Normal]);
}

#[test]
fn task_losses_only_reach_their_own_branch() {
    let cfg = small(1);
    let model = Model::build(&cfg).unwrap();
    let d = data(&cfg, 2);
    let refs: Vec<&TaskSample> = d.iter().collect();
    for spec in model.specs() {
        let mut g = Graph::new();
        let x = g.constant(batch_images(&refs).unwrap());
        let out = model.forward(&mut g, x, &mut ForwardCtx::train()).unwrap();
        let l = task_loss(&mut g, out[&spec.id], &batch_target(&refs, spec.id), &spec).unwrap();
        let grads = g.backward(l.loss).unwrap();
        let mut store = model.store.clone();
        store.zero_grads();
        store.accumulate(&g, &grads);
        let own = format!("task.{}.", spec.id);
        let mut reached_own = false;
        for (_, p) in store.iter() {
            let nonzero = p.grad.as_ref().is_some_and(|t| t.data().iter().any(|&v| v != 0.0));
            if p.name.starts_with("task.") && !p.name.starts_with(&own) {
                assert!(!nonzero, "{} loss reached {}", spec.id, p.name);
            }
            reached_own |= nonzero && p.name.starts_with(&own);
        }
        assert!(reached_own);
    }
}

#[test]
fn checkpoint_file_round_trip_keeps_flags_and_stats() {
    let cfg = ExperimentConfig {
        mode: Mode::DecoderOnly,
        ..small(2)
    };
    let d = data(&cfg, 4);
    let (model, _) = train(&cfg, &d, |_| Ok(())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.fgmc");
    save_checkpoint(&model, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(weights(&model), weights(&back));
    assert_eq!(back.cfg, model.cfg);
    let flags = |m: &Model| m.store.iter().map(|(_, p)| p.frozen()).collect::<Vec<_>>();
    assert_eq!(flags(&model), flags(&back));
    assert_eq!(evaluate(&model, &d, None).unwrap(), evaluate(&back, &d, None).unwrap());
    assert!(matches!(load_checkpoint(dir.path().join("missing")), Err(Error::Io(_))));
}

#[test]
fn invalid_configs_fail_before_building() {
    let bad_k = ExperimentConfig {
        moe: fgmoe_core::moe::MoEConfig {
            top_k: 9,
            ..small(1).moe
        },
        ..small(1)
    };
    assert!(matches!(Model::build(&bad_k), Err(Error::Config(_))));
    let bad_heads = ExperimentConfig { heads: 3, ..small(1) };
    assert!(matches!(Model::build(&bad_heads), Err(Error::Config(_))));
    let bad_size = ExperimentConfig {
        image_size: 40,
        ..small(1)
    };
    assert!(Model::build(&bad_size).is_err());
    let bad_single = ExperimentConfig {
        mode: Mode::Single(TaskId::Sal),
        ..small(1)
    };
    assert!(matches!(Model::build(&bad_single), Err(Error::Config(_))));
    assert!(matches!(train(&small(1), &[], |_| Ok(())), Err(Error::Config(_))));
}

#[test]
fn config_text_round_trips() {
    let mut cfg = small(4);
    cfg.set("beta.depth", "2.5").unwrap();
    cfg.set("mode", "single:depth").unwrap();
    cfg.set("tasks", "seg,depth,normal,bound").unwrap();
    let back = ExperimentConfig::parse(&cfg.to_text()).unwrap();
    assert_eq!(back, cfg);
    assert!(ExperimentConfig::parse("no_such_key = 1").is_err());
    assert!(ExperimentConfig::parse("steps = many").is_err());
    assert!(ExperimentConfig::parse("# only a comment\n\nsteps = 3").unwrap().steps == 3);
}
