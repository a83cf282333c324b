mod common;

use common::{gradcheck, perturb, rgb_layout, small_rgb_config};
use terragen::denoiser::{masked_cross_attention, MaskMode};
use terragen::diffusion::{
    accumulate_gradients, from_pixels, read_loss_log, step_draws, train, training_loss, Cond, LossConfig, LossInput,
    Model, NoiseSchedule, Stage, TrainConfig, TrainOptions, TrainSample,
};
use terragen::layout::{BBox, CategoryId, Layout, LayoutEntity, TaskId};
use terragen::numerics::{Graph, Tensor};
use terragen::synthdata::DatasetConfig;

fn corpus(n: usize) -> Vec<TrainSample> {
    let cfg = DatasetConfig { image_size: 16, ..DatasetConfig::default() };
    (0..n)
        .map(|i| {
            let (_, img, layout) = cfg.generate(i).unwrap();
            TrainSample { image: from_pixels(img.as_raw(), 3, 16, 16).unwrap(), layout }
        })
        .collect()
}

fn small_train(stage1: u64, stage2: u64) -> TrainConfig {
    TrainConfig {
        model: small_rgb_config(),
        stage1_steps: stage1,
        stage2_steps: stage2,
        lr_stage1: 1e-3,
        lr_stage2: 5e-4,
        warmup_steps: 2,
        batch_size: 2,
        accumulation: 2,
        checkpoint_every: 0,
        ..TrainConfig::default()
    }
}

fn params(path: &std::path::Path) -> Vec<Vec<f64>> {
    let (m, _, _) = Model::load(path).unwrap();
    m.store.iter().map(|(_, p)| p.value.data().to_vec()).collect()
}

#[test]
fn accumulation_split_matches_one_pass() {
    let data = corpus(6);
    let cfg = small_train(0, 4);
    let schedule = NoiseSchedule::new(&cfg.schedule).unwrap();
    let mut model = Model::new(cfg.model.clone()).unwrap();
    perturb(&mut model.store, 0.05, 1);
    let draws = step_draws(&cfg, 0, data.len(), &model.image_shape());
    let grads = |model: &mut Model, parts: &[&[terragen::diffusion::Draw]]| {
        model.store.zero_grad();
        let mut loss = 0.0;
        for p in parts {
            loss += accumulate_gradients(model, &schedule, Stage::LayoutGuided, &cfg.loss, &data, p, 0.25).unwrap();
        }
        let g: Vec<f64> = model.store.iter().flat_map(|(_, p)| p.grad.data().to_vec()).collect();
        (loss, g)
    };
    let (l1, g1) = grads(&mut model, &[&draws]);
    let (l2, g2) = grads(&mut model, &[&draws[..2], &draws[2..]]);
    assert_eq!(l1, l2);
    assert_eq!(g1, g2);
    assert!(g1.iter().any(|&v| v != 0.0));
}

#[test]
fn micro_batch_shape_does_not_change_training() {
    let data = corpus(6);
    let a = small_train(2, 2);
    let b = TrainConfig { batch_size: 4, accumulation: 1, ..a.clone() };
    let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let run = |cfg: &TrainConfig, dir: &std::path::Path| {
        train(cfg, &data, &TrainOptions { out_dir: dir.to_path_buf(), ..Default::default() }, &mut |_| {}).unwrap()
    };
    let (sa, sb) = (run(&a, da.path()), run(&b, db.path()));
    assert_eq!(sa.log.iter().map(|l| l.loss).collect::<Vec<_>>(), sb.log.iter().map(|l| l.loss).collect::<Vec<_>>());
    assert_eq!(params(&sa.checkpoint), params(&sb.checkpoint));
}

#[test]
fn resume_is_bit_exact_across_the_stage_boundary() {
    let data = corpus(6);
    let cfg = small_train(3, 3);
    let (straight, split) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let full = train(&cfg, &data, &TrainOptions { out_dir: straight.path().into(), ..Default::default() }, &mut |_| {})
        .unwrap();

    let first = TrainOptions { out_dir: split.path().into(), resume_from: None, stop_after: Some(4) };
    let partial = train(&cfg, &data, &first, &mut |_| {}).unwrap();
    assert_eq!(partial.steps_done, 4);
    let second = TrainOptions { out_dir: split.path().into(), resume_from: Some(partial.checkpoint), stop_after: None };
    let resumed = train(&cfg, &data, &second, &mut |_| {}).unwrap();
    assert_eq!(resumed.steps_done, 6);

    assert_eq!(params(&full.checkpoint), params(&resumed.checkpoint));
    let log_a = read_loss_log(&straight.path().join("loss.csv")).unwrap();
    let log_b = read_loss_log(&split.path().join("loss.csv")).unwrap();
    assert_eq!(log_a, log_b);
    assert_eq!(log_a.iter().map(|l| l.stage).collect::<Vec<_>>(), [1, 1, 1, 2, 2, 2]);
}

#[test]
fn resume_rejects_a_different_config() {
    let data = corpus(4);
    let cfg = small_train(2, 0);
    let dir = tempfile::tempdir().unwrap();
    let opts = TrainOptions { out_dir: dir.path().into(), resume_from: None, stop_after: Some(1) };
    let ck = train(&cfg, &data, &opts, &mut |_| {}).unwrap().checkpoint;
    let other = TrainConfig { seed: 9, ..cfg };
    let opts = TrainOptions { out_dir: dir.path().into(), resume_from: Some(ck), stop_after: None };
    assert!(train(&other, &data, &opts, &mut |_| {}).is_err());
}

#[test]
fn loss_goes_down() {
    let data = corpus(16);
    let cfg = TrainConfig { warmup_steps: 5, ..small_train(150, 0) };
    let dir = tempfile::tempdir().unwrap();
    let s = train(&cfg, &data, &TrainOptions { out_dir: dir.path().into(), ..Default::default() }, &mut |_| {}).unwrap();
    let mean = |l: &[terragen::diffusion::StepLog]| l.iter().map(|x| x.loss).sum::<f64>() / l.len() as f64;
    let (head, tail) = (mean(&s.log[..10]), mean(&s.log[130..]));
    assert!(tail < 0.7 * head, "loss {head} -> {tail}");
}

fn logit_gradient(model: &Model, drop: bool) -> Vec<f64> {
    let schedule = NoiseSchedule::new(&Default::default()).unwrap();
    let layout = rgb_layout();
    let image = Tensor::new(vec![3, 16, 16], (0..768).map(|i| (i as f64 * 0.13).cos() * 0.8).collect()).unwrap();
    let eps = terragen::diffusion::initial_noise(&[3, 16, 16], 4);
    let input = LossInput { image: &image, layout: &layout, t: 250, eps: &eps, drop };
    let mut g = Graph::new(&model.store);
    let out = training_loss(&mut g, model, &schedule, Stage::LayoutGuided, &input, &LossConfig::default()).unwrap();
    let grads = g.backward(out.loss).unwrap();
    grads.param(model.unet.scale_weights.logits).map(|s| s.to_vec()).unwrap_or_default()
}

#[test]
fn scale_weights_learn_only_from_layout_conditions() {
    let mut model = Model::new(small_rgb_config()).unwrap();
    perturb(&mut model.store, 0.1, 8);
    let live = logit_gradient(&model, false);
    assert!(live.iter().any(|g| g.abs() > 1e-8), "{live:?}");
    // Without entities every scale sees the same permissive mask, so the
    // mixture does not depend on α.
    let dropped = logit_gradient(&model, true);
    assert!(dropped.iter().all(|g| g.abs() < 1e-12), "{dropped:?}");
}

#[test]
fn prediction_ignores_entity_order() {
    let mut model = Model::new(small_rgb_config()).unwrap();
    perturb(&mut model.store, 0.1, 2);
    let entities = [LayoutEntity::with_box(CategoryId::BUILDING, BBox::new(0.0625, 0.0625, 0.375, 0.3125).unwrap()),
        LayoutEntity::with_box(CategoryId::WATER, BBox::new(0.5, 0.125, 0.9375, 0.4375).unwrap()),
        LayoutEntity::with_box(CategoryId::VEGETATION, BBox::new(0.125, 0.625, 0.5, 0.9375).unwrap())];
    let x = terragen::diffusion::initial_noise(&[3, 16, 16], 1);
    let predict = |order: &[usize]| {
        let l = Layout::new(TaskId::SemanticSegmentation, order.iter().map(|&i| entities[i].clone()).collect());
        model.predict(&x, 400, Cond::Layout { layout: &l, alphas: (1.0, 1.0) }).unwrap()
    };
    let base = predict(&[0, 1, 2]);
    for order in [[2, 0, 1], [1, 2, 0], [2, 1, 0]] {
        assert!(base.max_abs_diff(&predict(&order)) < 1e-6);
    }
}

#[test]
fn attention_rows_sum_to_one_in_both_modes() {
    let store = terragen::numerics::ParamStore::new();
    let mut g = Graph::inference(&store);
    let wave = |n: usize, k: f64| (0..n).map(|i| (i as f64 * k).sin()).collect::<Vec<_>>();
    let q = g.constant(Tensor::new(vec![6, 4], wave(24, 0.7)).unwrap());
    let k = g.constant(Tensor::new(vec![5, 4], wave(20, 1.3)).unwrap());
    let v = g.constant(Tensor::new(vec![5, 3], wave(15, 0.4)).unwrap());
    let masks: Vec<Tensor> = (0..3)
        .map(|s| Tensor::new(vec![6, 5], (0..30).map(|i| if (i + s) % 3 == 0 || i % 5 == 4 { 1.0 } else { 0.0 }).collect()).unwrap())
        .collect();
    let alphas = g.constant(Tensor::from_vec(vec![0.2, 0.5, 0.3]));
    for mode in [MaskMode::Additive, MaskMode::Multiplicative] {
        let out = masked_cross_attention(&mut g, q, k, v, &masks, alphas, mode).unwrap();
        let w = g.value(out.weights).clone();
        for r in 0..6 {
            assert!((w.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(w.row(r).iter().all(|&a| a >= 0.0));
        }
    }
}

#[test]
fn condition_path_gradcheck() {
    let mut model = Model::new(common::tiny_model_config()).unwrap();
    perturb(&mut model.store, 0.2, 4);
    let layout = common::tiny_layout();
    let Model { mut store, encoder, .. } = model;
    let worst = gradcheck(
        &mut store,
        |g| {
            let b = encoder.condition(g, &layout, 8, false, (0.7, 0.9)).unwrap();
            let tokens = b.tokens(g).unwrap();
            let n = g.value(tokens).numel();
            let w = g.constant(Tensor::new(g.shape(tokens).to_vec(), (0..n).map(|i| (i as f64 * 0.37).cos()).collect()).unwrap());
            let p = g.mul(tokens, w).unwrap();
            g.sum(p).unwrap()
        },
        60,
        7,
    );
    assert!(worst < 1e-4, "worst relative error {worst}");
}
