use irs_autodiff::Tensor;
use irs_core::dataset::{arrange_steps, generate_dataset, Dataset, GenConfig, SceneCounts, StepData};
use irs_core::eval::dice_per_class;
use irs_core::losses::{anatomy_loss, SemiToggles, SubsetMode};
use irs_core::model::Model;
use irs_core::nn::Ctx;
use irs_core::phantom::PhantomSpec;
use irs_core::trainer::{
    anatomy_term, draw_prompts, frozen_params, mean_class_dice, train_increment, train_phase1, Batch, FreezeMode, TrainConfig,
};
use irs_core::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Fixture {
    _dir: tempfile::TempDir,
    step1: StepData,
    step2: StepData,
}

fn fixture(train: usize) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let cfg = GenConfig { spec: PhantomSpec::default_kidney(64), seed: 3, scenes: SceneCounts { train, val: 1, test: 1 } };
    generate_dataset(&cfg, dir.path()).unwrap();
    let ds = Dataset::open(dir.path()).unwrap();
    let (step1, step2) = (ds.load_step(1).unwrap(), ds.load_step(2).unwrap());
    Fixture { _dir: dir, step1, step2 }
}

fn tiny() -> TrainConfig {
    TrainConfig { phase1_epochs: 1, epochs_per_step: Some(1), batch_size: 4, old_prompts_per_image: Some(2), ..TrainConfig::default() }
}

fn teacher(f: &Fixture, cfg: &TrainConfig) -> Model {
    train_phase1(cfg, f.step1.matrix.new_classes(), &f.step1.train[..8], &[], &mut Vec::new()).unwrap().0
}

#[test]
fn increment_leaves_the_teacher_untouched_and_is_deterministic() {
    let f = fixture(2);
    let cfg = tiny();
    let t = teacher(&f, &cfg);
    let before = t.to_bytes();
    let train = &f.step2.train[..8];
    let (mut log_a, mut log_b) = (Vec::new(), Vec::new());
    let (a, _) = train_increment(&t, &cfg, &f.step2.matrix, train, &mut log_a).unwrap();
    let (b, _) = train_increment(&t, &cfg, &f.step2.matrix, train, &mut log_b).unwrap();
    assert_eq!(t.to_bytes(), before);
    assert_eq!(log_a, log_b);
    assert_eq!(a.to_bytes(), b.to_bytes());
    assert!(log_a.iter().all(|r| r.losses.semi > 0.0));
    assert_eq!(a.step, 2);
    assert_eq!(a.num_class_tokens(), 12);
}

#[test]
fn disabling_both_regularizers_reproduces_fine_tuning() {
    let f = fixture(2);
    let base = tiny();
    let t = teacher(&f, &base);
    let train = &f.step2.train[..8];
    let finetune = TrainConfig { lambda_anatomy: 0.0, lambda_semi: 0.0, ..base.clone() };
    let toggled_off = TrainConfig {
        lambda_anatomy: 0.0,
        semi: SemiToggles { token: false, latent: false, decoder: false, logits: false, pseudo_labels: false },
        ..base
    };
    let (mut la, mut lb) = (Vec::new(), Vec::new());
    let (a, _) = train_increment(&t, &finetune, &f.step2.matrix, train, &mut la).unwrap();
    let (b, _) = train_increment(&t, &toggled_off, &f.step2.matrix, train, &mut lb).unwrap();
    let strip = |v: &[irs_core::trainer::LogRecord]| v.iter().map(|r| (r.losses.supervised, r.losses.total)).collect::<Vec<_>>();
    assert_eq!(strip(&la), strip(&lb));
    assert_eq!(a.to_bytes(), b.to_bytes());
}

#[test]
fn fully_frozen_with_zero_learning_rate_changes_nothing() {
    let f = fixture(2);
    let cfg = tiny();
    let t = teacher(&f, &cfg);
    let frozen = TrainConfig { lr: 0.0, freeze: FreezeMode::Fully, ..cfg };
    let (s, _) = train_increment(&t, &frozen, &f.step2.matrix, &f.step2.train[..8], &mut Vec::new()).unwrap();
    for id in t.store.ids() {
        if id == t.tokens.class {
            let old = t.store.get(id).data();
            assert_eq!(&s.store.get(id).data()[..old.len()], old);
        } else {
            assert_eq!(s.store.get(id), t.store.get(id), "{}", t.store.name(id));
        }
    }
    let old_test: Vec<_> = f.step1.test.clone();
    assert_eq!(dice_per_class(&s, &old_test).unwrap(), dice_per_class(&t, &old_test).unwrap());
}

#[test]
fn freeze_modes_select_the_expected_parameters() {
    let m = Model::new(Default::default()).unwrap();
    assert!(frozen_params(&m, FreezeMode::None).is_empty());
    let fully = frozen_params(&m, FreezeMode::Fully);
    assert!(fully.iter().all(|&id| !m.store.name(id).starts_with("tokens.") && !m.store.name(id).starts_with("controller.")));
    let enc = frozen_params(&m, FreezeMode::Encoder);
    assert!(!enc.is_empty() && enc.iter().all(|&id| m.store.name(id).contains(".enc.")));
}

#[test]
fn step_and_class_errors() {
    let f = fixture(2);
    let cfg = tiny();
    let untrained = Model::new(Default::default()).unwrap();
    let e = train_increment(&untrained, &cfg, &f.step2.matrix, &f.step2.train[..4], &mut Vec::new()).unwrap_err();
    assert!(matches!(e, Error::StepMismatch(_)));
    let t = teacher(&f, &cfg);
    let e = train_increment(&t, &cfg, &f.step2.matrix, &f.step1.train[..4], &mut Vec::new()).unwrap_err();
    assert!(matches!(e, Error::UnknownClass(_)));
    let e = train_phase1(&cfg, f.step2.matrix.new_classes(), &f.step2.train[..4], &[], &mut Vec::new()).unwrap_err();
    assert!(matches!(e, Error::Data(_)));
    let bad = TrainConfig { lr_decay: 0.0, ..tiny() };
    assert!(bad.validate().is_err());
}

#[test]
fn anatomy_term_sums_related_pairs_per_image() {
    let f = fixture(2);
    let samples = &f.step2.train[..3];
    let batch = Batch::from_samples(samples);
    let old_ids: Vec<usize> = f.step2.matrix.old_classes().iter().map(|c| c.id).collect();
    let prompts: Vec<(usize, usize)> = (0..3).flat_map(|b| old_ids.iter().map(move |&i| (b, i))).collect();
    let hw = 64 * 64;
    let fg = Tensor::from_fn(&[prompts.len(), 64, 64], |k| ((k * 37) % 101) as f64 / 100.0);
    let store = irs_autodiff::ParamStore::new();
    let mut ctx = Ctx::new(&store, false, 0);
    let v = ctx.g.constant(fg.clone());
    let got = anatomy_term(&mut ctx, &f.step2.matrix, &batch, &prompts, v, 1.5, SubsetMode::Literal).unwrap();
    let got = ctx.g.value(got).item();
    let mut want = 0.0;
    for (row, &(b, i)) in prompts.iter().enumerate() {
        let rel = f.step2.matrix.lookup(i, samples[b].class_id).unwrap();
        let mut g = irs_autodiff::Graph::new();
        let y = g.constant(Tensor::new(&[64, 64], samples[b].label.iter().map(|&v| v as f64).collect()));
        let p = g.constant(Tensor::new(&[64, 64], fg.data()[row * hw..(row + 1) * hw].to_vec()));
        let l = anatomy_loss(&mut g, y, p, rel, SubsetMode::Literal).unwrap();
        want += g.value(l).item();
    }
    want *= 1.5 / 3.0;
    assert!((got - want).abs() < 1e-9, "{got} vs {want}");
}

#[test]
fn prompt_draws_are_distinct_and_weighted() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let ids = [0, 1, 2, 3, 4, 5];
    let (p, w) = draw_prompts(4, &ids, Some(2), &mut rng);
    assert_eq!(w, 6.0);
    assert_eq!(p.len(), 8);
    for b in 0..4 {
        let mine: Vec<usize> = p.iter().filter(|x| x.0 == b).map(|x| x.1).collect();
        assert_eq!(mine.len(), 2);
        assert!(mine[0] < mine[1]);
    }
    let (all, w) = draw_prompts(2, &ids, None, &mut rng);
    assert_eq!((all.len(), w), (12, 6.0));
    let (all, _) = draw_prompts(2, &ids, Some(9), &mut rng);
    assert_eq!(all.len(), 12);
}

#[test]
fn two_class_phantom_is_learnable() {
    let spec = arrange_steps(&PhantomSpec::default_kidney(64), &[vec![0, 1]]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    generate_dataset(&GenConfig { spec, seed: 1, scenes: SceneCounts { train: 8, val: 4, test: 0 } }, dir.path()).unwrap();
    let step = Dataset::open(dir.path()).unwrap().load_step(1).unwrap();
    let cfg = TrainConfig { phase1_epochs: 30, ..TrainConfig::default() };
    let (m, summary) = train_phase1(&cfg, step.matrix.new_classes(), &step.train, &step.val, &mut Vec::new()).unwrap();
    let dice = mean_class_dice(&m, &step.val).unwrap();
    assert!(dice >= 85.0, "validation Dice {dice:.1} after {:?}", summary.val_dice);
}
