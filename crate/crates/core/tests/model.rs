use irs_autodiff::Tensor;
use irs_core::backbone::BackboneConfig;
use irs_core::dataset::step_matrix;
use irs_core::model::{Model, ModelConfig};
use irs_core::nn::Ctx;
use irs_core::phantom::PhantomSpec;
use irs_core::Error;

fn small(canvas: usize) -> Model {
    let cfg = ModelConfig { backbone: BackboneConfig { canvas, ..BackboneConfig::default() }, ..ModelConfig::default() };
    let mut m = Model::new(cfg).unwrap();
    m.register_classes(step_matrix(&PhantomSpec::default_kidney(canvas), 1).unwrap().new_classes()).unwrap();
    m
}

fn images(b: usize, canvas: usize) -> Tensor {
    Tensor::from_fn(&[b, 3, canvas, canvas], |i| ((i * 7919) % 257) as f64 / 257.0)
}

#[test]
fn forward_shapes() {
    let m = small(32);
    let mut ctx = Ctx::new(&m.store, false, 0);
    let x = ctx.g.constant(images(3, 32));
    let f = m.forward(&mut ctx, x, &[0, 1, 5], &[0, 1, 3]).unwrap();
    assert_eq!(ctx.g.shape(f.logits), &[3, 2, 32, 32]);
    assert_eq!(ctx.g.shape(f.decoded), &[3, 8, 32, 32]);
    assert_eq!(ctx.g.shape(f.omega), &[3, 162]);
    assert_eq!(ctx.g.shape(f.class_tokens), &[3, 32]);
    assert_eq!(ctx.g.shape(f.fused)[0], 3);
    assert_eq!(f.latents.len(), 3);
    let p = m.predict(&images(3, 32), &[0, 1, 5], &[0, 1, 3]).unwrap();
    assert_eq!(p.shape(), &[3, 32, 32]);
    assert!(p.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn prompts_condition_the_output() {
    let m = small(16);
    let x = images(1, 16);
    let a = m.predict(&x, &[0], &[0]).unwrap();
    let b = m.predict(&x, &[3], &[0]).unwrap();
    let c = m.predict(&x, &[0], &[2]).unwrap();
    assert_ne!(a, b, "class token has no effect");
    assert_ne!(a, c, "scale token has no effect");
    let mut off = m.clone();
    off.cfg.class_tokens = false;
    assert_eq!(off.predict(&x, &[0], &[0]).unwrap(), off.predict(&x, &[3], &[0]).unwrap());
}

#[test]
fn batch_items_are_independent_in_eval_mode() {
    let m = small(16);
    let x = images(2, 16);
    let both = m.predict(&x, &[0, 4], &[0, 1]).unwrap();
    let second = Tensor::new(&[1, 3, 16, 16], x.data()[3 * 256..].to_vec());
    let alone = m.predict(&second, &[4], &[1]).unwrap();
    for (a, b) in both.data()[256..].iter().zip(alone.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let m = small(16);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    m.save(&path).unwrap();
    let back = Model::load(&path).unwrap();
    assert_eq!(back.registry, m.registry);
    assert_eq!(back.step, m.step);
    let x = images(2, 16);
    assert_eq!(back.predict(&x, &[1, 2], &[0, 0]).unwrap(), m.predict(&x, &[1, 2], &[0, 0]).unwrap());
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let bytes = small(16).to_bytes();
    assert!(Model::from_bytes(&bytes[..bytes.len() / 2]).is_err());
    assert!(Model::from_bytes(b"not a checkpoint").is_err());
}

#[test]
fn growing_the_token_bank_keeps_old_rows() {
    let mut m = small(16);
    let before = m.store.get(m.tokens.class).clone();
    let step2 = step_matrix(&PhantomSpec::default_kidney(16), 2).unwrap();
    m.register_classes(step2.new_classes()).unwrap();
    let after = m.store.get(m.tokens.class);
    assert_eq!(after.shape(), &[12, 32]);
    assert_eq!(&after.data()[..before.numel()], before.data());
}

#[test]
fn bad_inputs_are_errors() {
    let m = small(16);
    let mut ctx = Ctx::new(&m.store, false, 0);
    let wrong = ctx.g.constant(images(1, 32));
    assert!(matches!(m.forward(&mut ctx, wrong, &[0], &[0]), Err(Error::Shape(_))));
    let x = ctx.g.constant(images(1, 16));
    assert!(matches!(m.forward(&mut ctx, x, &[0, 1], &[0]), Err(Error::Shape(_))));
    assert!(matches!(m.forward(&mut ctx, x, &[40], &[0]), Err(Error::UnknownClass(40))));
    assert!(matches!(m.forward(&mut ctx, x, &[0], &[9]), Err(Error::Shape(_))));
}
