//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `cargo test -p irs-core --test acceptance -- 1 2 9` runs a subset.
//! Failures are reported but only change the exit status when
//! `IRS_ACCEPTANCE_STRICT=1`.

mod common;

use std::collections::BTreeMap;
use std::time::Instant;

use irs_autodiff::{Graph, Tensor};
use irs_core::backbone::BackboneConfig;
use irs_core::dataset::{generate_dataset, step_matrix, Dataset, GenConfig, LabeledSample, SceneCounts, StepData};
use irs_core::eval::{combine_split_means, dice_per_class, hard_dice, DiceReport};
use irs_core::head::param_layout;
use irs_core::losses::{anatomy_loss, consistency_loss, semi_loss, soft_dice, supervised_loss, SemiToggles, SubsetMode};
use irs_core::model::{Model, ModelConfig};
use irs_core::nn::Ctx;
use irs_core::phantom::{observe_relation, PhantomSpec};
use irs_core::pipeline::{cmd_gen_data, cmd_train, evaluate_run, GenDataArgs, Method, TrainArgs, LOSSES_FILE};
use irs_core::relation::RelationKind;
use irs_core::trainer::{train_increment, train_joint, train_phase1, TrainConfig};
use serde_json::Value;

const PILOT: &str = include_str!("fixtures/pilot_benchmark.json");

type Outcome = Result<(bool, String), String>;

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn head_arithmetic() -> Outcome {
    let layout = param_layout();
    let total = layout.0 + layout.1 + layout.2;
    Ok((layout == (72, 72, 18) && total == 162, format!("layout {layout:?}, total {total}")))
}

/// Returns `(analytic, numeric)` gradients of the anatomy loss w.r.t. `p`.
fn anatomy_grads(y: &Tensor, p: &Tensor, rel: RelationKind, mode: SubsetMode) -> Result<(Tensor, Tensor), String> {
    let mut g = Graph::new();
    let yv = g.constant(y.clone());
    let pv = g.input(p.clone());
    let l = anatomy_loss(&mut g, yv, pv, rel, mode).map_err(err)?;
    let analytic = g.backward(l).wrt(pv).cloned().ok_or("no gradient for P")?;
    let numeric = irs_autodiff::check::numeric_gradient(p, 1e-4, |t| {
        let mut g = Graph::new();
        let yv = g.constant(y.clone());
        let pv = g.constant(t.clone());
        let l = anatomy_loss(&mut g, yv, pv, rel, mode).expect("valid inputs");
        g.value(l).item()
    });
    Ok((analytic, numeric))
}

fn anatomy_invariants() -> Outcome {
    let mut rng = common::rng(2);
    let n = 64;
    let mut notes = Vec::new();
    let mut ok = true;
    for trial in 0..20 {
        let y = Tensor::new(&[8, 8], common::binary(&mut rng, n, 0.4));
        let yd = y.data().to_vec();
        if yd.iter().all(|&v| v == 0.0) {
            continue;
        }
        let p_rand = Tensor::new(&[8, 8], common::uniform(&mut rng, n));
        let noise = common::uniform(&mut rng, n);
        let inside = Tensor::new(&[8, 8], (0..n).map(|i| yd[i] * noise[i]).collect());
        let outside = Tensor::new(&[8, 8], (0..n).map(|i| (1.0 - yd[i]) * noise[i]).collect());
        let cover = Tensor::new(&[8, 8], (0..n).map(|i| yd[i].max(noise[i] * 0.5)).collect());
        let value = |p: &Tensor, rel, mode| -> Result<f64, String> {
            let mut g = Graph::new();
            let yv = g.constant(y.clone());
            let pv = g.constant(p.clone());
            let l = anatomy_loss(&mut g, yv, pv, rel, mode).map_err(err)?;
            Ok(g.value(l).item())
        };
        let unrelated = value(&p_rand, RelationKind::Unrelated, SubsetMode::Literal)?;
        let exclusive = value(&outside, RelationKind::MutuallyExclusive, SubsetMode::Literal)?;
        let superset = value(&inside, RelationKind::NewSupersetOfOld, SubsetMode::Literal)?;
        let subset = value(&cover, RelationKind::NewSubsetOfOld, SubsetMode::Prose)?;
        if unrelated != 0.0 || exclusive.abs() > 1e-12 || superset.abs() > 1e-4 || subset.abs() > 1e-6 {
            ok = false;
            notes.push(format!("trial {trial}: values {unrelated} {exclusive} {superset} {subset}"));
        }
        let mut worst: f64 = 0.0;
        for (rel, mode, sign_inside, sign_outside) in [
            (RelationKind::NewSupersetOfOld, SubsetMode::Literal, 0.0, 1.0),
            (RelationKind::MutuallyExclusive, SubsetMode::Literal, 1.0, 0.0),
            (RelationKind::NewSubsetOfOld, SubsetMode::Prose, -1.0, 0.0),
        ] {
            let (a, num) = anatomy_grads(&y, &p_rand, rel, mode)?;
            worst = worst.max(irs_autodiff::check::max_relative_error(&a, &num, 1e-6));
            for i in 0..n {
                let want = if yd[i] == 1.0 { sign_inside } else { sign_outside };
                if want != 0.0 && a.data()[i] * want <= 0.0 {
                    ok = false;
                    notes.push(format!("trial {trial}: {rel:?} gradient {} at pixel {i}", a.data()[i]));
                }
            }
        }
        if worst > 1e-2 {
            ok = false;
            notes.push(format!("trial {trial}: finite-difference relative error {worst:e}"));
        }
    }
    notes.truncate(3);
    Ok((ok, if ok { "values and gradient signs hold on 20 random 8x8 instances".into() } else { notes.join("; ") }))
}

fn distillation_identity() -> Outcome {
    let cfg = ModelConfig { backbone: BackboneConfig { canvas: 16, ..BackboneConfig::default() }, ..ModelConfig::default() };
    let spec = PhantomSpec::default_kidney(16);
    let mut teacher = Model::new(cfg).map_err(err)?;
    teacher.register_classes(step_matrix(&spec, 1).map_err(err)?.new_classes()).map_err(err)?;
    teacher.step = 1;
    let mut copy = teacher.clone();
    copy.step = 2;
    let images = Tensor::new(&[2, 3, 16, 16], common::uniform(&mut common::rng(3), 2 * 3 * 256));
    let prompts = vec![(0, 0), (0, 4), (1, 2)];
    let semi = |student: &Model, toggles: &SemiToggles| -> Result<[f64; 5], String> {
        let mut ctx = Ctx::new(&student.store, false, 0);
        let (terms, _) = semi_loss(&mut ctx, &teacher, student, &images, &prompts, 6.0, toggles).map_err(err)?;
        let total = terms.total(&mut ctx.g);
        let v = |x: Option<irs_autodiff::Var>| x.map_or(f64::NAN, |x| ctx.g.value(x).item());
        let [a, b, c, d] = terms.parts().map(v);
        Ok([a, b, c, d, ctx.g.value(total).item()])
    };
    let all = SemiToggles::default();
    let same = semi(&copy, &all)?[4];
    if same.abs() > 1e-9 {
        return Ok((false, format!("copied teacher gives semi loss {same:e}")));
    }
    let mut student = copy.clone();
    let mut rng = common::rng(4);
    for id in student.store.ids().collect::<Vec<_>>() {
        if student.store.entry(id).is_buffer {
            continue;
        }
        let t = student.store.get_mut(id);
        let noise = common::normal_ish(&mut rng, t.numel(), 0.05);
        for (v, e) in t.data_mut().iter_mut().zip(noise) {
            *v += e;
        }
    }
    let full = semi(&student, &all)?;
    if full[..4].iter().any(|&v| !(v > 0.0)) {
        return Ok((false, format!("perturbed student has non-positive terms {full:?}")));
    }
    for mask in 0u8..16 {
        let on = |k: u8| mask & (1 << k) != 0;
        let toggles = SemiToggles { token: on(0), latent: on(1), decoder: on(2), logits: on(3), pseudo_labels: false };
        let got = semi(&student, &toggles)?;
        let want: f64 = (0..4).filter(|&k| on(k as u8)).map(|k| full[k]).sum();
        for k in 0..4 {
            let expected_off = !on(k as u8);
            if expected_off != got[k].is_nan() || (!expected_off && (got[k] - full[k]).abs() > 1e-12) {
                return Ok((false, format!("toggle mask {mask:04b}: term {k} is {}", got[k])));
            }
        }
        if (got[4] - want).abs() > 1e-12 {
            return Ok((false, format!("toggle mask {mask:04b}: total {} vs {want}", got[4])));
        }
    }
    Ok((true, format!("copy gives {same:e}; 16 toggle masks sum their own terms")))
}

fn aggregation() -> Outcome {
    let all = combine_split_means((58.13, 8), (63.44, 16)).map_err(err)?;
    Ok(((all - 61.67).abs() <= 0.01, format!("(58.13 x 8, 63.44 x 16) -> {all:.4}")))
}

fn phantom_consistency() -> Outcome {
    let spec = PhantomSpec::default_kidney(64);
    let n = spec.layout.len();
    let (mut pairs, mut bad) = (0, 0);
    for seed in 0..50 {
        let scene = spec.generate_scene(seed).map_err(err)?;
        for a in 0..n {
            for b in 0..n {
                if a == b {
                    continue;
                }
                let declared = spec.declared_relation(a, b).map_err(err)?;
                if declared == RelationKind::Unrelated {
                    continue;
                }
                pairs += 1;
                if observe_relation(&scene.masks[&a], &scene.masks[&b]).map_err(err)? != declared {
                    bad += 1;
                }
            }
        }
    }
    Ok((bad == 0 && pairs > 0, format!("{} of {pairs} declared pairs match over 50 scenes", pairs - bad)))
}

fn oracle_equivalence() -> Outcome {
    let mut rng = common::rng(9);
    let mut worst = [0f64; 4];
    for i in 0..100 {
        let a = common::uniform(&mut rng, 64);
        let b = common::uniform(&mut rng, 64);
        let mut g = Graph::new();
        let (va, vb) = (g.constant(Tensor::new(&[8, 8], a.clone())), g.constant(Tensor::new(&[8, 8], b.clone())));
        let d = soft_dice(&mut g, va, vb).map_err(err)?;
        worst[0] = worst[0].max((g.value(d).item() - common::soft_dice_ref(&a, &b)).abs());

        let logits = common::normal_ish(&mut rng, 2 * 2 * 64, 3.0);
        let labels = common::binary(&mut rng, 2 * 64, 0.3);
        let z = g.constant(Tensor::new(&[2, 2, 8, 8], logits.clone()));
        let y = g.constant(Tensor::new(&[2, 8, 8], labels.clone()));
        let s = supervised_loss(&mut g, z, y).map_err(err)?;
        worst[1] = worst[1].max((g.value(s).item() - common::supervised_ref(&logits, &labels, 2, 64)).abs());

        let shape = [3, 8, 8];
        let axis = i % 3;
        let t = common::normal_ish(&mut rng, 192, 2.0);
        let st = common::normal_ish(&mut rng, 192, 2.0);
        let (vt, vs) = (g.constant(Tensor::new(&shape, t.clone())), g.constant(Tensor::new(&shape, st.clone())));
        let c = consistency_loss(&mut g, vt, vs, axis).map_err(err)?;
        worst[2] = worst[2].max((g.value(c).item() - common::consistency_ref(&t, &st, &shape, axis)).abs());

        let density = [0.0, 0.1, 0.5, 0.9][i % 4];
        let pred: Vec<bool> = common::binary(&mut rng, 64, density).iter().map(|&v| v == 1.0).collect();
        let label: Vec<bool> = common::binary(&mut rng, 64, density).iter().map(|&v| v == 1.0).collect();
        worst[3] = worst[3].max((hard_dice(&pred, &label).map_err(err)? - common::hard_dice_ref(&pred, &label)).abs());
    }
    Ok((
        worst.iter().all(|&w| w <= 1e-6),
        format!("max |diff| soft {:.1e}, supervised {:.1e}, consistency {:.1e}, hard {:.1e}", worst[0], worst[1], worst[2], worst[3]),
    ))
}

fn full_path_gradient() -> Outcome {
    let cfg = ModelConfig { backbone: BackboneConfig { canvas: 16, ..BackboneConfig::default() }, ..ModelConfig::default() };
    let spec = PhantomSpec::default_kidney(16);
    let mut model = Model::new(cfg).map_err(err)?;
    model.register_classes(step_matrix(&spec, 1).map_err(err)?.new_classes()).map_err(err)?;
    let mut rng = common::rng(10);
    let images = Tensor::new(&[2, 3, 16, 16], common::uniform(&mut rng, 2 * 3 * 256));
    let labels = Tensor::new(&[2, 16, 16], common::binary(&mut rng, 2 * 256, 0.3));
    let (classes, scales) = ([1usize, 4], [0usize, 1]);
    let loss_at = |m: &Model| -> f64 {
        let mut ctx = Ctx::new(&m.store, true, 7);
        let x = ctx.g.constant(images.clone());
        let y = ctx.g.constant(labels.clone());
        let f = m.forward(&mut ctx, x, &classes, &scales).expect("forward");
        let l = supervised_loss(&mut ctx.g, f.logits, y).expect("loss");
        ctx.g.value(l).item()
    };
    let grads = {
        let mut ctx = Ctx::new(&model.store, true, 7);
        let x = ctx.g.constant(images.clone());
        let y = ctx.g.constant(labels.clone());
        let f = model.forward(&mut ctx, x, &classes, &scales).map_err(err)?;
        let l = supervised_loss(&mut ctx.g, f.logits, y).map_err(err)?;
        ctx.g.backward(l)
    };
    // Probing along the unit gradient (plus its largest coordinates) keeps
    // the finite-difference signal well above round-off.
    let h = 1e-6;
    let (mut checked, mut worst, mut worst_name) = (0, 0f64, String::new());
    for id in model.store.ids().collect::<Vec<_>>() {
        if model.store.entry(id).is_buffer {
            continue;
        }
        let Some(analytic) = grads.param(id) else {
            return Ok((false, format!("{} received no gradient", model.store.name(id))));
        };
        let norm = analytic.data().iter().map(|g| g * g).sum::<f64>().sqrt();
        let mut probes: Vec<Vec<f64>> = Vec::new();
        if norm > 0.0 {
            probes.push(analytic.data().iter().map(|g| g / norm).collect());
        } else {
            probes.push(common::normal_ish(&mut rng, analytic.numel(), 1.0));
        }
        let mut order: Vec<usize> = (0..analytic.numel()).collect();
        order.sort_by(|&a, &b| analytic.data()[b].abs().total_cmp(&analytic.data()[a].abs()));
        for &k in order.iter().take(2) {
            let mut e = vec![0.0; analytic.numel()];
            e[k] = 1.0;
            probes.push(e);
        }
        for dir in probes {
            let along: f64 = analytic.data().iter().zip(&dir).map(|(g, d)| g * d).sum();
            let shifted = |sign: f64| {
                let mut m = model.clone();
                for (v, d) in m.store.get_mut(id).data_mut().iter_mut().zip(&dir) {
                    *v += sign * h * d;
                }
                loss_at(&m)
            };
            let numeric = (shifted(1.0) - shifted(-1.0)) / (2.0 * h);
            let rel = (along - numeric).abs() / along.abs().max(numeric.abs()).max(1e-7);
            checked += 1;
            if rel > worst {
                worst = rel;
                worst_name = model.store.name(id).to_string();
            }
        }
    }
    Ok((worst <= 1e-3, format!("{checked} probes over every parameter tensor, worst relative error {worst:.1e} ({worst_name})")))
}

/// Shared state of the benchmark runs behind criteria 6 and 7.
struct Bench {
    base: TrainConfig,
    scenes: SceneCounts,
    canvas: usize,
    seeds: BTreeMap<u64, SeedState>,
}

struct SeedState {
    _dir: tempfile::TempDir,
    step1: StepData,
    step2: StepData,
    teacher: Model,
    test: Vec<LabeledSample>,
    /// `(old, new, all)` mean Dice per method.
    results: BTreeMap<&'static str, (f64, f64, f64)>,
}

impl Bench {
    fn from_fixture() -> Result<Self, String> {
        let v: Value = serde_json::from_str(PILOT).map_err(err)?;
        let b = &v["benchmark"];
        let t = &v["train"];
        let num = |x: &Value| x.as_f64().ok_or_else(|| format!("fixture field {x} is not a number"));
        let scenes = SceneCounts {
            train: num(&b["scenes"]["train"])? as usize,
            val: num(&b["scenes"]["val"])? as usize,
            test: num(&b["scenes"]["test"])? as usize,
        };
        let canvas = num(&b["canvas"])? as usize;
        let mut base = TrainConfig {
            phase1_epochs: num(&t["phase1_epochs"])? as usize,
            epochs_per_step: Some(num(&t["epochs_per_step"])? as usize),
            old_prompts_per_image: Some(num(&t["old_prompts_per_image"])? as usize),
            subset_mode: serde_json::from_value(t["subset_mode"].clone()).map_err(err)?,
            lambda_anatomy: num(&t["lambda_anatomy"])?,
            lambda_semi: num(&t["lambda_semi"])?,
            ..TrainConfig::default()
        };
        base.model.backbone.canvas = canvas;
        Ok(Self { base, scenes, canvas, seeds: BTreeMap::new() })
    }

    fn config(&self, seed: u64) -> TrainConfig {
        TrainConfig { seed, ..self.base.clone() }
    }

    fn state(&mut self, seed: u64) -> Result<&mut SeedState, String> {
        if !self.seeds.contains_key(&seed) {
            let dir = tempfile::tempdir().map_err(err)?;
            let gen = GenConfig { spec: PhantomSpec::default_kidney(self.canvas), seed, scenes: self.scenes };
            generate_dataset(&gen, dir.path()).map_err(err)?;
            let ds = Dataset::open(dir.path()).map_err(err)?;
            let step1 = ds.load_step(1).map_err(err)?;
            let step2 = ds.load_step(2).map_err(err)?;
            let (teacher, _) =
                train_phase1(&self.config(seed), step1.matrix.new_classes(), &step1.train, &step1.val, &mut Vec::new()).map_err(err)?;
            let mut test = step1.test.clone();
            test.extend(step2.test.iter().cloned());
            self.seeds.insert(seed, SeedState { _dir: dir, step1, step2, teacher, test, results: BTreeMap::new() });
        }
        Ok(self.seeds.get_mut(&seed).expect("inserted"))
    }

    fn summary(model: &Model, test: &[LabeledSample], name: &str) -> Result<(f64, f64, f64), String> {
        let dice = dice_per_class(model, test).map_err(err)?;
        let r = DiceReport::build(name, 2, &model.registry, &dice).map_err(err)?;
        Ok((r.summary.old_mean.unwrap_or(f64::NAN), r.summary.new_mean.unwrap_or(f64::NAN), r.summary.all_mean))
    }

    /// Old/new/all Dice of `method` on `seed`: "irs", "noanat", "finetune"
    /// or "joint".
    fn run(&mut self, seed: u64, method: &'static str) -> Result<(f64, f64, f64), String> {
        let mut cfg = self.config(seed);
        let st = self.state(seed)?;
        if let Some(r) = st.results.get(method) {
            return Ok(*r);
        }
        let model = match method {
            "joint" => {
                let mut train = st.step1.train.clone();
                train.extend(st.step2.train.iter().cloned());
                let mut val = st.step1.val.clone();
                val.extend(st.step2.val.iter().cloned());
                let mut classes = st.step1.matrix.new_classes().to_vec();
                classes.extend(st.step2.matrix.new_classes().iter().cloned());
                train_joint(&cfg, &classes, &train, &val, &mut Vec::new()).map_err(err)?.0
            }
            _ => {
                if method != "irs" {
                    cfg.lambda_anatomy = 0.0;
                }
                if method == "finetune" {
                    cfg.lambda_semi = 0.0;
                }
                train_increment(&st.teacher, &cfg, &st.step2.matrix, &st.step2.train, &mut Vec::new()).map_err(err)?.0
            }
        };
        let r = Self::summary(&model, &st.test, method)?;
        st.results.insert(method, r);
        Ok(r)
    }
}

fn thresholds() -> Result<Value, String> {
    let v: Value = serde_json::from_str(PILOT).map_err(err)?;
    Ok(v["thresholds"].clone())
}

fn forgetting_mitigation(bench: &mut Bench) -> Outcome {
    let th = thresholds()?;
    let gain = th["old_gain_over_finetune"].as_f64().ok_or("fixture threshold")?;
    let gap = th["max_gap_to_joint"].as_f64().ok_or("fixture threshold")?;
    let ft = bench.run(0, "finetune")?;
    let irs = bench.run(0, "irs")?;
    let joint = bench.run(0, "joint")?;
    let ok = irs.0 >= ft.0 + gain && (joint.2 - irs.2).abs() <= gap;
    Ok((
        ok,
        format!(
            "old: irs {:.1} vs finetune {:.1} (need +{gain}); all: irs {:.1} vs joint {:.1} (need within {gap}); irs new {:.1}",
            irs.0, ft.0, irs.2, joint.2, irs.1
        ),
    ))
}

fn ablation_ordering(bench: &mut Bench) -> Outcome {
    let th = thresholds()?;
    let need = th["ordering_min_seeds"].as_u64().ok_or("fixture threshold")? as usize;
    let seeds: Vec<u64> = th["ordering_seeds"].as_array().ok_or("fixture seeds")?.iter().filter_map(Value::as_u64).collect();
    let mut held = 0;
    let mut rows = Vec::new();
    for &seed in &seeds {
        let irs = bench.run(seed, "irs")?.0;
        let noanat = bench.run(seed, "noanat")?.0;
        let ft = bench.run(seed, "finetune")?.0;
        let ok = irs >= noanat && noanat >= ft;
        held += usize::from(ok);
        rows.push(format!("s{seed} {irs:.1}/{noanat:.1}/{ft:.1}{}", if ok { "" } else { "x" }));
        // Free the seed once its three runs are in.
        if seed != 0 {
            bench.seeds.remove(&seed);
        }
    }
    Ok((held >= need, format!("ordering holds on {held} of {} seeds (need {need}); old Dice irs/noanat/finetune: {}", seeds.len(), rows.join(", "))))
}

fn determinism() -> Outcome {
    let root = tempfile::tempdir().map_err(err)?;
    let data = root.path().join("data");
    cmd_gen_data(&GenDataArgs {
        spec: None,
        canvas: 64,
        seed: 0,
        out: data.clone(),
        steps: None,
        order: None,
        reverse: false,
        scenes: SceneCounts { train: 4, val: 2, test: 2 },
        no_clobber: false,
    })
    .map_err(err)?;
    let mut config = Bench::from_fixture()?.config(0);
    config.phase1_epochs = 3;
    config.epochs_per_step = Some(2);
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let out = root.path().join(run);
        cmd_train(&TrainArgs {
            data: data.clone(),
            out: out.clone(),
            method: Method::Irs,
            no_anatomy: false,
            preset: None,
            config: config.clone(),
            run_id: Some("determinism".into()),
            no_clobber: false,
        })
        .map_err(err)?;
        let losses = std::fs::read(out.join(LOSSES_FILE)).map_err(err)?;
        let reports = evaluate_run(&out, None).map_err(err)?;
        let last = reports.last().ok_or("no evaluation reports")?;
        let per_image = last.per_image(None);
        outputs.push((losses, per_image, last.summary.all_mean));
    }
    let (a, b) = (&outputs[0], &outputs[1]);
    let lines = a.0.iter().filter(|&&c| c == b'\n').count();
    let dice_diff = a.1.iter().zip(&b.1).map(|(x, y)| (x - y).abs()).fold((a.2 - b.2).abs(), f64::max);
    let ok = a.0 == b.0 && a.1.len() == b.1.len() && dice_diff <= 1e-6;
    Ok((ok, format!("{lines} loss records, streams identical: {}; max Dice difference {dice_diff:e}", a.0 == b.0)))
}

fn main() {
    let filter: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: usize| filter.is_empty() || filter.contains(&n);
    let mut bench = match Bench::from_fixture() {
        Ok(b) => b,
        Err(e) => {
            println!("cannot read the pilot fixture: {e}");
            std::process::exit(1);
        }
    };
    let mut criteria: Vec<(usize, &str, Box<dyn FnMut(&mut Bench) -> Outcome>)> = vec![
        (1, "dynamic-head arithmetic", Box::new(|_| head_arithmetic())),
        (2, "anatomy-loss invariants", Box::new(|_| anatomy_invariants())),
        (3, "distillation identity", Box::new(|_| distillation_identity())),
        (4, "aggregation regression", Box::new(|_| aggregation())),
        (5, "phantom consistency", Box::new(|_| phantom_consistency())),
        (6, "forgetting mitigation", Box::new(forgetting_mitigation)),
        (7, "ablation ordering", Box::new(ablation_ordering)),
        (8, "determinism", Box::new(|_| determinism())),
        (9, "oracle equivalence", Box::new(|_| oracle_equivalence())),
        (10, "full-path gradient", Box::new(|_| full_path_gradient())),
    ];
    let mut failed = 0;
    let mut ran = 0;
    for (n, name, f) in criteria.iter_mut() {
        if !wanted(*n) {
            continue;
        }
        let started = Instant::now();
        let (passed, detail) = match f(&mut bench) {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        ran += 1;
        failed += usize::from(!passed);
        println!("[{}] {n:>2} {name}: {detail} ({:.1}s)", if passed { "PASS" } else { "FAIL" }, started.elapsed().as_secs_f64());
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 && std::env::var("IRS_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
