use super::*;
use crate::diff::fd_check;
use crate::oracle::{gen_dataset, noiseless_received, NoisePolicy, Region, SamplingPolicy};
use crate::pln::{pln_init, InputNormalization, PlnArchitecture};
use crate::signal::make_pulse;

fn pulse() -> AnalyticPulse {
    make_pulse(750.0, 500.0, 0.05).unwrap()
}

fn untrained(arch: &PlnArchitecture, seed: u64) -> ModelParams {
    let norm = InputNormalization::from_region(&Region::default_training(), 120.0);
    ModelParams {
        pln: pln_init(arch, norm, 1000.0, seed).unwrap(),
        sound_speed: 1500.0,
        adapt_sound_speed: false,
        receiver_depth: 120.0,
        pulse: pulse(),
    }
}

fn small_dataset(n: usize, seed: u64) -> Dataset {
    let grid = TimeGrid::new(4000.0, 2.0).unwrap();
    gen_dataset(
        &Environment::reference(),
        &Region::default_training(),
        n,
        &pulse(),
        &grid,
        NoisePolicy::Noiseless,
        SamplingPolicy::Uniform,
        seed,
    )
    .unwrap()
}

#[test]
fn alpha_tau_examples() {
    let (a, t) = alpha_tau(1500.0, 1.0, 1500.0).unwrap();
    assert!((a - 1.0 / 1500.0).abs() < 1e-18 && (t - 1.0).abs() < 1e-15);
    let (a, t) = alpha_tau(100.0, -1.0, 1500.0).unwrap();
    assert!((a + 0.01).abs() < 1e-18 && (t - 100.0 / 1500.0).abs() < 1e-15);
    let direct = crate::oracle::path_length(&Environment::reference(), &SourceLocation::reference(), PathSpec::DIRECT).unwrap();
    let (_, t) = alpha_tau(direct, 1.0, 1500.0).unwrap();
    assert!((t - 0.412095).abs() < 5e-7, "{t}");
    assert!(alpha_tau(0.0, 1.0, 1500.0).is_err());
    assert!(alpha_tau(-3.0, 1.0, 1500.0).is_err());
}

#[test]
fn analytic_propagator_reproduces_oracle_exactly() {
    let env = Environment::reference();
    let grid = TimeGrid::new(4000.0, 2.0).unwrap();
    for p in [SourceLocation::reference(), SourceLocation::new(333.0, 91.0)] {
        let prop = Propagator::Analytic { env, pulse: pulse() };
        let a = propagator_output(&prop, &p, &grid).unwrap();
        let b = noiseless_received(&env, &p, &pulse(), &grid).unwrap();
        assert_eq!(a.values, b.values);
    }
}

#[test]
fn gradient_vanishes_at_truth_for_noiseless_data() {
    let env = Environment::reference();
    let grid = TimeGrid::new(4000.0, 2.0).unwrap();
    let p = SourceLocation::reference();
    let r = noiseless_received(&env, &p, &pulse(), &grid).unwrap();
    let prop = Propagator::Analytic { env, pulse: pulse() };
    let mut tape = Tape::new();
    let x = tape.input_scalar(p.x);
    let z = tape.input_scalar(p.z);
    let l = prop.record_data_term(&mut tape, None, x, z, &r);
    let g = tape.backward(l);
    let scale: f64 = r.values.iter().map(|v| v * v).sum::<f64>() * grid.dt();
    let norm = g.get(x)[0].hypot(g.get(z)[0]);
    assert!(tape.scalar(l) < 1e-20 * scale);
    assert!(norm <= 1e-6 * scale, "{norm} vs {scale}");
}

#[test]
fn train_loss_zero_when_model_matches() {
    // A dataset whose signals are the model's own outputs.
    let m = untrained(&PlnArchitecture::reduced(), 3);
    let mut ds = small_dataset(4, 1);
    for (p, r) in ds.samples.iter_mut() {
        *r = model_output(&m, p, &ds.grid).unwrap();
    }
    assert!(train_loss(&m, &ds).unwrap().abs() < 1e-30);
}

#[test]
fn train_loss_matches_hand_riemann_sum() {
    // 8-sample grid; a model far from the data means f is zero on the grid.
    let grid = TimeGrid::new(4.0, 2.0).unwrap();
    assert_eq!(grid.n_samples, 8);
    let m = untrained(&PlnArchitecture::reduced(), 0);
    let mut ds = small_dataset(1, 0);
    ds.grid = grid;
    let vals = vec![0.5, -1.0, 2.0, 0.0, 0.25, -0.75, 1.5, 3.0];
    ds.samples[0].1 = SampledSignal::new(grid, vals).unwrap();
    let f = model_output(&m, &ds.samples[0].0, &grid).unwrap();
    let hand: f64 = ds.samples[0]
        .1
        .values
        .iter()
        .zip(&f.values)
        .map(|(r, f)| (r - f) * (r - f))
        .sum::<f64>()
        * 0.25;
    let got = train_loss(&m, &ds).unwrap();
    assert!((got - hand).abs() <= 1e-14 * hand, "{got} vs {hand}");
}

#[test]
fn train_loss_is_order_invariant() {
    let m = untrained(&PlnArchitecture::reduced(), 5);
    let ds = small_dataset(6, 2);
    let mut rev = ds.clone();
    rev.samples.reverse();
    let a = train_loss(&m, &ds).unwrap();
    let b = train_loss(&m, &rev).unwrap();
    assert!((a - b).abs() <= 1e-14 * a);
}

#[test]
fn train_loss_rejects_mixed_grids() {
    let m = untrained(&PlnArchitecture::reduced(), 5);
    let mut ds = small_dataset(2, 2);
    ds.samples[1].1 = SampledSignal::zeros(TimeGrid::new(2000.0, 2.0).unwrap());
    assert!(matches!(train_loss(&m, &ds), Err(Error::GridMismatch(_))));
}

/// Model whose arrivals overlap the data so every segment gets gradient.
fn near_truth_state(seed: u64) -> (ModelParams, Dataset) {
    let ds = small_dataset(3, seed);
    let mut m = untrained(&PlnArchitecture::reduced(), seed);
    m.adapt_sound_speed = true;
    // shift the output bias so lengths land near the true ranges
    let (off, len) = m.pln.weights.layout.find("pln.layer1.bias").unwrap();
    assert_eq!(len, 1);
    let p = ds.samples[0].0;
    let target = crate::oracle::path_length(&ds.env, &p, PathSpec::DIRECT).unwrap();
    let now = m.lengths(&p)[0];
    let inv = |y: f64| (y.exp() - 1.0).ln();
    let cur = inv(now / m.pln.length_scale);
    let want = inv(target / m.pln.length_scale);
    m.pln.weights.values[off] += want - cur + 1e-4;
    (m, ds)
}

#[test]
fn train_loss_gradient_matches_differences() {
    for seed in 0..5 {
        let (m, ds) = near_truth_state(seed);
        let samples: Vec<_> = ds.samples.iter().collect();
        let f = |t: &mut Tape, v: &[Var]| Ok(record_train_loss(t, &m, v, &samples));
        let rep = fd_check(f, &m.adapt_vector(), 1e-6, 0, seed).unwrap();
        let worst = rep
            .checked
            .iter()
            .map(|&i| (i, crate::diff::rel_error(rep.analytic.values[i], rep.fd.values[i])))
            .filter(|(i, _)| rep.analytic.values[*i].abs() > 1e-9 * rep.analytic.norm_inf())
            .fold(0.0f64, |a, (_, e)| a.max(e));
        assert!(worst < 1e-5, "seed {seed}: {worst}");
    }
}

#[test]
fn zero_rate_leaves_parameters_unchanged() {
    let ds = small_dataset(8, 4);
    let cfg = TrainConfig {
        epochs: 1,
        learning_rate: 0.0,
        final_learning_rate: 0.0,
        optimizer: Optimizer::Adam,
        stages: Vec::new(),
        init_candidates: 1,
        ..TrainConfig::default()
    };
    let arch = PlnArchitecture::reduced();
    let (ck, _) = pretrain(&ds, &arch, &cfg).unwrap();
    let norm = InputNormalization::from_region(&ds.region, 120.0);
    let init = pln_init(&arch, norm, cfg.length_scale, cfg.seed).unwrap();
    assert_eq!(ck.model.pln.weights, init.weights);
}

#[test]
fn pretraining_is_deterministic() {
    let ds = small_dataset(8, 4);
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 4,
        stages: vec![ContinuationStage {
            kind: StageKind::Envelope,
            optimizer: Optimizer::Adam,
            width: 0.02,
            epochs: 2,
            learning_rate: 1e-2,
        }, ContinuationStage {
            kind: StageKind::Lowpass,
            optimizer: Optimizer::Lbfgs,
            width: 0.002,
            epochs: 1,
            learning_rate: 1e-3,
        }, ContinuationStage {
            kind: StageKind::Lowpass,
            optimizer: Optimizer::GaussNewton,
            width: 0.001,
            epochs: 2,
            learning_rate: 0.0,
        }],
        init_candidates: 3,
        ..TrainConfig::default()
    };
    let arch = PlnArchitecture::reduced();
    let (a, la) = pretrain(&ds, &arch, &cfg).unwrap();
    let (b, lb) = pretrain(&ds, &arch, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(la, lb);
}
