use fedx_core::data::{Batch, Matrix, TaskKind};
use fedx_core::inversion::*;
use fedx_core::privacy::DpConfig;
use fedx_core::tensor::{Activation, ModelSpec, ModelState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mlp(d: usize, hidden: usize, task: TaskKind, seed: u64) -> ModelState {
    let spec = ModelSpec::plain(vec![d, hidden, 1], Activation::Relu, task).unwrap();
    ModelState::init(&spec, seed).unwrap()
}

fn single(x: &[f64], y: f64) -> Batch {
    Batch::new(Matrix::from_vec(1, x.len(), x.to_vec()).unwrap(), vec![y]).unwrap()
}

fn no_penalty() -> AttackConfig {
    AttackConfig { tv_weight: 0.0, bn_weight: 0.0, ..Default::default() }
}

#[test]
fn true_input_matches_its_own_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x: Vec<f64> = (0..16).map(|_| rng.random()).collect();
    let state = mlp(16, 8, TaskKind::Regression, 2);
    let cap = capture_gradient(&state, &single(&x, 1.5), None, 0).unwrap();
    let obj = attack_objective(&Matrix::from_vec(4, 4, x).unwrap(), &cap, &no_penalty()).unwrap();
    assert!(obj.abs() < 1e-12, "{obj}");
}

#[test]
fn objective_ignores_positive_rescaling_of_the_capture() {
    let state = mlp(9, 5, TaskKind::BinaryClassification, 4);
    let cap = capture_gradient(&state, &single(&[0.2; 9], 1.0), None, 0).unwrap();
    let mut scaled = cap.clone();
    scaled.grad.values.iter_mut().for_each(|v| *v *= 37.5);
    let cand = Matrix::from_vec(3, 3, vec![0.1, 0.9, 0.3, 0.5, 0.5, 0.2, 0.7, 0.4, 0.8]).unwrap();
    let a = attack_objective(&cand, &cap, &no_penalty()).unwrap();
    let b = attack_objective(&cand, &scaled, &no_penalty()).unwrap();
    assert!((a - b).abs() < 1e-12);
}

#[test]
fn total_variation_examples() {
    assert_eq!(total_variation(&Matrix::from_rows(&[vec![0.0, 1.0], vec![0.0, 1.0]]).unwrap()), 2.0);
    assert_eq!(total_variation(&Matrix::from_rows(&vec![vec![3.0; 3]; 3]).unwrap()), 0.0);
    let img = Matrix::from_rows(&[vec![0.1, 0.8, 0.3], vec![0.5, 0.2, 0.9]]).unwrap();
    let scaled = Matrix::from_vec(2, 3, img.as_slice().iter().map(|v| -2.5 * v).collect()).unwrap();
    assert!((total_variation(&scaled) - 2.5 * total_variation(&img)).abs() < 1e-12);
}

#[test]
fn smoother_candidate_scores_lower_under_tv() {
    // With zero weights the gradient is (delta x, delta), so the cosine term
    // only sees the sum and norm of x, which a permutation keeps.
    let spec = ModelSpec::plain(vec![4, 1], Activation::Identity, TaskKind::Regression).unwrap();
    let mut state = ModelState::init(&spec, 0).unwrap();
    state.params.values.iter_mut().for_each(|v| *v = 0.0);
    let cap = capture_gradient(&state, &single(&[0.5; 4], 1.0), None, 0).unwrap();
    let rough = Matrix::from_vec(2, 2, vec![0.1, 0.9, 0.8, 0.2]).unwrap();
    let smooth = Matrix::from_vec(2, 2, vec![0.1, 0.2, 0.9, 0.8]).unwrap();
    let plain = |m: &Matrix| attack_objective(m, &cap, &no_penalty()).unwrap();
    assert!((plain(&rough) - plain(&smooth)).abs() < 1e-12);
    let cfg = AttackConfig { tv_weight: 0.1, bn_weight: 0.0, ..Default::default() };
    assert!(attack_objective(&smooth, &cap, &cfg).unwrap() < attack_objective(&rough, &cap, &cfg).unwrap());
}

#[test]
fn finite_difference_gradient_passes_a_secant_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let state = mlp(16, 6, TaskKind::Regression, 3);
    let x: Vec<f64> = (0..16).map(|_| rng.random()).collect();
    let cap = capture_gradient(&state, &single(&x, -2.0), None, 0).unwrap();
    let cfg = AttackConfig { tv_weight: 1e-3, gradient: GradientRoute::FiniteDifference, ..Default::default() };
    for _ in 0..5 {
        let cand = Matrix::from_vec(4, 4, (0..16).map(|_| rng.random()).collect()).unwrap();
        let (f0, g) = objective_gradient(&cand, &cap, &cfg).unwrap();
        let dir: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let t = 1e-4;
        let moved = Matrix::from_vec(4, 4, cand.as_slice().iter().zip(&dir).map(|(a, d)| a + t * d).collect()).unwrap();
        let back = Matrix::from_vec(4, 4, cand.as_slice().iter().zip(&dir).map(|(a, d)| a - t * d).collect()).unwrap();
        let secant = (attack_objective(&moved, &cap, &cfg).unwrap() - attack_objective(&back, &cap, &cfg).unwrap()) / (2.0 * t);
        let predicted: f64 = g.iter().zip(&dir).map(|(a, b)| a * b).sum();
        let rel = (secant - predicted).abs() / secant.abs().max(predicted.abs()).max(1e-8);
        assert!(rel < 1e-3, "secant {secant} vs predicted {predicted} at f = {f0}");
    }
}

#[test]
fn closed_form_and_finite_difference_routes_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for (task, y) in [(TaskKind::Regression, 3.0), (TaskKind::BinaryClassification, 1.0)] {
        let state = mlp(16, 12, task, 5);
        let x: Vec<f64> = (0..16).map(|_| rng.random()).collect();
        let cap = capture_gradient(&state, &single(&x, y), None, 0).unwrap();
        assert!(supports_closed_form(&cap));
        let cfg = AttackConfig { tv_weight: 1e-2, ..Default::default() };
        for _ in 0..5 {
            let cand = Matrix::from_vec(4, 4, (0..16).map(|_| rng.random()).collect()).unwrap();
            let (fa, ga) = input_gradient(&cand, &cap, &cfg).unwrap().unwrap();
            let (ff, gf) = objective_gradient(&cand, &cap, &cfg).unwrap();
            assert_eq!(fa, ff);
            let scale = ga.iter().map(|v| v.abs()).fold(0.0, f64::max);
            let err = ga.iter().zip(&gf).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-6 * scale.max(1.0), "{err} vs scale {scale}");
        }
    }
}

#[test]
fn both_routes_reconstruct_the_same_image() {
    let m = SweepManifest { seeds: vec![0], ..Default::default() };
    let s = &scenarios(&m)[0];
    let auto = run_scenario(&m, s, 0).unwrap();
    let mut fd = m.clone();
    fd.attack.gradient = GradientRoute::FiniteDifference;
    fd.attack.steps = 40;
    let mut short = m.clone();
    short.attack.steps = 40;
    let a = run_scenario(&short, s, 0).unwrap();
    let b = run_scenario(&fd, s, 0).unwrap();
    for (x, y) in a.reconstruction.objective_trace.iter().zip(&b.reconstruction.objective_trace) {
        assert!((x - y).abs() < 1e-4 * x.abs().max(1e-3), "{x} vs {y}");
    }
    assert!((a.row.psnr_db - b.row.psnr_db).abs() < 0.1);
    assert!(auto.row.psnr_db > 15.0);
}

#[test]
fn one_step_attack_has_one_trace_entry() {
    let state = mlp(4, 3, TaskKind::Regression, 1);
    let cap = capture_gradient(&state, &single(&[0.1, 0.2, 0.3, 0.4], 1.0), None, 0).unwrap();
    let rec = run_attack(&cap, None, &AttackConfig { steps: 1, ..Default::default() }).unwrap();
    assert_eq!(rec.objective_trace.len(), 1);
    assert_eq!((rec.image.rows(), rec.image.cols()), (2, 2));
    assert!(rec.psnr_db.is_none());
}

#[test]
fn duplicated_batch_captures_the_single_sample_gradient() {
    let state = mlp(3, 4, TaskKind::BinaryClassification, 6);
    let x = [0.3, -0.2, 0.9];
    let one = capture_gradient(&state, &single(&x, 1.0), None, 0).unwrap();
    let two = capture_gradient(
        &state,
        &Batch::new(Matrix::from_rows(&[x.to_vec(), x.to_vec()]).unwrap(), vec![1.0, 1.0]).unwrap(),
        None,
        0,
    )
    .unwrap();
    for (a, b) in one.grad.values.iter().zip(&two.grad.values) {
        assert!((a - b).abs() < 1e-15);
    }
    assert_eq!(two.batch_size, 2);
}

#[test]
fn dp_capture_carries_laplace_noise_of_the_configured_scale() {
    let state = mlp(16, 32, TaskKind::Regression, 2);
    let cap = capture_gradient(&state, &single(&[0.5; 16], 1.0), Some(&DpConfig::laplace(0.01, 1.0)), 3).unwrap();
    let clean = capture_gradient(&state, &single(&[0.5; 16], 1.0), None, 3).unwrap();
    let clipped = fedx_core::privacy::clip_update(&clean.grad, 1.0);
    let noise: Vec<f64> = cap.grad.values.iter().zip(&clipped.values).map(|(a, b)| a - b).collect();
    let mean_abs = noise.iter().map(|v| v.abs()).sum::<f64>() / noise.len() as f64;
    // E|Laplace(0, b)| = b
    assert!((mean_abs - 100.0).abs() < 10.0, "{mean_abs}");
    assert!(cap.dp_applied.is_some());
}

#[test]
fn first_layer_recovery_is_exact_without_noise() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for k in 0..50 {
        let d = rng.random_range(1..=20);
        let task = if k % 2 == 0 { TaskKind::Regression } else { TaskKind::BinaryClassification };
        let state = mlp(d, rng.random_range(1..=16), task, k);
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = if task == TaskKind::Regression { rng.random_range(-3.0..3.0) } else { (k % 4 / 2) as f64 };
        let cap = capture_gradient(&state, &single(&x, y), None, 0).unwrap();
        match recover_first_layer(&cap) {
            Ok(rec) => {
                let err = rec.as_slice().iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                assert!(err < 1e-8, "model {k}: {err}");
            }
            Err(e) => assert!(cap.grad.get("b1").unwrap().iter().all(|v| *v == 0.0), "{e}"),
        }
    }
}

#[test]
fn hand_chain_rule_recovery() {
    // One linear hidden unit with weight 1 feeding a unit output weight:
    // delta at the hidden layer is 2 * (out - y).
    let spec = ModelSpec::plain(vec![2, 1, 1], Activation::Identity, TaskKind::Regression).unwrap();
    let mut state = ModelState::init(&spec, 0).unwrap();
    state.params.values = vec![0.0, 0.0, 0.0, 1.0, 0.0];
    let cap = capture_gradient(&state, &single(&[0.3, 0.7], -1.0), None, 0).unwrap();
    assert_eq!(cap.grad.get("b1").unwrap(), &[2.0]);
    let w = cap.grad.get("W1").unwrap();
    assert!((w[0] - 0.6).abs() < 1e-15 && (w[1] - 1.4).abs() < 1e-15);
    let rec = recover_first_layer(&cap).unwrap();
    assert!((rec.as_slice()[0] - 0.3).abs() < 1e-15 && (rec.as_slice()[1] - 0.7).abs() < 1e-15);
}

#[test]
fn dp_recovery_error_exceeds_the_noise_floor() {
    // x_rec_j - x_j = (n_Wj - x_j n_b) / (db + n_b); averaged over captures the
    // error times |db + n_b| sits at the Laplace mean absolute value c/eps,
    // far above zero, for each coordinate.
    let dp = DpConfig::laplace(0.1, 1.0);
    let state = mlp(8, 4, TaskKind::Regression, 3);
    let x = vec![0.25; 8];
    let mut scaled_err = 0.0;
    let trials = 200;
    for t in 0..trials {
        let cap = capture_gradient(&state, &single(&x, 0.5), Some(&dp), t).unwrap();
        let rec = recover_first_layer(&cap).unwrap();
        let gb = cap.grad.get("b1").unwrap();
        let db = gb.iter().copied().max_by(|a, b| a.abs().total_cmp(&b.abs())).unwrap();
        scaled_err += (rec.as_slice()[0] - x[0]).abs() * db.abs();
    }
    scaled_err /= trials as f64;
    assert!(scaled_err >= 0.9 * dp.noise_scale(), "{scaled_err}");
}

#[test]
fn grid_search_ranks_by_final_objective() {
    let state = mlp(16, 8, TaskKind::Regression, 9);
    let x: Vec<f64> = (0..16).map(|i| (i as f64) / 16.0).collect();
    let cap = capture_gradient(&state, &single(&x, 2.0), None, 0).unwrap();
    let grid = AttackGrid {
        inits: vec![AttackInit::Gaussian, AttackInit::Uniform],
        tv_weights: vec![0.0, 1e-3],
        bn_weights: vec![0.0],
        optimizers: vec![AttackOptimizer::Adam, AttackOptimizer::Adamw],
    };
    let base = AttackConfig { steps: 30, ..Default::default() };
    let ranked = grid_search(&cap, None, &base, &grid).unwrap();
    assert_eq!(ranked.len(), 8);
    let finals: Vec<f64> = ranked.iter().map(|(_, r)| *r.objective_trace.last().unwrap()).collect();
    assert!(finals.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn sweep_writes_tables_and_images() {
    let dir = tempfile::tempdir().unwrap();
    let m = SweepManifest { seeds: vec![0], epsilons: vec![0.1], batch_sizes: vec![1, 10], ..Default::default() };
    let table = sweep(&m, Some(dir.path())).unwrap();
    assert_eq!(table.summary.len(), scenarios(&m).len());
    assert_eq!(table.rows.len(), scenarios(&m).len());
    for f in ["sweep.csv", "summary.csv", "sweep.json", "images/baseline_seed0.pgm", "images/baseline_seed0.f64", "images/truth_seed0.pgm"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let raw = read_raw(&dir.path().join("images/baseline_seed0.f64"), 16, 16).unwrap();
    let run = run_scenario(&m, &scenarios(&m)[0], 0).unwrap();
    assert_eq!(raw, run.reconstruction.image);
    let csv = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert!(csv.starts_with("scenario,dp_epsilon"));
    assert!(table.mean_psnr("baseline").unwrap() > table.mean_psnr("dp_eps_0.1").unwrap());
}
