//! Analytic BPTT against central finite differences.

use lrn_core::cells::{backward_sequence, forward_sequence, lrn_step, elrn_step, glrn_step, elman_step_projected, StepView};
use lrn_core::analysis::{elman_jacobian, lrn_jacobian_diag};
use lrn_core::tasks::{gen_adding, gen_copy, gen_toy_sentiment, charlm_window, TaskInstance};
use lrn_core::training::{Model, Parameters, TrainConfig};
use lrn_core::{Activation, CellKind, CellParams, Matrix, Rng};

const DELTA: f64 = 1e-5;

fn probe_loss(p: &CellParams, x: &Matrix, dh: &Matrix) -> f64 {
    let traj = forward_sequence(p, x, None).unwrap();
    let h = traj.hidden_matrix();
    h.data().iter().zip(dh.data()).map(|(a, b)| a * b).sum()
}

/// |a − n| / max(|a|, |n|, floor).
fn rel_err_floor(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

fn rel_err(a: f64, n: f64) -> f64 {
    rel_err_floor(a, n, 1e-8)
}

fn central(f: impl Fn(f64) -> f64, at: f64) -> f64 {
    (f(at + DELTA) - f(at - DELTA)) / (2.0 * DELTA)
}

fn cell_max_error(kind: CellKind, g: Activation, seed: u64) -> f64 {
    let (d_in, d, n) = (5, 6, 10);
    let mut rng = Rng::new(seed);
    let mut p: CellParams = CellParams::new(kind, g, d_in, d, &mut rng).unwrap();
    // non-zero biases so their gradients are exercised away from symmetry
    for (name, m) in p.weights.entries_mut() {
        if name.starts_with('b') {
            *m = Matrix::uniform(1, d, -0.5, 0.5, &mut rng);
        }
    }
    let x = Matrix::uniform(n, d_in, -1.0, 1.0, &mut rng);
    let dh = Matrix::uniform(n, d, -1.0, 1.0, &mut rng);
    let traj = forward_sequence(&p, &x, None).unwrap();
    let grads = backward_sequence(&p, &traj, &dh).unwrap();
    let mut worst: f64 = 0.0;
    let names: Vec<&str> = p.weights.entries().map(|(n, _)| n).collect();
    for name in names {
        let analytic = grads.weights.get(name).unwrap().clone();
        for idx in 0..analytic.data().len() {
            let numeric = central(
                |v| {
                    let mut q = p.clone();
                    let m = q.weights.entries_mut().find(|(n, _)| *n == name).unwrap().1;
                    m.data_mut()[idx] = v;
                    probe_loss(&q, &x, &dh)
                },
                p.weights.get(name).unwrap().data()[idx],
            );
            worst = worst.max(rel_err(analytic.data()[idx], numeric));
        }
    }
    for idx in 0..x.data().len() {
        let numeric = central(
            |v| {
                let mut y = x.clone();
                y.data_mut()[idx] = v;
                probe_loss(&p, &y, &dh)
            },
            x.data()[idx],
        );
        worst = worst.max(rel_err(grads.dx.data()[idx], numeric));
    }
    worst
}

#[test]
fn bptt_matches_finite_differences_for_every_cell() {
    for kind in CellKind::ALL {
        for &g in kind.activations() {
            for seed in [13, 14, 15] {
                let err = cell_max_error(kind, g, seed);
                assert!(err <= 1e-4, "{kind}/{g} seed {seed}: {err:e}");
            }
        }
    }
}

fn model_max_error(inst: &TaskInstance, config: &TrainConfig) -> f64 {
    let model: Model = Model::new(config.model_config(), &mut Rng::new(config.seed)).unwrap();
    let (_, grads) = model.example_gradients(inst).unwrap();
    let loss_with = |m: &Model| m.evaluate_example(inst).unwrap().loss;
    let mut worst: f64 = 0.0;
    let shapes: Vec<usize> = model.tensors().iter().map(|m| m.data().len()).collect();
    for (ti, &len) in shapes.iter().enumerate() {
        // large tables: sample a stride of entries
        let stride = if len > 200 { 37 } else { 1 };
        for idx in (0..len).step_by(stride) {
            let numeric = central(
                |v| {
                    let mut m = model.clone();
                    m.tensors_mut()[ti].data_mut()[idx] = v;
                    loss_with(&m)
                },
                model.tensors()[ti].data()[idx],
            );
            // whole-model losses mix many terms; entries below 1e-3 are compared absolutely
            worst = worst.max(rel_err_floor(grads.tensors()[ti].data()[idx], numeric, 1e-3));
        }
    }
    worst
}

#[test]
fn model_gradients_match_finite_differences() {
    use lrn_core::tasks::TaskId;
    let corpus: Vec<u8> = (0..64u32).map(|i| b"the quick brown fox jumps over a lazy dog "[i as usize % 42]).collect();
    for kind in [CellKind::Lrn, CellKind::Olrn, CellKind::Elman] {
        for task in TaskId::ALL {
            let mut c = TrainConfig::new(task, kind);
            c.d = 4;
            c.layers = 2;
            c.embed_dim = 3;
            c.seed = 7;
            let mut rng = Rng::new(11);
            let inst: TaskInstance = match task {
                TaskId::Adding => gen_adding(6, &mut rng).unwrap(),
                TaskId::Copy => gen_copy(3, 2, 3, &mut rng).unwrap(),
                TaskId::ToySent => gen_toy_sentiment(&mut rng),
                TaskId::CharLm => charlm_window(&corpus, 5, 7).unwrap(),
            };
            c.copy_alphabet = 3;
            c.copy_payload = 2;
            let err = model_max_error(&inst, &c);
            assert!(err <= 1e-4, "{kind} {task}: {err:e}");
        }
    }
}

fn fd_jacobian(step: impl Fn(&[f64]) -> Vec<f64>, h: &[f64]) -> Matrix {
    let d = h.len();
    let mut jac = Matrix::zeros(d, d);
    for i in 0..d {
        let mut hp = h.to_vec();
        let mut hm = h.to_vec();
        hp[i] += DELTA;
        hm[i] -= DELTA;
        let (up, dn) = (step(&hp), step(&hm));
        for j in 0..d {
            jac.set(j, i, (up[j] - dn[j]) / (2.0 * DELTA));
        }
    }
    jac
}

#[test]
fn one_step_jacobians_match_finite_differences() {
    let d = 5;
    let mut rng = Rng::new(99);
    let mut cases = 0;
    while cases < 100 {
        let kind = [CellKind::Lrn, CellKind::Glrn, CellKind::Elrn][cases % 3];
        let g = [Activation::Tanh, Activation::Identity][(cases / 3) % 2];
        let draw = |rng: &mut Rng, s: f64| (0..d).map(|_| rng.uniform(-s, s)).collect::<Vec<f64>>();
        let (q, k, v, h) = (draw(&mut rng, 2.0), draw(&mut rng, 2.0), draw(&mut rng, 1.0), draw(&mut rng, 1.0));
        let step = |hp: &[f64]| match kind {
            CellKind::Lrn => lrn_step(&q, &k, &v, hp, g),
            CellKind::Glrn => glrn_step(&q, &v, hp, g),
            _ => elrn_step(&v, hp, g),
        };
        let cache = step(&h);
        let diag = lrn_jacobian_diag(kind, &StepView { cache: &cache, h_prev: &h, v: &v }, g).unwrap();
        let fd = fd_jacobian(|hp| step(hp).hidden, &h);
        for j in 0..d {
            for i in 0..d {
                if i == j {
                    assert!((fd.get(j, j) - diag.get(0, j)).abs() <= 1e-6, "{kind} case {cases}");
                } else {
                    assert!(fd.get(j, i).abs() <= 1e-8);
                }
            }
        }
        cases += 1;
    }
}

#[test]
fn elman_jacobian_matches_finite_differences() {
    let (d, n) = (5, 4);
    for seed in 0..20 {
        let mut rng = Rng::new(seed);
        let p: CellParams = CellParams::new(CellKind::Elman, Activation::Tanh, 3, d, &mut rng).unwrap();
        let x = Matrix::uniform(n, 3, -1.0, 1.0, &mut rng);
        let traj = forward_sequence(&p, &x, None).unwrap();
        let t = n - 1;
        let wx = traj.projections.wx.as_ref().unwrap().row(t).to_vec();
        let u = p.weights.u.clone().unwrap();
        let fd = fd_jacobian(|hp| elman_step_projected(&wx, hp, &u, Activation::Tanh).hidden, traj.h_prev(t));
        let analytic = elman_jacobian(&p, &traj.step_view(t)).unwrap();
        assert!(fd.max_abs_diff(&analytic).unwrap() <= 1e-8);
    }
}
