use idapbc::controller::{
    assemble_jd, assemble_rd, closed_loop_drift, controller_report, desired_drift, feedback, fixtures,
    matching_cost, residual_eta, DesiredSystem, Entry,
};
use idapbc::dictionary::{GateConstants, PolynomialLibrary, CLOSED_GATE_LOG_ALPHA};
use idapbc::integrate::{integrate, simulate_closed_loop, Trajectory};
use idapbc::numerics::{left_pseudo_inverse, Mat};
use idapbc::phcore::{electromech_plant, ElectromechParams, PlantSystem};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn unit_plant() -> impl PlantSystem {
    electromech_plant(ElectromechParams::default()).unwrap()
}

fn random_system(rng: &mut ChaCha8Rng) -> DesiredSystem {
    let lib = PolynomialLibrary::new(3, 4).unwrap();
    let mut ds = DesiredSystem::zeros(lib, 0.0, GateConstants::default());
    for m in ds.models.iter_mut() {
        for j in 0..m.len() {
            m.xi[j] = rng.gen_range(-1.0..1.0);
            m.log_alpha[j] = rng.gen_range(-3.0..3.0);
        }
    }
    ds
}

fn random_state(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.gen_range(0.05..1.5), rng.gen_range(-1.0..1.0), rng.gen_range(-1.5..1.5)]
}

#[test]
fn zero_models_give_zero_matrices() {
    let ds = fixtures::closed_controller(4);
    let gates = ds.deterministic_gates();
    let x = [0.3, -0.2, 0.9];
    assert_eq!(assemble_jd(&ds, &x, &gates).unwrap(), Mat::zeros(3, 3));
    assert_eq!(assemble_rd(&ds, &x, &gates).unwrap(), Mat::zeros(3, 3));
    assert_eq!(desired_drift(&ds, &x, &gates).unwrap(), [0.0; 3]);
}

#[test]
fn reference_structure_entries() {
    let ds = fixtures::reference_oscillation_controller();
    let gates = ds.deterministic_gates();
    let x = [0.2, 0.7, -0.4];
    let jd = assemble_jd(&ds, &x, &gates).unwrap();
    assert!((jd[(0, 1)] + 0.3035).abs() < 1e-15);
    assert!((jd[(0, 2)] + 4.8265 * x[1]).abs() < 1e-14);
    assert!((jd[(1, 2)] - 0.1458 * x[2].powi(4)).abs() < 1e-14);

    let mut ds = fixtures::closed_controller(4);
    ds.model_mut(Entry::E).set_term(&[0, 0, 0], 1.6327).unwrap();
    let rd = assemble_rd(&ds, &x, &ds.deterministic_gates()).unwrap();
    assert_eq!(rd[(1, 1)], 1.6327);
}

#[test]
fn gradient_flow_of_quadratic() {
    let mut ds = fixtures::closed_controller(2);
    for e in [Entry::D, Entry::E, Entry::F] {
        ds.model_mut(e).set_term(&[0, 0, 0], 1.0).unwrap();
    }
    let hd = ds.model_mut(Entry::Hd);
    hd.set_term(&[2, 0, 0], 0.5).unwrap();
    hd.set_term(&[0, 2, 0], 0.5).unwrap();
    hd.set_term(&[0, 0, 2], 0.5).unwrap();
    let x = [0.3, -1.2, 2.5];
    let fd = desired_drift(&ds, &x, &ds.deterministic_gates()).unwrap();
    for i in 0..3 {
        assert!((fd[i] + x[i]).abs() < 1e-15);
    }
}

#[test]
fn plant_matching_controller_has_no_residual() {
    let plant = unit_plant();
    let ds = fixtures::plant_matching_controller();
    let gates = ds.deterministic_gates();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let x = random_state(&mut rng);
        let u = feedback(&plant, &ds, &x, &gates).unwrap();
        assert!(u[0].abs() < 1e-12);
        let eta = residual_eta(&plant, &ds, &x, &gates).unwrap();
        assert!(eta.iter().all(|v| v.abs() < 1e-12));
        let cl = closed_loop_drift(&plant, &ds, &x, &gates).unwrap();
        let f = plant.drift(&x);
        assert!((0..3).all(|i| (cl[i] - f[i]).abs() < 1e-12));
    }
    let traj = simulate_closed_loop(&plant, &ds, &gates, &[0.5, 0.1, 0.8], 1.0, 200).unwrap();
    assert!(matching_cost(&plant, &ds, &traj, &gates).unwrap() < 1e-20);
}

#[test]
fn zero_residual_closed_loop_follows_desired_system() {
    let plant = unit_plant();
    let ds = fixtures::plant_matching_controller();
    let gates = ds.deterministic_gates();
    let x0 = [0.6, -0.1, 0.9];
    let closed = simulate_closed_loop(&plant, &ds, &gates, &x0, 2.0, 400).unwrap();
    let desired = integrate(|x| Ok(desired_drift(&ds, x, &gates)?.to_vec()), &x0, 2.0, 400).unwrap();
    for (a, b) in closed.states.iter().zip(&desired.states) {
        for i in 0..3 {
            assert!((a[i] - b[i]).abs() < 1e-9);
        }
    }
}

#[test]
fn matching_cost_of_constant_residual() {
    let plant = unit_plant();
    let mut ds = fixtures::plant_matching_controller();
    // At (1, 1, 0) only the p-component of ∇H_d is nonzero, so raising a by 0.03 shifts f_d by (0.03, 0, 0).
    ds.model_mut(Entry::A).set_term(&[0, 0, 0], 1.03).unwrap();
    let gates = ds.deterministic_gates();
    let states = vec![vec![1.0, 1.0, 0.0]; 5];
    let traj = Trajectory::new((0..5).map(|k| k as f64 * 0.25).collect(), states, vec![vec![0.0]; 5]).unwrap();
    let eta = residual_eta(&plant, &ds, &[1.0, 1.0, 0.0], &gates).unwrap();
    assert!((eta[0] - 0.03).abs() < 1e-12 && eta[1].abs() < 1e-12 && eta[2] == 0.0);
    let cost = matching_cost(&plant, &ds, &traj, &gates).unwrap();
    assert!((cost - 0.0009).abs() < 1e-12);
}

#[test]
fn matching_cost_is_pointwise_mean() {
    let plant = unit_plant();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let ds = random_system(&mut rng);
    let gates = ds.deterministic_gates();
    let states: Vec<Vec<f64>> = (0..11).map(|_| random_state(&mut rng).to_vec()).collect();
    let traj = Trajectory::new((0..11).map(|k| k as f64 * 0.1).collect(), states.clone(), vec![vec![0.0]; 11]).unwrap();
    let mut sum = 0.0;
    for x in &states {
        let eta = residual_eta(&plant, &ds, x, &gates).unwrap();
        sum += eta.iter().map(|v| v * v).sum::<f64>();
    }
    let cost = matching_cost(&plant, &ds, &traj, &gates).unwrap();
    assert!((cost - sum / 11.0).abs() <= 1e-12 * (1.0 + cost));
}

#[test]
fn structural_invariants_on_random_controllers() {
    for (r_res, seed) in [(1.0, 1u64), (2.5, 2u64)] {
        let plant = electromech_plant(ElectromechParams { r_res, ..Default::default() }).unwrap();
        let g = plant.input_matrix(&[0.0; 3]);
        let pinv = left_pseudo_inverse(&g).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..200 {
            let ds = random_system(&mut rng);
            let gates = ds.deterministic_gates();
            let x = random_state(&mut rng);
            let jd = assemble_jd(&ds, &x, &gates).unwrap();
            let rd = assemble_rd(&ds, &x, &gates).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    assert_eq!(jd[(i, j)], -jd[(j, i)]);
                    if i != j {
                        assert_eq!(rd[(i, j)], 0.0);
                    }
                }
            }
            let eta = residual_eta(&plant, &ds, &x, &gates).unwrap();
            assert_eq!(eta[2], 0.0);
            assert!(pinv.mul_vec(&eta)[0].abs() <= 1e-12);
            let fd = desired_drift(&ds, &x, &gates).unwrap();
            let f = plant.drift(&x);
            let delta: Vec<f64> = (0..3).map(|i| fd[i] - f[i]).collect();
            for i in 0..2 {
                assert!((eta[i] - delta[i]).abs() <= 1e-12 * (1.0 + delta[i].abs()));
            }
            let u = feedback(&plant, &ds, &x, &gates).unwrap();
            assert!((u[0] - r_res * delta[2]).abs() <= 1e-12 * (1.0 + u[0].abs()));
            let cl = closed_loop_drift(&plant, &ds, &x, &gates).unwrap();
            let gu = g.mul_vec(&u);
            for i in 0..3 {
                assert!((cl[i] - (f[i] + gu[i])).abs() <= 1e-12);
            }
            assert_eq!(cl[0], f[0]);
            assert_eq!(cl[1], f[1]);
        }
    }
}

#[test]
fn feedback_is_linear_in_mismatch() {
    let plant = unit_plant();
    let base = fixtures::plant_matching_controller();
    let mut once = base.clone();
    once.model_mut(Entry::F).set_term(&[0, 0, 0], 1.5).unwrap();
    let mut twice = base.clone();
    twice.model_mut(Entry::F).set_term(&[0, 0, 0], 2.0).unwrap();
    let x = [0.4, 0.3, 0.7];
    let u1 = feedback(&plant, &once, &x, &once.deterministic_gates()).unwrap()[0];
    let u2 = feedback(&plant, &twice, &x, &twice.deterministic_gates()).unwrap()[0];
    assert!((u2 - 2.0 * u1).abs() < 1e-12);
}

#[test]
fn closed_model_exports_zeros() {
    let mut ds = fixtures::closed_controller(4);
    for m in ds.models.iter_mut() {
        m.xi.iter_mut().for_each(|v| *v = 3.0);
        m.log_alpha.iter_mut().for_each(|v| *v = CLOSED_GATE_LOG_ALPHA);
    }
    let report = controller_report(&ds);
    for line in report.lines().take(7) {
        assert!(line.ends_with("= 0"), "{line}");
    }
    assert!(report.contains("active terms: 0 of 245"));
}
