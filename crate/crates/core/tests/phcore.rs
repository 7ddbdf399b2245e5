use idapbc::integrate::{integrate, integrate_with_inputs, Trajectory};
use idapbc::phcore::{
    electromech_gradient, electromech_hamiltonian, electromech_plant, passivity_residual, ElectromechParams,
    PlantSystem,
};
use proptest::prelude::*;

fn unit() -> ElectromechParams {
    ElectromechParams::default()
}

#[test]
fn hamiltonian_values() {
    let p = unit();
    assert_eq!(electromech_hamiltonian(&[1.0, 0.0, 0.0], &p), 0.0);
    let stiff = ElectromechParams { k: 2.0, ..unit() };
    assert_eq!(electromech_hamiltonian(&[2.0, 0.0, 0.0], &stiff), 1.0);
    let h = electromech_hamiltonian(&[0.2, 0.0, 0.3835], &p);
    let expected = 0.5 * 0.8f64.powi(2) + 0.2 * 0.3835f64.powi(2) / 2.0;
    assert!((h - expected).abs() < 1e-15);
    assert!((h - 0.334707).abs() < 1e-6);
}

#[test]
fn gradient_values() {
    let p = unit();
    assert_eq!(electromech_gradient(&[1.0, 0.0, 0.0], &p), [0.0, 0.0, 0.0]);
    assert_eq!(electromech_gradient(&[1.0, 1.0, 0.0], &p), [0.0, 1.0, 0.0]);
}

#[test]
fn plant_drift_and_input() {
    let plant = electromech_plant(unit()).unwrap();
    assert_eq!(plant.drift(&[1.0, 0.0, 0.0]), vec![0.0, 0.0, 0.0]);
    assert_eq!(plant.drift(&[1.0, 1.0, 0.0]), vec![1.0, -1.0, 0.0]);
    let plant = electromech_plant(ElectromechParams { r_res: 2.0, ..unit() }).unwrap();
    assert_eq!(plant.input_matrix(&[0.3, 0.1, 0.2]).as_slice(), &[0.0, 0.0, 0.5]);
}

#[test]
fn rejects_nonpositive_parameters() {
    assert!(electromech_plant(ElectromechParams { m: 0.0, ..unit() }).is_err());
    assert!(electromech_plant(ElectromechParams { a_eps: -1.0, ..unit() }).is_err());
}

#[test]
fn passivity_of_uncontrolled_rollouts() {
    let plant = electromech_plant(unit()).unwrap();
    let rest = Trajectory::new(vec![0.0, 0.5, 1.0], vec![vec![1.0, 0.0, 0.0]; 3], vec![vec![0.0]; 3]).unwrap();
    assert!(passivity_residual(&plant, &rest).unwrap().abs() <= 1e-12);
    let traj = integrate_with_inputs(|x| Ok(plant.drift(x)), |_| Ok(vec![0.0]), &[0.5, 0.3, 0.8], 2.0, 2000).unwrap();
    assert!(passivity_residual(&plant, &traj).unwrap() <= 1e-8);
}

#[test]
fn energy_does_not_increase_without_input() {
    let plant = electromech_plant(unit()).unwrap();
    let traj = integrate(|x| Ok(plant.drift(x)), &[0.4, -0.2, 1.1], 3.0, 3000).unwrap();
    let energy: Vec<f64> = traj.states.iter().map(|x| plant.hamiltonian(x)).collect();
    let h = traj.step_size();
    for w in energy.windows(2) {
        assert!(w[1] - w[0] <= 1e-6 * h, "energy rose by {}", w[1] - w[0]);
    }
}

fn state() -> impl Strategy<Value = [f64; 3]> {
    (0.05f64..2.0, -2.0f64..2.0, -2.0f64..2.0).prop_map(|(a, b, c)| [a, b, c])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn gradient_matches_finite_differences(x in state()) {
        let p = unit();
        let g = electromech_gradient(&x, &p);
        for i in 0..3 {
            let h = 1e-6 * (1.0 + x[i].abs());
            let mut xp = x;
            let mut xm = x;
            xp[i] += h;
            xm[i] -= h;
            let fd = (electromech_hamiltonian(&xp, &p) - electromech_hamiltonian(&xm, &p)) / (2.0 * h);
            let scale = g[i].abs().max(fd.abs()).max(1e-3);
            prop_assert!((fd - g[i]).abs() / scale <= 1e-5, "component {}: {} vs {}", i, g[i], fd);
        }
    }

    #[test]
    fn drift_is_structured(x in state(), b in 0.1f64..3.0, r in 0.1f64..3.0) {
        let plant = electromech_plant(ElectromechParams { b, r_res: r, ..unit() }).unwrap();
        let (j, rm) = plant.structure(&x).unwrap();
        let grad = plant.hamiltonian_gradient(&x);
        let structured = (&j - &rm).mul_vec(&grad);
        let f = plant.drift(&x);
        let err: f64 = f.iter().zip(&structured).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        prop_assert!(err <= 1e-10);
    }

    #[test]
    fn analytic_jacobian_matches_default(x in state()) {
        let plant = electromech_plant(unit()).unwrap();
        let analytic = plant.drift_jacobian(&x);
        let numeric = idapbc::integrate::finite_difference_jacobian(|y| Ok(plant.drift(y)), &x).unwrap();
        prop_assert!((&analytic - &numeric).max_abs() <= 1e-6);
    }
}
