use dcee::harness::run::run_closed_loop_observed;
use dcee::harness::{run_closed_loop, ControllerKind, ScenarioConfig};
use dcee::problem::DceeProblem;

#[test]
fn record_count_matches_horizon() {
    for (horizon, steps) in [(0.1, 1), (2.5, 25), (30.0, 300)] {
        let cfg = ScenarioConfig { horizon_s: horizon, ..ScenarioConfig::default() };
        assert_eq!(run_closed_loop(&cfg).unwrap().records.len(), steps);
    }
}

#[test]
fn runs_are_reproducible_and_seeded() {
    let cfg = ScenarioConfig { horizon_s: 60.0, ..ScenarioConfig::default() };
    for kind in ControllerKind::ALL {
        let cfg = cfg.clone().with_controller(kind);
        let a = run_closed_loop(&cfg).unwrap();
        let b = run_closed_loop(&cfg).unwrap();
        assert_eq!(a.records, b.records);
        let c = run_closed_loop(&cfg.clone().with_seed(99)).unwrap();
        assert_ne!(a.records, c.records);
    }
}

#[test]
fn gradient_baseline_scores_the_same_objective() {
    let mut cfg = ScenarioConfig::default().with_controller(ControllerKind::GradDcee);
    cfg.horizon_s = 30.0;
    let mut split = Vec::new();
    let mut observer = |_: usize, p: &DceeProblem<'_>, _: f64, u: f64| split.push(p.objective_split(u).unwrap());
    let r = run_closed_loop_observed(&cfg, &mut observer).unwrap();
    for (rec, (exploit, explore)) in r.records.iter().zip(&split) {
        assert_eq!((rec.exploit, rec.explore), (*exploit, *explore));
    }
    assert!(r.records.iter().all(|x| x.iterations == 1));
}

#[test]
fn switches_move_the_true_optimum() {
    let r = run_closed_loop(&ScenarioConfig::default()).unwrap();
    let at = |t: f64| r.records.iter().find(|x| (x.t - t).abs() < 1e-9).unwrap().v_star_true;
    assert_eq!((at(299.9), at(300.0), at(599.9), at(600.0), at(900.0)), (25.0, 20.0, 20.0, 30.0, 30.0));
}

#[test]
fn esc_keeps_dithering() {
    let cfg = ScenarioConfig::default().with_controller(ControllerKind::Esc);
    let r = run_closed_loop(&cfg).unwrap();
    let tail: Vec<f64> = r.records.iter().filter(|x| x.t > cfg.horizon_s - 100.0).map(|x| x.v).collect();
    let mean = tail.iter().sum::<f64>() / tail.len() as f64;
    let swing = tail.iter().map(|v| (v - mean).abs()).fold(0.0, f64::max);
    assert!(swing >= 0.5 * cfg.controller.esc.dither_amp, "swing {swing}");
}

#[test]
fn numerical_controller_never_leaves_the_box() {
    let r = run_closed_loop(&ScenarioConfig::default()).unwrap();
    let v = &r.config.vehicle;
    assert!(r.records.iter().all(|x| x.u >= v.u_min && x.u <= v.u_max && x.v >= 0.0));
    assert_eq!(r.reports.len(), r.records.len());
    assert!(r.records.iter().all(|x| x.exploit.is_finite() && x.explore >= 0.0));
}
