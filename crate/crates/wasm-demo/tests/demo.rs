use unlearn_wasm_demo::{projection, sigma_curve, unlearning_run};

#[test]
fn full_projection_is_orthogonal() {
    let p = projection([1.0, 1.0], [1.0, 0.0], 1.0).unwrap();
    assert!(p.projected[0].abs() < 1e-9 && (p.projected[1] - 1.0).abs() < 1e-12);
    assert!(p.cos_with_retain.abs() < 1e-9);
    let half = projection([1.0, 1.0], [1.0, 0.0], 0.5).unwrap();
    assert!((half.projected[0] - 0.5).abs() < 1e-9);
}

#[test]
fn sigma_falls_with_budget() {
    let c = sigma_curve(0.01, 1e-5, 1.0, 8.0, 8).unwrap();
    assert_eq!(c.len(), 8);
    assert!(c.windows(2).all(|w| w[1].sigma < w[0].sigma));
    assert!(sigma_curve(0.01, 1e-5, 2.0, 1.0, 8).is_err());
}

#[test]
fn small_run_forgets() {
    let r = unlearning_run(42, "full", 4.0).unwrap();
    assert!(r.after.fr > r.before.fr);
    assert_eq!(r.after.acc_by_level.len(), 4);
    assert_eq!(r.loss_forget.len(), r.loss_retain.len());
    assert!(unlearning_run(42, "nonsense", 4.0).is_err());
    let json = serde_json::to_string(&r).unwrap();
    assert!(json.contains("\"loss_forget\""));
}
