mod common;

use common::{active_model, random_examples, tiny_config};
use ndarray::Array2;
use unlearn_core::corpus::{loss_mask, Example};
use unlearn_core::model::{apply_update, backward, batch_gradients, example_loss, forward_loss, GradientBundle};

fn mean_loss(m: &unlearn_core::model::ModelState, batch: &[&Example]) -> f64 {
    batch.iter().map(|e| example_loss(m, e).unwrap()).sum::<f64>() / batch.len() as f64
}

fn nudge(g: &GradientBundle, group: &str, idx: (usize, usize), h: f64) -> GradientBundle {
    let mut out = GradientBundle::default();
    let mut d = Array2::zeros(g.per_group[group].dim());
    d[idx] = h;
    out.per_group.insert(group.to_string(), d);
    out
}

#[test]
fn analytic_gradient_matches_central_differences() {
    let m = active_model(tiny_config(), 11);
    let examples = random_examples(6, 8, "s", 0, 5);
    let batch: Vec<&Example> = examples.iter().collect();
    let g = batch_gradients(&m, &batch).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (group, grad) in &g.per_group {
        for (idx, &a) in grad.indexed_iter() {
            let up = apply_update(&m, &nudge(&g, group, idx, h)).unwrap();
            let down = apply_update(&m, &nudge(&g, group, idx, -h)).unwrap();
            let fd = (mean_loss(&up, &batch) - mean_loss(&down, &batch)) / (2.0 * h);
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-4);
            worst = worst.max(rel);
        }
    }
    assert!(worst < 1e-4, "worst relative error {worst:e}");
}

#[test]
fn batch_gradient_is_mean_of_example_gradients() {
    let m = active_model(tiny_config(), 3);
    let examples = random_examples(5, 8, "s", 0, 9);
    let batch: Vec<&Example> = examples.iter().collect();
    let g = batch_gradients(&m, &batch).unwrap();
    let singles: Vec<GradientBundle> = examples
        .iter()
        .map(|e| {
            let (_, cache) = forward_loss(&m, &e.tokens(), &loss_mask(e)).unwrap();
            backward(&m, &cache).unwrap()
        })
        .collect();
    for (group, grad) in &g.per_group {
        let mut mean = Array2::<f64>::zeros(grad.dim());
        for s in &singles {
            mean += &s.per_group[group];
        }
        mean /= singles.len() as f64;
        let diff = (grad - &mean).mapv(f64::abs).fold(0.0_f64, |a, &b| a.max(b));
        assert!(diff < 1e-12, "{group}: {diff:e}");
    }
    let mean_l = singles.iter().map(|s| s.loss_value).sum::<f64>() / singles.len() as f64;
    assert!((g.loss_value - mean_l).abs() < 1e-12);
}
