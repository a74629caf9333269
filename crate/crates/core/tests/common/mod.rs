#![allow(dead_code)]

use fhproxy::numkit::{Matrix, Rng};
use fhproxy::trainer::{Mlp, ModelSpec};

/// Independent f64 forward pass: ReLU on every layer but the last, then
/// mean cross-entropy.
pub fn loss_f64(params: &[Vec<f64>], shapes: &[(usize, usize)], x: &[Vec<f64>], y: &[u32]) -> f64 {
    let mut total = 0.0;
    for (xi, &yi) in x.iter().zip(y) {
        let mut a = xi.clone();
        for (l, &(out, inp)) in shapes.iter().enumerate() {
            let w = &params[2 * l];
            let b = &params[2 * l + 1];
            let mut z: Vec<f64> = (0..out)
                .map(|j| b[j] + (0..inp).map(|k| w[j * inp + k] * a[k]).sum::<f64>())
                .collect();
            if l + 1 < shapes.len() {
                z.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            a = z;
        }
        let m = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + a.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - a[yi as usize];
    }
    total / x.len() as f64
}

/// Relative error `|g - g_num| / max(|g|, |g_num|)` over all parameters of a
/// random 5-sample instance with 3 features and 3 classes.
pub fn gradient_check(seed: u64) -> f64 {
    let spec = ModelSpec {
        input_dim: 4,
        hidden_dims: vec![6],
        feature_dim: 3,
        classes: 3,
    };
    let shapes = spec.layer_shapes();
    let mut rng = Rng::new(seed);
    let mut mlp = Mlp::init(&spec, &mut rng).unwrap();
    for p in mlp.params_mut() {
        for v in p.data_mut() {
            *v += (0.1 * rng.normal()) as f32;
        }
    }
    let x = Matrix::from_fn(5, 4, |_, _| rng.normal() as f32);
    let y: Vec<u32> = (0..5).map(|_| rng.below(3) as u32).collect();
    let cache = mlp.forward(&x).unwrap();
    let (_, grads) = mlp.backward(&cache, &y).unwrap();

    let mut params: Vec<Vec<f64>> = mlp
        .params()
        .iter()
        .map(|p| p.data().iter().map(|&v| v as f64).collect())
        .collect();
    let xs: Vec<Vec<f64>> = (0..5)
        .map(|i| x.row(i).iter().map(|&v| v as f64).collect())
        .collect();
    let eps = 1e-6;
    let (mut diff2, mut norm2) = (0.0, 0.0);
    for t in 0..params.len() {
        for i in 0..params[t].len() {
            let orig = params[t][i];
            params[t][i] = orig + eps;
            let up = loss_f64(&params, &shapes, &xs, &y);
            params[t][i] = orig - eps;
            let down = loss_f64(&params, &shapes, &xs, &y);
            params[t][i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let analytic = grads[t].data()[i] as f64;
            diff2 += (numeric - analytic).powi(2);
            norm2 += numeric.powi(2).max(analytic.powi(2));
        }
    }
    diff2.sqrt() / norm2.sqrt().max(1e-12)
}

/// O(n^2) pair walk feeding the shared tau-b formula.
pub fn tau_brute(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len();
    let (mut s, mut ta, mut tb) = (0i64, 0u64, 0u64);
    for i in 0..n {
        for j in i + 1..n {
            let da = a[i].partial_cmp(&a[j]).unwrap() as i64;
            let db = b[i].partial_cmp(&b[j]).unwrap() as i64;
            s += da * db;
            ta += (da == 0) as u64;
            tb += (db == 0) as u64;
        }
    }
    fhproxy::bench::tau_b_from_counts(s, (n * (n - 1) / 2) as u64, ta, tb)
}
