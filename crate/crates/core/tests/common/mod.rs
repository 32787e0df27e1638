#![allow(dead_code)]

use kronflow::{Graph, Result, Tensor, Var};

/// Norm-wise relative error between reverse-mode gradients and central
/// finite differences (step `h`) of a scalar function, worst over inputs.
pub fn gradient_check<F>(inputs: &[Tensor], h: f64, f: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars).expect("forward");
    let grads = g.backward(loss).expect("backward");

    let eval = |ts: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vs: Vec<Var> = ts.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vs).expect("forward");
        g.item(out)
    };

    let mut worst: f64 = 0.0;
    for (k, t) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]);
        let mut num = vec![0.0; t.numel()];
        for i in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            num[i] = (eval(&plus) - eval(&minus)) / (2.0 * h);
        }
        let diff: f64 = analytic
            .data()
            .iter()
            .zip(&num)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let na: f64 = analytic.data().iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn: f64 = num.iter().map(|a| a * a).sum::<f64>().sqrt();
        let scale = na.max(nn);
        let rel = if scale < 1e-12 { diff } else { diff / scale };
        worst = worst.max(rel);
    }
    worst
}

/// Three isotropic Gaussian blobs on a circle of radius 3, `n` points total.
pub fn blobs(n: usize, std: f64, seed: u64) -> kronflow::snn::Dataset {
    let mut st = kronflow::RandomStream::new(seed, 0);
    let mut x = Vec::with_capacity(2 * n);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % 3;
        let angle = std::f64::consts::PI / 2.0 + 2.0 * std::f64::consts::PI * c as f64 / 3.0;
        x.push(3.0 * angle.cos() + std * st.standard_normal());
        x.push(3.0 * angle.sin() + std * st.standard_normal());
        y.push(c);
    }
    kronflow::snn::Dataset::classification(Tensor::new(vec![n, 2], x).unwrap(), y, 3).unwrap()
}
