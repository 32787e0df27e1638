mod common;

use common::gradient_check;
use kronflow::flow::{
    dense_covariance_oracle, map_along_axis, AxisFlow, AxisOrder, CouplingKind, KroneckerLinear, KroneckerNonlinear,
    NonlinearConfig,
};
use kronflow::linalg::log_abs_det;
use kronflow::{Family, Graph, RandomStream, Tensor, WeightDistribution};
use nalgebra::DMatrix;

fn perturbed_nonlinear(kind: CouplingKind, affine: bool, seed: u64) -> WeightDistribution {
    let mut st = RandomStream::new(seed, 0);
    let cfg = NonlinearConfig {
        kind,
        affine,
        init_scale: 0.4,
        ..Default::default()
    };
    let mut d = KroneckerNonlinear::new(Tensor::randn(&[3, 4], &mut st), 0.8, &cfg, &mut st).unwrap();
    for p in d.params_mut() {
        for v in p.data_mut() {
            *v += 0.2 * st.standard_normal();
        }
    }
    d.into()
}

fn numeric_jacobian_logdet(d: &WeightDistribution, e: &Tensor) -> f64 {
    let n = e.numel();
    let h = 1e-6;
    let mut jac = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut plus = e.clone();
        plus.data_mut()[j] += h;
        let mut minus = e.clone();
        minus.data_mut()[j] -= h;
        let (wp, _) = d.transform(&plus).unwrap();
        let (wm, _) = d.transform(&minus).unwrap();
        for i in 0..n {
            jac[(i, j)] = (wp.data()[i] - wm.data()[i]) / (2.0 * h);
        }
    }
    log_abs_det(&jac).unwrap()
}

#[test]
fn non_volume_preserving_logdet_matches_numeric_jacobian() {
    for seed in 0..5 {
        let d = perturbed_nonlinear(CouplingKind::Affine, true, seed);
        let e = Tensor::randn(&[3, 4], &mut RandomStream::new(seed, 7));
        let analytic = d.logdet_jacobian(&e).unwrap();
        let numeric = numeric_jacobian_logdet(&d, &e);
        assert!(
            (analytic - numeric).abs() < 1e-4,
            "seed {seed}: {analytic} vs {numeric}"
        );
    }
}

#[test]
fn k_linear_logdet_matches_numeric_jacobian() {
    let mut st = RandomStream::new(3, 0);
    let a = Tensor::randn(&[2, 2], &mut st);
    let b = Tensor::randn(&[3, 3], &mut st);
    let s = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 0.5, 0.25]).unwrap();
    let d: WeightDistribution = KroneckerLinear::new(Tensor::zeros(&[2, 3]), vec![a, b], &s)
        .unwrap()
        .into();
    let e = Tensor::randn(&[2, 3], &mut st);
    let numeric = numeric_jacobian_logdet(&d, &e);
    assert!((d.logdet_jacobian(&e).unwrap() - numeric).abs() < 1e-6);
    assert!((numeric - 3f64.ln()).abs() < 1e-6);
}

#[test]
fn empirical_covariance_matches_dense_oracle() {
    let mut st = RandomStream::new(22, 0);
    let a = Tensor::randn(&[2, 2], &mut st);
    let b = Tensor::randn(&[3, 3], &mut st);
    let s = Tensor::randn(&[2, 3], &mut st).map(|v| v.abs() + 0.3);
    let kl = KroneckerLinear::new(Tensor::zeros(&[2, 3]), vec![a, b], &s).unwrap();
    let oracle = dense_covariance_oracle(&kl.factor(0), &kl.factor(1), &kl.scale()).unwrap();

    // Draw in the closed form W = A (E * S) B to keep 10^6 samples fast; the
    // sampler itself is checked against this product in unit tests.
    let (fa, fb, sc) = (kl.factor(0), kl.factor(1), kl.scale());
    let n = 1_000_000;
    let mut sum = [0.0f64; 6];
    let mut outer = [[0.0f64; 6]; 6];
    let mut outer_sq = [[0.0f64; 6]; 6];
    for _ in 0..n {
        let mut x = [0.0; 6];
        for k in 0..6 {
            x[k] = st.standard_normal() * sc.data()[k];
        }
        let mut ax = [0.0; 6];
        for i in 0..2 {
            for j in 0..3 {
                ax[i * 3 + j] = (0..2).map(|r| fa.get(i, r) * x[r * 3 + j]).sum();
            }
        }
        let mut w = [0.0; 6];
        for i in 0..2 {
            for j in 0..3 {
                w[i * 3 + j] = (0..3).map(|c| ax[i * 3 + c] * fb.get(c, j)).sum();
            }
        }
        for i in 0..6 {
            sum[i] += w[i];
            for j in 0..6 {
                let v = w[i] * w[j];
                outer[i][j] += v;
                outer_sq[i][j] += v * v;
            }
        }
    }
    let nf = n as f64;
    for i in 0..6 {
        for j in 0..6 {
            let m = outer[i][j] / nf;
            let cov = m - sum[i] * sum[j] / (nf * nf);
            let se = ((outer_sq[i][j] / nf - m * m) / nf).sqrt();
            assert!(
                (cov - oracle[(i, j)]).abs() < 3.0 * se + 1e-12,
                "({i},{j}): {cov} vs {} (se {se})",
                oracle[(i, j)]
            );
        }
    }
}

#[test]
fn sampler_matches_oracle_ordering() {
    // Covariance of the sampler's row-major output under unit perturbations
    // equals the oracle exactly: the map is linear, so column k of the
    // Jacobian is the image of the k-th basis draw.
    let mut st = RandomStream::new(5, 0);
    let kl = KroneckerLinear::new(
        Tensor::zeros(&[2, 3]),
        vec![Tensor::randn(&[2, 2], &mut st), Tensor::randn(&[3, 3], &mut st)],
        &Tensor::randn(&[2, 3], &mut st).map(|v| v.abs() + 0.1),
    )
    .unwrap();
    let oracle = kl.dense_covariance().unwrap();
    let d: WeightDistribution = kl.into();
    let mut jac = DMatrix::zeros(6, 6);
    for k in 0..6 {
        let mut e = Tensor::zeros(&[2, 3]);
        e.data_mut()[k] = 1.0;
        let (w, _) = d.transform(&e).unwrap();
        for i in 0..6 {
            jac[(i, k)] = w.data()[i];
        }
    }
    let cov = &jac * jac.transpose();
    assert!((cov - oracle).abs().max() < 1e-12);
}

#[test]
fn inversion_roundtrips() {
    for seed in 0..20 {
        let d = perturbed_nonlinear(CouplingKind::Additive, true, seed);
        let s = d.sample(&mut RandomStream::new(seed, 3)).unwrap();
        let back = d.inverse(&s.weights).unwrap();
        assert!(back.zip_map(&s.epsilon, |a, b| (a - b).abs()).unwrap().max_abs() < 1e-6);

        let ar = perturbed_nonlinear(CouplingKind::Autoregressive, true, seed);
        let s = ar.sample(&mut RandomStream::new(seed, 4)).unwrap();
        let back = ar.inverse(&s.weights).unwrap();
        assert!(back.zip_map(&s.epsilon, |a, b| (a - b).abs()).unwrap().max_abs() < 1e-6);
    }
}

#[test]
fn linear_axis_maps_reproduce_k_linear() {
    let mut st = RandomStream::new(9, 0);
    let kl = KroneckerLinear::new(
        Tensor::zeros(&[3, 4]),
        vec![Tensor::randn(&[3, 3], &mut st), Tensor::randn(&[4, 4], &mut st)],
        &Tensor::ones(&[3, 4]),
    )
    .unwrap();
    let e = Tensor::randn(&[3, 4], &mut st);
    let (a, b) = (kl.factor(0), kl.factor(1));
    let mut g = Graph::new();
    let ev = g.constant(e.clone());
    let at = g.constant(a.transpose().unwrap());
    let bv = g.constant(b.clone());
    // g_A: v -> A v on columns, g_B: v -> B^T v on rows (rows times B).
    let z = map_along_axis(&mut g, ev, 0, |g, rows| g.matmul(rows, at)).unwrap();
    let z = map_along_axis(&mut g, z, 1, |g, rows| g.matmul(rows, bv)).unwrap();
    let (w, _) = WeightDistribution::from(kl).transform(&e).unwrap();
    assert!(g.value(z).zip_map(&w, |x, y| (x - y).abs()).unwrap().max_abs() < 1e-12);
}

#[test]
fn reversed_axis_order_is_also_bijective() {
    let mut st = RandomStream::new(12, 0);
    let flows = vec![
        AxisFlow::new(3, CouplingKind::Additive, 2, 0.5, &mut st),
        AxisFlow::new(4, CouplingKind::Additive, 2, 0.5, &mut st),
    ];
    let fwd: WeightDistribution = KroneckerNonlinear::from_axis_flows(flows.clone(), AxisOrder::Forward)
        .unwrap()
        .into();
    let rev: WeightDistribution = KroneckerNonlinear::from_axis_flows(flows, AxisOrder::Reversed)
        .unwrap()
        .into();
    let e = Tensor::randn(&[3, 4], &mut st);
    let (wf, _) = fwd.transform(&e).unwrap();
    let (wr, _) = rev.transform(&e).unwrap();
    assert!(wf.zip_map(&wr, |a, b| (a - b).abs()).unwrap().max_abs() > 1e-6);
    let back = rev.inverse(&wr).unwrap();
    assert!(back.zip_map(&e, |a, b| (a - b).abs()).unwrap().max_abs() < 1e-9);
}

#[test]
fn reparameterized_gradients_pass_finite_differences() {
    let mut st = RandomStream::new(33, 0);
    for family in Family::ALL {
        let mut d = WeightDistribution::init(family, Tensor::randn(&[3, 4], &mut st), 0.7, &mut st).unwrap();
        for p in d.params_mut() {
            for v in p.data_mut() {
                *v += 0.2 * st.standard_normal();
            }
        }
        let e = Tensor::randn(&[3, 4], &mut st);
        let target = Tensor::randn(&[3, 4], &mut st);
        let inputs: Vec<Tensor> = d.params().into_iter().cloned().collect();
        let err = gradient_check(&inputs, 1e-5, |g, vars| {
            let ev = g.constant(e.clone());
            let out = d.forward(g, vars, ev)?;
            let tv = g.constant(target.clone());
            let diff = g.sub(out.weights, tv)?;
            let th = g.tanh(diff)?;
            let sq = g.square(th)?;
            let s = g.sum(sq)?;
            g.add(s, out.logdet)
        });
        assert!(err < 1e-4, "{family}: {err}");
    }
}
