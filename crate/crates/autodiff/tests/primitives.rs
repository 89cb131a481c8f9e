//! Every primitive checked against central finite differences in both modes,
//! plus the JVP/VJP duality `<v, J u> = <J^T v, u>`.

use mf_autodiff::{jvp, vjp, NdArray, Result, Tape, Var, GATHER_ZERO};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Prim = fn(&mut Tape, &[Var]) -> Result<Var>;

/// (name, input shapes, primitive)
fn primitives() -> Vec<(&'static str, Vec<Vec<usize>>, Prim)> {
    vec![
        ("add", vec![vec![3, 4], vec![3, 4]], |t, x| t.add(x[0], x[1])),
        ("add_bcast", vec![vec![3, 4], vec![1, 4]], |t, x| t.add(x[0], x[1])),
        ("sub", vec![vec![3, 4], vec![1, 4]], |t, x| t.sub(x[0], x[1])),
        ("mul", vec![vec![2, 5], vec![2, 5]], |t, x| t.mul(x[0], x[1])),
        ("scale", vec![vec![2, 3]], |t, x| t.scale(x[0], -1.7)),
        ("matmul", vec![vec![3, 4], vec![4, 2]], |t, x| t.matmul(x[0], x[1])),
        ("affine", vec![vec![3, 4], vec![4, 2], vec![1, 2]], |t, x| t.affine(x[0], x[1], x[2])),
        ("tanh", vec![vec![2, 3]], |t, x| t.tanh(x[0])),
        ("silu", vec![vec![2, 3]], |t, x| t.silu(x[0])),
        ("sin", vec![vec![2, 3]], |t, x| t.sin(x[0])),
        ("cos", vec![vec![2, 3]], |t, x| t.cos(x[0])),
        ("square", vec![vec![2, 3]], |t, x| t.square(x[0])),
        ("sum", vec![vec![2, 3]], |t, x| t.sum(x[0])),
        ("mean", vec![vec![2, 3]], |t, x| t.mean(x[0])),
        ("concat0", vec![vec![2, 3], vec![1, 3]], |t, x| t.concat(&[x[0], x[1]], 0)),
        ("concat1", vec![vec![2, 3], vec![2, 2]], |t, x| t.concat(&[x[0], x[1]], 1)),
        ("slice0", vec![vec![4, 3]], |t, x| t.slice(x[0], 0, 1, 3)),
        ("slice1", vec![vec![3, 5]], |t, x| t.slice(x[0], 1, 2, 4)),
        ("reshape", vec![vec![2, 6]], |t, x| t.reshape(x[0], &[3, 4])),
        ("gather", vec![vec![2, 3]], |t, x| {
            t.gather(x[0], vec![5, 0, GATHER_ZERO, 5, 2, 1, 1, 3].into(), &[2, 4])
        }),
    ]
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> NdArray {
    let n = shape.iter().product();
    NdArray::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

fn eval(f: Prim, inputs: &[NdArray]) -> NdArray {
    let mut t = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone()).unwrap()).collect();
    let out = f(&mut t, &vars).unwrap();
    t.value(out).clone()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-300);
    num / den
}

/// Gradient of `<c, f(x)>` by reverse mode and by central differences.
fn check_reverse(f: Prim, inputs: &[NdArray], proj: &NdArray) -> f64 {
    let (_, pulled) = vjp(|t, x| Ok(vec![f(t, x)?]), inputs, std::slice::from_ref(proj)).unwrap();
    let h = 1e-5;
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (i, x) in inputs.iter().enumerate() {
        for j in 0..x.len() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            minus[i].data_mut()[j] -= h;
            let fp = eval(f, &plus).dot(proj).unwrap();
            let fm = eval(f, &minus).dot(proj).unwrap();
            numeric.push((fp - fm) / (2.0 * h));
            analytic.push(pulled[i].data()[j]);
        }
    }
    rel_err(&analytic, &numeric)
}

fn check_forward(f: Prim, inputs: &[NdArray], dirs: &[NdArray]) -> f64 {
    let (_, dots) = jvp(|t, x| Ok(vec![f(t, x)?]), inputs, dirs).unwrap();
    let h = 1e-6;
    let shifted = |s: f64| -> Vec<NdArray> {
        inputs
            .iter()
            .zip(dirs)
            .map(|(x, d)| x.axpy(s, d).unwrap())
            .collect()
    };
    let fp = eval(f, &shifted(h));
    let fm = eval(f, &shifted(-h));
    let fd: Vec<f64> = fp.data().iter().zip(fm.data()).map(|(a, b)| (a - b) / (2.0 * h)).collect();
    rel_err(dots[0].data(), &fd)
}

#[test]
fn reverse_mode_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (name, shapes, f) in primitives() {
        for _ in 0..5 {
            let inputs: Vec<NdArray> = shapes.iter().map(|s| random(&mut rng, s)).collect();
            let out_shape = eval(f, &inputs).shape().to_vec();
            let proj = random(&mut rng, &out_shape);
            let err = check_reverse(f, &inputs, &proj);
            assert!(err <= 1e-5, "{name}: reverse relative error {err:e}");
        }
    }
}

#[test]
fn forward_mode_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for (name, shapes, f) in primitives() {
        for _ in 0..5 {
            let inputs: Vec<NdArray> = shapes.iter().map(|s| random(&mut rng, s)).collect();
            let dirs: Vec<NdArray> = shapes.iter().map(|s| random(&mut rng, s)).collect();
            let err = check_forward(f, &inputs, &dirs);
            assert!(err <= 1e-6, "{name}: forward relative error {err:e}");
        }
    }
}

#[test]
fn stop_gradient_blocks_both_modes() {
    let f: Prim = |t, x| {
        let s = t.stop_gradient(x[0])?;
        t.mul(s, x[1])
    };
    let x = NdArray::row(vec![1.5, -0.5]);
    let y = NdArray::row(vec![2.0, 3.0]);
    let (_, pulled) = vjp(|t, v| Ok(vec![f(t, v)?]), &[x.clone(), y.clone()], &[NdArray::row(vec![1.0, 1.0])]).unwrap();
    assert_eq!(pulled[0].data(), &[0.0, 0.0]);
    assert_eq!(pulled[1].data(), x.data());
    let (_, dots) = jvp(
        |t, v| Ok(vec![f(t, v)?]),
        &[x, y],
        &[NdArray::row(vec![1.0, 1.0]), NdArray::row(vec![0.0, 0.0])],
    )
    .unwrap();
    assert_eq!(dots[0].data(), &[0.0, 0.0]);
}

fn composite(t: &mut Tape, x: &[Var]) -> Result<Var> {
    // A two-layer block touching most primitives.
    let h = t.affine(x[0], x[1], x[2])?;
    let a = t.silu(h)?;
    let s = t.sin(a)?;
    let c = t.cos(h)?;
    let m = t.mul(s, c)?;
    let cat = t.concat(&[m, a], 1)?;
    let sl = t.slice(cat, 1, 1, 4)?;
    let th = t.tanh(sl)?;
    t.scale(th, 0.5)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn jvp_vjp_duality(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes = [vec![3, 4], vec![4, 3], vec![1, 3]];
        let inputs: Vec<NdArray> = shapes.iter().map(|s| random(&mut rng, s)).collect();
        let u: Vec<NdArray> = shapes.iter().map(|s| random(&mut rng, s)).collect();
        let (outs, dots) = jvp(|t, x| Ok(vec![composite(t, x)?]), &inputs, &u).unwrap();
        let v = random(&mut rng, outs[0].shape());
        let (_, pulled) = vjp(|t, x| Ok(vec![composite(t, x)?]), &inputs, std::slice::from_ref(&v)).unwrap();
        let lhs = v.dot(&dots[0]).unwrap();
        let rhs: f64 = pulled.iter().zip(&u).map(|(p, d)| p.dot(d).unwrap()).sum();
        let rel = (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-12);
        prop_assert!(rel <= 1e-8, "duality {lhs} vs {rhs}");
    }

    #[test]
    fn stop_gradient_preserves_values(vals in proptest::collection::vec(-1e3f64..1e3, 1..16)) {
        let mut t = Tape::new();
        let x = t.leaf(NdArray::row(vals.clone())).unwrap();
        let s = t.stop_gradient(x).unwrap();
        let s2 = t.stop_gradient(s).unwrap();
        prop_assert_eq!(t.value(s2).data(), vals.as_slice());
    }
}
