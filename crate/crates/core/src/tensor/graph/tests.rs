use super::*;
use crate::tensor::gradcheck::{check_gradients, seeded_tensor};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rand(r: usize, c: usize, seed: u64) -> Tensor<f64> {
    seeded_tensor(r, c, seed, 1.0)
}

fn vec1(n: usize, seed: u64) -> Tensor<f64> {
    let t = rand(1, n, seed);
    Tensor::new(vec![n], t.into_data()).unwrap()
}

/// Projects a matrix output onto fixed random weights so every element
/// contributes to the scalar.
fn project(g: &mut Graph<f64>, x: Var, seed: u64) -> Result<Var> {
    let (r, c) = g.value(x).dims2()?;
    let w = g.constant(Tensor::new(g.shape(x).to_vec(), rand(r, c, seed).into_data())?);
    let m = g.mul(x, w)?;
    g.sum(m)
}

fn assert_grad<F>(name: &str, inputs: &[Tensor<f64>], f: F)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let r = check_gradients(inputs, H, f).unwrap();
    assert!(r.checked > 0);
    assert!(r.max_rel_error < TOL, "{name}: max rel error {}", r.max_rel_error);
}

#[test]
fn matmul_identity() {
    let mut g = Graph::<f64>::new();
    let x = rand(3, 4, 1);
    let i = g.constant(Tensor::identity(3));
    let xv = g.constant(x.clone());
    let y = g.matmul(i, xv).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn shape_errors_name_both_shapes() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(rand(2, 3, 1));
    let b = g.constant(rand(2, 3, 2));
    let err = g.matmul(a, b).unwrap_err();
    match err {
        GurError::ShapeMismatch { left, right, .. } => {
            assert_eq!(left, vec![2, 3]);
            assert_eq!(right, vec![2, 3]);
        }
        e => panic!("unexpected {e}"),
    }
    let c = g.constant(rand(3, 2, 3));
    assert!(g.add(a, c).is_err());
    assert!(g.backward(a).is_err());
}

#[test]
fn softmax_uniform_and_sums() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_fn(2, 5, |_, _| 3.0));
    let y = g.softmax(x, 1).unwrap();
    assert!(g.value(y).data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    let x = g.constant(rand(6, 7, 9));
    for axis in [0, 1] {
        let y = g.softmax(x, axis).unwrap();
        let t = g.value(y);
        if axis == 1 {
            for r in 0..6 {
                assert!((t.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        } else {
            for c in 0..7 {
                let s: f64 = (0..6).map(|r| t.row(r)[c]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn layer_norm_moments() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(seeded_tensor(5, 16, 3, 4.0));
    let gain = g.constant(Tensor::new(vec![16], vec![1.0; 16]).unwrap());
    let bias = g.constant(Tensor::zeros(vec![16]));
    let y = g.layer_norm(x, gain, bias, 1e-12).unwrap();
    for r in 0..5 {
        let row = g.value(y).row(r);
        let mean = row.iter().sum::<f64>() / 16.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-10);
        assert!((var - 1.0).abs() < 1e-6);
    }
    assert!(g.layer_norm(x, gain, bias, 0.0).is_err());
}

#[test]
fn cross_entropy_uniform_is_ln_v() {
    let mut g = Graph::<f64>::new();
    let l = g.constant(Tensor::zeros(vec![4, 7]));
    let loss = g.cross_entropy(l, &[0, 3, 6, 2], None).unwrap();
    assert!((g.value(loss).item() - 7f64.ln()).abs() < 1e-12);
    let loss = g.cross_entropy(l, &[0, 9, 9, 2], Some(9)).unwrap();
    assert!((g.value(loss).item() - 7f64.ln()).abs() < 1e-12);
    assert!(g.cross_entropy(l, &[9, 9, 9, 9], Some(9)).is_err());
    assert!(g.cross_entropy(l, &[0, 1], None).is_err());
}

#[test]
fn grad_elementwise() {
    assert_grad("add", &[rand(3, 4, 1), rand(3, 4, 2)], |g, v| {
        let y = g.add(v[0], v[1])?;
        project(g, y, 10)
    });
    assert_grad("mul", &[rand(3, 4, 1), rand(3, 4, 2)], |g, v| {
        let y = g.mul(v[0], v[1])?;
        project(g, y, 10)
    });
    assert_grad("add_bias", &[rand(3, 4, 1), vec1(4, 2)], |g, v| {
        let y = g.add_bias(v[0], v[1])?;
        project(g, y, 10)
    });
    assert_grad("scale", &[rand(3, 4, 1)], |g, v| {
        let y = g.scale(v[0], -2.5)?;
        project(g, y, 10)
    });
    assert_grad("gelu", &[seeded_tensor(4, 5, 1, 3.0)], |g, v| {
        let y = g.gelu(v[0])?;
        project(g, y, 10)
    });
    assert_grad("tanh", &[rand(4, 5, 1)], |g, v| {
        let y = g.tanh(v[0])?;
        project(g, y, 10)
    });
    assert_grad("sum", &[rand(2, 3, 1)], |g, v| g.sum(v[0]));
}

#[test]
fn grad_matmul_family() {
    assert_grad("matmul", &[rand(3, 4, 1), rand(4, 5, 2)], |g, v| {
        let y = g.matmul(v[0], v[1])?;
        project(g, y, 10)
    });
    assert_grad("matmul_t", &[rand(3, 4, 1), rand(5, 4, 2)], |g, v| {
        let y = g.matmul_t(v[0], v[1])?;
        project(g, y, 10)
    });
    assert_grad("transpose", &[rand(3, 4, 1)], |g, v| {
        let y = g.transpose(v[0])?;
        project(g, y, 10)
    });
}

#[test]
fn grad_normalizers() {
    for axis in [0, 1] {
        assert_grad("softmax", &[rand(4, 5, 1)], move |g, v| {
            let y = g.softmax(v[0], axis)?;
            project(g, y, 10)
        });
    }
    assert_grad("layer_norm", &[rand(4, 6, 1), vec1(6, 2), vec1(6, 3)], |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
        project(g, y, 10)
    });
    assert_grad("l2_normalize", &[rand(4, 6, 1)], |g, v| {
        let y = g.l2_normalize(v[0])?;
        project(g, y, 10)
    });
}

#[test]
fn grad_gathers() {
    assert_grad("embed", &[rand(6, 4, 1)], |g, v| {
        let y = g.embed(v[0], &[0, 3, 3, 5, 1])?;
        project(g, y, 10)
    });
    assert_grad("select_rows", &[rand(6, 4, 1)], |g, v| {
        let y = g.select_rows(v[0], &[5, 0, 5])?;
        project(g, y, 10)
    });
    assert_grad("cross_entropy", &[seeded_tensor(5, 7, 1, 2.0)], |g, v| {
        g.cross_entropy(v[0], &[0, 6, 99, 3, 3], Some(99))
    });
}

#[test]
fn grad_attention() {
    for causal in [false, true] {
        let spec = AttentionSpec {
            batch: 2,
            q_len: 4,
            k_len: 4,
            heads: 2,
            key_lens: vec![4, 3],
            causal,
        };
        assert_grad(
            "attention",
            &[rand(8, 6, 1), rand(8, 6, 2), rand(8, 6, 3)],
            move |g, v| {
                let y = g.attention(v[0], v[1], v[2], &spec)?;
                project(g, y, 10)
            },
        );
    }
    let cross = AttentionSpec {
        batch: 2,
        q_len: 3,
        k_len: 5,
        heads: 3,
        key_lens: vec![5, 2],
        causal: false,
    };
    assert_grad(
        "cross attention",
        &[rand(6, 6, 1), rand(10, 6, 2), rand(10, 6, 3)],
        move |g, v| {
            let y = g.attention(v[0], v[1], v[2], &cross)?;
            project(g, y, 10)
        },
    );
}

#[test]
fn grad_five_op_graph() {
    assert_grad("composite", &[rand(3, 4, 1), rand(4, 4, 2), vec1(4, 3)], |g, v| {
        let a = g.matmul(v[0], v[1])?;
        let b = g.add_bias(a, v[2])?;
        let c = g.tanh(b)?;
        let d = g.softmax(c, 1)?;
        let e = g.l2_normalize(d)?;
        project(g, e, 11)
    });
}

#[test]
fn attention_ignores_masked_keys() {
    let spec = AttentionSpec {
        batch: 1,
        q_len: 3,
        k_len: 5,
        heads: 1,
        key_lens: vec![3],
        causal: false,
    };
    let q = rand(3, 4, 1);
    let k = rand(5, 4, 2);
    let v = rand(5, 4, 3);
    let mut k2 = k.clone();
    let mut v2 = v.clone();
    for j in 3..5 {
        for c in 0..4 {
            k2.data_mut()[j * 4 + c] = 100.0;
            v2.data_mut()[j * 4 + c] = -50.0;
        }
    }
    let run = |k: &Tensor<f64>, v: &Tensor<f64>| {
        let mut g = Graph::new();
        let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
        let y = g.attention(qv, kv, vv, &spec).unwrap();
        g.value(y).clone()
    };
    assert_eq!(run(&k, &v), run(&k2, &v2));
}

#[test]
fn backward_is_bit_deterministic() {
    let run = || {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(rand(16, 32, 1), true);
        let b = g.leaf(rand(32, 16, 2), true);
        let y = g.matmul(a, b).unwrap();
        let y = g.gelu(y).unwrap();
        let loss = project(&mut g, y, 4).unwrap();
        let gr = g.backward(loss).unwrap();
        (gr.get(a).unwrap().to_vec(), gr.get(b).unwrap().to_vec())
    };
    assert_eq!(run(), run());
}

#[test]
fn parallel_and_sequential_kernels_agree() {
    let run = || {
        let mut g = Graph::<f32>::new();
        let a = g.leaf(seeded_tensor(128, 96, 1, 1.0), true);
        let b = g.leaf(seeded_tensor(96, 80, 2, 1.0), true);
        let y = g.matmul(a, b).unwrap();
        let s = g.sum(y).unwrap();
        let gr = g.backward(s).unwrap();
        (g.value(y).clone(), gr.get(a).unwrap().to_vec())
    };
    let par = run();
    crate::tensor::set_deterministic(true);
    let seq = run();
    crate::tensor::set_deterministic(false);
    assert_eq!(par, seq);
}

#[test]
fn inference_graph_keeps_no_grad() {
    let mut store = ParamStore::<f64>::new();
    let id = store.add("w", rand(2, 2, 1));
    let mut g = Graph::inference();
    let w = g.param(&store, id);
    assert_eq!(g.param(&store, id), w);
    let s = g.sum(w).unwrap();
    let grads = g.backward(s).unwrap();
    assert!(grads.get(w).is_none());
}
