//! Finite-difference checks for every differentiable op, one at a time.
//!
//! Each case routes a parameter tensor through the op under test, collapses
//! the output to a scalar through fixed random mixing matrices (so upstream
//! gradients are non-uniform and asymmetric), and compares the analytic
//! gradient against central differences at every coordinate.

use crosscheck_core::gradcheck::grad_check;
use crosscheck_core::nn;
use crosscheck_core::params::ParamStore;
use crosscheck_core::tape::{Graph, NodeId};
use crosscheck_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Collapses an m x n node to a scalar via sum(L @ X @ R) with fixed
/// pseudo-random L (1 x m) and R (n x 1).
fn scalarize(g: &mut Graph<f64>, x: NodeId) -> Result<NodeId> {
    let (m, n) = g.shape(x);
    let l: Vec<f64> = (0..m).map(|i| 0.3 + 0.7 * ((i * 13 % 7) as f64) / 7.0).collect();
    let r: Vec<f64> = (0..n).map(|i| 0.2 + 0.9 * ((i * 11 % 5) as f64) / 5.0).collect();
    let ln = g.constant_f64(1, m, &l)?;
    let rn = g.constant_f64(n, 1, &r)?;
    let lx = g.matmul(ln, x)?;
    let lxr = g.matmul(lx, rn)?;
    g.sum_all(lxr)
}

/// Runs the check for a builder that maps the parameter named "p" (and
/// optionally "q") to a scalar loss.
fn check_op<F>(name: &str, shapes: &[(&str, usize, usize)], tol: f64, build: F)
where
    F: Fn(&ParamStore<f64>, &mut Graph<f64>) -> Result<NodeId>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE);
    let mut params = ParamStore::<f64>::new();
    for (pname, r, c) in shapes {
        // Center away from zero kinks but keep both signs present.
        let data: Vec<f64> = (0..r * c).map(|_| rng.gen_range(-1.2..1.2)).collect();
        params
            .insert(pname, crosscheck_core::tensor::Tensor::from_f64(*r, *c, &data).unwrap())
            .unwrap();
    }
    let eval = |ps: &ParamStore<f64>| -> Result<(f64, Vec<f64>)> {
        let mut g = Graph::new(ps);
        let root = build(ps, &mut g)?;
        Ok((g.scalar(root)?, g.backward(root)?))
    };
    let (_, analytic) = eval(&params).unwrap_or_else(|e| panic!("{name}: forward failed: {e}"));
    let coords: Vec<usize> = (0..params.flat_len()).collect();
    let out = grad_check(&mut params, &analytic, &coords, 1e-6, |ps| {
        eval(ps).map(|(l, _)| l)
    })
    .unwrap_or_else(|e| panic!("{name}: probe failed: {e}"));
    assert!(
        out.max_rel_err < tol,
        "{name}: max rel err {} at coord {} ({})",
        out.max_rel_err,
        out.worst_coord,
        out.worst_param
    );
}

#[test]
fn matmul_gradients() {
    check_op("matmul", &[("p", 3, 4), ("q", 4, 2)], 1e-7, |ps, g| {
        let p = g.param(ps.id_of("p").unwrap());
        let q = g.param(ps.id_of("q").unwrap());
        let y = g.matmul(p, q)?;
        scalarize(g, y)
    });
}

#[test]
fn matmul_nt_gradients() {
    check_op("matmul_nt", &[("p", 3, 4), ("q", 5, 4)], 1e-7, |ps, g| {
        let p = g.param(ps.id_of("p").unwrap());
        let q = g.param(ps.id_of("q").unwrap());
        let y = g.matmul_nt(p, q)?;
        scalarize(g, y)
    });
}

#[test]
fn add_and_add_row_gradients() {
    check_op("add", &[("p", 3, 3), ("q", 3, 3)], 1e-7, |ps, g| {
        let p = g.param(ps.id_of("p").unwrap());
        let q = g.param(ps.id_of("q").unwrap());
        let y = g.add(p, q)?;
        scalarize(g, y)
    });
    check_op("add_row", &[("p", 4, 3), ("q", 1, 3)], 1e-7, |ps, g| {
        let p = g.param(ps.id_of("p").unwrap());
        let q = g.param(ps.id_of("q").unwrap());
        let y = g.add_row(p, q)?;
        scalarize(g, y)
    });
}

#[test]
fn scale_gelu_sigmoid_gradients() {
    check_op("scale", &[("p", 2, 5)], 1e-7, |ps, g| {
        let p = g.param(ps.id_of("p").unwrap());
        let y = g.scale(p, -2.75)?;
        scalarize(g, y)
    });
    check_op("gelu", &[("p", 3, 4)], 1e-6, |ps, g| {
        let p = g.param(ps.id_of("p").unwrap());
        let y = g.gelu(p)?;
        scalarize(g, y)
    });
    check_op("sigmoid", &[("p", 3, 4)], 1e-7, |ps, g| {
        let p = g.param(ps.id_of("p").unwrap());
        let y = g.sigmoid(p)?;
        scalarize(g, y)
    });
}

#[test]
fn softmax_gradients_with_mask() {
    check_op("softmax", &[("p", 3, 5)], 1e-7, |ps, g| {
        let p = g.param(ps.id_of("p").unwrap());
        let y = g.softmax_rows(p, None)?;
        scalarize(g, y)
    });
    check_op("softmax_masked", &[("p", 3, 5)], 1e-7, |ps, g| {
        let p = g.param(ps.id_of("p").unwrap());
        let y = g.softmax_rows(p, Some(&[true, false, true, true, false]))?;
        scalarize(g, y)
    });
}

#[test]
fn layer_norm_gradients() {
    check_op(
        "layer_norm",
        &[("p", 4, 6), ("gamma", 1, 6), ("beta", 1, 6)],
        1e-6,
        |ps, g| {
            let p = g.param(ps.id_of("p").unwrap());
            let ga = g.param(ps.id_of("gamma").unwrap());
            let be = g.param(ps.id_of("beta").unwrap());
            let y = g.layer_norm(p, ga, be)?;
            scalarize(g, y)
        },
    );
}

#[test]
fn gather_concat_zero_gradients() {
    check_op("gather_rows_dup", &[("p", 4, 3)], 1e-7, |ps, g| {
        let p = g.param(ps.id_of("p").unwrap());
        let y = g.gather_rows(p, &[2, 0, 2, 3])?; // duplicate row on purpose
        scalarize(g, y)
    });
    check_op("concat_rows", &[("p", 2, 3), ("q", 3, 3)], 1e-7, |ps, g| {
        let p = g.param(ps.id_of("p").unwrap());
        let q = g.param(ps.id_of("q").unwrap());
        let y = g.concat_rows(&[p, q, p])?; // reuse an input twice
        scalarize(g, y)
    });
    check_op("concat_cols", &[("p", 3, 2), ("q", 3, 4)], 1e-7, |ps, g| {
        let p = g.param(ps.id_of("p").unwrap());
        let q = g.param(ps.id_of("q").unwrap());
        let y = g.concat_cols(p, q)?;
        scalarize(g, y)
    });
    check_op("zero_rows", &[("p", 4, 3)], 1e-7, |ps, g| {
        let p = g.param(ps.id_of("p").unwrap());
        let y = g.zero_rows(p, &[true, false, true, false])?;
        scalarize(g, y)
    });
}

#[test]
fn cosine_gram_gradients() {
    check_op("cosine_gram", &[("p", 5, 4)], 1e-6, |ps, g| {
        let p = g.param(ps.id_of("p").unwrap());
        let y = g.cosine_gram(p)?;
        scalarize(g, y)
    });
}

#[test]
fn cosine_against_gradients() {
    check_op("cosine_against", &[("p", 5, 4), ("q", 1, 4)], 1e-6, |ps, g| {
        let p = g.param(ps.id_of("p").unwrap());
        let q = g.param(ps.id_of("q").unwrap());
        let y = g.cosine_against(p, q)?;
        scalarize(g, y)
    });
}

#[test]
fn gathered_attention_gradients() {
    check_op(
        "gathered_attention",
        &[("q", 4, 3), ("k", 6, 3), ("v", 6, 3)],
        1e-6,
        |ps, g| {
            let q = g.param(ps.id_of("q").unwrap());
            let k = g.param(ps.id_of("k").unwrap());
            let v = g.param(ps.id_of("v").unwrap());
            let sets = vec![vec![0, 2], vec![1, 3, 5], vec![4], vec![0, 1, 2, 3]];
            let y = g.gathered_attention(q, k, v, &sets)?;
            scalarize(g, y)
        },
    );
}

#[test]
fn loss_op_gradients() {
    check_op("bce_mean", &[("p", 3, 3)], 1e-6, |ps, g| {
        let p = g.param(ps.id_of("p").unwrap());
        let sig = g.sigmoid(p)?; // keep probabilities interior
        let t: Vec<f64> = (0..9).map(|i| ((i % 2) as f64)).collect();
        g.bce_mean(sig, &t, None)
    });
    check_op("bce_mean_masked", &[("p", 3, 3)], 1e-6, |ps, g| {
        let p = g.param(ps.id_of("p").unwrap());
        let sig = g.sigmoid(p)?;
        let t: Vec<f64> = (0..9).map(|i| ((i % 2) as f64)).collect();
        let valid: Vec<bool> = (0..9).map(|i| i % 3 != 1).collect();
        g.bce_mean(sig, &t, Some(&valid))
    });
    check_op("bce_logits", &[("p", 2, 4)], 1e-6, |ps, g| {
        let p = g.param(ps.id_of("p").unwrap());
        let t: Vec<f64> = (0..8).map(|i| ((i % 2) as f64)).collect();
        g.bce_logits_mean(p, &t)
    });
    check_op("l1_mean", &[("p", 2, 4)], 1e-6, |ps, g| {
        let p = g.param(ps.id_of("p").unwrap());
        // Targets far from the random inputs so no coordinate sits on the kink.
        g.l1_mean(p, &[5.0, -5.0, 5.0, -5.0, 5.0, -5.0, 5.0, -5.0])
    });
    check_op("sum_all", &[("p", 3, 3)], 1e-7, |ps, g| {
        let p = g.param(ps.id_of("p").unwrap());
        g.sum_all(p)
    });
}

#[test]
fn giou_loss_gradients() {
    // Overlapping, non-degenerate configuration.
    check_op("giou_overlap", &[("p", 1, 4)], 1e-6, |ps, g| {
        let p = g.param(ps.id_of("p").unwrap());
        let sig = g.sigmoid(p)?; // box stays in [0,1]^4
        g.giou_loss(sig, [0.4, 0.45, 0.3, 0.25])
    });
    // Disjoint boxes exercise the enclosing-box branch.
    check_op("giou_disjoint", &[("p", 1, 4)], 1e-6, |ps, g| {
        let p = g.param(ps.id_of("p").unwrap());
        let sig = g.sigmoid(p)?;
        let shrunk = g.scale(sig, 0.2)?; // stays near the origin corner
        g.giou_loss(shrunk, [0.9, 0.9, 0.1, 0.1])
    });
}

#[test]
fn attention_composite_gradients() {
    check_op(
        "attention",
        &[("q", 2, 4), ("k", 5, 4), ("v", 5, 4)],
        1e-6,
        |ps, g| {
            let q = g.param(ps.id_of("q").unwrap());
            let k = g.param(ps.id_of("k").unwrap());
            let v = g.param(ps.id_of("v").unwrap());
            let y = nn::attention(g, q, k, v, Some(&[true, true, false, true, true]))?;
            scalarize(g, y)
        },
    );
}

#[test]
fn transformer_block_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut params = ParamStore::<f64>::new();
    let block = nn::TransformerBlock::new(&mut params, &mut rng, "blk", 4).unwrap();
    let xd: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let eval = |ps: &ParamStore<f64>| -> Result<(f64, Vec<f64>)> {
        let mut g = Graph::new(ps);
        let x = g.constant_f64(5, 4, &xd)?;
        let y = block.apply(&mut g, x, Some(&[true, true, true, false, true]))?;
        let root = scalarize(&mut g, y)?;
        Ok((g.scalar(root)?, g.backward(root)?))
    };
    let (_, analytic) = eval(&params).unwrap();
    let coords: Vec<usize> = (0..params.flat_len()).collect();
    let out = grad_check(&mut params, &analytic, &coords, 1e-6, |ps| {
        eval(ps).map(|(l, _)| l)
    })
    .unwrap();
    assert!(out.max_rel_err < 1e-6, "rel err {} ({})", out.max_rel_err, out.worst_param);
}

#[test]
fn reason_block_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(78);
    let mut params = ParamStore::<f64>::new();
    let block = nn::ReasonBlock::new(&mut params, &mut rng, "rb", 4).unwrap();
    let xd: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let sets: Vec<Vec<usize>> = vec![vec![1, 2], vec![0, 3], vec![4, 1], vec![2, 0], vec![3, 2]];

    let eval = |ps: &ParamStore<f64>| -> Result<(f64, Vec<f64>)> {
        let mut g = Graph::new(ps);
        let x = g.constant_f64(5, 4, &xd)?;
        let y = block.apply(&mut g, x, x, &sets)?;
        let root = scalarize(&mut g, y)?;
        Ok((g.scalar(root)?, g.backward(root)?))
    };
    let (_, analytic) = eval(&params).unwrap();
    let coords: Vec<usize> = (0..params.flat_len()).collect();
    let out = grad_check(&mut params, &analytic, &coords, 1e-6, |ps| {
        eval(ps).map(|(l, _)| l)
    })
    .unwrap();
    assert!(out.max_rel_err < 1e-6, "rel err {} ({})", out.max_rel_err, out.worst_param);
}
