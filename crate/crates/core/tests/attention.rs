mod common;

use cdetr::attention::{
    AttentionConfig, AttentionMaps, AttentionVariant, CrossAttention, CrossInputs, MapKind, MemoryFeatures, SelfAttention,
};
use cdetr::nn::{Linear, ParamStore};
use cdetr::{Graph, Tensor};
use common::{identity, init, matmul, max_abs_diff, rng, uniform};

fn cross(variant: AttentionVariant, d: usize, m: usize, seed: u64) -> (CrossAttention, ParamStore) {
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let ca = CrossAttention::new(
        &mut init(&mut store, &mut r),
        "ca",
        AttentionConfig::new(d, m, variant).unwrap(),
    );
    // Nonzero biases so no term silently vanishes.
    for t in store.tensors_mut() {
        if t.rank() == 1 {
            *t = uniform(&mut r, t.shape(), -0.5, 0.5);
        }
    }
    (ca, store)
}

struct Run {
    output: Tensor,
    maps: AttentionMaps,
}

fn run(ca: &CrossAttention, store: &ParamStore, cq: &Tensor, pq: &Tensor, ck: &Tensor, pk: &Tensor, grid: (usize, usize)) -> Run {
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let inputs = CrossInputs {
        content_query: g.constant(cq.clone()),
        spatial_query: g.constant(pq.clone()),
        key_content: None,
    };
    let memory = MemoryFeatures {
        content: g.constant(ck.clone()),
        positions: g.constant(pk.clone()),
        height: grid.0,
        width: grid.1,
    };
    let out = ca.forward(&mut g, &p, &inputs, &memory, true).unwrap();
    Run {
        output: g.value(out.output).clone(),
        maps: out.maps.unwrap(),
    }
}

fn linear_apply(store: &ParamStore, l: &Linear, x: &Tensor) -> Vec<f64> {
    let n = x.rows();
    let mut y = matmul(x.data(), store.get(l.weight).data(), n, l.fan_in, l.fan_out);
    if let Some(b) = l.bias {
        for i in 0..n {
            for j in 0..l.fan_out {
                y[i * l.fan_out + j] += store.get(b).data()[j];
            }
        }
    }
    y
}

/// `a_hᵀ b_h` for head `h` of row-major `[*, d]` buffers.
fn head_dot(a: &[f64], b: &[f64], i: usize, j: usize, d: usize, h: usize, dh: usize) -> f64 {
    (h * dh..(h + 1) * dh).map(|t| a[i * d + t] * b[j * d + t]).sum()
}

fn add(a: &Tensor, b: &Tensor) -> Tensor {
    Tensor::new(a.shape().to_vec(), a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect()).unwrap()
}

#[test]
fn self_attention_on_one_element_is_value_then_output_projection() {
    let mut store = ParamStore::new();
    let mut r = rng(3);
    let sa = SelfAttention::new(&mut init(&mut store, &mut r), "sa", 8, 2).unwrap();
    for t in store.tensors_mut() {
        if t.rank() == 1 {
            *t = uniform(&mut r, t.shape(), -0.5, 0.5);
        }
    }
    let x = uniform(&mut r, &[1, 8], -1.0, 1.0);
    let pos = uniform(&mut r, &[1, 8], -1.0, 1.0);
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let (xv, pv) = (g.constant(x.clone()), g.constant(pos));
    let y = sa.forward(&mut g, &p, xv, pv).unwrap();
    let v = Tensor::new(vec![1, 8], linear_apply(&store, &sa.value, &x)).unwrap();
    let expected = linear_apply(&store, &sa.output, &v);
    assert!(max_abs_diff(g.value(y).data(), &expected) < 1e-12);
}

#[test]
fn self_attention_is_permutation_equivariant_and_symmetric() {
    let mut store = ParamStore::new();
    let mut r = rng(4);
    let sa = SelfAttention::new(&mut init(&mut store, &mut r), "sa", 8, 2).unwrap();
    let n = 5;
    let mut x = uniform(&mut r, &[n, 8], -1.0, 1.0);
    let mut pos = uniform(&mut r, &[n, 8], -1.0, 1.0);
    let forward = |x: &Tensor, pos: &Tensor| {
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let (xv, pv) = (g.constant(x.clone()), g.constant(pos.clone()));
        let y = sa.forward(&mut g, &p, xv, pv).unwrap();
        g.value(y).clone()
    };
    let base = forward(&x, &pos);
    let perm = [3, 0, 4, 1, 2];
    let permute = |t: &Tensor| {
        Tensor::from_rows(&perm.iter().map(|&i| t.row(i).to_vec()).collect::<Vec<_>>()).unwrap()
    };
    let moved = forward(&permute(&x), &permute(&pos));
    for (k, &i) in perm.iter().enumerate() {
        assert!(max_abs_diff(moved.row(k), base.row(i)) < 1e-12);
    }

    // Duplicate element 0 into slot 2.
    let (r0, p0) = (x.row(0).to_vec(), pos.row(0).to_vec());
    x.data_mut()[16..24].copy_from_slice(&r0);
    pos.data_mut()[16..24].copy_from_slice(&p0);
    let dup = forward(&x, &pos);
    assert_eq!(dup.row(0), dup.row(2));
}

#[test]
fn additive_without_positions_is_pure_content_attention() {
    let (d, m, n, k) = (8, 2, 3, 6);
    let (ca, store) = cross(AttentionVariant::Additive, d, m, 5);
    let mut r = rng(50);
    let cq = uniform(&mut r, &[n, d], -1.0, 1.0);
    let ck = uniform(&mut r, &[k, d], -1.0, 1.0);
    let zq = Tensor::zeros(&[n, d]);
    let zk = Tensor::zeros(&[k, d]);
    let out = run(&ca, &store, &cq, &zq, &ck, &zk, (2, 3));
    let q = linear_apply(&store, &ca.query_content, &cq);
    let kk = linear_apply(&store, &ca.key_content, &ck);
    let dh = d / m;
    for h in 0..m {
        let l = &out.maps.heads[h].combined_logits;
        for i in 0..n {
            for j in 0..k {
                let expect = head_dot(&q, &kk, i, j, d, h, dh) / (dh as f64).sqrt();
                assert!((l.at2(i, j) - expect).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn additive_logits_expand_into_four_terms() {
    let (d, m, n, k) = (8, 2, 4, 6);
    for seed in 0..20 {
        let (ca, store) = cross(AttentionVariant::Additive, d, m, seed);
        let mut r = rng(1000 + seed);
        let cq = uniform(&mut r, &[n, d], -1.0, 1.0);
        let oq = uniform(&mut r, &[n, d], -1.0, 1.0);
        let ck = uniform(&mut r, &[k, d], -1.0, 1.0);
        let pk = uniform(&mut r, &[k, d], -1.0, 1.0);
        let out = run(&ca, &store, &cq, &oq, &ck, &pk, (2, 3));
        // Query side: W c_q + b and W o_q; key side: W c_k + b and W p_k.
        let qc = linear_apply(&store, &ca.query_content, &cq);
        let qo = matmul(oq.data(), store.get(ca.query_content.weight).data(), n, d, d);
        let kc = linear_apply(&store, &ca.key_content, &ck);
        let kp = matmul(pk.data(), store.get(ca.key_content.weight).data(), k, d, d);
        let dh = d / m;
        let scale = (dh as f64).sqrt();
        for h in 0..m {
            let maps = &out.maps.heads[h];
            for i in 0..n {
                for j in 0..k {
                    let t1 = head_dot(&qc, &kc, i, j, d, h, dh);
                    let t2 = head_dot(&qc, &kp, i, j, d, h, dh);
                    let t3 = head_dot(&qo, &kc, i, j, d, h, dh);
                    let t4 = head_dot(&qo, &kp, i, j, d, h, dh);
                    assert!((maps.combined_logits.at2(i, j) * scale - (t1 + t2 + t3 + t4)).abs() < 1e-12);
                    assert!((maps.content_logits.at2(i, j) * scale - (t1 + t3)).abs() < 1e-12);
                    assert!((maps.spatial_logits.at2(i, j) * scale - (t2 + t4)).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn equal_keys_give_uniform_weights() {
    for variant in [AttentionVariant::Additive, AttentionVariant::Conditional] {
        let (d, k) = (8, 6);
        let (ca, store) = cross(variant, d, 2, 6);
        let mut r = rng(60);
        let cq = uniform(&mut r, &[3, d], -1.0, 1.0);
        let pq = uniform(&mut r, &[3, d], -1.0, 1.0);
        let row_c = uniform(&mut r, &[1, d], -1.0, 1.0);
        let row_p = uniform(&mut r, &[1, d], -1.0, 1.0);
        let ck = Tensor::from_rows(&vec![row_c.data().to_vec(); k]).unwrap();
        let pk = Tensor::from_rows(&vec![row_p.data().to_vec(); k]).unwrap();
        let out = run(&ca, &store, &cq, &pq, &ck, &pk, (2, 3));
        for h in &out.maps.heads {
            for w in h.combined.data() {
                assert!((w - 1.0 / k as f64).abs() < 1e-15);
            }
        }
    }
}

fn identity_conditional(d: usize) -> (CrossAttention, ParamStore) {
    let (ca, mut store) = cross(AttentionVariant::Conditional, d, 1, 7);
    for l in [&ca.query_content, &ca.key_content, ca.query_spatial.as_ref().unwrap(), ca.key_spatial.as_ref().unwrap()] {
        *store.get_mut(l.weight) = identity(d);
        if let Some(b) = l.bias {
            *store.get_mut(b) = Tensor::zeros(&[d]);
        }
    }
    (ca, store)
}

#[test]
fn conditional_logit_is_content_plus_spatial_by_hand() {
    let (ca, store) = identity_conditional(2);
    let t = |v: [f64; 2]| Tensor::new(vec![1, 2], v.to_vec()).unwrap();
    let out = run(&ca, &store, &t([1.0, 0.0]), &t([0.0, 1.0]), &t([2.0, 0.0]), &t([0.0, 3.0]), (1, 1));
    let h = &out.maps.heads[0];
    let scale = ca.config.scale();
    assert_eq!(h.content_logits.data()[0] * scale, 2.0);
    assert_eq!(h.spatial_logits.data()[0] * scale, 3.0);
    assert_eq!(h.combined_logits.data()[0] * scale, 5.0);
}

#[test]
fn zero_spatial_query_gives_uniform_spatial_map() {
    let (d, m, n, k) = (8, 2, 3, 6);
    let (ca, store) = cross(AttentionVariant::Conditional, d, m, 8);
    let mut r = rng(80);
    let cq = uniform(&mut r, &[n, d], -1.0, 1.0);
    let ck = uniform(&mut r, &[k, d], -1.0, 1.0);
    let pk = uniform(&mut r, &[k, d], -1.0, 1.0);
    let out = run(&ca, &store, &cq, &Tensor::zeros(&[n, d]), &ck, &pk, (2, 3));
    for h in &out.maps.heads {
        assert!(h.spatial_logits.data().iter().all(|&v| v == 0.0));
        assert!(h.spatial.data().iter().all(|&v| (v - 1.0 / k as f64).abs() < 1e-15));
        assert_eq!(h.combined, h.content);
    }
}

#[test]
fn conditional_streams_are_independent() {
    let (d, m, n, k) = (8, 2, 3, 6);
    for seed in 0..100 {
        let (ca, store) = cross(AttentionVariant::Conditional, d, m, seed);
        let mut r = rng(10_000 + seed);
        let cq = uniform(&mut r, &[n, d], -1.0, 1.0);
        let pq = uniform(&mut r, &[n, d], -1.0, 1.0);
        let ck = uniform(&mut r, &[k, d], -1.0, 1.0);
        let pk = uniform(&mut r, &[k, d], -1.0, 1.0);
        let a = run(&ca, &store, &cq, &pq, &ck, &pk, (2, 3));
        for h in &a.maps.heads {
            let sum: Vec<f64> = h.content_logits.data().iter().zip(h.spatial_logits.data()).map(|(c, s)| c + s).collect();
            assert!(max_abs_diff(h.combined_logits.data(), &sum) < 1e-12);
        }
        let ck2 = add(&ck, &uniform(&mut r, &[k, d], -1.0, 1.0));
        let cq2 = add(&cq, &uniform(&mut r, &[n, d], -1.0, 1.0));
        let b = run(&ca, &store, &cq2, &pq, &ck2, &pk, (2, 3));
        for (x, y) in a.maps.heads.iter().zip(&b.maps.heads) {
            assert_eq!(x.spatial, y.spatial);
            assert_ne!(x.content, y.content);
        }
        assert!(a.output.is_finite());
    }
}

#[test]
fn maps_are_distributions_and_reshape_losslessly() {
    for variant in [AttentionVariant::Additive, AttentionVariant::Conditional] {
        let (d, n) = (8, 4);
        let (ca, store) = cross(variant, d, 2, 9);
        let mut r = rng(90);
        let (gh, gw) = (3, 4);
        let k = gh * gw;
        let cq = uniform(&mut r, &[n, d], -2.0, 2.0);
        let pq = uniform(&mut r, &[n, d], -2.0, 2.0);
        let ck = uniform(&mut r, &[k, d], -2.0, 2.0);
        let pk = uniform(&mut r, &[k, d], -2.0, 2.0);
        let out = run(&ca, &store, &cq, &pq, &ck, &pk, (gh, gw));
        for (hi, h) in out.maps.heads.iter().enumerate() {
            for kind in MapKind::ALL {
                let w = h.weights(kind);
                for q in 0..n {
                    let s: f64 = w.row(q).iter().sum();
                    assert!((s - 1.0).abs() < 1e-12, "{variant:?} {kind:?} sums to {s}");
                    let map = out.maps.map(hi, kind, q).unwrap();
                    assert_eq!(map.shape(), &[gh, gw]);
                    assert_eq!(map.data(), w.row(q));
                }
            }
        }
        assert!(out.maps.map(9, MapKind::Spatial, 0).is_err());
        assert!(out.maps.map(0, MapKind::Spatial, n).is_err());
    }
}

#[test]
fn mismatched_widths_are_rejected() {
    let (ca, store) = cross(AttentionVariant::Conditional, 8, 2, 1);
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let inputs = CrossInputs {
        content_query: g.constant(Tensor::zeros(&[2, 8])),
        spatial_query: g.constant(Tensor::zeros(&[2, 6])),
        key_content: None,
    };
    let memory = MemoryFeatures {
        content: g.constant(Tensor::zeros(&[4, 8])),
        positions: g.constant(Tensor::zeros(&[4, 8])),
        height: 2,
        width: 2,
    };
    assert!(ca.forward(&mut g, &p, &inputs, &memory, false).is_err());
    assert!(AttentionConfig::new(8, 3, AttentionVariant::Additive).is_err());
}
