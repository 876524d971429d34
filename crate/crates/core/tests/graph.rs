use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ttct_core::tensor::ParamStore;
use ttct_core::tensor::*;

/// Central-difference check of every scalar of every parameter.
fn check(store: &mut ParamStore, f: impl Fn(&ParamStore, &mut Graph) -> Var) {
    let mut g = Graph::new();
    let loss = f(store, &mut g);
    let grads = g.backward(loss);
    let h = 1e-6;
    for p in 0..store.len() {
        let analytic = grads.get(store.key(p)).cloned().unwrap_or_else(|| {
            let (r, c) = store.get(p).shape();
            Matrix::zeros(r, c)
        });
        for i in 0..store.get(p).len() {
            let orig = store.get(p).data()[i];
            store.get_mut(p).data_mut()[i] = orig + h;
            let mut g1 = Graph::new();
            let l1 = f(store, &mut g1);
            let up = g1.scalar(l1);
            store.get_mut(p).data_mut()[i] = orig - h;
            let mut g2 = Graph::new();
            let l2 = f(store, &mut g2);
            let down = g2.scalar(l2);
            store.get_mut(p).data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = analytic.data()[i];
            let err = (fd - an).abs() / (fd.abs().max(an.abs()).max(1e-3));
            assert!(err < 1e-5, "param {} elem {i}: fd {fd} analytic {an}", store.name(p));
        }
    }
}

fn store(rng: &mut ChaCha8Rng, shapes: &[(usize, usize)]) -> ParamStore {
    let mut s = ParamStore::new();
    for (i, &(r, c)) in shapes.iter().enumerate() {
        s.add_normal(format!("p{i}"), r, c, 0.7, rng);
    }
    s
}

#[test]
fn gradcheck_dense_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut s = store(&mut rng, &[(3, 4), (4, 5), (1, 5), (3, 5), (3, 1)]);
    check(&mut s, |s, g| {
        let a = s.var(g, 0);
        let b = s.var(g, 1);
        let bias = s.var(g, 2);
        let other = s.var(g, 3);
        let col = s.var(g, 4);
        let x = g.matmul(a, b);
        let x = g.add_row(x, bias);
        let y = g.gelu(x);
        let z = g.mul(y, other);
        let z = g.mul_col(z, col);
        let t = g.tanh(z);
        let sg = g.sigmoid(t);
        let l = g.log(sg, 1e-12);
        let l2 = g.log1m(sg, 1e-12);
        let w = g.add(l, l2);
        let sq = g.square(w);
        let tr = g.transpose(sq);
        let mt = g.matmul_t(tr, tr);
        g.mean_all(mt)
    });
}

#[test]
fn gradcheck_segmented_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut s = store(&mut rng, &[(6, 4), (6, 4), (6, 4)]);
    for causal in [true, false] {
        check(&mut s, |s, g| {
            let q = s.var(g, 0);
            let k = s.var(g, 1);
            let v = s.var(g, 2);
            let att = g.attention_segments(q, k, v, 2, causal, vec![(0, 2), (2, 1), (3, 3)]);
            let sq = g.square(att);
            g.sum_all(sq)
        });
    }
}

#[test]
fn segments_match_separate_sequences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let data: Vec<f64> = (0..5 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let x = Matrix::from_vec(5, 4, data);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let packed = g.attention_segments(xv, xv, xv, 2, true, vec![(0, 3), (3, 2)]);
    let a = g.constant(x.slice_rows(0, 3));
    let b = g.constant(x.slice_rows(3, 2));
    let ra = g.attention(a, a, a, 2, true);
    let rb = g.attention(b, b, b, 2, true);
    assert_eq!(g.value(packed).slice_rows(0, 3), *g.value(ra));
    assert_eq!(g.value(packed).slice_rows(3, 2), *g.value(rb));
}

#[test]
fn gradcheck_norm_attention_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut s = store(&mut rng, &[(5, 4), (1, 4), (1, 4), (4, 4), (4, 4), (4, 4), (7, 4)]);
    for causal in [true, false] {
        check(&mut s, |s, g| {
            let x = s.var(g, 0);
            let gam = s.var(g, 1);
            let bet = s.var(g, 2);
            let ln = g.layer_norm(x, gam, bet, 1e-5);
            let wq = s.var(g, 3);
            let wk = s.var(g, 4);
            let wv = s.var(g, 5);
            let q = g.matmul(ln, wq);
            let k = g.matmul(ln, wk);
            let v = g.matmul(ln, wv);
            let att = g.attention(q, k, v, 2, causal);
            let n = g.row_normalize(att, 1e-8);
            let table = s.var(g, 6);
            let e = g.embed_sum(table, vec![0, 3, 3, 6, 1, 2, 5, 5, 4, 0], 2);
            let h = g.add(n, e);
            let ls = g.log_softmax_rows(h);
            let pick = g.pick_cols(ls, vec![0, 1, 2, 3, 0]);
            let m = g.mean_rows(ls);
            let sc = g.slice_cols(ls, 1, 2);
            let sr = g.slice_rows(sc, 1, 3);
            let gr = g.gather_rows(sr, vec![2, 0, 0]);
            let cs = g.sum_cols(gr);
            let a1 = g.sum_all(pick);
            let a2 = g.sum_all(m);
            let a3 = g.sum_all(cs);
            let cat = g.concat_rows(&[a1, a2, a3]);
            let cat2 = g.concat_cols(&[cat, cat]);
            let rs = g.sum_rows(cat2);
            let e2 = g.exp(rs);
            g.sum_all(e2)
        });
    }
}

#[test]
fn gradcheck_scale_min_clamp() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut s = store(&mut rng, &[(4, 3), (4, 3), (1, 1)]);
    check(&mut s, |s, g| {
        let a = s.var(g, 0);
        let b = s.var(g, 1);
        let k = s.var(g, 2);
        let ek = g.exp(k);
        let sa = g.scale_by(a, ek);
        let m = g.min(sa, b);
        let c = g.clamp(m, -0.5, 0.5);
        let d = g.sub(c, a);
        let d = g.scale(d, 3.0);
        let d = g.add_scalar(d, 1.0);
        let r = g.relu(d);
        g.sum_all(r)
    });
}

#[test]
fn detach_blocks_gradient() {
    let mut s = ParamStore::new();
    s.add("w", Matrix::from_vec(1, 2, vec![1.0, 2.0]));
    let mut g = Graph::new();
    let w = s.var(&mut g, 0);
    let d = g.detach(w);
    let y = g.mul(d, d);
    let l = g.sum_all(y);
    let grads = g.backward(l);
    assert!(grads.get(s.key(0)).is_none());
}
