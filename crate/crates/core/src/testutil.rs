//! Plain-loop reference implementations shared by unit tests.

use crate::autograd::gelu_scalar;
use crate::nn::{Dense, Mlp, ParamStore, SelfAttention, LN_EPS};
use crate::tensor::Tensor;

pub fn rows_of(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    t.data.chunks(t.cols()).map(|r| r.to_vec()).collect()
}

pub fn ref_dense(store: &ParamStore<f64>, d: &Dense, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let w = store.get(d.w);
    let (k, n) = (w.shape[0], w.shape[1]);
    x.iter()
        .map(|row| {
            (0..n)
                .map(|j| {
                    let b = d.b.map_or(0.0, |b| store.get(b).data[j]);
                    b + (0..k).map(|p| row[p] * w.data[p * n + j]).sum::<f64>()
                })
                .collect()
        })
        .collect()
}

pub fn ref_ln(x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let m = r.iter().sum::<f64>() / n;
            let v = r.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / n;
            r.iter().map(|a| (a - m) / (v + LN_EPS).sqrt()).collect()
        })
        .collect()
}

pub fn ref_attn(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>], heads: usize, allowed: impl Fn(usize, usize) -> bool) -> Vec<Vec<f64>> {
    let d = q[0].len();
    let dh = d / heads;
    let mut out = vec![vec![0.0; d]; q.len()];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..q.len() {
            let s: Vec<Option<f64>> = (0..k.len())
                .map(|j| {
                    allowed(i, j).then(|| {
                        cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt()
                    })
                })
                .collect();
            let z: f64 = s.iter().flatten().map(|a| a.exp()).sum();
            for j in 0..k.len() {
                if let Some(sj) = s[j] {
                    for c in cols.clone() {
                        out[i][c] += sj.exp() / z * v[j][c];
                    }
                }
            }
        }
    }
    out
}

pub fn add(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

pub fn cols(x: &[Vec<f64>], start: usize, width: usize) -> Vec<Vec<f64>> {
    x.iter().map(|r| r[start..start + width].to_vec()).collect()
}

pub fn ref_mlp(store: &ParamStore<f64>, m: &Mlp, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let h = ref_dense(store, &m.fc1, x);
    let h: Vec<Vec<f64>> = h.iter().map(|r| r.iter().map(|&a| gelu_scalar(a)).collect()).collect();
    ref_dense(store, &m.fc2, &h)
}

pub fn ref_pre_ln_block(store: &ParamStore<f64>, attn: &SelfAttention, mlp: &Mlp, x: &[Vec<f64>], causal: bool) -> Vec<Vec<f64>> {
    let d = attn.width;
    let qkv = ref_dense(store, &attn.qkv, &ref_ln(x));
    let a = ref_attn(&cols(&qkv, 0, d), &cols(&qkv, d, d), &cols(&qkv, 2 * d, d), attn.heads, |i, j| !causal || j <= i);
    let x = add(x, &ref_dense(store, &attn.out, &a));
    let m = ref_mlp(store, mlp, &ref_ln(&x));
    add(&x, &m)
}

pub fn assert_close(a: &[Vec<f64>], b: &[Vec<f64>], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (r, s) in a.iter().zip(b) {
        for (x, y) in r.iter().zip(s) {
            assert!((x - y).abs() <= tol, "{x} vs {y}");
        }
    }
}


/// Dense layer looked up by parameter name prefix (`{name}.w`, `{name}.b`).
pub fn ref_named(store: &ParamStore<f64>, name: &str, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let w = store.by_name(&format!("{name}.w")).unwrap();
    let b = store.by_name(&format!("{name}.b"));
    let (k, n) = (w.shape[0], w.shape[1]);
    x.iter()
        .map(|row| {
            (0..n)
                .map(|j| b.map_or(0.0, |b| b.data[j]) + (0..k).map(|p| row[p] * w.data[p * n + j]).sum::<f64>())
                .collect()
        })
        .collect()
}

pub fn map(x: &[Vec<f64>], f: impl Fn(f64) -> f64) -> Vec<Vec<f64>> {
    x.iter().map(|r| r.iter().map(|&v| f(v)).collect()).collect()
}

pub fn silu(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

pub fn gelu(v: f64) -> f64 {
    gelu_scalar(v)
}
