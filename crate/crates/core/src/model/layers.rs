//! Dense building blocks with explicit backward passes.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use super::EncoderLayer;

pub(crate) const LN_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * x * (1.0 + t)
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Row-wise softmax.
pub(crate) fn softmax_rows(mut m: Array2<f64>) -> Array2<f64> {
    for mut row in m.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    m
}

/// Gradient w.r.t. softmax inputs given probabilities `a` and upstream `da`.
pub(crate) fn softmax_rows_backward(a: &Array2<f64>, da: &Array2<f64>) -> Array2<f64> {
    let mut out = a * da;
    for (mut row, a_row) in out.rows_mut().into_iter().zip(a.rows()) {
        let dot = row.sum();
        row.zip_mut_with(&a_row, |v, &p| *v -= p * dot);
    }
    out
}

/// `acc += a · b`
pub(crate) fn add_matmul(acc: &mut Array2<f64>, a: &ArrayView2<f64>, b: &ArrayView2<f64>) {
    general_mat_mul(1.0, a, b, 1.0, acc);
}

fn affine(x: &Array2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    let mut out = x.dot(w);
    out += b;
    out
}

pub(crate) struct NormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

pub(crate) fn layer_norm(x: &Array2<f64>, gamma: &Array1<f64>, beta: &Array1<f64>) -> (Array2<f64>, NormCache) {
    let mean = x.mean_axis(Axis(1)).expect("non-empty rows");
    let centered = x - &mean.insert_axis(Axis(1));
    let var = centered.mapv(|v| v * v).mean_axis(Axis(1)).expect("non-empty rows");
    let inv_std = var.mapv(|v| 1.0 / (v + LN_EPS).sqrt());
    let xhat = centered * &inv_std.view().insert_axis(Axis(1));
    let mut y = &xhat * gamma;
    y += beta;
    (y, NormCache { xhat, inv_std })
}

/// Returns dx; accumulates dgamma / dbeta when given.
pub(crate) fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &NormCache,
    gamma: &Array1<f64>,
    grads: Option<(&mut Array1<f64>, &mut Array1<f64>)>,
) -> Array2<f64> {
    if let Some((dgamma, dbeta)) = grads {
        *dgamma += &(dy * &cache.xhat).sum_axis(Axis(0));
        *dbeta += &dy.sum_axis(Axis(0));
    }
    let dxhat = dy * gamma;
    let mean_d = dxhat.mean_axis(Axis(1)).expect("rows").insert_axis(Axis(1));
    let mean_dx = (&dxhat * &cache.xhat).mean_axis(Axis(1)).expect("rows").insert_axis(Axis(1));
    let mut dx = dxhat - &mean_d - &(&cache.xhat * &mean_dx);
    dx *= &cache.inv_std.view().insert_axis(Axis(1));
    dx
}

pub(crate) struct LayerCache {
    input: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    ln1: NormCache,
    x1: Array2<f64>,
    pre_act: Array2<f64>,
    act: Array2<f64>,
    ln2: NormCache,
}

/// Post-norm encoder block: `x1 = LN(x + MHA(x))`, `out = LN(x1 + FFN(x1))`.
pub(crate) fn encoder_forward(layer: &EncoderLayer, x: Array2<f64>, heads: usize) -> (Array2<f64>, LayerCache) {
    let d = x.ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = affine(&x, &layer.wq, &layer.bq);
    let k = affine(&x, &layer.wk, &layer.bk);
    let v = affine(&x, &layer.wv, &layer.bv);
    let mut ctx = Array2::zeros(x.raw_dim());
    let mut attn = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        let a = softmax_rows(scores);
        ctx.slice_mut(cols).assign(&a.dot(&v.slice(cols)));
        attn.push(a);
    }
    let mut r1 = affine(&ctx, &layer.wo, &layer.bo);
    r1 += &x;
    let (x1, ln1) = layer_norm(&r1, &layer.ln1_gamma, &layer.ln1_beta);
    let pre_act = affine(&x1, &layer.w1, &layer.b1);
    let act = pre_act.mapv(gelu);
    let mut r2 = affine(&act, &layer.w2, &layer.b2);
    r2 += &x1;
    let (out, ln2) = layer_norm(&r2, &layer.ln2_gamma, &layer.ln2_beta);
    let cache = LayerCache {
        input: x,
        q,
        k,
        v,
        attn,
        ctx,
        ln1,
        x1,
        pre_act,
        act,
        ln2,
    };
    (out, cache)
}

pub(crate) fn encoder_backward(
    layer: &EncoderLayer,
    cache: &LayerCache,
    dout: &Array2<f64>,
    heads: usize,
    mut grads: Option<&mut EncoderLayer>,
) -> Array2<f64> {
    let d = dout.ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let dr2 = layer_norm_backward(
        dout,
        &cache.ln2,
        &layer.ln2_gamma,
        grads.as_deref_mut().map(|g| (&mut g.ln2_gamma, &mut g.ln2_beta)),
    );
    if let Some(g) = grads.as_deref_mut() {
        add_matmul(&mut g.w2, &cache.act.t(), &dr2.view());
        g.b2 += &dr2.sum_axis(Axis(0));
    }
    let mut dpre = dr2.dot(&layer.w2.t());
    dpre.zip_mut_with(&cache.pre_act, |g, &u| *g *= gelu_grad(u));
    if let Some(g) = grads.as_deref_mut() {
        add_matmul(&mut g.w1, &cache.x1.t(), &dpre.view());
        g.b1 += &dpre.sum_axis(Axis(0));
    }
    let mut dx1 = dr2;
    add_matmul(&mut dx1, &dpre.view(), &layer.w1.t());

    let dr1 = layer_norm_backward(
        &dx1,
        &cache.ln1,
        &layer.ln1_gamma,
        grads.as_deref_mut().map(|g| (&mut g.ln1_gamma, &mut g.ln1_beta)),
    );
    if let Some(g) = grads.as_deref_mut() {
        add_matmul(&mut g.wo, &cache.ctx.t(), &dr1.view());
        g.bo += &dr1.sum_axis(Axis(0));
    }
    let dctx = dr1.dot(&layer.wo.t());

    let mut dq = Array2::zeros(dctx.raw_dim());
    let mut dk = Array2::zeros(dctx.raw_dim());
    let mut dv = Array2::zeros(dctx.raw_dim());
    for (h, a) in cache.attn.iter().enumerate() {
        let cols = s![.., h * dh..(h + 1) * dh];
        let dctx_h = dctx.slice(cols);
        let da = dctx_h.dot(&cache.v.slice(cols).t());
        dv.slice_mut(cols).assign(&a.t().dot(&dctx_h));
        let ds = softmax_rows_backward(a, &da) * scale;
        dq.slice_mut(cols).assign(&ds.dot(&cache.k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&cache.q.slice(cols)));
    }
    if let Some(g) = grads.as_deref_mut() {
        let xt = cache.input.t();
        add_matmul(&mut g.wq, &xt, &dq.view());
        add_matmul(&mut g.wk, &xt, &dk.view());
        add_matmul(&mut g.wv, &xt, &dv.view());
        g.bq += &dq.sum_axis(Axis(0));
        g.bk += &dk.sum_axis(Axis(0));
        g.bv += &dv.sum_axis(Axis(0));
    }
    let mut dx = dr1;
    add_matmul(&mut dx, &dq.view(), &layer.wq.t());
    add_matmul(&mut dx, &dk.view(), &layer.wk.t());
    add_matmul(&mut dx, &dv.view(), &layer.wv.t());
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn gelu_derivative_matches_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let eps = 1e-6;
            let fd = (gelu(x + eps) - gelu(x - eps)) / (2.0 * eps);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "{x}");
        }
    }

    #[test]
    fn softmax_rows_normalize() {
        let a = softmax_rows(array![[1.0, 2.0, 3.0], [1000.0, 1000.0, -1000.0]]);
        for row in a.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        assert!((a[[1, 0]] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_output_is_standardized() {
        let x = array![[1.0, 2.0, 3.0, 4.0], [-1.0, 0.0, 5.0, 2.0]];
        let (y, _) = layer_norm(&x, &Array1::ones(4), &Array1::zeros(4));
        for row in y.rows() {
            assert!(row.mean().unwrap().abs() < 1e-12);
            let var = row.mapv(|v| v * v).mean().unwrap();
            assert!((var - 1.0).abs() < 1e-4);
        }
    }
}
