//! Dense layers with explicit backward passes, over row-major `[frames x features]`
//! matrices. Caches returned by `forward` are consumed by `backward`, which
//! accumulates parameter gradients into a same-shaped gradient struct.

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::error::{CdtError, Result};
use crate::rng::derived_rng;

/// Named traversal over every trainable tensor, in a fixed order.
pub trait Tensors {
    fn each<'a>(&'a self, name: &str, out: &mut Vec<(String, &'a Array2<f64>)>);
    fn each_mut<'a>(&'a mut self, name: &str, out: &mut Vec<(String, &'a mut Array2<f64>)>);

    fn named(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out = Vec::new();
        self.each("", &mut out);
        out
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Array2<f64>)> {
        let mut out = Vec::new();
        self.each_mut("", &mut out);
        out
    }

    fn zeroed(&self) -> Self
    where
        Self: Clone + Sized,
    {
        let mut z = self.clone();
        for (_, t) in z.named_mut() {
            t.fill(0.0);
        }
        z
    }

    fn n_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }
}

pub(crate) fn join(prefix: &str, field: &str) -> String {
    if prefix.is_empty() {
        field.to_string()
    } else {
        format!("{prefix}.{field}")
    }
}

impl Tensors for Array2<f64> {
    fn each<'a>(&'a self, name: &str, out: &mut Vec<(String, &'a Array2<f64>)>) {
        out.push((name.to_string(), self));
    }

    fn each_mut<'a>(&'a mut self, name: &str, out: &mut Vec<(String, &'a mut Array2<f64>)>) {
        out.push((name.to_string(), self));
    }
}

impl<T: Tensors> Tensors for Vec<T> {
    fn each<'a>(&'a self, name: &str, out: &mut Vec<(String, &'a Array2<f64>)>) {
        for (i, t) in self.iter().enumerate() {
            t.each(&join(name, &i.to_string()), out);
        }
    }

    fn each_mut<'a>(&'a mut self, name: &str, out: &mut Vec<(String, &'a mut Array2<f64>)>) {
        for (i, t) in self.iter_mut().enumerate() {
            t.each_mut(&join(name, &i.to_string()), out);
        }
    }
}

impl<T: Tensors> Tensors for Option<T> {
    fn each<'a>(&'a self, name: &str, out: &mut Vec<(String, &'a Array2<f64>)>) {
        if let Some(t) = self {
            t.each(name, out);
        }
    }

    fn each_mut<'a>(&'a mut self, name: &str, out: &mut Vec<(String, &'a mut Array2<f64>)>) {
        if let Some(t) = self {
            t.each_mut(name, out);
        }
    }
}

/// Implements [`Tensors`] by visiting the listed fields in order.
#[macro_export]
macro_rules! impl_tensors {
    ($ty:ty { $($field:ident),* $(,)? }) => {
        impl $crate::nn::Tensors for $ty {
            fn each<'a>(
                &'a self,
                name: &str,
                out: &mut Vec<(String, &'a ndarray::Array2<f64>)>,
            ) {
                $( self.$field.each(&$crate::nn::join(name, stringify!($field)), out); )*
            }

            fn each_mut<'a>(
                &'a mut self,
                name: &str,
                out: &mut Vec<(String, &'a mut ndarray::Array2<f64>)>,
            ) {
                $( self.$field.each_mut(&$crate::nn::join(name, stringify!($field)), out); )*
            }
        }
    };
}

/// `U(-bound, bound)` matrix from the tensor's own derived stream.
pub fn uniform(seed: u64, name: &str, rows: usize, cols: usize, bound: f64) -> Array2<f64> {
    let mut rng = derived_rng(seed, &["init", name]);
    Array2::from_shape_simple_fn((rows, cols), || {
        if bound > 0.0 {
            rng.gen_range(-bound..bound)
        } else {
            0.0
        }
    })
}

pub fn check_finite(x: &Array2<f64>, layer: &str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(CdtError::Numeric {
            layer: layer.to_string(),
        })
    }
}

/// `y = x w + b` with `w: [in x out]`, `b: [1 x out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array2<f64>,
}

impl_tensors!(Linear { w, b });

impl Linear {
    pub fn init(seed: u64, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self {
            w: uniform(seed, &join(name, "w"), fan_in, fan_out, 1.0 / (fan_in as f64).sqrt()),
            b: Array2::zeros((1, fan_out)),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            w: Array2::zeros((fan_in, fan_out)),
            b: Array2::zeros((1, fan_out)),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.w.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.w.ncols()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }

    /// Accumulates `dw`, `db` into `g` and returns `dx`.
    pub fn backward(&self, x: ArrayView2<f64>, dy: &Array2<f64>, g: &mut Linear) -> Array2<f64> {
        g.w += &x.t().dot(dy);
        g.b += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        dy.dot(&self.w.t())
    }
}

pub const LN_EPS: f64 = 1e-5;

/// Per-row layer normalization with learned gain and shift.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Array2<f64>,
    pub beta: Array2<f64>,
}

impl_tensors!(LayerNorm { gamma, beta });

pub struct LnCache {
    xhat: Array2<f64>,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Array2::ones((1, dim)),
            beta: Array2::zeros((1, dim)),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LnCache) {
        let d = x.ncols() as f64;
        let mut xhat = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / d;
            let is = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| v * is);
            inv_std.push(is);
        }
        let y = &xhat * &self.gamma + &self.beta;
        (y, LnCache { xhat, inv_std })
    }

    pub fn backward(&self, c: &LnCache, dy: &Array2<f64>, g: &mut LayerNorm) -> Array2<f64> {
        g.gamma += &(dy * &c.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
        g.beta += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        let dxhat = dy * &self.gamma;
        let d = dy.ncols() as f64;
        let mut dx = Array2::zeros(dy.raw_dim());
        for (t, (mut out, (dh, xh))) in dx
            .rows_mut()
            .into_iter()
            .zip(dxhat.rows().into_iter().zip(c.xhat.rows()))
            .enumerate()
        {
            let mean_dh = dh.sum() / d;
            let mean_dh_xh = dh.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>() / d;
            let is = c.inv_std[t];
            for k in 0..out.len() {
                out[k] = is * (dh[k] - mean_dh - xh[k] * mean_dh_xh);
            }
        }
        dx
    }
}

pub fn relu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Gradient through ReLU given its output.
pub fn relu_backward(y: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut dx = dy.clone();
    dx.zip_mut_with(y, |d, &v| {
        if v <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

/// Kernel-3 temporal convolution as a linear map over `[x[t-1], x[t], x[t+1]]`,
/// with edge frames repeated at the boundaries.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d {
    pub lin: Linear,
}

impl_tensors!(Conv1d { lin });

pub const CONV_KERNEL: usize = 3;

/// Input frame read by tap `j` at output frame `t`.
fn tap_source(t: usize, j: usize, n: usize) -> usize {
    (t + j).saturating_sub(1).min(n - 1)
}

impl Conv1d {
    pub fn init(seed: u64, name: &str, c_in: usize, c_out: usize) -> Self {
        Self {
            lin: Linear::init(seed, &join(name, "lin"), CONV_KERNEL * c_in, c_out),
        }
    }

    fn im2col(x: &Array2<f64>) -> Array2<f64> {
        let (n, c) = x.dim();
        let mut col = Array2::zeros((n, CONV_KERNEL * c));
        for t in 0..n {
            for j in 0..CONV_KERNEL {
                col.slice_mut(s![t, j * c..(j + 1) * c]).assign(&x.row(tap_source(t, j, n)));
            }
        }
        col
    }

    fn col2im(dcol: &Array2<f64>, c: usize) -> Array2<f64> {
        let n = dcol.nrows();
        let mut dx = Array2::zeros((n, c));
        for t in 0..n {
            for j in 0..CONV_KERNEL {
                let mut dst = dx.row_mut(tap_source(t, j, n));
                dst += &dcol.slice(s![t, j * c..(j + 1) * c]);
            }
        }
        dx
    }

    /// Returns the output and the unfolded input needed by `backward`.
    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let col = Self::im2col(x);
        (self.lin.forward(col.view()), col)
    }

    pub fn backward(&self, col: &Array2<f64>, dy: &Array2<f64>, g: &mut Conv1d) -> Array2<f64> {
        let dcol = self.lin.backward(col.view(), dy, &mut g.lin);
        Self::col2im(&dcol, self.lin.fan_in() / CONV_KERNEL)
    }
}

/// Multi-head scaled dot-product attention from queries `xq` to keys/values `xkv`.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl_tensors!(Attention { q, k, v, o });

pub struct AttnCache {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Per-head row-stochastic weights `[T_q x T_kv]`.
    pub weights: Vec<Array2<f64>>,
    ctx: Array2<f64>,
}

impl Attention {
    pub fn init(seed: u64, name: &str, d: usize) -> Self {
        Self {
            q: Linear::init(seed, &join(name, "q"), d, d),
            k: Linear::init(seed, &join(name, "k"), d, d),
            v: Linear::init(seed, &join(name, "v"), d, d),
            o: Linear::init(seed, &join(name, "o"), d, d),
        }
    }

    pub fn forward(&self, xq: &Array2<f64>, xkv: &Array2<f64>, n_heads: usize) -> (Array2<f64>, AttnCache) {
        let q = self.q.forward(xq.view());
        let k = self.k.forward(xkv.view());
        let v = self.v.forward(xkv.view());
        let d = q.ncols();
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut ctx = Array2::zeros((q.nrows(), d));
        let mut weights = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut a = q.slice(cols).dot(&k.slice(cols).t());
            a.mapv_inplace(|x| x * scale);
            for mut row in a.rows_mut() {
                let m = row.fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
                row.mapv_inplace(|x| (x - m).exp());
                let z = row.sum();
                row.mapv_inplace(|x| x / z);
            }
            ctx.slice_mut(cols).assign(&a.dot(&v.slice(cols)));
            weights.push(a);
        }
        let y = self.o.forward(ctx.view());
        (y, AttnCache { q, k, v, weights, ctx })
    }

    /// Returns `(dxq, dxkv)`.
    pub fn backward(
        &self,
        xq: &Array2<f64>,
        xkv: &Array2<f64>,
        c: &AttnCache,
        dy: &Array2<f64>,
        g: &mut Attention,
    ) -> (Array2<f64>, Array2<f64>) {
        let n_heads = c.weights.len();
        let dctx = self.o.backward(c.ctx.view(), dy, &mut g.o);
        let d = c.q.ncols();
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = Array2::zeros(c.q.raw_dim());
        let mut dk = Array2::zeros(c.k.raw_dim());
        let mut dv = Array2::zeros(c.v.raw_dim());
        for (h, a) in c.weights.iter().enumerate() {
            let cols = s![.., h * dh..(h + 1) * dh];
            let dctx_h = dctx.slice(cols);
            dv.slice_mut(cols).assign(&a.t().dot(&dctx_h));
            let da = dctx_h.dot(&c.v.slice(cols).t());
            // Softmax backward: ds = a * (da - <da, a>), then the score scale.
            let mut ds = &da * a;
            for (mut row, arow) in ds.rows_mut().into_iter().zip(a.rows()) {
                let dot = row.sum();
                row.zip_mut_with(&arow, |x, &p| *x = (*x - p * dot) * scale);
            }
            dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
        }
        let dxq = self.q.backward(xq.view(), &dq, &mut g.q);
        let dxkv = self.k.backward(xkv.view(), &dk, &mut g.k) + self.v.backward(xkv.view(), &dv, &mut g.v);
        (dxq, dxkv)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::SeedableRng;

    pub fn random(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-1.0..1.0))
    }

    /// Central-difference check of `loss(x)` against the analytic `grad`.
    fn check_input_grad(
        x: &Array2<f64>,
        grad: &Array2<f64>,
        mut loss: impl FnMut(&Array2<f64>) -> f64,
    ) {
        let eps = 1e-5;
        for idx in 0..x.len() {
            let (r, c) = (idx / x.ncols(), idx % x.ncols());
            let mut xp = x.clone();
            xp[[r, c]] += eps;
            let mut xm = x.clone();
            xm[[r, c]] -= eps;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * eps);
            let an = grad[[r, c]];
            assert!(
                (fd - an).abs() <= 1e-6 + 1e-5 * fd.abs().max(an.abs()),
                "at ({r},{c}): fd {fd} analytic {an}"
            );
        }
    }

    #[test]
    fn layer_norm_backward_matches_finite_differences() {
        let mut ln = LayerNorm::new(6);
        ln.gamma = random(1, 6, 1);
        ln.beta = random(1, 6, 2);
        let x = random(4, 6, 3);
        let w = random(4, 6, 4);
        let (_, c) = ln.forward(&x);
        let mut g = ln.zeroed();
        let dx = ln.backward(&c, &w, &mut g);
        check_input_grad(&x, &dx, |x| (&ln.forward(x).0 * &w).sum());
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let conv = Conv1d::init(7, "conv", 3, 5);
        for t in [1, 2, 6] {
            let x = random(t, 3, 5);
            let w = random(t, 5, 6);
            let (_, col) = conv.forward(&x);
            let mut g = conv.zeroed();
            let dx = conv.backward(&col, &w, &mut g);
            check_input_grad(&x, &dx, |x| (&conv.forward(x).0 * &w).sum());
        }
    }

    #[test]
    fn conv_taps_see_neighbours() {
        let mut conv = Conv1d {
            lin: Linear::zeros(3, 1),
        };
        conv.lin.w[[0, 0]] = 1.0;
        let x = Array2::from_shape_vec((3, 1), vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(conv.forward(&x).0.column(0).to_vec(), vec![1.0, 1.0, 2.0]);
        conv.lin.w[[0, 0]] = 0.0;
        conv.lin.w[[2, 0]] = 1.0;
        assert_eq!(conv.forward(&x).0.column(0).to_vec(), vec![2.0, 3.0, 3.0]);
    }

    #[test]
    fn attention_backward_matches_finite_differences() {
        let attn = Attention::init(11, "attn", 8);
        let xq = random(3, 8, 12);
        let xkv = random(5, 8, 13);
        let w = random(3, 8, 14);
        let (_, c) = attn.forward(&xq, &xkv, 2);
        for a in &c.weights {
            for row in a.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
                assert!(row.iter().all(|&p| p >= 0.0));
            }
        }
        let mut g = attn.zeroed();
        let (dq, dkv) = attn.backward(&xq, &xkv, &c, &w, &mut g);
        check_input_grad(&xq, &dq, |x| (&attn.forward(x, &xkv, 2).0 * &w).sum());
        check_input_grad(&xkv, &dkv, |x| (&attn.forward(&xq, x, 2).0 * &w).sum());
    }

    #[test]
    fn linear_backward_accumulates() {
        let lin = Linear::init(3, "lin", 4, 2);
        let x = random(5, 4, 1);
        let dy = random(5, 2, 2);
        let mut g = lin.zeroed();
        lin.backward(x.view(), &dy, &mut g);
        lin.backward(x.view(), &dy, &mut g);
        let expected = x.t().dot(&dy) * 2.0;
        assert!((&g.w - &expected).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn named_tensors_are_ordered_and_prefixed() {
        let attn = Attention::init(1, "a", 4);
        let names: Vec<String> = attn.named().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, ["q.w", "q.b", "k.w", "k.b", "v.w", "v.b", "o.w", "o.b"]);
        assert_eq!(attn.n_params(), 4 * (16 + 4));
    }
}
