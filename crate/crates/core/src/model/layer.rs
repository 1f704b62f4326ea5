use ndarray::{s, Array1, Array2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal};

pub(crate) const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_A: f64 = 0.044_715;

/// A named view of one parameter tensor.
pub struct ParamRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

pub struct ParamMut<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a mut [f64],
}

macro_rules! push_fields {
    ($out:ident, $prefix:expr, $as:ident, $ty:ident, $($owner:ident . $field:ident),*) => {
        $(
            $out.push($ty {
                name: format!("{}.{}", $prefix, stringify!($field)),
                shape: $owner.$field.shape().to_vec(),
                data: $owner.$field.$as().expect("standard layout"),
            });
        )*
    };
}

pub(crate) fn normal_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Array2<f64> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

pub(crate) struct LnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new(d: usize) -> Self {
        Self {
            gamma: Array1::ones(d),
            beta: Array1::zeros(d),
        }
    }

    pub fn zeros(d: usize) -> Self {
        Self {
            gamma: Array1::zeros(d),
            beta: Array1::zeros(d),
        }
    }

    pub(crate) fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LnCache) {
        let d = x.ncols() as f64;
        let mut xhat = x.clone();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, is) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            *is = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * *is);
        }
        let y = &xhat * &self.gamma + &self.beta;
        (y, LnCache { xhat, inv_std })
    }

    pub(crate) fn backward(&self, dy: &Array2<f64>, c: &LnCache, g: &mut LayerNorm) -> Array2<f64> {
        g.gamma += &(dy * &c.xhat).sum_axis(Axis(0));
        g.beta += &dy.sum_axis(Axis(0));
        let dxhat = dy * &self.gamma;
        let d = dy.ncols() as f64;
        let mut dx = Array2::zeros(dy.raw_dim());
        for (((mut out, dxh), xh), &is) in dx
            .rows_mut()
            .into_iter()
            .zip(dxhat.rows())
            .zip(c.xhat.rows())
            .zip(c.inv_std.iter())
        {
            let m1 = dxh.sum() / d;
            let m2 = dxh.dot(&xh) / d;
            Zip::from(&mut out)
                .and(&dxh)
                .and(&xh)
                .for_each(|o, &a, &b| *o = is * (a - m1 - b * m2));
        }
        dx
    }

    pub(crate) fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        let me = self;
        push_fields!(out, prefix, as_slice, ParamRef, me.gamma, me.beta);
    }

    pub(crate) fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>) {
        let me = self;
        push_fields!(out, prefix, as_slice_mut, ParamMut, me.gamma, me.beta);
    }
}

/// Pre-norm transformer block: causal multi-head self-attention and a
/// tanh-GELU MLP of width `4d`, each with a residual connection.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer {
    pub ln1: LayerNorm,
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub ln2: LayerNorm,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

pub(crate) struct LayerCache {
    ln1: LnCache,
    a: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    o: Array2<f64>,
    ln2: LnCache,
    m: Array2<f64>,
    u: Array2<f64>,
    z: Array2<f64>,
}

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + GELU_A * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + GELU_A * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * u * u)
}

impl DecoderLayer {
    pub fn init<R: Rng + ?Sized>(d: usize, std: f64, resid_std: f64, rng: &mut R) -> Self {
        Self {
            ln1: LayerNorm::new(d),
            wq: normal_matrix(d, d, std, rng),
            bq: Array1::zeros(d),
            wk: normal_matrix(d, d, std, rng),
            bk: Array1::zeros(d),
            wv: normal_matrix(d, d, std, rng),
            bv: Array1::zeros(d),
            wo: normal_matrix(d, d, resid_std, rng),
            bo: Array1::zeros(d),
            ln2: LayerNorm::new(d),
            w1: normal_matrix(d, 4 * d, std, rng),
            b1: Array1::zeros(4 * d),
            w2: normal_matrix(4 * d, d, resid_std, rng),
            b2: Array1::zeros(d),
        }
    }

    /// A layer of the same shape with every entry zero, used as a gradient
    /// accumulator.
    pub fn zeros_like(&self) -> Self {
        let z1 = |a: &Array1<f64>| Array1::zeros(a.raw_dim());
        let z2 = |a: &Array2<f64>| Array2::zeros(a.raw_dim());
        Self {
            ln1: LayerNorm::zeros(self.ln1.gamma.len()),
            wq: z2(&self.wq),
            bq: z1(&self.bq),
            wk: z2(&self.wk),
            bk: z1(&self.bk),
            wv: z2(&self.wv),
            bv: z1(&self.bv),
            wo: z2(&self.wo),
            bo: z1(&self.bo),
            ln2: LayerNorm::zeros(self.ln2.gamma.len()),
            w1: z2(&self.w1),
            b1: z1(&self.b1),
            w2: z2(&self.w2),
            b2: z1(&self.b2),
        }
    }

    pub(crate) fn forward(&self, x: &Array2<f64>, attn_heads: usize) -> (Array2<f64>, LayerCache) {
        let (t, d) = x.dim();
        let dh = d / attn_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (a, ln1) = self.ln1.forward(x);
        let q = a.dot(&self.wq) + &self.bq;
        let k = a.dot(&self.wk) + &self.bk;
        let v = a.dot(&self.wv) + &self.bv;
        let mut o = Array2::zeros((t, d));
        let mut probs = Vec::with_capacity(attn_heads);
        for h in 0..attn_heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut p = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            for (i, mut row) in p.rows_mut().into_iter().enumerate() {
                let max = row.iter().take(i + 1).copied().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for (j, e) in row.iter_mut().enumerate() {
                    *e = if j <= i { (*e - max).exp() } else { 0.0 };
                    sum += *e;
                }
                row /= sum;
            }
            o.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
            probs.push(p);
        }
        let h1 = x + &(o.dot(&self.wo) + &self.bo);
        let (m, ln2) = self.ln2.forward(&h1);
        let u = m.dot(&self.w1) + &self.b1;
        let z = u.mapv(gelu);
        let out = &h1 + &(z.dot(&self.w2) + &self.b2);
        let cache = LayerCache {
            ln1,
            a,
            q,
            k,
            v,
            probs,
            o,
            ln2,
            m,
            u,
            z,
        };
        (out, cache)
    }

    /// Accumulates parameter gradients into `g` and returns the gradient
    /// with respect to the layer input.
    pub(crate) fn backward(
        &self,
        dout: &Array2<f64>,
        c: &LayerCache,
        attn_heads: usize,
        g: &mut DecoderLayer,
    ) -> Array2<f64> {
        let d = dout.ncols();
        let dh = d / attn_heads;
        let scale = 1.0 / (dh as f64).sqrt();

        g.b2 += &dout.sum_axis(Axis(0));
        g.w2 += &c.z.t().dot(dout);
        let mut du = dout.dot(&self.w2.t());
        Zip::from(&mut du).and(&c.u).for_each(|x, &u| *x *= gelu_grad(u));
        g.b1 += &du.sum_axis(Axis(0));
        g.w1 += &c.m.t().dot(&du);
        let dm = du.dot(&self.w1.t());
        let dh1 = dout + &self.ln2.backward(&dm, &c.ln2, &mut g.ln2);

        g.bo += &dh1.sum_axis(Axis(0));
        g.wo += &c.o.t().dot(&dh1);
        let d_o = dh1.dot(&self.wo.t());
        let mut dq = Array2::zeros(c.q.raw_dim());
        let mut dk = Array2::zeros(c.k.raw_dim());
        let mut dv = Array2::zeros(c.v.raw_dim());
        for (h, p) in c.probs.iter().enumerate() {
            let cols = s![.., h * dh..(h + 1) * dh];
            let doh = d_o.slice(cols);
            let dp = doh.dot(&c.v.slice(cols).t());
            dv.slice_mut(cols).assign(&p.t().dot(&doh));
            let mut ds = &dp * p;
            for (mut row, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                let dot = row.sum();
                Zip::from(&mut row).and(&prow).for_each(|x, &pp| *x -= pp * dot);
            }
            ds *= scale;
            dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
        }
        g.bq += &dq.sum_axis(Axis(0));
        g.bk += &dk.sum_axis(Axis(0));
        g.bv += &dv.sum_axis(Axis(0));
        g.wq += &c.a.t().dot(&dq);
        g.wk += &c.a.t().dot(&dk);
        g.wv += &c.a.t().dot(&dv);
        let da = dq.dot(&self.wq.t()) + dk.dot(&self.wk.t()) + dv.dot(&self.wv.t());
        dh1 + self.ln1.backward(&da, &c.ln1, &mut g.ln1)
    }

    pub(crate) fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        self.ln1.collect(&format!("{prefix}.ln1"), out);
        let me = self;
        push_fields!(out, prefix, as_slice, ParamRef, me.wq, me.bq, me.wk, me.bk, me.wv, me.bv, me.wo, me.bo);
        self.ln2.collect(&format!("{prefix}.ln2"), out);
        push_fields!(out, prefix, as_slice, ParamRef, me.w1, me.b1, me.w2, me.b2);
    }

    pub(crate) fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>) {
        let me = self;
        me.ln1.collect_mut(&format!("{prefix}.ln1"), out);
        push_fields!(out, prefix, as_slice_mut, ParamMut, me.wq, me.bq, me.wk, me.bk, me.wv, me.bv, me.wo, me.bo);
        me.ln2.collect_mut(&format!("{prefix}.ln2"), out);
        push_fields!(out, prefix, as_slice_mut, ParamMut, me.w1, me.b1, me.w2, me.b2);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn layer_norm_rows_are_standardized() {
        let ln = LayerNorm::new(4);
        let x = ndarray::array![[1.0, 2.0, 3.0, 4.0], [-1.0, 0.0, 0.0, 5.0]];
        let (y, _) = ln.forward(&x);
        for row in y.rows() {
            assert!(row.sum().abs() < 1e-12);
            let var = row.iter().map(|v| v * v).sum::<f64>() / 4.0;
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for &u in &[-3.0, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let fd = (gelu(u + h) - gelu(u - h)) / (2.0 * h);
            assert!((fd - gelu_grad(u)).abs() < 1e-8);
        }
    }

    #[test]
    fn attention_is_causal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layer = DecoderLayer::init(8, 0.3, 0.3, &mut rng);
        let x = normal_matrix(5, 8, 1.0, &mut rng);
        let (full, _) = layer.forward(&x, 2);
        let mut x2 = x.clone();
        x2.row_mut(4).fill(7.0);
        let (changed, _) = layer.forward(&x2, 2);
        for t in 0..4 {
            assert_eq!(full.row(t), changed.row(t));
        }
        assert_ne!(full.row(4), changed.row(4));
    }

    #[test]
    fn param_listing_is_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut layer = DecoderLayer::init(4, 0.1, 0.1, &mut rng);
        let mut a = Vec::new();
        layer.collect("l", &mut a);
        let names: Vec<_> = a.iter().map(|p| (p.name.clone(), p.shape.clone())).collect();
        let mut b = Vec::new();
        layer.collect_mut("l", &mut b);
        let names_mut: Vec<_> = b.iter().map(|p| (p.name.clone(), p.shape.clone())).collect();
        assert_eq!(names, names_mut);
        assert_eq!(names.len(), 16);
        assert_eq!(names[0].0, "l.ln1.gamma");
        assert_eq!(names[11].0, "l.ln2.beta");
    }
}
