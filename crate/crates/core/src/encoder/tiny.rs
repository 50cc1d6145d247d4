//! A small pre-LN transformer encoder with hand-written backpropagation.
//!
//! All parameters live in one flat buffer so that the optimizer, gradient
//! accumulation and finite-difference checks can treat them uniformly; the
//! [`Layout`] records where each tensor starts.

use std::ops::Range;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{check_positions, ContextEncoder, Vocab};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TinyConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    /// Positions available, including the `[SEP]` and product-type suffix
    /// used by the classifier.
    pub max_len: usize,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for TinyConfig {
    fn default() -> Self {
        TinyConfig {
            dim: 64,
            layers: 2,
            heads: 4,
            ff_dim: 128,
            max_len: 80,
            init_std: 0.02,
            seed: 0,
        }
    }
}

impl TinyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::config("encoder.dim", "must be a positive multiple of encoder.heads"));
        }
        if self.layers == 0 {
            return Err(Error::config("encoder.layers", "must be at least 1"));
        }
        if self.ff_dim == 0 || self.max_len == 0 {
            return Err(Error::config("encoder.ff_dim", "ff_dim and max_len must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct LayerOffsets {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    tok: usize,
    pos: usize,
    layers: Vec<LayerOffsets>,
    lnf_g: usize,
    lnf_b: usize,
    mlm_bias: usize,
    total: usize,
}

impl Layout {
    fn new(cfg: &TinyConfig, vocab: usize) -> Self {
        let d = cfg.dim;
        let f = cfg.ff_dim;
        let mut at = 0;
        let mut take = |n: usize| {
            let o = at;
            at += n;
            o
        };
        let tok = take(vocab * d);
        let pos = take(cfg.max_len * d);
        let layers = (0..cfg.layers)
            .map(|_| LayerOffsets {
                ln1_g: take(d),
                ln1_b: take(d),
                wq: take(d * d),
                bq: take(d),
                wk: take(d * d),
                bk: take(d),
                wv: take(d * d),
                bv: take(d),
                wo: take(d * d),
                bo: take(d),
                ln2_g: take(d),
                ln2_b: take(d),
                w1: take(d * f),
                b1: take(f),
                w2: take(f * d),
                b2: take(d),
            })
            .collect();
        let lnf_g = take(d);
        let lnf_b = take(d);
        let mlm_bias = take(vocab);
        Layout {
            tok,
            pos,
            layers,
            lnf_g,
            lnf_b,
            mlm_bias,
            total: at,
        }
    }
}

impl LayerOffsets {
    fn named(&self) -> [(&'static str, usize); 16] {
        [
            ("ln1_g", self.ln1_g),
            ("ln1_b", self.ln1_b),
            ("wq", self.wq),
            ("bq", self.bq),
            ("wk", self.wk),
            ("bk", self.bk),
            ("wv", self.wv),
            ("bv", self.bv),
            ("wo", self.wo),
            ("bo", self.bo),
            ("ln2_g", self.ln2_g),
            ("ln2_b", self.ln2_b),
            ("w1", self.w1),
            ("b1", self.b1),
            ("w2", self.w2),
            ("b2", self.b2),
        ]
    }
}

impl Layout {
    fn named_ranges(&self) -> Vec<(String, Range<usize>)> {
        let mut starts: Vec<(String, usize)> = vec![("tok".into(), self.tok), ("pos".into(), self.pos)];
        for (i, l) in self.layers.iter().enumerate() {
            starts.extend(l.named().iter().map(|(n, o)| (format!("layer{i}.{n}"), *o)));
        }
        starts.extend([
            ("lnf_g".to_string(), self.lnf_g),
            ("lnf_b".to_string(), self.lnf_b),
            ("mlm_bias".to_string(), self.mlm_bias),
        ]);
        let ends: Vec<usize> = starts.iter().skip(1).map(|(_, o)| *o).chain([self.total]).collect();
        starts.into_iter().zip(ends).map(|((n, s), e)| (n, s..e)).collect()
    }
}

fn mat<S>(p: &[S], off: usize, rows: usize, cols: usize) -> ArrayView2<'_, S> {
    ArrayView2::from_shape((rows, cols), &p[off..off + rows * cols]).expect("layout")
}

fn vect<S>(p: &[S], off: usize, n: usize) -> ArrayView1<'_, S> {
    ArrayView1::from(&p[off..off + n])
}

fn add_into<'a, S: Scalar>(grad: &mut [S], off: usize, values: impl IntoIterator<Item = &'a S>) {
    for (g, v) in grad[off..].iter_mut().zip(values) {
        *g += *v;
    }
}

struct LnCache<S> {
    xhat: Array2<S>,
    rstd: Array1<S>,
}

fn layer_norm<S: Scalar>(x: &Array2<S>, gamma: ArrayView1<S>, beta: ArrayView1<S>) -> (Array2<S>, LnCache<S>) {
    let d = S::lit(x.ncols() as f64);
    let mean = x.sum_axis(Axis(1)) / d;
    let centered = x - &mean.insert_axis(Axis(1));
    let var = centered.mapv(|v| v * v).sum_axis(Axis(1)) / d;
    let rstd = var.mapv(|v| S::one() / (v + S::lit(LN_EPS)).sqrt());
    let xhat = &centered * &rstd.view().insert_axis(Axis(1));
    let y = &xhat * &gamma + &beta;
    (y, LnCache { xhat, rstd })
}

/// Returns dx; accumulates dgamma and dbeta.
fn layer_norm_backward<S: Scalar>(
    dy: &Array2<S>,
    cache: &LnCache<S>,
    gamma: ArrayView1<S>,
    grad: &mut [S],
    g_off: usize,
    b_off: usize,
) -> Array2<S> {
    let dgamma = (dy * &cache.xhat).sum_axis(Axis(0));
    let dbeta = dy.sum_axis(Axis(0));
    add_into(grad, g_off, dgamma.iter());
    add_into(grad, b_off, dbeta.iter());
    let dxhat = dy * &gamma;
    let d = S::lit(dy.ncols() as f64);
    let mean_dxhat = (dxhat.sum_axis(Axis(1)) / d).insert_axis(Axis(1));
    let mean_dxhat_xhat = ((&dxhat * &cache.xhat).sum_axis(Axis(1)) / d).insert_axis(Axis(1));
    let inner = &dxhat - &mean_dxhat - &(&cache.xhat * &mean_dxhat_xhat);
    inner * &cache.rstd.view().insert_axis(Axis(1))
}

fn gelu<S: Scalar>(u: S) -> S {
    let c = S::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = S::lit(0.044_715);
    let half = S::lit(0.5);
    half * u * (S::one() + (c * (u + k * u * u * u)).tanh())
}

fn gelu_grad<S: Scalar>(u: S) -> S {
    let c = S::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = S::lit(0.044_715);
    let half = S::lit(0.5);
    let t = (c * (u + k * u * u * u)).tanh();
    half * (S::one() + t) + half * u * (S::one() - t * t) * c * (S::one() + S::lit(3.0) * k * u * u)
}

fn softmax_rows<S: Scalar>(m: &mut Array2<S>) {
    for mut row in m.rows_mut() {
        let max = row.fold(S::neg_infinity(), |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

struct LayerCache<S> {
    ln1: LnCache<S>,
    a: Array2<S>,
    q: Array2<S>,
    k: Array2<S>,
    v: Array2<S>,
    probs: Vec<Array2<S>>,
    ctx: Array2<S>,
    ln2: LnCache<S>,
    b: Array2<S>,
    u: Array2<S>,
    g: Array2<S>,
}

/// Activations of one forward pass, kept for the backward pass.
pub struct Forward<S> {
    ids: Vec<usize>,
    layers: Vec<LayerCache<S>>,
    final_ln: LnCache<S>,
    /// `n x dim` output vectors.
    pub hidden: Array2<S>,
}

impl<S> Forward<S> {
    pub fn ids(&self) -> &[usize] {
        &self.ids
    }
}

/// Word-level transformer encoder with a tied masked-LM output layer.
#[derive(Clone, Debug, PartialEq)]
pub struct TinyEncoder<S> {
    config: TinyConfig,
    vocab: Vocab,
    layout: Layout,
    params: Vec<S>,
}

impl<S: Scalar> TinyEncoder<S> {
    /// Randomly initialized encoder; weights drawn from `N(0, init_std)`,
    /// layer-norm gains 1, biases 0.
    pub fn new(config: TinyConfig, vocab: Vocab) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config, vocab.len());
        let mut params = vec![S::zero(); layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, config.init_std).map_err(|e| Error::config("encoder.init_std", e.to_string()))?;
        let d = config.dim;
        let f = config.ff_dim;
        let mut fill = |params: &mut [S], off: usize, n: usize| {
            for p in &mut params[off..off + n] {
                *p = S::lit(normal.sample(&mut rng));
            }
        };
        fill(&mut params, layout.tok, vocab.len() * d);
        fill(&mut params, layout.pos, config.max_len * d);
        for l in &layout.layers {
            for (off, n) in [(l.wq, d * d), (l.wk, d * d), (l.wv, d * d), (l.wo, d * d), (l.w1, d * f), (l.w2, f * d)] {
                fill(&mut params, off, n);
            }
        }
        for l in &layout.layers {
            params[l.ln1_g..l.ln1_g + d].fill(S::one());
            params[l.ln2_g..l.ln2_g + d].fill(S::one());
        }
        params[layout.lnf_g..layout.lnf_g + d].fill(S::one());
        Ok(TinyEncoder {
            config,
            vocab,
            layout,
            params,
        })
    }

    /// Rebuilds an encoder from stored parameters.
    pub fn from_parts(config: TinyConfig, vocab: Vocab, params: Vec<S>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config, vocab.len());
        if params.len() != layout.total {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                layout.total,
                params.len()
            )));
        }
        Ok(TinyEncoder {
            config,
            vocab,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &TinyConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn params(&self) -> &[S] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [S] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.layout.total
    }

    /// Every parameter tensor with its range in [`params`](Self::params):
    /// `tok`, `pos`, `layer{i}.{ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo,
    /// ln2_g, ln2_b, w1, b1, w2, b2}`, `lnf_g`, `lnf_b` and `mlm_bias`, in
    /// buffer order. Matrices are row-major.
    pub fn named_ranges(&self) -> Vec<(String, Range<usize>)> {
        self.layout.named_ranges()
    }

    pub fn ids(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.vocab.id(t)).collect()
    }

    pub(crate) fn token_embeddings(&self) -> ArrayView2<'_, S> {
        mat(&self.params, self.layout.tok, self.vocab.len(), self.config.dim)
    }

    pub(crate) fn mlm_bias(&self) -> ArrayView1<'_, S> {
        vect(&self.params, self.layout.mlm_bias, self.vocab.len())
    }

    pub(crate) fn token_embedding_offset(&self) -> usize {
        self.layout.tok
    }

    pub(crate) fn mlm_bias_offset(&self) -> usize {
        self.layout.mlm_bias
    }

    pub fn forward(&self, ids: &[usize]) -> Result<Forward<S>> {
        let n = ids.len();
        if n == 0 {
            return Err(Error::Empty("cannot encode an empty sequence".into()));
        }
        if n > self.config.max_len {
            return Err(Error::OutOfRange {
                position: n - 1,
                len: self.config.max_len,
            });
        }
        let d = self.config.dim;
        let p = &self.params;
        let tok = self.token_embeddings();
        let pos = mat(p, self.layout.pos, self.config.max_len, d);
        let mut x = Array2::<S>::zeros((n, d));
        for (i, &id) in ids.iter().enumerate() {
            let id = if id < self.vocab.len() { id } else { Vocab::UNK };
            let mut row = x.row_mut(i);
            row += &tok.row(id);
            row += &pos.row(i);
        }

        let mut caches = Vec::with_capacity(self.layout.layers.len());
        for l in &self.layout.layers {
            let (x_next, cache) = self.layer_forward(l, x);
            caches.push(cache);
            x = x_next;
        }
        let (hidden, final_ln) = layer_norm(&x, vect(p, self.layout.lnf_g, d), vect(p, self.layout.lnf_b, d));
        Ok(Forward {
            ids: ids.to_vec(),
            layers: caches,
            final_ln,
            hidden,
        })
    }

    fn layer_forward(&self, l: &LayerOffsets, x: Array2<S>) -> (Array2<S>, LayerCache<S>) {
        let p = &self.params;
        let d = self.config.dim;
        let f = self.config.ff_dim;
        let heads = self.config.heads;
        let dh = d / heads;
        let scale = S::lit(1.0 / (dh as f64).sqrt());

        let (a, ln1) = layer_norm(&x, vect(p, l.ln1_g, d), vect(p, l.ln1_b, d));
        let q = a.dot(&mat(p, l.wq, d, d)) + vect(p, l.bq, d);
        let k = a.dot(&mat(p, l.wk, d, d)) + vect(p, l.bk, d);
        let v = a.dot(&mat(p, l.wv, d, d)) + vect(p, l.bv, d);
        let mut ctx = Array2::<S>::zeros(x.raw_dim());
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            softmax_rows(&mut scores);
            ctx.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
            probs.push(scores);
        }
        let x_mid = x + ctx.dot(&mat(p, l.wo, d, d)) + vect(p, l.bo, d);
        let (b, ln2) = layer_norm(&x_mid, vect(p, l.ln2_g, d), vect(p, l.ln2_b, d));
        let u = b.dot(&mat(p, l.w1, d, f)) + vect(p, l.b1, f);
        let g = u.mapv(gelu);
        let out = &x_mid + &(g.dot(&mat(p, l.w2, f, d)) + vect(p, l.b2, d));
        (
            out,
            LayerCache {
                ln1,
                a,
                q,
                k,
                v,
                probs,
                ctx,
                ln2,
                b,
                u,
                g,
            },
        )
    }

    /// Accumulates into `grad` the parameter gradient of a loss whose
    /// gradient with respect to `fwd.hidden` is `d_hidden`.
    pub fn backward(&self, fwd: &Forward<S>, d_hidden: &Array2<S>, grad: &mut [S]) {
        assert_eq!(grad.len(), self.layout.total, "gradient buffer size");
        assert_eq!(d_hidden.dim(), fwd.hidden.dim(), "upstream gradient shape");
        let p = &self.params;
        let d = self.config.dim;
        let lay = &self.layout;
        let mut dx = layer_norm_backward(
            d_hidden,
            &fwd.final_ln,
            vect(p, lay.lnf_g, d),
            grad,
            lay.lnf_g,
            lay.lnf_b,
        );
        for (l, cache) in lay.layers.iter().zip(&fwd.layers).rev() {
            dx = self.layer_backward(l, cache, dx, grad);
        }
        for (i, &id) in fwd.ids.iter().enumerate() {
            let id = if id < self.vocab.len() { id } else { Vocab::UNK };
            add_into(grad, lay.tok + id * d, dx.row(i).iter());
            add_into(grad, lay.pos + i * d, dx.row(i).iter());
        }
    }

    fn layer_backward(&self, l: &LayerOffsets, c: &LayerCache<S>, dx_out: Array2<S>, grad: &mut [S]) -> Array2<S> {
        let p = &self.params;
        let d = self.config.dim;
        let f = self.config.ff_dim;
        let heads = self.config.heads;
        let dh = d / heads;
        let scale = S::lit(1.0 / (dh as f64).sqrt());

        // feed-forward branch
        add_into(grad, l.w2, c.g.t().dot(&dx_out).iter());
        add_into(grad, l.b2, dx_out.sum_axis(Axis(0)).iter());
        let mut du = dx_out.dot(&mat(p, l.w2, f, d).t());
        Zip::from(&mut du).and(&c.u).for_each(|g, &u| *g *= gelu_grad(u));
        add_into(grad, l.w1, c.b.t().dot(&du).iter());
        add_into(grad, l.b1, du.sum_axis(Axis(0)).iter());
        let db = du.dot(&mat(p, l.w1, d, f).t());
        let dx_mid = dx_out + layer_norm_backward(&db, &c.ln2, vect(p, l.ln2_g, d), grad, l.ln2_g, l.ln2_b);

        // attention branch
        add_into(grad, l.wo, c.ctx.t().dot(&dx_mid).iter());
        add_into(grad, l.bo, dx_mid.sum_axis(Axis(0)).iter());
        let dctx = dx_mid.dot(&mat(p, l.wo, d, d).t());
        let mut dq = Array2::<S>::zeros(dctx.raw_dim());
        let mut dk = Array2::<S>::zeros(dctx.raw_dim());
        let mut dv = Array2::<S>::zeros(dctx.raw_dim());
        for (h, probs) in c.probs.iter().enumerate() {
            let cols = s![.., h * dh..(h + 1) * dh];
            let d_o = dctx.slice(cols);
            let dp = d_o.dot(&c.v.slice(cols).t());
            dv.slice_mut(cols).assign(&probs.t().dot(&d_o));
            let row_dot = (&dp * probs).sum_axis(Axis(1)).insert_axis(Axis(1));
            let ds = (&dp - &row_dot) * probs * scale;
            dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
        }
        let mut da = Array2::<S>::zeros(dctx.raw_dim());
        for (w, bias, dy) in [(l.wq, l.bq, &dq), (l.wk, l.bk, &dk), (l.wv, l.bv, &dv)] {
            add_into(grad, w, c.a.t().dot(dy).iter());
            add_into(grad, bias, dy.sum_axis(Axis(0)).iter());
            da += &dy.dot(&mat(p, w, d, d).t());
        }
        dx_mid + layer_norm_backward(&da, &c.ln1, vect(p, l.ln1_g, d), grad, l.ln1_g, l.ln1_b)
    }
}

impl<S: Scalar> ContextEncoder<S> for TinyEncoder<S> {
    fn dim(&self) -> usize {
        self.config.dim
    }

    fn max_len(&self) -> usize {
        self.config.max_len
    }

    fn encode_masked(&self, tokens: &[String], masked: &[usize]) -> Result<Array2<S>> {
        check_positions(masked, tokens.len())?;
        let mut ids = self.ids(tokens);
        for &m in masked {
            ids[m] = Vocab::MASK;
        }
        Ok(self.forward(&ids)?.hidden)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_owned).collect()
    }

    fn encoder() -> TinyEncoder<f64> {
        let vocab = Vocab::from_words(toks("alpha beta gamma delta eps zeta").into_iter());
        let cfg = TinyConfig {
            dim: 8,
            layers: 2,
            heads: 2,
            ff_dim: 12,
            max_len: 10,
            init_std: 0.3,
            seed: 3,
        };
        TinyEncoder::new(cfg, vocab).unwrap()
    }

    #[test]
    fn encode_shape_and_determinism() {
        let e = encoder();
        let t = toks("alpha beta gamma");
        let a = e.encode(&t).unwrap();
        let b = e.encode(&t).unwrap();
        assert_eq!(a.dim(), (3, 8));
        assert!(a.iter().all(|v| v.is_finite()));
        assert_eq!(a, b);
    }

    #[test]
    fn named_ranges_tile_the_buffer() {
        let mut e = encoder();
        let ranges = e.named_ranges();
        assert_eq!(ranges.len(), 2 + 2 * 16 + 3);
        assert_eq!(ranges[0].1.start, 0);
        assert_eq!(ranges.last().unwrap().1.end, e.param_count());
        assert!(ranges.windows(2).all(|w| w[0].1.end == w[1].1.start));
        let find = |name: &str| ranges.iter().find(|(n, _)| n == name).unwrap().1.clone();
        assert_eq!(find("tok").len(), e.vocab().len() * 8);
        assert_eq!(find("layer1.w1").len(), 8 * 12);

        // zeroed blocks and positions leave the final normalisation of the token row
        for (name, r) in &ranges {
            if name.starts_with("layer") || name == "pos" {
                e.params_mut()[r.clone()].iter_mut().for_each(|p| *p = 0.0);
            }
        }
        let id = e.vocab().id("beta");
        let row: Vec<f64> = e.params()[find("tok")][id * 8..(id + 1) * 8].to_vec();
        let mean = row.iter().sum::<f64>() / 8.0;
        let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 8.0;
        let out = e.encode(&toks("beta")).unwrap();
        for (j, x) in row.iter().enumerate() {
            assert_abs_diff_eq!(out[[0, j]], (x - mean) / (var + LN_EPS).sqrt(), epsilon = 1e-9);
        }
    }

    #[test]
    fn empty_mask_is_plain_encoding() {
        let e = encoder();
        let t = toks("alpha beta gamma");
        assert_eq!(e.encode_masked(&t, &[]).unwrap(), e.encode(&t).unwrap());
    }

    #[test]
    fn fully_masked_ignores_token_identity() {
        let e = encoder();
        let a = e.encode_masked(&toks("alpha beta gamma"), &[0, 1, 2]).unwrap();
        let b = e.encode_masked(&toks("delta zeta eps"), &[0, 1, 2]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn extra_mask_changes_probe_vector() {
        let e = encoder();
        let t = toks("alpha beta gamma delta");
        let one = e.encode_masked(&t, &[2]).unwrap();
        let two = e.encode_masked(&t, &[2, 3]).unwrap();
        let diff: f64 = (&one.row(2) - &two.row(2)).mapv(f64::abs).sum();
        assert!(diff > 1e-6);
    }

    #[test]
    fn mask_out_of_range_is_error() {
        let e = encoder();
        assert!(matches!(
            e.encode_masked(&toks("alpha beta"), &[2]),
            Err(Error::OutOfRange { position: 2, len: 2 })
        ));
    }

    #[test]
    fn too_long_sequence_is_error() {
        let e = encoder();
        let t = vec!["alpha".to_string(); 11];
        assert!(e.encode(&t).is_err());
    }

    /// Loss `sum(hidden * w)` for a fixed random `w`; its gradient wrt the
    /// output is `w`, which exercises every backward path.
    #[test]
    fn backward_matches_finite_differences() {
        let mut e = encoder();
        let ids = e.ids(&toks("alpha beta gamma beta"));
        let w = Array2::from_shape_fn((4, 8), |(i, j)| ((i * 8 + j) as f64 * 0.37).sin());
        let loss = |e: &TinyEncoder<f64>| (&e.forward(&ids).unwrap().hidden * &w).sum();
        let fwd = e.forward(&ids).unwrap();
        let mut grad = vec![0.0; e.param_count()];
        e.backward(&fwd, &w, &mut grad);
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in (0..e.param_count()).step_by(7) {
            let orig = e.params[i];
            e.params[i] = orig + h;
            let lp = loss(&e);
            e.params[i] = orig - h;
            let lm = loss(&e);
            e.params[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let err = (fd - grad[i]).abs() / (fd.abs() + grad[i].abs()).max(1e-4);
            worst = worst.max(err);
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn gelu_derivative() {
        for u in [-3.0f64, -0.5, 0.0, 0.7, 2.5] {
            let fd = (gelu(u + 1e-6) - gelu(u - 1e-6)) / 2e-6;
            assert_abs_diff_eq!(fd, gelu_grad(u), epsilon = 1e-8);
        }
    }
}
