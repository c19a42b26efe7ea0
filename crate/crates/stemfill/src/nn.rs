//! Small neural-network toolkit with hand-written backward passes.
//!
//! Everything is generic over the float type: training runs in `f32`, while
//! gradient verification against central finite differences runs the same
//! code in `f64`. No autodiff graph; each layer caches what its backward
//! pass needs and gradients are accumulated into per-parameter buffers.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array3, ArrayD, ArrayView2, Ix1, Ix2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Float type usable by the layers.
pub trait Elem:
    num_traits::Float
    + ndarray::ScalarOperand
    + ndarray::LinalgScalar
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::fmt::Debug
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_f32(v: f32) -> Self;
    fn to_f32(self) -> f32;
}

impl Elem for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f32(v: f32) -> Self {
        v
    }
    fn to_f32(self) -> f32 {
        self
    }
}

impl Elem for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    fn to_f32(self) -> f32 {
        self as f32
    }
}

/// A named trainable tensor with its gradient accumulator.
pub struct Param<T> {
    pub name: String,
    pub data: ArrayD<T>,
    pub grad: ArrayD<T>,
}

impl<T: Elem> Param<T> {
    fn new(name: &str, data: ArrayD<T>) -> Self {
        let grad = ArrayD::zeros(data.raw_dim());
        Param {
            name: name.to_string(),
            data,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    /// Cast this parameter to another float type (used to lift an f32 model
    /// into f64 for finite-difference checks).
    pub fn cast<U: Elem>(&self) -> Param<U> {
        Param::new(&self.name, self.data.mapv(|v| U::from_f64(v.to_f64())))
    }
}

fn normal_arr<T: Elem, R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> ArrayD<T> {
    ArrayD::from_shape_fn(shape.to_vec(), |_| {
        let v: f64 = rng.sample(StandardNormal);
        T::from_f64(v * std)
    })
}

// ---------------------------------------------------------------------------
// Elementwise pieces
// ---------------------------------------------------------------------------

pub fn silu<T: Elem>(z: T) -> T {
    z * (T::one() / (T::one() + (-z).exp()))
}

pub fn silu_grad<T: Elem>(z: T) -> T {
    let s = T::one() / (T::one() + (-z).exp());
    s * (T::one() + z * (T::one() - s))
}

/// Sinusoidal timestep features: half sines, half cosines, geometric
/// frequency ladder down to 1/10000.
pub fn sinusoidal_features<T: Elem>(t: f64, dim: usize) -> Array1<T> {
    let half = dim / 2;
    let mut out = Array1::zeros(dim);
    for i in 0..half {
        let denom = if half > 1 { (half - 1) as f64 } else { 1.0 };
        let freq = (-(10000f64.ln()) * i as f64 / denom).exp();
        out[i] = T::from_f64((t * freq).sin());
        out[half + i] = T::from_f64((t * freq).cos());
    }
    out
}

// ---------------------------------------------------------------------------
// im2col convolution
// ---------------------------------------------------------------------------

fn im2col<T: Elem>(x: &Array3<T>, k: usize) -> Array2<T> {
    let (c, h, w) = x.dim();
    let pad = k / 2;
    let mut col = Array2::zeros((c * k * k, h * w));
    for ci in 0..c {
        for dy in 0..k {
            for dx in 0..k {
                let row = (ci * k + dy) * k + dx;
                for y in 0..h {
                    let sy = y as isize + dy as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    // valid xx range so that xx + dx - pad lands in [0, w)
                    let x0 = pad.saturating_sub(dx);
                    let x1 = (w + pad - dx).min(w);
                    if x0 >= x1 {
                        continue;
                    }
                    let src = x.slice(s![ci, sy as usize, x0 + dx - pad..x1 + dx - pad]);
                    col.slice_mut(s![row, y * w + x0..y * w + x1]).assign(&src);
                }
            }
        }
    }
    col
}

fn col2im<T: Elem>(dcol: &Array2<T>, c: usize, h: usize, w: usize, k: usize) -> Array3<T> {
    let pad = k / 2;
    let mut dx_arr = Array3::zeros((c, h, w));
    for ci in 0..c {
        for dy in 0..k {
            for dx in 0..k {
                let row = (ci * k + dy) * k + dx;
                for y in 0..h {
                    let sy = y as isize + dy as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let x0 = pad.saturating_sub(dx);
                    let x1 = (w + pad - dx).min(w);
                    if x0 >= x1 {
                        continue;
                    }
                    let src = dcol.slice(s![row, y * w + x0..y * w + x1]);
                    let mut dst =
                        dx_arr.slice_mut(s![ci, sy as usize, x0 + dx - pad..x1 + dx - pad]);
                    dst += &src;
                }
            }
        }
    }
    dx_arr
}

/// 2-D convolution, odd kernel, stride 1, zero padding preserving shape.
pub struct Conv2d<T> {
    pub w: Param<T>, // [out_ch, in_ch * k * k]
    pub b: Param<T>, // [out_ch]
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
}

pub struct ConvCache<T> {
    col: Array2<T>,
    h: usize,
    w: usize,
}

impl<T: Elem> Conv2d<T> {
    pub(crate) fn new<R: Rng>(rng: &mut R, name: &str, in_ch: usize, out_ch: usize, k: usize) -> Self {
        let fan_in = (in_ch * k * k) as f64;
        let std = (2.0 / fan_in).sqrt();
        Conv2d {
            w: Param::new(&format!("{name}.w"), normal_arr(rng, &[out_ch, in_ch * k * k], std)),
            b: Param::new(&format!("{name}.b"), ArrayD::zeros(vec![out_ch])),
            in_ch,
            out_ch,
            k,
        }
    }

    fn w2(&self) -> ArrayView2<'_, T> {
        self.w.data.view().into_dimensionality::<Ix2>().unwrap()
    }

    pub fn forward(&self, x: &Array3<T>) -> (Array3<T>, ConvCache<T>) {
        let (_, h, w) = x.dim();
        let col = im2col(x, self.k);
        let mut y2 = Array2::zeros((self.out_ch, h * w));
        general_mat_mul(T::one(), &self.w2(), &col, T::zero(), &mut y2);
        let b = self.b.data.view().into_dimensionality::<Ix1>().unwrap();
        for (o, mut row) in y2.rows_mut().into_iter().enumerate() {
            row += b[o];
        }
        let y = y2.into_shape_with_order((self.out_ch, h, w)).unwrap();
        (y, ConvCache { col, h, w })
    }

    pub fn backward(&mut self, cache: &ConvCache<T>, dy: &Array3<T>) -> Array3<T> {
        let (h, w) = (cache.h, cache.w);
        let dy2 = dy.view().into_shape_with_order((self.out_ch, h * w)).unwrap();
        {
            let mut dw = self.w.grad.view_mut().into_dimensionality::<Ix2>().unwrap();
            general_mat_mul(T::one(), &dy2, &cache.col.t(), T::one(), &mut dw);
        }
        {
            let mut db = self.b.grad.view_mut().into_dimensionality::<Ix1>().unwrap();
            for (o, row) in dy2.rows().into_iter().enumerate() {
                db[o] = db[o] + row.sum();
            }
        }
        let mut dcol = Array2::zeros(cache.col.raw_dim());
        general_mat_mul(T::one(), &self.w2().t(), &dy2, T::zero(), &mut dcol);
        col2im(&dcol, self.in_ch, h, w, self.k)
    }
}

/// Fully connected layer on vectors.
pub struct Linear<T> {
    pub w: Param<T>, // [out, in]
    pub b: Param<T>, // [out]
}

impl<T: Elem> Linear<T> {
    pub(crate) fn new<R: Rng>(rng: &mut R, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let std = (2.0 / in_dim as f64).sqrt();
        Linear {
            w: Param::new(&format!("{name}.w"), normal_arr(rng, &[out_dim, in_dim], std)),
            b: Param::new(&format!("{name}.b"), ArrayD::zeros(vec![out_dim])),
        }
    }

    pub fn forward(&self, x: &Array1<T>) -> Array1<T> {
        let w = self.w.data.view().into_dimensionality::<Ix2>().unwrap();
        let b = self.b.data.view().into_dimensionality::<Ix1>().unwrap();
        w.dot(x) + &b
    }

    /// Accumulates parameter grads; returns gradient w.r.t. the input.
    pub fn backward(&mut self, x: &Array1<T>, dy: &Array1<T>) -> Array1<T> {
        {
            let mut dw = self.w.grad.view_mut().into_dimensionality::<Ix2>().unwrap();
            for (o, &g) in dy.iter().enumerate() {
                let mut row = dw.row_mut(o);
                row.scaled_add(g, x);
            }
            let mut db = self.b.grad.view_mut().into_dimensionality::<Ix1>().unwrap();
            db += dy;
        }
        let w = self.w.data.view().into_dimensionality::<Ix2>().unwrap();
        w.t().dot(dy)
    }
}

// ---------------------------------------------------------------------------
// Spatial resampling
// ---------------------------------------------------------------------------

pub(crate) fn pool2<T: Elem>(x: &Array3<T>) -> Array3<T> {
    let (c, h, w) = x.dim();
    let quarter = T::from_f64(0.25);
    Array3::from_shape_fn((c, h / 2, w / 2), |(ci, y, xx)| {
        (x[(ci, 2 * y, 2 * xx)]
            + x[(ci, 2 * y, 2 * xx + 1)]
            + x[(ci, 2 * y + 1, 2 * xx)]
            + x[(ci, 2 * y + 1, 2 * xx + 1)])
            * quarter
    })
}

pub(crate) fn pool2_back<T: Elem>(dy: &Array3<T>) -> Array3<T> {
    let (c, h2, w2) = dy.dim();
    let quarter = T::from_f64(0.25);
    Array3::from_shape_fn((c, h2 * 2, w2 * 2), |(ci, y, xx)| {
        dy[(ci, y / 2, xx / 2)] * quarter
    })
}

fn up2<T: Elem>(x: &Array3<T>) -> Array3<T> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, h * 2, w * 2), |(ci, y, xx)| x[(ci, y / 2, xx / 2)])
}

fn up2_back<T: Elem>(dy: &Array3<T>) -> Array3<T> {
    let (c, h2, w2) = dy.dim();
    Array3::from_shape_fn((c, h2 / 2, w2 / 2), |(ci, y, xx)| {
        dy[(ci, 2 * y, 2 * xx)]
            + dy[(ci, 2 * y, 2 * xx + 1)]
            + dy[(ci, 2 * y + 1, 2 * xx)]
            + dy[(ci, 2 * y + 1, 2 * xx + 1)]
    })
}

fn concat_ch<T: Elem>(a: &Array3<T>, b: &Array3<T>) -> Array3<T> {
    let (ca, h, w) = a.dim();
    let (cb, _, _) = b.dim();
    let mut out = Array3::zeros((ca + cb, h, w));
    out.slice_mut(s![..ca, .., ..]).assign(a);
    out.slice_mut(s![ca.., .., ..]).assign(b);
    out
}

// ---------------------------------------------------------------------------
// Conditioned conv block: conv -> +emb bias -> silu -> conv -> silu
// ---------------------------------------------------------------------------

pub struct ConvBlock<T> {
    conv1: Conv2d<T>,
    emb_proj: Linear<T>,
    conv2: Conv2d<T>,
}

pub struct ConvBlockCache<T> {
    c1: ConvCache<T>,
    z1: Array3<T>,
    c2: ConvCache<T>,
    z2: Array3<T>,
    emb: Array1<T>,
}

impl<T: Elem> ConvBlock<T> {
    fn new<R: Rng>(rng: &mut R, name: &str, in_ch: usize, out_ch: usize, emb_dim: usize) -> Self {
        ConvBlock {
            conv1: Conv2d::new(rng, &format!("{name}.conv1"), in_ch, out_ch, 3),
            emb_proj: Linear::new(rng, &format!("{name}.emb"), emb_dim, out_ch),
            conv2: Conv2d::new(rng, &format!("{name}.conv2"), out_ch, out_ch, 3),
        }
    }

    fn forward(&self, x: &Array3<T>, emb: &Array1<T>) -> (Array3<T>, ConvBlockCache<T>) {
        let (mut z1, c1) = self.conv1.forward(x);
        let bias = self.emb_proj.forward(emb);
        for (ch, mut plane) in z1.outer_iter_mut().enumerate() {
            plane += bias[ch];
        }
        let a1 = z1.mapv(silu);
        let (z2, c2) = self.conv2.forward(&a1);
        let y = z2.mapv(silu);
        (
            y,
            ConvBlockCache {
                c1,
                z1,
                c2,
                z2,
                emb: emb.clone(),
            },
        )
    }

    /// Returns dX; accumulates the embedding gradient into `demb`.
    fn backward(
        &mut self,
        cache: &ConvBlockCache<T>,
        dy: &Array3<T>,
        demb: &mut Array1<T>,
    ) -> Array3<T> {
        let dz2 = dy * &cache.z2.mapv(silu_grad);
        let da1 = self.conv2.backward(&cache.c2, &dz2);
        let dz1 = da1 * &cache.z1.mapv(silu_grad);
        // embedding bias receives the per-channel sum of dz1
        let nch = dz1.dim().0;
        let mut dbias = Array1::zeros(nch);
        for (ch, plane) in dz1.outer_iter().enumerate() {
            dbias[ch] = plane.sum();
        }
        let de = self.emb_proj.backward(&cache.emb, &dbias);
        *demb += &de;
        self.conv1.backward(&cache.c1, &dz1)
    }
}

// ---------------------------------------------------------------------------
// U-Net denoiser
// ---------------------------------------------------------------------------

/// Architecture of the encoder-decoder denoiser.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct UNetConfig {
    /// Total input channels (noisy target + clean context).
    pub in_ch: usize,
    /// Output channels (same as target channels).
    pub out_ch: usize,
    /// Widths of the three resolution levels.
    pub widths: [usize; 3],
    /// Sinusoidal timestep feature dimension.
    pub t_dim: usize,
    /// Embedding dimension shared by the timestep MLP output and the
    /// instruction embedding.
    pub emb_dim: usize,
    /// Hash-bucket vocabulary of the instruction embedding table.
    pub vocab: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            in_ch: 2,
            out_ch: 1,
            widths: [32, 64, 128],
            t_dim: 64,
            emb_dim: 64,
            vocab: 1024,
        }
    }
}

impl UNetConfig {
    /// Small configuration for fast desk-scale experiments and tests.
    pub fn tiny(in_ch: usize, out_ch: usize) -> Self {
        UNetConfig {
            in_ch,
            out_ch,
            widths: [8, 16, 32],
            t_dim: 64,
            emb_dim: 64,
            vocab: 1024,
        }
    }
}

/// Convolutional encoder-decoder with skip connections, 3 resolution
/// levels, additive timestep/instruction conditioning per block, and a
/// trainable hashed instruction-embedding table.
pub struct UNet<T> {
    pub cfg: UNetConfig,
    t_mlp1: Linear<T>,
    t_mlp2: Linear<T>,
    embed_table: Param<T>, // [vocab, emb_dim]
    enc0: ConvBlock<T>,
    enc1: ConvBlock<T>,
    mid: ConvBlock<T>,
    dec1: ConvBlock<T>,
    dec0: ConvBlock<T>,
    out_conv: Conv2d<T>,
}

pub struct UNetCache<T> {
    sin: Array1<T>,
    z_t1: Array1<T>,
    a_t1: Array1<T>,
    buckets: Vec<usize>,
    b_enc0: ConvBlockCache<T>,
    b_enc1: ConvBlockCache<T>,
    b_mid: ConvBlockCache<T>,
    b_dec1: ConvBlockCache<T>,
    b_dec0: ConvBlockCache<T>,
    c_out: ConvCache<T>,
}

impl<T: Elem> UNet<T> {
    pub fn new<R: Rng>(cfg: UNetConfig, rng: &mut R) -> Self {
        let [c0, c1, c2] = cfg.widths;
        let e = cfg.emb_dim;
        let model = UNet {
            t_mlp1: Linear::new(rng, "tmlp1", cfg.t_dim, e),
            t_mlp2: Linear::new(rng, "tmlp2", e, e),
            embed_table: Param::new("embed_table", normal_arr(rng, &[cfg.vocab, e], 0.02)),
            enc0: ConvBlock::new(rng, "enc0", cfg.in_ch, c0, e),
            enc1: ConvBlock::new(rng, "enc1", c0, c1, e),
            mid: ConvBlock::new(rng, "mid", c1, c2, e),
            dec1: ConvBlock::new(rng, "dec1", c2 + c1, c1, e),
            dec0: ConvBlock::new(rng, "dec0", c1 + c0, c0, e),
            // Zero-initialized so the network's initial output is exactly
            // zero, giving a predictable loss at step 0 (MSE ≈ 1 against
            // unit-normal targets, BCE = ln 2).
            out_conv: {
                let mut c = Conv2d::new(rng, "out", c0, cfg.out_ch, 1);
                c.w.data.fill(T::zero());
                c
            },
            cfg,
        };
        model
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(|p| n += p.data.len());
        n
    }

    fn visit_params(&self, mut f: impl FnMut(&Param<T>)) {
        let UNet {
            t_mlp1,
            t_mlp2,
            embed_table,
            enc0,
            enc1,
            mid,
            dec1,
            dec0,
            out_conv,
            ..
        } = self;
        for l in [t_mlp1, t_mlp2] {
            f(&l.w);
            f(&l.b);
        }
        f(embed_table);
        for b in [enc0, enc1, mid, dec1, dec0] {
            f(&b.conv1.w);
            f(&b.conv1.b);
            f(&b.emb_proj.w);
            f(&b.emb_proj.b);
            f(&b.conv2.w);
            f(&b.conv2.b);
        }
        f(&out_conv.w);
        f(&out_conv.b);
    }

    /// All trainable parameters in a stable order.
    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let UNet {
            t_mlp1,
            t_mlp2,
            embed_table,
            enc0,
            enc1,
            mid,
            dec1,
            dec0,
            out_conv,
            ..
        } = self;
        let mut v: Vec<&mut Param<T>> = Vec::new();
        for l in [t_mlp1, t_mlp2] {
            v.push(&mut l.w);
            v.push(&mut l.b);
        }
        v.push(embed_table);
        for b in [enc0, enc1, mid, dec1, dec0] {
            v.push(&mut b.conv1.w);
            v.push(&mut b.conv1.b);
            v.push(&mut b.emb_proj.w);
            v.push(&mut b.emb_proj.b);
            v.push(&mut b.conv2.w);
            v.push(&mut b.conv2.b);
        }
        v.push(&mut out_conv.w);
        v.push(&mut out_conv.b);
        v
    }

    pub fn params(&self) -> Vec<(String, ArrayD<f32>)> {
        let mut v = Vec::new();
        self.visit_params(|p| v.push((p.name.clone(), p.data.mapv(|x| x.to_f32()))));
        v
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Lift the model into another float type (exact cast).
    pub fn cast<U: Elem>(&self) -> UNet<U> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut out = UNet::<U>::new(self.cfg.clone(), &mut rng);
        let src = self.params();
        for (p, (name, data)) in out.params_mut().into_iter().zip(src) {
            assert_eq!(p.name, name);
            p.data = data.mapv(U::from_f32);
            p.zero_grad();
        }
        out
    }

    /// Mean of the embedding-table rows for the given hash buckets.
    /// Empty bucket list -> zero vector (the dropped-conditioning sentinel).
    pub fn instruction_vector(&self, buckets: &[usize]) -> Array1<T> {
        let mut v = Array1::zeros(self.cfg.emb_dim);
        if buckets.is_empty() {
            return v;
        }
        let table = self.embed_table.data.view().into_dimensionality::<Ix2>().unwrap();
        for &b in buckets {
            v += &table.row(b % self.cfg.vocab);
        }
        v / T::from_f64(buckets.len() as f64)
    }

    /// Forward pass. `buckets` is the hashed instruction; pass an empty
    /// slice for unconditional (dropped) text conditioning.
    pub fn forward(&self, x: &Array3<T>, t: f64, buckets: &[usize]) -> (Array3<T>, UNetCache<T>) {
        assert_eq!(x.dim().0, self.cfg.in_ch, "input channel mismatch");
        let (_, h, w) = x.dim();
        assert!(h % 4 == 0 && w % 4 == 0, "spatial dims must be multiples of 4");

        let sin = sinusoidal_features::<T>(t, self.cfg.t_dim);
        let z_t1 = self.t_mlp1.forward(&sin);
        let a_t1 = z_t1.mapv(silu);
        let e_t = self.t_mlp2.forward(&a_t1);
        let emb = &e_t + &self.instruction_vector(buckets);

        let (h0, b_enc0) = self.enc0.forward(x, &emb);
        let d0 = pool2(&h0);
        let (h1, b_enc1) = self.enc1.forward(&d0, &emb);
        let d1 = pool2(&h1);
        let (m, b_mid) = self.mid.forward(&d1, &emb);
        let u1 = up2(&m);
        let cat1 = concat_ch(&u1, &h1);
        let (o1, b_dec1) = self.dec1.forward(&cat1, &emb);
        let u0 = up2(&o1);
        let cat0 = concat_ch(&u0, &h0);
        let (o0, b_dec0) = self.dec0.forward(&cat0, &emb);
        let (y, c_out) = self.out_conv.forward(&o0);

        (
            y,
            UNetCache {
                sin,
                z_t1,
                a_t1,
                buckets: buckets.to_vec(),
                b_enc0,
                b_enc1,
                b_mid,
                b_dec1,
                b_dec0,
                c_out,
            },
        )
    }

    /// Backward pass from dL/dy; accumulates gradients into all parameters.
    pub fn backward(&mut self, cache: &UNetCache<T>, dy: &Array3<T>) {
        let [c0, c1, c2] = self.cfg.widths;
        let mut demb = Array1::zeros(self.cfg.emb_dim);

        let do0 = self.out_conv.backward(&cache.c_out, dy);
        let dcat0 = self.dec0.backward(&cache.b_dec0, &do0, &mut demb);
        let du0 = dcat0.slice(s![..c1, .., ..]).to_owned();
        let mut dh0 = dcat0.slice(s![c1.., .., ..]).to_owned();
        let do1 = up2_back(&du0);
        let dcat1 = self.dec1.backward(&cache.b_dec1, &do1, &mut demb);
        let du1 = dcat1.slice(s![..c2, .., ..]).to_owned();
        let mut dh1 = dcat1.slice(s![c2.., .., ..]).to_owned();
        let dm = up2_back(&du1);
        let dd1 = self.mid.backward(&cache.b_mid, &dm, &mut demb);
        dh1 += &pool2_back(&dd1);
        let dd0 = self.enc1.backward(&cache.b_enc1, &dh1, &mut demb);
        dh0 += &pool2_back(&dd0);
        let _dx = self.enc0.backward(&cache.b_enc0, &dh0, &mut demb);
        let _ = c0;

        // instruction embedding table
        if !cache.buckets.is_empty() {
            let scale = T::from_f64(1.0 / cache.buckets.len() as f64);
            let mut table_grad = self
                .embed_table
                .grad
                .view_mut()
                .into_dimensionality::<Ix2>()
                .unwrap();
            for &b in &cache.buckets {
                let mut row = table_grad.row_mut(b % self.cfg.vocab);
                row.scaled_add(scale, &demb);
            }
        }

        // timestep MLP
        let da_t1 = self.t_mlp2.backward(&cache.a_t1, &demb);
        let dz_t1 = &da_t1 * &cache.z_t1.mapv(silu_grad);
        let _ = self.t_mlp1.backward(&cache.sin, &dz_t1);
    }
}

use rand::SeedableRng;

// ---------------------------------------------------------------------------
// AdamW
// ---------------------------------------------------------------------------

/// Decoupled-weight-decay Adam.
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: Vec<ArrayD<T>>,
    v: Vec<ArrayD<T>>,
}

impl<T: Elem> AdamW<T> {
    pub fn new(beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        AdamW {
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn update(&mut self, params: &mut [&mut Param<T>], lr: f64) {
        if self.m.is_empty() {
            for p in params.iter() {
                self.m.push(ArrayD::zeros(p.data.raw_dim()));
                self.v.push(ArrayD::zeros(p.data.raw_dim()));
            }
        }
        self.step += 1;
        let b1 = self.beta1;
        let b2 = self.beta2;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(&mut p.data)
                .and(&p.grad)
                .and(m)
                .and(v)
                .for_each(|x, &g, mi, vi| {
                    let g = g.to_f64();
                    let m_new = b1 * mi.to_f64() + (1.0 - b1) * g;
                    let v_new = b2 * vi.to_f64() + (1.0 - b2) * g * g;
                    *mi = T::from_f64(m_new);
                    *vi = T::from_f64(v_new);
                    let mhat = m_new / bc1;
                    let vhat = v_new / bc2;
                    let x64 = x.to_f64();
                    *x = T::from_f64(
                        x64 - lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * x64),
                    );
                });
        }
    }

    /// Optimizer state as named tensors (for checkpoint resume).
    pub fn state_tensors(&self, params: &[&mut Param<T>]) -> Vec<(String, ArrayD<f32>)> {
        let mut out = Vec::new();
        for (i, p) in params.iter().enumerate() {
            if i < self.m.len() {
                out.push((format!("opt.m.{}", p.name), self.m[i].mapv(|x| x.to_f32())));
                out.push((format!("opt.v.{}", p.name), self.v[i].mapv(|x| x.to_f32())));
            }
        }
        out
    }

    pub fn load_state(
        &mut self,
        params: &[&mut Param<T>],
        tensors: &[(String, ArrayD<f32>)],
        step: u64,
    ) {
        self.m.clear();
        self.v.clear();
        for p in params.iter() {
            let find = |prefix: &str| {
                tensors
                    .iter()
                    .find(|(n, _)| n == &format!("{prefix}.{}", p.name))
                    .map(|(_, t)| t.mapv(T::from_f32))
                    .unwrap_or_else(|| ArrayD::zeros(p.data.raw_dim()))
            };
            self.m.push(find("opt.m"));
            self.v.push(find("opt.v"));
        }
        self.step = step;
    }
}

/// Peak learning rate shaped by linear warmup then cosine decay to zero.
pub fn lr_at(step: u64, peak: f64, warmup: u64, max_steps: u64) -> f64 {
    if step < warmup {
        return peak * (step as f64 + 1.0) / warmup as f64;
    }
    let max_steps = max_steps.max(warmup + 1);
    let p = (step - warmup) as f64 / (max_steps - warmup) as f64;
    let p = p.min(1.0);
    peak * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conv_shape_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let conv = Conv2d::<f32>::new(&mut rng, "c", 3, 5, 3);
        let x = Array3::from_shape_fn((3, 8, 12), |(a, b, c)| (a + b + c) as f32 * 0.1);
        let (y, _) = conv.forward(&x);
        assert_eq!(y.dim(), (5, 8, 12));
    }

    #[test]
    fn im2col_matches_direct_conv() {
        // brute-force 3x3 convolution as an oracle for the im2col path
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let conv = Conv2d::<f64>::new(&mut rng, "c", 2, 3, 3);
        let x = Array3::from_shape_fn((2, 5, 6), |(a, b, c)| {
            ((a * 31 + b * 7 + c) % 13) as f64 * 0.3 - 1.0
        });
        let (y, _) = conv.forward(&x);
        let w = conv.w.data.view().into_dimensionality::<Ix2>().unwrap();
        let b = conv.b.data.view().into_dimensionality::<Ix1>().unwrap();
        for o in 0..3 {
            for yy in 0..5i64 {
                for xx in 0..6i64 {
                    let mut acc = b[o];
                    for ci in 0..2usize {
                        for dy in 0..3i64 {
                            for dx in 0..3i64 {
                                let sy = yy + dy - 1;
                                let sx = xx + dx - 1;
                                if sy < 0 || sy >= 5 || sx < 0 || sx >= 6 {
                                    continue;
                                }
                                let wi = (ci * 3 + dy as usize) * 3 + dx as usize;
                                acc += w[(o, wi)] * x[(ci, sy as usize, sx as usize)];
                            }
                        }
                    }
                    let got = y[(o, yy as usize, xx as usize)];
                    assert!((got - acc).abs() < 1e-12, "mismatch at {o},{yy},{xx}");
                }
            }
        }
    }

    #[test]
    fn unet_output_shape_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = UNetConfig {
            in_ch: 2,
            out_ch: 1,
            widths: [4, 6, 8],
            t_dim: 16,
            emb_dim: 16,
            vocab: 32,
        };
        let net = UNet::<f32>::new(cfg, &mut rng);
        let x = Array3::from_shape_fn((2, 8, 16), |(a, b, c)| ((a + b + c) as f32).sin());
        let (y1, _) = net.forward(&x, 10.0, &[3, 7]);
        let (y2, _) = net.forward(&x, 10.0, &[3, 7]);
        assert_eq!(y1.dim(), (1, 8, 16));
        assert_eq!(y1, y2);
    }

    #[test]
    fn empty_buckets_give_zero_instruction_vector() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = UNet::<f32>::new(UNetConfig::tiny(2, 1), &mut rng);
        let v = net.instruction_vector(&[]);
        assert!(v.iter().all(|&x| x == 0.0));
        let v2 = net.instruction_vector(&[5, 9]);
        assert!(v2.iter().any(|&x| x != 0.0));
    }

    #[test]
    fn lr_schedule_shape() {
        let peak = 1e-4;
        assert!(lr_at(0, peak, 500, 10_000) < peak * 0.01);
        assert!((lr_at(499, peak, 500, 10_000) - peak).abs() < peak * 0.01);
        assert!((lr_at(500, peak, 500, 10_000) - peak).abs() < peak * 1e-6);
        assert!(lr_at(9_999, peak, 500, 10_000) < peak * 0.01);
        assert!(lr_at(20_000, peak, 500, 10_000) >= 0.0);
    }

    /// Central finite differences on a random parameter sample; the full
    /// model-level gradient oracle lives in the acceptance suite.
    #[test]
    fn unet_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = UNetConfig {
            in_ch: 2,
            out_ch: 1,
            widths: [2, 2, 3],
            t_dim: 8,
            emb_dim: 8,
            vocab: 8,
        };
        let mut net = UNet::<f64>::new(cfg, &mut rng);
        let x = Array3::from_shape_fn((2, 4, 8), |(a, b, c)| ((a * 5 + b * 3 + c) as f64).sin());
        let target = Array3::from_shape_fn((1, 4, 8), |(_, b, c)| ((b + 2 * c) as f64).cos());
        let buckets = vec![1usize, 6];

        let loss_of = |net: &UNet<f64>| {
            let (y, _) = net.forward(&x, 37.0, &buckets);
            (&y - &target).mapv(|d| d * d).mean().unwrap()
        };

        net.zero_grad();
        let (y, cache) = net.forward(&x, 37.0, &buckets);
        let n = y.len() as f64;
        let dy = (&y - &target).mapv(|d| 2.0 * d / n);
        net.backward(&cache, &dy);

        let h = 1e-5;
        let mut checked = 0;
        let n_params = net.params_mut().len();
        for pi in 0..n_params {
            for idx in [0usize, 1] {
                let (g_analytic, len) = {
                    let params = net.params_mut();
                    let p = &params[pi];
                    if idx >= p.data.len() {
                        continue;
                    }
                    (p.grad.as_slice().unwrap()[idx], p.data.len())
                };
                let _ = len;
                let orig = net.params_mut()[pi].data.as_slice().unwrap()[idx];
                net.params_mut()[pi].data.as_slice_mut().unwrap()[idx] = orig + h;
                let lp = loss_of(&net);
                net.params_mut()[pi].data.as_slice_mut().unwrap()[idx] = orig - h;
                let lm = loss_of(&net);
                net.params_mut()[pi].data.as_slice_mut().unwrap()[idx] = orig;
                let g_fd = (lp - lm) / (2.0 * h);
                let denom = g_analytic.abs().max(g_fd.abs()).max(1e-8);
                assert!(
                    (g_analytic - g_fd).abs() / denom < 1e-4,
                    "param {pi} idx {idx}: analytic {g_analytic} vs fd {g_fd}"
                );
                checked += 1;
            }
        }
        assert!(checked > 20);
    }
}
