//! Time-conditioned noise-prediction network.
//!
//! A small two-level U-shaped convolutional network: residual blocks with group
//! normalization and SiLU, a sinusoidal step embedding passed through a two-layer MLP and
//! injected additively per block, stride-2 downsampling, nearest-neighbour upsampling and
//! a channel-concatenation skip across levels.

use super::layers::*;
use super::scalar::Scalar;
use super::tensor::Tensor;
use rand_chacha::ChaCha8Rng;

/// Architecture hyperparameters. The checkpoint format serializes this block and refuses
/// to load weights for a different configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UnetConfig {
    pub in_channels: usize,
    /// Channel width at full resolution; the lower level uses twice this.
    pub base_channels: usize,
    pub time_embed_dim: usize,
    /// Upper bound on group-norm groups; actual groups = min(cap, channels).
    pub groups_cap: usize,
}

impl Default for UnetConfig {
    fn default() -> Self {
        UnetConfig { in_channels: 1, base_channels: 32, time_embed_dim: 128, groups_cap: 8 }
    }
}

impl UnetConfig {
    /// Tiny variant used by gradient checks.
    pub fn tiny() -> Self {
        UnetConfig { in_channels: 1, base_channels: 2, time_embed_dim: 16, groups_cap: 2 }
    }

    fn groups(&self, channels: usize) -> usize {
        let g = self.groups_cap.min(channels);
        assert_eq!(channels % g, 0, "channels {channels} not divisible by {g} groups");
        g
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv<T> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Norm<T> {
    pub g: Tensor<T>,
    pub b: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lin<T> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResBlockParams<T> {
    pub norm1: Norm<T>,
    pub conv1: Conv<T>,
    pub temb: Lin<T>,
    pub norm2: Norm<T>,
    pub conv2: Conv<T>,
    /// 1x1 projection when input and output widths differ.
    pub skip: Option<Conv<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnetParams<T> {
    pub cfg: UnetConfig,
    pub time1: Lin<T>,
    pub time2: Lin<T>,
    pub stem: Conv<T>,
    pub enc1a: ResBlockParams<T>,
    pub enc1b: ResBlockParams<T>,
    pub down: Conv<T>,
    pub enc2a: ResBlockParams<T>,
    pub enc2b: ResBlockParams<T>,
    pub up: Conv<T>,
    pub dec1a: ResBlockParams<T>,
    pub dec1b: ResBlockParams<T>,
    pub head_norm: Norm<T>,
    pub head: Conv<T>,
}

const K3: ConvShape = ConvShape { kernel: 3, stride: 1, pad: 1 };
const K3S2: ConvShape = ConvShape { kernel: 3, stride: 2, pad: 1 };
const K1: ConvShape = ConvShape { kernel: 1, stride: 1, pad: 0 };

fn conv_zeros<T: Scalar>(co: usize, ci: usize, k: usize) -> Conv<T> {
    Conv { w: Tensor::zeros(&[co, ci, k, k]), b: Tensor::zeros(&[co]) }
}

fn res_zeros<T: Scalar>(cfg: &UnetConfig, ci: usize, co: usize) -> ResBlockParams<T> {
    ResBlockParams {
        norm1: Norm { g: Tensor::zeros(&[ci]), b: Tensor::zeros(&[ci]) },
        conv1: conv_zeros(co, ci, 3),
        temb: Lin { w: Tensor::zeros(&[co, cfg.time_embed_dim]), b: Tensor::zeros(&[co]) },
        norm2: Norm { g: Tensor::zeros(&[co]), b: Tensor::zeros(&[co]) },
        conv2: conv_zeros(co, co, 3),
        skip: if ci != co { Some(conv_zeros(co, ci, 1)) } else { None },
    }
}

impl<T: Scalar> UnetParams<T> {
    /// All-zero parameter set with the right shapes (gradient accumulator).
    pub fn zeros(cfg: &UnetConfig) -> Self {
        let (c1, c2) = (cfg.base_channels, 2 * cfg.base_channels);
        let d = cfg.time_embed_dim;
        UnetParams {
            cfg: *cfg,
            time1: Lin { w: Tensor::zeros(&[d, d]), b: Tensor::zeros(&[d]) },
            time2: Lin { w: Tensor::zeros(&[d, d]), b: Tensor::zeros(&[d]) },
            stem: conv_zeros(c1, cfg.in_channels, 3),
            enc1a: res_zeros(cfg, c1, c1),
            enc1b: res_zeros(cfg, c1, c1),
            down: conv_zeros(c2, c1, 3),
            enc2a: res_zeros(cfg, c2, c2),
            enc2b: res_zeros(cfg, c2, c2),
            up: conv_zeros(c1, c2, 3),
            dec1a: res_zeros(cfg, 2 * c1, c1),
            dec1b: res_zeros(cfg, c1, c1),
            head_norm: Norm { g: Tensor::zeros(&[c1]), b: Tensor::zeros(&[c1]) },
            head: conv_zeros(cfg.in_channels, c1, 3),
        }
    }

    /// Random initialization: Kaiming-style fan-in scaling, unit norms, and zero-filled
    /// second/residual-output convolutions so the network starts near the identity score.
    pub fn init(cfg: &UnetConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut p = Self::zeros(cfg);
        let fill = |t: &mut Tensor<T>, std: f64, rng: &mut ChaCha8Rng| {
            use rand_distr::{Distribution, StandardNormal};
            for v in t.data.iter_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *v = T::from_f64(z * std);
            }
        };
        let conv_std = |c: &Conv<T>| {
            let fan_in = c.w.dim(1) * c.w.dim(2) * c.w.dim(3);
            (2.0 / fan_in as f64).sqrt()
        };
        let lin_std = |l: &Lin<T>| (1.0 / l.w.dim(1) as f64).sqrt();

        macro_rules! conv_init {
            ($c:expr) => {{
                let s = conv_std(&$c);
                fill(&mut $c.w, s, rng);
            }};
        }
        macro_rules! lin_init {
            ($l:expr) => {{
                let s = lin_std(&$l);
                fill(&mut $l.w, s, rng);
            }};
        }
        macro_rules! res_init {
            ($r:expr) => {{
                $r.norm1.g.fill(T::ONE);
                conv_init!($r.conv1);
                lin_init!($r.temb);
                $r.norm2.g.fill(T::ONE);
                // conv2 left at zero
                if let Some(s) = $r.skip.as_mut() {
                    conv_init!(s);
                }
            }};
        }

        lin_init!(p.time1);
        lin_init!(p.time2);
        conv_init!(p.stem);
        res_init!(p.enc1a);
        res_init!(p.enc1b);
        conv_init!(p.down);
        res_init!(p.enc2a);
        res_init!(p.enc2b);
        conv_init!(p.up);
        res_init!(p.dec1a);
        res_init!(p.dec1b);
        p.head_norm.g.fill(T::ONE);
        // head conv left at zero
        p
    }

    /// Named tensors in a fixed traversal order (checkpoint manifest order).
    pub fn tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        self.for_each(|name, t| out.push((name, t)));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> = Vec::new();
        macro_rules! push {
            ($name:expr, $t:expr) => {
                out.push(($name.to_string(), $t));
            };
        }
        macro_rules! res {
            ($prefix:expr, $r:expr) => {
                push!(format!("{}.norm1.g", $prefix), &mut $r.norm1.g);
                push!(format!("{}.norm1.b", $prefix), &mut $r.norm1.b);
                push!(format!("{}.conv1.w", $prefix), &mut $r.conv1.w);
                push!(format!("{}.conv1.b", $prefix), &mut $r.conv1.b);
                push!(format!("{}.temb.w", $prefix), &mut $r.temb.w);
                push!(format!("{}.temb.b", $prefix), &mut $r.temb.b);
                push!(format!("{}.norm2.g", $prefix), &mut $r.norm2.g);
                push!(format!("{}.norm2.b", $prefix), &mut $r.norm2.b);
                push!(format!("{}.conv2.w", $prefix), &mut $r.conv2.w);
                push!(format!("{}.conv2.b", $prefix), &mut $r.conv2.b);
                if let Some(s) = $r.skip.as_mut() {
                    push!(format!("{}.skip.w", $prefix), &mut s.w);
                    push!(format!("{}.skip.b", $prefix), &mut s.b);
                }
            };
        }
        push!("time1.w", &mut self.time1.w);
        push!("time1.b", &mut self.time1.b);
        push!("time2.w", &mut self.time2.w);
        push!("time2.b", &mut self.time2.b);
        push!("stem.w", &mut self.stem.w);
        push!("stem.b", &mut self.stem.b);
        res!("enc1a", self.enc1a);
        res!("enc1b", self.enc1b);
        push!("down.w", &mut self.down.w);
        push!("down.b", &mut self.down.b);
        res!("enc2a", self.enc2a);
        res!("enc2b", self.enc2b);
        push!("up.w", &mut self.up.w);
        push!("up.b", &mut self.up.b);
        res!("dec1a", self.dec1a);
        res!("dec1b", self.dec1b);
        push!("head_norm.g", &mut self.head_norm.g);
        push!("head_norm.b", &mut self.head_norm.b);
        push!("head.w", &mut self.head.w);
        push!("head.b", &mut self.head.b);
        out
    }

    fn for_each<'a>(&'a self, mut f: impl FnMut(String, &'a Tensor<T>)) {
        macro_rules! res {
            ($prefix:expr, $r:expr) => {
                f(format!("{}.norm1.g", $prefix), &$r.norm1.g);
                f(format!("{}.norm1.b", $prefix), &$r.norm1.b);
                f(format!("{}.conv1.w", $prefix), &$r.conv1.w);
                f(format!("{}.conv1.b", $prefix), &$r.conv1.b);
                f(format!("{}.temb.w", $prefix), &$r.temb.w);
                f(format!("{}.temb.b", $prefix), &$r.temb.b);
                f(format!("{}.norm2.g", $prefix), &$r.norm2.g);
                f(format!("{}.norm2.b", $prefix), &$r.norm2.b);
                f(format!("{}.conv2.w", $prefix), &$r.conv2.w);
                f(format!("{}.conv2.b", $prefix), &$r.conv2.b);
                if let Some(s) = $r.skip.as_ref() {
                    f(format!("{}.skip.w", $prefix), &s.w);
                    f(format!("{}.skip.b", $prefix), &s.b);
                }
            };
        }
        f("time1.w".into(), &self.time1.w);
        f("time1.b".into(), &self.time1.b);
        f("time2.w".into(), &self.time2.w);
        f("time2.b".into(), &self.time2.b);
        f("stem.w".into(), &self.stem.w);
        f("stem.b".into(), &self.stem.b);
        res!("enc1a", self.enc1a);
        res!("enc1b", self.enc1b);
        f("down.w".into(), &self.down.w);
        f("down.b".into(), &self.down.b);
        res!("enc2a", self.enc2a);
        res!("enc2b", self.enc2b);
        f("up.w".into(), &self.up.w);
        f("up.b".into(), &self.up.b);
        res!("dec1a", self.dec1a);
        res!("dec1b", self.dec1b);
        f("head_norm.g".into(), &self.head_norm.g);
        f("head_norm.b".into(), &self.head_norm.b);
        f("head.w".into(), &self.head.w);
        f("head.b".into(), &self.head.b);
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.all_finite())
    }

    pub fn cast<U: Scalar>(&self) -> UnetParams<U> {
        let mut out = UnetParams::<U>::zeros(&self.cfg);
        for ((dname, dst), (sname, src)) in out.tensors_mut().into_iter().zip(self.tensors()) {
            debug_assert_eq!(dname, sname);
            *dst = src.cast();
        }
        out
    }
}

struct ResCache<T> {
    input_shape: Vec<usize>,
    n1: NormCache<T>,
    act1: Tensor<T>,
    c1: ConvCache<T>,
    n2: NormCache<T>,
    act2: Tensor<T>,
    c2: ConvCache<T>,
    skip: Option<ConvCache<T>>,
}

/// Forward activations retained for the backward pass.
pub struct UnetCache<T> {
    emb0: Tensor<T>,
    e1: Tensor<T>,
    e2: Tensor<T>,
    temb: Tensor<T>,
    temb_act: Tensor<T>,
    stem: ConvCache<T>,
    enc1a: ResCache<T>,
    enc1b: ResCache<T>,
    down: ConvCache<T>,
    enc2a: ResCache<T>,
    enc2b: ResCache<T>,
    up: ConvCache<T>,
    dec1a: ResCache<T>,
    dec1b: ResCache<T>,
    head_norm: NormCache<T>,
    head_act: Tensor<T>,
    head: ConvCache<T>,
}

fn res_forward<T: Scalar>(
    cfg: &UnetConfig,
    p: &ResBlockParams<T>,
    x: &Tensor<T>,
    temb_act: &Tensor<T>,
) -> (Tensor<T>, ResCache<T>) {
    let ci = x.dim(1);
    let co = p.conv1.w.dim(0);
    let (a1, n1) = group_norm(x, &p.norm1.g, &p.norm1.b, cfg.groups(ci));
    let s1 = silu(&a1);
    let (mut h, c1) = conv2d(&s1, &p.conv1.w, &p.conv1.b, &K3);
    let proj = linear(temb_act, &p.temb.w, &p.temb.b);
    add_channel_embed(&mut h, &proj);
    let (a2, n2) = group_norm(&h, &p.norm2.g, &p.norm2.b, cfg.groups(co));
    let s2 = silu(&a2);
    let (body, c2) = conv2d(&s2, &p.conv2.w, &p.conv2.b, &K3);

    let (mut out, skip_cache) = match &p.skip {
        Some(sk) => {
            let (s, c) = conv2d(x, &sk.w, &sk.b, &K1);
            (s, Some(c))
        }
        None => (x.clone(), None),
    };
    out.axpy(T::ONE, &body);
    (
        out,
        ResCache {
            input_shape: x.shape.clone(),
            n1,
            act1: a1,
            c1,
            n2,
            act2: a2,
            c2,
            skip: skip_cache,
        },
    )
}

#[allow(clippy::too_many_arguments)]
fn res_backward<T: Scalar>(
    cfg: &UnetConfig,
    p: &ResBlockParams<T>,
    cache: &ResCache<T>,
    temb_act: &Tensor<T>,
    dout: &Tensor<T>,
    mut grads: Option<&mut ResBlockParams<T>>,
    dtemb_act: Option<&mut Tensor<T>>,
) -> Tensor<T> {
    let ci = cache.input_shape[1];
    let co = p.conv1.w.dim(0);

    // Body path.
    let mut dw2 = Tensor::zeros(&p.conv2.w.shape);
    let mut db2 = Tensor::zeros(&p.conv2.b.shape);
    let ds2 = conv2d_backward(dout, &p.conv2.w, &cache.c2, &K3, &mut dw2, &mut db2, true)
        .expect("input grad requested");
    let da2 = silu_backward(&ds2, &cache.act2);
    let mut dg2 = Tensor::zeros(&p.norm2.g.shape);
    let mut dbeta2 = Tensor::zeros(&p.norm2.b.shape);
    let dh = group_norm_backward(&da2, &p.norm2.g, &cache.n2, cfg.groups(co), &mut dg2, &mut dbeta2);

    // Time-embedding projection.
    if let (Some(g), Some(dta)) = (grads.as_deref_mut(), dtemb_act) {
        let demb = channel_embed_backward(&dh);
        let dta_local = linear_backward(&demb, temb_act, &p.temb.w, &mut g.temb.w, &mut g.temb.b);
        dta.axpy(T::ONE, &dta_local);
    }

    let mut dw1 = Tensor::zeros(&p.conv1.w.shape);
    let mut db1 = Tensor::zeros(&p.conv1.b.shape);
    let ds1 = conv2d_backward(&dh, &p.conv1.w, &cache.c1, &K3, &mut dw1, &mut db1, true)
        .expect("input grad requested");
    let da1 = silu_backward(&ds1, &cache.act1);
    let mut dg1 = Tensor::zeros(&p.norm1.g.shape);
    let mut dbeta1 = Tensor::zeros(&p.norm1.b.shape);
    let mut dx = group_norm_backward(&da1, &p.norm1.g, &cache.n1, cfg.groups(ci), &mut dg1, &mut dbeta1);

    // Skip path.
    match (&p.skip, &cache.skip) {
        (Some(sk), Some(skc)) => {
            let mut dws = Tensor::zeros(&sk.w.shape);
            let mut dbs = Tensor::zeros(&sk.b.shape);
            let dskip = conv2d_backward(dout, &sk.w, skc, &K1, &mut dws, &mut dbs, true).unwrap();
            dx.axpy(T::ONE, &dskip);
            if let Some(g) = grads.as_deref_mut() {
                let gs = g.skip.as_mut().expect("grad struct shape matches");
                gs.w.axpy(T::ONE, &dws);
                gs.b.axpy(T::ONE, &dbs);
            }
        }
        (None, None) => dx.axpy(T::ONE, dout),
        _ => unreachable!(),
    }

    if let Some(g) = grads {
        g.conv2.w.axpy(T::ONE, &dw2);
        g.conv2.b.axpy(T::ONE, &db2);
        g.norm2.g.axpy(T::ONE, &dg2);
        g.norm2.b.axpy(T::ONE, &dbeta2);
        g.conv1.w.axpy(T::ONE, &dw1);
        g.conv1.b.axpy(T::ONE, &db1);
        g.norm1.g.axpy(T::ONE, &dg1);
        g.norm1.b.axpy(T::ONE, &dbeta1);
    }
    dx
}

fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (n, ca, h, w) = (a.dim(0), a.dim(1), a.dim(2), a.dim(3));
    let cb = b.dim(1);
    let mut out = Tensor::zeros(&[n, ca + cb, h, w]);
    let hw = h * w;
    for img in 0..n {
        out.data[img * (ca + cb) * hw..img * (ca + cb) * hw + ca * hw]
            .copy_from_slice(&a.data[img * ca * hw..(img + 1) * ca * hw]);
        out.data[img * (ca + cb) * hw + ca * hw..(img + 1) * (ca + cb) * hw]
            .copy_from_slice(&b.data[img * cb * hw..(img + 1) * cb * hw]);
    }
    out
}

fn split_channels<T: Scalar>(d: &Tensor<T>, ca: usize) -> (Tensor<T>, Tensor<T>) {
    let (n, c, h, w) = (d.dim(0), d.dim(1), d.dim(2), d.dim(3));
    let cb = c - ca;
    let hw = h * w;
    let mut da = Tensor::zeros(&[n, ca, h, w]);
    let mut db = Tensor::zeros(&[n, cb, h, w]);
    for img in 0..n {
        da.data[img * ca * hw..(img + 1) * ca * hw]
            .copy_from_slice(&d.data[img * c * hw..img * c * hw + ca * hw]);
        db.data[img * cb * hw..(img + 1) * cb * hw]
            .copy_from_slice(&d.data[img * c * hw + ca * hw..(img + 1) * c * hw]);
    }
    (da, db)
}

/// Forward pass: predicts the noise component of `x` (shape `[n, in_ch, h, w]`) at the
/// given diffusion steps (one per batch image).
pub fn unet_forward<T: Scalar>(p: &UnetParams<T>, x: &Tensor<T>, steps: &[usize]) -> (Tensor<T>, UnetCache<T>) {
    assert_eq!(x.dim(0), steps.len(), "one step per batch image");
    let cfg = &p.cfg;

    let emb0 = sinusoidal_embed::<T>(steps, cfg.time_embed_dim);
    let e1 = linear(&emb0, &p.time1.w, &p.time1.b);
    let e2 = silu(&e1);
    let temb = linear(&e2, &p.time2.w, &p.time2.b);
    let temb_act = silu(&temb);

    let (h0, stem) = conv2d(x, &p.stem.w, &p.stem.b, &K3);
    let (h1, enc1a) = res_forward(cfg, &p.enc1a, &h0, &temb_act);
    let (h2, enc1b) = res_forward(cfg, &p.enc1b, &h1, &temb_act);
    let (d0, down) = conv2d(&h2, &p.down.w, &p.down.b, &K3S2);
    let (h3, enc2a) = res_forward(cfg, &p.enc2a, &d0, &temb_act);
    let (h4, enc2b) = res_forward(cfg, &p.enc2b, &h3, &temb_act);
    let u0 = upsample2x(&h4);
    let (u1, up) = conv2d(&u0, &p.up.w, &p.up.b, &K3);
    let cat = concat_channels(&u1, &h2);
    let (h5, dec1a) = res_forward(cfg, &p.dec1a, &cat, &temb_act);
    let (h6, dec1b) = res_forward(cfg, &p.dec1b, &h5, &temb_act);
    let (a, head_norm) = group_norm(&h6, &p.head_norm.g, &p.head_norm.b, cfg.groups(cfg.base_channels));
    let s = silu(&a);
    let (eps, head) = conv2d(&s, &p.head.w, &p.head.b, &K3);

    (
        eps,
        UnetCache {
            emb0,
            e1,
            e2,
            temb,
            temb_act,
            stem,
            enc1a,
            enc1b,
            down,
            enc2a,
            enc2b,
            up,
            dec1a,
            dec1b,
            head_norm,
            head_act: a,
            head,
        },
    )
}

/// Backward pass. Accumulates parameter gradients into `grads` when provided; returns the
/// gradient with respect to the input when `want_dinput` is set.
pub fn unet_backward<T: Scalar>(
    p: &UnetParams<T>,
    cache: &UnetCache<T>,
    dout: &Tensor<T>,
    mut grads: Option<&mut UnetParams<T>>,
    want_dinput: bool,
) -> Option<Tensor<T>> {
    let cfg = &p.cfg;
    let c1 = cfg.base_channels;
    let want_params = grads.is_some();
    let mut dtemb_act = Tensor::zeros(&cache.temb_act.shape);

    // Head.
    let mut dwh = Tensor::zeros(&p.head.w.shape);
    let mut dbh = Tensor::zeros(&p.head.b.shape);
    let ds = conv2d_backward(dout, &p.head.w, &cache.head, &K3, &mut dwh, &mut dbh, true).unwrap();
    let da = silu_backward(&ds, &cache.head_act);
    let mut dgh = Tensor::zeros(&p.head_norm.g.shape);
    let mut dbhn = Tensor::zeros(&p.head_norm.b.shape);
    let dh6 = group_norm_backward(&da, &p.head_norm.g, &cache.head_norm, cfg.groups(c1), &mut dgh, &mut dbhn);
    if let Some(g) = grads.as_deref_mut() {
        g.head.w.axpy(T::ONE, &dwh);
        g.head.b.axpy(T::ONE, &dbh);
        g.head_norm.g.axpy(T::ONE, &dgh);
        g.head_norm.b.axpy(T::ONE, &dbhn);
    }

    // Decoder blocks.
    let dh5 = res_backward(
        cfg,
        &p.dec1b,
        &cache.dec1b,
        &cache.temb_act,
        &dh6,
        grads.as_deref_mut().map(|g| &mut g.dec1b),
        if want_params { Some(&mut dtemb_act) } else { None },
    );
    let dcat = res_backward(
        cfg,
        &p.dec1a,
        &cache.dec1a,
        &cache.temb_act,
        &dh5,
        grads.as_deref_mut().map(|g| &mut g.dec1a),
        if want_params { Some(&mut dtemb_act) } else { None },
    );
    let (du1, dh2_skip) = split_channels(&dcat, c1);

    // Up path.
    let mut dwu = Tensor::zeros(&p.up.w.shape);
    let mut dbu = Tensor::zeros(&p.up.b.shape);
    let du0 = conv2d_backward(&du1, &p.up.w, &cache.up, &K3, &mut dwu, &mut dbu, true).unwrap();
    if let Some(g) = grads.as_deref_mut() {
        g.up.w.axpy(T::ONE, &dwu);
        g.up.b.axpy(T::ONE, &dbu);
    }
    let dh4 = upsample2x_backward(&du0);

    let dh3 = res_backward(
        cfg,
        &p.enc2b,
        &cache.enc2b,
        &cache.temb_act,
        &dh4,
        grads.as_deref_mut().map(|g| &mut g.enc2b),
        if want_params { Some(&mut dtemb_act) } else { None },
    );
    let dd0 = res_backward(
        cfg,
        &p.enc2a,
        &cache.enc2a,
        &cache.temb_act,
        &dh3,
        grads.as_deref_mut().map(|g| &mut g.enc2a),
        if want_params { Some(&mut dtemb_act) } else { None },
    );

    let mut dwd = Tensor::zeros(&p.down.w.shape);
    let mut dbd = Tensor::zeros(&p.down.b.shape);
    let mut dh2 = conv2d_backward(&dd0, &p.down.w, &cache.down, &K3S2, &mut dwd, &mut dbd, true).unwrap();
    if let Some(g) = grads.as_deref_mut() {
        g.down.w.axpy(T::ONE, &dwd);
        g.down.b.axpy(T::ONE, &dbd);
    }
    dh2.axpy(T::ONE, &dh2_skip);

    let dh1 = res_backward(
        cfg,
        &p.enc1b,
        &cache.enc1b,
        &cache.temb_act,
        &dh2,
        grads.as_deref_mut().map(|g| &mut g.enc1b),
        if want_params { Some(&mut dtemb_act) } else { None },
    );
    let dh0 = res_backward(
        cfg,
        &p.enc1a,
        &cache.enc1a,
        &cache.temb_act,
        &dh1,
        grads.as_deref_mut().map(|g| &mut g.enc1a),
        if want_params { Some(&mut dtemb_act) } else { None },
    );

    // Shared time MLP.
    if let Some(g) = grads.as_deref_mut() {
        let dtemb = silu_backward(&dtemb_act, &cache.temb);
        let de2 = linear_backward(&dtemb, &cache.e2, &p.time2.w, &mut g.time2.w, &mut g.time2.b);
        let de1 = silu_backward(&de2, &cache.e1);
        let _ = linear_backward(&de1, &cache.emb0, &p.time1.w, &mut g.time1.w, &mut g.time1.b);
    }

    // Stem.
    let mut dws = Tensor::zeros(&p.stem.w.shape);
    let mut dbs = Tensor::zeros(&p.stem.b.shape);
    let dx = conv2d_backward(&dh0, &p.stem.w, &cache.stem, &K3, &mut dws, &mut dbs, want_dinput);
    if let Some(g) = grads.as_deref_mut() {
        g.stem.w.axpy(T::ONE, &dws);
        g.stem.b.axpy(T::ONE, &dbs);
    }
    dx
}
