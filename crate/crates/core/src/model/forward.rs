use std::borrow::Cow;
use std::collections::BTreeSet;

use rand::Rng;

use super::ops::{self, add_bias, gelu, gelu_grad, matmul_acc, matmul_nt_acc, matmul_tn_acc};
use super::{dropout_mask, BlockIdx, LinearIdx, MlpIdx, ModelConfig, Params, Real};
use crate::error::{Error, Result};
use crate::gridding::GridConfig;
use crate::masking::{masked_patch_indices, MaskMode, MaskPlan};
use crate::objective::{cross_entropy_grad, LossBreakdown};
use crate::quantizer::TargetSet;

/// One training clip: flattened patches in grid order plus its targets.
#[derive(Debug, Clone)]
pub struct Example<T> {
    /// `(n_segments * r_s) × patch_dim`
    pub patches: Vec<T>,
    pub n_segments: usize,
    pub targets: TargetSet,
}

#[derive(Debug, Clone)]
pub struct EncodeOutput<T> {
    pub n_tokens: usize,
    pub d_model: usize,
    pub r_s: usize,
    pub input: Vec<T>,
    /// Output of every encoder block, each `n_tokens × d_model`.
    pub per_layer: Vec<Vec<T>>,
    /// Segment means of the final tokens, `n_segments × d_model`.
    pub pooled: Vec<T>,
}

impl<T: Real> EncodeOutput<T> {
    pub fn final_tokens(&self) -> &[T] {
        self.per_layer.last().unwrap_or(&self.input)
    }

    pub fn n_segments(&self) -> usize {
        self.n_tokens / self.r_s
    }
}

fn linear<T: Real>(x: &[T], n: usize, lin: &LinearIdx, p: &[T]) -> Vec<T> {
    let mut y = vec![T::zero(); n * lin.fan_out];
    matmul_acc(x, &p[lin.w.clone()], &mut y, n, lin.fan_in, lin.fan_out);
    add_bias(&mut y, &p[lin.b.clone()]);
    y
}

/// Accumulates weight/bias gradients, returns the input gradient.
fn linear_backward<T: Real>(
    x: &[T],
    dy: &[T],
    n: usize,
    lin: &LinearIdx,
    p: &[T],
    g: &mut [T],
) -> Vec<T> {
    matmul_tn_acc(x, dy, &mut g[lin.w.clone()], n, lin.fan_in, lin.fan_out);
    ops::sum_rows_acc(dy, &mut g[lin.b.clone()]);
    let mut dx = vec![T::zero(); n * lin.fan_in];
    matmul_nt_acc(dy, &p[lin.w.clone()], &mut dx, n, lin.fan_out, lin.fan_in);
    dx
}

fn linear_backward_params<T: Real>(x: &[T], dy: &[T], n: usize, lin: &LinearIdx, g: &mut [T]) {
    matmul_tn_acc(x, dy, &mut g[lin.w.clone()], n, lin.fan_in, lin.fan_out);
    ops::sum_rows_acc(dy, &mut g[lin.b.clone()]);
}

struct MlpTrace<T> {
    x: Vec<T>,
    u: Vec<T>,
    h: Vec<T>,
}

fn mlp<T: Real>(x: Vec<T>, n: usize, idx: &MlpIdx, p: &[T]) -> (Vec<T>, MlpTrace<T>) {
    let u = linear(&x, n, &idx.fc1, p);
    let h: Vec<T> = u.iter().map(|&v| gelu(v)).collect();
    let out = linear(&h, n, &idx.fc2, p);
    (out, MlpTrace { x, u, h })
}

fn mlp_backward<T: Real>(
    t: &MlpTrace<T>,
    dout: &[T],
    n: usize,
    idx: &MlpIdx,
    p: &[T],
    g: &mut [T],
) -> Vec<T> {
    let mut dh = linear_backward(&t.h, dout, n, &idx.fc2, p, g);
    for (d, &u) in dh.iter_mut().zip(&t.u) {
        *d = *d * gelu_grad(u);
    }
    linear_backward(&t.x, &dh, n, &idx.fc1, p, g)
}

/// Applies the fixed `(x - input_mean) / input_std` input map.
fn standardize<'a, T: Real>(patches: &'a [T], cfg: &ModelConfig) -> Cow<'a, [T]> {
    if cfg.input_mean == 0.0 && cfg.input_std == 1.0 {
        return Cow::Borrowed(patches);
    }
    let mean = T::from_f64(cfg.input_mean).unwrap();
    let inv = T::from_f64(1.0 / cfg.input_std).unwrap();
    Cow::Owned(patches.iter().map(|&x| (x - mean) * inv).collect())
}

/// Tokens: projected patch (or the mask token) plus its positional row.
pub fn embed<T: Real>(
    params: &Params<T>,
    patches: &[T],
    masked: &BTreeSet<usize>,
) -> Result<Vec<T>> {
    let cfg = params.config();
    let l = &params.layout;
    let p = &params.data;
    let d = cfg.d_model;
    if !patches.len().is_multiple_of(cfg.patch_dim) {
        return Err(Error::Geometry(format!(
            "patch buffer of {} values is not a multiple of {}",
            patches.len(),
            cfg.patch_dim
        )));
    }
    let n = patches.len() / cfg.patch_dim;
    if n > cfg.n_max * cfg.r_s {
        return Err(Error::Geometry(format!(
            "{n} patches exceed the positional table of {}",
            cfg.n_max * cfg.r_s
        )));
    }
    if masked.iter().any(|&g| g >= n) {
        return Err(Error::Geometry("masked index beyond patch count".into()));
    }
    let x = standardize(patches, cfg);
    let mut tokens = linear(&x, n, &l.patch, p);
    let mask = &p[l.mask_token.clone()];
    let pos = &p[l.pos.clone()];
    for g in 0..n {
        let row = &mut tokens[g * d..(g + 1) * d];
        if masked.contains(&g) {
            row.copy_from_slice(mask);
        }
        for (t, &q) in row.iter_mut().zip(&pos[g * d..(g + 1) * d]) {
            *t = *t + q;
        }
    }
    Ok(tokens)
}

struct BlockTrace<T> {
    xhat1: Vec<T>,
    rstd1: Vec<T>,
    h1: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    /// `n_heads × n × n` attention weights.
    attn: Vec<T>,
    o: Vec<T>,
    drop1: Option<Vec<T>>,
    xhat2: Vec<T>,
    rstd2: Vec<T>,
    ffn: MlpTrace<T>,
    drop2: Option<Vec<T>>,
}

fn head_cols<T: Real>(x: &[T], n: usize, d: usize, h: usize, dh: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(n * dh);
    for r in 0..n {
        out.extend_from_slice(&x[r * d + h * dh..r * d + (h + 1) * dh]);
    }
    out
}

fn put_head_cols<T: Real>(dst: &mut [T], src: &[T], n: usize, d: usize, h: usize, dh: usize) {
    for r in 0..n {
        dst[r * d + h * dh..r * d + (h + 1) * dh].copy_from_slice(&src[r * dh..(r + 1) * dh]);
    }
}

fn block_forward<T: Real, R: Rng + ?Sized>(
    x: &[T],
    n: usize,
    b: &BlockIdx,
    params: &Params<T>,
    dropout: &mut Option<(&mut R, f64)>,
) -> (Vec<T>, BlockTrace<T>) {
    let cfg = params.config();
    let p = &params.data;
    let d = cfg.d_model;
    let nh = cfg.n_heads;
    let dh = cfg.d_head();
    let scale = T::from_f64(1.0 / (dh as f64).sqrt()).unwrap();

    let (h1, xhat1, rstd1) = ops::layer_norm(x, &p[b.ln1_gain.clone()], &p[b.ln1_bias.clone()]);
    let q = linear(&h1, n, &b.q, p);
    let k = linear(&h1, n, &b.k, p);
    let v = linear(&h1, n, &b.v, p);
    let mut attn = vec![T::zero(); nh * n * n];
    let mut o = vec![T::zero(); n * d];
    for h in 0..nh {
        let qh = head_cols(&q, n, d, h, dh);
        let kh = head_cols(&k, n, d, h, dh);
        let vh = head_cols(&v, n, d, h, dh);
        let a = &mut attn[h * n * n..(h + 1) * n * n];
        matmul_nt_acc(&qh, &kh, a, n, dh, n);
        for row in a.chunks_exact_mut(n) {
            row.iter_mut().for_each(|s| *s = *s * scale);
            ops::softmax_in_place(row);
        }
        let mut oh = vec![T::zero(); n * dh];
        matmul_acc(a, &vh, &mut oh, n, n, dh);
        put_head_cols(&mut o, &oh, n, d, h, dh);
    }
    let mut att = linear(&o, n, &b.o, p);
    let drop1 = dropout
        .as_mut()
        .filter(|(_, r)| *r > 0.0)
        .map(|(rng, rate)| {
            let m: Vec<T> = dropout_mask(att.len(), *rate, *rng);
            att.iter_mut().zip(&m).for_each(|(a, &k)| *a = *a * k);
            m
        });
    let x1: Vec<T> = x.iter().zip(&att).map(|(&a, &b)| a + b).collect();

    let (h2, xhat2, rstd2) = ops::layer_norm(&x1, &p[b.ln2_gain.clone()], &p[b.ln2_bias.clone()]);
    let (mut f, ffn) = mlp(
        h2,
        n,
        &MlpIdx {
            fc1: b.fc1.clone(),
            fc2: b.fc2.clone(),
        },
        p,
    );
    let drop2 = dropout
        .as_mut()
        .filter(|(_, r)| *r > 0.0)
        .map(|(rng, rate)| {
            let m: Vec<T> = dropout_mask(f.len(), *rate, *rng);
            f.iter_mut().zip(&m).for_each(|(a, &k)| *a = *a * k);
            m
        });
    let x2: Vec<T> = x1.iter().zip(&f).map(|(&a, &b)| a + b).collect();
    (
        x2,
        BlockTrace {
            xhat1,
            rstd1,
            h1,
            q,
            k,
            v,
            attn,
            o,
            drop1,
            xhat2,
            rstd2,
            ffn,
            drop2,
        },
    )
}

fn block_backward<T: Real>(
    dx2: &[T],
    n: usize,
    b: &BlockIdx,
    t: &BlockTrace<T>,
    params: &Params<T>,
    g: &mut [T],
) -> Vec<T> {
    let cfg = params.config();
    let p = &params.data;
    let d = cfg.d_model;
    let nh = cfg.n_heads;
    let dh = cfg.d_head();
    let scale = T::from_f64(1.0 / (dh as f64).sqrt()).unwrap();

    // feed-forward branch
    let mut df = dx2.to_vec();
    if let Some(m) = &t.drop2 {
        df.iter_mut().zip(m).for_each(|(a, &k)| *a = *a * k);
    }
    let ffn_idx = MlpIdx {
        fc1: b.fc1.clone(),
        fc2: b.fc2.clone(),
    };
    let dh2 = mlp_backward(&t.ffn, &df, n, &ffn_idx, p, g);
    let (gr, br) = (b.ln2_gain.clone(), b.ln2_bias.clone());
    let mut dgain = vec![T::zero(); d];
    let mut dbias = vec![T::zero(); d];
    let dln2 = ops::layer_norm_backward(
        &dh2,
        &t.xhat2,
        &t.rstd2,
        &p[gr.clone()],
        &mut dgain,
        &mut dbias,
    );
    acc(&mut g[gr], &dgain);
    acc(&mut g[br], &dbias);
    let dx1: Vec<T> = dx2.iter().zip(&dln2).map(|(&a, &b)| a + b).collect();

    // attention branch
    let mut datt = dx1.clone();
    if let Some(m) = &t.drop1 {
        datt.iter_mut().zip(m).for_each(|(a, &k)| *a = *a * k);
    }
    let d_o = linear_backward(&t.o, &datt, n, &b.o, p, g);
    let mut dq = vec![T::zero(); n * d];
    let mut dk = vec![T::zero(); n * d];
    let mut dv = vec![T::zero(); n * d];
    for h in 0..nh {
        let a = &t.attn[h * n * n..(h + 1) * n * n];
        let doh = head_cols(&d_o, n, d, h, dh);
        let qh = head_cols(&t.q, n, d, h, dh);
        let kh = head_cols(&t.k, n, d, h, dh);
        let vh = head_cols(&t.v, n, d, h, dh);
        let mut da = vec![T::zero(); n * n];
        matmul_nt_acc(&doh, &vh, &mut da, n, dh, n);
        let mut dvh = vec![T::zero(); n * dh];
        matmul_tn_acc(a, &doh, &mut dvh, n, n, dh);
        // softmax backward, then the 1/sqrt(d_head) scale
        for (drow, arow) in da.chunks_exact_mut(n).zip(a.chunks_exact(n)) {
            let dot = drow
                .iter()
                .zip(arow)
                .fold(T::zero(), |s, (&x, &y)| s + x * y);
            for (x, &y) in drow.iter_mut().zip(arow) {
                *x = y * (*x - dot) * scale;
            }
        }
        let mut dqh = vec![T::zero(); n * dh];
        matmul_acc(&da, &kh, &mut dqh, n, n, dh);
        let mut dkh = vec![T::zero(); n * dh];
        matmul_tn_acc(&da, &qh, &mut dkh, n, n, dh);
        put_head_cols(&mut dq, &dqh, n, d, h, dh);
        put_head_cols(&mut dk, &dkh, n, d, h, dh);
        put_head_cols(&mut dv, &dvh, n, d, h, dh);
    }
    let mut dh1 = linear_backward(&t.h1, &dq, n, &b.q, p, g);
    acc(&mut dh1, &linear_backward(&t.h1, &dk, n, &b.k, p, g));
    acc(&mut dh1, &linear_backward(&t.h1, &dv, n, &b.v, p, g));
    let (gr, br) = (b.ln1_gain.clone(), b.ln1_bias.clone());
    let mut dgain = vec![T::zero(); d];
    let mut dbias = vec![T::zero(); d];
    let dln1 = ops::layer_norm_backward(
        &dh1,
        &t.xhat1,
        &t.rstd1,
        &p[gr.clone()],
        &mut dgain,
        &mut dbias,
    );
    acc(&mut g[gr], &dgain);
    acc(&mut g[br], &dbias);
    dx1.iter().zip(&dln1).map(|(&a, &b)| a + b).collect()
}

fn acc<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(a, &b)| *a = *a + b);
}

fn segment_means<T: Real>(z: &[T], n_tokens: usize, d: usize, r_s: usize) -> Vec<T> {
    let n_seg = n_tokens / r_s;
    let inv = T::one() / T::from_usize(r_s).unwrap();
    let mut pooled = vec![T::zero(); n_seg * d];
    for s in 0..n_seg {
        let out = &mut pooled[s * d..(s + 1) * d];
        for k in 0..r_s {
            acc(out, &z[(s * r_s + k) * d..(s * r_s + k + 1) * d]);
        }
        out.iter_mut().for_each(|v| *v = *v * inv);
    }
    pooled
}

fn encode_traced<T: Real, R: Rng + ?Sized>(
    params: &Params<T>,
    tokens: Vec<T>,
    mut dropout: Option<(&mut R, f64)>,
) -> Result<(EncodeOutput<T>, Vec<BlockTrace<T>>)> {
    let cfg = params.config();
    let d = cfg.d_model;
    if !tokens.len().is_multiple_of(d) || !(tokens.len() / d).is_multiple_of(cfg.r_s) {
        return Err(Error::Geometry(format!(
            "{} token values do not form whole segments of {} tokens of width {d}",
            tokens.len(),
            cfg.r_s
        )));
    }
    let n = tokens.len() / d;
    let mut per_layer = Vec::with_capacity(cfg.n_layers);
    let mut traces = Vec::with_capacity(cfg.n_layers);
    for b in &params.layout.blocks {
        let x = per_layer.last().unwrap_or(&tokens);
        let (y, trace) = block_forward(x, n, b, params, &mut dropout);
        if !ops::all_finite(&y) {
            return Err(Error::NonFinite("encoder activations".into()));
        }
        per_layer.push(y);
        traces.push(trace);
    }
    let pooled = segment_means(per_layer.last().unwrap_or(&tokens), n, d, cfg.r_s);
    Ok((
        EncodeOutput {
            n_tokens: n,
            d_model: d,
            r_s: cfg.r_s,
            input: tokens,
            per_layer,
            pooled,
        },
        traces,
    ))
}

/// Runs the encoder stack without dropout.
pub fn encode<T: Real>(params: &Params<T>, tokens: Vec<T>) -> Result<EncodeOutput<T>> {
    encode_traced::<T, rand_chacha::ChaCha8Rng>(params, tokens, None).map(|(o, _)| o)
}

/// Attention weights of every layer, each `n_heads × n_tokens × n_tokens`
/// with one softmax row per query token.
pub fn attention_maps<T: Real>(params: &Params<T>, tokens: Vec<T>) -> Result<Vec<Vec<T>>> {
    let (_, traces) = encode_traced::<T, rand_chacha::ChaCha8Rng>(params, tokens, None)?;
    Ok(traces.into_iter().map(|t| t.attn).collect())
}

/// Spectral head over every token: `n_tokens × k_s`.
pub fn spectral_logits<T: Real>(out: &EncodeOutput<T>, params: &Params<T>) -> Vec<T> {
    mlp(
        out.final_tokens().to_vec(),
        out.n_tokens,
        &params.layout.spectral,
        &params.data,
    )
    .0
}

/// Per-position temporal heads over pooled segments: `n_segments × r_t × k_t`.
pub fn temporal_logits<T: Real>(out: &EncodeOutput<T>, params: &Params<T>) -> Vec<T> {
    let cfg = params.config();
    let n_seg = out.n_segments();
    let per_head: Vec<Vec<T>> = params
        .layout
        .temporal
        .iter()
        .map(|idx| mlp(out.pooled.clone(), n_seg, idx, &params.data).0)
        .collect();
    let mut logits = Vec::with_capacity(n_seg * cfg.r_t * cfg.k_t);
    for s in 0..n_seg {
        for head in &per_head {
            logits.extend_from_slice(&head[s * cfg.k_t..(s + 1) * cfg.k_t]);
        }
    }
    logits
}

fn gather_rows<T: Real>(x: &[T], rows: &[usize], d: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        out.extend_from_slice(&x[r * d..(r + 1) * d]);
    }
    out
}

/// Loss of one clip and the exact gradient with respect to every parameter.
///
/// Segment-mode plans train both heads with weight `lambda`; patch-mode plans
/// train the spectral head alone.
pub fn loss_and_gradients<T: Real, R: Rng + ?Sized>(
    params: &Params<T>,
    example: &Example<T>,
    plan: &MaskPlan,
    lambda: f64,
    dropout_rng: Option<&mut R>,
) -> Result<(LossBreakdown, Params<T>)> {
    let cfg = params.config();
    let d = cfg.d_model;
    let p = &params.data;
    let layout = &params.layout;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("lambda {lambda} outside [0, 1]")));
    }
    let n_seg = example.n_segments;
    let n = n_seg * cfg.r_s;
    let t = &example.targets;
    if t.n_segments != n_seg || t.r_s != cfg.r_s || t.r_t != cfg.r_t {
        return Err(Error::Geometry(
            "targets do not match model geometry".into(),
        ));
    }
    let grid_like = GridConfig {
        patch: cfg.r_t,
        frame_width: 1,
        n_mels: cfg.r_s * cfg.r_t,
    };
    let masked = masked_patch_indices(plan, &grid_like);
    if masked.is_empty() {
        return Err(Error::EmptyMask("no masked patches".into()));
    }
    let segment_mode = plan.mode == MaskMode::Segment;
    if segment_mode && plan.n_total != n_seg {
        return Err(Error::Geometry("segment plan does not match clip".into()));
    }

    let tokens = embed(params, &example.patches, &masked)?;
    let dropout = dropout_rng.map(|r| (r, cfg.dropout_rate));
    let (out, traces) = encode_traced(params, tokens, dropout)?;
    let z = out.final_tokens();
    let mut grads = params.zeros_like();
    let g = &mut grads.data;

    let (w_s, w_t) = if segment_mode {
        (1.0 - lambda, lambda)
    } else {
        (1.0, 0.0)
    };

    // spectral branch over masked tokens only
    let rows: Vec<usize> = masked.iter().copied().collect();
    let (logits_s, trace_s) = mlp(gather_rows(z, &rows, d), rows.len(), &layout.spectral, p);
    let mut dlogits = vec![T::zero(); logits_s.len()];
    let inv_s = T::one() / T::from_usize(rows.len()).unwrap();
    let mut loss_s = T::zero();
    for (i, &r) in rows.iter().enumerate() {
        let target = t.spectral[r] as usize;
        if target >= cfg.k_s {
            return Err(Error::Geometry(format!(
                "spectral label {target} >= {}",
                cfg.k_s
            )));
        }
        let ks = cfg.k_s;
        loss_s = loss_s
            + cross_entropy_grad(
                &logits_s[i * ks..(i + 1) * ks],
                target,
                inv_s * T::from_f64(w_s).unwrap(),
                &mut dlogits[i * ks..(i + 1) * ks],
            );
    }
    loss_s = loss_s * inv_s;
    let dz_rows = mlp_backward(&trace_s, &dlogits, rows.len(), &layout.spectral, p, g);
    let mut dz = vec![T::zero(); n * d];
    for (i, &r) in rows.iter().enumerate() {
        acc(&mut dz[r * d..(r + 1) * d], &dz_rows[i * d..(i + 1) * d]);
    }

    // temporal branch over masked segments
    let mut loss_t = T::zero();
    if segment_mode {
        let segs: Vec<usize> = plan.masked.iter().copied().collect();
        let pooled = gather_rows(&out.pooled, &segs, d);
        let inv_t = T::one() / T::from_usize(segs.len() * cfg.r_t).unwrap();
        let scale = inv_t * T::from_f64(w_t).unwrap();
        let mut dpooled = vec![T::zero(); segs.len() * d];
        for (j, idx) in layout.temporal.iter().enumerate() {
            let (logits, trace) = mlp(pooled.clone(), segs.len(), idx, p);
            let kt = cfg.k_t;
            let mut dl = vec![T::zero(); logits.len()];
            for (i, &s) in segs.iter().enumerate() {
                let target = t.temporal[s * cfg.r_t + j] as usize;
                if target >= kt {
                    return Err(Error::Geometry(format!("temporal label {target} >= {kt}")));
                }
                loss_t = loss_t
                    + cross_entropy_grad(
                        &logits[i * kt..(i + 1) * kt],
                        target,
                        scale,
                        &mut dl[i * kt..(i + 1) * kt],
                    );
            }
            if w_t > 0.0 {
                acc(
                    &mut dpooled,
                    &mlp_backward(&trace, &dl, segs.len(), idx, p, g),
                );
            }
        }
        loss_t = loss_t * inv_t;
        let inv_r = T::one() / T::from_usize(cfg.r_s).unwrap();
        for (i, &s) in segs.iter().enumerate() {
            for k in 0..cfg.r_s {
                let row = s * cfg.r_s + k;
                for c in 0..d {
                    dz[row * d + c] = dz[row * d + c] + dpooled[i * d + c] * inv_r;
                }
            }
        }
    }

    // encoder stack, last block first
    let mut dx = dz;
    for (b, trace) in layout.blocks.iter().zip(&traces).rev() {
        dx = block_backward(&dx, n, b, trace, params, g);
    }

    // embedding
    acc(&mut g[layout.pos.start..layout.pos.start + n * d], &dx);
    let mask_r = layout.mask_token.clone();
    let visible: Vec<usize> = (0..n).filter(|i| !masked.contains(i)).collect();
    for &r in &masked {
        acc(&mut g[mask_r.clone()], &dx[r * d..(r + 1) * d]);
    }
    if !visible.is_empty() {
        let x = gather_rows(&standardize(&example.patches, cfg), &visible, cfg.patch_dim);
        let dy = gather_rows(&dx, &visible, d);
        linear_backward_params(&x, &dy, visible.len(), &layout.patch, g);
    }

    if !ops::all_finite(g) {
        return Err(Error::NonFinite("gradients".into()));
    }
    let spectral = loss_s.to_f64().unwrap();
    let temporal = loss_t.to_f64().unwrap();
    let total = if segment_mode {
        lambda * temporal + (1.0 - lambda) * spectral
    } else {
        spectral
    };
    Ok((
        LossBreakdown {
            spectral,
            temporal,
            total,
            n_masked_segments: if segment_mode { plan.len() } else { 0 },
            lambda: if segment_mode { lambda } else { 0.0 },
        },
        grads,
    ))
}
