//! Forward and reverse-mode backward pass of the adaLN-conditioned
//! bidirectional transformer, for a single grid.
//!
//! Per block (pre-norm, DiT-style modulation from `c = silu(class_emb[label])`):
//!
//! ```text
//! [sh1, s1, g1, sh2, s2, g2] = c W_ada + b_ada
//! x = x + g1 * Attn(LN(x) * (1 + s1) + sh1)
//! x = x + g2 * MLP(LN(x) * (1 + s2) + sh2)
//! ```
//!
//! followed by `logits = (LN(x) * (1 + s) + sh) W_head + b_head`.

use rand::{Rng, RngCore};

use super::ops::{
    gelu, gelu_grad, gemm, layer_norm, layer_norm_backward, linear, linear_backward, silu,
    silu_grad, softmax_rows, Mat, MatMut, Real,
};
use super::params::Parameters;
use crate::error::{Error, Result};
use crate::token::Token;

struct BlockCache<T> {
    modulation: Vec<T>,
    xhat1: Vec<T>,
    rstd1: Vec<T>,
    h1: Vec<T>,
    qkv: Vec<T>,
    /// `heads x n x n` attention probabilities.
    probs: Vec<T>,
    attn: Vec<T>,
    /// Attention output after dropout, before gating.
    attn_out: Vec<T>,
    drop1: Option<Vec<T>>,
    xhat2: Vec<T>,
    rstd2: Vec<T>,
    h2: Vec<T>,
    pre_act: Vec<T>,
    act: Vec<T>,
    mlp_out: Vec<T>,
    drop2: Option<Vec<T>>,
}

/// Intermediates kept by [`forward`] for [`backward`].
pub struct ForwardCache<T> {
    cells: Vec<usize>,
    label: usize,
    class_emb: Vec<T>,
    cond: Vec<T>,
    blocks: Vec<BlockCache<T>>,
    final_mod: Vec<T>,
    xhat_f: Vec<T>,
    rstd_f: Vec<T>,
    h_f: Vec<T>,
}

fn dropout_mask<T: Real>(len: usize, rate: f64, rng: &mut dyn RngCore) -> Vec<T> {
    let keep = T::lit(1.0 / (1.0 - rate));
    (0..len)
        .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
        .collect()
}

fn check_inputs<T: Real>(params: &Parameters<T>, cells: &[Token], label: usize) -> Result<()> {
    let cfg = &params.config;
    if cells.len() != cfg.positions() {
        return Err(Error::invalid(format!(
            "grid has {} cells, model expects {}",
            cells.len(),
            cfg.positions()
        )));
    }
    if let Some(&c) = cells.iter().find(|&&c| c > cfg.vocab) {
        return Err(Error::invalid(format!("token {c} outside [0, {}]", cfg.vocab)));
    }
    if label > cfg.num_classes {
        return Err(Error::invalid(format!(
            "class label {label} outside [0, {}]",
            cfg.num_classes
        )));
    }
    Ok(())
}

/// Runs the model on one grid. `dropout` enables training-mode dropout with
/// the given RNG; `None` is fully deterministic.
pub fn forward<T: Real>(
    params: &Parameters<T>,
    cells: &[Token],
    label: usize,
    mut dropout: Option<&mut dyn RngCore>,
) -> Result<(Vec<T>, ForwardCache<T>)> {
    check_inputs(params, cells, label)?;
    let cfg = &params.config;
    let n = cfg.positions();
    let d = cfg.hidden_dim;
    let v = cfg.vocab as usize;
    let heads = cfg.heads;
    let dh = cfg.head_dim();
    let f = cfg.mlp_dim();
    let scale = T::lit(1.0 / (dh as f64).sqrt());
    let rate = cfg.dropout;

    let cells: Vec<usize> = cells.iter().map(|&c| c as usize).collect();
    let mut x = Vec::with_capacity(n * d);
    for (i, &c) in cells.iter().enumerate() {
        let tok = &params.tok_emb.data[c * d..(c + 1) * d];
        let pos = &params.pos_emb.data[i * d..(i + 1) * d];
        x.extend(tok.iter().zip(pos).map(|(&a, &b)| a + b));
    }
    let class_emb = params.cls_emb.data[label * d..(label + 1) * d].to_vec();
    let cond: Vec<T> = class_emb.iter().map(|&c| silu(c)).collect();

    let mut caches = Vec::with_capacity(params.blocks.len());
    for block in &params.blocks {
        let modulation = linear(&cond, 1, d, &block.ada_w.data, &block.ada_b.data, 6 * d);
        let (sh1, rest) = modulation.split_at(d);
        let (s1, rest) = rest.split_at(d);
        let (g1, rest) = rest.split_at(d);
        let (sh2, rest) = rest.split_at(d);
        let (s2, g2) = rest.split_at(d);

        let (xhat1, rstd1) = layer_norm(&x, d);
        let h1 = modulate(&xhat1, s1, sh1, d);
        let qkv = linear(&h1, n, d, &block.qkv_w.data, &block.qkv_b.data, 3 * d);

        let mut probs = vec![T::zero(); heads * n * n];
        let mut attn = vec![T::zero(); n * d];
        for hd in 0..heads {
            let p = &mut probs[hd * n * n..(hd + 1) * n * n];
            gemm(
                Mat::cols_of(&qkv, n, 3 * d, hd * dh, dh),
                Mat::cols_of(&qkv, n, 3 * d, d + hd * dh, dh).t(),
                MatMut::new(p, n, n),
                false,
            );
            p.iter_mut().for_each(|s| *s = *s * scale);
            softmax_rows(p, n);
            gemm(
                Mat::new(p, n, n),
                Mat::cols_of(&qkv, n, 3 * d, 2 * d + hd * dh, dh),
                MatMut::cols_of(&mut attn, n, d, hd * dh, dh),
                false,
            );
        }
        let mut attn_out = linear(&attn, n, d, &block.proj_w.data, &block.proj_b.data, d);
        let drop1 = match (&mut dropout, rate > 0.0) {
            (Some(rng), true) => Some(dropout_mask::<T>(n * d, rate, &mut **rng)),
            _ => None,
        };
        if let Some(mask) = &drop1 {
            attn_out.iter_mut().zip(mask).for_each(|(a, &m)| *a = *a * m);
        }
        add_gated(&mut x, &attn_out, g1, d);

        let (xhat2, rstd2) = layer_norm(&x, d);
        let h2 = modulate(&xhat2, s2, sh2, d);
        let pre_act = linear(&h2, n, d, &block.fc1_w.data, &block.fc1_b.data, f);
        let act: Vec<T> = pre_act.iter().map(|&u| gelu(u)).collect();
        let mut mlp_out = linear(&act, n, f, &block.fc2_w.data, &block.fc2_b.data, d);
        let drop2 = match (&mut dropout, rate > 0.0) {
            (Some(rng), true) => Some(dropout_mask::<T>(n * d, rate, &mut **rng)),
            _ => None,
        };
        if let Some(mask) = &drop2 {
            mlp_out.iter_mut().zip(mask).for_each(|(a, &m)| *a = *a * m);
        }
        add_gated(&mut x, &mlp_out, g2, d);

        caches.push(BlockCache {
            modulation: modulation.clone(),
            xhat1,
            rstd1,
            h1,
            qkv,
            probs,
            attn,
            attn_out,
            drop1,
            xhat2,
            rstd2,
            h2,
            pre_act,
            act,
            mlp_out,
            drop2,
        });
    }

    let final_mod = linear(
        &cond,
        1,
        d,
        &params.final_ada_w.data,
        &params.final_ada_b.data,
        2 * d,
    );
    let (sh_f, s_f) = final_mod.split_at(d);
    let (xhat_f, rstd_f) = layer_norm(&x, d);
    let h_f = modulate(&xhat_f, s_f, sh_f, d);
    let logits = linear(&h_f, n, d, &params.head_w.data, &params.head_b.data, v);
    if let Some(i) = logits.iter().position(|l| !l.is_finite()) {
        return Err(Error::NumericFailure(format!(
            "non-finite logit at position {}",
            i / v
        )));
    }

    Ok((
        logits,
        ForwardCache {
            cells,
            label,
            class_emb,
            cond,
            blocks: caches,
            final_mod,
            xhat_f,
            rstd_f,
            h_f,
        },
    ))
}

/// Accumulates into `grads` the gradient of a scalar loss whose gradient with
/// respect to the logits is `dlogits` (`n x V`).
pub fn backward<T: Real>(
    params: &Parameters<T>,
    cache: &ForwardCache<T>,
    dlogits: &[T],
    grads: &mut Parameters<T>,
) -> Result<()> {
    let cfg = &params.config;
    let n = cfg.positions();
    let d = cfg.hidden_dim;
    let v = cfg.vocab as usize;
    let heads = cfg.heads;
    let dh = cfg.head_dim();
    let f = cfg.mlp_dim();
    let scale = T::lit(1.0 / (dh as f64).sqrt());
    if dlogits.len() != n * v {
        return Err(Error::invalid("logit gradient has the wrong shape"));
    }

    let mut dcond = vec![T::zero(); d];

    // head and final modulation
    let dh_f = linear_backward(
        &cache.h_f,
        n,
        d,
        &params.head_w.data,
        dlogits,
        v,
        &mut grads.head_w.data,
        &mut grads.head_b.data,
    );
    let (_, s_f) = cache.final_mod.split_at(d);
    let mut dfinal_mod = vec![T::zero(); 2 * d];
    let dxhat_f = modulate_backward(&dh_f, &cache.xhat_f, s_f, &mut dfinal_mod, d);
    let mut dx = layer_norm_backward(&dxhat_f, &cache.xhat_f, &cache.rstd_f, d);
    accumulate_modulation_grads(
        &cache.cond,
        &dfinal_mod,
        &params.final_ada_w.data,
        &mut grads.final_ada_w.data,
        &mut grads.final_ada_b.data,
        &mut dcond,
    );

    for (block, (bc, bg)) in params
        .blocks
        .iter()
        .zip(cache.blocks.iter().zip(grads.blocks.iter_mut()))
        .rev()
    {
        let (_, rest) = bc.modulation.split_at(d);
        let (s1, rest) = rest.split_at(d);
        let (g1, rest) = rest.split_at(d);
        let (_, rest) = rest.split_at(d);
        let (s2, g2) = rest.split_at(d);
        let mut dmod = vec![T::zero(); 6 * d];

        // MLP branch: x2 = x1 + g2 * mlp_out
        let mut dmlp = vec![T::zero(); n * d];
        for (r, (dxr, outr)) in dx.chunks(d).zip(bc.mlp_out.chunks(d)).enumerate() {
            for j in 0..d {
                dmod[5 * d + j] = dmod[5 * d + j] + dxr[j] * outr[j];
                dmlp[r * d + j] = dxr[j] * g2[j];
            }
        }
        if let Some(mask) = &bc.drop2 {
            dmlp.iter_mut().zip(mask).for_each(|(g, &m)| *g = *g * m);
        }
        let mut dact = linear_backward(
            &bc.act,
            n,
            f,
            &block.fc2_w.data,
            &dmlp,
            d,
            &mut bg.fc2_w.data,
            &mut bg.fc2_b.data,
        );
        dact.iter_mut()
            .zip(&bc.pre_act)
            .for_each(|(g, &u)| *g = *g * gelu_grad(u));
        let dh2 = linear_backward(
            &bc.h2,
            n,
            d,
            &block.fc1_w.data,
            &dact,
            f,
            &mut bg.fc1_w.data,
            &mut bg.fc1_b.data,
        );
        let mut dmod2 = vec![T::zero(); 2 * d];
        let dxhat2 = modulate_backward(&dh2, &bc.xhat2, s2, &mut dmod2, d);
        for j in 0..2 * d {
            dmod[3 * d + j] = dmod[3 * d + j] + dmod2[j];
        }
        let dln2 = layer_norm_backward(&dxhat2, &bc.xhat2, &bc.rstd2, d);
        dx.iter_mut().zip(&dln2).for_each(|(a, &b)| *a = *a + b);

        // attention branch: x1 = x0 + g1 * attn_out
        let mut dattn_out = vec![T::zero(); n * d];
        for (r, (dxr, outr)) in dx.chunks(d).zip(bc.attn_out.chunks(d)).enumerate() {
            for j in 0..d {
                dmod[2 * d + j] = dmod[2 * d + j] + dxr[j] * outr[j];
                dattn_out[r * d + j] = dxr[j] * g1[j];
            }
        }
        if let Some(mask) = &bc.drop1 {
            dattn_out.iter_mut().zip(mask).for_each(|(g, &m)| *g = *g * m);
        }
        let dattn = linear_backward(
            &bc.attn,
            n,
            d,
            &block.proj_w.data,
            &dattn_out,
            d,
            &mut bg.proj_w.data,
            &mut bg.proj_b.data,
        );
        let mut dqkv = vec![T::zero(); n * 3 * d];
        let mut dp = vec![T::zero(); n * n];
        for hd in 0..heads {
            let p = &bc.probs[hd * n * n..(hd + 1) * n * n];
            // dP = dO V^T
            gemm(
                Mat::cols_of(&dattn, n, d, hd * dh, dh),
                Mat::cols_of(&bc.qkv, n, 3 * d, 2 * d + hd * dh, dh).t(),
                MatMut::new(&mut dp, n, n),
                false,
            );
            // dV = P^T dO
            gemm(
                Mat::new(p, n, n).t(),
                Mat::cols_of(&dattn, n, d, hd * dh, dh),
                MatMut::cols_of(&mut dqkv, n, 3 * d, 2 * d + hd * dh, dh),
                false,
            );
            // dS = P * (dP - rowsum(dP * P)), then fold in the score scale
            for (dpr, pr) in dp.chunks_mut(n).zip(p.chunks(n)) {
                let dot = dpr.iter().zip(pr).map(|(&a, &b)| a * b).sum::<T>();
                dpr.iter_mut()
                    .zip(pr)
                    .for_each(|(g, &pv)| *g = pv * (*g - dot) * scale);
            }
            // dQ = dS K, dK = dS^T Q
            gemm(
                Mat::new(&dp, n, n),
                Mat::cols_of(&bc.qkv, n, 3 * d, d + hd * dh, dh),
                MatMut::cols_of(&mut dqkv, n, 3 * d, hd * dh, dh),
                false,
            );
            gemm(
                Mat::new(&dp, n, n).t(),
                Mat::cols_of(&bc.qkv, n, 3 * d, hd * dh, dh),
                MatMut::cols_of(&mut dqkv, n, 3 * d, d + hd * dh, dh),
                false,
            );
        }
        let dh1 = linear_backward(
            &bc.h1,
            n,
            d,
            &block.qkv_w.data,
            &dqkv,
            3 * d,
            &mut bg.qkv_w.data,
            &mut bg.qkv_b.data,
        );
        let mut dmod1 = vec![T::zero(); 2 * d];
        let dxhat1 = modulate_backward(&dh1, &bc.xhat1, s1, &mut dmod1, d);
        for j in 0..2 * d {
            dmod[j] = dmod[j] + dmod1[j];
        }
        let dln1 = layer_norm_backward(&dxhat1, &bc.xhat1, &bc.rstd1, d);
        dx.iter_mut().zip(&dln1).for_each(|(a, &b)| *a = *a + b);

        accumulate_modulation_grads(
            &cache.cond,
            &dmod,
            &block.ada_w.data,
            &mut bg.ada_w.data,
            &mut bg.ada_b.data,
            &mut dcond,
        );
    }

    let label = cache.label;
    for j in 0..d {
        let g = &mut grads.cls_emb.data[label * d + j];
        *g = *g + dcond[j] * silu_grad(cache.class_emb[j]);
    }
    for (i, &c) in cache.cells.iter().enumerate() {
        for j in 0..d {
            let g = dx[i * d + j];
            let t = &mut grads.tok_emb.data[c * d + j];
            *t = *t + g;
            let p = &mut grads.pos_emb.data[i * d + j];
            *p = *p + g;
        }
    }

    if !dx.iter().chain(&dcond).all(|g| g.is_finite()) {
        return Err(Error::NumericFailure("non-finite gradient".into()));
    }
    Ok(())
}

/// `xhat * (1 + scale) + shift`, broadcast over rows.
fn modulate<T: Real>(xhat: &[T], scale: &[T], shift: &[T], d: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(xhat.len());
    for row in xhat.chunks(d) {
        out.extend(
            row.iter()
                .zip(scale.iter().zip(shift))
                .map(|(&x, (&s, &b))| x * (T::one() + s) + b),
        );
    }
    out
}

/// Backward of [`modulate`]: writes `[dshift, dscale]` into `dmod` (length
/// `2d`, accumulated) and returns `dxhat`.
fn modulate_backward<T: Real>(dh: &[T], xhat: &[T], scale: &[T], dmod: &mut [T], d: usize) -> Vec<T> {
    let mut dxhat = Vec::with_capacity(dh.len());
    for (gr, xr) in dh.chunks(d).zip(xhat.chunks(d)) {
        for j in 0..d {
            dmod[j] = dmod[j] + gr[j];
            dmod[d + j] = dmod[d + j] + gr[j] * xr[j];
            dxhat.push(gr[j] * (T::one() + scale[j]));
        }
    }
    dxhat
}

fn add_gated<T: Real>(x: &mut [T], branch: &[T], gate: &[T], d: usize) {
    for (xr, br) in x.chunks_mut(d).zip(branch.chunks(d)) {
        for j in 0..d {
            xr[j] = xr[j] + gate[j] * br[j];
        }
    }
}

/// For `m = cond W + b`: `dW += cond^T dm`, `db += dm`, `dcond += W dm`.
fn accumulate_modulation_grads<T: Real>(
    cond: &[T],
    dm: &[T],
    w: &[T],
    dw: &mut [T],
    db: &mut [T],
    dcond: &mut [T],
) {
    let d = cond.len();
    let out = dm.len();
    for i in 0..d {
        let row = &w[i * out..(i + 1) * out];
        let grow = &mut dw[i * out..(i + 1) * out];
        let mut acc = T::zero();
        for j in 0..out {
            grow[j] = grow[j] + cond[i] * dm[j];
            acc = acc + row[j] * dm[j];
        }
        dcond[i] = dcond[i] + acc;
    }
    db.iter_mut().zip(dm).for_each(|(b, &g)| *b = *b + g);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::config::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelConfig {
        ModelConfig::new(1, 8, 2, 3, 2, 2, 2).unwrap()
    }

    #[test]
    fn zero_head_gives_zero_logits() {
        let p: Parameters<f32> = Parameters::init(&tiny(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let (logits, _) = forward(&p, &[0, 3, 2, 1], 1, None).unwrap();
        assert!(logits.iter().all(|&l| l == 0.0));
    }

    #[test]
    fn deterministic_without_dropout() {
        let cfg = tiny().with_dropout(0.3).unwrap();
        let p: Parameters<f32> = Parameters::random(&cfg, 0.3, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let (a, _) = forward(&p, &[0, 3, 2, 1], 0, None).unwrap();
        let (b, _) = forward(&p, &[0, 3, 2, 1], 0, None).unwrap();
        assert_eq!(a, b);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (c, _) = forward(&p, &[0, 3, 2, 1], 0, Some(&mut rng)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_bad_inputs() {
        let p: Parameters<f32> = Parameters::zeros(&tiny());
        assert!(forward(&p, &[0, 1, 2], 0, None).is_err());
        assert!(forward(&p, &[0, 1, 2, 4], 0, None).is_err());
        assert!(forward(&p, &[0, 1, 2, 3], 3, None).is_err());
        assert!(forward(&p, &[0, 1, 2, 3], 2, None).is_ok());
    }

    #[test]
    fn gradient_of_zero_loss_is_zero() {
        let p: Parameters<f64> = Parameters::random(&tiny(), 0.5, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let (logits, cache) = forward(&p, &[0, 3, 2, 1], 1, None).unwrap();
        let mut grads = p.zeros_like();
        backward(&p, &cache, &vec![0.0; logits.len()], &mut grads).unwrap();
        assert_eq!(grads.global_norm(), 0.0);
    }

    #[test]
    fn gradient_is_linear_in_upstream() {
        let p: Parameters<f64> = Parameters::random(&tiny(), 0.5, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let (logits, cache) = forward(&p, &[0, 3, 2, 1], 1, None).unwrap();
        let up: Vec<f64> = (0..logits.len()).map(|i| (i as f64 * 0.37).sin()).collect();
        let up2: Vec<f64> = up.iter().map(|x| 2.0 * x).collect();
        let mut g1 = p.zeros_like();
        let mut g2 = p.zeros_like();
        backward(&p, &cache, &up, &mut g1).unwrap();
        backward(&p, &cache, &up2, &mut g2).unwrap();
        for ((_, a), (_, b)) in g1.tensors().into_iter().zip(g2.tensors()) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!((2.0 * x - y).abs() <= 1e-12 * y.abs().max(1.0));
            }
        }
    }
}
