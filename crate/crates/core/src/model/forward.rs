use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, matmul_nt, matmul_nt_backward, Matrix, Scalar};
use crate::objectives::ObjectiveBatch;

use super::ops::{
    attention_backward, attention_forward, rmsnorm_rows, rmsnorm_rows_backward, silu, silu_grad,
    AttentionShape, RopeTable,
};
use super::{AttentionMode, Checkpoint, ModelConfig, ParamKind, Params, Projection, Trainable};

/// Per-sequence `len × vocab` logits.
pub type Logits<T> = Vec<Matrix<T>>;

struct LayerCache<T> {
    x_in: Vec<T>,
    inv1: Vec<T>,
    h1: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    probs: Vec<T>,
    ctx: Vec<T>,
    x_mid: Vec<T>,
    inv2: Vec<T>,
    h2: Vec<T>,
    gate: Vec<T>,
    up: Vec<T>,
    act: Vec<T>,
}

struct SequencePass<T> {
    layers: Vec<LayerCache<T>>,
    x_final: Vec<T>,
    inv_final: Vec<T>,
    h_final: Vec<T>,
    rope: RopeTable<T>,
}

fn check_ids(ids: &[u32], vocab_size: usize) -> Result<()> {
    match ids.iter().find(|&&id| id as usize >= vocab_size) {
        Some(&id) => Err(Error::TokenOutOfRange { id, vocab_size }),
        None => Ok(()),
    }
}

fn run_sequence<T: Scalar>(
    params: &Params<T>,
    cfg: &ModelConfig,
    ids: &[u32],
    mode: AttentionMode,
    keep: bool,
) -> Result<SequencePass<T>> {
    let len = ids.len();
    let d = cfg.d_model;
    let eps = T::from_f64_lossy(cfg.norm_eps);
    let rope = RopeTable::<T>::new(len, cfg.head_dim, cfg.rope_theta);
    let shape = AttentionShape {
        len,
        n_q_heads: cfg.n_q_heads,
        n_kv_heads: cfg.n_kv_heads,
        head_dim: cfg.head_dim,
    };

    let mut x = Vec::with_capacity(len * d);
    for &id in ids {
        x.extend_from_slice(params.embed.row(id as usize));
    }

    let mut layers = Vec::with_capacity(if keep { cfg.n_layers } else { 0 });
    for (l, lp) in params.layers.iter().enumerate() {
        let (h1, inv1) = rmsnorm_rows(&x, len, &lp.attn_norm, eps);
        let mut q = matmul_nt(&h1, len, &lp.wq);
        let mut k = matmul_nt(&h1, len, &lp.wk);
        let v = matmul_nt(&h1, len, &lp.wv);
        rope.rotate_rows(&mut q, len, cfg.n_q_heads, false);
        rope.rotate_rows(&mut k, len, cfg.n_kv_heads, false);
        let (ctx, probs) = attention_forward(&q, &k, &v, &shape, mode);
        let attn_out = matmul_nt(&ctx, len, &lp.wo);
        let x_mid: Vec<T> = x.iter().zip(&attn_out).map(|(&a, &b)| a + b).collect();

        let (h2, inv2) = rmsnorm_rows(&x_mid, len, &lp.ffn_norm, eps);
        let gate = matmul_nt(&h2, len, &lp.w_gate);
        let up = matmul_nt(&h2, len, &lp.w_up);
        let act: Vec<T> = gate.iter().zip(&up).map(|(&g, &u)| silu(g) * u).collect();
        let ffn_out = matmul_nt(&act, len, &lp.w_down);
        let x_out: Vec<T> = x_mid.iter().zip(&ffn_out).map(|(&a, &b)| a + b).collect();
        if !x_out.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteActivation { layer: l });
        }
        let x_in = std::mem::replace(&mut x, x_out);
        if keep {
            layers.push(LayerCache {
                x_in,
                inv1,
                h1,
                q,
                k,
                v,
                probs,
                ctx,
                x_mid,
                inv2,
                h2,
                gate,
                up,
                act,
            });
        }
    }
    let (h_final, inv_final) = rmsnorm_rows(&x, len, &params.final_norm, eps);
    Ok(SequencePass {
        layers,
        x_final: x,
        inv_final,
        h_final,
        rope,
    })
}

fn check_modes(batch: &[Vec<u32>], modes: &[AttentionMode]) -> Result<()> {
    if modes.len() != batch.len() {
        return Err(Error::invalid(
            "batch",
            format!("{} attention modes for {} sequences", modes.len(), batch.len()),
        ));
    }
    for (seq, mode) in batch.iter().zip(modes) {
        mode.validate(seq.len())?;
    }
    Ok(())
}

/// Full logits for every position of every sequence. `modes[s]` is the
/// attention mode of sequence `s`.
pub fn forward<T: Scalar>(
    ckpt: &Checkpoint<T>,
    batch: &[Vec<u32>],
    modes: &[AttentionMode],
) -> Result<Logits<T>> {
    check_modes(batch, modes)?;
    let cfg = &ckpt.config;
    for seq in batch {
        check_ids(seq, cfg.vocab_size)?;
    }
    batch
        .par_iter()
        .zip(modes.par_iter())
        .map(|(ids, &mode)| {
            let pass = run_sequence(&ckpt.params, cfg, ids, mode, false)?;
            let logits = matmul_nt(&pass.h_final, ids.len(), ckpt.params.head());
            Ok(Matrix::from_vec(ids.len(), cfg.vocab_size, logits))
        })
        .collect()
}

/// Log-sum-exp of the head logits at one hidden state, plus the logits.
fn head_logits<T: Scalar>(head: &Matrix<T>, h: &[T]) -> (Vec<T>, T) {
    let logits: Vec<T> = (0..head.rows).map(|v| dot(head.row(v), h)).collect();
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let sum: T = logits.iter().map(|&z| (z - max).exp()).sum();
    let lse = max + sum.ln();
    (logits, lse)
}

fn group_targets(batch: &ObjectiveBatch) -> Vec<Vec<(usize, u32)>> {
    let mut per_seq = vec![Vec::new(); batch.input_ids.len()];
    for t in &batch.targets {
        per_seq[t.seq].push((t.pos, t.token));
    }
    per_seq
}

/// Summed negative log-likelihood of the batch targets and their count.
pub fn sequence_nll<T: Scalar>(ckpt: &Checkpoint<T>, batch: &ObjectiveBatch) -> Result<(f64, usize)> {
    batch.validate(ckpt.config.vocab_size)?;
    check_modes(&batch.input_ids, &batch.modes)?;
    let per_seq = group_targets(batch);
    let cfg = &ckpt.config;
    let parts: Vec<Result<f64>> = (0..batch.input_ids.len())
        .into_par_iter()
        .map(|s| {
            if per_seq[s].is_empty() {
                return Ok(0.0);
            }
            let pass = run_sequence(&ckpt.params, cfg, &batch.input_ids[s], batch.modes[s], false)?;
            let d = cfg.d_model;
            let mut nll = 0.0;
            for &(pos, tok) in &per_seq[s] {
                let (logits, lse) = head_logits(ckpt.params.head(), &pass.h_final[pos * d..(pos + 1) * d]);
                nll += (lse - logits[tok as usize]).as_f64();
            }
            Ok(nll)
        })
        .collect();
    let mut total = 0.0;
    for p in parts {
        total += p?;
    }
    Ok((total, batch.targets.len()))
}

/// Mean cross-entropy over the batch targets and its gradient with respect
/// to every parameter. Parameters outside `trainable` get exactly-zero
/// gradients.
pub fn loss_and_grads<T: Scalar>(
    ckpt: &Checkpoint<T>,
    batch: &ObjectiveBatch,
    trainable: &Trainable,
) -> Result<(T, Params<T>)> {
    batch.validate(ckpt.config.vocab_size)?;
    check_modes(&batch.input_ids, &batch.modes)?;
    let n = batch.targets.len();
    let inv_n = T::one() / T::from_usize(n).unwrap();
    let per_seq = group_targets(batch);
    let parts: Vec<Result<Option<(T, Params<T>)>>> = (0..batch.input_ids.len())
        .into_par_iter()
        .map(|s| {
            if per_seq[s].is_empty() {
                return Ok(None);
            }
            sequence_backward(
                ckpt,
                &batch.input_ids[s],
                batch.modes[s],
                &per_seq[s],
                inv_n,
                trainable,
            )
            .map(Some)
        })
        .collect();

    let mut loss = T::zero();
    let mut grads = Params::zeros(&ckpt.config);
    for part in parts {
        if let Some((l, g)) = part? {
            loss += l;
            grads.add_assign(&g);
        }
    }
    Ok((loss * inv_n, grads))
}

fn sequence_backward<T: Scalar>(
    ckpt: &Checkpoint<T>,
    ids: &[u32],
    mode: AttentionMode,
    targets: &[(usize, u32)],
    inv_n: T,
    trainable: &Trainable,
) -> Result<(T, Params<T>)> {
    let cfg = &ckpt.config;
    let params = &ckpt.params;
    let len = ids.len();
    let d = cfg.d_model;
    let pass = run_sequence(params, cfg, ids, mode, true)?;
    let mut grads = Params::<T>::zeros(cfg);

    let head_kind = if cfg.tie_embeddings { ParamKind::Embed } else { ParamKind::Head };
    let train_head = trainable.includes(head_kind);
    let head = params.head();
    let mut dh = vec![T::zero(); len * d];
    let mut loss_sum = T::zero();
    for &(pos, tok) in targets {
        let h = &pass.h_final[pos * d..(pos + 1) * d];
        let (logits, lse) = head_logits(head, h);
        loss_sum += lse - logits[tok as usize];
        let dh_row = &mut dh[pos * d..(pos + 1) * d];
        for (vid, &z) in logits.iter().enumerate() {
            let mut g = (z - lse).exp();
            if vid == tok as usize {
                g -= T::one();
            }
            g *= inv_n;
            axpy(g, head.row(vid), dh_row);
            if train_head {
                let gh = match grads.head.as_mut() {
                    Some(m) => m,
                    None => &mut grads.embed,
                };
                axpy(g, h, gh.row_mut(vid));
            }
        }
    }

    let mut dx = rmsnorm_rows_backward(
        &pass.x_final,
        &pass.inv_final,
        &params.final_norm,
        &dh,
        trainable
            .includes(ParamKind::FinalNorm)
            .then_some(grads.final_norm.as_mut_slice()),
    );

    let shape = AttentionShape {
        len,
        n_q_heads: cfg.n_q_heads,
        n_kv_heads: cfg.n_kv_heads,
        head_dim: cfg.head_dim,
    };
    for (l, cache) in pass.layers.iter().enumerate().rev() {
        let lp = &params.layers[l];
        let gl = &mut grads.layers[l];
        let want = |p: Projection| trainable.includes(ParamKind::Weight(l, p));

        let d_act = matmul_nt_backward(
            &cache.act,
            &dx,
            len,
            &lp.w_down,
            want(Projection::Down).then_some(&mut gl.w_down),
        );
        let mut d_gate = vec![T::zero(); d_act.len()];
        let mut d_up = vec![T::zero(); d_act.len()];
        for i in 0..d_act.len() {
            let g = cache.gate[i];
            d_gate[i] = d_act[i] * cache.up[i] * silu_grad(g);
            d_up[i] = d_act[i] * silu(g);
        }
        let mut dh2 = matmul_nt_backward(
            &cache.h2,
            &d_gate,
            len,
            &lp.w_gate,
            want(Projection::Gate).then_some(&mut gl.w_gate),
        );
        let dh2_up = matmul_nt_backward(
            &cache.h2,
            &d_up,
            len,
            &lp.w_up,
            want(Projection::Up).then_some(&mut gl.w_up),
        );
        for (a, b) in dh2.iter_mut().zip(&dh2_up) {
            *a += *b;
        }
        let dmid_norm = rmsnorm_rows_backward(
            &cache.x_mid,
            &cache.inv2,
            &lp.ffn_norm,
            &dh2,
            trainable
                .includes(ParamKind::FfnNorm(l))
                .then_some(gl.ffn_norm.as_mut_slice()),
        );
        let dx_mid: Vec<T> = dx.iter().zip(&dmid_norm).map(|(&a, &b)| a + b).collect();

        let dctx = matmul_nt_backward(
            &cache.ctx,
            &dx_mid,
            len,
            &lp.wo,
            want(Projection::O).then_some(&mut gl.wo),
        );
        let (mut dq, mut dk, dv) =
            attention_backward(&cache.q, &cache.k, &cache.v, &cache.probs, &dctx, &shape, mode);
        pass.rope.rotate_rows(&mut dq, len, cfg.n_q_heads, true);
        pass.rope.rotate_rows(&mut dk, len, cfg.n_kv_heads, true);
        let mut dh1 = matmul_nt_backward(
            &cache.h1,
            &dq,
            len,
            &lp.wq,
            want(Projection::Q).then_some(&mut gl.wq),
        );
        let dh1_k = matmul_nt_backward(
            &cache.h1,
            &dk,
            len,
            &lp.wk,
            want(Projection::K).then_some(&mut gl.wk),
        );
        let dh1_v = matmul_nt_backward(
            &cache.h1,
            &dv,
            len,
            &lp.wv,
            want(Projection::V).then_some(&mut gl.wv),
        );
        for i in 0..dh1.len() {
            dh1[i] += dh1_k[i] + dh1_v[i];
        }
        let din_norm = rmsnorm_rows_backward(
            &cache.x_in,
            &cache.inv1,
            &lp.attn_norm,
            &dh1,
            trainable
                .includes(ParamKind::AttnNorm(l))
                .then_some(gl.attn_norm.as_mut_slice()),
        );
        dx = dx_mid.iter().zip(&din_norm).map(|(&a, &b)| a + b).collect();
    }

    if trainable.includes(ParamKind::Embed) {
        for (t, &id) in ids.iter().enumerate() {
            axpy(T::one(), &dx[t * d..(t + 1) * d], grads.embed.row_mut(id as usize));
        }
    }
    Ok((loss_sum, grads))
}
