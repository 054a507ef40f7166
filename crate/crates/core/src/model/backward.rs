//! Analytic gradients of the recall-weighted loss through the whole network.
//! The frozen embedding matrix receives no gradient: the two paths that touch
//! visit vectors (GRU input, context product) both terminate at the
//! embedding lookup.

use ndarray::{s, Array1, Array2, Axis};
use rand_chacha::ChaCha8Rng;

use super::forward::{forward_cached, ForwardCache, GruDirectionCache};
use super::{sigmoid, softplus, GruDirection, ModelConfig, ModelParams, ParamSet};
use crate::error::{Error, Result};
use crate::preprocess::WindowSample;

/// Per-sample weighted BCE in logit space.
fn sample_loss(logit: f64, target: f64, delta: f64) -> f64 {
    delta * target * softplus(-logit) + (1.0 - delta) * (1.0 - target) * softplus(logit)
}

fn sample_dlogit(logit: f64, target: f64, delta: f64) -> f64 {
    -delta * target * sigmoid(-logit) + (1.0 - delta) * (1.0 - target) * sigmoid(logit)
}

fn l2_penalty(set: &ParamSet, l2: f64) -> f64 {
    if l2 == 0.0 {
        return 0.0;
    }
    let mut sum = 0.0;
    for t in set.tensors() {
        if !t.decay {
            continue;
        }
        for i in 0..t.tensor.len() {
            let v = t.tensor.get(i);
            sum += v * v;
        }
    }
    l2 * sum
}

/// Mean weighted-BCE loss over a batch (eval mode) plus the L2 penalty.
/// This is the objective the gradients differentiate; finite-difference
/// checks probe this function.
pub fn batch_loss(
    samples: &[WindowSample],
    params: &ModelParams,
    config: &ModelConfig,
    delta: f64,
    l2: f64,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::config("empty batch"));
    }
    let mut total = 0.0;
    for sample in samples {
        let (_, cache) = forward_cached(sample, params, config, None)?;
        total += sample_loss(cache.logit, sample.target(), delta);
    }
    Ok(total / samples.len() as f64 + l2_penalty(&params.set, l2))
}

/// Mean loss and exact gradients for every trainable tensor. Passing a
/// dropout RNG selects train mode (masks are cached so forward and backward
/// agree); `None` is deterministic eval mode.
pub fn loss_and_grads(
    samples: &[WindowSample],
    params: &ModelParams,
    config: &ModelConfig,
    delta: f64,
    l2: f64,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<(f64, ParamSet)> {
    if samples.is_empty() {
        return Err(Error::config("empty batch"));
    }
    if !(0.0 < delta && delta < 1.0) {
        return Err(Error::config("delta must be in (0,1)"));
    }
    let n = samples.len() as f64;
    let mut grads = ParamSet::zeros_like(config);
    let mut total = 0.0;
    for sample in samples {
        let rng = dropout_rng.as_deref_mut();
        let (_, cache) = forward_cached(sample, params, config, rng)?;
        let target = sample.target();
        total += sample_loss(cache.logit, target, delta);
        let dlogit = sample_dlogit(cache.logit, target, delta) / n;
        backward_sample(sample, &cache, params, config, dlogit, &mut grads)?;
    }
    let loss = total / n + l2_penalty(&params.set, l2);
    if l2 > 0.0 {
        add_l2_grads(&params.set, &mut grads, l2);
    }
    for t in grads.tensors() {
        for i in 0..t.tensor.len() {
            if !t.tensor.get(i).is_finite() {
                return Err(Error::numeric(format!("non-finite gradient in {}", t.name)));
            }
        }
    }
    Ok((loss, grads))
}

fn add_l2_grads(set: &ParamSet, grads: &mut ParamSet, l2: f64) {
    let sources = set.tensors();
    for (src, dst) in sources.iter().zip(grads.tensors_mut()) {
        debug_assert_eq!(src.name, dst.name);
        if !src.decay {
            continue;
        }
        let mut tensor = dst.tensor;
        for i in 0..tensor.len() {
            tensor.add(i, 2.0 * l2 * src.tensor.get(i));
        }
    }
}

fn outer_add(target: &mut Array2<f64>, col: &Array1<f64>, row: &Array1<f64>) {
    for (i, &c) in col.iter().enumerate() {
        if c != 0.0 {
            target.row_mut(i).scaled_add(c, row);
        }
    }
}

fn backward_sample(
    sample: &WindowSample,
    cache: &ForwardCache,
    params: &ModelParams,
    config: &ModelConfig,
    dlogit: f64,
    grads: &mut ParamSet,
) -> Result<()> {
    let t_s = config.t_s;
    let d = config.d;
    let m = config.m();
    let set = &params.set;
    let _ = sample;

    // --- MLP head ---
    let n_dense = set.mlp.len();
    let mut dx: Array1<f64>;
    {
        let dense = &set.mlp[n_dense - 1];
        let input = &cache.mlp_inputs[n_dense - 1];
        grads.mlp[n_dense - 1].w.row_mut(0).scaled_add(dlogit, input);
        grads.mlp[n_dense - 1].b[0] += dlogit;
        dx = dense.w.row(0).to_owned() * dlogit;
    }
    for i in (0..n_dense - 1).rev() {
        let a = &cache.mlp_tanh[i];
        let da = &dx * &a.mapv(|t| 1.0 - t * t);
        let input = &cache.mlp_inputs[i];
        outer_add(&mut grads.mlp[i].w, &da, input);
        grads.mlp[i].b += &da;
        dx = set.mlp[i].w.t().dot(&da);
    }

    // --- demographic fusion: only the context half propagates ---
    let dcontext = dx.slice(s![..d]).to_owned();

    // --- context c = sum_t alpha_t (beta_t ⊙ v_t) ---
    let mut dalpha = Array1::<f64>::zeros(t_s);
    let mut dh_att = Array2::<f64>::zeros((t_s, m));
    let mut dbeta = Array2::<f64>::zeros((t_s, d));
    for t in 0..t_s {
        let beta_t = cache.beta.row(t);
        let bv = &beta_t.to_owned() * &cache.v[t];
        dalpha[t] = dcontext.dot(&bv);
        if config.feature_attention {
            let row = &dcontext * &cache.v[t] * cache.alpha[t];
            dbeta.row_mut(t).assign(&row);
        }
    }

    // --- feature attention: beta_t = softmax(tanh(W_beta h_t + b_beta)) ---
    if config.feature_attention {
        let g = cache.g_beta.as_ref().expect("cached when enabled");
        for t in 0..t_s {
            let beta_t = cache.beta.row(t).to_owned();
            let db = dbeta.row(t).to_owned();
            let dot = db.dot(&beta_t);
            let dg = &beta_t * &db.mapv(|x| x - dot);
            let g_t = g.row(t);
            let dpre = &dg * &g_t.mapv(|x| 1.0 - x * x);
            let h_row = cache.h_att.row(t).to_owned();
            outer_add(&mut grads.w_beta, &dpre, &h_row);
            grads.b_beta += &dpre;
            let back = set.w_beta.t().dot(&dpre);
            dh_att.row_mut(t).scaled_add(1.0, &back);
        }
    }

    // --- visit attention: alpha = softmax(w_alpha . h_t + b_alpha) ---
    if config.visit_attention {
        let dot = dalpha.dot(&cache.alpha);
        let dlogits = &cache.alpha * &dalpha.mapv(|x| x - dot);
        for t in 0..t_s {
            let h_row = cache.h_att.row(t).to_owned();
            grads.w_alpha.scaled_add(dlogits[t], &h_row);
            grads.b_alpha += dlogits[t];
            dh_att.row_mut(t).scaled_add(dlogits[t], &set.w_alpha);
        }
    }

    // --- layer norm (gain ⊙ xhat + bias) over res = hmat + mha_out ---
    let mut dres = Array2::<f64>::zeros((t_s, m));
    for t in 0..t_s {
        let dy = dh_att.row(t).to_owned();
        let xhat = cache.xhat.row(t).to_owned();
        for j in 0..m {
            grads.ln.gain[j] += dy[j] * xhat[j];
            grads.ln.bias[j] += dy[j];
        }
        let dxhat = &dy * &set.ln.gain;
        let mean_dxhat = dxhat.sum() / m as f64;
        let mean_dxhat_xhat = (&dxhat * &xhat).sum() / m as f64;
        let istd = cache.inv_std[t];
        let row = (dxhat.mapv(|x| x - mean_dxhat) - &(&xhat * mean_dxhat_xhat)) * istd;
        dres.row_mut(t).assign(&row);
    }

    // --- residual: res = hmat + mha_out ---
    let mut dhmat = dres.clone();
    let dmha_out = dres;

    // --- output projection: mha_out = o_concat W_o^T + b_o ---
    grads.mha.w_o += &dmha_out.t().dot(&cache.o_concat);
    grads.mha.b_o += &dmha_out.sum_axis(Axis(0));
    let d_o = dmha_out.dot(&set.mha.w_o);

    // --- per-head scaled dot-product attention ---
    let d_k = m / config.heads;
    let scale = 1.0 / (d_k as f64).sqrt();
    let mut dq = Array2::<f64>::zeros((t_s, m));
    let mut dk = Array2::<f64>::zeros((t_s, m));
    let mut dv = Array2::<f64>::zeros((t_s, m));
    for head in 0..config.heads {
        let cols = s![.., head * d_k..(head + 1) * d_k];
        let a = &cache.attn[head];
        let q_h = cache.q.slice(cols);
        let k_h = cache.k.slice(cols);
        let v_h = cache.v_mha.slice(cols);
        let d_o_h = d_o.slice(cols);
        let da = d_o_h.dot(&v_h.t());
        let dv_h = a.t().dot(&d_o_h);
        let mut ds = Array2::<f64>::zeros((t_s, t_s));
        for t in 0..t_s {
            let a_row = a.row(t).to_owned();
            let da_row = da.row(t).to_owned();
            let dot = da_row.dot(&a_row);
            let row = &a_row * &da_row.mapv(|x| x - dot);
            ds.row_mut(t).assign(&row);
        }
        let dq_h = ds.dot(&k_h) * scale;
        let dk_h = ds.t().dot(&q_h) * scale;
        dq.slice_mut(cols).assign(&dq_h);
        dk.slice_mut(cols).assign(&dk_h);
        dv.slice_mut(cols).assign(&dv_h);
    }

    // --- input projections: q = hmat W_q^T + b_q, etc. ---
    grads.mha.w_q += &dq.t().dot(&cache.hmat);
    grads.mha.b_q += &dq.sum_axis(Axis(0));
    dhmat += &dq.dot(&set.mha.w_q);
    grads.mha.w_k += &dk.t().dot(&cache.hmat);
    grads.mha.b_k += &dk.sum_axis(Axis(0));
    dhmat += &dk.dot(&set.mha.w_k);
    grads.mha.w_v += &dv.t().dot(&cache.hmat);
    grads.mha.b_v += &dv.sum_axis(Axis(0));
    dhmat += &dv.dot(&set.mha.w_v);

    // --- BiGRU stack, top layer down ---
    let h_size = config.h;
    let mut d_out = dhmat; // T × (2h), seq order, gradient on layer output
    for l in (0..config.layers).rev() {
        let inputs = &cache.layer_inputs[l];
        let reversed: Vec<Array1<f64>> = inputs.iter().rev().cloned().collect();
        let (fwd_cache, bwd_cache) = &cache.gru[l];

        let d_h_fwd: Vec<Array1<f64>> = (0..t_s)
            .map(|t| d_out.row(t).slice(s![..h_size]).to_owned())
            .collect();
        // Backward direction processes the reversed sequence: its step s
        // output sits at sequence position T-1-s.
        let d_h_bwd: Vec<Array1<f64>> = (0..t_s)
            .map(|s_| d_out.row(t_s - 1 - s_).slice(s![h_size..]).to_owned())
            .collect();

        let d_in_fwd = backward_gru_direction(
            &set.gru[l].fwd,
            fwd_cache,
            inputs,
            &d_h_fwd,
            &mut grads.gru[l].fwd,
        );
        let d_in_bwd = backward_gru_direction(
            &set.gru[l].bwd,
            bwd_cache,
            &reversed,
            &d_h_bwd,
            &mut grads.gru[l].bwd,
        );

        if l == 0 {
            break; // gradient w.r.t. visit vectors terminates at the frozen embedding
        }
        let in_dim = inputs[0].len();
        let mut d_input = Array2::<f64>::zeros((t_s, in_dim));
        for t in 0..t_s {
            let combined = &d_in_fwd[t] + &d_in_bwd[t_s - 1 - t];
            d_input.row_mut(t).assign(&combined);
        }
        if let Some(masks) = &cache.dropout_masks[l - 1] {
            for t in 0..t_s {
                let masked = &d_input.row(t).to_owned() * &masks[t];
                d_input.row_mut(t).assign(&masked);
            }
        }
        d_out = d_input;
    }
    Ok(())
}

/// Backprop through one GRU direction. `inputs` and `d_h` are in processing
/// order; returns input gradients in processing order.
fn backward_gru_direction(
    dir: &GruDirection,
    cache: &GruDirectionCache,
    inputs: &[Array1<f64>],
    d_h: &[Array1<f64>],
    grads: &mut GruDirection,
) -> Vec<Array1<f64>> {
    let steps = inputs.len();
    let h_size = dir.b_z.len();
    let in_dim = inputs[0].len();
    let mut d_inputs = vec![Array1::<f64>::zeros(in_dim); steps];
    let mut dh_next = Array1::<f64>::zeros(h_size);
    for t in (0..steps).rev() {
        let dh = &d_h[t] + &dh_next;
        let h_prev = if t == 0 {
            Array1::<f64>::zeros(h_size)
        } else {
            cache.h[t - 1].clone()
        };
        let z = &cache.z[t];
        let r = &cache.r[t];
        let n = &cache.n[t];
        let x = &inputs[t];

        // h = (1 - z) ⊙ n + z ⊙ h_prev
        let dn = &dh * &z.mapv(|v| 1.0 - v);
        let dz = &dh * &(&h_prev - n);
        let mut dh_prev = &dh * z;

        let da_n = &dn * &n.mapv(|v| 1.0 - v * v);
        let rh = r * &h_prev;
        outer_add(&mut grads.w_n, &da_n, x);
        outer_add(&mut grads.u_n, &da_n, &rh);
        grads.b_n += &da_n;
        let drh = dir.u_n.t().dot(&da_n);
        let dr = &drh * &h_prev;
        dh_prev += &(&drh * r);

        let da_z = &dz * &(z * &z.mapv(|v| 1.0 - v));
        let da_r = &dr * &(r * &r.mapv(|v| 1.0 - v));
        outer_add(&mut grads.w_z, &da_z, x);
        outer_add(&mut grads.u_z, &da_z, &h_prev);
        grads.b_z += &da_z;
        dh_prev += &dir.u_z.t().dot(&da_z);
        outer_add(&mut grads.w_r, &da_r, x);
        outer_add(&mut grads.u_r, &da_r, &h_prev);
        grads.b_r += &da_r;
        dh_prev += &dir.u_r.t().dot(&da_r);

        d_inputs[t] = dir.w_z.t().dot(&da_z) + dir.w_r.t().dot(&da_r) + dir.w_n.t().dot(&da_n);
        dh_next = dh_prev;
    }
    d_inputs
}
