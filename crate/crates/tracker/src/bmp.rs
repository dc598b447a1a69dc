//! Stage I — box motion predictor: a small transformer encoder-decoder
//! over historical keypoint-offset tokens emitting the coarse motion of
//! the target from frame t−1 to t.

use crate::config::BmpConfig;
use crate::geometry::{offsets_of_history, KeypointOffsetSequence, OrientedBox3D, KEYPOINT_DIM};
use crate::params::{Init, ParamSpec, Params};
use anyhow::{bail, Context, Result};
use mtm_tensor::{Tape, Tensor, Var};

/// Prediction plus probes: the raw offset head output (kept on the tape so
/// losses can flow through it) and every attention distribution.
pub struct BmpOutputs {
    /// Predicted keypoint offsets for t−1 → t, shape [1, 27].
    pub pred_offsets: Var,
    /// Mean of the 9 predicted keypoint offsets per axis (Δx, Δy, Δz).
    pub coarse: [f64; 3],
    /// Forward snapshots of each softmax attention matrix, one per
    /// (layer, head), encoder first then decoder.
    pub attention_probes: Vec<Tensor>,
}

pub fn param_specs(cfg: &BmpConfig) -> Vec<ParamSpec> {
    let d = cfg.token_dim;
    let f = cfg.ffn_dim;
    let mut specs = vec![
        ParamSpec::new("bmp.embed.weight", &[KEYPOINT_DIM, d], Init::XavierUniform),
        ParamSpec::new("bmp.embed.bias", &[d], Init::Zeros),
    ];
    let mut block = |prefix: String| {
        specs.push(ParamSpec::new(format!("{prefix}.wq"), &[d, d], Init::XavierUniform));
        specs.push(ParamSpec::new(format!("{prefix}.wk"), &[d, d], Init::XavierUniform));
        specs.push(ParamSpec::new(format!("{prefix}.wv"), &[d, d], Init::XavierUniform));
        specs.push(ParamSpec::new(format!("{prefix}.wo"), &[d, d], Init::XavierUniform));
        specs.push(ParamSpec::new(format!("{prefix}.ln1.gamma"), &[d], Init::Const(1.0)));
        specs.push(ParamSpec::new(format!("{prefix}.ln1.beta"), &[d], Init::Zeros));
        specs.push(ParamSpec::new(format!("{prefix}.ffn1.weight"), &[d, f], Init::HeUniform));
        specs.push(ParamSpec::new(format!("{prefix}.ffn1.bias"), &[f], Init::Zeros));
        specs.push(ParamSpec::new(format!("{prefix}.ffn2.weight"), &[f, d], Init::XavierUniform));
        specs.push(ParamSpec::new(format!("{prefix}.ffn2.bias"), &[d], Init::Zeros));
        specs.push(ParamSpec::new(format!("{prefix}.ln2.gamma"), &[d], Init::Const(1.0)));
        specs.push(ParamSpec::new(format!("{prefix}.ln2.beta"), &[d], Init::Zeros));
    };
    for l in 0..cfg.encoder_layers {
        block(format!("bmp.enc{l}"));
    }
    for l in 0..cfg.decoder_layers {
        block(format!("bmp.dec{l}"));
    }
    // Near-zero head keeps the untrained coarse motion close to zero.
    specs.push(ParamSpec::new("bmp.head.weight", &[d, KEYPOINT_DIM], Init::Normal(0.01)));
    specs.push(ParamSpec::new("bmp.head.bias", &[KEYPOINT_DIM], Init::Zeros));
    specs
}

/// Standard sinusoidal position encoding: row `pos`, channel pair
/// (2i, 2i+1) = (sin, cos) of pos / 10000^(2i/D).
pub fn positional_encoding(len: usize, dim: usize) -> Tensor {
    Tensor::from_fn(&[len, dim], |idx| {
        let (pos, c) = (idx / dim, idx % dim);
        let exponent = (2 * (c / 2)) as f64 / dim as f64;
        let angle = pos as f64 / 10000f64.powf(exponent);
        if c % 2 == 0 {
            angle.sin() as f32
        } else {
            angle.cos() as f32
        }
    })
}

fn offsets_tensor(seq: &KeypointOffsetSequence) -> Tensor {
    let rows = seq.offsets.len();
    Tensor::from_fn(&[rows, KEYPOINT_DIM], |idx| {
        seq.offsets[idx / KEYPOINT_DIM][idx % KEYPOINT_DIM] as f32
    })
}

/// Projects offset rows to token space and adds the position encoding.
/// `with_pe = false` drops the encoding (permutation-equivariance probes).
pub fn embed_offsets(
    tape: &mut Tape,
    seq: &KeypointOffsetSequence,
    params: &Params,
    cfg: &BmpConfig,
    with_pe: bool,
) -> Result<Var> {
    if seq.offsets.len() != cfg.history_len - 1 {
        bail!(
            "offset sequence length {} does not match history_len {} − 1",
            seq.offsets.len(),
            cfg.history_len
        );
    }
    let x = tape.constant(offsets_tensor(seq));
    embed_tokens(tape, x, params, cfg, with_pe)
}

fn embed_tokens(tape: &mut Tape, x: Var, params: &Params, cfg: &BmpConfig, with_pe: bool) -> Result<Var> {
    let w = params.var("bmp.embed.weight")?;
    let b = params.var("bmp.embed.bias")?;
    let proj = tape.matmul(x, w)?;
    let proj = tape.add_channel(proj, b)?;
    if !with_pe {
        return Ok(proj);
    }
    let rows = tape.value(proj).shape()[0];
    let pe = tape.constant(positional_encoding(rows, cfg.token_dim));
    Ok(tape.add(proj, pe)?)
}

/// Multi-head attention with the residual taken on the query projection:
/// LN(W_o·heads(Q, K, V) + Q). Projections carry no bias. Each head's
/// softmax matrix is snapshotted into `probes`.
fn attention_block(
    tape: &mut Tape,
    q_input: Var,
    kv_input: Var,
    params: &Params,
    prefix: &str,
    heads: usize,
    probes: &mut Vec<Tensor>,
) -> Result<Var> {
    let d = tape.value(q_input).shape()[1];
    let dh = d / heads;
    let wq = params.var(&format!("{prefix}.wq"))?;
    let wk = params.var(&format!("{prefix}.wk"))?;
    let wv = params.var(&format!("{prefix}.wv"))?;
    let wo = params.var(&format!("{prefix}.wo"))?;

    let q = tape.matmul(q_input, wq)?;
    let k = tape.matmul(kv_input, wk)?;
    let v = tape.matmul(kv_input, wv)?;

    let mut head_outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.narrow_last(q, h * dh, dh)?;
        let kh = tape.narrow_last(k, h * dh, dh)?;
        let vh = tape.narrow_last(v, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, 1.0 / (dh as f32).sqrt())?;
        let attn = tape.softmax(scores, 1)?;
        probes.push(tape.value(attn).clone());
        head_outputs.push(tape.matmul(attn, vh)?);
    }
    let ctx = tape.concat_last(&head_outputs)?;
    let projected = tape.matmul(ctx, wo)?;
    let residual = tape.add(projected, q)?;
    let gamma = params.var(&format!("{prefix}.ln1.gamma"))?;
    let beta = params.var(&format!("{prefix}.ln1.beta"))?;
    Ok(tape.layer_norm(residual, gamma, beta, 1e-5)?)
}

/// Position-wise feed-forward with post-norm residual: LN(FFN(x) + x).
fn ffn_block(tape: &mut Tape, x: Var, params: &Params, prefix: &str) -> Result<Var> {
    let w1 = params.var(&format!("{prefix}.ffn1.weight"))?;
    let b1 = params.var(&format!("{prefix}.ffn1.bias"))?;
    let w2 = params.var(&format!("{prefix}.ffn2.weight"))?;
    let b2 = params.var(&format!("{prefix}.ffn2.bias"))?;
    let h = tape.matmul(x, w1)?;
    let h = tape.add_channel(h, b1)?;
    let h = tape.relu(h)?;
    let h = tape.matmul(h, w2)?;
    let h = tape.add_channel(h, b2)?;
    let residual = tape.add(h, x)?;
    let gamma = params.var(&format!("{prefix}.ln2.gamma"))?;
    let beta = params.var(&format!("{prefix}.ln2.beta"))?;
    Ok(tape.layer_norm(residual, gamma, beta, 1e-5)?)
}

pub fn encode(
    tape: &mut Tape,
    tokens: Var,
    params: &Params,
    cfg: &BmpConfig,
    probes: &mut Vec<Tensor>,
) -> Result<Var> {
    let mut x = tokens;
    for l in 0..cfg.encoder_layers {
        let prefix = format!("bmp.enc{l}");
        x = attention_block(tape, x, x, params, &prefix, cfg.heads, probes)?;
        x = ffn_block(tape, x, params, &prefix)?;
    }
    Ok(x)
}

/// Cross-attention decoder over the single latest-motion query token.
pub fn decode(
    tape: &mut Tape,
    query: Var,
    memory: Var,
    params: &Params,
    cfg: &BmpConfig,
    probes: &mut Vec<Tensor>,
) -> Result<Var> {
    let mut x = query;
    for l in 0..cfg.decoder_layers {
        let prefix = format!("bmp.dec{l}");
        x = attention_block(tape, x, memory, params, &prefix, cfg.heads, probes)?;
        x = ffn_block(tape, x, params, &prefix)?;
    }
    let w = params.var("bmp.head.weight")?;
    let b = params.var("bmp.head.bias")?;
    let out = tape.matmul(x, w)?;
    Ok(tape.add_channel(out, b)?)
}

/// Mean of the 9 per-keypoint offsets along each axis.
pub fn coarse_motion(pred_offsets: &Tensor) -> [f64; 3] {
    let data = pred_offsets.data();
    let mut mean = [0.0f64; 3];
    for p in 0..9 {
        for a in 0..3 {
            mean[a] += data[3 * p + a] as f64 / 9.0;
        }
    }
    mean
}

/// Pads a history shorter than N by repeating its oldest box at the front;
/// histories longer than N keep only the newest N.
pub fn pad_history(history: &[OrientedBox3D], n: usize) -> Result<Vec<OrientedBox3D>> {
    if history.is_empty() {
        bail!("motion prediction needs at least one history box");
    }
    let tail: Vec<OrientedBox3D> =
        history[history.len().saturating_sub(n)..].to_vec();
    let mut padded = vec![tail[0]; n - tail.len()];
    padded.extend_from_slice(&tail);
    Ok(padded)
}

/// Full stage-I pass: pad, difference, embed, encode, decode, average.
pub fn bmp_forward(
    tape: &mut Tape,
    history: &[OrientedBox3D],
    params: &Params,
    cfg: &BmpConfig,
) -> Result<BmpOutputs> {
    let padded = pad_history(history, cfg.history_len)?;
    let seq = offsets_of_history(&padded).context("history differencing")?;
    let mut probes = Vec::new();
    let tokens = embed_offsets(tape, &seq, params, cfg, true)?;
    let memory = encode(tape, tokens, params, cfg, &mut probes)?;

    // Query: the newest offset token, position-encoded at its time index.
    let latest = KeypointOffsetSequence { offsets: vec![*seq.offsets.last().expect("≥1 offset")] };
    let latest_t = tape.constant(offsets_tensor(&latest));
    let q_proj = embed_tokens(tape, latest_t, params, cfg, false)?;
    let pe_full = positional_encoding(cfg.history_len, cfg.token_dim);
    let pe_last = Tensor::new(
        &[1, cfg.token_dim],
        pe_full.data()[(cfg.history_len - 1) * cfg.token_dim..].to_vec(),
    )?;
    let pe_last = tape.constant(pe_last);
    let query = tape.add(q_proj, pe_last)?;

    let pred_offsets = decode(tape, query, memory, params, cfg, &mut probes)?;
    let coarse = coarse_motion(tape.value(pred_offsets));
    Ok(BmpOutputs { pred_offsets, coarse, attention_probes: probes })
}
