//! Parameter initialisation and forward helpers for the layer types used by the
//! models. Parameters live in a [`ParamStore`] under dotted prefixes.

use rand::Rng;

use super::params::ParamStore;
use super::tape::{ConvSpec, Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

fn fan_in_std(fan_in: usize) -> f32 {
    1.0 / (fan_in as f32).sqrt()
}

pub fn init_linear<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    din: usize,
    dout: usize,
    rng: &mut R,
) -> Result<()> {
    store.insert(
        format!("{prefix}.w"),
        Tensor::randn(&[din, dout], fan_in_std(din), rng),
    )?;
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[dout]))
}

pub fn linear<'s>(tape: &mut Tape<'s>, store: &'s ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let w = tape.param(store, &format!("{prefix}.w"))?;
    let b = tape.param(store, &format!("{prefix}.b"))?;
    tape.affine(x, w, Some(b))
}

/// Forward convolution weight `[kernel * cin, cout]`.
pub fn init_conv<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    cin: usize,
    cout: usize,
    kernel: usize,
    rng: &mut R,
) -> Result<()> {
    store.insert(
        format!("{prefix}.w"),
        Tensor::randn(&[kernel * cin, cout], fan_in_std(kernel * cin), rng),
    )?;
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[cout]))
}

pub fn conv<'s>(
    tape: &mut Tape<'s>,
    store: &'s ParamStore,
    prefix: &str,
    x: Var,
    spec: ConvSpec,
) -> Result<Var> {
    let w = tape.param(store, &format!("{prefix}.w"))?;
    let b = tape.param(store, &format!("{prefix}.b"))?;
    tape.conv1d(x, w, Some(b), spec)
}

/// Transposed convolution weight `[cin, kernel * cout]`.
pub fn init_conv_transpose<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    cin: usize,
    cout: usize,
    kernel: usize,
    stride: usize,
    rng: &mut R,
) -> Result<()> {
    // Each output frame receives kernel / stride taps.
    let fan_in = cin * (kernel / stride).max(1);
    store.insert(
        format!("{prefix}.w"),
        Tensor::randn(&[cin, kernel * cout], fan_in_std(fan_in), rng),
    )?;
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[cout]))
}

pub fn conv_transpose<'s>(
    tape: &mut Tape<'s>,
    store: &'s ParamStore,
    prefix: &str,
    x: Var,
    spec: ConvSpec,
) -> Result<Var> {
    let w = tape.param(store, &format!("{prefix}.w"))?;
    let b = tape.param(store, &format!("{prefix}.b"))?;
    tape.conv_transpose1d(x, w, Some(b), spec)
}

pub fn init_layer_norm(store: &mut ParamStore, prefix: &str, d: usize) -> Result<()> {
    store.insert(format!("{prefix}.g"), Tensor::full(&[d], 1.0))?;
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[d]))
}

pub fn layer_norm<'s>(
    tape: &mut Tape<'s>,
    store: &'s ParamStore,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let g = tape.param(store, &format!("{prefix}.g"))?;
    let b = tape.param(store, &format!("{prefix}.b"))?;
    tape.layer_norm(x, g, b)
}

/// Pre-norm transformer encoder block: self-attention then a GELU MLP, each
/// wrapped in a residual connection.
pub fn init_transformer_block<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    d: usize,
    ff: usize,
    rng: &mut R,
) -> Result<()> {
    init_layer_norm(store, &format!("{prefix}.ln1"), d)?;
    for p in ["q", "v", "o"] {
        init_linear(store, &format!("{prefix}.attn.{p}"), d, d, rng)?;
    }
    // A key bias shifts every score in a row equally and cancels in the softmax.
    store.insert(
        format!("{prefix}.attn.k.w"),
        Tensor::randn(&[d, d], fan_in_std(d), rng),
    )?;
    init_layer_norm(store, &format!("{prefix}.ln2"), d)?;
    init_linear(store, &format!("{prefix}.ff1"), d, ff, rng)?;
    init_linear(store, &format!("{prefix}.ff2"), ff, d, rng)
}

pub fn transformer_block<'s>(
    tape: &mut Tape<'s>,
    store: &'s ParamStore,
    prefix: &str,
    x: Var,
    heads: usize,
) -> Result<Var> {
    let h = layer_norm(tape, store, &format!("{prefix}.ln1"), x)?;
    let q = linear(tape, store, &format!("{prefix}.attn.q"), h)?;
    let kw = tape.param(store, &format!("{prefix}.attn.k.w"))?;
    let k = tape.affine(h, kw, None)?;
    let v = linear(tape, store, &format!("{prefix}.attn.v"), h)?;
    let a = tape.attention(q, k, v, heads)?;
    let o = linear(tape, store, &format!("{prefix}.attn.o"), a)?;
    let x = tape.add(x, o)?;
    let h = layer_norm(tape, store, &format!("{prefix}.ln2"), x)?;
    let f = linear(tape, store, &format!("{prefix}.ff1"), h)?;
    let f = tape.gelu(f)?;
    let f = linear(tape, store, &format!("{prefix}.ff2"), f)?;
    tape.add(x, f)
}

/// Standard sinusoidal position table `[t, d]`.
pub fn sinusoidal_positions(t: usize, d: usize) -> Tensor {
    Tensor::from_fn(&[t, d], |i| {
        let (pos, j) = (i / d, i % d);
        let pair = (j / 2) as f64;
        let freq = 1.0 / 10000f64.powf(2.0 * pair / d as f64);
        let angle = pos as f64 * freq;
        if j % 2 == 0 {
            angle.sin() as f32
        } else {
            angle.cos() as f32
        }
    })
}
