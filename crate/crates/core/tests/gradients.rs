//! Finite-difference checks for every layer type on the tape.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use versa_core::numerics::layers::{self, sinusoidal_positions};
use versa_core::numerics::{
    finite_diff_check, random_projection, ConvSpec, GradCheckOptions, ParamStore, Tensor,
};

fn opts(seed: u64) -> GradCheckOptions {
    GradCheckOptions {
        seed,
        ..Default::default()
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn linear_layer() {
    for seed in 0..5 {
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        layers::init_linear(&mut store, "lin", 6, 5, &mut r).unwrap();
        let x = Tensor::randn(&[2, 3, 6], 1.0, &mut r);
        let rep = finite_diff_check(&store, &[x], opts(seed), |tape, s, v| {
            let y = layers::linear(tape, s, "lin", v[0])?;
            random_projection(tape, y, seed)
        })
        .unwrap();
        assert!(rep.max_rel_error < 1e-3, "{rep:?}");
    }
}

#[test]
fn layer_norm() {
    for seed in 0..5 {
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        layers::init_layer_norm(&mut store, "ln", 8).unwrap();
        store.set("ln.g", Tensor::randn(&[8], 1.0, &mut r)).unwrap();
        store.set("ln.b", Tensor::randn(&[8], 1.0, &mut r)).unwrap();
        let x = Tensor::randn(&[2, 3, 8], 1.0, &mut r);
        let rep = finite_diff_check(&store, &[x], opts(seed), |tape, s, v| {
            let y = layers::layer_norm(tape, s, "ln", v[0])?;
            random_projection(tape, y, seed + 100)
        })
        .unwrap();
        assert!(rep.max_rel_error < 1e-3, "{rep:?}");
    }
}

#[test]
fn conv_and_transpose_conv() {
    for seed in 0..5 {
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        layers::init_conv(&mut store, "down", 3, 4, 4, &mut r).unwrap();
        layers::init_conv_transpose(&mut store, "up", 4, 3, 4, 2, &mut r).unwrap();
        layers::init_conv(&mut store, "same", 3, 2, 3, &mut r).unwrap();
        let x = Tensor::randn(&[2, 8, 3], 1.0, &mut r);
        let rep = finite_diff_check(&store, &[x], opts(seed), |tape, s, v| {
            let h = layers::conv(tape, s, "down", v[0], ConvSpec::strided(4, 2, 1))?;
            let h = tape.gelu(h)?;
            let h = layers::conv_transpose(tape, s, "up", h, ConvSpec::strided(4, 2, 1))?;
            let h = layers::conv(tape, s, "same", h, ConvSpec::same(3))?;
            random_projection(tape, h, seed)
        })
        .unwrap();
        assert!(rep.max_rel_error < 1e-3, "{rep:?}");
    }
}

#[test]
fn attention_block_tiny() {
    for seed in 0..5 {
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        layers::init_transformer_block(&mut store, "blk", 8, 16, &mut r).unwrap();
        let x = Tensor::randn(&[2, 5, 8], 1.0, &mut r);
        let pos = sinusoidal_positions(5, 8);
        let rep = finite_diff_check(&store, &[x], opts(seed), |tape, s, v| {
            let p = tape.constant(pos.clone());
            let h = tape.add_broadcast(v[0], p)?;
            let h = layers::transformer_block(tape, s, "blk", h, 2)?;
            random_projection(tape, h, seed)
        })
        .unwrap();
        println!("{rep:?}");
        assert!(rep.max_rel_error < 5e-3, "{rep:?}");
    }
}
