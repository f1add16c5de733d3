//! Conformer stages against independent dense-algebra oracles.

mod common;

use common::{max_rel_err, o_conformer_block, o_conv_module, o_ffn_half, o_mhsa, rand_vec};
use dcucnet::complex_nn::Mode;
use dcucnet::conformer::{
    conformer_block, conv_module, ffn_half, mhsa, ConformerBlockParams, ConformerConfig,
    ConvModuleParams, FfnParams, FrameSequence, MhsaParams,
};
use dcucnet::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn cfg(dim: usize, heads: usize) -> ConformerConfig {
    ConformerConfig {
        model_dim: dim,
        num_heads: heads,
        ffn_expansion: 2,
        conv_kernel: 3,
        num_blocks: 1,
        dropout: 0.0,
        ..Default::default()
    }
}

fn seq(b: usize, t: usize, d: usize, seed: u64) -> FrameSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    FrameSequence::new(Tensor::from_vec(rand_vec(b * t * d, &mut rng), &[b, t, d]).unwrap())
        .unwrap()
}

#[test]
fn ffn_half_matches_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let p = FfnParams::init_random(&cfg(8, 2), &mut rng);
    let x = seq(2, 5, 8, 42);
    let got = ffn_half(&x, &p).unwrap();
    let want = o_ffn_half(&x.data, &p);
    assert!(max_rel_err(got.data.data(), want.data()) < 1e-6);
}

#[test]
fn mhsa_matches_naive_per_head_oracle() {
    // batch 1, time 4, dim 8, 2 heads — the spec's canonical case
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let p = MhsaParams::init_random(&cfg(8, 2), &mut rng);
    let x = seq(1, 4, 8, 44);
    let got = mhsa(&x, &p).unwrap();
    let want = o_mhsa(&x.data, &p);
    assert!(max_rel_err(got.data.data(), want.data()) < 1e-6);
}

#[test]
fn conv_module_matches_direct_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(45);
    let p = ConvModuleParams::init_random(&cfg(8, 2), &mut rng);
    let x = seq(2, 6, 8, 46);
    let got = conv_module(&x, &p, Mode::Train).unwrap();
    let want = o_conv_module(&x.data, &p);
    assert!(max_rel_err(got.data.data(), want.data()) < 1e-6);
}

#[test]
fn conv_module_on_time_constant_input() {
    // constant along time: the depthwise same-padding preserves interior
    // values, and the whole module must still match the oracle
    let mut rng = ChaCha8Rng::seed_from_u64(47);
    let p = ConvModuleParams::init_random(&cfg(8, 2), &mut rng);
    let one_frame = rand_vec(8, &mut rng);
    let t = 7;
    let mut data = Vec::with_capacity(t * 8);
    for _ in 0..t {
        data.extend_from_slice(&one_frame);
    }
    let x = FrameSequence::new(Tensor::from_vec(data, &[1, t, 8]).unwrap()).unwrap();
    let got = conv_module(&x, &p, Mode::Train).unwrap();
    let want = o_conv_module(&x.data, &p);
    assert!(max_rel_err(got.data.data(), want.data()) < 1e-6);

    // interior frames of a time-constant input stay identical to each other
    let d = 8;
    for tt in 2..t - 2 {
        for k in 0..d {
            let a = got.data.data()[tt * d + k];
            let b = got.data.data()[(t / 2) * d + k];
            assert!((a - b).abs() < 1e-9);
        }
    }
}

#[test]
fn conformer_block_matches_composed_oracle() {
    // [1, 6, 16] end-to-end against the dense composition
    let mut rng = ChaCha8Rng::seed_from_u64(48);
    let p = ConformerBlockParams::init_random(&cfg(16, 4), &mut rng);
    let x = seq(1, 6, 16, 49);
    let got = conformer_block(&x, &p, Mode::Train).unwrap();
    let want = o_conformer_block(&x.data, &p);
    assert!(max_rel_err(got.data.data(), want.data()) < 1e-5);
}
