//! Encoder and decoder contracts checked from the outside: shapes, residual
//! identities, attention normalization, permutation equivariance and the
//! bicubic token upsampler.

use mnsp_core::autograd::Tape;
use mnsp_core::model::{
    encode, mim_decode, nsp_decode, patch_embed, sa_ca_ffn_block, upsample_tokens_bicubic, MimDecoder, NspDecoder,
    SaCaFfnBlock,
};
use mnsp_core::rng::rng_from;
use mnsp_core::{Encoder, EncoderConfig, Error, Image, MaskPattern, Matrix, ParamStore, ScaleSequence, TokenSequence};
use rand::Rng;

fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = rng_from(seed);
    Matrix::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

fn random_image(h: usize, w: usize, c: usize, seed: u64) -> Image {
    let mut rng = rng_from(seed);
    Image::from_fn(h, w, c, |_, _, _| rng.random_range(0.0..1.0))
}

fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn tiny_encoder(seed: u64) -> (Encoder, ParamStore) {
    let mut store = ParamStore::new(seed);
    let enc = Encoder::new(&mut store, "encoder", &EncoderConfig::tiny()).unwrap();
    (enc, store)
}

#[test]
fn default_sequence_token_counts_quadruple() {
    let seq = ScaleSequence::default();
    let counts: Vec<usize> = seq.scales().iter().map(|s| s.token_count()).collect();
    assert_eq!(counts, vec![4, 16, 64, 256]);
    for k in 1..=3 {
        let (small, large) = seq.pair(k);
        assert_eq!(large.token_count(), 4 * small.token_count());
    }
}

#[test]
fn patch_embedding_token_counts() {
    let (enc, store) = tiny_encoder(1);
    let c = enc.cfg.channels;
    let full = patch_embed(&enc, &store, &random_image(32, 128, c, 2)).unwrap();
    assert_eq!((full.len(), full.grid), (256, (8, 32)));
    assert!(full.cls.is_some());
    let smallest = patch_embed(&enc, &store, &random_image(4, 16, c, 3)).unwrap();
    assert_eq!((smallest.len(), smallest.grid), (4, (1, 4)));
}

#[test]
fn indivisible_image_is_an_input_error() {
    let (enc, store) = tiny_encoder(1);
    let err = patch_embed(&enc, &store, &random_image(30, 128, enc.cfg.channels, 2)).unwrap_err();
    assert!(matches!(err, Error::Input(_)), "{err:?}");
}

#[test]
fn zero_image_embeds_to_positional_table() {
    let (enc, store) = tiny_encoder(4);
    let img = Image::filled(16, 64, enc.cfg.channels, 0.0);
    let seq = patch_embed(&enc, &store, &img).unwrap();
    let mut t = Tape::new(&store);
    let pos = enc.positional(&mut t, (4, 16));
    assert!(max_abs_diff(&seq.tokens, t.value(pos)) == 0.0);
}

#[test]
fn masked_encoding_keeps_cls_and_survivors() {
    let (enc, store) = tiny_encoder(5);
    let img = random_image(32, 128, enc.cfg.channels, 6);
    let mask = MaskPattern::random(256, 0.8, &mut rng_from(7)).unwrap();
    assert_eq!(mask.masked_count(), 205);
    let out = encode(&enc, &store, &img, Some(&mask)).unwrap();
    assert_eq!(out.rows_with_cls(), 1 + 51);
    assert_eq!(out.positions.as_deref(), Some(mask.visible_positions().as_slice()));
    let full = encode(&enc, &store, &img, None).unwrap();
    assert_eq!(full.rows_with_cls(), 257);
    assert!(full.positions.is_none());
}

#[test]
fn attention_rows_are_distributions_in_every_head_and_layer() {
    let cfg = EncoderConfig {
        depth: 3,
        ..EncoderConfig::tiny()
    };
    let mut store = ParamStore::new(8);
    let enc = Encoder::new(&mut store, "encoder", &cfg).unwrap();
    for (seed, (h, w)) in [(1, (32, 128)), (2, (8, 32)), (3, (4, 16))] {
        let img = random_image(h, w, cfg.channels, seed);
        let mut t = Tape::new(&store);
        let out = enc.forward(&mut t, &img, None).unwrap();
        assert_eq!(out.attention.len(), cfg.depth);
        for layer in &out.attention {
            assert_eq!(layer.len(), cfg.heads);
            for &head in layer {
                let p = t.attention_probs(head).unwrap();
                for row in p.rows() {
                    assert!(row.iter().all(|&x| x >= 0.0));
                    assert!((row.sum() - 1.0).abs() < 1e-5);
                }
            }
        }
    }
}

#[test]
fn permuting_visible_tokens_permutes_outputs() {
    let (enc, store) = tiny_encoder(9);
    let img = random_image(32, 128, enc.cfg.channels, 10);
    let positions: Vec<usize> = (0..256).filter(|p| p % 5 == 1).collect();
    let mut permuted = positions.clone();
    permuted.reverse();
    permuted.swap(0, 7);

    let mut t = Tape::new(&store);
    let a = enc.forward(&mut t, &img, Some(&positions)).unwrap();
    let b = enc.forward(&mut t, &img, Some(&permuted)).unwrap();
    assert_eq!(b.positions, permuted);
    let (ta, tb) = (t.value(a.tokens).clone(), t.value(b.tokens).clone());
    for (row_b, p) in permuted.iter().enumerate() {
        let row_a = positions.iter().position(|q| q == p).unwrap();
        for j in 0..ta.ncols() {
            assert!((ta[[row_a, j]] - tb[[row_b, j]]).abs() < 1e-12);
        }
    }
    assert!(max_abs_diff(t.value(a.cls), t.value(b.cls)) < 1e-12);
}

#[test]
fn zeroed_block_is_the_identity() {
    let mut store = ParamStore::new(11);
    let block = SaCaFfnBlock::new(&mut store, "block", 8, 8, 2).unwrap();
    block.zero_output_projections(&mut store);
    let x = TokenSequence::new(random_matrix(16, 8, 12), (2, 8)).unwrap();
    let ctx = TokenSequence::new(random_matrix(4, 8, 13), (1, 4)).unwrap();
    let y = sa_ca_ffn_block(&block, &store, &x, &ctx).unwrap();
    assert_eq!(y.len(), 16);
    assert!(max_abs_diff(&y.tokens, &x.tokens) <= 1e-6);
}

#[test]
fn block_output_shape_follows_queries() {
    let mut store = ParamStore::new(14);
    let block = SaCaFfnBlock::new(&mut store, "block", 8, 8, 2).unwrap();
    let x = TokenSequence::new(random_matrix(16, 8, 15), (2, 8)).unwrap();
    let ctx = TokenSequence::new(random_matrix(4, 8, 16), (1, 4)).unwrap();
    let y = sa_ca_ffn_block(&block, &store, &x, &ctx).unwrap();
    assert_eq!((y.len(), y.width(), y.grid), (16, 8, (2, 8)));
    let wide = TokenSequence::new(random_matrix(4, 6, 17), (1, 4)).unwrap();
    assert!(matches!(sa_ca_ffn_block(&block, &store, &x, &wide), Err(Error::Config(_))));
}

#[test]
fn zeroed_encoder_blocks_are_identities() {
    let (enc, mut store) = tiny_encoder(18);
    enc.zero_output_projections(&mut store);
    let mut t = Tape::new(&store);
    let x = t.constant(random_matrix(5, 8, 19));
    for b in &enc.blocks {
        let (y, _) = b.forward(&mut t, x).unwrap();
        assert!(max_abs_diff(t.value(y), t.value(x)) <= 1e-6);
    }
}

#[test]
fn zeroed_nsp_decoder_with_identity_head_returns_its_input() {
    let mut store = ParamStore::new(20);
    let dec = NspDecoder::new(&mut store, "nsp", 8, 2, 8).unwrap();
    dec.zero_output_projections(&mut store);
    dec.head.set_identity(&mut store);
    let f = TokenSequence::new(random_matrix(256, 8, 21), (8, 32)).unwrap();
    let ctx = TokenSequence::new(random_matrix(64, 8, 22), (4, 16)).unwrap();
    let y = nsp_decode(&dec, &store, &f, &ctx, 256).unwrap();
    assert_eq!(y.len(), 256);
    assert!(max_abs_diff(&y.tokens, &f.tokens) <= 1e-6);
    assert!(matches!(nsp_decode(&dec, &store, &f, &ctx, 64), Err(Error::Config(_))));
}

#[test]
fn zeroed_mim_decoder_with_identity_head_returns_assembled_tokens() {
    let mut store = ParamStore::new(23);
    let dec = MimDecoder::new(&mut store, "mim", 8, 2, 8, 8, (8, 32), true).unwrap();
    dec.zero_output_projections(&mut store);
    dec.head.set_identity(&mut store);
    let mask = MaskPattern::random(256, 0.8, &mut rng_from(24)).unwrap();
    let positions = mask.visible_positions();
    let visible = TokenSequence {
        cls: None,
        tokens: random_matrix(positions.len(), 8, 25),
        grid: (8, 32),
        positions: Some(positions.clone()),
    };
    let small = TokenSequence::new(random_matrix(64, 8, 26), (4, 16)).unwrap();
    let nsp = TokenSequence::new(random_matrix(256, 8, 27), (8, 32)).unwrap();
    let y = mim_decode(&dec, &store, &visible, &mask, Some(&small), Some(&nsp)).unwrap();
    assert_eq!(y.len(), 256);

    let mut t = Tape::new(&store);
    let v = t.constant(visible.tokens.clone());
    let assembled = dec.assemble(&mut t, v, &positions, (8, 32)).unwrap();
    assert!(max_abs_diff(&y.tokens, t.value(assembled)) <= 1e-6);

    // Masked slots hold the shared mask token plus their positional embedding.
    let mask_token = store.get(dec.mask_token).row(0).to_owned();
    let pos = store.get(dec.pos);
    let a = t.value(assembled);
    for p in mask.masked_positions() {
        for j in 0..8 {
            assert!((a[[p, j]] - (mask_token[j] + pos[[p, j]])).abs() < 1e-12);
        }
    }
}

#[test]
fn mim_decoding_rejects_missing_mask_slots() {
    let mut store = ParamStore::new(28);
    let dec = MimDecoder::new(&mut store, "mim", 8, 2, 8, 8, (8, 32), true).unwrap();
    let mask = MaskPattern::random(256, 0.8, &mut rng_from(29)).unwrap();
    // Claims every position is visible although most are masked.
    let visible = TokenSequence::new(random_matrix(256, 8, 30), (8, 32)).unwrap();
    let small = TokenSequence::new(random_matrix(64, 8, 31), (4, 16)).unwrap();
    let err = mim_decode(&dec, &store, &visible, &mask, Some(&small), Some(&visible)).unwrap_err();
    assert!(matches!(err, Error::Contract(_)), "{err:?}");
}

#[test]
fn nsp_gradient_reaches_the_cross_attention_context() {
    let mut store = ParamStore::new(32);
    let dec = NspDecoder::new(&mut store, "nsp", 8, 2, 8).unwrap();
    let mut t = Tape::new(&store);
    let f = t.constant(random_matrix(16, 8, 33));
    let ctx = t.input(random_matrix(4, 8, 34));
    let y = dec.forward(&mut t, f, ctx).unwrap();
    let loss = t.sum(y);
    let g = t.backward(loss);
    let norm: f64 = g.wrt(ctx).unwrap().iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(norm > 1e-8, "context gradient norm {norm}");
}

#[test]
fn constant_field_survives_upsampling() {
    let x = TokenSequence::new(Matrix::from_elem((16, 3), 0.37), (2, 8)).unwrap();
    let y = upsample_tokens_bicubic(&x, (4, 16)).unwrap();
    assert_eq!(y.len(), 64);
    assert!(y.tokens.iter().all(|v| (v - 0.37).abs() <= 1e-6));
}

#[test]
fn single_row_grid_upsamples_to_four_times_the_tokens() {
    let x = TokenSequence::new(random_matrix(4, 5, 35), (1, 4)).unwrap();
    let y = upsample_tokens_bicubic(&x, (2, 8)).unwrap();
    assert_eq!((y.len(), y.grid, y.width()), (16, (2, 8), 5));
}

#[test]
fn ramp_field_is_reproduced_away_from_the_border() {
    // Source sample (r, c) carries r + c. With half-pixel centres, output
    // index i sits at source coordinate (i + 0.5)·n_in/n_out − 0.5, and a
    // cubic-convolution kernel reproduces linear fields wherever all four taps
    // fall inside the grid.
    let (rows, cols) = (6, 12);
    let x = TokenSequence::new(
        Matrix::from_shape_fn((rows * cols, 1), |(i, _)| ((i / cols) + (i % cols)) as f64),
        (rows, cols),
    )
    .unwrap();
    let (out_r, out_c) = (2 * rows, 2 * cols);
    let y = upsample_tokens_bicubic(&x, (out_r, out_c)).unwrap();
    let coord = |i: usize, n_in: usize, n_out: usize| (i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5;
    let interior = |u: f64, n_in: usize| u.floor() >= 1.0 && u.floor() + 2.0 <= (n_in - 1) as f64;
    let mut checked = 0;
    for i in 0..out_r {
        for j in 0..out_c {
            let (u, v) = (coord(i, rows, out_r), coord(j, cols, out_c));
            if interior(u, rows) && interior(v, cols) {
                let got = y.tokens[[i * out_c + j, 0]];
                assert!((got - (u + v)).abs() <= 1e-5, "({i},{j}): {got} vs {}", u + v);
                checked += 1;
            }
        }
    }
    assert!(checked >= 80, "only {checked} interior samples");
}
