//! Properties of the fused token encoder: sequence bookkeeping, attention
//! equivariance, invertible projections, and the cross-modal gradient path.

use fusedet::fusion::{EncoderConfig, EncoderLayer, Fusion, Linear};
use fusedet::init;
use numcore::{Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn cfg(token_channels: usize, heads: usize, layers: usize) -> EncoderConfig {
    EncoderConfig { token_channels, heads, layers, ff_expansion: 2, dropout: 0.0 }
}

fn blocks(tape: &mut Tape, t: usize, rng: &mut ChaCha8Rng) -> [Var; 3] {
    [0; 3].map(|_| tape.constant(&init::uniform(vec![t, 5, 5], 1.0, rng)))
}

/// Gauss-Jordan inverse of a square row-major matrix.
fn invert(a: &[f64], n: usize) -> Vec<f64> {
    let mut m: Vec<f64> = Vec::with_capacity(n * 2 * n);
    for r in 0..n {
        m.extend_from_slice(&a[r * n..(r + 1) * n]);
        m.extend((0..n).map(|c| if c == r { 1.0 } else { 0.0 }));
    }
    let w = 2 * n;
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| m[i * w + col].abs().partial_cmp(&m[j * w + col].abs()).unwrap()).unwrap();
        for c in 0..w {
            m.swap(col * w + c, pivot * w + c);
        }
        let p = m[col * w + col];
        assert!(p.abs() > 1e-9, "matrix not invertible");
        for c in 0..w {
            m[col * w + c] /= p;
        }
        for r in 0..n {
            if r != col {
                let f = m[r * w + col];
                for c in 0..w {
                    m[r * w + c] -= f * m[col * w + c];
                }
            }
        }
    }
    let mut inv = Vec::with_capacity(n * n);
    for r in 0..n {
        inv.extend_from_slice(&m[r * w + n..(r + 1) * w]);
    }
    inv
}

#[test]
fn sequence_length_tracks_the_text_length() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let t = 8;
    let fusion = Fusion::new(&mut rng, "f", cfg(t, 2, 1), false, false, 40).unwrap();
    let mut tape = Tape::new();
    let lr = blocks(&mut tape, t, &mut rng);
    let sr = blocks(&mut tape, t, &mut rng);
    let text = tape.constant(&init::uniform(vec![35, t], 1.0, &mut rng));
    let (_, layout) = fusion.itf_forward(&mut tape, Some(text), &lr, &sr, None).unwrap();
    assert_eq!(layout.len, 185);
    assert_eq!(layout.text, 0..35);

    let (_, no_text) = fusion.itf_forward(&mut tape, None, &lr, &sr, None).unwrap();
    assert_eq!(no_text.len, 150);
}

#[test]
fn duplicated_text_doubles_its_share_of_the_sequence() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let t = 8;
    let fusion = Fusion::new(&mut rng, "f", cfg(t, 2, 1), true, false, 40).unwrap();
    let mut tape = Tape::new();
    let lr = blocks(&mut tape, t, &mut rng);
    let sr = blocks(&mut tape, t, &mut rng);
    let text = tape.constant(&init::uniform(vec![35, t], 1.0, &mut rng));
    let (_, layout) = fusion.itf_forward(&mut tape, Some(text), &lr, &sr, None).unwrap();
    assert_eq!(layout.len, 2 * 35 + 150);
    assert_eq!(layout.text_sr, Some(110..145));
    assert_eq!(layout.sr[0], 145..170);
}

#[test]
fn encoder_layer_commutes_with_row_permutations() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let t = 8;
    let layer = EncoderLayer::new(&mut rng, "l", &cfg(t, 2, 1));
    let base = init::uniform(vec![12, t], 1.0, &mut rng);

    // Rotate rows by 5 as the permutation.
    let perm: Vec<usize> = (0..12).map(|i| (i + 5) % 12).collect();
    let mut permuted = vec![0.0; base.len()];
    for (dst, &src) in perm.iter().enumerate() {
        permuted[dst * t..(dst + 1) * t].copy_from_slice(&base.data()[src * t..(src + 1) * t]);
    }
    let permuted = Tensor::new(vec![12, t], permuted).unwrap();

    let mut tape = Tape::new();
    let a = tape.constant(&base);
    let b = tape.constant(&permuted);
    let ya_var = layer.forward(&mut tape, a, 0.0, None).unwrap();
    let yb_var = layer.forward(&mut tape, b, 0.0, None).unwrap();
    let ya = tape.to_tensor(ya_var);
    let yb = tape.to_tensor(yb_var);
    for (dst, &src) in perm.iter().enumerate() {
        for c in 0..t {
            let diff = (yb.data()[dst * t + c] - ya.data()[src * t + c]).abs();
            assert!(diff < 1e-9, "row {} col {} diff {}", dst, c, diff);
        }
    }
}

#[test]
fn inverse_projections_make_the_readback_an_average() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let t = 6;
    let mut fusion = Fusion::new(&mut rng, "f", cfg(t, 2, 0), false, false, 8).unwrap();

    // A is a well-conditioned random matrix, B its exact inverse.
    let noise = init::uniform(vec![t, t], 0.2, &mut rng);
    let a_mat: Vec<f64> = (0..t * t)
        .map(|i| noise.data()[i] + if i % (t + 1) == 0 { 1.0 } else { 0.0 })
        .collect();
    let b_mat = invert(&a_mat, t);
    let a = Linear::from_parts("f.a", Tensor::new(vec![t, t], a_mat).unwrap(), init::zeros(vec![t])).unwrap();
    let b = Linear::from_parts("f.b", Tensor::new(vec![t, t], b_mat).unwrap(), init::zeros(vec![t])).unwrap();
    fusion.set_projections(a, b);

    let mut tape = Tape::new();
    let lr = blocks(&mut tape, t, &mut rng);
    let sr = blocks(&mut tape, t, &mut rng);
    let (out, _) = fusion.itf_forward(&mut tape, None, &lr, &sr, None).unwrap();
    for s in 0..3 {
        let got = tape.to_tensor(out[s]);
        let l = tape.data(lr[s]).to_vec();
        let r = tape.data(sr[s]).to_vec();
        for i in 0..got.len() {
            let want = 0.5 * (l[i] + r[i]);
            assert!((got.data()[i] - want).abs() < 1e-9, "scale {} idx {}", s, i);
        }
    }
}

#[test]
fn text_tokens_reach_the_visual_outputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let t = 8;
    let fusion = Fusion::new(&mut rng, "f", cfg(t, 2, 1), false, false, 8).unwrap();
    let mut tape = Tape::new();
    let lr = blocks(&mut tape, t, &mut rng);
    let sr = blocks(&mut tape, t, &mut rng);
    let text = tape.leaf(&init::uniform(vec![3, t], 1.0, &mut rng).with_requires_grad(true));
    let (out, _) = fusion.itf_forward(&mut tape, Some(text), &lr, &sr, None).unwrap();
    let mut flat = Vec::new();
    for v in out {
        let n: usize = tape.shape(v).iter().product();
        flat.push(tape.reshape(v, vec![n]).unwrap());
    }
    let all = tape.concat(&flat, 0).unwrap();
    let total = tape.sum(all).unwrap();
    tape.backward(total).unwrap();
    let g = tape.grad(text).expect("text gradient exists");
    assert!(g.iter().any(|&v| v.abs() > 1e-8), "visual outputs ignore the text tokens");
}
