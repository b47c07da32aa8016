//! Cross-modal fusion: text tokens and the six visual token blocks (three
//! scales, two streams) run through a shared transformer encoder, and the
//! visual positions are read back out per scale.
//!
//! The visual side enters through a per-token linear map (projection A) and
//! leaves through an independent one (projection B). Both are shared across
//! scales and streams. The sequence layout is recorded explicitly so callers
//! and tests can address individual ranges.

use std::ops::Range;

use numcore::{Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init;

/// Tokens per stream: three 5x5 blocks.
pub const VISUAL_TOKENS_PER_STREAM: usize = 75;
/// Tokens per block.
pub const BLOCK_TOKENS: usize = 25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Model dim T shared by text embeddings and visual tokens.
    pub token_channels: usize,
    pub heads: usize,
    pub layers: usize,
    /// Feed-forward hidden width as a multiple of `token_channels`.
    pub ff_expansion: usize,
    pub dropout: f64,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.token_channels == 0 || self.heads == 0 || self.ff_expansion == 0 {
            return Err(Error::Build("encoder dims must be >= 1".to_string()));
        }
        if self.token_channels % self.heads != 0 {
            return Err(Error::Build(format!(
                "token_channels {} not divisible by {} heads",
                self.token_channels, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Build(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Per-token affine map, `[L, in] -> [L, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    name: String,
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(rng: &mut ChaCha8Rng, name: &str, d_in: usize, d_out: usize) -> Self {
        Linear {
            name: name.to_string(),
            weight: init::he_uniform(vec![d_in, d_out], d_in, rng),
            bias: init::zeros(vec![d_out]),
        }
    }

    /// Builds a layer from explicit values; the identity and inverse
    /// round-trip tests construct their maps this way.
    pub fn from_parts(name: &str, weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.rank() != 2 || bias.shape() != [weight.shape()[1]] {
            return Err(Error::Build(format!(
                "linear {}: weight {:?} and bias {:?} disagree",
                name,
                weight.shape(),
                bias.shape()
            )));
        }
        Ok(Linear { name: name.to_string(), weight, bias })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(&format!("{}.w", self.name), &self.weight);
        let b = tape.param(&format!("{}.b", self.name), &self.bias);
        let y = tape.matmul(x, w)?;
        Ok(tape.add(y, b)?)
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{}.w", self.name), &self.weight);
        f(&format!("{}.b", self.name), &self.bias);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{}.w", self.name), &mut self.weight);
        f(&format!("{}.b", self.name), &mut self.bias);
    }
}

/// Scaled dot-product attention. `d_k` is the scaling divisor; rows of the
/// weight matrix are softmax-normalized.
pub fn attention(tape: &mut Tape, q: Var, k: Var, v: Var, d_k: usize) -> Result<Var> {
    let (sq, sk, sv) = (tape.shape(q).to_vec(), tape.shape(k).to_vec(), tape.shape(v).to_vec());
    if sq.len() != 2 || sk.len() != 2 || sv.len() != 2 || sq[1] != sk[1] || sk[0] != sv[0] {
        return Err(Error::Build(format!(
            "attention shapes disagree: Q {:?}, K {:?}, V {:?}",
            sq, sk, sv
        )));
    }
    if d_k == 0 {
        return Err(Error::Build("attention d_k must be >= 1".to_string()));
    }
    let kt = tape.permute(k, &[1, 0])?;
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.scale(scores, 1.0 / (d_k as f64).sqrt())?;
    let weights = tape.softmax(scaled, 1)?;
    Ok(tape.matmul(weights, v)?)
}

/// Index ranges of each segment inside the fused sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceLayout {
    pub text: Range<usize>,
    /// Second text copy, present only under the duplicated-text reading.
    pub text_sr: Option<Range<usize>>,
    pub lr: [Range<usize>; 3],
    pub sr: [Range<usize>; 3],
    pub len: usize,
}

#[derive(Debug, Clone)]
pub struct FusedSequence {
    pub g: Var,
    pub layout: SequenceLayout,
}

/// Concatenates text and visual tokens into one `[L, T]` sequence. All
/// inputs must share the token dim; `text` may be absent (ablation), making
/// L = 150. With `duplicate_text` the text block precedes each stream.
pub fn build_sequence(
    tape: &mut Tape,
    text: Option<Var>,
    lr_tokens: &[Var; 3],
    sr_tokens: &[Var; 3],
    duplicate_text: bool,
) -> Result<FusedSequence> {
    let token_dim = tape.shape(lr_tokens[0])[1];
    for &v in lr_tokens.iter().chain(sr_tokens.iter()) {
        if tape.shape(v) != [BLOCK_TOKENS, token_dim] {
            return Err(Error::Build(format!(
                "visual block must be [{}, {}], got {:?}",
                BLOCK_TOKENS,
                token_dim,
                tape.shape(v)
            )));
        }
    }
    let n = match text {
        Some(t) => {
            let s = tape.shape(t).to_vec();
            if s.len() != 2 || s[1] != token_dim {
                return Err(Error::Build(format!(
                    "text tokens must be [n, {}], got {:?}",
                    token_dim, s
                )));
            }
            s[0]
        }
        None => 0,
    };

    let mut parts = Vec::with_capacity(8);
    let mut cursor = 0;
    let take = |count: usize, cursor: &mut usize| {
        let r = *cursor..*cursor + count;
        *cursor += count;
        r
    };

    let text_range;
    let mut text_sr = None;
    if let Some(t) = text {
        parts.push(t);
        text_range = take(n, &mut cursor);
    } else {
        text_range = 0..0;
    }
    let mut lr: [Range<usize>; 3] = [0..0, 0..0, 0..0];
    for (i, &v) in lr_tokens.iter().enumerate() {
        parts.push(v);
        lr[i] = take(BLOCK_TOKENS, &mut cursor);
    }
    if duplicate_text {
        if let Some(t) = text {
            parts.push(t);
            text_sr = Some(take(n, &mut cursor));
        }
    }
    let mut sr: [Range<usize>; 3] = [0..0, 0..0, 0..0];
    for (i, &v) in sr_tokens.iter().enumerate() {
        parts.push(v);
        sr[i] = take(BLOCK_TOKENS, &mut cursor);
    }

    let g = tape.concat(&parts, 0)?;
    Ok(FusedSequence { g, layout: SequenceLayout { text: text_range, text_sr, lr, sr, len: cursor } })
}

/// Reorders a `[T, 5, 5]` block into 25 row-major spatial tokens of dim T.
pub fn block_to_tokens(tape: &mut Tape, block: Var) -> Result<Var> {
    let s = tape.shape(block).to_vec();
    if s.len() != 3 || s[1] * s[2] != BLOCK_TOKENS {
        return Err(Error::Build(format!("expected a [T, 5, 5] block, got {:?}", s)));
    }
    let hwc = tape.permute(block, &[1, 2, 0])?;
    Ok(tape.reshape(hwc, vec![BLOCK_TOKENS, s[0]])?)
}

/// Inverse of [`block_to_tokens`].
pub fn tokens_to_block(tape: &mut Tape, tokens: Var, side: usize) -> Result<Var> {
    let s = tape.shape(tokens).to_vec();
    if s.len() != 2 || s[0] != side * side {
        return Err(Error::Build(format!("expected [{}, T] tokens, got {:?}", side * side, s)));
    }
    let hwc = tape.reshape(tokens, vec![side, side, s[1]])?;
    Ok(tape.permute(hwc, &[2, 0, 1])?)
}

pub struct EncoderLayer {
    wq: Vec<Linear>,
    wk: Vec<Linear>,
    wv: Vec<Linear>,
    wo: Linear,
    ff1: Linear,
    ff2: Linear,
    prefix: String,
    ln1_gamma: Tensor,
    ln1_beta: Tensor,
    ln2_gamma: Tensor,
    ln2_beta: Tensor,
}

impl EncoderLayer {
    pub fn new(rng: &mut ChaCha8Rng, prefix: &str, cfg: &EncoderConfig) -> Self {
        let t = cfg.token_channels;
        let d_h = t / cfg.heads;
        let mk_heads = |rng: &mut ChaCha8Rng, which: &str| {
            (0..cfg.heads)
                .map(|h| Linear::new(rng, &format!("{}.h{}.{}", prefix, h, which), t, d_h))
                .collect::<Vec<_>>()
        };
        EncoderLayer {
            wq: mk_heads(rng, "q"),
            wk: mk_heads(rng, "k"),
            wv: mk_heads(rng, "v"),
            wo: Linear::new(rng, &format!("{}.o", prefix), t, t),
            ff1: Linear::new(rng, &format!("{}.ff1", prefix), t, t * cfg.ff_expansion),
            ff2: Linear::new(rng, &format!("{}.ff2", prefix), t * cfg.ff_expansion, t),
            prefix: prefix.to_string(),
            ln1_gamma: init::ones(vec![t]),
            ln1_beta: init::zeros(vec![t]),
            ln2_gamma: init::ones(vec![t]),
            ln2_beta: init::zeros(vec![t]),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        g: Var,
        dropout: f64,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let t = tape.shape(g)[1];
        let d_h = t / self.wq.len();
        let mut heads = Vec::with_capacity(self.wq.len());
        for h in 0..self.wq.len() {
            let q = self.wq[h].forward(tape, g)?;
            let k = self.wk[h].forward(tape, g)?;
            let v = self.wv[h].forward(tape, g)?;
            heads.push(attention(tape, q, k, v, d_h)?);
        }
        let cat = tape.concat(&heads, 1)?;
        let proj = self.wo.forward(tape, cat)?;
        let res1 = tape.add(g, proj)?;
        let g1 = self.norm(tape, res1, "ln1", &self.ln1_gamma, &self.ln1_beta)?;

        let hidden = self.ff1.forward(tape, g1)?;
        let mut hidden = tape.relu(hidden)?;
        if let Some(rng) = rng {
            if dropout > 0.0 {
                let keep = 1.0 - dropout;
                let mask: Vec<f64> = (0..tape.data(hidden).len())
                    .map(|_| if rng.gen::<f64>() < dropout { 0.0 } else { 1.0 / keep })
                    .collect();
                hidden = tape.mask_mul(hidden, mask)?;
            }
        }
        let ff = self.ff2.forward(tape, hidden)?;
        let res2 = tape.add(g1, ff)?;
        self.norm(tape, res2, "ln2", &self.ln2_gamma, &self.ln2_beta)
    }

    fn norm(&self, tape: &mut Tape, x: Var, which: &str, gamma: &Tensor, beta: &Tensor) -> Result<Var> {
        let g = tape.param(&format!("{}.{}.g", self.prefix, which), gamma);
        let b = tape.param(&format!("{}.{}.b", self.prefix, which), beta);
        Ok(tape.layernorm(x, 1, g, b, 1e-5)?)
    }

    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for lin in self.wq.iter().chain(&self.wk).chain(&self.wv) {
            lin.visit(f);
        }
        self.wo.visit(f);
        self.ff1.visit(f);
        self.ff2.visit(f);
        f(&format!("{}.ln1.g", self.prefix), &self.ln1_gamma);
        f(&format!("{}.ln1.b", self.prefix), &self.ln1_beta);
        f(&format!("{}.ln2.g", self.prefix), &self.ln2_gamma);
        f(&format!("{}.ln2.b", self.prefix), &self.ln2_beta);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for lin in self.wq.iter_mut().chain(self.wk.iter_mut()).chain(self.wv.iter_mut()) {
            lin.visit_mut(f);
        }
        self.wo.visit_mut(f);
        self.ff1.visit_mut(f);
        self.ff2.visit_mut(f);
        f(&format!("{}.ln1.g", self.prefix), &mut self.ln1_gamma);
        f(&format!("{}.ln1.b", self.prefix), &mut self.ln1_beta);
        f(&format!("{}.ln2.g", self.prefix), &mut self.ln2_gamma);
        f(&format!("{}.ln2.b", self.prefix), &mut self.ln2_beta);
    }
}

/// The fusion block: projection A, the encoder stack, readback, projection B.
pub struct Fusion {
    pub cfg: EncoderConfig,
    pub duplicate_text: bool,
    pub learned_positions: bool,
    /// Capacity of the position table's text segment.
    pub max_text_len: usize,
    proj_a: Linear,
    proj_b: Linear,
    layers: Vec<EncoderLayer>,
    positions: Option<(String, Tensor)>,
}

impl Fusion {
    pub fn new(
        rng: &mut ChaCha8Rng,
        prefix: &str,
        cfg: EncoderConfig,
        duplicate_text: bool,
        learned_positions: bool,
        max_text_len: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        let t = cfg.token_channels;
        let layers = (0..cfg.layers)
            .map(|i| EncoderLayer::new(rng, &format!("{}.l{}", prefix, i), &cfg))
            .collect();
        let positions = learned_positions.then(|| {
            let rows = max_text_len + 2 * VISUAL_TOKENS_PER_STREAM;
            (format!("{}.pos", prefix), init::uniform(vec![rows, t], 0.02, rng))
        });
        Ok(Fusion {
            cfg,
            duplicate_text,
            learned_positions,
            max_text_len,
            proj_a: Linear::new(rng, &format!("{}.a", prefix), t, t),
            proj_b: Linear::new(rng, &format!("{}.b", prefix), t, t),
            layers,
            positions,
        })
    }

    /// Swaps in explicit A/B projections; used by round-trip tests.
    pub fn set_projections(&mut self, a: Linear, b: Linear) {
        self.proj_a = a;
        self.proj_b = b;
    }

    /// Runs the fused sequence and returns the three per-scale output blocks
    /// `[T, 5, 5]` plus the layout that was used. Text may be absent. Pass a
    /// seeded rng to enable feed-forward dropout (training mode).
    pub fn itf_forward(
        &self,
        tape: &mut Tape,
        text: Option<Var>,
        lr_blocks: &[Var; 3],
        sr_blocks: &[Var; 3],
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<([Var; 3], SequenceLayout)> {
        let mut lr_tokens = [lr_blocks[0]; 3];
        let mut sr_tokens = [sr_blocks[0]; 3];
        for i in 0..3 {
            let lt = block_to_tokens(tape, lr_blocks[i])?;
            let st = block_to_tokens(tape, sr_blocks[i])?;
            lr_tokens[i] = self.proj_a.forward(tape, lt)?;
            sr_tokens[i] = self.proj_a.forward(tape, st)?;
        }
        let seq = build_sequence(tape, text, &lr_tokens, &sr_tokens, self.duplicate_text)?;
        let layout = seq.layout.clone();

        let mut g = seq.g;
        if let Some((name, table)) = &self.positions {
            g = self.add_positions(tape, g, name, table, &layout)?;
        }
        for layer in &self.layers {
            g = layer.forward(tape, g, self.cfg.dropout, dropout_rng.as_deref_mut())?;
        }

        let side = (BLOCK_TOKENS as f64).sqrt() as usize;
        let mut out = [g; 3];
        for i in 0..3 {
            let lr_rows = gather_rows(tape, g, &layout.lr[i])?;
            let sr_rows = gather_rows(tape, g, &layout.sr[i])?;
            let summed = tape.add(lr_rows, sr_rows)?;
            let mean = tape.scale(summed, 0.5)?;
            let back = self.proj_b.forward(tape, mean)?;
            out[i] = tokens_to_block(tape, back, side)?;
        }
        Ok((out, layout))
    }

    fn add_positions(
        &self,
        tape: &mut Tape,
        g: Var,
        name: &str,
        table: &Tensor,
        layout: &SequenceLayout,
    ) -> Result<Var> {
        let t = self.cfg.token_channels;
        let n = layout.text.len();
        if n > self.max_text_len {
            return Err(Error::Build(format!(
                "text length {} exceeds position table capacity {}",
                n, self.max_text_len
            )));
        }
        let pos = tape.param(name, table);
        let mut rows = Vec::with_capacity(layout.len);
        rows.extend(0..n);
        let visual_base = self.max_text_len;
        rows.extend(visual_base..visual_base + VISUAL_TOKENS_PER_STREAM);
        if layout.text_sr.is_some() {
            rows.extend(0..n);
        }
        let sr_base = visual_base + VISUAL_TOKENS_PER_STREAM;
        rows.extend(sr_base..sr_base + VISUAL_TOKENS_PER_STREAM);
        let mut idx = Vec::with_capacity(layout.len * t);
        for r in rows {
            for c in 0..t {
                idx.push(r * t + c);
            }
        }
        let flat = tape.gather(pos, idx)?;
        let table_rows = tape.reshape(flat, vec![layout.len, t])?;
        Ok(tape.add(g, table_rows)?)
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.proj_a.visit(f);
        self.proj_b.visit(f);
        for layer in &self.layers {
            layer.visit(f);
        }
        if let Some((name, table)) = &self.positions {
            f(name, table);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.proj_a.visit_mut(f);
        self.proj_b.visit_mut(f);
        for layer in &mut self.layers {
            layer.visit_mut(f);
        }
        if let Some((name, table)) = &mut self.positions {
            f(name, table);
        }
    }
}

/// Gathers a contiguous row range of a `[L, T]` matrix.
fn gather_rows(tape: &mut Tape, g: Var, range: &Range<usize>) -> Result<Var> {
    let t = tape.shape(g)[1];
    let mut idx = Vec::with_capacity(range.len() * t);
    for r in range.clone() {
        for c in 0..t {
            idx.push(r * t + c);
        }
    }
    let flat = tape.gather(g, idx)?;
    Ok(tape.reshape(flat, vec![range.len(), t])?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn toy_cfg() -> EncoderConfig {
        EncoderConfig { token_channels: 8, heads: 2, layers: 1, ff_expansion: 2, dropout: 0.0 }
    }

    fn rand_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        init::uniform(vec![rows, cols], 1.0, rng)
    }

    #[test]
    fn config_rejects_indivisible_heads() {
        let cfg = EncoderConfig { token_channels: 10, heads: 4, layers: 1, ff_expansion: 2, dropout: 0.0 };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut tape = Tape::new();
        let q = tape.constant(&rand_matrix(&mut rng, 6, 4));
        let k = tape.constant(&rand_matrix(&mut rng, 6, 4));
        let v = tape.constant(&rand_matrix(&mut rng, 6, 3));
        // Recompute the weight matrix exactly as attention does and check
        // row sums.
        let kt = tape.permute(k, &[1, 0]).unwrap();
        let scores = tape.matmul(q, kt).unwrap();
        let scaled = tape.scale(scores, 0.5).unwrap();
        let weights = tape.softmax(scaled, 1).unwrap();
        for row in 0..6 {
            let sum: f64 = tape.data(weights)[row * 6..(row + 1) * 6].iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
        let out = attention(&mut tape, q, k, v, 4).unwrap();
        assert_eq!(tape.shape(out), &[6, 3]);
    }

    #[test]
    fn single_token_attention_returns_v() {
        let mut tape = Tape::new();
        let q = tape.constant(&Tensor::new(vec![1, 3], vec![0.3, -2.0, 5.0]).unwrap());
        let k = tape.constant(&Tensor::new(vec![1, 3], vec![1.0, 1.0, 1.0]).unwrap());
        let v = tape.constant(&Tensor::new(vec![1, 2], vec![0.25, -0.75]).unwrap());
        let out = attention(&mut tape, q, k, v, 3).unwrap();
        assert_eq!(tape.data(out), &[0.25, -0.75]);
    }

    #[test]
    fn identical_keys_average_the_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tape = Tape::new();
        let q = tape.constant(&rand_matrix(&mut rng, 4, 3));
        let k = tape.constant(&Tensor::full(vec![4, 3], 0.5).unwrap());
        let v = tape.constant(&rand_matrix(&mut rng, 4, 2));
        let out = attention(&mut tape, q, k, v, 3).unwrap();
        let vd = tape.data(v).to_vec();
        let mean = [
            (vd[0] + vd[2] + vd[4] + vd[6]) / 4.0,
            (vd[1] + vd[3] + vd[5] + vd[7]) / 4.0,
        ];
        for row in 0..4 {
            assert!((tape.data(out)[row * 2] - mean[0]).abs() < 1e-12);
            assert!((tape.data(out)[row * 2 + 1] - mean[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn two_token_golden_case() {
        let mut tape = Tape::new();
        let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let q = tape.constant(&eye);
        let k = tape.constant(&eye);
        let v = tape.constant(&Tensor::new(vec![2, 1], vec![1.0, 0.0]).unwrap());
        let out = attention(&mut tape, q, k, v, 1).unwrap();
        let e = std::f64::consts::E;
        let hot = e / (e + 1.0);
        let cold = 1.0 / (e + 1.0);
        assert!((tape.data(out)[0] - hot).abs() < 1e-12);
        assert!((tape.data(out)[1] - cold).abs() < 1e-12);
    }

    fn block(tape: &mut Tape, t: usize, fill: f64) -> Var {
        tape.constant(&Tensor::full(vec![t, 5, 5], fill).unwrap())
    }

    #[test]
    fn sequence_layout_partitions_the_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::new();
        let text = tape.constant(&rand_matrix(&mut rng, 4, 8));
        let lr = [0.1, 0.2, 0.3].map(|f| {
            let b = block(&mut tape, 8, f);
            block_to_tokens(&mut tape, b).unwrap()
        });
        let sr = [0.4, 0.5, 0.6].map(|f| {
            let b = block(&mut tape, 8, f);
            block_to_tokens(&mut tape, b).unwrap()
        });
        let seq = build_sequence(&mut tape, Some(text), &lr, &sr, false).unwrap();
        assert_eq!(seq.layout.len, 4 + 150);
        assert_eq!(seq.layout.text, 0..4);
        assert_eq!(seq.layout.lr[0], 4..29);
        assert_eq!(seq.layout.sr[2], 129..154);
        assert_eq!(tape.shape(seq.g), &[154, 8]);
        assert!(seq.layout.text_sr.is_none());
        // Row 4 starts the first visual block.
        assert!((tape.data(seq.g)[4 * 8] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn duplicated_text_doubles_the_text_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::new();
        let text = tape.constant(&rand_matrix(&mut rng, 4, 8));
        let mk = |tape: &mut Tape| {
            [0.1, 0.2, 0.3].map(|f| {
                let b = block(tape, 8, f);
                block_to_tokens(tape, b).unwrap()
            })
        };
        let lr = mk(&mut tape);
        let sr = mk(&mut tape);
        let seq = build_sequence(&mut tape, Some(text), &lr, &sr, true).unwrap();
        assert_eq!(seq.layout.len, 2 * 4 + 150);
        assert_eq!(seq.layout.text_sr, Some(79..83));
        assert_eq!(seq.layout.sr[0], 83..108);
    }

    #[test]
    fn no_text_gives_150_rows() {
        let mut tape = Tape::new();
        let mk = |tape: &mut Tape| {
            [0.1, 0.2, 0.3].map(|f| {
                let b = block(tape, 8, f);
                block_to_tokens(tape, b).unwrap()
            })
        };
        let lr = mk(&mut tape);
        let sr = mk(&mut tape);
        let seq = build_sequence(&mut tape, None, &lr, &sr, false).unwrap();
        assert_eq!(seq.layout.len, 150);
        assert_eq!(seq.layout.text, 0..0);
    }

    #[test]
    fn block_token_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut tape = Tape::new();
        let t = init::uniform(vec![7, 5, 5], 1.0, &mut rng);
        let b = tape.constant(&t);
        let tokens = block_to_tokens(&mut tape, b).unwrap();
        assert_eq!(tape.shape(tokens), &[25, 7]);
        let back = tokens_to_block(&mut tape, tokens, 5).unwrap();
        assert_eq!(tape.data(back), t.data());
    }

    #[test]
    fn identity_projection_leaves_tokens_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Linear::from_parts("a", init::identity(6), init::zeros(vec![6])).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(&rand_matrix(&mut rng, 25, 6));
        let y = a.forward(&mut tape, x).unwrap();
        assert_eq!(tape.data(y), tape.data(x));
    }

    #[test]
    fn zero_layer_fusion_is_b_of_the_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = EncoderConfig { layers: 0, ..toy_cfg() };
        let mut fusion = Fusion::new(&mut rng, "fusion", cfg, false, false, 8).unwrap();
        let a = Linear::from_parts("fusion.a", init::identity(8), init::zeros(vec![8])).unwrap();
        let b = Linear::from_parts("fusion.b", init::identity(8), init::zeros(vec![8])).unwrap();
        fusion.set_projections(a, b);
        let mut tape = Tape::new();
        let lr = [0.1, 0.2, 0.3].map(|f| block(&mut tape, 8, f));
        let sr = [0.5, 0.6, 0.7].map(|f| block(&mut tape, 8, f));
        let (out, layout) = fusion.itf_forward(&mut tape, None, &lr, &sr, None).unwrap();
        assert_eq!(layout.len, 150);
        for (i, &v) in out.iter().enumerate() {
            assert_eq!(tape.shape(v), &[8, 5, 5]);
            let want = ([0.1, 0.2, 0.3][i] + [0.5, 0.6, 0.7][i]) / 2.0;
            assert!(tape.data(v).iter().all(|&x| (x - want).abs() < 1e-12));
        }
    }

    #[test]
    fn encoder_layer_preserves_shape_and_runs_with_text() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let fusion = Fusion::new(&mut rng, "fusion", toy_cfg(), false, false, 8).unwrap();
        let mut tape = Tape::new();
        let text = tape.constant(&rand_matrix(&mut rng, 3, 8));
        let lr = [0.1, 0.2, 0.3].map(|f| block(&mut tape, 8, f));
        let sr = [0.5, 0.6, 0.7].map(|f| block(&mut tape, 8, f));
        let (out, layout) = fusion.itf_forward(&mut tape, Some(text), &lr, &sr, None).unwrap();
        assert_eq!(layout.len, 153);
        for &v in &out {
            assert_eq!(tape.shape(v), &[8, 5, 5]);
            assert!(tape.data(v).iter().all(|x| x.is_finite()));
        }
    }

    #[test]
    fn dropout_draws_change_the_output_and_eval_mode_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = EncoderConfig { dropout: 0.5, ..toy_cfg() };
        let fusion = Fusion::new(&mut rng, "fusion", cfg, false, false, 8).unwrap();
        let run = |drop_seed: Option<u64>| {
            let mut tape = Tape::new();
            let lr = [0.1, 0.2, 0.3].map(|f| block(&mut tape, 8, f));
            let sr = [0.5, 0.6, 0.7].map(|f| block(&mut tape, 8, f));
            let mut rng = drop_seed.map(ChaCha8Rng::seed_from_u64);
            let (out, _) = fusion.itf_forward(&mut tape, None, &lr, &sr, rng.as_mut()).unwrap();
            tape.data(out[0]).to_vec()
        };
        assert_eq!(run(None), run(None));
        assert_eq!(run(Some(3)), run(Some(3)));
        assert_ne!(run(Some(3)), run(Some(4)));
    }

    #[test]
    fn learned_positions_add_rows_from_the_table() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = EncoderConfig { layers: 0, ..toy_cfg() };
        let fusion = Fusion::new(&mut rng, "fusion", cfg, false, true, 8).unwrap();
        let mut tape = Tape::new();
        let lr = [0.1, 0.2, 0.3].map(|f| block(&mut tape, 8, f));
        let sr = [0.5, 0.6, 0.7].map(|f| block(&mut tape, 8, f));
        // With positions enabled the zero-layer output is no longer the
        // plain B(mean(A(lr), A(sr))) of the flat blocks.
        let (with_pos, _) = fusion.itf_forward(&mut tape, None, &lr, &sr, None).unwrap();
        let mut rng2 = ChaCha8Rng::seed_from_u64(4);
        let cfg2 = EncoderConfig { layers: 0, ..toy_cfg() };
        let plain = Fusion::new(&mut rng2, "fusion", cfg2, false, false, 8).unwrap();
        let mut tape2 = Tape::new();
        let lr2 = [0.1, 0.2, 0.3].map(|f| block(&mut tape2, 8, f));
        let sr2 = [0.5, 0.6, 0.7].map(|f| block(&mut tape2, 8, f));
        let (without, _) = plain.itf_forward(&mut tape2, None, &lr2, &sr2, None).unwrap();
        assert_ne!(tape.data(with_pos[0]), tape2.data(without[0]));
    }
}
