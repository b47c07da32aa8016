//! Bridge between the feature pyramid and the fusion transformer.
//!
//! Each pyramid scale gets a compression branch that reduces the map to a
//! fixed `[T, 5, 5]` token block, and a mirrored expansion branch that takes
//! a fused `[T, 5, 5]` block back to the original scale's shape. The step
//! chains are derived from the actual input dims at build time and recorded
//! in a serializable spec, so the geometry is inspectable and the expansion
//! side is a true mirror of the compression side:
//!
//! * a strided convolution inverts to a transposed convolution whose
//!   `output_padding` restores the exact input width,
//! * the final pool to 5x5 inverts to a nearest upsample (plus a pool when
//!   the width is not a multiple of 5),
//! * an upsample inserted for tiny maps inverts to a pool.

use numcore::{conv_out, Tape, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{ConvLayer, ConvTransposeLayer, PyramidVars};
use crate::error::{Error, Result};

/// Side length of the token blocks produced by every compression branch.
pub const TOKEN_SIDE: usize = 5;

/// Per-branch convolution plans as `(kernel, stride, padding)`, deepest
/// scale first. The shallowest branch starts with a wider, faster-striding
/// kernel because it has four times the width to cover.
const BRANCH_PLANS: [&[(usize, usize, usize)]; 3] =
    [&[(3, 2, 1)], &[(3, 2, 1), (3, 2, 1)], &[(5, 4, 2), (3, 2, 1)]];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "op")]
pub enum TicStep {
    Conv {
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        from: usize,
        to: usize,
    },
    Upsample {
        factor: usize,
        from: usize,
        to: usize,
    },
    Pool {
        from: usize,
        to: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "op")]
pub enum ItcStep {
    ConvTranspose {
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        output_padding: usize,
        from: usize,
        to: usize,
    },
    Upsample {
        factor: usize,
        from: usize,
        to: usize,
    },
    Pool {
        from: usize,
        to: usize,
    },
}

/// Recorded geometry for one scale: the compression chain and its mirror.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchSpec {
    /// Square side of this scale's feature map.
    pub input_dim: usize,
    /// Channel count of this scale's feature map.
    pub scale_channels: usize,
    pub tic: Vec<TicStep>,
    pub itc: Vec<ItcStep>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BridgeSpec {
    pub token_channels: usize,
    pub token_side: usize,
    /// Deepest scale first, matching the pyramid order v1, v2, v3.
    pub branches: Vec<BranchSpec>,
}

impl BridgeSpec {
    /// Derives the step chains for three square pyramid scales, deepest
    /// first. `dims` are the map sides, `channels` the per-scale widths and
    /// `token_channels` the shared block width handed to the transformer.
    pub fn build(dims: [usize; 3], channels: [usize; 3], token_channels: usize) -> Result<Self> {
        if token_channels == 0 {
            return Err(Error::Build("token_channels must be >= 1".to_string()));
        }
        let mut branches = Vec::with_capacity(3);
        for b in 0..3 {
            if dims[b] == 0 || channels[b] == 0 {
                return Err(Error::Build(format!(
                    "branch {}: dim {} and channels {} must be >= 1",
                    b, dims[b], channels[b]
                )));
            }
            let tic = build_tic(dims[b], channels[b], token_channels, BRANCH_PLANS[b])?;
            let itc = mirror(&tic)?;
            branches.push(BranchSpec {
                input_dim: dims[b],
                scale_channels: channels[b],
                tic,
                itc,
            });
        }
        Ok(BridgeSpec { token_channels, token_side: TOKEN_SIDE, branches })
    }
}

fn build_tic(
    dim: usize,
    scale_channels: usize,
    token_channels: usize,
    plan: &[(usize, usize, usize)],
) -> Result<Vec<TicStep>> {
    let mut steps = Vec::new();
    let mut cur = dim;
    let mut c_in = scale_channels;
    for &(kernel, stride, padding) in plan {
        let to = conv_out(cur, kernel, stride, padding).ok_or_else(|| {
            Error::Build(format!(
                "map side {} too small for a {}x{} stride-{} convolution",
                cur, kernel, kernel, stride
            ))
        })?;
        steps.push(TicStep::Conv {
            c_in,
            c_out: token_channels,
            kernel,
            stride,
            padding,
            from: cur,
            to,
        });
        cur = to;
        c_in = token_channels;
    }
    if cur < TOKEN_SIDE {
        let factor = TOKEN_SIDE.div_ceil(cur);
        steps.push(TicStep::Upsample { factor, from: cur, to: cur * factor });
        cur *= factor;
    }
    steps.push(TicStep::Pool { from: cur, to: TOKEN_SIDE });
    Ok(steps)
}

/// Inverts a compression chain step by step, in reverse order.
fn mirror(tic: &[TicStep]) -> Result<Vec<ItcStep>> {
    let mut steps = Vec::with_capacity(tic.len() + 1);
    for step in tic.iter().rev() {
        match *step {
            TicStep::Conv { c_in, c_out, kernel, stride, padding, from, to } => {
                let base = (to - 1) * stride + kernel;
                let restored = base as isize - 2 * padding as isize;
                let output_padding = from as isize - restored;
                if output_padding < 0 || output_padding >= stride as isize {
                    return Err(Error::Build(format!(
                        "no transposed convolution restores {} from {} at stride {}",
                        from, to, stride
                    )));
                }
                steps.push(ItcStep::ConvTranspose {
                    c_in: c_out,
                    c_out: c_in,
                    kernel,
                    stride,
                    padding,
                    output_padding: output_padding as usize,
                    from: to,
                    to: from,
                });
            }
            TicStep::Upsample { from, to, .. } => {
                steps.push(ItcStep::Pool { from: to, to: from });
            }
            TicStep::Pool { from, to } => {
                if from % to == 0 {
                    steps.push(ItcStep::Upsample { factor: from / to, from: to, to: from });
                } else {
                    let factor = from.div_ceil(to);
                    steps.push(ItcStep::Upsample { factor, from: to, to: to * factor });
                    steps.push(ItcStep::Pool { from: to * factor, to: from });
                }
            }
        }
    }
    Ok(steps)
}

struct BranchWeights {
    tic_convs: Vec<ConvLayer>,
    itc_convs: Vec<ConvTransposeLayer>,
}

/// Owns the weights for all six chains (three compress, three expand).
pub struct Bridge {
    pub spec: BridgeSpec,
    branches: Vec<BranchWeights>,
}

impl Bridge {
    pub fn new(rng: &mut ChaCha8Rng, prefix: &str, spec: BridgeSpec) -> Self {
        let branches = spec
            .branches
            .iter()
            .enumerate()
            .map(|(b, branch)| {
                let tic_convs = branch
                    .tic
                    .iter()
                    .filter_map(|s| match *s {
                        TicStep::Conv { c_in, c_out, kernel, stride, padding, .. } => {
                            Some((c_in, c_out, kernel, stride, padding))
                        }
                        _ => None,
                    })
                    .enumerate()
                    .map(|(j, (c_in, c_out, kernel, stride, padding))| {
                        ConvLayer::new(
                            rng,
                            &format!("{}.b{}.tic{}", prefix, b, j),
                            c_in,
                            c_out,
                            kernel,
                            stride,
                            padding,
                            true,
                        )
                    })
                    .collect();
                let itc_convs = branch
                    .itc
                    .iter()
                    .filter_map(|s| match *s {
                        ItcStep::ConvTranspose {
                            c_in,
                            c_out,
                            kernel,
                            stride,
                            padding,
                            output_padding,
                            ..
                        } => Some((c_in, c_out, kernel, stride, padding, output_padding)),
                        _ => None,
                    })
                    .enumerate()
                    .map(|(j, (c_in, c_out, kernel, stride, padding, output_padding))| {
                        ConvTransposeLayer::new(
                            rng,
                            &format!("{}.b{}.itc{}", prefix, b, j),
                            c_in,
                            c_out,
                            kernel,
                            stride,
                            padding,
                            output_padding,
                            true,
                        )
                    })
                    .collect();
                BranchWeights { tic_convs, itc_convs }
            })
            .collect();
        Bridge { spec, branches }
    }

    /// Compresses a pyramid into three `[T, 5, 5]` token blocks, deepest
    /// scale first.
    pub fn tic_forward(&self, tape: &mut Tape, pyramid: &PyramidVars) -> Result<[Var; 3]> {
        let inputs = [pyramid.v1, pyramid.v2, pyramid.v3];
        let mut out = [pyramid.v1; 3];
        for (b, (&x, branch)) in inputs.iter().zip(&self.spec.branches).enumerate() {
            let shape = tape.shape(x).to_vec();
            if shape != [branch.scale_channels, branch.input_dim, branch.input_dim] {
                return Err(Error::Build(format!(
                    "branch {} expects [{}, {}, {}], got {:?}",
                    b, branch.scale_channels, branch.input_dim, branch.input_dim, shape
                )));
            }
            let mut cur = x;
            let mut conv_idx = 0;
            for step in &branch.tic {
                cur = match *step {
                    TicStep::Conv { .. } => {
                        let y = self.branches[b].tic_convs[conv_idx].forward(tape, cur)?;
                        conv_idx += 1;
                        y
                    }
                    TicStep::Upsample { factor, .. } => tape.upsample_nearest(cur, factor)?,
                    TicStep::Pool { to, .. } => tape.adaptive_maxpool2d(cur, to, to)?,
                };
            }
            out[b] = cur;
        }
        Ok(out)
    }

    /// Expands three fused `[T, 5, 5]` blocks back to the pyramid shapes.
    pub fn itc_forward(&self, tape: &mut Tape, blocks: &[Var; 3]) -> Result<[Var; 3]> {
        let mut out = [blocks[0]; 3];
        for (b, (&x, branch)) in blocks.iter().zip(&self.spec.branches).enumerate() {
            let shape = tape.shape(x).to_vec();
            let side = self.spec.token_side;
            if shape != [self.spec.token_channels, side, side] {
                return Err(Error::Build(format!(
                    "branch {} expects a [{}, {}, {}] block, got {:?}",
                    b, self.spec.token_channels, side, side, shape
                )));
            }
            let mut cur = x;
            let mut conv_idx = 0;
            for step in &branch.itc {
                cur = match *step {
                    ItcStep::ConvTranspose { .. } => {
                        let y = self.branches[b].itc_convs[conv_idx].forward(tape, cur)?;
                        conv_idx += 1;
                        y
                    }
                    ItcStep::Upsample { factor, .. } => tape.upsample_nearest(cur, factor)?,
                    ItcStep::Pool { to, .. } => tape.adaptive_maxpool2d(cur, to, to)?,
                };
            }
            out[b] = cur;
        }
        Ok(out)
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for branch in &self.branches {
            for conv in &branch.tic_convs {
                conv.visit(f);
            }
            for conv in &branch.itc_convs {
                conv.visit(f);
            }
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for branch in &mut self.branches {
            for conv in &mut branch.tic_convs {
                conv.visit_mut(f);
            }
            for conv in &mut branch.itc_convs {
                conv.visit_mut(f);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn full_scale_chains_match_the_reference_geometry() {
        let spec = BridgeSpec::build([19, 38, 76], [1024, 512, 256], 768).unwrap();

        let b1 = &spec.branches[0];
        assert_eq!(
            b1.tic,
            vec![
                TicStep::Conv { c_in: 1024, c_out: 768, kernel: 3, stride: 2, padding: 1, from: 19, to: 10 },
                TicStep::Pool { from: 10, to: 5 },
            ]
        );
        assert_eq!(
            b1.itc,
            vec![
                ItcStep::Upsample { factor: 2, from: 5, to: 10 },
                ItcStep::ConvTranspose {
                    c_in: 768,
                    c_out: 1024,
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                    output_padding: 0,
                    from: 10,
                    to: 19,
                },
            ]
        );

        let b2 = &spec.branches[1];
        assert_eq!(
            b2.tic,
            vec![
                TicStep::Conv { c_in: 512, c_out: 768, kernel: 3, stride: 2, padding: 1, from: 38, to: 19 },
                TicStep::Conv { c_in: 768, c_out: 768, kernel: 3, stride: 2, padding: 1, from: 19, to: 10 },
                TicStep::Pool { from: 10, to: 5 },
            ]
        );
        match b2.itc[2] {
            ItcStep::ConvTranspose { c_out, output_padding, to, .. } => {
                assert_eq!((c_out, output_padding, to), (512, 1, 38));
            }
            ref other => panic!("expected a transposed conv, got {:?}", other),
        }

        let b3 = &spec.branches[2];
        assert_eq!(
            b3.tic[0],
            TicStep::Conv { c_in: 256, c_out: 768, kernel: 5, stride: 4, padding: 2, from: 76, to: 19 }
        );
        match b3.itc[2] {
            ItcStep::ConvTranspose { kernel, stride, output_padding, to, .. } => {
                assert_eq!((kernel, stride, output_padding, to), (5, 4, 3, 76));
            }
            ref other => panic!("expected a transposed conv, got {:?}", other),
        }
    }

    #[test]
    fn tiny_maps_get_an_upsample_before_the_pool() {
        let spec = BridgeSpec::build([2, 4, 8], [64, 32, 16], 32).unwrap();
        let b1 = &spec.branches[0];
        assert_eq!(
            b1.tic,
            vec![
                TicStep::Conv { c_in: 64, c_out: 32, kernel: 3, stride: 2, padding: 1, from: 2, to: 1 },
                TicStep::Upsample { factor: 5, from: 1, to: 5 },
                TicStep::Pool { from: 5, to: 5 },
            ]
        );
        assert_eq!(
            b1.itc,
            vec![
                ItcStep::Upsample { factor: 1, from: 5, to: 5 },
                ItcStep::Pool { from: 5, to: 1 },
                ItcStep::ConvTranspose {
                    c_in: 32,
                    c_out: 64,
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                    output_padding: 1,
                    from: 1,
                    to: 2,
                },
            ]
        );
    }

    #[test]
    fn non_multiple_pool_inverts_through_an_oversized_upsample() {
        // A 7-wide map pools to 5; the mirror upsamples 5 -> 10 and pools
        // back down to 7.
        let spec = BridgeSpec::build([13, 4, 8], [8, 8, 8], 8).unwrap();
        let b1 = &spec.branches[0];
        assert_eq!(b1.tic.last(), Some(&TicStep::Pool { from: 7, to: 5 }));
        assert_eq!(b1.itc[0], ItcStep::Upsample { factor: 2, from: 5, to: 10 });
        assert_eq!(b1.itc[1], ItcStep::Pool { from: 10, to: 7 });
    }

    #[test]
    fn forward_round_trips_every_scale_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dims = [4, 8, 16];
        let channels = [24, 12, 6];
        let spec = BridgeSpec::build(dims, channels, 16).unwrap();
        let bridge = Bridge::new(&mut rng, "bridge", spec);
        let mut tape = Tape::new();
        let pyramid = PyramidVars {
            v1: tape.constant(&Tensor::full(vec![24, 4, 4], 0.1).unwrap()),
            v2: tape.constant(&Tensor::full(vec![12, 8, 8], 0.2).unwrap()),
            v3: tape.constant(&Tensor::full(vec![6, 16, 16], 0.3).unwrap()),
        };
        let blocks = bridge.tic_forward(&mut tape, &pyramid).unwrap();
        for &block in &blocks {
            assert_eq!(tape.shape(block), &[16, 5, 5]);
        }
        let restored = bridge.itc_forward(&mut tape, &blocks).unwrap();
        for (i, &v) in restored.iter().enumerate() {
            assert_eq!(tape.shape(v), &[channels[i], dims[i], dims[i]]);
        }
    }

    #[test]
    fn both_streams_bind_the_same_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = BridgeSpec::build([4, 8, 16], [8, 8, 8], 8).unwrap();
        let bridge = Bridge::new(&mut rng, "bridge", spec);
        let mut tape = Tape::new();
        let mk = |tape: &mut Tape, fill: f64| PyramidVars {
            v1: tape.constant(&Tensor::full(vec![8, 4, 4], fill).unwrap()),
            v2: tape.constant(&Tensor::full(vec![8, 8, 8], fill).unwrap()),
            v3: tape.constant(&Tensor::full(vec![8, 16, 16], fill).unwrap()),
        };
        let lr = mk(&mut tape, 0.1);
        let sr = mk(&mut tape, 0.9);
        bridge.tic_forward(&mut tape, &lr).unwrap();
        let count = tape.params().count();
        bridge.tic_forward(&mut tape, &sr).unwrap();
        assert_eq!(tape.params().count(), count);
    }

    #[test]
    fn wrong_input_shape_is_reported_with_the_branch() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = BridgeSpec::build([4, 8, 16], [8, 8, 8], 8).unwrap();
        let bridge = Bridge::new(&mut rng, "bridge", spec);
        let mut tape = Tape::new();
        let pyramid = PyramidVars {
            v1: tape.constant(&Tensor::zeros(vec![8, 5, 5]).unwrap()),
            v2: tape.constant(&Tensor::zeros(vec![8, 8, 8]).unwrap()),
            v3: tape.constant(&Tensor::zeros(vec![8, 16, 16]).unwrap()),
        };
        let err = bridge.tic_forward(&mut tape, &pyramid).unwrap_err();
        assert!(err.to_string().contains("branch 0"));
    }
}
