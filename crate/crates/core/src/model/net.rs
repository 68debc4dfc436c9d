//! Graph construction for the forward pass.

use std::rc::Rc;

use super::{EncoderKind, ModelConfig, Params};
use crate::dataset::{stack_input, CaseBundle, InputSelection, InputStack};
use crate::error::{Error, Result};
use crate::loss::{composite_loss_grad, LossBreakdown, LossCase, LossWeights};
use crate::real::Real;
use crate::tape::{Tape, Var, WindowPlan, NO_ROW};
use crate::volume::{voxel_count, Dims};
use crate::warp::Dvf;

/// One pyramid level: token grid, channel width and the `[tokens, dim]` node.
#[derive(Debug, Clone, Copy)]
pub struct Stage {
    pub grid: Dims,
    pub dim: usize,
    pub tokens: Var,
}

/// Handles to the interesting nodes of one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    /// `[3, voxels]`, rows `dx, dy, dz` in voxel units.
    pub dvf: Var,
    pub embed: Var,
    pub stages: Vec<Stage>,
    pub conv_full: Var,
    pub conv_half: Var,
    pub attention: Vec<Var>,
}

struct Builder<'a, T: Real> {
    tape: &'a mut Tape<T>,
    params: &'a Params<T>,
    leaves: Vec<Option<Var>>,
    attention: Vec<Var>,
}

impl<T: Real> Builder<'_, T> {
    fn p(&mut self, name: &str) -> Var {
        let id = self
            .params
            .id(name)
            .unwrap_or_else(|| panic!("parameter {name} missing from the parameter set"));
        if let Some(v) = self.leaves[id] {
            return v;
        }
        let s = &self.params.specs[id];
        let v = self
            .tape
            .param(id, self.params.values[id].clone(), s.rows, s.cols);
        self.leaves[id] = Some(v);
        v
    }

    fn linear(&mut self, x: Var, prefix: &str) -> Var {
        let w = self.p(&format!("{prefix}.w"));
        let b = self.p(&format!("{prefix}.b"));
        self.tape.linear(x, w, Some(b))
    }

    fn norm(&mut self, x: Var, prefix: &str) -> Var {
        let g = self.p(&format!("{prefix}.g"));
        let b = self.p(&format!("{prefix}.b"));
        self.tape.layer_norm(x, g, b)
    }

    fn conv(&mut self, x: Var, dims: Dims, prefix: &str, stride: usize) -> Var {
        let w = self.p(&format!("{prefix}.w"));
        let b = self.p(&format!("{prefix}.b"));
        self.tape.conv3d(x, dims, w, b, stride)
    }

    fn conv_act(&mut self, x: Var, dims: Dims, prefix: &str, stride: usize) -> Var {
        let y = self.conv(x, dims, prefix, stride);
        self.tape.leaky_relu(y)
    }

    /// Pre-norm attention block followed by a pre-norm MLP block.
    fn block(
        &mut self,
        x: Var,
        prefix: &str,
        plan: Rc<WindowPlan>,
        heads: usize,
        with_bias: bool,
    ) -> Var {
        let h = self.norm(x, &format!("{prefix}.norm1"));
        let qkv = self.linear(h, &format!("{prefix}.attn.qkv"));
        let bias = with_bias.then(|| self.p(&format!("{prefix}.attn.bias_table")));
        let a = self.tape.window_attention(qkv, bias, plan, heads);
        self.attention.push(a);
        let a = self.linear(a, &format!("{prefix}.attn.proj"));
        let x = self.tape.add(x, a);
        let h = self.norm(x, &format!("{prefix}.norm2"));
        let h = self.linear(h, &format!("{prefix}.mlp.fc1"));
        let h = self.tape.gelu(h);
        let h = self.linear(h, &format!("{prefix}.mlp.fc2"));
        self.tape.add(x, h)
    }
}

/// Gather indices turning voxel rows into patch rows: for every token, the
/// `px*py*pz` voxels of its patch, x fastest.
pub fn patch_embed_indices(dims: Dims, patch: Dims) -> Vec<u32> {
    let g: Dims = [0, 1, 2].map(|a| dims[a] / patch[a]);
    let mut idx = Vec::with_capacity(voxel_count(dims));
    for tz in 0..g[2] {
        for ty in 0..g[1] {
            for tx in 0..g[0] {
                for lz in 0..patch[2] {
                    for ly in 0..patch[1] {
                        for lx in 0..patch[0] {
                            let (x, y, z) =
                                (tx * patch[0] + lx, ty * patch[1] + ly, tz * patch[2] + lz);
                            idx.push((x + dims[0] * (y + dims[1] * z)) as u32);
                        }
                    }
                }
            }
        }
    }
    idx
}

/// Neighbourhood gather over `factor`-sized blocks, rounding the output grid
/// up. Positions outside the source grid read [`NO_ROW`]. Returns indices,
/// per-entry averaging weights (over valid entries) and the output grid.
fn block_indices<T: Real>(grid: Dims, factor: Dims) -> (Vec<u32>, Vec<T>, Dims) {
    let out: Dims = [0, 1, 2].map(|a| grid[a].div_ceil(factor[a]));
    let taps: usize = factor.iter().product();
    let mut idx = Vec::with_capacity(voxel_count(out) * taps);
    let mut weights = Vec::with_capacity(voxel_count(out) * taps);
    for oz in 0..out[2] {
        for oy in 0..out[1] {
            for ox in 0..out[0] {
                let start = idx.len();
                for lz in 0..factor[2] {
                    for ly in 0..factor[1] {
                        for lx in 0..factor[0] {
                            let (x, y, z) = (
                                ox * factor[0] + lx,
                                oy * factor[1] + ly,
                                oz * factor[2] + lz,
                            );
                            if x < grid[0] && y < grid[1] && z < grid[2] {
                                idx.push((x + grid[0] * (y + grid[1] * z)) as u32);
                            } else {
                                idx.push(NO_ROW);
                            }
                        }
                    }
                }
                let valid = idx[start..].iter().filter(|&&i| i != NO_ROW).count();
                let w = T::one() / T::c(valid as f64);
                weights.extend(
                    idx[start..]
                        .iter()
                        .map(|&i| if i == NO_ROW { T::zero() } else { w }),
                );
            }
        }
    }
    (idx, weights, out)
}

fn check_input<T: Real>(cfg: &ModelConfig, params: &Params<T>, input: &[T]) -> Result<()> {
    cfg.validate()?;
    let n = voxel_count(cfg.input_shape);
    if input.len() != cfg.in_channels * n {
        return Err(Error::Shape(format!(
            "input has {} values, expected {} channels on {:?}",
            input.len(),
            cfg.in_channels,
            cfg.input_shape
        )));
    }
    let specs = super::param_specs(cfg)?;
    if specs.len() != params.specs.len()
        || specs
            .iter()
            .zip(&params.specs)
            .any(|(a, b)| a.name != b.name || a.rows != b.rows || a.cols != b.cols)
    {
        return Err(Error::Invalid(
            "parameters do not match the model configuration".into(),
        ));
    }
    Ok(())
}

/// Records the network on `tape` for a channel-first `[7, voxels]` input.
pub fn forward_tape<T: Real>(
    tape: &mut Tape<T>,
    params: &Params<T>,
    cfg: &ModelConfig,
    input: &[T],
) -> Result<Forward> {
    check_input(cfg, params, input)?;
    let dims = cfg.input_shape;
    let n = voxel_count(dims);
    let mut b = Builder {
        tape,
        params,
        leaves: vec![None; params.len()],
        attention: Vec::new(),
    };
    let x = b.tape.input(input.to_vec(), cfg.in_channels, n);
    let xt = b.tape.transpose(x);

    // Patch embedding.
    let taps: usize = cfg.patch_size.iter().product();
    let idx = Rc::new(patch_embed_indices(dims, cfg.patch_size));
    let patches = b.tape.gather(xt, idx, taps, None);
    let t = b.linear(patches, "embed.proj");
    let embed = b.norm(t, "embed.norm");

    let grids = cfg.stage_grids();
    let stages = match cfg.encoder_kind {
        EncoderKind::SwinHierarchical => swin_encoder(&mut b, cfg, embed, &grids),
        EncoderKind::PlainViT => vit_encoder(&mut b, cfg, embed, &grids),
        EncoderKind::ConvPyramid => cnn_encoder(&mut b, cfg, embed, &grids),
    };

    // Convolutional features straight from the input.
    let conv_full = b.conv_act(x, dims, "conv.full", 1);
    let (pidx, pw, half) = block_indices::<T>(dims, [2, 2, 2]);
    debug_assert_eq!(half, cfg.half_grid());
    let pooled = b.tape.gather(xt, Rc::new(pidx), 8, Some(Rc::new(pw)));
    let pooled = b.tape.transpose(pooled);
    let conv_half = b.conv_act(pooled, half, "conv.half", 1);

    // Decoder.
    let last = stages.len() - 1;
    let mut y = b.tape.transpose(stages[last].tokens);
    let mut ydims = stages[last].grid;
    for s in (0..last).rev() {
        let up = b.tape.upsample(y, ydims, stages[s].grid);
        let skip = b.tape.transpose(stages[s].tokens);
        let cat = b.tape.concat(up, skip);
        ydims = stages[s].grid;
        let h = b.conv_act(cat, ydims, &format!("dec.stage{s}.conv1"), 1);
        y = b.conv_act(h, ydims, &format!("dec.stage{s}.conv2"), 1);
    }
    let up = b.tape.upsample(y, ydims, half);
    let cat = b.tape.concat(up, conv_half);
    let h = b.conv_act(cat, half, "dec.half.conv1", 1);
    let y = b.conv_act(h, half, "dec.half.conv2", 1);
    let up = b.tape.upsample(y, half, dims);
    let cat = b.tape.concat(up, conv_full);
    let h = b.conv_act(cat, dims, "dec.full.conv1", 1);
    let y = b.conv_act(h, dims, "dec.full.conv2", 1);
    let dvf = b.conv(y, dims, "head", 1);

    Ok(Forward {
        dvf,
        embed,
        stages,
        conv_full,
        conv_half,
        attention: b.attention,
    })
}

fn swin_encoder<T: Real>(
    b: &mut Builder<'_, T>,
    cfg: &ModelConfig,
    embed: Var,
    grids: &[Dims],
) -> Vec<Stage> {
    let mut x = embed;
    let mut stages = Vec::with_capacity(cfg.stages());
    for s in 0..cfg.stages() {
        let grid = grids[s];
        let dim = cfg.stage_dim(s);
        for k in 0..cfg.depths[s] {
            let plan = Rc::new(WindowPlan::new(grid, cfg.window, k % 2 == 1, true));
            x = b.block(x, &format!("stage{s}.block{k}"), plan, cfg.heads[s], true);
        }
        stages.push(Stage {
            grid,
            dim,
            tokens: x,
        });
        if s + 1 < cfg.stages() {
            let (idx, _, out) = block_indices::<T>(grid, [2, 2, 2]);
            debug_assert_eq!(out, grids[s + 1]);
            let m = b.tape.gather(x, Rc::new(idx), 8, None);
            let m = b.norm(m, &format!("merge{s}.norm"));
            x = b.linear(m, &format!("merge{s}.reduce"));
        }
    }
    stages
}

fn vit_encoder<T: Real>(
    b: &mut Builder<'_, T>,
    cfg: &ModelConfig,
    embed: Var,
    grids: &[Dims],
) -> Vec<Stage> {
    let pos = b.p("vit.pos");
    let mut x = b.tape.add(embed, pos);
    let plan = Rc::new(WindowPlan::global(grids[0]));
    let total: usize = cfg.depths.iter().sum();
    for k in 0..total {
        x = b.block(
            x,
            &format!("vit.block{k}"),
            plan.clone(),
            cfg.heads[0],
            false,
        );
    }
    (0..cfg.stages())
        .map(|s| {
            let f = 1usize << s;
            let pooled = if s == 0 {
                x
            } else {
                let (idx, w, out) = block_indices::<T>(grids[0], [f, f, f]);
                debug_assert_eq!(out, grids[s]);
                b.tape.gather(x, Rc::new(idx), f * f * f, Some(Rc::new(w)))
            };
            let tokens = b.linear(pooled, &format!("vit.proj{s}"));
            Stage {
                grid: grids[s],
                dim: cfg.stage_dim(s),
                tokens,
            }
        })
        .collect()
}

fn cnn_encoder<T: Real>(
    b: &mut Builder<'_, T>,
    cfg: &ModelConfig,
    embed: Var,
    grids: &[Dims],
) -> Vec<Stage> {
    let mut y = b.tape.transpose(embed);
    let mut stages = Vec::with_capacity(cfg.stages());
    for s in 0..cfg.stages() {
        if s > 0 {
            y = b.conv_act(y, grids[s - 1], &format!("cnn.stage{s}.down"), 2);
        }
        y = b.conv_act(y, grids[s], &format!("cnn.stage{s}.conv1"), 1);
        y = b.conv_act(y, grids[s], &format!("cnn.stage{s}.conv2"), 1);
        let tokens = b.tape.transpose(y);
        stages.push(Stage {
            grid: grids[s],
            dim: cfg.stage_dim(s),
            tokens,
        });
    }
    stages
}

fn input_values<T: Real>(stack: &InputStack) -> Vec<T> {
    stack.data.iter().map(|&v| T::c(v as f64)).collect()
}

/// Predicts the displacement field for a stacked input.
pub fn forward(
    stack: &InputStack,
    params: &Params<f32>,
    cfg: &ModelConfig,
    spacing_mm: [f64; 3],
) -> Result<Dvf> {
    if stack.dims != cfg.input_shape {
        return Err(Error::Shape(format!(
            "input grid {:?} differs from the model grid {:?}",
            stack.dims, cfg.input_shape
        )));
    }
    let mut tape = Tape::new();
    let f = forward_tape(&mut tape, params, cfg, &input_values::<f32>(stack))?;
    let disp = tape.value(f.dvf).to_vec();
    let dvf = Dvf {
        disp,
        dims: stack.dims,
        spacing_mm,
    };
    dvf.check_finite()?;
    Ok(dvf)
}

/// Composite loss of one case and its gradient for every parameter
/// (zeros for parameters the pass does not touch).
pub fn gradient<T: Real>(
    case: &CaseBundle,
    sel: &InputSelection,
    params: &Params<T>,
    cfg: &ModelConfig,
    weights: &LossWeights,
) -> Result<(LossBreakdown, Vec<Vec<T>>)> {
    let stack = stack_input(case, sel)?;
    let loss_case = LossCase::<T>::from_bundle(case, sel)?;
    gradient_prepared(&input_values::<T>(&stack), &loss_case, params, cfg, weights)
}

pub(crate) fn gradient_prepared<T: Real>(
    input: &[T],
    loss_case: &LossCase<T>,
    params: &Params<T>,
    cfg: &ModelConfig,
    weights: &LossWeights,
) -> Result<(LossBreakdown, Vec<Vec<T>>)> {
    if loss_case.dims != cfg.input_shape {
        return Err(Error::Shape(format!(
            "case grid {:?} differs from the model grid {:?}",
            loss_case.dims, cfg.input_shape
        )));
    }
    let mut tape = Tape::new();
    let f = forward_tape(&mut tape, params, cfg, input)?;
    let disp = tape.value(f.dvf);
    if disp.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("predicted displacement field".into()));
    }
    let (breakdown, seed) = composite_loss_grad(loss_case, disp, weights, true)?;
    if !breakdown.total.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    let grads = tape.backward(f.dvf, seed, params.len());
    let grads = grads
        .into_iter()
        .zip(&params.values)
        .map(|(g, v)| g.unwrap_or_else(|| vec![T::zero(); v.len()]))
        .collect();
    Ok((breakdown, grads))
}
