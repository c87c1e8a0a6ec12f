//! Contour deformation network: per-vertex features, eight residual
//! circular-convolution blocks, a global fusion feature and a 1×1 offset
//! head, applied iteratively to an initial contour.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Contour;
use crate::losses::contours_to_rows;
use crate::nn::{BatchNorm, Builder, Ctx, RingConv};
use crate::tensor::{ParamStore, Real, SampleGroup, Tensor, Var};

/// Prefix of every contour-network parameter name.
pub const SNAKE_PREFIX: &str = "snake";
pub const SNAKE_BLOCKS: usize = 8;
pub const SNAKE_KERNEL: usize = 9;
pub const DEFAULT_ITERATIONS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnakeConfig {
    /// Sampled feature channels `D`; the network sees `D + 2` inputs.
    pub feature_channels: usize,
    pub width: usize,
    pub fusion_width: usize,
    /// Hidden widths of the first two head layers.
    pub head_widths: [usize; 2],
    pub iterations: usize,
}

impl SnakeConfig {
    pub fn new(feature_channels: usize) -> Self {
        Self { feature_channels, width: 128, fusion_width: 256, head_widths: [256, 64], iterations: DEFAULT_ITERATIONS }
    }
}

#[derive(Clone, Debug)]
struct Block {
    conv: RingConv,
    bn: BatchNorm,
    /// 1×1 projection of the skip path; present on the first block only.
    proj: Option<RingConv>,
}

#[derive(Clone, Debug)]
pub struct SnakeNetwork {
    pub config: SnakeConfig,
    blocks: Vec<Block>,
    fusion: RingConv,
    head: [RingConv; 3],
}

impl SnakeNetwork {
    /// Registers the network's parameters in `store`. The last head layer
    /// starts at zero, so an untrained network predicts no deformation.
    pub fn build<T: Real>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, config: SnakeConfig) -> Result<Self> {
        if config.iterations == 0 || config.width == 0 || config.fusion_width == 0 {
            return Err(Error::contract(format!("invalid contour network config {config:?}")));
        }
        let mut b = Builder::new(store, rng);
        let p = SNAKE_PREFIX;
        let input = config.feature_channels + 2;
        let w = config.width;
        let mut blocks = Vec::with_capacity(SNAKE_BLOCKS);
        for i in 0..SNAKE_BLOCKS {
            let cin = if i == 0 { input } else { w };
            blocks.push(Block {
                conv: RingConv::build(&mut b, &format!("{p}.block{i}.conv"), cin, w, SNAKE_KERNEL, false)?,
                bn: BatchNorm::build(&mut b, &format!("{p}.block{i}.bn"), w)?,
                proj: if i == 0 { Some(RingConv::build(&mut b, &format!("{p}.block{i}.proj"), cin, w, 1, false)?) } else { None },
            });
        }
        let fusion = RingConv::build(&mut b, &format!("{p}.fusion"), SNAKE_BLOCKS * w, config.fusion_width, 1, true)?;
        let [h0, h1] = config.head_widths;
        let head_in = SNAKE_BLOCKS * w + config.fusion_width;
        let head = [
            RingConv::build(&mut b, &format!("{p}.head0"), head_in, h0, 1, true)?,
            RingConv::build(&mut b, &format!("{p}.head1"), h0, h1, 1, true)?,
            RingConv {
                weight: b.filled(&format!("{p}.head2.weight"), vec![2, h1, 1], 0.0, true)?,
                bias: Some(b.filled(&format!("{p}.head2.bias"), vec![2], 0.0, true)?),
            },
        ];
        Ok(Self { config, blocks, fusion, head })
    }

    pub fn input_channels(&self) -> usize {
        self.config.feature_channels + 2
    }
}

/// Samples `fm: [B,D,h,w]` at every vertex (`vertex / stride`) and appends
/// the vertex coordinates centered on the contour's vertex mean and divided
/// by its larger bounding-box side. Returns `[I, D+2, N]`.
pub fn build_vertex_features<T: Real>(
    ctx: &mut Ctx<T>,
    fm: Var,
    contours: &[(usize, &Contour)],
    stride: f64,
) -> Result<Var> {
    let n = contours.first().map_or(0, |(_, c)| c.len());
    if contours.iter().any(|(_, c)| c.len() != n) {
        return Err(Error::contract("contours in one batch must share a vertex count"));
    }
    let groups: Vec<SampleGroup> = contours
        .iter()
        .map(|(b, c)| SampleGroup { batch: *b, points: c.vertices.iter().map(|v| [v[0] / stride, v[1] / stride]).collect() })
        .collect();
    let sampled = ctx.g.bilinear_sample(fm, &groups)?;
    let mut coords = Vec::with_capacity(contours.len() * 2 * n);
    for (_, c) in contours {
        let [mx, my] = c.vertex_mean();
        let [x0, y0, x1, y1] = c.bounds();
        let extent = (x1 - x0).max(y1 - y0).max(1.0);
        coords.extend(c.vertices.iter().map(|v| T::of((v[0] - mx) / extent)));
        coords.extend(c.vertices.iter().map(|v| T::of((v[1] - my) / extent)));
    }
    let coords = ctx.g.constant(vec![contours.len(), 2, n], coords)?;
    ctx.g.concat(&[sampled, coords])
}

/// Per-vertex offsets `[I, 2, N]` in input pixels for features `[I, D+2, N]`.
pub fn gcn_forward<T: Real>(ctx: &mut Ctx<T>, net: &SnakeNetwork, vf: Var) -> Result<Var> {
    let s = ctx.g.shape(vf).to_vec();
    if s.len() != 3 || s[1] != net.input_channels() {
        return Err(Error::contract(format!(
            "contour network expects [I, {}, N] features, got {s:?}",
            net.input_channels()
        )));
    }
    let n = s[2];
    let mut x = vf;
    let mut states = Vec::with_capacity(SNAKE_BLOCKS);
    for block in &net.blocks {
        let y = block.conv.forward(ctx, x)?;
        let y = block.bn.forward(ctx, y)?;
        let y = ctx.g.relu(y);
        let skip = match &block.proj {
            Some(p) => p.forward(ctx, x)?,
            None => x,
        };
        x = ctx.g.add(y, skip)?;
        states.push(x);
    }
    let state = ctx.g.concat(&states)?;
    let fused = net.fusion.forward(ctx, state)?;
    let global = ctx.g.vertex_max(fused)?;
    let global = ctx.g.broadcast_last(global, n)?;
    let h = ctx.g.concat(&[state, global])?;
    let h = net.head[0].forward(ctx, h)?;
    let h = ctx.g.relu(h);
    let h = net.head[1].forward(ctx, h)?;
    let h = ctx.g.relu(h);
    net.head[2].forward(ctx, h)
}

/// Output of [`deform`].
pub struct Deformation {
    /// `[I, 2, N]` vertex positions after each iteration, differentiable
    /// with respect to that iteration's offsets.
    pub iterations: Vec<Var>,
    /// Final contours, in input order.
    pub contours: Vec<Contour>,
}

/// Runs `iterations` deformation steps from `initial` contours (each paired
/// with its batch index in `fm`). Each step starts from the detached result
/// of the previous one.
pub fn deform<T: Real>(
    ctx: &mut Ctx<T>,
    net: &SnakeNetwork,
    fm: Var,
    initial: &[(usize, Contour)],
    iterations: usize,
    stride: f64,
) -> Result<Deformation> {
    if iterations == 0 {
        return Err(Error::contract("deformation needs at least one iteration"));
    }
    let mut current: Vec<(usize, Contour)> = initial.to_vec();
    let mut outs = Vec::with_capacity(iterations);
    if current.is_empty() {
        return Ok(Deformation { iterations: outs, contours: Vec::new() });
    }
    let n = current[0].1.len();
    for it in 0..iterations {
        let refs: Vec<(usize, &Contour)> = current.iter().map(|(b, c)| (*b, c)).collect();
        let vf = build_vertex_features(ctx, fm, &refs, stride)?;
        let offsets = gcn_forward(ctx, net, vf)?;
        if let Some(i) = ctx.g.data(offsets).iter().position(|v| !v.as_f64().is_finite()) {
            return Err(Error::NonFinite { what: format!("contour offsets of iteration {it}"), index: i });
        }
        let rows: Vec<T> =
            contours_to_rows(&refs.iter().map(|(_, c)| *c).collect::<Vec<_>>()).into_iter().map(T::of).collect();
        let base = ctx.g.leaf(Tensor::new(vec![current.len(), 2, n], rows)?);
        let moved = ctx.g.add(base, offsets)?;
        let values = ctx.g.data(moved);
        for (k, (_, c)) in current.iter_mut().enumerate() {
            let row = &values[k * 2 * n..(k + 1) * 2 * n];
            for (i, v) in c.vertices.iter_mut().enumerate() {
                *v = [row[i].as_f64(), row[n + i].as_f64()];
            }
        }
        outs.push(moved);
    }
    Ok(Deformation { iterations: outs, contours: current.into_iter().map(|(_, c)| c).collect() })
}
