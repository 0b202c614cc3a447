//! Multi-referenced deformable cross-attention at toy scale.
//!
//! Every anchor-chain node is a reference point. Each head samples `K` points
//! around every node (node + learned offset) from a single-level feature map
//! and mixes them with softmax weights taken over all `N * K` samples of that
//! head. The output is the mean over heads. Value and output projections are
//! left out, so the kernel is exactly the sampling and weighting step.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{AnchorChain, CoordinateSpace, Point2};
use crate::gradcheck::{central_difference_check, GradcheckReport};

pub const DEFAULT_HEADS: usize = 8;
pub const DEFAULT_POINTS_PER_REF: usize = 4;

/// Row-major, channel-last feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::DimensionMismatch(format!(
                "feature map dimensions must be >= 1, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::LengthMismatch {
                expected: height * width * channels,
                actual: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, channels, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn texel(&self, x: usize, y: usize) -> &[f64] {
        let start = (y * self.width + x) * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn min_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Texel cell a sample falls in; `None` outside the map.
pub(crate) type SampleCell = Option<(usize, usize)>;

struct BilinearTap {
    cell: SampleCell,
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: f64,
    fy: f64,
    /// d(pixel x)/d(normalized x)
    sx: f64,
    sy: f64,
}

fn axis_tap(coord: f64, size: usize) -> (usize, usize, f64, f64) {
    if size == 1 {
        return (0, 0, 0.0, 0.0);
    }
    let scale = (size - 1) as f64;
    let p = coord * scale;
    let i0 = (p.floor() as usize).min(size - 2);
    (i0, i0 + 1, p - i0 as f64, scale)
}

fn tap(map: &FeatureMap, xy: Point2) -> Option<BilinearTap> {
    if !(0.0..=1.0).contains(&xy.x) || !(0.0..=1.0).contains(&xy.y) {
        return None;
    }
    let (x0, x1, fx, sx) = axis_tap(xy.x, map.width);
    let (y0, y1, fy, sy) = axis_tap(xy.y, map.height);
    Some(BilinearTap {
        cell: Some((x0, y0)),
        x0,
        x1,
        y0,
        y1,
        fx,
        fy,
        sx,
        sy,
    })
}

pub(crate) fn sample_cell(map: &FeatureMap, xy: Point2) -> SampleCell {
    tap(map, xy).and_then(|t| t.cell)
}

/// Bilinear sample at normalized `xy`, where `(0, 0)` is the first texel and
/// `(1, 1)` the last. Points outside the unit square read as zero.
pub fn bilinear_sample(map: &FeatureMap, xy: Point2) -> Vec<f64> {
    let mut out = vec![0.0; map.channels];
    if let Some(t) = tap(map, xy) {
        accumulate_sample(map, &t, 1.0, &mut out);
    }
    out
}

fn accumulate_sample(map: &FeatureMap, t: &BilinearTap, weight: f64, out: &mut [f64]) {
    let w00 = (1.0 - t.fx) * (1.0 - t.fy);
    let w10 = t.fx * (1.0 - t.fy);
    let w01 = (1.0 - t.fx) * t.fy;
    let w11 = t.fx * t.fy;
    let (v00, v10) = (map.texel(t.x0, t.y0), map.texel(t.x1, t.y0));
    let (v01, v11) = (map.texel(t.x0, t.y1), map.texel(t.x1, t.y1));
    for c in 0..map.channels {
        out[c] += weight * (w00 * v00[c] + w10 * v10[c] + w01 * v01[c] + w11 * v11[c]);
    }
}

/// `probe . sample(xy)` and its derivative with respect to normalized `xy`.
fn probed_sample_grad(map: &FeatureMap, xy: Point2, probe: &[f64]) -> (f64, Point2) {
    let Some(t) = tap(map, xy) else {
        return (0.0, Point2::default());
    };
    let (v00, v10) = (map.texel(t.x0, t.y0), map.texel(t.x1, t.y0));
    let (v01, v11) = (map.texel(t.x0, t.y1), map.texel(t.x1, t.y1));
    let (mut value, mut dx, mut dy) = (0.0, 0.0, 0.0);
    for c in 0..map.channels {
        let g = probe[c];
        value += g
            * ((1.0 - t.fx) * (1.0 - t.fy) * v00[c]
                + t.fx * (1.0 - t.fy) * v10[c]
                + (1.0 - t.fx) * t.fy * v01[c]
                + t.fx * t.fy * v11[c]);
        dx += g * ((1.0 - t.fy) * (v10[c] - v00[c]) + t.fy * (v11[c] - v01[c]));
        dy += g * ((1.0 - t.fx) * (v01[c] - v00[c]) + t.fx * (v11[c] - v10[c]));
    }
    (value, Point2::new(dx * t.sx, dy * t.sy))
}

/// Per-query sampling parameters: `offsets` is `[H][N][K][2]` in normalized
/// image units and `attn_logits` is `[H][N][K]`, both flattened row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MrdaParams {
    pub heads: usize,
    pub points_per_ref: usize,
    pub offsets: Vec<f64>,
    pub attn_logits: Vec<f64>,
}

impl MrdaParams {
    pub fn zeros(heads: usize, points_per_ref: usize, nodes: usize) -> Self {
        Self {
            heads,
            points_per_ref,
            offsets: vec![0.0; heads * nodes * points_per_ref * 2],
            attn_logits: vec![0.0; heads * nodes * points_per_ref],
        }
    }

    fn validate(&self, nodes: usize) -> Result<()> {
        if self.heads == 0 || self.points_per_ref == 0 {
            return Err(Error::DimensionMismatch(format!(
                "heads and points_per_ref must be >= 1, got {} and {}",
                self.heads, self.points_per_ref
            )));
        }
        let samples = self.heads * nodes * self.points_per_ref;
        if self.offsets.len() != samples * 2 {
            return Err(Error::DimensionMismatch(format!(
                "offsets: expected {} values for {} heads x {} nodes x {} points, got {}",
                samples * 2,
                self.heads,
                nodes,
                self.points_per_ref,
                self.offsets.len()
            )));
        }
        if self.attn_logits.len() != samples {
            return Err(Error::DimensionMismatch(format!(
                "attn_logits: expected {samples} values, got {}",
                self.attn_logits.len()
            )));
        }
        if self.offsets.iter().chain(&self.attn_logits).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite sampling parameter".into()));
        }
        Ok(())
    }
}

/// Content embedding plus normalized anchor-chain of one decoder query.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryState {
    pub embedding: Vec<f64>,
    pub chain: AnchorChain,
}

fn check_inputs(query: &QueryState, map: &FeatureMap, params: &MrdaParams) -> Result<()> {
    if query.chain.space() != CoordinateSpace::Normalized {
        return Err(Error::InvalidParameter("query anchor-chain must be normalized".into()));
    }
    if query.embedding.len() != map.channels {
        return Err(Error::DimensionMismatch(format!(
            "embedding has {} channels, feature map has {}",
            query.embedding.len(),
            map.channels
        )));
    }
    params.validate(query.chain.len())
}

/// Softmax of each head's `N * K` logits.
pub fn attention_weights(params: &MrdaParams, nodes: usize) -> Vec<f64> {
    let per_head = nodes * params.points_per_ref;
    let mut out = Vec::with_capacity(params.attn_logits.len());
    for logits in params.attn_logits.chunks(per_head) {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / sum));
    }
    out
}

fn sample_position(chain: &AnchorChain, params: &MrdaParams, index: usize) -> Point2 {
    let n = (index / params.points_per_ref) % chain.len();
    let node = chain.nodes()[n];
    Point2::new(node.x + params.offsets[2 * index], node.y + params.offsets[2 * index + 1])
}

pub fn mrda_forward(query: &QueryState, map: &FeatureMap, params: &MrdaParams) -> Result<Vec<f64>> {
    check_inputs(query, map, params)?;
    let weights = attention_weights(params, query.chain.len());
    let mut out = vec![0.0; map.channels];
    let per_head = query.chain.len() * params.points_per_ref;
    for h in 0..params.heads {
        let mut head_out = vec![0.0; map.channels];
        for i in h * per_head..(h + 1) * per_head {
            if let Some(t) = tap(map, sample_position(&query.chain, params, i)) {
                accumulate_sample(map, &t, weights[i], &mut head_out);
            }
        }
        for (o, v) in out.iter_mut().zip(head_out) {
            *o += v;
        }
    }
    let inv = 1.0 / params.heads as f64;
    out.iter_mut().for_each(|v| *v *= inv);
    Ok(out)
}

/// Gradients of `probe . mrda_forward(..)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MrdaGrads {
    pub value: f64,
    pub nodes: Vec<Point2>,
    pub offsets: Vec<f64>,
    pub attn_logits: Vec<f64>,
}

pub fn mrda_backward(
    query: &QueryState,
    map: &FeatureMap,
    params: &MrdaParams,
    probe: &[f64],
) -> Result<MrdaGrads> {
    check_inputs(query, map, params)?;
    if probe.len() != map.channels {
        return Err(Error::DimensionMismatch(format!(
            "probe has {} channels, feature map has {}",
            probe.len(),
            map.channels
        )));
    }
    let n_nodes = query.chain.len();
    let weights = attention_weights(params, n_nodes);
    let inv_heads = 1.0 / params.heads as f64;
    let per_head = n_nodes * params.points_per_ref;

    let mut nodes = vec![Point2::default(); n_nodes];
    let mut offsets = vec![0.0; params.offsets.len()];
    let mut attn_logits = vec![0.0; params.attn_logits.len()];
    let mut value = 0.0;
    let mut d_weight = vec![0.0; per_head];
    for h in 0..params.heads {
        let base = h * per_head;
        for j in 0..per_head {
            let i = base + j;
            let (s, ds) = probed_sample_grad(map, sample_position(&query.chain, params, i), probe);
            value += inv_heads * weights[i] * s;
            d_weight[j] = inv_heads * s;
            let scale = inv_heads * weights[i];
            offsets[2 * i] = scale * ds.x;
            offsets[2 * i + 1] = scale * ds.y;
            let n = j / params.points_per_ref;
            nodes[n].x += scale * ds.x;
            nodes[n].y += scale * ds.y;
        }
        let mean: f64 = (0..per_head).map(|j| weights[base + j] * d_weight[j]).sum();
        for j in 0..per_head {
            attn_logits[base + j] = weights[base + j] * (d_weight[j] - mean);
        }
    }
    Ok(MrdaGrads {
        value,
        nodes,
        offsets,
        attn_logits,
    })
}

/// Step sizes for central differences: positions in normalized units, logits
/// in raw units.
const POSITION_STEP: f64 = 1e-4;
const LOGIT_STEP: f64 = 1e-5;
const PROBE_SEED: u64 = 0x6d72_6461;

/// Fixed pseudo-random probe used to reduce the output to a scalar.
pub fn gradcheck_probe(channels: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(PROBE_SEED);
    (0..channels).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Compares analytic gradients of `probe . output` with central differences
/// for the node, offset and logit groups. A component is skipped when its
/// perturbation moves any sample into a different texel cell, where the
/// bilinear surface has a kink.
pub fn mrda_gradcheck(
    query: &QueryState,
    map: &FeatureMap,
    params: &MrdaParams,
) -> Result<GradcheckReport> {
    let probe = gradcheck_probe(map.channels);
    let analytic = mrda_backward(query, map, params, &probe)?;
    let n_nodes = query.chain.len();
    let objective = |nodes: &[Point2], p: &MrdaParams| -> f64 {
        let q = QueryState {
            embedding: query.embedding.clone(),
            chain: raw_chain(nodes),
        };
        let out = mrda_forward(&q, map, p).expect("validated dimensions");
        out.iter().zip(&probe).map(|(o, g)| o * g).sum()
    };
    let cells = |nodes: &[Point2], p: &MrdaParams| -> Vec<SampleCell> {
        let chain = raw_chain(nodes);
        (0..p.attn_logits.len())
            .map(|i| sample_cell(map, sample_position(&chain, p, i)))
            .collect()
    };
    let base_nodes: Vec<Point2> = query.chain.nodes().to_vec();

    let mut node_flat: Vec<f64> = base_nodes.iter().flat_map(|p| [p.x, p.y]).collect();
    let node_analytic: Vec<f64> = analytic.nodes.iter().flat_map(|p| [p.x, p.y]).collect();
    let nodes_group = central_difference_check(
        "mrda_nodes",
        &mut node_flat,
        &node_analytic,
        POSITION_STEP,
        |x| objective(&unflatten(x), params),
        |x| cells(&unflatten(x), params),
    );

    let mut offsets = params.offsets.clone();
    let offsets_group = central_difference_check(
        "mrda_offsets",
        &mut offsets,
        &analytic.offsets,
        POSITION_STEP,
        |x| {
            let p = MrdaParams {
                offsets: x.to_vec(),
                ..params.clone()
            };
            objective(&base_nodes, &p)
        },
        |x| {
            let p = MrdaParams {
                offsets: x.to_vec(),
                ..params.clone()
            };
            cells(&base_nodes, &p)
        },
    );

    let mut logits = params.attn_logits.clone();
    let logits_group = central_difference_check(
        "mrda_logits",
        &mut logits,
        &analytic.attn_logits,
        LOGIT_STEP,
        |x| {
            let p = MrdaParams {
                attn_logits: x.to_vec(),
                ..params.clone()
            };
            objective(&base_nodes, &p)
        },
        |_| Vec::<SampleCell>::new(),
    );
    debug_assert_eq!(node_analytic.len(), 2 * n_nodes);
    Ok(GradcheckReport {
        groups: vec![nodes_group, offsets_group, logits_group],
    })
}

fn unflatten(flat: &[f64]) -> Vec<Point2> {
    flat.chunks(2).map(|c| Point2::new(c[0], c[1])).collect()
}

/// Chain built without cleanup so that perturbed nodes keep their indices.
fn raw_chain(nodes: &[Point2]) -> AnchorChain {
    AnchorChain::new_unchecked(nodes.to_vec(), CoordinateSpace::Normalized)
}

/// Additive update in normalized space, clamped to the unit square.
pub fn refine_anchor_chain(chain: &AnchorChain, deltas: &[Point2]) -> Result<AnchorChain> {
    if deltas.len() != chain.len() {
        return Err(Error::LengthMismatch {
            expected: chain.len(),
            actual: deltas.len(),
        });
    }
    if let Some(i) = deltas.iter().position(|d| !d.is_finite()) {
        return Err(Error::NonFinite(i));
    }
    let nodes = chain
        .nodes()
        .iter()
        .zip(deltas)
        .map(|(p, d)| Point2::new((p.x + d.x).clamp(0.0, 1.0), (p.y + d.y).clamp(0.0, 1.0)))
        .collect();
    AnchorChain::new(nodes, CoordinateSpace::Normalized)
}

/// Ready-made random fixture for gradient checks: an interior chain and
/// offsets that keep every sample at least one texel from the border.
pub fn random_fixture(
    rng: &mut impl Rng,
    height: usize,
    width: usize,
    channels: usize,
    nodes: usize,
    heads: usize,
    points_per_ref: usize,
) -> (QueryState, FeatureMap, MrdaParams) {
    let map = FeatureMap::from_fn(height, width, channels, |_, _, _| rng.gen_range(-1.0..1.0))
        .expect("positive dimensions");
    let margin_x = 1.0 / (width.max(2) - 1) as f64;
    let margin_y = 1.0 / (height.max(2) - 1) as f64;
    // nodes in the central band, offsets small enough to stay inside the margin
    let span_x = (0.5 - 2.0 * margin_x).max(0.0);
    let span_y = (0.5 - 2.0 * margin_y).max(0.0);
    let chain_nodes: Vec<Point2> = (0..nodes)
        .map(|i| {
            let t = (i as f64 + rng.gen_range(0.1..0.9)) / nodes as f64;
            Point2::new(
                0.5 + rng.gen_range(-span_x..=span_x) * 0.5,
                0.5 + (t - 0.5) * 2.0 * span_y,
            )
        })
        .collect();
    let chain = AnchorChain::new(chain_nodes, CoordinateSpace::Normalized).expect("interior nodes");
    let n = chain.len();
    let samples = heads * n * points_per_ref;
    let offsets = (0..samples * 2)
        .map(|i| {
            let m = if i % 2 == 0 { margin_x } else { margin_y };
            rng.gen_range(-m..m)
        })
        .collect();
    let attn_logits = (0..samples).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let embedding = (0..channels).map(|_| rng.gen_range(-1.0..1.0)).collect();
    (
        QueryState { embedding, chain },
        map,
        MrdaParams {
            heads,
            points_per_ref,
            offsets,
            attn_logits,
        },
    )
}
