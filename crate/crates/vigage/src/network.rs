//! Model assembly: stem, grapher + FFN blocks, pyramid downsampling, and
//! the regression head.
//!
//! The network is an isotropic-width pyramid over patch nodes:
//!
//! ```text
//! image ─ patchify ─ stem ─ [grapher ─ ffn]×(B/S) ─ downsample ─ ... ─ head ─ age
//! ```
//!
//! A grapher block rebuilds the k-NN graph from its *current* input features
//! (dynamic topology), gates edges with the learned sigmoid scores, runs the
//! two-step graph convolution plus multi-head attention between `W_in`/`W_out`
//! projections, and adds the residual. The FFN block is a two-layer MLP with
//! hidden width `4D` and its own residual. Downsampling merges each 2×2 node
//! neighborhood by feature concatenation and a learned `4D → D` projection.
//! The head applies two pointwise layers and averages over nodes.

use std::rc::Rc;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::attention::{AttentionHead, AttentionParams, HeadIds};
use crate::error::{Error, Result};
use crate::graphconv::{gc_layer_ids, GcIds, GcParams};
use crate::numerics::{Parameters, Tape, Tensor, TensorId};
use crate::patchgraph::{edge_weight_ids, knn_graph, patchify, EdgeWeightParams, Metric, PatchGraph};

// ── configuration ────────────────────────────────────────────────────────

/// Architecture hyperparameters plus the expected input geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Patch grid side `G`; the image becomes `G²` nodes.
    pub grid_side: usize,
    /// Neighbors per node in the k-NN graph.
    pub knn: usize,
    pub metric: Metric,
    /// Node feature width D, preserved across the whole network.
    pub feature_dim: usize,
    /// Update heads in the graph convolution (must divide D).
    pub gc_heads: usize,
    /// Attention heads (must divide D).
    pub attn_heads: usize,
    /// Total grapher+ffn block pairs, split evenly across stages.
    pub blocks: usize,
    pub stages: usize,
    /// Whether to downsample between consecutive stages (length `stages-1`).
    pub downsample_between: Vec<bool>,
    pub use_attention: bool,
    /// Divide attention logits by sqrt(d_m).
    pub scaled_attention: bool,
    /// Apply edge weights and degree normalization in step 2 as well.
    pub normalize_step2: bool,
    /// Build the graph once per stage instead of per grapher block.
    pub static_graph: bool,
    /// Residual connections around grapher and FFN blocks (ablation knob).
    pub residuals: bool,
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    /// Seed for parameter initialization.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            grid_side: 8,
            knn: 9,
            metric: Metric::Cosine,
            feature_dim: 64,
            gc_heads: 4,
            attn_heads: 4,
            blocks: 4,
            stages: 2,
            downsample_between: vec![true],
            use_attention: true,
            scaled_attention: false,
            normalize_step2: false,
            static_graph: false,
            residuals: true,
            image_h: 64,
            image_w: 64,
            channels: 1,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Small single-stage model for 16×16 inputs; fast enough to
    /// finite-difference the entire parameter vector.
    pub fn tiny() -> Self {
        Self {
            grid_side: 4,
            knn: 3,
            feature_dim: 8,
            gc_heads: 2,
            attn_heads: 2,
            blocks: 2,
            stages: 1,
            downsample_between: vec![],
            image_h: 16,
            image_w: 16,
            ..Self::default()
        }
    }

    /// Flattened features per patch.
    pub fn patch_dim(&self) -> usize {
        (self.image_h / self.grid_side) * (self.image_w / self.grid_side) * self.channels
    }

    /// Grid side at a given stage, after the preceding downsampling steps.
    pub fn side_at(&self, stage: usize) -> usize {
        let mut side = self.grid_side;
        for s in 0..stage.min(self.downsample_between.len()) {
            if self.downsample_between[s] {
                side /= 2;
            }
        }
        side
    }

    pub fn blocks_per_stage(&self) -> usize {
        self.blocks / self.stages
    }

    /// Checks internal consistency; every entry point validates before work.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.grid_side < 2 {
            return fail(format!("grid side must be >= 2, got {}", self.grid_side));
        }
        if self.feature_dim == 0 {
            return fail("feature dim must be positive".into());
        }
        if self.gc_heads == 0 || self.feature_dim % self.gc_heads != 0 {
            return fail(format!(
                "feature dim {} not divisible by {} gc heads",
                self.feature_dim, self.gc_heads
            ));
        }
        if self.attn_heads == 0 || self.feature_dim % self.attn_heads != 0 {
            return fail(format!(
                "feature dim {} not divisible by {} attention heads",
                self.feature_dim, self.attn_heads
            ));
        }
        if self.blocks == 0 || self.stages == 0 || self.blocks % self.stages != 0 {
            return fail(format!(
                "{} blocks do not split evenly over {} stages",
                self.blocks, self.stages
            ));
        }
        if self.downsample_between.len() != self.stages - 1 {
            return fail(format!(
                "expected {} downsample flags, got {}",
                self.stages - 1,
                self.downsample_between.len()
            ));
        }
        if self.channels != 1 && self.channels != 3 {
            return fail(format!("channels must be 1 or 3, got {}", self.channels));
        }
        if self.image_h == 0
            || self.image_w == 0
            || self.image_h % self.grid_side != 0
            || self.image_w % self.grid_side != 0
        {
            return fail(format!(
                "image {}x{} is not divisible into a {}-side grid",
                self.image_h, self.image_w, self.grid_side
            ));
        }
        if self.knn == 0 {
            return fail("knn must be >= 1".into());
        }
        // Walk the pyramid: enough nodes for k neighbors at every stage,
        // and an even side wherever a 2×2 merge happens.
        let mut side = self.grid_side;
        for s in 0..self.stages {
            if side * side < self.knn + 1 {
                return fail(format!(
                    "stage {s} has {} nodes, too few for knn={}",
                    side * side,
                    self.knn
                ));
            }
            if s + 1 < self.stages && self.downsample_between[s] {
                if side % 2 != 0 {
                    return fail(format!("stage {s} grid side {side} is odd; cannot merge 2x2"));
                }
                side /= 2;
            }
        }
        Ok(())
    }
}

// ── parameters ───────────────────────────────────────────────────────────

/// Stem: per-patch projection to width D, then a pointwise mix.
#[derive(Debug, Clone, PartialEq)]
pub struct StemParams {
    pub proj: Tensor,
    pub proj_bias: Tensor,
    pub conv: Tensor,
    pub conv_bias: Tensor,
}

/// One grapher+FFN block pair.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub edge: EdgeWeightParams,
    pub gc: GcParams,
    pub attn: AttentionParams,
    pub w_in: Tensor,
    pub w_out: Tensor,
    pub ffn_w1: Tensor,
    pub ffn_w2: Tensor,
}

/// Regression head: two pointwise layers, then the node mean.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub k1: Tensor,
    pub b1: Tensor,
    pub k2: Tensor,
    pub b2: Tensor,
}

/// All learnable state of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub stem: StemParams,
    pub pos_emb: Tensor,
    pub blocks: Vec<BlockParams>,
    /// One `4D×D` projection per applied downsampling step, in order.
    pub downsample: Vec<Tensor>,
    pub head: HeadParams,
}

impl Parameters for ModelParams {
    /// Deterministic parameter order: stem, position embedding, blocks in
    /// depth order (edge scorer, gc transforms, update heads, attention
    /// heads, in/out, ffn), downsample projections, head. This order *is*
    /// the checkpoint layout and the optimizer moment alignment.
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        out.push(("stem.proj".into(), &self.stem.proj));
        out.push(("stem.proj_bias".into(), &self.stem.proj_bias));
        out.push(("stem.conv".into(), &self.stem.conv));
        out.push(("stem.conv_bias".into(), &self.stem.conv_bias));
        out.push(("pos_emb".into(), &self.pos_emb));
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.edge.a"), &b.edge.a));
            out.push((format!("block{i}.edge.b"), &b.edge.b));
            out.push((format!("block{i}.gc.w_r1"), &b.gc.w_r1));
            out.push((format!("block{i}.gc.w_01"), &b.gc.w_01));
            out.push((format!("block{i}.gc.w_r2"), &b.gc.w_r2));
            out.push((format!("block{i}.gc.w_02"), &b.gc.w_02));
            for (u, w) in b.gc.update.iter().enumerate() {
                out.push((format!("block{i}.gc.update{u}"), w));
            }
            for (hh, head) in b.attn.heads.iter().enumerate() {
                out.push((format!("block{i}.attn.head{hh}.wq"), &head.wq));
                out.push((format!("block{i}.attn.head{hh}.wk"), &head.wk));
                out.push((format!("block{i}.attn.head{hh}.wv"), &head.wv));
            }
            out.push((format!("block{i}.w_in"), &b.w_in));
            out.push((format!("block{i}.w_out"), &b.w_out));
            out.push((format!("block{i}.ffn.w1"), &b.ffn_w1));
            out.push((format!("block{i}.ffn.w2"), &b.ffn_w2));
        }
        for (s, w) in self.downsample.iter().enumerate() {
            out.push((format!("down{s}"), w));
        }
        out.push(("head.k1".into(), &self.head.k1));
        out.push(("head.b1".into(), &self.head.b1));
        out.push(("head.k2".into(), &self.head.k2));
        out.push(("head.b2".into(), &self.head.b2));
        out
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        out.push(("stem.proj".into(), &mut self.stem.proj));
        out.push(("stem.proj_bias".into(), &mut self.stem.proj_bias));
        out.push(("stem.conv".into(), &mut self.stem.conv));
        out.push(("stem.conv_bias".into(), &mut self.stem.conv_bias));
        out.push(("pos_emb".into(), &mut self.pos_emb));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("block{i}.edge.a"), &mut b.edge.a));
            out.push((format!("block{i}.edge.b"), &mut b.edge.b));
            out.push((format!("block{i}.gc.w_r1"), &mut b.gc.w_r1));
            out.push((format!("block{i}.gc.w_01"), &mut b.gc.w_01));
            out.push((format!("block{i}.gc.w_r2"), &mut b.gc.w_r2));
            out.push((format!("block{i}.gc.w_02"), &mut b.gc.w_02));
            for (u, w) in b.gc.update.iter_mut().enumerate() {
                out.push((format!("block{i}.gc.update{u}"), w));
            }
            for (hh, head) in b.attn.heads.iter_mut().enumerate() {
                out.push((format!("block{i}.attn.head{hh}.wq"), &mut head.wq));
                out.push((format!("block{i}.attn.head{hh}.wk"), &mut head.wk));
                out.push((format!("block{i}.attn.head{hh}.wv"), &mut head.wv));
            }
            out.push((format!("block{i}.w_in"), &mut b.w_in));
            out.push((format!("block{i}.w_out"), &mut b.w_out));
            out.push((format!("block{i}.ffn.w1"), &mut b.ffn_w1));
            out.push((format!("block{i}.ffn.w2"), &mut b.ffn_w2));
        }
        for (s, w) in self.downsample.iter_mut().enumerate() {
            out.push((format!("down{s}"), w));
        }
        out.push(("head.k1".into(), &mut self.head.k1));
        out.push(("head.b1".into(), &mut self.head.b1));
        out.push(("head.k2".into(), &mut self.head.k2));
        out.push(("head.b2".into(), &mut self.head.b2));
        out
    }
}

// ── initialization ───────────────────────────────────────────────────────

fn uniform_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, half_width: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-half_width..half_width)).collect();
    Tensor::new(shape, data).expect("shape/data consistent by construction")
}

/// Fan-balanced uniform init: half-width `sqrt(6 / (fan_in + fan_out))`.
fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let hw = (6.0 / (rows + cols) as f64).sqrt();
    uniform_tensor(rng, vec![rows, cols], hw)
}

/// Draws fresh parameters for a validated config. Weight matrices are
/// fan-balanced uniform, the position embedding is uniform in ±0.02, and
/// all biases start at zero. Same seed, same parameters — bit for bit.
pub fn init_params(config: &ModelConfig) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.feature_dim;
    let p = config.patch_dim();
    let n0 = config.grid_side * config.grid_side;

    let stem = StemParams {
        proj: glorot(&mut rng, p, d),
        proj_bias: Tensor::zeros(vec![d]),
        conv: glorot(&mut rng, d, d),
        conv_bias: Tensor::zeros(vec![d]),
    };
    let pos_emb = uniform_tensor(&mut rng, vec![n0, d], 0.02);

    let mut blocks = Vec::with_capacity(config.blocks);
    for _ in 0..config.blocks {
        let edge = EdgeWeightParams::new(glorot(&mut rng, 2 * d, 1), Tensor::zeros(vec![1]))?;
        let dm_gc = d / config.gc_heads;
        let gc = GcParams::new(
            glorot(&mut rng, d, d),
            glorot(&mut rng, d, d),
            glorot(&mut rng, d, d),
            glorot(&mut rng, d, d),
            (0..config.gc_heads).map(|_| glorot(&mut rng, dm_gc, dm_gc)).collect(),
        )?;
        let dm_at = d / config.attn_heads;
        let attn = AttentionParams::new(
            (0..config.attn_heads)
                .map(|_| AttentionHead {
                    wq: glorot(&mut rng, d, dm_at),
                    wk: glorot(&mut rng, d, dm_at),
                    wv: glorot(&mut rng, d, dm_at),
                })
                .collect(),
        )?;
        blocks.push(BlockParams {
            edge,
            gc,
            attn,
            w_in: glorot(&mut rng, d, d),
            w_out: glorot(&mut rng, d, d),
            ffn_w1: glorot(&mut rng, d, 4 * d),
            ffn_w2: glorot(&mut rng, 4 * d, d),
        });
    }

    let downsample = config
        .downsample_between
        .iter()
        .filter(|&&f| f)
        .map(|_| glorot(&mut rng, 4 * d, d))
        .collect();

    let head = HeadParams {
        k1: glorot(&mut rng, d, d),
        b1: Tensor::zeros(vec![d]),
        k2: glorot(&mut rng, d, 1),
        b2: Tensor::zeros(vec![1]),
    };

    Ok(ModelParams { stem, pos_emb, blocks, downsample, head })
}

// ── tape registration ────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct StemIds {
    pub proj: TensorId,
    pub proj_bias: TensorId,
    pub conv: TensorId,
    pub conv_bias: TensorId,
}

#[derive(Debug, Clone)]
pub struct BlockIds {
    pub edge_a: TensorId,
    pub edge_b: TensorId,
    pub gc: GcIds,
    pub attn: Vec<HeadIds>,
    pub w_in: TensorId,
    pub w_out: TensorId,
    pub ffn_w1: TensorId,
    pub ffn_w2: TensorId,
}

/// Every parameter registered as a tape leaf, mirroring [`ModelParams`].
#[derive(Debug, Clone)]
pub struct ParamIds {
    pub stem: StemIds,
    pub pos_emb: TensorId,
    pub blocks: Vec<BlockIds>,
    pub downsample: Vec<TensorId>,
    pub head: (TensorId, TensorId, TensorId, TensorId),
}

impl ParamIds {
    /// Registers every tensor, in exactly the [`Parameters`] visitor order
    /// (`flat` must stay aligned with `named_tensors`).
    pub fn register(tape: &mut Tape, params: &ModelParams) -> Result<Self> {
        let stem = StemIds {
            proj: tape.input(&params.stem.proj),
            proj_bias: tape.input(&params.stem.proj_bias),
            conv: tape.input(&params.stem.conv),
            conv_bias: tape.input(&params.stem.conv_bias),
        };
        let pos_emb = tape.input(&params.pos_emb);
        let mut blocks = Vec::with_capacity(params.blocks.len());
        for b in &params.blocks {
            let edge_a = tape.input(&b.edge.a);
            let edge_b = tape.input(&b.edge.b);
            let gc = GcIds::register(tape, &b.gc);
            let attn = b
                .attn
                .heads
                .iter()
                .map(|h| (tape.input(&h.wq), tape.input(&h.wk), tape.input(&h.wv)))
                .collect();
            blocks.push(BlockIds {
                edge_a,
                edge_b,
                gc,
                attn,
                w_in: tape.input(&b.w_in),
                w_out: tape.input(&b.w_out),
                ffn_w1: tape.input(&b.ffn_w1),
                ffn_w2: tape.input(&b.ffn_w2),
            });
        }
        let downsample = params.downsample.iter().map(|w| tape.input(w)).collect();
        let head = (
            tape.input(&params.head.k1),
            tape.input(&params.head.b1),
            tape.input(&params.head.k2),
            tape.input(&params.head.b2),
        );
        Ok(Self { stem, pos_emb, blocks, downsample, head })
    }

    /// Ids in the same order as [`Parameters::named_tensors`].
    pub fn flat(&self) -> Vec<TensorId> {
        let mut out = vec![
            self.stem.proj,
            self.stem.proj_bias,
            self.stem.conv,
            self.stem.conv_bias,
            self.pos_emb,
        ];
        for b in &self.blocks {
            out.push(b.edge_a);
            out.push(b.edge_b);
            out.push(b.gc.w_r1);
            out.push(b.gc.w_01);
            out.push(b.gc.w_r2);
            out.push(b.gc.w_02);
            out.extend(&b.gc.update);
            for &(wq, wk, wv) in &b.attn {
                out.push(wq);
                out.push(wk);
                out.push(wv);
            }
            out.push(b.w_in);
            out.push(b.w_out);
            out.push(b.ffn_w1);
            out.push(b.ffn_w2);
        }
        out.extend(&self.downsample);
        out.push(self.head.0);
        out.push(self.head.1);
        out.push(self.head.2);
        out.push(self.head.3);
        out
    }
}

// ── tape builders ────────────────────────────────────────────────────────

/// Stem on the tape: project patches to width D, ReLU, pointwise mix, add
/// the position embedding.
pub fn stem_ids(tape: &mut Tape, patches: TensorId, ids: &StemIds, pos_emb: TensorId) -> Result<TensorId> {
    let x = tape.matmul(patches, ids.proj)?;
    let x = tape.add_row_vec(x, ids.proj_bias)?;
    let x = tape.relu(x)?;
    let x = tape.matmul(x, ids.conv)?;
    let x = tape.add_row_vec(x, ids.conv_bias)?;
    tape.add(x, pos_emb)
}

/// Grapher block on the tape over a prebuilt graph:
/// `relu(gc_layer(x·W_in)) · W_out (+ x)`, with edge weights computed from
/// the block input `x` so their gradients flow into both the scorer and the
/// features.
pub fn grapher_ids(
    tape: &mut Tape,
    x: TensorId,
    graph: &PatchGraph,
    blk: &BlockIds,
    config: &ModelConfig,
) -> Result<TensorId> {
    let (ae, asl) = edge_weight_ids(tape, x, graph, blk.edge_a, blk.edge_b)?;
    let topo = graph.topology();
    let inner = tape.matmul(x, blk.w_in)?;
    let attn = config.use_attention.then_some(blk.attn.as_slice());
    let gc_out = gc_layer_ids(
        tape,
        inner,
        &topo,
        ae,
        asl,
        &blk.gc,
        attn,
        config.normalize_step2,
        config.scaled_attention,
    )?;
    let act = tape.relu(gc_out)?;
    let branch = tape.matmul(act, blk.w_out)?;
    if config.residuals {
        tape.add(branch, x)
    } else {
        Ok(branch)
    }
}

/// FFN block on the tape: `relu(x·W_1)·W_2 (+ x)`, hidden width 4D.
pub fn ffn_ids(
    tape: &mut Tape,
    x: TensorId,
    w1: TensorId,
    w2: TensorId,
    residuals: bool,
) -> Result<TensorId> {
    let h = tape.matmul(x, w1)?;
    let h = tape.relu(h)?;
    let branch = tape.matmul(h, w2)?;
    if residuals {
        tape.add(branch, x)
    } else {
        Ok(branch)
    }
}

/// 2×2 node merge on the tape: concatenate each quad's features
/// (top-left, top-right, bottom-left, bottom-right) and project `4D → D`.
pub fn downsample_ids(tape: &mut Tape, x: TensorId, side: usize, proj: TensorId) -> Result<TensorId> {
    let rows = tape.shape(x)[0];
    if side * side != rows || side % 2 != 0 {
        return Err(Error::Dimension {
            op: "downsample",
            lhs: vec![rows],
            rhs: vec![side, side],
        });
    }
    let half = side / 2;
    let (mut tl, mut tr, mut bl, mut br) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for r in 0..half {
        for c in 0..half {
            tl.push((2 * r) * side + 2 * c);
            tr.push((2 * r) * side + 2 * c + 1);
            bl.push((2 * r + 1) * side + 2 * c);
            br.push((2 * r + 1) * side + 2 * c + 1);
        }
    }
    let gtl = tape.gather_rows(x, tl)?;
    let gtr = tape.gather_rows(x, tr)?;
    let gbl = tape.gather_rows(x, bl)?;
    let gbr = tape.gather_rows(x, br)?;
    let merged = tape.concat(&[gtl, gtr, gbl, gbr], 1)?;
    tape.matmul(merged, proj)
}

/// Regression head on the tape: two pointwise layers, mean over nodes.
pub fn head_ids(
    tape: &mut Tape,
    x: TensorId,
    (k1, b1, k2, b2): (TensorId, TensorId, TensorId, TensorId),
) -> Result<TensorId> {
    let h = tape.matmul(x, k1)?;
    let h = tape.add_row_vec(h, b1)?;
    let h = tape.relu(h)?;
    let s = tape.matmul(h, k2)?;
    let s = tape.add_row_vec(s, b2)?;
    tape.mean_all(s)
}

/// A complete recorded forward pass, ready for a backward sweep.
pub struct ForwardPass {
    pub tape: Tape,
    /// Scalar prediction (`[1]`).
    pub prediction: TensorId,
    /// Final node features entering the head.
    pub final_nodes: TensorId,
    pub ids: ParamIds,
}

/// Runs the full network on one image, recording everything on a fresh
/// tape. The k-NN graph is rebuilt from current features before every
/// grapher block (or once per stage with `static_graph`).
pub fn forward_pass(image: &Tensor, params: &ModelParams, config: &ModelConfig) -> Result<ForwardPass> {
    config.validate()?;
    let patches = patchify(image, config.grid_side)?;
    if patches.cols() != config.patch_dim() {
        return Err(Error::Dimension {
            op: "forward",
            lhs: patches.shape().to_vec(),
            rhs: vec![config.grid_side * config.grid_side, config.patch_dim()],
        });
    }
    let mut tape = Tape::new();
    let ids = ParamIds::register(&mut tape, params)?;
    let pid = tape.input(&patches);
    let mut x = stem_ids(&mut tape, pid, &ids.stem, ids.pos_emb)?;

    let bps = config.blocks_per_stage();
    let mut ds_index = 0;
    for s in 0..config.stages {
        let mut stage_graph: Option<Rc<PatchGraph>> = None;
        for bi in 0..bps {
            let block = &ids.blocks[s * bps + bi];
            let graph = match (&stage_graph, config.static_graph) {
                (Some(g), true) => Rc::clone(g),
                _ => {
                    let feats = tape.tensor(x);
                    let g = Rc::new(knn_graph(&feats, config.knn, config.metric)?);
                    if config.static_graph {
                        stage_graph = Some(Rc::clone(&g));
                    }
                    g
                }
            };
            x = grapher_ids(&mut tape, x, &graph, block, config)?;
            x = ffn_ids(&mut tape, x, block.ffn_w1, block.ffn_w2, config.residuals)?;
        }
        if s + 1 < config.stages && config.downsample_between[s] {
            x = downsample_ids(&mut tape, x, config.side_at(s), ids.downsample[ds_index])?;
            ds_index += 1;
        }
    }
    let prediction = head_ids(&mut tape, x, ids.head)?;
    Ok(ForwardPass { tape, prediction, final_nodes: x, ids })
}

/// Adds `scale ×` the tape gradients of every parameter into its gradient
/// slot. Parameters the pass never touched get a zero gradient, so the
/// optimizer sees a complete, aligned gradient set.
pub fn accumulate_param_grads(
    pass: &ForwardPass,
    params: &mut ModelParams,
    scale: f64,
) -> Result<()> {
    let flat = pass.ids.flat();
    let named = params.named_tensors_mut();
    if flat.len() != named.len() {
        return Err(Error::State(format!(
            "parameter id count {} out of sync with tensor count {}",
            flat.len(),
            named.len()
        )));
    }
    for ((_, tensor), id) in named.into_iter().zip(flat) {
        match pass.tape.grad(id) {
            Some(g) => tensor.accumulate_grad(g, scale)?,
            None => tensor.ensure_grad(),
        }
    }
    Ok(())
}

// ── plain operations ─────────────────────────────────────────────────────

/// Stem as a plain tensor function.
pub fn stem(image: &Tensor, params: &ModelParams, config: &ModelConfig) -> Result<Tensor> {
    let patches = patchify(image, config.grid_side)?;
    let mut tape = Tape::new();
    let sid = StemIds {
        proj: tape.input(&params.stem.proj),
        proj_bias: tape.input(&params.stem.proj_bias),
        conv: tape.input(&params.stem.conv),
        conv_bias: tape.input(&params.stem.conv_bias),
    };
    let pos = tape.input(&params.pos_emb);
    let pid = tape.input(&patches);
    let out = stem_ids(&mut tape, pid, &sid, pos)?;
    Ok(tape.tensor(out))
}

/// Grapher block as a plain tensor function; builds the k-NN graph from `o`.
pub fn grapher_block(o: &Tensor, block: &BlockParams, config: &ModelConfig) -> Result<Tensor> {
    let graph = knn_graph(o, config.knn, config.metric)?;
    let mut tape = Tape::new();
    let bid = register_block(&mut tape, block);
    let xid = tape.input(o);
    let out = grapher_ids(&mut tape, xid, &graph, &bid, config)?;
    Ok(tape.tensor(out))
}

/// FFN block as a plain tensor function.
pub fn ffn_block(o: &Tensor, block: &BlockParams, residuals: bool) -> Result<Tensor> {
    let mut tape = Tape::new();
    let w1 = tape.input(&block.ffn_w1);
    let w2 = tape.input(&block.ffn_w2);
    let xid = tape.input(o);
    let out = ffn_ids(&mut tape, xid, w1, w2, residuals)?;
    Ok(tape.tensor(out))
}

/// 2×2 merge + projection as a plain tensor function; the node count must
/// be a square with an even side.
pub fn downsample(o: &Tensor, proj: &Tensor) -> Result<Tensor> {
    let rows = o.rows();
    let side = (rows as f64).sqrt().round() as usize;
    let mut tape = Tape::new();
    let p = tape.input(proj);
    let xid = tape.input(o);
    let out = downsample_ids(&mut tape, xid, side, p)?;
    Ok(tape.tensor(out))
}

/// Head as a plain function: predicted age for the given node features.
pub fn predict_age(o: &Tensor, head: &HeadParams) -> Result<f64> {
    let mut tape = Tape::new();
    let hid = (
        tape.input(&head.k1),
        tape.input(&head.b1),
        tape.input(&head.k2),
        tape.input(&head.b2),
    );
    let xid = tape.input(o);
    let out = head_ids(&mut tape, xid, hid)?;
    Ok(tape.value(out)[0])
}

/// Full forward pass: image in, predicted age out.
pub fn forward(image: &Tensor, params: &ModelParams, config: &ModelConfig) -> Result<f64> {
    let pass = forward_pass(image, params, config)?;
    Ok(pass.tape.value(pass.prediction)[0])
}

/// Final node features entering the head (embedding diagnostics).
pub fn node_features(image: &Tensor, params: &ModelParams, config: &ModelConfig) -> Result<Tensor> {
    let pass = forward_pass(image, params, config)?;
    Ok(pass.tape.tensor(pass.final_nodes))
}

fn register_block(tape: &mut Tape, block: &BlockParams) -> BlockIds {
    BlockIds {
        edge_a: tape.input(&block.edge.a),
        edge_b: tape.input(&block.edge.b),
        gc: GcIds::register(tape, &block.gc),
        attn: block
            .attn
            .heads
            .iter()
            .map(|h| (tape.input(&h.wq), tape.input(&h.wk), tape.input(&h.wv)))
            .collect(),
        w_in: tape.input(&block.w_in),
        w_out: tape.input(&block.w_out),
        ffn_w1: tape.input(&block.ffn_w1),
        ffn_w2: tape.input(&block.ffn_w2),
    }
}
