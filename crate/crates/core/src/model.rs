//! The dual-branch detector: shared time- and frequency-domain CNN branches,
//! a dual-domain attention module (DDAM) joining them, per-domain
//! classification heads, and the cycle-consistency losses.
//!
//! One batch element is one measurement's four feature matrices. Both
//! half-cycles of a domain pass through that domain's branch as one stacked
//! mini-batch, so batch-norm statistics and weights are genuinely shared; the
//! block-3 output is then split back into its positive and negative halves.
//! The DDAM squeezes the block-3 maps of both domains along the configured
//! attention axis, excites a per-index gate through a two-layer bottleneck,
//! rescales both maps, concatenates them along the feature axis, and reduces
//! the joint convolution's output to a probability. Heads do the same per
//! domain without the joint step.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::preprocess::PreprocessConfig;
use crate::signal_io::MeasurementFeatures;
use crate::tensor::{
    AdamConfig, BatchNormState, Checkpoint, CheckpointError, Graph, Mode, NamedBuffer, Param,
    Tensor, TensorError,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("input too small at {stage}: {height}x{width} with kernel {kernel}")]
    InputTooSmall {
        stage: String,
        height: usize,
        width: usize,
        kernel: usize,
    },
    #[error("peak axis mismatch: time branch ends with N={td}, frequency branch with N={fd}")]
    PeakAxisMismatch { td: usize, fd: usize },
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint does not match this config: {0}")]
    CheckpointMismatch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Which branches are active. The reduced modes implement the ablation rows
/// that drop the other branch and the DDAM.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchMode {
    Full,
    TdOnly,
    FdOnly,
}

/// Axis the squeeze-excitation gate acts along.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionAxis {
    None,
    Channel,
    Feature,
    Peak,
}

/// Layer order inside a branch block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockOrder {
    /// conv -> ReLU -> batch norm (the published order).
    ConvReluBn,
    /// conv -> batch norm -> ReLU (the conventional order, for ablations).
    ConvBnRelu,
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    /// Peaks per half-cycle (input width).
    pub n_p: usize,
    /// Time-domain input height.
    pub w_t: usize,
    /// Frequency-domain input height (`w_f/2 + 1` spectrogram bins).
    pub f_bins: usize,
    pub kernel: usize,
    pub stride: usize,
    /// Branch filters per block.
    pub filters: [usize; 3],
    /// Kernels of the DDAM joint convolution.
    pub joint_filters: usize,
    /// Bottleneck divisor of the squeeze-excitation gate.
    pub se_reduction: usize,
    /// Weight of the cycle-consistency term in the total loss.
    pub lambda: f64,
    pub branch_mode: BranchMode,
    pub attention: AttentionAxis,
    pub block_order: BlockOrder,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_p: 257,
            w_t: 128,
            f_bins: 257,
            kernel: 7,
            stride: 2,
            filters: [8, 16, 32],
            joint_filters: 64,
            se_reduction: 4,
            lambda: 1.0,
            branch_mode: BranchMode::Full,
            attention: AttentionAxis::Peak,
            block_order: BlockOrder::ConvReluBn,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    /// Takes the input dimensions from a preprocessing config.
    pub fn from_preprocess(p: &PreprocessConfig) -> Self {
        Self {
            n_p: p.n_p,
            w_t: p.w_t,
            f_bins: p.f_bins(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: &str| Err(ModelError::InvalidConfig(msg.into()));
        if self.kernel == 0 || self.stride == 0 || self.joint_filters == 0 {
            return bad("kernel, stride, and joint_filters must be positive");
        }
        if self.filters.iter().any(|&f| f == 0) || self.se_reduction == 0 {
            return bad("filters and se_reduction must be positive");
        }
        if self.lambda < 0.0 {
            return bad("lambda must be non-negative");
        }
        Ok(())
    }
}

/// Static shape chain derived from the config; computed and checked once at
/// model construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapePlan {
    /// Block-3 output `(C, Z_t, N)` of the time branch.
    pub td_out: Option<(usize, usize, usize)>,
    /// Block-3 output `(C, Z_f, N)` of the frequency branch.
    pub fd_out: Option<(usize, usize, usize)>,
    /// Joint convolution output `(D, h, w)`.
    pub joint_out: Option<(usize, usize, usize)>,
    /// Length of the attention gate (0 when attention is off or DDAM absent).
    pub attn_len: usize,
    /// Width of the squeeze-excitation bottleneck.
    pub se_hidden: usize,
    /// Input width of the first excitation layer.
    pub se_input: usize,
}

fn conv_out(dim: usize, kernel: usize, stride: usize) -> Option<usize> {
    (dim >= kernel).then(|| (dim - kernel) / stride + 1)
}

fn branch_chain(
    name: &str,
    mut h: usize,
    mut w: usize,
    cfg: &ModelConfig,
) -> Result<(usize, usize), ModelError> {
    for block in 0..3 {
        let too_small = ModelError::InputTooSmall {
            stage: format!("{name} block {}", block + 1),
            height: h,
            width: w,
            kernel: cfg.kernel,
        };
        h = conv_out(h, cfg.kernel, cfg.stride).ok_or_else(|| too_small)?;
        w = conv_out(w, cfg.kernel, cfg.stride).ok_or_else(|| ModelError::InputTooSmall {
            stage: format!("{name} block {}", block + 1),
            height: h,
            width: w,
            kernel: cfg.kernel,
        })?;
    }
    Ok((h, w))
}

impl ModelConfig {
    pub fn plan(&self) -> Result<ShapePlan, ModelError> {
        self.validate()?;
        let c3 = self.filters[2];
        let td_active = self.branch_mode != BranchMode::FdOnly;
        let fd_active = self.branch_mode != BranchMode::TdOnly;

        let td_out = if td_active {
            let (z, n) = branch_chain("time branch", self.w_t, self.n_p, self)?;
            Some((c3, z, n))
        } else {
            None
        };
        let fd_out = if fd_active {
            let (z, n) = branch_chain("frequency branch", self.f_bins, self.n_p, self)?;
            Some((c3, z, n))
        } else {
            None
        };

        let (joint_out, attn_len, se_input) = match (td_out, fd_out) {
            (Some((_, z_t, n_t)), Some((_, z_f, n_f))) => {
                if n_t != n_f {
                    return Err(ModelError::PeakAxisMismatch { td: n_t, fd: n_f });
                }
                let cat_z = z_t + z_f;
                let h = conv_out(cat_z, self.kernel, self.stride).ok_or_else(|| {
                    ModelError::InputTooSmall {
                        stage: "joint convolution".into(),
                        height: cat_z,
                        width: n_t,
                        kernel: self.kernel,
                    }
                })?;
                let w = conv_out(n_t, self.kernel, self.stride).ok_or_else(|| {
                    ModelError::InputTooSmall {
                        stage: "joint convolution".into(),
                        height: cat_z,
                        width: n_t,
                        kernel: self.kernel,
                    }
                })?;
                let (attn_len, se_input) = match self.attention {
                    AttentionAxis::None => (0, 0),
                    AttentionAxis::Peak => (n_t, 2 * n_t),
                    AttentionAxis::Channel => (c3, 2 * c3),
                    AttentionAxis::Feature => (cat_z, cat_z),
                };
                (Some((self.joint_filters, h, w)), attn_len, se_input)
            }
            _ => (None, 0, 0),
        };
        let se_hidden = if attn_len == 0 {
            0
        } else {
            (attn_len / self.se_reduction).max(1)
        };
        Ok(ShapePlan { td_out, fd_out, joint_out, attn_len, se_hidden, se_input })
    }
}

/// One conv block: kernel, bias, and batch-norm affine parameters plus the
/// running statistics.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub kernel: Param,
    pub bias: Param,
    pub gamma: Param,
    pub beta: Param,
    pub bn: BatchNormState,
}

#[derive(Debug, Clone)]
pub struct Branch {
    pub blocks: Vec<ConvBlock>,
}

/// Squeeze-excitation gate weights.
#[derive(Debug, Clone)]
pub struct SeParams {
    pub fc1_w: Param,
    pub fc1_b: Param,
    pub fc2_w: Param,
    pub fc2_b: Param,
}

#[derive(Debug, Clone)]
pub struct DdamParams {
    pub se: Option<SeParams>,
    pub joint_kernel: Param,
    pub joint_bias: Param,
    pub fc_w: Param,
    pub fc_b: Param,
}

/// One domain head: a single fully connected layer onto a probability.
#[derive(Debug, Clone)]
pub struct HeadParams {
    pub w: Param,
    pub b: Param,
}

#[derive(Debug, Clone)]
pub struct ModelParams {
    pub td: Option<Branch>,
    pub fd: Option<Branch>,
    pub ddam: Option<DdamParams>,
    pub td_head: Option<HeadParams>,
    pub fd_head: Option<HeadParams>,
}

impl ModelParams {
    /// Visits every trainable parameter in the canonical order used by
    /// forward binding, gradient application, and checkpoints.
    pub fn for_each(&self, mut f: impl FnMut(&Param)) {
        let mut branch = |br: &Option<Branch>| {
            if let Some(br) = br {
                for blk in &br.blocks {
                    f(&blk.kernel);
                    f(&blk.bias);
                    f(&blk.gamma);
                    f(&blk.beta);
                }
            }
        };
        branch(&self.td);
        branch(&self.fd);
        if let Some(ddam) = &self.ddam {
            if let Some(se) = &ddam.se {
                f(&se.fc1_w);
                f(&se.fc1_b);
                f(&se.fc2_w);
                f(&se.fc2_b);
            }
            f(&ddam.joint_kernel);
            f(&ddam.joint_bias);
            f(&ddam.fc_w);
            f(&ddam.fc_b);
        }
        if let Some(h) = &self.td_head {
            f(&h.w);
            f(&h.b);
        }
        if let Some(h) = &self.fd_head {
            f(&h.w);
            f(&h.b);
        }
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&mut Param)) {
        let branch = |br: &mut Option<Branch>, f: &mut dyn FnMut(&mut Param)| {
            if let Some(br) = br {
                for blk in &mut br.blocks {
                    f(&mut blk.kernel);
                    f(&mut blk.bias);
                    f(&mut blk.gamma);
                    f(&mut blk.beta);
                }
            }
        };
        branch(&mut self.td, &mut f);
        branch(&mut self.fd, &mut f);
        if let Some(ddam) = &mut self.ddam {
            if let Some(se) = &mut ddam.se {
                f(&mut se.fc1_w);
                f(&mut se.fc1_b);
                f(&mut se.fc2_w);
                f(&mut se.fc2_b);
            }
            f(&mut ddam.joint_kernel);
            f(&mut ddam.joint_bias);
            f(&mut ddam.fc_w);
            f(&mut ddam.fc_b);
        }
        if let Some(h) = &mut self.td_head {
            f(&mut h.w);
            f(&mut h.b);
        }
        if let Some(h) = &mut self.fd_head {
            f(&mut h.w);
            f(&mut h.b);
        }
    }

    pub fn n_params(&self) -> usize {
        let mut n = 0;
        self.for_each(|_| n += 1);
        n
    }

    /// All parameter values as one flat vector, in `for_each` order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut flat = Vec::new();
        self.for_each(|p| flat.extend_from_slice(&p.data));
        flat
    }

    /// Writes a flat vector produced by [`ModelParams::flatten`] back.
    pub fn unflatten(&mut self, flat: &[f64]) {
        let mut offset = 0;
        self.for_each_mut(|p| {
            let n = p.data.len();
            p.data.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        });
        assert_eq!(offset, flat.len(), "flat parameter vector length mismatch");
    }
}

/// Head probabilities and block-3 feature maps of one forward pass. Absent
/// entries belong to branches the mode disabled.
#[derive(Debug, Clone)]
pub struct ForwardOutputs {
    pub batch: usize,
    pub p_jp: Option<Tensor>,
    pub p_jn: Option<Tensor>,
    pub p_tp: Option<Tensor>,
    pub p_tn: Option<Tensor>,
    pub p_fp: Option<Tensor>,
    pub p_fn: Option<Tensor>,
    pub x_tpg: Option<Tensor>,
    pub x_tng: Option<Tensor>,
    pub x_fpg: Option<Tensor>,
    pub x_fng: Option<Tensor>,
    /// Attention gates of the positive and negative DDAM passes.
    pub u_pos: Option<Tensor>,
    pub u_neg: Option<Tensor>,
    /// Pooled decision vectors per branch, exportable for projection plots.
    pub d_jp: Option<Tensor>,
    pub d_jn: Option<Tensor>,
    pub d_tp: Option<Tensor>,
    pub d_tn: Option<Tensor>,
    pub d_fp: Option<Tensor>,
    pub d_fn: Option<Tensor>,
}

impl ForwardOutputs {
    /// Present head probabilities in the canonical loss order
    /// (joint, time, frequency; positive before negative).
    pub fn heads(&self) -> Vec<Tensor> {
        [self.p_jp, self.p_jn, self.p_tp, self.p_tn, self.p_fp, self.p_fn]
            .into_iter()
            .flatten()
            .collect()
    }
}

/// One forward pass plus the graph leaves its parameters were bound to, in
/// `ModelParams::for_each` order.
pub struct ForwardPass {
    pub outputs: ForwardOutputs,
    param_leaves: Vec<Tensor>,
}

impl ForwardPass {
    /// Gradients of the bound parameters, in `ModelParams::for_each` order.
    pub fn param_grads(&self, g: &Graph) -> Vec<Vec<f64>> {
        self.param_leaves.iter().map(|t| g.grad(*t).to_vec()).collect()
    }
}

/// Scalar losses of one batch. `l_ct`/`l_cf` are present when the matching
/// branch ran; `l_total` always is.
pub struct LossBreakdown {
    pub l_cls: Tensor,
    pub l_ct: Option<Tensor>,
    pub l_cf: Option<Tensor>,
    pub l_c: Option<Tensor>,
    pub l_total: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValues {
    pub l_cls: f64,
    pub l_ct: f64,
    pub l_cf: f64,
    pub l_c: f64,
    pub l_total: f64,
}

impl LossBreakdown {
    pub fn values(&self, g: &Graph) -> LossValues {
        let v = |t: Option<Tensor>| t.map(|t| g.value(t)).unwrap_or(0.0);
        LossValues {
            l_cls: g.value(self.l_cls),
            l_ct: v(self.l_ct),
            l_cf: v(self.l_cf),
            l_c: v(self.l_c),
            l_total: g.value(self.l_total),
        }
    }
}

struct BoundBlock {
    kernel: Tensor,
    bias: Tensor,
    gamma: Tensor,
    beta: Tensor,
}

struct BoundSe {
    fc1_w: Tensor,
    fc1_b: Tensor,
    fc2_w: Tensor,
    fc2_b: Tensor,
}

struct BoundDdam {
    se: Option<BoundSe>,
    joint_kernel: Tensor,
    joint_bias: Tensor,
    fc_w: Tensor,
    fc_b: Tensor,
}

struct BoundHead {
    w: Tensor,
    b: Tensor,
}

pub struct DualCyConNet {
    cfg: ModelConfig,
    plan: ShapePlan,
    pub params: ModelParams,
}

impl DualCyConNet {
    /// Builds a model with seeded uniform `+-sqrt(6/fan_in)` weights, gamma 1,
    /// beta 0. The whole shape chain is derived and checked here.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let plan = cfg.plan()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kernel = cfg.kernel;

        let mut make_branch = |name: &str| -> Branch {
            let mut blocks = Vec::with_capacity(3);
            let mut c_in = 1;
            for (i, &c_out) in cfg.filters.iter().enumerate() {
                let prefix = format!("{name}.block{i}");
                let fan_in = c_in * kernel * kernel;
                blocks.push(ConvBlock {
                    kernel: Param::uniform(
                        format!("{prefix}.kernel"),
                        &[c_out, c_in, kernel, kernel],
                        fan_in,
                        &mut rng,
                    ),
                    bias: Param::zeros(format!("{prefix}.bias"), &[c_out]),
                    gamma: Param::filled(format!("{prefix}.bn.gamma"), &[c_out], 1.0),
                    beta: Param::zeros(format!("{prefix}.bn.beta"), &[c_out]),
                    bn: BatchNormState::new(c_out),
                });
                c_in = c_out;
            }
            Branch { blocks }
        };

        let td = (cfg.branch_mode != BranchMode::FdOnly).then(|| make_branch("td"));
        let fd = (cfg.branch_mode != BranchMode::TdOnly).then(|| make_branch("fd"));

        let ddam = match (plan.td_out, plan.fd_out) {
            (Some(_), Some(_)) => {
                let c3 = cfg.filters[2];
                let se = (cfg.attention != AttentionAxis::None).then(|| SeParams {
                    fc1_w: Param::uniform(
                        "ddam.fc1.weight",
                        &[plan.se_hidden, plan.se_input],
                        plan.se_input,
                        &mut rng,
                    ),
                    fc1_b: Param::zeros("ddam.fc1.bias", &[plan.se_hidden]),
                    fc2_w: Param::uniform(
                        "ddam.fc2.weight",
                        &[plan.attn_len, plan.se_hidden],
                        plan.se_hidden,
                        &mut rng,
                    ),
                    fc2_b: Param::zeros("ddam.fc2.bias", &[plan.attn_len]),
                });
                let fan_in = c3 * kernel * kernel;
                Some(DdamParams {
                    se,
                    joint_kernel: Param::uniform(
                        "ddam.joint.kernel",
                        &[cfg.joint_filters, c3, kernel, kernel],
                        fan_in,
                        &mut rng,
                    ),
                    joint_bias: Param::zeros("ddam.joint.bias", &[cfg.joint_filters]),
                    fc_w: Param::uniform(
                        "ddam.fc.weight",
                        &[1, cfg.joint_filters],
                        cfg.joint_filters,
                        &mut rng,
                    ),
                    fc_b: Param::zeros("ddam.fc.bias", &[1]),
                })
            }
            _ => None,
        };

        let c3 = cfg.filters[2];
        let td_head = td.is_some().then(|| HeadParams {
            w: Param::uniform("td.head.weight", &[1, c3], c3, &mut rng),
            b: Param::zeros("td.head.bias", &[1]),
        });
        let fd_head = fd.is_some().then(|| HeadParams {
            w: Param::uniform("fd.head.weight", &[1, c3], c3, &mut rng),
            b: Param::zeros("fd.head.bias", &[1]),
        });

        Ok(Self {
            cfg,
            plan,
            params: ModelParams { td, fd, ddam, td_head, fd_head },
        })
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn plan(&self) -> &ShapePlan {
        &self.plan
    }

    /// Stacks the positive halves of the batch followed by the negative
    /// halves into a `[2B, 1, H, N_p]` leaf. Matrices are stored peak-major
    /// (`N_p x H`), the network wants `H x N_p`, hence the transpose.
    fn assemble_input(
        &self,
        g: &mut Graph,
        batch: &[&MeasurementFeatures],
        select: impl Fn(&MeasurementFeatures) -> [&crate::matrix::Matrix; 2],
        height: usize,
    ) -> Result<Tensor, ModelError> {
        let b = batch.len();
        let n_p = self.cfg.n_p;
        let mut data = vec![0.0; 2 * b * height * n_p];
        for (bi, feats) in batch.iter().enumerate() {
            let [m_pos, m_neg] = select(feats);
            for (half, m) in [(0usize, m_pos), (1, m_neg)] {
                if m.rows() != n_p || m.cols() != height {
                    return Err(ModelError::InvalidConfig(format!(
                        "feature matrix of {} is {}x{}, config expects {}x{}",
                        feats.id,
                        m.rows(),
                        m.cols(),
                        n_p,
                        height,
                    )));
                }
                let base = (half * b + bi) * height * n_p;
                for h in 0..height {
                    for k in 0..n_p {
                        data[base + h * n_p + k] = m.get(k, h);
                    }
                }
            }
        }
        Ok(g.leaf(&[2 * b, 1, height, n_p], data))
    }

    fn bind_block(g: &mut Graph, blk: &ConvBlock, leaves: &mut Vec<Tensor>) -> BoundBlock {
        let mut bind = |p: &Param| {
            let t = g.leaf(&p.shape, p.data.clone());
            leaves.push(t);
            t
        };
        BoundBlock {
            kernel: bind(&blk.kernel),
            bias: bind(&blk.bias),
            gamma: bind(&blk.gamma),
            beta: bind(&blk.beta),
        }
    }

    fn run_branch(
        cfg: &ModelConfig,
        g: &mut Graph,
        mut x: Tensor,
        branch: &mut Branch,
        mode: Mode,
        leaves: &mut Vec<Tensor>,
    ) -> Result<Tensor, ModelError> {
        for blk in &mut branch.blocks {
            let bound = Self::bind_block(g, blk, leaves);
            x = g.conv2d(x, bound.kernel, bound.bias, cfg.stride)?;
            x = match cfg.block_order {
                BlockOrder::ConvReluBn => {
                    let a = g.relu(x);
                    g.batchnorm2d(a, bound.gamma, bound.beta, &mut blk.bn, cfg.bn_momentum, cfg.bn_eps, mode)?
                }
                BlockOrder::ConvBnRelu => {
                    let a = g.batchnorm2d(x, bound.gamma, bound.beta, &mut blk.bn, cfg.bn_momentum, cfg.bn_eps, mode)?;
                    g.relu(a)
                }
            };
        }
        Ok(x)
    }

    fn bind_ddam(g: &mut Graph, ddam: &DdamParams, leaves: &mut Vec<Tensor>) -> BoundDdam {
        let mut bind = |p: &Param| {
            let t = g.leaf(&p.shape, p.data.clone());
            leaves.push(t);
            t
        };
        BoundDdam {
            se: ddam.se.as_ref().map(|se| BoundSe {
                fc1_w: bind(&se.fc1_w),
                fc1_b: bind(&se.fc1_b),
                fc2_w: bind(&se.fc2_w),
                fc2_b: bind(&se.fc2_b),
            }),
            joint_kernel: bind(&ddam.joint_kernel),
            joint_bias: bind(&ddam.joint_bias),
            fc_w: bind(&ddam.fc_w),
            fc_b: bind(&ddam.fc_b),
        }
    }

    fn bind_head(g: &mut Graph, head: &HeadParams, leaves: &mut Vec<Tensor>) -> BoundHead {
        let w = g.leaf(&head.w.shape, head.w.data.clone());
        leaves.push(w);
        let b = g.leaf(&head.b.shape, head.b.data.clone());
        leaves.push(b);
        BoundHead { w, b }
    }

    /// Squeeze both maps along the attention axis, excite a gate, rescale,
    /// concatenate on the feature axis, convolve jointly, and reduce to a
    /// probability. Returns `(p_j, gate, pooled joint vector)`.
    fn run_ddam(
        &self,
        g: &mut Graph,
        x_t: Tensor,
        x_f: Tensor,
        bound: &BoundDdam,
    ) -> Result<(Tensor, Option<Tensor>, Tensor), ModelError> {
        let b = g.shape(x_t)[0];
        let n = g.shape(x_t)[3];
        if g.shape(x_f)[3] != n {
            return Err(ModelError::PeakAxisMismatch { td: n, fd: g.shape(x_f)[3] });
        }

        let (x_t, x_f, u) = match (&bound.se, self.cfg.attention) {
            (None, _) | (_, AttentionAxis::None) => (x_t, x_f, None),
            (Some(se), axis) => {
                // Squeeze: mean over every axis except the attended one.
                let (z, gate_shapes): (Tensor, _) = match axis {
                    AttentionAxis::Peak => {
                        let z_t = g.global_avg_pool(x_t, &[1, 2]);
                        let z_f = g.global_avg_pool(x_f, &[1, 2]);
                        let z = g.concat(&[z_t, z_f], 1)?;
                        (z, (vec![b, 1, 1, n], vec![b, 1, 1, n], 0))
                    }
                    AttentionAxis::Channel => {
                        let c = g.shape(x_t)[1];
                        let z_t = g.global_avg_pool(x_t, &[2, 3]);
                        let z_f = g.global_avg_pool(x_f, &[2, 3]);
                        let z = g.concat(&[z_t, z_f], 1)?;
                        (z, (vec![b, c, 1, 1], vec![b, c, 1, 1], 0))
                    }
                    AttentionAxis::Feature => {
                        let z_t = g.global_avg_pool(x_t, &[1, 3]);
                        let z_f = g.global_avg_pool(x_f, &[1, 3]);
                        let z = g.concat(&[z_t, z_f], 1)?;
                        let zt_len = g.shape(x_t)[2];
                        let zf_len = g.shape(x_f)[2];
                        (z, (vec![b, 1, zt_len, 1], vec![b, 1, zf_len, 1], zt_len))
                    }
                    AttentionAxis::None => unreachable!(),
                };
                // Excite: FC -> ReLU -> FC -> sigmoid.
                let h = g.fully_connected(z, se.fc1_w, se.fc1_b)?;
                let h = g.relu(h);
                let u_lin = g.fully_connected(h, se.fc2_w, se.fc2_b)?;
                let u = g.sigmoid(u_lin);

                let (t_shape, f_shape, split) = gate_shapes;
                let (u_t, u_f) = if self.cfg.attention == AttentionAxis::Feature {
                    // Per-domain feature axes differ in size; split the gate.
                    let zt_len = split;
                    let zf_len = g.shape(u)[1] - zt_len;
                    let a = g.slice(u, 1, 0, zt_len)?;
                    let bb = g.slice(u, 1, zt_len, zf_len)?;
                    (g.reshape(a, &t_shape)?, g.reshape(bb, &f_shape)?)
                } else {
                    (g.reshape(u, &t_shape)?, g.reshape(u, &f_shape)?)
                };
                let xt = g.mul_broadcast(x_t, u_t)?;
                let xf = g.mul_broadcast(x_f, u_f)?;
                (xt, xf, Some(u))
            }
        };

        // Join along the feature axis and reduce to a probability.
        let cat = g.concat(&[x_t, x_f], 2)?;
        let joint = g.conv2d(cat, bound.joint_kernel, bound.joint_bias, self.cfg.stride)?;
        let d_j = g.global_avg_pool(joint, &[2, 3]);
        let logit = g.fully_connected(d_j, bound.fc_w, bound.fc_b)?;
        Ok((g.sigmoid(logit), u, d_j))
    }

    fn run_head(
        g: &mut Graph,
        x: Tensor,
        head: &BoundHead,
    ) -> Result<(Tensor, Tensor), ModelError> {
        let d = g.global_avg_pool(x, &[2, 3]);
        let logit = g.fully_connected(d, head.w, head.b)?;
        Ok((g.sigmoid(logit), d))
    }

    /// Runs the network on a batch of measurements. In train mode the
    /// stacked positive+negative mini-batch drives the batch-norm statistics
    /// of each shared branch.
    pub fn forward(
        &mut self,
        g: &mut Graph,
        batch: &[&MeasurementFeatures],
        mode: Mode,
    ) -> Result<ForwardPass, ModelError> {
        assert!(!batch.is_empty(), "forward needs at least one measurement");
        let b = batch.len();
        let mut leaves = Vec::new();
        let cfg = self.cfg.clone();

        let mut td_maps = None;
        if self.params.td.is_some() {
            let input = self.assemble_input(g, batch, |f| [&f.td_pos, &f.td_neg], cfg.w_t)?;
            let branch = self.params.td.as_mut().expect("td branch present");
            let feat = Self::run_branch(&cfg, g, input, branch, mode, &mut leaves)?;
            let pos = g.slice(feat, 0, 0, b)?;
            let neg = g.slice(feat, 0, b, b)?;
            td_maps = Some((pos, neg));
        }

        let mut fd_maps = None;
        if self.params.fd.is_some() {
            let input = self.assemble_input(g, batch, |f| [&f.fd_pos, &f.fd_neg], cfg.f_bins)?;
            let branch = self.params.fd.as_mut().expect("fd branch present");
            let feat = Self::run_branch(&cfg, g, input, branch, mode, &mut leaves)?;
            let pos = g.slice(feat, 0, 0, b)?;
            let neg = g.slice(feat, 0, b, b)?;
            fd_maps = Some((pos, neg));
        }

        let mut p_jp = None;
        let mut p_jn = None;
        let mut u_pos = None;
        let mut u_neg = None;
        let mut d_jp = None;
        let mut d_jn = None;
        if let (Some(ddam), Some((x_tpg, x_tng)), Some((x_fpg, x_fng))) =
            (&self.params.ddam, td_maps, fd_maps)
        {
            let bound = Self::bind_ddam(g, ddam, &mut leaves);
            let (p, u, d) = self.run_ddam(g, x_tpg, x_fpg, &bound)?;
            p_jp = Some(p);
            u_pos = u;
            d_jp = Some(d);
            let (p, u, d) = self.run_ddam(g, x_tng, x_fng, &bound)?;
            p_jn = Some(p);
            u_neg = u;
            d_jn = Some(d);
        }

        let mut p_tp = None;
        let mut p_tn = None;
        let mut d_tp = None;
        let mut d_tn = None;
        if let (Some(head), Some((pos, neg))) = (&self.params.td_head, td_maps) {
            let bound = Self::bind_head(g, head, &mut leaves);
            let (p, d) = Self::run_head(g, pos, &bound)?;
            p_tp = Some(p);
            d_tp = Some(d);
            let (p, d) = Self::run_head(g, neg, &bound)?;
            p_tn = Some(p);
            d_tn = Some(d);
        }
        let mut p_fp = None;
        let mut p_fn = None;
        let mut d_fp = None;
        let mut d_fn = None;
        if let (Some(head), Some((pos, neg))) = (&self.params.fd_head, fd_maps) {
            let bound = Self::bind_head(g, head, &mut leaves);
            let (p, d) = Self::run_head(g, pos, &bound)?;
            p_fp = Some(p);
            d_fp = Some(d);
            let (p, d) = Self::run_head(g, neg, &bound)?;
            p_fn = Some(p);
            d_fn = Some(d);
        }

        Ok(ForwardPass {
            outputs: ForwardOutputs {
                batch: b,
                p_jp,
                p_jn,
                p_tp,
                p_tn,
                p_fp,
                p_fn,
                x_tpg: td_maps.map(|(p, _)| p),
                x_tng: td_maps.map(|(_, n)| n),
                x_fpg: fd_maps.map(|(p, _)| p),
                x_fng: fd_maps.map(|(_, n)| n),
                u_pos,
                u_neg,
                d_jp,
                d_jn,
                d_tp,
                d_tn,
                d_fp,
                d_fn,
            },
            param_leaves: leaves,
        })
    }

    /// One Adam step from the gradients accumulated in `pass`'s leaves.
    pub fn apply_grads(&mut self, g: &Graph, pass: &ForwardPass, adam: &AdamConfig) {
        let mut it = pass.param_leaves.iter();
        self.params.for_each_mut(|p| {
            let leaf = it.next().expect("every parameter was bound in forward");
            p.adam_step(g.grad(*leaf), adam);
        });
        assert!(it.next().is_none(), "more leaves than parameters");
    }

    pub fn to_checkpoint(&self, fold_id: u32, rng_seed: u64) -> Checkpoint {
        let mut params = Vec::new();
        self.params.for_each(|p| params.push(p.clone()));
        let mut buffers = Vec::new();
        for (name, br) in [("td", &self.params.td), ("fd", &self.params.fd)] {
            if let Some(br) = br {
                for (i, blk) in br.blocks.iter().enumerate() {
                    buffers.push(NamedBuffer {
                        name: format!("{name}.block{i}.bn.running_mean"),
                        shape: vec![blk.bn.channels()],
                        data: blk.bn.running_mean.clone(),
                    });
                    buffers.push(NamedBuffer {
                        name: format!("{name}.block{i}.bn.running_var"),
                        shape: vec![blk.bn.channels()],
                        data: blk.bn.running_var.clone(),
                    });
                }
            }
        }
        Checkpoint { fold_id, rng_seed, params, buffers }
    }

    /// Rebuilds a model from a checkpoint written by the same config.
    pub fn from_checkpoint(cfg: ModelConfig, ckpt: &Checkpoint) -> Result<Self, ModelError> {
        let mut model = Self::new(cfg, ckpt.rng_seed)?;
        let mut missing = Vec::new();
        model.params.for_each_mut(|p| {
            match ckpt.find_param(&p.name) {
                Some(saved) if saved.shape == p.shape => *p = saved.clone(),
                Some(saved) => missing.push(format!(
                    "{}: shape {:?} vs {:?}",
                    p.name, saved.shape, p.shape
                )),
                None => missing.push(format!("{} absent", p.name)),
            }
        });
        if !missing.is_empty() {
            return Err(ModelError::CheckpointMismatch(missing.join("; ")));
        }
        for (name, br) in [("td", &mut model.params.td), ("fd", &mut model.params.fd)] {
            if let Some(br) = br {
                for (i, blk) in br.blocks.iter_mut().enumerate() {
                    for (field, target) in [
                        ("running_mean", &mut blk.bn.running_mean),
                        ("running_var", &mut blk.bn.running_var),
                    ] {
                        let key = format!("{name}.block{i}.bn.{field}");
                        let buf = ckpt.find_buffer(&key).ok_or_else(|| {
                            ModelError::CheckpointMismatch(format!("{key} absent"))
                        })?;
                        if buf.data.len() != target.len() {
                            return Err(ModelError::CheckpointMismatch(format!(
                                "{key}: {} channels vs {}",
                                buf.data.len(),
                                target.len()
                            )));
                        }
                        target.copy_from_slice(&buf.data);
                    }
                }
            }
        }
        Ok(model)
    }
}

/// The classification loss (sum of per-head BCEs), the per-domain
/// cycle-consistency terms, and their weighted total.
pub fn compute_losses(
    g: &mut Graph,
    out: &ForwardOutputs,
    labels: &[f64],
    lambda: f64,
) -> Result<LossBreakdown, TensorError> {
    assert_eq!(out.batch, labels.len(), "one label per batch element");
    let mut l_cls: Option<Tensor> = None;
    for p in out.heads() {
        let term = g.bce_loss(p, labels)?;
        l_cls = Some(match l_cls {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    let l_cls = l_cls.expect("at least one active head");

    let mut kl_of = |a: Option<Tensor>, b: Option<Tensor>| -> Result<Option<Tensor>, TensorError> {
        match (a, b) {
            (Some(a), Some(b)) => {
                let sa = g.sigmoid(a);
                let sb = g.sigmoid(b);
                Ok(Some(g.bidirectional_kl(sa, sb)?))
            }
            _ => Ok(None),
        }
    };
    let l_ct = kl_of(out.x_tpg, out.x_tng)?;
    let l_cf = kl_of(out.x_fpg, out.x_fng)?;
    let l_c = match (l_ct, l_cf) {
        (Some(t), Some(f)) => Some(g.add(t, f)?),
        (Some(t), None) => Some(t),
        (None, Some(f)) => Some(f),
        (None, None) => None,
    };
    let l_total = match l_c {
        Some(l_c) => {
            let weighted = g.scale(l_c, lambda);
            g.add(l_cls, weighted)?
        }
        None => l_cls,
    };
    Ok(LossBreakdown { l_cls, l_ct, l_cf, l_c, l_total })
}

/// Final probability per batch element: the mean of the present heads.
pub fn predict(g: &Graph, out: &ForwardOutputs) -> Vec<f64> {
    let heads = out.heads();
    assert!(!heads.is_empty());
    (0..out.batch)
        .map(|i| heads.iter().map(|h| g.data(*h)[i]).sum::<f64>() / heads.len() as f64)
        .collect()
}
