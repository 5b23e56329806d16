//! Toy residual network with insertable nonlocal stages and exact gradients.
//!
//! Per position the trunk applies pre-activation residual blocks
//! `Z + W2 relu(s W1 relu(s Z))`, where the fixed scale `s` stands in for
//! batch normalization. A stage runs `N` sub-blocks of one of two kinds:
//!
//! * proposed: kernel built once from the stage input `X`, then
//!   `Z <- Z + W^n (K Z - Z)`;
//! * original: kernel rebuilt from the current `Z` every sub-block, then
//!   `Z <- Z + W_Z^n W_g^n (K(Z) Z)`.
//!
//! Kernels are row-normalized affinities, computed as a row softmax of the
//! log-affinity so large features cannot overflow.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::matrix::Matrix;
use crate::net::params::ParamSet;
use crate::rng::LabRng;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Formulation {
    Proposed,
    Original,
}

impl Formulation {
    pub fn as_str(self) -> &'static str {
        match self {
            Formulation::Proposed => "proposed",
            Formulation::Original => "original",
        }
    }
}

/// Affinity used inside the network. Embedded kernels learn their
/// projection `θ` (`dim x hidden`) as a parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case", deny_unknown_fields)]
pub enum NetKernel {
    Gaussian,
    Rbf { bandwidth: f64 },
    DiracDelta,
    Embedded { dim: usize, inner: Box<NetKernel> },
}

impl NetKernel {
    pub fn name(&self) -> String {
        match self {
            NetKernel::Gaussian => "gaussian".into(),
            NetKernel::Rbf { .. } => "rbf".into(),
            NetKernel::DiracDelta => "dirac_delta".into(),
            NetKernel::Embedded { inner, .. } => format!("embedded_{}", inner.name()),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            NetKernel::Rbf { bandwidth } if !(bandwidth.is_finite() && *bandwidth > 0.0) => {
                Err(LabError::Config(format!("rbf bandwidth must be positive, got {bandwidth}")))
            }
            NetKernel::Embedded { dim, inner } => {
                if *dim == 0 {
                    return Err(LabError::Config("embedding dimension must be positive".into()));
                }
                match **inner {
                    NetKernel::Gaussian | NetKernel::Rbf { .. } => inner.validate(),
                    _ => Err(LabError::Config(
                        "embedded kernels must wrap a gaussian or rbf affinity".into(),
                    )),
                }
            }
            _ => Ok(()),
        }
    }

    fn embedding_dim(&self) -> Option<usize> {
        match self {
            NetKernel::Embedded { dim, .. } => Some(*dim),
            _ => None,
        }
    }

    fn base(&self) -> &NetKernel {
        match self {
            NetKernel::Embedded { inner, .. } => inner,
            other => other,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub formulation: Formulation,
    pub sub_blocks: usize,
    pub kernel: NetKernel,
    /// The stage runs right after trunk block `placement`.
    pub placement: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub input_channels: usize,
    pub hidden_channels: usize,
    pub trunk_blocks: usize,
    #[serde(default = "default_block_scale")]
    pub block_scale: f64,
    pub num_classes: usize,
    #[serde(default)]
    pub stages: Vec<StageConfig>,
}

/// Fixed residual-branch scale standing in for batch normalization.
pub const DEFAULT_BLOCK_SCALE: f64 = 0.5;

fn default_block_scale() -> f64 {
    DEFAULT_BLOCK_SCALE
}

/// Scale of the proposed stage weights at initialization, relative to the
/// critical weight of the least favourable row-stochastic kernel (`1`, for an
/// eigenvalue at `-1`).
pub const PROPOSED_INIT_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
enum SubBlockParams {
    Proposed { w: usize },
    Original { w_z: usize, w_g: usize },
}

#[derive(Debug, Clone, PartialEq)]
struct StageLayout {
    theta: Option<usize>,
    sub_blocks: Vec<SubBlockParams>,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    stem_w: usize,
    stem_b: usize,
    blocks: Vec<(usize, usize)>,
    stages: Vec<StageLayout>,
    head_w: usize,
    head_b: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    config: NetworkConfig,
    layout: Layout,
    /// Stage indices to run after each trunk block.
    schedule: Vec<Vec<usize>>,
}

/// Sub-block weights of one stage after training.
#[derive(Debug, Clone, PartialEq)]
pub enum SubBlockWeights<T> {
    Scalar(T),
    Matrix(Matrix<T>),
    Factored { w_z: Matrix<T>, w_g: Matrix<T> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageWeightsSnapshot<T> {
    pub stage: usize,
    pub formulation: Formulation,
    pub sub_blocks: Vec<SubBlockWeights<T>>,
}

#[derive(Debug, Clone)]
struct BlockCache<T> {
    pre_a: Matrix<T>,
    a: Matrix<T>,
    pre_b: Matrix<T>,
    b: Matrix<T>,
}

#[derive(Debug, Clone)]
struct KernelCache<T> {
    /// Features the affinity compared (after the embedding, if any).
    e: Matrix<T>,
    k: Matrix<T>,
}

#[derive(Debug, Clone)]
enum StageCache<T> {
    Proposed {
        x: Matrix<T>,
        kernel: KernelCache<T>,
        zs: Vec<Matrix<T>>,
        ds: Vec<Matrix<T>>,
    },
    Original {
        zs: Vec<Matrix<T>>,
        kernels: Vec<KernelCache<T>>,
        sums: Vec<Matrix<T>>,
    },
}

#[derive(Debug, Clone)]
enum Step<T> {
    Block(usize, BlockCache<T>),
    Stage(usize, StageCache<T>),
}

/// Intermediates retained by [`Network::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    x: Matrix<T>,
    trace: Vec<Step<T>>,
    pooled: Vec<T>,
    pub logits: Vec<T>,
    fingerprint: u64,
}

impl<T: Scalar> ForwardCache<T> {
    /// Kernel matrices of each stage in execution order (first sub-block for
    /// the original formulation).
    pub fn stage_kernels(&self) -> Vec<(usize, Matrix<T>)> {
        self.trace
            .iter()
            .filter_map(|s| match s {
                Step::Stage(i, StageCache::Proposed { kernel, .. }) => Some((*i, kernel.k.clone())),
                Step::Stage(i, StageCache::Original { kernels, .. }) => Some((*i, kernels[0].k.clone())),
                Step::Block(..) => None,
            })
            .collect()
    }
}

fn relu<T: Scalar>(m: &Matrix<T>) -> Matrix<T> {
    m.map(|x| if x > T::zero() { x } else { T::zero() })
}

fn relu_mask<T: Scalar>(grad: &Matrix<T>, pre: &Matrix<T>) -> Matrix<T> {
    Matrix::from_fn(grad.rows(), grad.cols(), |i, j| {
        if pre[(i, j)] > T::zero() {
            grad[(i, j)]
        } else {
            T::zero()
        }
    })
}

fn add_row_bias<T: Scalar>(m: &mut Matrix<T>, bias: &Matrix<T>) {
    for i in 0..m.rows() {
        for (x, &b) in m.row_mut(i).iter_mut().zip(bias.row(0)) {
            *x += b;
        }
    }
}

fn check_finite<T: Scalar>(m: &Matrix<T>, what: &str) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(LabError::NonFinite(format!("forward activations diverged in {what}")))
    }
}

pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let mx = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&l| (l - mx).exp()).collect();
    let s: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / s).collect()
}

/// `(loss, probabilities)` of softmax cross-entropy.
pub fn cross_entropy<T: Scalar>(logits: &[T], label: usize) -> (T, Vec<T>) {
    let mx = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = mx + logits.iter().map(|&l| (l - mx).exp()).sum::<T>().ln();
    (lse - logits[label], softmax(logits))
}

/// Row-normalized affinity of a non-embedded kernel on features `e`.
fn kernel_matrix<T: Scalar>(kind: &NetKernel, e: &Matrix<T>) -> Matrix<T> {
    let m = e.rows();
    let log_aff = match kind {
        NetKernel::DiracDelta => return Matrix::identity(m),
        NetKernel::Gaussian => e.matmul_t(e).expect("square gram"),
        NetKernel::Rbf { bandwidth } => {
            let inv = T::c(-0.5 / (bandwidth * bandwidth));
            Matrix::from_fn(m, m, |i, j| {
                let d2: T = e.row(i).iter().zip(e.row(j)).map(|(&a, &b)| (a - b) * (a - b)).sum();
                d2 * inv
            })
        }
        NetKernel::Embedded { .. } => unreachable!("embedding resolved by caller"),
    };
    let mut k = Matrix::zeros(m, m);
    for i in 0..m {
        let row = softmax(log_aff.row(i));
        k.row_mut(i).copy_from_slice(&row);
    }
    k
}

/// Gradient w.r.t. the compared features `e` given the gradient `dk` of the
/// row-normalized kernel.
fn kernel_backward<T: Scalar>(kind: &NetKernel, e: &Matrix<T>, k: &Matrix<T>, dk: &Matrix<T>) -> Matrix<T> {
    let m = e.rows();
    if matches!(kind, NetKernel::DiracDelta) {
        return Matrix::zeros(m, e.cols());
    }
    // row softmax backward
    let mut dl = Matrix::zeros(m, m);
    for i in 0..m {
        let inner: T = k.row(i).iter().zip(dk.row(i)).map(|(&a, &b)| a * b).sum();
        for j in 0..m {
            dl[(i, j)] = k[(i, j)] * (dk[(i, j)] - inner);
        }
    }
    let sym = dl.add(&dl.transpose()).expect("square");
    match kind {
        NetKernel::Gaussian => sym.matmul(e).expect("shapes"),
        NetKernel::Rbf { bandwidth } => {
            let c = T::c(-1.0 / (bandwidth * bandwidth));
            let se = sym.matmul(e).expect("shapes");
            let rs = sym.row_sums();
            Matrix::from_fn(m, e.cols(), |i, a| c * (rs[i] * e[(i, a)] - se[(i, a)]))
        }
        _ => unreachable!(),
    }
}

impl Network {
    pub fn new(config: NetworkConfig) -> Result<Self> {
        if config.input_channels == 0 || config.hidden_channels == 0 {
            return Err(LabError::Config("channel counts must be positive".into()));
        }
        if config.num_classes < 2 {
            return Err(LabError::Config("need at least two classes".into()));
        }
        if !(config.block_scale.is_finite() && config.block_scale > 0.0) {
            return Err(LabError::Config("block_scale must be positive".into()));
        }
        let mut schedule = vec![Vec::new(); config.trunk_blocks];
        for (s, st) in config.stages.iter().enumerate() {
            if st.placement >= config.trunk_blocks {
                return Err(LabError::Config(format!(
                    "stage {s} placed after block {} but the trunk has {} blocks",
                    st.placement, config.trunk_blocks
                )));
            }
            if st.sub_blocks == 0 {
                return Err(LabError::Config(format!("stage {s} needs at least one sub-block")));
            }
            st.kernel.validate()?;
            schedule[st.placement].push(s);
        }
        let layout = Self::plan(&config);
        Ok(Self {
            config,
            layout,
            schedule,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    fn factor_dim(&self) -> usize {
        (self.config.hidden_channels / 2).max(1)
    }

    /// Parameter order: stem, then each trunk block followed by the stages
    /// placed after it, then the classifier head.
    fn plan(config: &NetworkConfig) -> Layout {
        let mut next = 0;
        let mut take = || {
            next += 1;
            next - 1
        };
        let stem_w = take();
        let stem_b = take();
        let mut blocks = Vec::new();
        let mut stages = vec![None; config.stages.len()];
        for b in 0..config.trunk_blocks {
            blocks.push((take(), take()));
            for (s, st) in config.stages.iter().enumerate().filter(|(_, st)| st.placement == b) {
                let theta = st.kernel.embedding_dim().map(|_| take());
                let sub_blocks = (0..st.sub_blocks)
                    .map(|_| match st.formulation {
                        Formulation::Proposed => SubBlockParams::Proposed { w: take() },
                        Formulation::Original => SubBlockParams::Original {
                            w_z: take(),
                            w_g: take(),
                        },
                    })
                    .collect();
                stages[s] = Some(StageLayout { theta, sub_blocks });
            }
        }
        Layout {
            stem_w,
            stem_b,
            blocks,
            stages: stages.into_iter().map(|s| s.expect("every stage placed")).collect(),
            head_w: take(),
            head_b: take(),
        }
    }

    /// Deterministic initialization: trunk, head and embeddings uniform in
    /// `±sqrt(1/fan_in)`, biases zero, proposed stage weights a stable
    /// multiple of the identity, original stage factors small uniform.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> ParamSet<T> {
        let c = &self.config;
        let h = c.hidden_channels;
        let mut rng = LabRng::derive(seed, 0x5eed);
        let mut uniform = |rows: usize, cols: usize, fan_in: usize, scale: f64| {
            let a = scale * (1.0 / fan_in as f64).sqrt();
            Matrix::from_fn(rows, cols, |_, _| rng.uniform_t::<T>(-a, a))
        };
        let mut p = ParamSet::new();
        p.push("stem.w", uniform(h, c.input_channels, c.input_channels, 1.0));
        p.push("stem.b", Matrix::zeros(1, h));
        for b in 0..c.trunk_blocks {
            p.push(format!("block{b}.w1"), uniform(h, h, h, 1.0));
            p.push(format!("block{b}.w2"), uniform(h, h, h, 1.0));
            for (s, st) in c.stages.iter().enumerate().filter(|(_, st)| st.placement == b) {
                if let Some(dim) = st.kernel.embedding_dim() {
                    p.push(format!("stage{s}.theta"), uniform(dim, h, h, 1.0));
                }
                for n in 0..st.sub_blocks {
                    match st.formulation {
                        Formulation::Proposed => {
                            p.push(
                                format!("stage{s}.sub{n}.w"),
                                Matrix::identity(h).scale(T::c(PROPOSED_INIT_FRACTION)),
                            );
                        }
                        Formulation::Original => {
                            let f = self.factor_dim();
                            p.push(format!("stage{s}.sub{n}.w_z"), uniform(h, f, f, 1.0));
                            p.push(format!("stage{s}.sub{n}.w_g"), uniform(f, h, h, 1.0));
                        }
                    }
                }
            }
        }
        p.push("head.w", uniform(c.num_classes, h, h, 1.0));
        p.push("head.b", Matrix::zeros(1, c.num_classes));
        debug_assert_eq!(p.tensors.len(), self.layout.head_b + 1);
        p
    }

    /// Zero parameters with the right layout.
    pub fn zero_params<T: Scalar>(&self) -> ParamSet<T> {
        self.init_params::<T>(0).zeros_like()
    }

    fn check_params<T: Scalar>(&self, params: &ParamSet<T>) -> Result<()> {
        let expect = self.zero_params::<T>();
        if !params.same_layout(&expect) {
            return Err(LabError::DimensionMismatch(
                "parameter tensors do not match the network configuration".into(),
            ));
        }
        Ok(())
    }

    fn embed<T: Scalar>(&self, params: &ParamSet<T>, stage: usize, z: &Matrix<T>) -> Matrix<T> {
        match self.layout.stages[stage].theta {
            Some(t) => z.matmul_t(params.get(t)).expect("embedding shape"),
            None => z.clone(),
        }
    }

    fn stage_kernel<T: Scalar>(&self, params: &ParamSet<T>, stage: usize, z: &Matrix<T>) -> KernelCache<T> {
        let e = self.embed(params, stage, z);
        let k = kernel_matrix(self.config.stages[stage].kernel.base(), &e);
        KernelCache { e, k }
    }

    /// Runs one proposed stage from stage input `x` but an arbitrary starting
    /// state `z0`; returns the kernel (a function of `x` only) and the output.
    pub fn run_proposed_stage<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        stage: usize,
        x: &Matrix<T>,
        z0: &Matrix<T>,
    ) -> Result<(Matrix<T>, Matrix<T>)> {
        self.check_params(params)?;
        if self.config.stages.get(stage).map(|s| s.formulation) != Some(Formulation::Proposed) {
            return Err(LabError::Config(format!("stage {stage} is not a proposed stage")));
        }
        let kc = self.stage_kernel(params, stage, x);
        let mut z = z0.clone();
        for sub in &self.layout.stages[stage].sub_blocks {
            let SubBlockParams::Proposed { w } = sub else { unreachable!() };
            let d = kc.k.matmul(&z)?.sub(&z)?;
            z.axpy(T::one(), &d.matmul_t(params.get(*w))?)?;
        }
        Ok((kc.k, z))
    }

    fn forward_stage<T: Scalar>(&self, params: &ParamSet<T>, stage: usize, x: Matrix<T>) -> Result<(Matrix<T>, StageCache<T>)> {
        let layout = &self.layout.stages[stage];
        match self.config.stages[stage].formulation {
            Formulation::Proposed => {
                let kernel = self.stage_kernel(params, stage, &x);
                let mut zs = Vec::with_capacity(layout.sub_blocks.len());
                let mut ds = Vec::with_capacity(layout.sub_blocks.len());
                let mut z = x.clone();
                for sub in &layout.sub_blocks {
                    let SubBlockParams::Proposed { w } = sub else { unreachable!() };
                    let d = kernel.k.matmul(&z)?.sub(&z)?;
                    let mut next = z.clone();
                    next.axpy(T::one(), &d.matmul_t(params.get(*w))?)?;
                    check_finite(&next, "proposed stage")?;
                    zs.push(z);
                    ds.push(d);
                    z = next;
                }
                Ok((z, StageCache::Proposed { x, kernel, zs, ds }))
            }
            Formulation::Original => {
                let mut zs = Vec::new();
                let mut kernels = Vec::new();
                let mut sums = Vec::new();
                let mut z = x;
                for sub in &layout.sub_blocks {
                    let SubBlockParams::Original { w_z, w_g } = sub else { unreachable!() };
                    let kc = self.stage_kernel(params, stage, &z);
                    let s = kc.k.matmul(&z)?;
                    let w = params.get(*w_z).matmul(params.get(*w_g))?;
                    let mut next = z.clone();
                    next.axpy(T::one(), &s.matmul_t(&w)?)?;
                    check_finite(&next, "original stage")?;
                    zs.push(z);
                    kernels.push(kc);
                    sums.push(s);
                    z = next;
                }
                Ok((z, StageCache::Original { zs, kernels, sums }))
            }
        }
    }

    pub fn forward<T: Scalar>(&self, params: &ParamSet<T>, x: &Matrix<T>) -> Result<ForwardCache<T>> {
        self.check_params(params)?;
        if x.cols() != self.config.input_channels || x.rows() == 0 {
            return Err(LabError::DimensionMismatch(format!(
                "input is {}x{}, network expects {} channels",
                x.rows(),
                x.cols(),
                self.config.input_channels
            )));
        }
        let s = T::c(self.config.block_scale);
        let mut z = x.matmul_t(params.get(self.layout.stem_w))?;
        add_row_bias(&mut z, params.get(self.layout.stem_b));
        check_finite(&z, "stem")?;
        let mut trace = Vec::new();
        for (b, &(w1, w2)) in self.layout.blocks.iter().enumerate() {
            let pre_a = z.scale(s);
            let a = relu(&pre_a);
            let pre_b = a.matmul_t(params.get(w1))?.scale(s);
            let bm = relu(&pre_b);
            z.axpy(T::one(), &bm.matmul_t(params.get(w2))?)?;
            check_finite(&z, "trunk block")?;
            trace.push(Step::Block(b, BlockCache { pre_a, a, pre_b, b: bm }));
            for &st in &self.schedule[b] {
                let (out, cache) = self.forward_stage(params, st, z)?;
                z = out;
                trace.push(Step::Stage(st, cache));
            }
        }
        let m = T::from_usize_lossy(z.rows());
        let pooled: Vec<T> = z.col_sums().into_iter().map(|v| v / m).collect();
        let mut logits = params.get(self.layout.head_w).matvec(&pooled)?;
        for (l, &b) in logits.iter_mut().zip(params.get(self.layout.head_b).row(0)) {
            *l += b;
        }
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(LabError::NonFinite("forward activations diverged in head".into()));
        }
        Ok(ForwardCache {
            x: x.clone(),
            trace,
            pooled,
            logits,
            fingerprint: params.fingerprint(),
        })
    }

    /// Softmax cross-entropy loss and its exact gradient w.r.t. every parameter.
    pub fn backward<T: Scalar>(&self, params: &ParamSet<T>, cache: &ForwardCache<T>, label: usize) -> Result<(T, ParamSet<T>)> {
        if cache.fingerprint != params.fingerprint() {
            return Err(LabError::Precondition("stale forward cache: parameters changed".into()));
        }
        if label >= self.config.num_classes {
            return Err(LabError::Config(format!("label {label} out of range")));
        }
        let mut grads = params.zeros_like();
        let l = &self.layout;
        let (loss, probs) = cross_entropy(&cache.logits, label);
        let mut dlogits = probs;
        dlogits[label] -= T::one();
        {
            let gw = grads.get_mut(l.head_w);
            for (c, &dl) in dlogits.iter().enumerate() {
                for (g, &p) in gw.row_mut(c).iter_mut().zip(&cache.pooled) {
                    *g += dl * p;
                }
            }
        }
        for (g, &dl) in grads.get_mut(l.head_b).row_mut(0).iter_mut().zip(&dlogits) {
            *g += dl;
        }
        let dpooled = params.get(l.head_w).transpose().matvec(&dlogits)?;
        let rows = cache.x.rows();
        let inv_m = T::one() / T::from_usize_lossy(rows);
        let mut g = Matrix::from_fn(rows, dpooled.len(), |_, c| dpooled[c] * inv_m);

        let s = T::c(self.config.block_scale);
        for step in cache.trace.iter().rev() {
            match step {
                Step::Block(b, bc) => {
                    let (w1, w2) = l.blocks[*b];
                    grads.get_mut(w2).axpy(T::one(), &g.t_matmul(&bc.b)?)?;
                    let db = g.matmul(params.get(w2))?;
                    let dh = relu_mask(&db, &bc.pre_b).scale(s);
                    grads.get_mut(w1).axpy(T::one(), &dh.t_matmul(&bc.a)?)?;
                    let da = dh.matmul(params.get(w1))?;
                    let dp = relu_mask(&da, &bc.pre_a).scale(s);
                    g.axpy(T::one(), &dp)?;
                }
                Step::Stage(st, sc) => {
                    g = self.backward_stage(params, &mut grads, *st, sc, g)?;
                }
            }
        }
        grads.get_mut(l.stem_w).axpy(T::one(), &g.t_matmul(&cache.x)?)?;
        let colsum = g.col_sums();
        for (gb, v) in grads.get_mut(l.stem_b).row_mut(0).iter_mut().zip(colsum) {
            *gb += v;
        }
        Ok((loss, grads))
    }

    /// Pushes `de` (gradient w.r.t. compared features) back to the stage
    /// state `z` and the embedding.
    fn embed_backward<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        grads: &mut ParamSet<T>,
        stage: usize,
        z: &Matrix<T>,
        de: Matrix<T>,
    ) -> Result<Matrix<T>> {
        match self.layout.stages[stage].theta {
            Some(t) => {
                grads.get_mut(t).axpy(T::one(), &de.t_matmul(z)?)?;
                de.matmul(params.get(t))
            }
            None => Ok(de),
        }
    }

    fn backward_stage<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        grads: &mut ParamSet<T>,
        stage: usize,
        cache: &StageCache<T>,
        mut g: Matrix<T>,
    ) -> Result<Matrix<T>> {
        let layout = &self.layout.stages[stage];
        let base = self.config.stages[stage].kernel.base();
        match cache {
            StageCache::Proposed { x, kernel, zs, ds } => {
                let m = x.rows();
                let mut dk = Matrix::zeros(m, m);
                for (n, sub) in layout.sub_blocks.iter().enumerate().rev() {
                    let SubBlockParams::Proposed { w } = sub else { unreachable!() };
                    grads.get_mut(*w).axpy(T::one(), &g.t_matmul(&ds[n])?)?;
                    let dd = g.matmul(params.get(*w))?;
                    dk.axpy(T::one(), &dd.matmul_t(&zs[n])?)?;
                    let mut dz = g;
                    dz.axpy(-T::one(), &dd)?;
                    dz.axpy(T::one(), &kernel.k.t_matmul(&dd)?)?;
                    g = dz;
                }
                let de = kernel_backward(base, &kernel.e, &kernel.k, &dk);
                let dx = self.embed_backward(params, grads, stage, x, de)?;
                g.axpy(T::one(), &dx)?;
                Ok(g)
            }
            StageCache::Original { zs, kernels, sums } => {
                for (n, sub) in layout.sub_blocks.iter().enumerate().rev() {
                    let SubBlockParams::Original { w_z, w_g } = sub else { unreachable!() };
                    let wz = params.get(*w_z);
                    let wg = params.get(*w_g);
                    let w = wz.matmul(wg)?;
                    let dw = g.t_matmul(&sums[n])?;
                    grads.get_mut(*w_z).axpy(T::one(), &dw.matmul_t(wg)?)?;
                    grads.get_mut(*w_g).axpy(T::one(), &wz.t_matmul(&dw)?)?;
                    let ds = g.matmul(&w)?;
                    let kc = &kernels[n];
                    let mut dz = g;
                    dz.axpy(T::one(), &kc.k.t_matmul(&ds)?)?;
                    let dk = ds.matmul_t(&zs[n])?;
                    let de = kernel_backward(base, &kc.e, &kc.k, &dk);
                    let dzk = self.embed_backward(params, grads, stage, &zs[n], de)?;
                    dz.axpy(T::one(), &dzk)?;
                    g = dz;
                }
                Ok(g)
            }
        }
    }

    /// Mean loss, summed-then-averaged gradients and correct count over a batch.
    pub fn batch_gradient<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        batch: &[(&Matrix<T>, usize)],
    ) -> Result<(T, ParamSet<T>, usize)> {
        let mut total = params.zeros_like();
        let mut loss = T::zero();
        let mut correct = 0;
        for &(x, y) in batch {
            let cache = self.forward(params, x)?;
            if argmax(&cache.logits) == y {
                correct += 1;
            }
            let (l, g) = self.backward(params, &cache, y)?;
            loss += l;
            total.axpy(T::one(), &g);
        }
        let inv = T::one() / T::from_usize_lossy(batch.len().max(1));
        total.scale(inv);
        Ok((loss * inv, total, correct))
    }

    /// Mean loss over a batch, forward only.
    pub fn batch_loss<T: Scalar>(&self, params: &ParamSet<T>, batch: &[(&Matrix<T>, usize)]) -> Result<T> {
        let mut loss = T::zero();
        for &(x, y) in batch {
            let cache = self.forward(params, x)?;
            loss += cross_entropy(&cache.logits, y).0;
        }
        Ok(loss / T::from_usize_lossy(batch.len().max(1)))
    }

    pub fn stage_weights<T: Scalar>(&self, params: &ParamSet<T>) -> Vec<StageWeightsSnapshot<T>> {
        self.layout
            .stages
            .iter()
            .enumerate()
            .map(|(s, st)| StageWeightsSnapshot {
                stage: s,
                formulation: self.config.stages[s].formulation,
                sub_blocks: st
                    .sub_blocks
                    .iter()
                    .map(|sub| match sub {
                        SubBlockParams::Proposed { w } => SubBlockWeights::Matrix(params.get(*w).clone()),
                        SubBlockParams::Original { w_z, w_g } => SubBlockWeights::Factored {
                            w_z: params.get(*w_z).clone(),
                            w_g: params.get(*w_g).clone(),
                        },
                    })
                    .collect(),
            })
            .collect()
    }
}

pub fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
