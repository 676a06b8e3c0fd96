//! Context-conditioned sampling and compression policies.
//!
//! Each telemetry entry gets a three-way decision: skip it, compress it with
//! the generative codec, or ship it losslessly. The policy emits a D×3 logits
//! matrix per context; Gumbel-Softmax relaxation with a straight-through
//! estimator makes the discrete draw trainable.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::codec::RateModel;
use crate::error::{GgzError, Result};
use crate::nn::{Mlp, ParamSet, TapeBind};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Decision column: entry not sampled.
pub const COL_SKIP: usize = 0;
/// Decision column: sampled, generative compression.
pub const COL_GEN: usize = 1;
/// Decision column: sampled, lossless compression.
pub const COL_LC: usize = 2;

pub const HOURS_PER_DAY: usize = 24;

/// Additive logit mask for columns a codec mode disables. Large but finite so
/// the logits matrix stays finite under its own invariant.
const DISABLED_LOGIT: f64 = -1e9;

/// Raw context indices for one window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ContextKey {
    pub bs_class: usize,
    pub hour: usize,
    pub task: Option<usize>,
}

/// Embedding table layout for the context vector.
#[derive(Clone, Debug)]
pub struct EmbeddingSpec {
    pub n_classes: usize,
    pub class_dim: usize,
    pub hour_dim: usize,
    pub n_tasks: usize,
    pub task_dim: usize,
    /// Task embedding participates only in goal-oriented mode.
    pub with_task: bool,
}

impl EmbeddingSpec {
    pub fn ctx_dim(&self) -> usize {
        self.class_dim + self.hour_dim + if self.with_task { self.task_dim } else { 0 }
    }

    /// Warn when the context stops being "low-cost" relative to the data.
    pub fn check_against(&self, d: usize) {
        if self.ctx_dim() * 4 >= d {
            log::warn!(
                "context dim {} is not small next to data dim {d}; policies may overfit contexts",
                self.ctx_dim()
            );
        }
    }

    pub fn register(&self, params: &mut ParamSet, rng: &mut ChaCha8Rng) {
        params.insert("embed.class", crate::nn::glorot(rng, self.n_classes, self.class_dim));
        params.insert("embed.hour", crate::nn::glorot(rng, HOURS_PER_DAY, self.hour_dim));
        if self.with_task {
            params.insert("embed.task", crate::nn::glorot(rng, self.n_tasks, self.task_dim));
        }
    }

    /// Look up and concatenate the context embeddings for a batch: `B×C`.
    pub fn build_context(
        &self,
        tape: &mut Tape,
        bind: &mut TapeBind,
        contexts: &[ContextKey],
    ) -> Result<Var> {
        let mut classes = Vec::with_capacity(contexts.len());
        let mut hours = Vec::with_capacity(contexts.len());
        let mut tasks = Vec::with_capacity(contexts.len());
        for c in contexts {
            if c.bs_class >= self.n_classes {
                return Err(GgzError::InvalidArg(format!(
                    "bs_class {} out of range for embed.class with {} rows",
                    c.bs_class, self.n_classes
                )));
            }
            if c.hour >= HOURS_PER_DAY {
                return Err(GgzError::InvalidArg(format!(
                    "hour {} out of range for embed.hour with {HOURS_PER_DAY} rows",
                    c.hour
                )));
            }
            classes.push(c.bs_class);
            hours.push(c.hour);
            if self.with_task {
                let t = c.task.ok_or_else(|| {
                    GgzError::InvalidArg("goal-oriented context requires a task id".into())
                })?;
                if t >= self.n_tasks {
                    return Err(GgzError::InvalidArg(format!(
                        "task {t} out of range for embed.task with {} rows",
                        self.n_tasks
                    )));
                }
                tasks.push(t);
            }
        }
        let class_table = bind.var(tape, "embed.class")?;
        let hour_table = bind.var(tape, "embed.hour")?;
        let class_rows = tape.gather_rows(class_table, &classes)?;
        let hour_rows = tape.gather_rows(hour_table, &hours)?;
        let mut ctx = tape.concat_cols(class_rows, hour_rows)?;
        if self.with_task {
            let task_table = bind.var(tape, "embed.task")?;
            let task_rows = tape.gather_rows(task_table, &tasks)?;
            ctx = tape.concat_cols(ctx, task_rows)?;
        }
        Ok(ctx)
    }
}

/// Which compression routes the policy may pick.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CodecMode {
    Hybrid,
    GenerativeOnly,
    LosslessOnly,
}

impl CodecMode {
    /// Column disabled in this mode, if any.
    pub fn disabled_column(&self) -> Option<usize> {
        match self {
            CodecMode::Hybrid => None,
            CodecMode::GenerativeOnly => Some(COL_LC),
            CodecMode::LosslessOnly => Some(COL_GEN),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PolicyKind {
    /// Two-layer MLP from context to logits.
    Adaptive { hidden: usize },
    /// One learned logits matrix shared by every context.
    Fixed,
}

/// The joint sampling/compression policy head.
#[derive(Clone, Debug)]
pub struct PolicySpec {
    pub kind: PolicyKind,
    pub d: usize,
    pub ctx_dim: usize,
    pub mode: CodecMode,
    /// Sampling fraction the head starts at (the budget, normally); the
    /// dual loop then only has to correct around this operating point.
    pub init_sr: f64,
}

impl PolicySpec {
    fn mlp(&self) -> Option<Mlp> {
        match self.kind {
            PolicyKind::Adaptive { hidden } => Some(
                Mlp::new(
                    "policy",
                    vec![self.ctx_dim, hidden, 3 * self.d],
                    crate::nn::Activation::Elu,
                )
                .with_final_zero_init(),
            ),
            PolicyKind::Fixed => None,
        }
    }

    /// Name of the logits-producing parameter pair (weights, bias), used by
    /// the training loop's leak-to-anchor regularizer.
    pub fn head_param_names(&self) -> Vec<String> {
        match self.kind {
            PolicyKind::Adaptive { .. } => vec!["policy.w1".into(), "policy.b1".into()],
            PolicyKind::Fixed => vec!["policy.logits".into()],
        }
    }

    /// Per-column starting logits realizing `init_sr` with the sampled mass
    /// split evenly over the enabled compression routes.
    fn init_column_logits(&self) -> [f64; 3] {
        let s = self.init_sr.clamp(0.02, 0.98);
        let skip = (1.0 - s).ln();
        let mut cols = [skip, f64::NEG_INFINITY, f64::NEG_INFINITY];
        match self.mode.disabled_column() {
            None => {
                cols[COL_GEN] = (s / 2.0).ln();
                cols[COL_LC] = (s / 2.0).ln();
            }
            Some(disabled) => {
                let enabled = if disabled == COL_GEN { COL_LC } else { COL_GEN };
                cols[enabled] = s.ln();
                // the disabled column is masked out additively at forward
                // time; keep its stored logit finite
                cols[disabled] = s.ln();
            }
        }
        cols
    }

    pub fn register(&self, params: &mut ParamSet, rng: &mut ChaCha8Rng) {
        let cols = self.init_column_logits();
        match self.mlp() {
            Some(mlp) => {
                mlp.register(params, rng);
                let mut bias = Tensor::zeros(&[3 * self.d]);
                for (i, b) in bias.data_mut().iter_mut().enumerate() {
                    *b = cols[i % 3];
                }
                params.insert("policy.b1", bias);
            }
            None => {
                let mut logits = Tensor::zeros(&[self.d, 3]);
                for (i, l) in logits.data_mut().iter_mut().enumerate() {
                    *l = cols[i % 3];
                }
                params.insert("policy.logits", logits);
            }
        }
    }

    /// Logits for a batch of contexts, shaped `(B·D)×3`. The fixed policy
    /// ignores the context vector and tiles its single matrix.
    pub fn logits(
        &self,
        tape: &mut Tape,
        bind: &mut TapeBind,
        ctx: Option<Var>,
        batch: usize,
    ) -> Result<Var> {
        let raw = match self.mlp() {
            Some(mlp) => {
                let ctx = ctx.ok_or_else(|| {
                    GgzError::Contract("adaptive policy needs a context batch".into())
                })?;
                let mut unused = unused_rng();
                let flat = mlp.forward(tape, bind, ctx, false, &mut unused)?;
                tape.reshape(flat, vec![batch * self.d, 3])?
            }
            None => {
                let logits = bind.var(tape, "policy.logits")?;
                tape.tile_rows(logits, batch)?
            }
        };
        match self.mode.disabled_column() {
            None => Ok(raw),
            Some(col) => {
                let mut mask = Tensor::zeros(&[batch * self.d, 3]);
                for r in 0..batch * self.d {
                    mask.data_mut()[r * 3 + col] = DISABLED_LOGIT;
                }
                let m = tape.constant(mask);
                tape.add(raw, m)
            }
        }
    }

    /// Deterministic logits evaluation outside training.
    pub fn logits_eval(
        &self,
        params: &ParamSet,
        embed: &EmbeddingSpec,
        contexts: &[ContextKey],
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut bind = TapeBind::new(params);
        let ctx = match self.kind {
            PolicyKind::Adaptive { .. } => Some(embed.build_context(&mut tape, &mut bind, contexts)?),
            PolicyKind::Fixed => None,
        };
        let logits = self.logits(&mut tape, &mut bind, ctx, contexts.len())?;
        Ok(tape.value(logits).clone())
    }
}

/// Gumbel(0,1) noise via -log(-log(U)); U is clamped away from {0,1} so the
/// double log stays finite.
pub fn gumbel_noise(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let u: f64 = rng.gen::<f64>().clamp(1e-12, 1.0 - 1e-12);
            -(-u.ln()).ln()
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("gumbel shape")
}

/// Relaxed categorical draw: softmax((logits + g)/tau) per row.
pub fn gumbel_softmax(tape: &mut Tape, logits: Var, tau: f64, noise: Tensor) -> Result<Var> {
    if tau <= 0.0 {
        return Err(GgzError::InvalidArg(format!(
            "gumbel-softmax temperature must be positive, got {tau}"
        )));
    }
    if noise.shape() != tape.value(logits).shape() {
        return Err(GgzError::Dim(format!(
            "gumbel noise shape {:?} vs logits {:?}",
            noise.shape(),
            tape.value(logits).shape()
        )));
    }
    let g = tape.constant(noise);
    let shifted = tape.add(logits, g)?;
    let scaled = tape.affine(shifted, 1.0 / tau, 0.0)?;
    tape.row_softmax(scaled)
}

/// One realized decision for a single window.
#[derive(Clone, Debug)]
pub struct PolicyDecision {
    /// D×3 simplex rows (the relaxed draw).
    pub soft: Tensor,
    /// D×3 one-hot rows actually applied.
    pub hard: Tensor,
    pub m_s: Vec<u8>,
    pub m_c: Vec<u8>,
    pub tau: f64,
}

impl PolicyDecision {
    fn from_hard(soft: Tensor, hard: Tensor, tau: f64) -> Self {
        let d = hard.rows();
        let mut m_s = vec![0u8; d];
        let mut m_c = vec![0u8; d];
        for i in 0..d {
            let row = &hard.data()[i * 3..(i + 1) * 3];
            m_s[i] = (row[COL_GEN] + row[COL_LC]) as u8;
            m_c[i] = row[COL_GEN] as u8;
        }
        PolicyDecision {
            soft,
            hard,
            m_s,
            m_c,
            tau,
        }
    }

    pub fn d(&self) -> usize {
        self.m_s.len()
    }

    pub fn sampled_count(&self) -> usize {
        self.m_s.iter().map(|&b| b as usize).sum()
    }

    pub fn generative_count(&self) -> usize {
        self.m_c.iter().map(|&b| b as usize).sum()
    }

    pub fn lossless_count(&self) -> usize {
        self.sampled_count() - self.generative_count()
    }

    pub fn sampling_ratio(&self) -> f64 {
        self.sampled_count() as f64 / self.d() as f64
    }

    /// Grid cell per entry: 0 unsampled, 1 generative, 2 lossless.
    pub fn cells(&self) -> Vec<u8> {
        self.m_s
            .iter()
            .zip(&self.m_c)
            .map(|(&s, &c)| if s == 0 { 0 } else if c == 1 { 1 } else { 2 })
            .collect()
    }
}

/// Split a batched `(B·D)×3` soft/hard pair into per-window decisions.
pub fn split_decisions(soft: &Tensor, hard: &Tensor, d: usize, tau: f64) -> Vec<PolicyDecision> {
    let b = soft.rows() / d;
    (0..b)
        .map(|i| {
            let lo = i * d * 3;
            let hi = (i + 1) * d * 3;
            let s = Tensor::matrix(d, 3, soft.data()[lo..hi].to_vec()).unwrap();
            let h = Tensor::matrix(d, 3, hard.data()[lo..hi].to_vec()).unwrap();
            PolicyDecision::from_hard(s, h, tau)
        })
        .collect()
}

/// Noise-free argmax decode; ties break toward the lowest column, i.e. toward
/// not sampling, which is conservative for both budgets.
pub fn hard_decode(logits: &Tensor) -> PolicyDecision {
    let d = logits.rows();
    let mut hard = vec![0.0; d * 3];
    let mut soft = vec![0.0; d * 3];
    for i in 0..d {
        let row = &logits.data()[i * 3..(i + 1) * 3];
        let mut best = 0;
        for j in 1..3 {
            if row[j] > row[best] {
                best = j;
            }
        }
        hard[i * 3 + best] = 1.0;
        // deterministic softmax of the logits, for inspection
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        for j in 0..3 {
            soft[i * 3 + j] = exps[j] / sum;
        }
    }
    PolicyDecision::from_hard(
        Tensor::matrix(d, 3, soft).unwrap(),
        Tensor::matrix(d, 3, hard).unwrap(),
        0.0,
    )
}

/// Per-entry sampling costs; defaults to all ones so the cost is the expected
/// number of sampled entries.
#[derive(Clone, Debug)]
pub struct CostModel {
    costs: Vec<f64>,
}

impl CostModel {
    pub fn unit(d: usize) -> Self {
        CostModel {
            costs: vec![1.0; d],
        }
    }

    pub fn new(costs: Vec<f64>) -> Result<Self> {
        if costs.iter().any(|&c| c < 0.0 || !c.is_finite()) {
            return Err(GgzError::InvalidArg(
                "sampling costs must be finite and non-negative".into(),
            ));
        }
        Ok(CostModel { costs })
    }

    pub fn costs(&self) -> &[f64] {
        &self.costs
    }
}

/// Batch-mean realized sampling cost, Σ c_i·m_s[i].
pub fn expected_sampling_cost(decisions: &[PolicyDecision], costs: &CostModel) -> Result<f64> {
    if decisions.is_empty() {
        return Err(GgzError::InvalidArg(
            "expected_sampling_cost over an empty batch".into(),
        ));
    }
    let mut total = 0.0;
    for dec in decisions {
        if dec.d() != costs.costs.len() {
            return Err(GgzError::Dim(format!(
                "cost vector of length {} vs decision of dimension {}",
                costs.costs.len(),
                dec.d()
            )));
        }
        total += dec
            .m_s
            .iter()
            .zip(&costs.costs)
            .map(|(&m, &c)| m as f64 * c)
            .sum::<f64>();
    }
    Ok(total / decisions.len() as f64)
}

/// Batch-mean normalized rate of the hybrid scheme: the full latent cost is
/// charged once if any entry went generative, the lossless cost per entry.
pub fn expected_rate(decisions: &[PolicyDecision], rate: &RateModel) -> Result<f64> {
    rate.require_calibrated()?;
    if decisions.is_empty() {
        return Err(GgzError::InvalidArg("expected_rate over an empty batch".into()));
    }
    let mut total = 0.0;
    for dec in decisions {
        let d = dec.d() as f64;
        let gen_any = dec.generative_count() > 0;
        let lossless = dec.lossless_count() as f64;
        total += if gen_any { rate.r_ge() } else { 0.0 } + lossless / d * rate.r_lc();
    }
    Ok(total / decisions.len() as f64)
}

/// Plain-text decision grid: T rows of K cells in {0,1,2}, space-separated.
/// Entry (kpi k, hour t) is flattened at index k·T + t.
pub fn mask_grid(decision: &PolicyDecision, k: usize, t: usize) -> Result<String> {
    if k * t != decision.d() {
        return Err(GgzError::Dim(format!(
            "grid {k}x{t} does not match decision dimension {}",
            decision.d()
        )));
    }
    let cells = decision.cells();
    let mut out = String::with_capacity(t * (2 * k + 1));
    for row in 0..t {
        for col in 0..k {
            if col > 0 {
                out.push(' ');
            }
            out.push(char::from(b'0' + cells[col * t + row]));
        }
        out.push('\n');
    }
    Ok(out)
}

fn unused_rng() -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(0)
}
