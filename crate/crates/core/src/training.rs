//! Joint training of policies, codec and task heads under sampling and rate
//! budgets, enforced by dual ascent on the two Lagrange multipliers.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::codec::{quantize_roundtrip, AeSpec, RateModel};
use crate::config::{Aggregation, ExperimentConfig, Mode, PolicyChoice, TaskSpec};
use crate::data::{go_anchors, go_batches, recon_batches, Batch, GoItem, Split, TelemetryDataset};
use crate::error::{GgzError, Result};
use crate::nn::{Mlp, ParamSet, TapeBind};
use crate::policy::{
    expected_rate, gumbel_noise, gumbel_softmax, split_decisions, ContextKey, EmbeddingSpec,
    PolicyKind, PolicySpec, COL_GEN, COL_LC, HOURS_PER_DAY,
};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Hard cap on the multipliers when budgets are unreachable.
pub const BETA_CAP: f64 = 1e3;

/// Lagrange multipliers, their step size and the budgets they enforce.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DualState {
    pub beta_s: f64,
    pub beta_c: f64,
    pub lambda: f64,
    pub s_budget: f64,
    pub r_budget: f64,
}

impl DualState {
    pub fn new(lambda: f64, s_budget: f64, r_budget: f64) -> Self {
        DualState {
            beta_s: 0.0,
            beta_c: 0.0,
            lambda,
            s_budget,
            r_budget,
        }
    }

    /// One ascent step from batch-mean cost estimates; multipliers stay
    /// non-negative and saturate at [`BETA_CAP`]. Violations inside a small
    /// tolerance band leave the multiplier untouched, which stops the pair
    /// from pumping a limit cycle once the constraint is met.
    pub fn update(&mut self, s_est: f64, r_est: f64) {
        let s_viol = s_est - self.s_budget;
        if s_viol.abs() > 0.01 {
            self.beta_s = (self.beta_s + self.lambda * s_viol).max(0.0);
        }
        let r_viol = r_est - self.r_budget;
        if r_viol.abs() > 0.02 * self.r_budget {
            self.beta_c = (self.beta_c + self.lambda * r_viol).max(0.0);
        }
        if self.beta_s > BETA_CAP || self.beta_c > BETA_CAP {
            log::warn!(
                "dual multipliers hit the cap (beta_s {:.2}, beta_c {:.2}); budgets look unreachable",
                self.beta_s,
                self.beta_c
            );
            self.beta_s = self.beta_s.min(BETA_CAP);
            self.beta_c = self.beta_c.min(BETA_CAP);
        }
    }
}

/// Aggregate the lookforward slice into the prediction target. Returns None
/// when the horizon data is incomplete — the caller skips the window.
pub fn build_target(series: &[f64], horizon: usize, phi: Aggregation) -> Option<Vec<f64>> {
    if series.len() != horizon || series.is_empty() {
        return None;
    }
    Some(match phi {
        Aggregation::Identity => series.to_vec(),
        Aggregation::Mean => vec![series.iter().sum::<f64>() / series.len() as f64],
        Aggregation::Min => vec![series.iter().cloned().fold(f64::INFINITY, f64::min)],
        Aggregation::Max => vec![series.iter().cloned().fold(f64::NEG_INFINITY, f64::max)],
    })
}

// ---------------------------------------------------------------------------
// Model assembly
// ---------------------------------------------------------------------------

/// Every network of one experiment, derived from config and data dimensions.
#[derive(Clone, Debug)]
pub struct ModelSpecs {
    pub embed: EmbeddingSpec,
    pub policy: PolicySpec,
    pub ae: Option<AeSpec>,
    pub heads: Vec<Mlp>,
    pub d: usize,
    pub lookback: usize,
}

impl ModelSpecs {
    pub fn from_config(cfg: &ExperimentConfig, k: usize) -> Self {
        let d = k * HOURS_PER_DAY;
        let embed = EmbeddingSpec {
            n_classes: cfg.n_classes,
            class_dim: cfg.class_dim,
            hour_dim: cfg.hour_dim,
            n_tasks: cfg.tasks.len().max(1),
            task_dim: cfg.task_dim,
            with_task: cfg.mode == Mode::Go,
        };
        embed.check_against(d);
        let policy = PolicySpec {
            kind: match cfg.policy {
                PolicyChoice::Adaptive => PolicyKind::Adaptive {
                    hidden: cfg.policy_hidden,
                },
                PolicyChoice::Fixed => PolicyKind::Fixed,
            },
            d,
            ctx_dim: embed.ctx_dim(),
            mode: cfg.codec,
            init_sr: cfg.sr_budget,
        };
        let ae = match cfg.codec {
            crate::policy::CodecMode::LosslessOnly => None,
            _ => Some(AeSpec {
                d,
                ctx_dim: embed.ctx_dim(),
                latent_dim: cfg.latent_dim,
                enc_hidden: cfg.enc_hidden.clone(),
                dec_hidden: cfg.dec_hidden.clone(),
            }),
        };
        let lookback = cfg.tasks.first().map_or(1, |t| t.lookback);
        let heads = if cfg.mode == Mode::Go {
            cfg.tasks
                .iter()
                .map(|t| head_mlp(t, d, cfg.dropout))
                .collect()
        } else {
            Vec::new()
        };
        ModelSpecs {
            embed,
            policy,
            ae,
            heads,
            d,
            lookback,
        }
    }

    pub fn register(&self, params: &mut ParamSet, rng: &mut ChaCha8Rng) {
        self.embed.register(params, rng);
        self.policy.register(params, rng);
        if let Some(ae) = &self.ae {
            ae.register(params, rng);
        }
        for head in &self.heads {
            head.register(params, rng);
        }
    }

    pub fn init_params(&self, seed: u64) -> ParamSet {
        use rand::SeedableRng;
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.register(&mut params, &mut rng);
        params
    }

    fn needs_context(&self) -> bool {
        self.ae.is_some() || matches!(self.policy.kind, PolicyKind::Adaptive { .. })
    }
}

/// Task head: reconstructed lookback stack flattened to L·D, then the
/// (128, 64, 32) GELU stack with dropout, linear to the target width.
pub fn head_mlp(task: &TaskSpec, d: usize, dropout: f64) -> Mlp {
    Mlp::new(
        &format!("head.{}", task.task_id),
        vec![task.lookback * d, 128, 64, 32, task.out_dim()],
        crate::nn::Activation::Gelu,
    )
    .with_dropout(dropout)
}

/// Forward one lookback stack through a task head, eval or train mode.
pub fn predictor_forward(
    tape: &mut Tape,
    bind: &mut TapeBind,
    head: &Mlp,
    stack: Var,
    train: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let expect = head.dims[0];
    if tape.value(stack).cols() != expect {
        return Err(GgzError::Contract(format!(
            "lookback stack of width {} does not match head input {expect}",
            tape.value(stack).cols()
        )));
    }
    head.forward(tape, bind, stack, train, rng)
}

// ---------------------------------------------------------------------------
// The differentiable window pass
// ---------------------------------------------------------------------------

/// Hard: straight-through masks downstream (training default).
/// Soft: fully relaxed masks everywhere (gradient checking).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Relaxation {
    Hard,
    Soft,
}

pub struct WindowPass {
    /// Merged reconstruction, `B×D`.
    pub x_hat: Var,
    /// Relaxed decision rows, `(B·D)×3`.
    pub soft: Var,
    /// What downstream consumed: straight-through one-hots or `soft` itself.
    pub applied: Var,
    /// Soft normalized sampling-fraction estimate (scalar).
    pub s_est: Var,
    /// Soft normalized rate estimate (scalar).
    pub r_est: Var,
}

/// Draw masks for a batch of windows, split them across the two codec routes
/// and reconstruct. Gradients reach the policy through the straight-through
/// draw, the soft cost estimates, and the lossless merge; they reach the
/// autoencoder through the masked input and the merged output.
#[allow(clippy::too_many_arguments)]
pub fn window_pass(
    tape: &mut Tape,
    bind: &mut TapeBind,
    specs: &ModelSpecs,
    rate: &RateModel,
    x: &Tensor,
    contexts: &[ContextKey],
    tau: f64,
    noise: Tensor,
    relax: Relaxation,
) -> Result<WindowPass> {
    rate.require_calibrated()?;
    let b = contexts.len();
    let d = specs.d;
    if x.rows() != b || x.cols() != d {
        return Err(GgzError::Dim(format!(
            "window batch {:?} vs {b} contexts of dimension {d}",
            x.shape()
        )));
    }
    let q = Tensor::matrix(
        b,
        d,
        x.data()
            .iter()
            .map(|&v| quantize_roundtrip(v))
            .collect::<Result<Vec<f64>>>()?,
    )?;

    let ctx = if specs.needs_context() {
        Some(specs.embed.build_context(tape, bind, contexts)?)
    } else {
        None
    };
    let x_var = tape.constant(x.clone());
    let q_var = tape.constant(q);

    let logits = specs.policy.logits(tape, bind, ctx, b)?;
    let soft = gumbel_softmax(tape, logits, tau, noise)?;
    let applied = match relax {
        Relaxation::Hard => tape.straight_through(soft)?,
        Relaxation::Soft => soft,
    };

    let m_c_flat = tape.mask_cols(applied, &[COL_GEN])?;
    let m_c = tape.reshape(m_c_flat, vec![b, d])?;
    let m_lc_flat = tape.mask_cols(applied, &[COL_LC])?;
    let m_lc = tape.reshape(m_lc_flat, vec![b, d])?;

    // soft budget estimates, normalized to fractions of the window
    let mut ws = Tensor::zeros(&[b * d, 3]);
    for r in 0..b * d {
        ws.data_mut()[r * 3 + COL_GEN] = 1.0 / (b * d) as f64;
        ws.data_mut()[r * 3 + COL_LC] = 1.0 / (b * d) as f64;
    }
    let s_est = tape.dot_const(soft, ws)?;

    let seg = tape.seg_max_col(soft, d, COL_GEN)?;
    let ge_term = tape.dot_const(seg, Tensor::full(&[b], 1.0 / b as f64))?;
    let mut wlc = Tensor::zeros(&[b * d, 3]);
    for r in 0..b * d {
        wlc.data_mut()[r * 3 + COL_LC] = rate.r_lc() / (b * d) as f64;
    }
    let lc_term = tape.dot_const(soft, wlc)?;
    let r_est = tape.lincomb(&[(ge_term, rate.r_ge()), (lc_term, 1.0)], 0.0)?;

    // generative route; without an autoencoder the imputation is mid-range.
    // On one-hot rows the generative column equals the m_c'm_s product, and
    // the single-mask form keeps straight-through gradients alive at skipped
    // entries where the product parameterization zeroes them.
    let x_hat_gen = match &specs.ae {
        Some(ae) => {
            let x_g = tape.mul(m_c, x_var)?;
            let ctx = ctx.expect("autoencoder requires context");
            let latent = ae.encode(tape, bind, x_g, ctx)?;
            ae.decode(tape, bind, latent, ctx)?
        }
        None => tape.constant(Tensor::full(&[b, d], 0.5)),
    };

    // lossless entries overwrite the generative output; their values are the
    // exact quantized constants, so no gradient is needed through them
    let diff = tape.sub(q_var, x_hat_gen)?;
    let patch = tape.mul(m_lc, diff)?;
    let x_hat = tape.add(x_hat_gen, patch)?;

    Ok(WindowPass {
        x_hat,
        soft,
        applied,
        s_est,
        r_est,
    })
}

/// Mean squared reconstruction error per entry (scalar var).
pub fn mse_loss(tape: &mut Tape, x_hat: Var, x: &Tensor) -> Result<Var> {
    let target = tape.constant(x.clone());
    let diff = tape.sub(x_hat, target)?;
    let sq = tape.mul(diff, diff)?;
    tape.mean(sq)
}

/// Eq-style Lagrangian: fidelity + beta_s (S - S_budget) + beta_c (R - R_budget).
pub fn lagrangian(
    tape: &mut Tape,
    fidelity: Var,
    s_est: Var,
    r_est: Var,
    dual: &DualState,
) -> Result<Var> {
    tape.lincomb(
        &[
            (fidelity, 1.0),
            (s_est, dual.beta_s),
            (r_est, dual.beta_c),
        ],
        -dual.beta_s * dual.s_budget - dual.beta_c * dual.r_budget,
    )
}

// ---------------------------------------------------------------------------
// Training loops
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub sr: f64,
    pub rate: f64,
    pub beta_s: f64,
    pub beta_c: f64,
    pub task_mae: Vec<f64>,
}

impl EpochMetrics {
    pub fn header(tasks: &[TaskSpec]) -> String {
        let mut cols = vec![
            "epoch".to_string(),
            "loss".to_string(),
            "sr".to_string(),
            "rate".to_string(),
            "beta_s".to_string(),
            "beta_c".to_string(),
        ];
        for t in tasks {
            cols.push(format!("mae_{}", t.name));
        }
        cols.join("\t")
    }

    pub fn line(&self) -> String {
        let mut cols = vec![
            self.epoch.to_string(),
            format!("{}", self.loss),
            format!("{}", self.sr),
            format!("{}", self.rate),
            format!("{}", self.beta_s),
            format!("{}", self.beta_c),
        ];
        for m in &self.task_mae {
            cols.push(format!("{m}"));
        }
        cols.join("\t")
    }
}

pub struct TrainOutcome {
    pub params: ParamSet,
    pub dual: DualState,
    pub metrics: Vec<EpochMetrics>,
    pub task_sigma2: Vec<f64>,
}

fn sub_seed(seed: u64, tag: u64, a: u64) -> u64 {
    let mut h = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    h ^= a.wrapping_add(0xbf58_476d_1ce4_e5b9).rotate_left(31);
    h.wrapping_mul(0x94d0_49bb_1331_11eb)
}

fn tau_at(cfg: &ExperimentConfig, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return cfg.tau_end;
    }
    let frac = step as f64 / (total - 1) as f64;
    cfg.tau_start * (cfg.tau_end / cfg.tau_start).powf(frac)
}

fn batch_tensor(ds: &TelemetryDataset, windows: &[crate::data::WindowRef]) -> Result<Tensor> {
    let d = ds.d();
    let mut data = Vec::with_capacity(windows.len() * d);
    for &w in windows {
        data.extend(ds.window_values(w)?);
    }
    Tensor::matrix(windows.len(), d, data)
}

/// Pooled variance of each task's training targets; normalizes the per-task
/// losses so no goal dominates the multi-task sum.
pub fn task_target_variance(ds: &TelemetryDataset, tasks: &[TaskSpec]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(tasks.len());
    for task in tasks {
        let anchors = go_anchors(ds, Split::Train, task.lookback, task.horizon);
        if anchors.is_empty() {
            return Err(GgzError::Data(format!(
                "task {}: no training anchors with lookback {} and horizon {}",
                task.name, task.lookback, task.horizon
            )));
        }
        let mut values = Vec::new();
        for a in &anchors {
            let start = (a.day + 1) * HOURS_PER_DAY;
            let slice = ds
                .kpi_slice(a.bs, task.kpi, start, task.horizon)
                .ok_or_else(|| GgzError::Data("anchor lost its horizon".into()))?;
            if let Some(y) = build_target(&slice, task.horizon, task.phi) {
                values.extend(y);
            }
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / values.len() as f64;
        out.push(var.max(1e-8));
    }
    Ok(out)
}

/// Pull the policy head back toward its budget-anchored initialization.
/// A small leak bounds how far logits can saturate away from the responsive
/// range; the dual multipliers absorb the constant pull at equilibrium.
fn apply_policy_leak(
    params: &mut ParamSet,
    anchors: &BTreeMap<String, Tensor>,
    leak: f64,
) -> Result<()> {
    if leak == 0.0 {
        return Ok(());
    }
    for (name, anchor) in anchors {
        let mut t = params.get(name)?.clone();
        for (v, a) in t.data_mut().iter_mut().zip(anchor.data()) {
            *v = a + (*v - a) * (1.0 - leak);
        }
        params.set_value(name, t)?;
    }
    Ok(())
}

fn lr_selector(cfg: &ExperimentConfig) -> impl Fn(&str) -> f64 {
    let lr = cfg.lr;
    let policy_lr = cfg.policy_lr;
    move |name: &str| {
        if name.starts_with("policy.") {
            policy_lr
        } else {
            lr
        }
    }
}

/// The training loop: per batch, draw masks, reconstruct through both routes,
/// take one Adam step on the Lagrangian, then one dual-ascent step on the
/// realized (hard-mask) costs.
pub fn train(
    cfg: &ExperimentConfig,
    ds: &TelemetryDataset,
    rate: &RateModel,
    mut on_epoch: Option<&mut dyn FnMut(&EpochMetrics, &ParamSet)>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let specs = ModelSpecs::from_config(cfg, ds.k);
    let mut params = specs.init_params(sub_seed(cfg.seed, 1, 0));
    let head_anchors: BTreeMap<String, Tensor> = specs
        .policy
        .head_param_names()
        .into_iter()
        .map(|name| {
            let t = params.get(&name).expect("registered").clone();
            (name, t)
        })
        .collect();
    let mut dual = DualState::new(cfg.dual_step, cfg.sr_budget, cfg.rate_budget);
    let task_sigma2 = if cfg.mode == Mode::Go {
        task_target_variance(ds, &cfg.tasks)?
    } else {
        Vec::new()
    };

    let n_batches = match cfg.mode {
        Mode::Recon => recon_batches(ds, Split::Train, cfg.batch_size, sub_seed(cfg.seed, 2, 0))?.len(),
        Mode::Go => go_batches(
            ds,
            Split::Train,
            cfg.batch_size,
            cfg.tasks.len(),
            specs.lookback,
            cfg.tasks[0].horizon,
            sub_seed(cfg.seed, 2, 0),
        )?
        .len(),
    };
    let total_steps = cfg.epochs * n_batches;
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let batches = match cfg.mode {
            Mode::Recon => recon_batches(ds, Split::Train, cfg.batch_size, sub_seed(cfg.seed, 2, epoch as u64))?,
            Mode::Go => go_batches(
                ds,
                Split::Train,
                cfg.batch_size,
                cfg.tasks.len(),
                specs.lookback,
                cfg.tasks[0].horizon,
                sub_seed(cfg.seed, 2, epoch as u64),
            )?,
        };
        let mut rng = {
            use rand::SeedableRng;
            ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 3, epoch as u64))
        };
        let mut epoch_loss = 0.0;
        let mut epoch_sr = 0.0;
        let mut epoch_rate = 0.0;
        let mut mae_acc = vec![0.0; cfg.tasks.len()];
        let mut mae_cnt = vec![0usize; cfg.tasks.len()];

        for (batch_idx, batch) in batches.iter().enumerate() {
            let tau = tau_at(cfg, step, total_steps);
            let (loss_val, sr_hard, rate_hard) = match batch {
                Batch::Recon(windows) => {
                    run_recon_batch(cfg, ds, &specs, rate, &mut params, &dual, windows, tau, &mut rng)?
                }
                Batch::Go(items) => run_go_batch(
                    cfg,
                    ds,
                    &specs,
                    rate,
                    &mut params,
                    &dual,
                    items,
                    tau,
                    &task_sigma2,
                    &mut rng,
                    &mut mae_acc,
                    &mut mae_cnt,
                )?,
            };
            if !loss_val.is_finite() {
                return Err(GgzError::Runtime(format!(
                    "non-finite loss at epoch {epoch}, batch {batch_idx}"
                )));
            }
            apply_policy_leak(&mut params, &head_anchors, cfg.policy_leak)?;
            dual.update(sr_hard, rate_hard);
            epoch_loss += loss_val;
            epoch_sr += sr_hard;
            epoch_rate += rate_hard;
            step += 1;
        }

        let n = batches.len() as f64;
        let em = EpochMetrics {
            epoch,
            loss: epoch_loss / n,
            sr: epoch_sr / n,
            rate: epoch_rate / n,
            beta_s: dual.beta_s,
            beta_c: dual.beta_c,
            task_mae: mae_acc
                .iter()
                .zip(&mae_cnt)
                .map(|(&s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
                .collect(),
        };
        if let Some(cb) = on_epoch.as_deref_mut() {
            cb(&em, &params);
        }
        metrics.push(em);
    }

    Ok(TrainOutcome {
        params,
        dual,
        metrics,
        task_sigma2,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_recon_batch(
    cfg: &ExperimentConfig,
    ds: &TelemetryDataset,
    specs: &ModelSpecs,
    rate: &RateModel,
    params: &mut ParamSet,
    dual: &DualState,
    windows: &[crate::data::WindowRef],
    tau: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64, f64)> {
    let x = batch_tensor(ds, windows)?;
    let contexts: Vec<ContextKey> = windows.iter().map(|&w| ds.context_of(w, None)).collect();
    let noise = gumbel_noise(rng, &[windows.len() * specs.d, 3]);

    let mut tape = Tape::new();
    let mut bind = TapeBind::new(params);
    let pass = window_pass(
        &mut tape, &mut bind, specs, rate, &x, &contexts, tau, noise, Relaxation::Hard,
    )?;
    let fidelity = mse_loss(&mut tape, pass.x_hat, &x)?;
    let loss = lagrangian(&mut tape, fidelity, pass.s_est, pass.r_est, dual)?;
    let loss_val = tape.value(loss).scalar_value()?;

    let decisions = split_decisions(tape.value(pass.soft), tape.value(pass.applied), specs.d, tau);
    let sr_hard = decisions.iter().map(|d| d.sampling_ratio()).sum::<f64>() / decisions.len() as f64;
    let rate_hard = expected_rate(&decisions, rate)?;

    let mut grads = tape.backward(loss)?;
    let by_name = bind.collect(&mut grads);
    drop(bind);
    drop(tape);
    params.adam_step(&by_name, lr_selector(cfg))?;
    Ok((loss_val, sr_hard, rate_hard))
}

#[allow(clippy::too_many_arguments)]
fn run_go_batch(
    cfg: &ExperimentConfig,
    ds: &TelemetryDataset,
    specs: &ModelSpecs,
    rate: &RateModel,
    params: &mut ParamSet,
    dual: &DualState,
    items: &[GoItem],
    tau: f64,
    task_sigma2: &[f64],
    rng: &mut ChaCha8Rng,
    mae_acc: &mut [f64],
    mae_cnt: &mut [usize],
) -> Result<(f64, f64, f64)> {
    let b = items.len();
    let d = specs.d;
    let lookback = specs.lookback;
    let horizon = cfg.tasks[0].horizon;

    let mut tape = Tape::new();
    let mut bind = TapeBind::new(params);

    // reconstruct each lookback offset as its own compressed window
    let mut stacked: Option<Var> = None;
    let mut s_terms = Vec::with_capacity(lookback);
    let mut r_terms = Vec::with_capacity(lookback);
    let mut sr_hard = 0.0;
    let mut rate_hard = 0.0;
    for offset in 0..lookback {
        let windows: Vec<crate::data::WindowRef> = items
            .iter()
            .map(|it| crate::data::WindowRef {
                bs: it.window.bs,
                day: it.window.day + 1 + offset - lookback,
            })
            .collect();
        let x = batch_tensor(ds, &windows)?;
        let contexts: Vec<ContextKey> = items
            .iter()
            .zip(&windows)
            .map(|(it, &w)| ds.context_of(w, Some(it.task)))
            .collect();
        let noise = gumbel_noise(rng, &[b * d, 3]);
        let pass = window_pass(
            &mut tape, &mut bind, specs, rate, &x, &contexts, tau, noise, Relaxation::Hard,
        )?;
        let decisions = split_decisions(tape.value(pass.soft), tape.value(pass.applied), d, tau);
        sr_hard += decisions.iter().map(|d| d.sampling_ratio()).sum::<f64>()
            / decisions.len() as f64;
        rate_hard += expected_rate(&decisions, rate)?;
        s_terms.push(pass.s_est);
        r_terms.push(pass.r_est);
        stacked = Some(match stacked {
            None => pass.x_hat,
            Some(prev) => tape.concat_cols(prev, pass.x_hat)?,
        });
    }
    sr_hard /= lookback as f64;
    rate_hard /= lookback as f64;
    let stack = stacked.unwrap();
    let s_est = {
        let terms: Vec<(Var, f64)> = s_terms.iter().map(|&v| (v, 1.0 / lookback as f64)).collect();
        tape.lincomb(&terms, 0.0)?
    };
    let r_est = {
        let terms: Vec<(Var, f64)> = r_terms.iter().map(|&v| (v, 1.0 / lookback as f64)).collect();
        tape.lincomb(&terms, 0.0)?
    };

    // per-task heads over their stratum of the batch
    let mut fid_terms = Vec::with_capacity(cfg.tasks.len());
    for task in &cfg.tasks {
        let rows: Vec<usize> = items
            .iter()
            .enumerate()
            .filter(|(_, it)| it.task == task.task_id)
            .map(|(i, _)| i)
            .collect();
        if rows.is_empty() {
            continue;
        }
        let mut y_data = Vec::with_capacity(rows.len() * task.out_dim());
        for &r in &rows {
            let it = &items[r];
            let start = (it.window.day + 1) * HOURS_PER_DAY;
            let slice = ds
                .kpi_slice(it.window.bs, task.kpi, start, horizon)
                .ok_or_else(|| GgzError::Data("anchor lost its horizon".into()))?;
            let y = build_target(&slice, horizon, task.phi)
                .ok_or_else(|| GgzError::Data("horizon too short for target".into()))?;
            y_data.extend(y);
        }
        let y = Tensor::matrix(rows.len(), task.out_dim(), y_data)?;
        let input = tape.gather_rows(stack, &rows)?;
        let y_hat = predictor_forward(&mut tape, &mut bind, &specs.heads[task.task_id], input, true, rng)?;
        let y_const = tape.constant(y.clone());
        let diff = tape.sub(y_hat, y_const)?;
        let sq = tape.mul(diff, diff)?;
        let weight = 1.0 / (b as f64 * task.out_dim() as f64 * task_sigma2[task.task_id]);
        let term = tape.dot_const(sq, Tensor::full(&[rows.len() * task.out_dim()], weight))?;
        fid_terms.push((term, 1.0));

        // normalized-scale MAE for the epoch log
        let mae: f64 = tape
            .value(diff)
            .data()
            .iter()
            .map(|v| v.abs())
            .sum::<f64>()
            / (rows.len() * task.out_dim()) as f64;
        mae_acc[task.task_id] += mae;
        mae_cnt[task.task_id] += 1;
    }
    let fidelity = tape.lincomb(&fid_terms, 0.0)?;
    let loss = lagrangian(&mut tape, fidelity, s_est, r_est, dual)?;
    let loss_val = tape.value(loss).scalar_value()?;

    let mut grads = tape.backward(loss)?;
    let by_name = bind.collect(&mut grads);
    drop(bind);
    drop(tape);
    params.adam_step(&by_name, lr_selector(cfg))?;
    Ok((loss_val, sr_hard, rate_hard))
}

/// Train only the task heads on reconstructions from a frozen codec/policy —
/// the "reconstruction first, predict later" baseline. The reconstructions
/// come from the deterministic hard-decode pipeline and carry no gradients.
pub fn train_heads_frozen(
    cfg: &ExperimentConfig,
    ds: &TelemetryDataset,
    specs_frozen: &ModelSpecs,
    params: &mut ParamSet,
    rate: &RateModel,
    mut on_epoch: Option<&mut dyn FnMut(&EpochMetrics, &ParamSet)>,
) -> Result<Vec<EpochMetrics>> {
    rate.require_calibrated()?;
    let d = specs_frozen.d;
    let lookback = cfg.tasks.first().map_or(1, |t| t.lookback);
    let horizon = cfg.tasks[0].horizon;
    let task_sigma2 = task_target_variance(ds, &cfg.tasks)?;

    // register fresh heads next to the frozen parameters
    {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 7, 0));
        for task in &cfg.tasks {
            head_mlp(task, d, cfg.dropout).register(params, &mut rng);
        }
    }

    // cache the frozen reconstruction of every train window once, batched
    let mut recon_cache: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    {
        use rand::SeedableRng;
        let windows = ds.windows(Split::Train);
        let mut xs = Vec::with_capacity(windows.len());
        let mut keys = Vec::with_capacity(windows.len());
        for &w in &windows {
            xs.push(ds.window_values(w)?);
            keys.push(ds.context_of(w, None));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let decisions =
            crate::experiment::decide_batch(params, specs_frozen, &keys, true, &mut rng)?;
        let latent_dim = specs_frozen.ae.as_ref().map_or(0, |ae| ae.latent_dim);
        let containers = crate::experiment::encode_windows(
            params,
            specs_frozen,
            latent_dim,
            &keys,
            &xs,
            &decisions,
        )?;
        let x_hats = crate::experiment::decode_containers(params, specs_frozen, &containers)?;
        for (w, x_hat) in windows.iter().zip(x_hats) {
            recon_cache.insert((w.bs, w.day), x_hat);
        }
    }

    let mut metrics = Vec::with_capacity(cfg.head_epochs);
    let lr = cfg.lr;
    for epoch in 0..cfg.head_epochs {
        let batches = go_batches(
            ds,
            Split::Train,
            cfg.batch_size,
            cfg.tasks.len(),
            lookback,
            horizon,
            sub_seed(cfg.seed, 8, epoch as u64),
        )?;
        let mut rng = {
            use rand::SeedableRng;
            ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 9, epoch as u64))
        };
        let mut epoch_loss = 0.0;
        let mut mae_acc = vec![0.0; cfg.tasks.len()];
        let mut mae_cnt = vec![0usize; cfg.tasks.len()];
        for batch in &batches {
            let items = match batch {
                Batch::Go(items) => items,
                _ => unreachable!(),
            };
            let b = items.len();
            let mut stack_data = Vec::with_capacity(b * lookback * d);
            for it in items {
                for offset in 0..lookback {
                    let day = it.window.day + 1 + offset - lookback;
                    let cached = recon_cache.get(&(it.window.bs, day)).ok_or_else(|| {
                        GgzError::Data(format!(
                            "lookback window (bs {}, day {day}) missing from the train cache",
                            it.window.bs
                        ))
                    })?;
                    stack_data.extend_from_slice(cached);
                }
            }
            let stack_t = Tensor::matrix(b, lookback * d, stack_data)?;

            let mut tape = Tape::new();
            let mut bind = TapeBind::new(params);
            let stack = tape.constant(stack_t);
            let mut fid_terms = Vec::new();
            for task in &cfg.tasks {
                let rows: Vec<usize> = items
                    .iter()
                    .enumerate()
                    .filter(|(_, it)| it.task == task.task_id)
                    .map(|(i, _)| i)
                    .collect();
                if rows.is_empty() {
                    continue;
                }
                let mut y_data = Vec::new();
                for &r in &rows {
                    let it = &items[r];
                    let start = (it.window.day + 1) * HOURS_PER_DAY;
                    let slice = ds
                        .kpi_slice(it.window.bs, task.kpi, start, horizon)
                        .ok_or_else(|| GgzError::Data("anchor lost its horizon".into()))?;
                    y_data.extend(
                        build_target(&slice, horizon, task.phi)
                            .ok_or_else(|| GgzError::Data("horizon too short".into()))?,
                    );
                }
                let y = Tensor::matrix(rows.len(), task.out_dim(), y_data)?;
                let input = tape.gather_rows(stack, &rows)?;
                let head = head_mlp(task, d, cfg.dropout);
                let y_hat = predictor_forward(&mut tape, &mut bind, &head, input, true, &mut rng)?;
                let y_const = tape.constant(y);
                let diff = tape.sub(y_hat, y_const)?;
                let sq = tape.mul(diff, diff)?;
                let weight = 1.0 / (b as f64 * task.out_dim() as f64 * task_sigma2[task.task_id]);
                let term =
                    tape.dot_const(sq, Tensor::full(&[rows.len() * task.out_dim()], weight))?;
                fid_terms.push((term, 1.0));
                let mae: f64 = tape
                    .value(diff)
                    .data()
                    .iter()
                    .map(|v| v.abs())
                    .sum::<f64>()
                    / (rows.len() * task.out_dim()) as f64;
                mae_acc[task.task_id] += mae;
                mae_cnt[task.task_id] += 1;
            }
            let loss = tape.lincomb(&fid_terms, 0.0)?;
            let loss_val = tape.value(loss).scalar_value()?;
            if !loss_val.is_finite() {
                return Err(GgzError::Runtime(format!(
                    "non-finite head loss at epoch {epoch}"
                )));
            }
            let mut grads = tape.backward(loss)?;
            let by_name = bind.collect(&mut grads);
            drop(bind);
            drop(tape);
            params.adam_step(&by_name, |name| if name.starts_with("head.") { lr } else { 0.0 })?;
            epoch_loss += loss_val;
        }
        let em = EpochMetrics {
            epoch,
            loss: epoch_loss / batches.len() as f64,
            sr: 0.0,
            rate: 0.0,
            beta_s: 0.0,
            beta_c: 0.0,
            task_mae: mae_acc
                .iter()
                .zip(&mae_cnt)
                .map(|(&s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
                .collect(),
        };
        if let Some(cb) = on_epoch.as_deref_mut() {
            cb(&em, params);
        }
        metrics.push(em);
    }
    Ok(metrics)
}

// ---------------------------------------------------------------------------
// Full-loss gradient check
// ---------------------------------------------------------------------------

/// Gradient-check the complete policy → codec → Lagrangian path at desk
/// scale, with the straight-through estimator replaced by its soft relaxation
/// (the one piece whose forward intentionally disagrees with its backward).
pub fn gradcheck_full_loss(seed: u64) -> Result<f64> {
    use rand::SeedableRng;

    let k = 2;
    let d = k * HOURS_PER_DAY;
    let embed = EmbeddingSpec {
        n_classes: 3,
        class_dim: 4,
        hour_dim: 4,
        n_tasks: 2,
        task_dim: 4,
        with_task: false,
    };
    let specs = ModelSpecs {
        policy: PolicySpec {
            kind: PolicyKind::Adaptive { hidden: 12 },
            d,
            ctx_dim: embed.ctx_dim(),
            mode: crate::policy::CodecMode::Hybrid,
            init_sr: 0.5,
        },
        ae: Some(AeSpec {
            d,
            ctx_dim: embed.ctx_dim(),
            latent_dim: 6,
            enc_hidden: vec![16],
            dec_hidden: vec![16],
        }),
        embed,
        heads: Vec::new(),
        d,
        lookback: 1,
    };
    let mut params = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    specs.register(&mut params, &mut rng);
    // perturb every parameter so no structurally-dead directions remain
    // (the zero-initialized policy head would otherwise have exactly-zero
    // gradients whose central differences are pure float noise)
    let names: Vec<String> = params.names().map(|s| s.to_string()).collect();
    for name in &names {
        let mut t = params.get(name)?.clone();
        for v in t.data_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
        params.set_value(name, t)?;
    }

    let b = 2;
    let x = Tensor::matrix(
        b,
        d,
        (0..b * d)
            .map(|i| 0.5 + 0.45 * ((i as f64) * 0.37).sin())
            .collect(),
    )?;
    let contexts = vec![
        ContextKey {
            bs_class: 0,
            hour: 0,
            task: None,
        },
        ContextKey {
            bs_class: 2,
            hour: 0,
            task: None,
        },
    ];
    let noise = gumbel_noise(&mut rng, &[b * d, 3]);
    let rate = RateModel::with_r_lc(6, d, 0.6, 100);
    let dual = DualState {
        beta_s: 0.7,
        beta_c: 0.5,
        lambda: 0.0,
        s_budget: 0.4,
        r_budget: 0.3,
    };

    crate::nn::gradcheck(&params, 1e-4, 4, seed ^ 0xabcd, |tape, bind| {
        let pass = window_pass(
            tape,
            bind,
            &specs,
            &rate,
            &x,
            &contexts,
            0.8,
            noise.clone(),
            Relaxation::Soft,
        )?;
        let fidelity = mse_loss(tape, pass.x_hat, &x)?;
        lagrangian(tape, fidelity, pass.s_est, pass.r_est, &dual)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::default_tasks;
    use crate::data::{synth_generate, SynthConfig};

    fn desk_dataset() -> TelemetryDataset {
        let mut ds = synth_generate(&SynthConfig {
            n_bs: 8,
            n_days: 10,
            n_classes: 2,
            k: 6,
            ..Default::default()
        })
        .unwrap();
        ds.normalize().unwrap();
        ds.cluster(2, 0).unwrap();
        ds
    }

    fn desk_config(ds: &TelemetryDataset) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.n_classes = ds.n_classes;
        cfg.latent_dim = 8;
        cfg.enc_hidden = vec![32];
        cfg.dec_hidden = vec![32];
        cfg.policy_hidden = 16;
        cfg.epochs = 2;
        cfg.head_epochs = 2;
        cfg.batch_size = 8;
        cfg
    }

    fn desk_rate(ds: &TelemetryDataset, latent_dim: usize) -> RateModel {
        RateModel::with_r_lc(latent_dim, ds.d(), 0.55, 120)
    }

    #[test]
    fn dual_update_examples() {
        let mut dual = DualState::new(0.1, 0.4, 0.3);
        dual.update(0.7, 0.3); // sr violation 0.3, rate met exactly
        assert!((dual.beta_s - 0.03).abs() < 1e-12);
        assert_eq!(dual.beta_c, 0.0);

        let mut dual = DualState::new(0.1, 0.4, 0.3);
        dual.beta_s = 0.01;
        dual.update(-0.6, 0.3); // violation -1 clamps to zero
        assert_eq!(dual.beta_s, 0.0);

        let before = dual;
        dual.update(0.4, 0.3); // both met exactly: unchanged
        assert_eq!(dual.beta_s, before.beta_s);
        assert_eq!(dual.beta_c, before.beta_c);
    }

    #[test]
    fn dual_never_negative_and_caps() {
        let mut dual = DualState::new(1e6, 0.0, 0.0);
        for _ in 0..10 {
            dual.update(1.0, 1.0);
            assert!(dual.beta_s >= 0.0 && dual.beta_s <= BETA_CAP);
            dual.update(-1.0, -1.0);
            assert!(dual.beta_s >= 0.0);
        }
    }

    #[test]
    fn build_target_examples() {
        assert_eq!(
            build_target(&[1.0, 2.0, 3.0], 3, Aggregation::Mean).unwrap(),
            vec![2.0]
        );
        assert_eq!(
            build_target(&[0.3, 0.1, 0.2], 3, Aggregation::Min).unwrap(),
            vec![0.1]
        );
        assert_eq!(
            build_target(&[0.3, 0.1, 0.2], 3, Aggregation::Max).unwrap(),
            vec![0.3]
        );
        assert_eq!(
            build_target(&[0.3, 0.1, 0.2], 3, Aggregation::Identity).unwrap(),
            vec![0.3, 0.1, 0.2]
        );
        // short horizon is a skip signal, not an abort
        assert!(build_target(&[0.3, 0.1], 3, Aggregation::Mean).is_none());
    }

    #[test]
    fn reconstruction_loss_examples() {
        // X = X_hat and constraints met exactly -> 0
        let mut tape = Tape::new();
        let x = Tensor::matrix(1, 4, vec![0.2, 0.4, 0.6, 0.8]).unwrap();
        let xh = tape.constant(x.clone());
        let fid = mse_loss(&mut tape, xh, &x).unwrap();
        let s = tape.constant(Tensor::scalar(0.4));
        let r = tape.constant(Tensor::scalar(0.3));
        let dual = DualState {
            beta_s: 2.0,
            beta_c: 1.5,
            lambda: 0.0,
            s_budget: 0.4,
            r_budget: 0.3,
        };
        let loss = lagrangian(&mut tape, fid, s, r, &dual).unwrap();
        assert!(tape.value(loss).scalar_value().unwrap().abs() < 1e-15);

        // beta = 0 -> pure mse
        let mut tape = Tape::new();
        let xh = tape.constant(Tensor::matrix(1, 2, vec![0.5, 0.5]).unwrap());
        let x2 = Tensor::matrix(1, 2, vec![0.4, 0.6]).unwrap();
        let fid = mse_loss(&mut tape, xh, &x2).unwrap();
        let s = tape.constant(Tensor::scalar(0.9));
        let r = tape.constant(Tensor::scalar(0.9));
        let zero = DualState::new(0.1, 0.1, 0.1);
        let loss = lagrangian(&mut tape, fid, s, r, &zero).unwrap();
        assert!((tape.value(loss).scalar_value().unwrap() - 0.01).abs() < 1e-12);

        // mse 0.01, beta_s 2, S - S_budget = 0.1, beta_c 0 -> 0.21
        let mut tape = Tape::new();
        let xh = tape.constant(Tensor::matrix(1, 2, vec![0.5, 0.5]).unwrap());
        let fid = mse_loss(&mut tape, xh, &x2).unwrap();
        let s = tape.constant(Tensor::scalar(0.5));
        let r = tape.constant(Tensor::scalar(0.3));
        let dual = DualState {
            beta_s: 2.0,
            beta_c: 0.0,
            lambda: 0.0,
            s_budget: 0.4,
            r_budget: 0.3,
        };
        let loss = lagrangian(&mut tape, fid, s, r, &dual).unwrap();
        assert!((tape.value(loss).scalar_value().unwrap() - 0.21).abs() < 1e-12);
    }

    #[test]
    fn lambda_zero_freezes_duals_into_plain_ae_training() {
        let ds = desk_dataset();
        let mut cfg = desk_config(&ds);
        cfg.dual_step = 0.0;
        let rate = desk_rate(&ds, cfg.latent_dim);
        let out = train(&cfg, &ds, &rate, None).unwrap();
        assert_eq!(out.dual.beta_s, 0.0);
        assert_eq!(out.dual.beta_c, 0.0);
        for m in &out.metrics {
            assert_eq!(m.beta_s, 0.0);
            assert_eq!(m.beta_c, 0.0);
        }
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let ds = desk_dataset();
        let cfg = desk_config(&ds);
        let rate = desk_rate(&ds, cfg.latent_dim);
        let a = train(&cfg, &ds, &rate, None).unwrap();
        let b = train(&cfg, &ds, &rate, None).unwrap();
        for (ma, mb) in a.metrics.iter().zip(&b.metrics) {
            assert_eq!(ma.line(), mb.line());
        }
        for name in a.params.names() {
            let ta = a.params.get(name).unwrap();
            let tb = b.params.get(name).unwrap();
            assert!(ta
                .data()
                .iter()
                .zip(tb.data())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn beta_trajectory_stays_nonnegative() {
        let ds = desk_dataset();
        let mut cfg = desk_config(&ds);
        cfg.sr_budget = 0.2;
        cfg.rate_budget = 0.1;
        cfg.epochs = 3;
        let rate = desk_rate(&ds, cfg.latent_dim);
        let mut seen = Vec::new();
        let out = train(
            &cfg,
            &ds,
            &rate,
            Some(&mut |m: &EpochMetrics, _: &ParamSet| {
                seen.push((m.beta_s, m.beta_c));
            }),
        )
        .unwrap();
        assert!(!seen.is_empty());
        assert!(seen.iter().all(|&(s, c)| s >= 0.0 && c >= 0.0));
        assert!(out.dual.beta_s >= 0.0);
    }

    #[test]
    fn nan_parameters_abort_with_batch_diagnostic() {
        let ds = desk_dataset();
        let cfg = desk_config(&ds);
        let rate = desk_rate(&ds, cfg.latent_dim);
        // poisoning a parameter makes the first forward non-finite, which the
        // tape itself rejects during the forward pass
        let specs = ModelSpecs::from_config(&cfg, ds.k);
        let mut params = specs.init_params(0);
        let mut w = params.get("enc.w0").unwrap().clone();
        w.data_mut()[0] = f64::NAN;
        params.set_value("enc.w0", w).unwrap();
        let windows = ds.windows(Split::Train);
        let x = batch_tensor(&ds, &windows[..2]).unwrap();
        let contexts: Vec<ContextKey> =
            windows[..2].iter().map(|&w| ds.context_of(w, None)).collect();
        let mut tape = Tape::new();
        let mut bind = TapeBind::new(&params);
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let noise = gumbel_noise(&mut rng, &[2 * specs.d, 3]);
        let result = window_pass(
            &mut tape,
            &mut bind,
            &specs,
            &rate,
            &x,
            &contexts,
            1.0,
            noise,
            Relaxation::Hard,
        )
        .and_then(|pass| {
            let fid = mse_loss(&mut tape, pass.x_hat, &x)?;
            tape.value(fid).scalar_value()
        });
        match result {
            Ok(v) => assert!(!v.is_finite()),
            Err(_) => {} // tape-level finite assertion fired first
        }
    }

    #[test]
    fn go_training_runs_and_reports_task_mae() {
        let ds = desk_dataset();
        let mut cfg = desk_config(&ds);
        cfg.mode = Mode::Go;
        cfg.tasks = default_tasks();
        cfg.batch_size = 12;
        cfg.epochs = 2;
        let rate = desk_rate(&ds, cfg.latent_dim);
        let out = train(&cfg, &ds, &rate, None).unwrap();
        assert_eq!(out.metrics.last().unwrap().task_mae.len(), 6);
        assert!(out
            .metrics
            .last()
            .unwrap()
            .task_mae
            .iter()
            .all(|m| m.is_finite() && *m >= 0.0));
        assert_eq!(out.task_sigma2.len(), 6);
    }

    #[test]
    fn task_loss_reaches_policy_logits() {
        // end-to-end gradient: perturbing the task loss must move policy params
        let ds = desk_dataset();
        let mut cfg = desk_config(&ds);
        cfg.mode = Mode::Go;
        cfg.tasks = default_tasks();
        cfg.batch_size = 12;
        cfg.epochs = 1;
        cfg.dual_step = 0.0; // isolate the fidelity gradient
        let rate = desk_rate(&ds, cfg.latent_dim);
        let specs = ModelSpecs::from_config(&cfg, ds.k);
        let before = specs.init_params(sub_seed(cfg.seed, 1, 0));
        let out = train(&cfg, &ds, &rate, None).unwrap();
        // with dual_step 0 the only pressure on the policy is the task loss
        let pw_before = before.get("policy.w0").unwrap();
        let pw_after = out.params.get("policy.w0").unwrap();
        let moved = pw_before
            .data()
            .iter()
            .zip(pw_after.data())
            .any(|(a, b)| a != b);
        assert!(moved, "policy received no end-to-end gradient");
    }

    #[test]
    fn full_loss_gradcheck_under_1e4() {
        let err = gradcheck_full_loss(0).unwrap();
        assert!(err < 1e-4, "max rel err {err}");
    }

    #[test]
    fn predictor_rejects_wrong_lookback_width() {
        let task = &default_tasks()[0];
        let head = head_mlp(task, 48, 0.0);
        let mut params = ParamSet::new();
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        head.register(&mut params, &mut rng);
        let mut tape = Tape::new();
        let mut bind = TapeBind::new(&params);
        let bad = tape.constant(Tensor::matrix(1, 10, vec![0.0; 10]).unwrap());
        assert!(matches!(
            predictor_forward(&mut tape, &mut bind, &head, bad, false, &mut rng),
            Err(GgzError::Contract(_))
        ));
    }
}
