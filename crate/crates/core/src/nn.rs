//! Parameter storage, Adam, checkpointing, MLP assembly and gradient checking.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{GgzError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GGNZ";
pub const CHECKPOINT_VERSION: u16 = 1;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// One named parameter with its Adam moment accumulators.
#[derive(Clone, Debug)]
pub struct Param {
    pub value: Tensor,
    m: Tensor,
    v: Tensor,
}

impl Param {
    fn new(value: Tensor) -> Self {
        let m = Tensor::zeros(value.shape());
        let v = Tensor::zeros(value.shape());
        Param { value, m, v }
    }
}

/// Named parameter set; iteration order is the sorted name order, which keeps
/// every downstream artifact (checkpoints, updates) deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    params: BTreeMap<String, Param>,
    step: u64,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        self.params.insert(name.to_string(), Param::new(value));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| GgzError::Contract(format!("unknown parameter {name}")))
    }

    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| GgzError::Contract(format!("unknown parameter {name}")))?;
        if p.value.shape() != value.shape() {
            return Err(GgzError::Dim(format!(
                "parameter {name}: shape {:?} cannot be replaced by {:?}",
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn total_values(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    /// One Adam update. The gradient key set must equal the parameter key set.
    pub fn adam_step(
        &mut self,
        grads: &BTreeMap<String, Tensor>,
        lr_for: impl Fn(&str) -> f64,
    ) -> Result<()> {
        for name in grads.keys() {
            if !self.params.contains_key(name) {
                return Err(GgzError::Contract(format!(
                    "gradient for unknown parameter {name}"
                )));
            }
        }
        for name in self.params.keys() {
            if !grads.contains_key(name) {
                return Err(GgzError::Contract(format!(
                    "missing gradient for parameter {name}"
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        for (name, param) in self.params.iter_mut() {
            let g = &grads[name];
            if g.shape() != param.value.shape() {
                return Err(GgzError::Dim(format!(
                    "gradient for {name}: {:?} vs parameter {:?}",
                    g.shape(),
                    param.value.shape()
                )));
            }
            let lr = lr_for(name);
            let (m, v, p) = (
                param.m.data_mut(),
                param.v.data_mut(),
                param.value.data_mut(),
            );
            for ((pv, (mv, vv)), &gv) in
                p.iter_mut().zip(m.iter_mut().zip(v.iter_mut())).zip(g.data())
            {
                *mv = ADAM_BETA1 * *mv + (1.0 - ADAM_BETA1) * gv;
                *vv = ADAM_BETA2 * *vv + (1.0 - ADAM_BETA2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }

    /// Serialize parameter values. Layout: magic "GGNZ", version u16 LE, then
    /// per parameter in name order: name length u16 LE, name bytes, rank u8,
    /// dims u32 LE each, values f64 LE. Round-trips bit-exactly.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for (name, param) in &self.params {
            let name_bytes = name.as_bytes();
            if name_bytes.len() > u16::MAX as usize {
                return Err(GgzError::InvalidArg(format!("parameter name too long: {name}")));
            }
            out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
            out.extend_from_slice(name_bytes);
            out.push(param.value.shape().len() as u8);
            for &d in param.value.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in param.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteCursor::new(bytes);
        let magic = r.take(4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(GgzError::Format {
                offset: 0,
                msg: "bad checkpoint magic".into(),
            });
        }
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(GgzError::Format {
                offset: 4,
                msg: format!("unsupported checkpoint version {version}"),
            });
        }
        let mut set = ParamSet::new();
        while !r.at_end() {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| {
                GgzError::Format {
                    offset: r.pos(),
                    msg: "parameter name is not utf-8".into(),
                }
            })?;
            let rank = r.u8()? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32()? as usize);
            }
            let n: usize = dims.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
            }
            set.insert(&name, Tensor::new(dims, data)?);
        }
        Ok(set)
    }
}

pub(crate) struct ByteCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        ByteCursor { bytes, pos: 0 }
    }

    pub fn pos(&self) -> usize {
        self.pos
    }

    pub fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(GgzError::Format {
                offset: self.pos,
                msg: format!("truncated: wanted {n} more bytes"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Binds named parameters onto a tape, one leaf per name per pass.
pub struct TapeBind<'a> {
    params: &'a ParamSet,
    vars: BTreeMap<String, Var>,
}

impl<'a> TapeBind<'a> {
    pub fn new(params: &'a ParamSet) -> Self {
        TapeBind {
            params,
            vars: BTreeMap::new(),
        }
    }

    pub fn var(&mut self, tape: &mut Tape, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let value = self.params.get(name)?.clone();
        let v = tape.param(value);
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// Gradients for every parameter in the set; zeros for parameters that
    /// were never on the loss path this pass.
    pub fn collect(&self, grads: &mut crate::tape::Gradients) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for name in self.params.names() {
            let g = match self.vars.get(name) {
                Some(&v) => grads.take(v),
                None => Tensor::zeros(self.params.get(name).unwrap().shape()),
            };
            out.insert(name.to_string(), g);
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Elu,
    Gelu,
    Identity,
}

pub fn activation(tape: &mut Tape, kind: Activation, x: Var) -> Result<Var> {
    match kind {
        Activation::Elu => tape.elu(x),
        Activation::Gelu => tape.gelu(x),
        Activation::Identity => Ok(x),
    }
}

/// Glorot-uniform initialization in ±sqrt(6/(fan_in+fan_out)).
pub fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    Tensor::matrix(fan_in, fan_out, data).expect("glorot shape")
}

/// A plain fully connected stack. Hidden layers get the activation (and
/// dropout when configured); the output layer is linear.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub prefix: String,
    pub dims: Vec<usize>,
    pub act: Activation,
    pub dropout: f64,
    /// Zero-init the output layer (uniform logits at the start of training).
    pub final_zero_init: bool,
    /// Constant added to the output bias at init time.
    pub final_bias: f64,
}

impl Mlp {
    pub fn new(prefix: &str, dims: Vec<usize>, act: Activation) -> Self {
        Mlp {
            prefix: prefix.to_string(),
            dims,
            act,
            dropout: 0.0,
            final_zero_init: false,
            final_bias: 0.0,
        }
    }

    pub fn with_dropout(mut self, rate: f64) -> Self {
        self.dropout = rate;
        self
    }

    pub fn with_final_zero_init(mut self) -> Self {
        self.final_zero_init = true;
        self
    }

    pub fn with_final_bias(mut self, b: f64) -> Self {
        self.final_bias = b;
        self
    }

    pub fn layer_count(&self) -> usize {
        self.dims.len() - 1
    }

    fn weight_name(&self, layer: usize) -> String {
        format!("{}.w{}", self.prefix, layer)
    }

    fn bias_name(&self, layer: usize) -> String {
        format!("{}.b{}", self.prefix, layer)
    }

    pub fn register(&self, params: &mut ParamSet, rng: &mut ChaCha8Rng) {
        for l in 0..self.layer_count() {
            let (fan_in, fan_out) = (self.dims[l], self.dims[l + 1]);
            let last = l == self.layer_count() - 1;
            let w = if last && self.final_zero_init {
                Tensor::zeros(&[fan_in, fan_out])
            } else {
                glorot(rng, fan_in, fan_out)
            };
            let b = if last {
                Tensor::full(&[fan_out], self.final_bias)
            } else {
                Tensor::zeros(&[fan_out])
            };
            params.insert(&self.weight_name(l), w);
            params.insert(&self.bias_name(l), b);
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        bind: &mut TapeBind,
        input: Var,
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        let mut h = input;
        for l in 0..self.layer_count() {
            let w = bind.var(tape, &self.weight_name(l))?;
            let b = bind.var(tape, &self.bias_name(l))?;
            h = tape.linear(h, w, b)?;
            if l < self.layer_count() - 1 {
                h = activation(tape, self.act, h)?;
                if self.dropout > 0.0 {
                    h = tape.dropout(h, self.dropout, train, rng)?;
                }
            }
        }
        Ok(h)
    }
}

/// Max relative error between analytic gradients and central differences over
/// a deterministic sample of coordinates.
///
/// The builder must be deterministic given the parameter set (dropout in eval
/// mode, noise passed in as constants); this is checked by evaluating twice.
pub fn gradcheck(
    params: &ParamSet,
    eps: f64,
    coords_per_param: usize,
    seed: u64,
    build: impl Fn(&mut Tape, &mut TapeBind) -> Result<Var>,
) -> Result<f64> {
    use rand::SeedableRng;

    if eps <= 0.0 {
        return Err(GgzError::InvalidArg("gradcheck eps must be positive".into()));
    }
    let eval = |p: &ParamSet| -> Result<f64> {
        let mut tape = Tape::new();
        let mut bind = TapeBind::new(p);
        let loss = build(&mut tape, &mut bind)?;
        tape.value(loss).scalar_value()
    };
    let l0 = eval(params)?;
    let l1 = eval(params)?;
    if l0.to_bits() != l1.to_bits() {
        return Err(GgzError::Contract(
            "gradcheck forward is non-deterministic: two evaluations differ".into(),
        ));
    }

    let mut tape = Tape::new();
    let mut bind = TapeBind::new(params);
    let loss = build(&mut tape, &mut bind)?;
    let mut grads = tape.backward(loss)?;
    let analytic = bind.collect(&mut grads);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel = 0.0f64;
    let names: Vec<String> = params.names().map(|s| s.to_string()).collect();
    for name in &names {
        let tensor = params.get(name)?;
        let n = tensor.numel();
        let count = coords_per_param.min(n);
        for _ in 0..count {
            let idx = rng.gen_range(0..n);
            let orig = tensor.data()[idx];

            let mut plus = params.clone();
            let mut t = plus.get(name)?.clone();
            t.data_mut()[idx] = orig + eps;
            plus.set_value(name, t)?;

            let mut minus = params.clone();
            let mut t = minus.get(name)?.clone();
            t.data_mut()[idx] = orig - eps;
            minus.set_value(name, t)?;

            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * eps);
            let a = analytic[name].data()[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn linear_identity_weight_passes_input() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let w = tape.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = tape.constant(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        let y = tape.linear(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0]);
    }

    #[test]
    fn linear_zero_input_passes_bias() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        let w = tape.constant(Tensor::matrix(2, 2, vec![7.0, -3.0, 2.0, 9.0]).unwrap());
        let b = tape.constant(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
        let y = tape.linear(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 4.0]);
    }

    #[test]
    fn linear_hand_multiply() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap());
        let w = tape.constant(Tensor::matrix(2, 2, vec![2.0, 0.0, 0.0, 3.0]).unwrap());
        let b = tape.constant(Tensor::new(vec![2], vec![1.0, 1.0]).unwrap());
        let y = tape.linear(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 4.0]);
    }

    #[test]
    fn linear_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(1, 3, vec![0.0; 3]).unwrap());
        let w = tape.constant(Tensor::matrix(2, 2, vec![0.0; 4]).unwrap());
        let b = tape.constant(Tensor::new(vec![2], vec![0.0; 2]).unwrap());
        let err = tape.linear(x, w, b).unwrap_err().to_string();
        assert!(err.contains("[1, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn elu_fixed_points() {
        assert_eq!(crate::tape::elu(0.0), 0.0);
        assert!((crate::tape::elu(-40.0) + 1.0).abs() < 1e-15);
        assert_eq!(crate::tape::gelu(0.0), 0.0);
    }

    #[test]
    fn dropout_eval_and_zero_rate_are_identity() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let mut r = rng(0);
        let y = tape.dropout(x, 0.0, true, &mut r).unwrap();
        assert_eq!(y, x);
        let z = tape.dropout(x, 0.9, false, &mut r).unwrap();
        assert_eq!(z, x);
    }

    #[test]
    fn dropout_preserves_mean_at_scale() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![10_000], vec![1.0; 10_000]).unwrap());
        let mut r = rng(7);
        let y = tape.dropout(x, 0.5, true, &mut r).unwrap();
        let mean: f64 = tape.value(y).data().iter().sum::<f64>() / 10_000.0;
        assert!((mean - 1.0).abs() < 0.1, "mean {mean}");
    }

    #[test]
    fn dropout_rate_one_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2], vec![1.0, 1.0]).unwrap());
        let mut r = rng(0);
        assert!(matches!(
            tape.dropout(x, 1.0, true, &mut r),
            Err(GgzError::InvalidArg(_))
        ));
    }

    #[test]
    fn backward_linear_derivative() {
        // loss = w·x with x = 2 -> dloss/dw = 2
        let mut tape = Tape::new();
        let w = tape.param(Tensor::scalar(5.0));
        let x = tape.constant(Tensor::scalar(2.0));
        let loss = tape.mul(w, x).unwrap();
        let mut grads = tape.backward(loss).unwrap();
        assert_eq!(grads.take(w).data(), &[2.0]);
    }

    #[test]
    fn backward_elu_positive_slope_is_one() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::scalar(1.0));
        let e = tape.elu(w).unwrap();
        let loss = tape.sum(e).unwrap();
        let mut grads = tape.backward(loss).unwrap();
        assert_eq!(grads.take(w).data(), &[1.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        assert!(matches!(
            tape.backward(w),
            Err(GgzError::InvalidArg(_))
        ));
    }

    #[test]
    fn off_path_param_gets_zero_gradient() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::scalar(5.0));
        let unused = tape.param(Tensor::new(vec![3], vec![1.0; 3]).unwrap());
        let x = tape.constant(Tensor::scalar(2.0));
        let loss = tape.mul(w, x).unwrap();
        let mut grads = tape.backward(loss).unwrap();
        assert_eq!(grads.take(unused).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn two_layer_mlp_matches_finite_differences() {
        let mut params = ParamSet::new();
        let mut r = rng(0);
        let mlp = Mlp::new("net", vec![3, 5, 2], Activation::Elu);
        mlp.register(&mut params, &mut r);
        let input = Tensor::matrix(2, 3, vec![0.3, -0.4, 0.9, 1.2, 0.1, -0.8]).unwrap();
        let max_rel = gradcheck(&params, 1e-4, 8, 42, |tape, bind| {
            let x = tape.constant(input.clone());
            let mut r = rng(1);
            let out = mlp.forward(tape, bind, x, false, &mut r)?;
            let sq = tape.mul(out, out)?;
            tape.mean(sq)
        })
        .unwrap();
        assert!(max_rel < 1e-4, "max rel err {max_rel}");
    }

    #[test]
    fn gelu_path_matches_finite_differences() {
        let mut params = ParamSet::new();
        let mut r = rng(3);
        let mlp = Mlp::new("net", vec![4, 6, 3], Activation::Gelu);
        mlp.register(&mut params, &mut r);
        let input = Tensor::matrix(2, 4, vec![0.5, -1.1, 0.2, 0.8, -0.3, 0.6, 1.4, -0.9]).unwrap();
        let max_rel = gradcheck(&params, 1e-4, 8, 43, |tape, bind| {
            let x = tape.constant(input.clone());
            let mut r = rng(1);
            let out = mlp.forward(tape, bind, x, false, &mut r)?;
            let sq = tape.mul(out, out)?;
            tape.mean(sq)
        })
        .unwrap();
        assert!(max_rel < 1e-4, "max rel err {max_rel}");
    }

    #[test]
    fn gradcheck_quadratic_is_nearly_exact() {
        let mut params = ParamSet::new();
        params.insert("w", Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap());
        let max_rel = gradcheck(&params, 1e-4, 3, 0, |tape, bind| {
            let w = bind.var(tape, "w")?;
            let sq = tape.mul(w, w)?;
            tape.sum(sq)
        })
        .unwrap();
        assert!(max_rel < 1e-6, "max rel err {max_rel}");
    }

    #[test]
    fn gradcheck_zero_eps_rejected() {
        let mut params = ParamSet::new();
        params.insert("w", Tensor::scalar(1.0));
        assert!(matches!(
            gradcheck(&params, 0.0, 1, 0, |tape, bind| {
                let w = bind.var(tape, "w")?;
                tape.sum(w)
            }),
            Err(GgzError::InvalidArg(_))
        ));
    }

    #[test]
    fn gradcheck_detects_nondeterministic_forward() {
        use std::sync::atomic::{AtomicU64, Ordering};
        static CALLS: AtomicU64 = AtomicU64::new(0);
        let mut params = ParamSet::new();
        params.insert("w", Tensor::scalar(1.0));
        let err = gradcheck(&params, 1e-4, 1, 0, |tape, bind| {
            let w = bind.var(tape, "w")?;
            let jitter = CALLS.fetch_add(1, Ordering::SeqCst) as f64;
            let j = tape.constant(Tensor::scalar(jitter));
            let s = tape.add(w, j)?;
            tape.sum(s)
        })
        .unwrap_err();
        assert!(matches!(err, GgzError::Contract(_)), "{err}");
    }

    #[test]
    fn adam_zero_gradient_leaves_parameters_unchanged() {
        let mut params = ParamSet::new();
        params.insert("w", Tensor::new(vec![2], vec![1.5, -2.5]).unwrap());
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::zeros(&[2]));
        params.adam_step(&grads, |_| 0.1).unwrap();
        assert_eq!(params.get("w").unwrap().data(), &[1.5, -2.5]);
        assert_eq!(params.step(), 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr_sign() {
        let mut params = ParamSet::new();
        params.insert("w", Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        let mut grads = BTreeMap::new();
        grads.insert(
            "w".to_string(),
            Tensor::new(vec![2], vec![0.7, -1.3]).unwrap(),
        );
        params.adam_step(&grads, |_| 0.01).unwrap();
        let w = params.get("w").unwrap().data();
        assert!((w[0] + 0.01).abs() < 1e-6, "{w:?}");
        assert!((w[1] - 0.01).abs() < 1e-6, "{w:?}");
    }

    #[test]
    fn adam_converges_on_quadratic() {
        // 200 steps on f(w) = (w-3)^2 from w = 0 with lr 0.1
        let mut params = ParamSet::new();
        params.insert("w", Tensor::scalar(0.0));
        for _ in 0..200 {
            let w = params.get("w").unwrap().data()[0];
            let mut grads = BTreeMap::new();
            grads.insert("w".to_string(), Tensor::scalar(2.0 * (w - 3.0)));
            params.adam_step(&grads, |_| 0.1).unwrap();
        }
        let w = params.get("w").unwrap().data()[0];
        assert!((w - 3.0).abs() < 0.05, "w = {w}");
    }

    #[test]
    fn adam_missing_gradient_key_is_contract_error() {
        let mut params = ParamSet::new();
        params.insert("w", Tensor::scalar(0.0));
        params.insert("b", Tensor::scalar(0.0));
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::scalar(1.0));
        assert!(matches!(
            params.adam_step(&grads, |_| 0.1),
            Err(GgzError::Contract(_))
        ));
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ggnz");
        let mut params = ParamSet::new();
        let mut r = rng(11);
        params.insert("enc.w0", glorot(&mut r, 7, 3));
        params.insert("enc.b0", Tensor::new(vec![3], vec![0.1, -0.2, 1e-300]).unwrap());
        params.insert("z", Tensor::scalar(std::f64::consts::PI));
        params.save(&path).unwrap();
        let loaded = ParamSet::load(&path).unwrap();
        for name in params.names() {
            let a = params.get(name).unwrap();
            let b = loaded.get(name).unwrap();
            assert_eq!(a.shape(), b.shape());
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        // byte-identical when saved again
        let path2 = dir.path().join("p2.ggnz");
        loaded.save(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn checkpoint_bad_magic_rejected() {
        let err = ParamSet::from_bytes(b"NOPE").unwrap_err();
        assert!(matches!(err, GgzError::Format { offset: 0, .. }));
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let mut params = ParamSet::new();
        let mut r = rng(5);
        let mlp = Mlp::new("net", vec![4, 8, 2], Activation::Gelu).with_dropout(0.3);
        mlp.register(&mut params, &mut r);
        let input = Tensor::matrix(3, 4, (0..12).map(|i| (i as f64) * 0.17 - 1.0).collect()).unwrap();
        let run = || {
            let mut tape = Tape::new();
            let mut bind = TapeBind::new(&params);
            let x = tape.constant(input.clone());
            let mut dr = rng(99);
            let out = mlp.forward(&mut tape, &mut bind, x, true, &mut dr).unwrap();
            tape.value(out).data().to_vec()
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
