//! Hybrid codec: conditional autoencoder for generative entries, LZMA for
//! lossless entries, and the bit-exact wire container that carries both.
//!
//! The container layout is the repo's normative byte-level contract; see
//! `docs/wire_format.md` for the field-by-field description with worked hex.

use std::io::{Read, Write};

use lzma_rust2::{LzmaOptions, LzmaReader, LzmaWriter};
use rand_chacha::ChaCha8Rng;

use crate::error::{GgzError, Result};
use crate::nn::{ByteCursor, Mlp, ParamSet, TapeBind};
use crate::policy::{ContextKey, EmbeddingSpec};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const CONTAINER_MAGIC: &[u8; 4] = b"GGZP";
/// Version 1 pins the lossless path to LZMA preset 9 with the default
/// dictionary and 16-bit bin-center quantization.
pub const CONTAINER_VERSION: u16 = 1;
/// task_id wire value meaning "no task" (reconstruction mode).
pub const TASK_NONE: u16 = u16::MAX;

/// Bits per entry of the raw 16-bit representation that rates and CR are
/// measured against.
pub const RAW_BITS_PER_ENTRY: f64 = 16.0;
/// Wire width of one latent component.
pub const LATENT_BITS: f64 = 32.0;

const QUANT_LEVELS: f64 = 65536.0;

/// Quantize a normalized value to 16 bits. Values map to 65536 equal bins
/// with ties rounded half-even; reconstruction returns the bin center, so the
/// round-trip error never exceeds 2^-17 of the [0,1] range.
pub fn quantize16(x: f64) -> Result<u16> {
    if !(-1e-9..=1.0 + 1e-9).contains(&x) {
        return Err(GgzError::Contract(format!(
            "value {x} outside [0,1] cannot be quantized"
        )));
    }
    let q = (x * QUANT_LEVELS - 0.5).round_ties_even();
    Ok(q.clamp(0.0, QUANT_LEVELS - 1.0) as u16)
}

pub fn dequantize16(q: u16) -> f64 {
    (q as f64 + 0.5) / QUANT_LEVELS
}

/// Quantize-dequantize in one step; what the receiver will see.
pub fn quantize_roundtrip(x: f64) -> Result<f64> {
    Ok(dequantize16(quantize16(x)?))
}

// ---------------------------------------------------------------------------
// Lossless path
// ---------------------------------------------------------------------------

/// Preset-9 LZMA dictionary, clamped: telemetry windows are a few KB, so a
/// dictionary beyond 1 MiB only inflates allocations, never the match space.
const LZMA_DICT_SIZE: u32 = 1 << 20;

fn lzma_compress(bytes: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let mut opts = LzmaOptions::with_preset(9);
    opts.dict_size = LZMA_DICT_SIZE;
    // Size-unknown header with an explicit end-of-stream marker: truncated
    // streams then fail to decode instead of yielding fabricated bytes.
    let mut w = LzmaWriter::new_use_header(&mut out, &opts, None)
        .map_err(|e| GgzError::Runtime(format!("lzma encoder: {e}")))?;
    w.write_all(bytes)
        .and_then(|_| w.finish().map(|_| ()))
        .map_err(|e| GgzError::Runtime(format!("lzma encoder: {e}")))?;
    Ok(out)
}

fn lzma_decompress(blob: &[u8], expected_len: usize) -> Result<Vec<u8>> {
    let r = LzmaReader::new_mem_limit(blob, u32::MAX, None)
        .map_err(|e| GgzError::Corruption(format!("lzma header: {e}")))?;
    let mut out = Vec::new();
    // Bounded read: a corrupt stream may never terminate on its own.
    r.take(expected_len as u64 + 16)
        .read_to_end(&mut out)
        .map_err(|e| GgzError::Corruption(format!("lzma stream: {e}")))?;
    Ok(out)
}

/// Quantize the masked entries (in index order) and LZMA them. An empty mask
/// yields an empty blob.
pub fn lossless_encode(window: &[f64], mask: &[u8]) -> Result<Vec<u8>> {
    if window.len() != mask.len() {
        return Err(GgzError::Dim(format!(
            "lossless mask of length {} vs window of {}",
            mask.len(),
            window.len()
        )));
    }
    let mut bytes = Vec::new();
    for (&x, &m) in window.iter().zip(mask) {
        if m != 0 {
            bytes.extend_from_slice(&quantize16(x)?.to_le_bytes());
        }
    }
    if bytes.is_empty() {
        return Ok(Vec::new());
    }
    lzma_compress(&bytes)
}

/// Inverse of [`lossless_encode`]: the quantized values restored in mask
/// order. Fails closed — a length mismatch yields an error, never a partial
/// result.
pub fn lossless_decode(blob: &[u8], mask: &[u8]) -> Result<Vec<f64>> {
    let count = mask.iter().filter(|&&m| m != 0).count();
    if blob.is_empty() {
        if count == 0 {
            return Ok(Vec::new());
        }
        return Err(GgzError::Corruption(format!(
            "empty blob but mask selects {count} entries"
        )));
    }
    let bytes = lzma_decompress(blob, 2 * count)?;
    if bytes.len() != 2 * count {
        return Err(GgzError::Corruption(format!(
            "decompressed {} bytes, expected {} for {count} entries",
            bytes.len(),
            2 * count
        )));
    }
    Ok(bytes
        .chunks_exact(2)
        .map(|c| dequantize16(u16::from_le_bytes([c[0], c[1]])))
        .collect())
}

// ---------------------------------------------------------------------------
// Conditional autoencoder
// ---------------------------------------------------------------------------

/// Architecture of the conditional encoder/decoder pair.
#[derive(Clone, Debug)]
pub struct AeSpec {
    pub d: usize,
    pub ctx_dim: usize,
    pub latent_dim: usize,
    pub enc_hidden: Vec<usize>,
    pub dec_hidden: Vec<usize>,
}

impl AeSpec {
    pub fn new(d: usize, ctx_dim: usize, latent_dim: usize) -> Self {
        AeSpec {
            d,
            ctx_dim,
            latent_dim,
            enc_hidden: vec![512, 256],
            dec_hidden: vec![256, 512],
        }
    }

    fn encoder(&self) -> Mlp {
        let mut dims = vec![self.d + self.ctx_dim];
        dims.extend(&self.enc_hidden);
        dims.push(self.latent_dim);
        Mlp::new("enc", dims, crate::nn::Activation::Elu)
    }

    fn decoder(&self) -> Mlp {
        let mut dims = vec![self.latent_dim + self.ctx_dim];
        dims.extend(&self.dec_hidden);
        dims.push(self.d);
        // Telemetry is normalized to [0,1]; starting the output at mid-range
        // keeps the clamp from zeroing gradients at init.
        Mlp::new("dec", dims, crate::nn::Activation::Elu).with_final_bias(0.5)
    }

    pub fn register(&self, params: &mut ParamSet, rng: &mut ChaCha8Rng) {
        self.encoder().register(params, rng);
        self.decoder().register(params, rng);
    }

    /// latent = encoder(concat(masked window, context)); `B×latent_dim`.
    pub fn encode(&self, tape: &mut Tape, bind: &mut TapeBind, x_g: Var, ctx: Var) -> Result<Var> {
        let joined = tape.concat_cols(x_g, ctx)?;
        let mut rng = fixed_rng();
        self.encoder().forward(tape, bind, joined, false, &mut rng)
    }

    /// decoder(concat(latent, context)) clamped into [0,1]; `B×D`.
    pub fn decode(&self, tape: &mut Tape, bind: &mut TapeBind, latent: Var, ctx: Var) -> Result<Var> {
        if tape.value(latent).cols() != self.latent_dim {
            return Err(GgzError::Dim(format!(
                "latent of width {} vs configured latent_dim {}",
                tape.value(latent).cols(),
                self.latent_dim
            )));
        }
        let joined = tape.concat_cols(latent, ctx)?;
        let mut rng = fixed_rng();
        let out = self.decoder().forward(tape, bind, joined, false, &mut rng)?;
        tape.clamp01(out)
    }

    /// Evaluation-path encode for one window.
    pub fn encode_eval(
        &self,
        params: &ParamSet,
        embed: &EmbeddingSpec,
        key: ContextKey,
        x_g: &[f64],
    ) -> Result<Vec<f64>> {
        if x_g.len() != self.d {
            return Err(GgzError::Dim(format!(
                "window of {} entries vs configured D {}",
                x_g.len(),
                self.d
            )));
        }
        let mut tape = Tape::new();
        let mut bind = TapeBind::new(params);
        let x = tape.constant(Tensor::matrix(1, self.d, x_g.to_vec())?);
        let ctx = embed.build_context(&mut tape, &mut bind, &[key])?;
        let latent = self.encode(&mut tape, &mut bind, x, ctx)?;
        Ok(tape.value(latent).data().to_vec())
    }

    /// Evaluation-path decode for one window.
    pub fn decode_eval(
        &self,
        params: &ParamSet,
        embed: &EmbeddingSpec,
        key: ContextKey,
        latent: &[f64],
    ) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let mut bind = TapeBind::new(params);
        let l = tape.constant(Tensor::matrix(1, self.latent_dim, latent.to_vec())?);
        let ctx = embed.build_context(&mut tape, &mut bind, &[key])?;
        let out = self.decode(&mut tape, &mut bind, l, ctx)?;
        Ok(tape.value(out).data().to_vec())
    }
}

fn fixed_rng() -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(0)
}

// ---------------------------------------------------------------------------
// Wire container
// ---------------------------------------------------------------------------

/// The payload shipped per window: masks, optional latent, LZMA blob and the
/// context header the receiver needs to reconstruct.
#[derive(Clone, Debug, PartialEq)]
pub struct Payload {
    pub bs_class: u16,
    pub hour_base: u8,
    pub task_id: Option<u16>,
    pub k: u16,
    pub t: u16,
    pub latent_dim: u16,
    pub m_s: Vec<u8>,
    pub m_c: Vec<u8>,
    pub latent: Option<Vec<f32>>,
    pub blob: Vec<u8>,
}

impl Payload {
    pub fn d(&self) -> usize {
        self.k as usize * self.t as usize
    }

    pub fn lossless_mask(&self) -> Vec<u8> {
        self.m_s
            .iter()
            .zip(&self.m_c)
            .map(|(&s, &c)| s & (1 - c))
            .collect()
    }

    fn generative_selected(&self) -> bool {
        self.m_s.iter().zip(&self.m_c).any(|(&s, &c)| s & c == 1)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d();
        if d == 0 {
            return Err(GgzError::Contract("payload with zero data dimension".into()));
        }
        if self.m_s.len() != d || self.m_c.len() != d {
            return Err(GgzError::Contract(format!(
                "mask lengths {}/{} vs dimension {d}",
                self.m_s.len(),
                self.m_c.len()
            )));
        }
        if self
            .m_s
            .iter()
            .chain(&self.m_c)
            .any(|&b| b > 1)
        {
            return Err(GgzError::Contract("masks must be binary".into()));
        }
        if self.m_c.iter().zip(&self.m_s).any(|(&c, &s)| c > s) {
            return Err(GgzError::Contract(
                "compression selector set on an unsampled entry".into(),
            ));
        }
        if self.hour_base as usize >= crate::policy::HOURS_PER_DAY {
            return Err(GgzError::Contract(format!(
                "hour_base {} out of range",
                self.hour_base
            )));
        }
        match (&self.latent, self.generative_selected()) {
            (Some(l), true) => {
                if l.len() != self.latent_dim as usize {
                    return Err(GgzError::Contract(format!(
                        "latent of {} components vs latent_dim {}",
                        l.len(),
                        self.latent_dim
                    )));
                }
            }
            (None, false) => {}
            (Some(_), false) => {
                return Err(GgzError::Contract(
                    "latent present but no entry selected generative".into(),
                ))
            }
            (None, true) => {
                return Err(GgzError::Contract(
                    "generative entries selected but latent missing".into(),
                ))
            }
        }
        Ok(())
    }

    /// Exact size of the packed container in bytes.
    pub fn packed_len(&self) -> usize {
        let bitset = self.d().div_ceil(8);
        4 + 2 + 12 + 2 * bitset + self.latent.as_ref().map_or(0, |l| 4 * l.len()) + 4 + self.blob.len()
    }
}

fn pack_bitset(mask: &[u8]) -> Vec<u8> {
    let mut out = vec![0u8; mask.len().div_ceil(8)];
    for (i, &m) in mask.iter().enumerate() {
        if m != 0 {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

fn unpack_bitset(bytes: &[u8], d: usize, offset: usize) -> Result<Vec<u8>> {
    let mut out = vec![0u8; d];
    for (i, slot) in out.iter_mut().enumerate() {
        *slot = (bytes[i / 8] >> (i % 8)) & 1;
    }
    // padding bits beyond d must be zero
    for i in d..bytes.len() * 8 {
        if (bytes[i / 8] >> (i % 8)) & 1 != 0 {
            return Err(GgzError::Format {
                offset: offset + i / 8,
                msg: "nonzero padding bit in mask".into(),
            });
        }
    }
    Ok(out)
}

/// Serialize a payload. Layout (all integers little-endian):
/// magic "GGZP", version u16, bs_class u16, hour_base u8, task_id u16
/// (0xFFFF when absent), K u16, T u16, latent_dim u16, flags u8 (bit0 =
/// latent present), m_s bitset of ceil(D/8) bytes, m_c bitset, latent as
/// f32 LE when present, blob length u32, blob bytes.
pub fn pack_container(payload: &Payload) -> Result<Vec<u8>> {
    payload.validate()?;
    let mut out = Vec::with_capacity(payload.packed_len());
    out.extend_from_slice(CONTAINER_MAGIC);
    out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    out.extend_from_slice(&payload.bs_class.to_le_bytes());
    out.push(payload.hour_base);
    out.extend_from_slice(&payload.task_id.unwrap_or(TASK_NONE).to_le_bytes());
    out.extend_from_slice(&payload.k.to_le_bytes());
    out.extend_from_slice(&payload.t.to_le_bytes());
    out.extend_from_slice(&payload.latent_dim.to_le_bytes());
    out.push(u8::from(payload.latent.is_some()));
    out.extend_from_slice(&pack_bitset(&payload.m_s));
    out.extend_from_slice(&pack_bitset(&payload.m_c));
    if let Some(latent) = &payload.latent {
        for &v in latent {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(&(payload.blob.len() as u32).to_le_bytes());
    out.extend_from_slice(&payload.blob);
    debug_assert_eq!(out.len(), payload.packed_len());
    Ok(out)
}

/// Exact inverse of [`pack_container`]; any malformation is a format error
/// carrying the byte offset, and nothing partial is ever returned.
pub fn unpack_container(bytes: &[u8]) -> Result<Payload> {
    let mut r = ByteCursor::new(bytes);
    let magic = r.take(4)?;
    if magic != CONTAINER_MAGIC {
        return Err(GgzError::Format {
            offset: 0,
            msg: "bad container magic".into(),
        });
    }
    let version = r.u16()?;
    if version != CONTAINER_VERSION {
        return Err(GgzError::Format {
            offset: 4,
            msg: format!("unsupported container version {version}"),
        });
    }
    let bs_class = r.u16()?;
    let hour_base = r.u8()?;
    if hour_base as usize >= crate::policy::HOURS_PER_DAY {
        return Err(GgzError::Format {
            offset: 8,
            msg: format!("hour_base {hour_base} out of range"),
        });
    }
    let task_raw = r.u16()?;
    let k = r.u16()?;
    let t = r.u16()?;
    if k == 0 || t == 0 {
        return Err(GgzError::Format {
            offset: 11,
            msg: "zero K or T".into(),
        });
    }
    let latent_dim = r.u16()?;
    let flags = r.u8()?;
    if flags & !1 != 0 {
        return Err(GgzError::Format {
            offset: 17,
            msg: format!("unknown flag bits {flags:#bits$b}", bits = 8),
        });
    }
    let d = k as usize * t as usize;
    let bitset_len = d.div_ceil(8);
    let ms_off = r.pos();
    let m_s = unpack_bitset(r.take(bitset_len)?, d, ms_off)?;
    let mc_off = r.pos();
    let m_c = unpack_bitset(r.take(bitset_len)?, d, mc_off)?;
    let latent = if flags & 1 == 1 {
        let mut l = Vec::with_capacity(latent_dim as usize);
        for _ in 0..latent_dim {
            l.push(f32::from_le_bytes(r.take(4)?.try_into().unwrap()));
        }
        Some(l)
    } else {
        None
    };
    let blob_len = r.u32()? as usize;
    let blob_off = r.pos();
    let blob = r.take(blob_len)?.to_vec();
    if !r.at_end() {
        return Err(GgzError::Format {
            offset: blob_off + blob_len,
            msg: "trailing bytes after blob".into(),
        });
    }
    let payload = Payload {
        bs_class,
        hour_base,
        task_id: (task_raw != TASK_NONE).then_some(task_raw),
        k,
        t,
        latent_dim,
        m_s,
        m_c,
        latent,
        blob,
    };
    payload.validate().map_err(|e| GgzError::Format {
        offset: ms_off,
        msg: format!("inconsistent payload: {e}"),
    })?;
    Ok(payload)
}

// ---------------------------------------------------------------------------
// Reconstruction
// ---------------------------------------------------------------------------

/// Merge the generative reconstruction with the exact lossless values.
/// Lossless entries take their decoded value; everything else — generative
/// and unsampled alike — comes from the decoder output, which imputes what
/// was never observed.
pub fn merge_reconstruction(
    x_hat_gen: &[f64],
    lossless_values: &[f64],
    m_s: &[u8],
    m_c: &[u8],
) -> Result<Vec<f64>> {
    let d = x_hat_gen.len();
    if m_s.len() != d || m_c.len() != d {
        return Err(GgzError::Dim(format!(
            "masks of length {}/{} vs window of {d}",
            m_s.len(),
            m_c.len()
        )));
    }
    if m_c.iter().zip(m_s).any(|(&c, &s)| c > s) {
        return Err(GgzError::Contract(
            "compression selector set on an unsampled entry".into(),
        ));
    }
    let lossless_count = m_s
        .iter()
        .zip(m_c)
        .filter(|(&s, &c)| s == 1 && c == 0)
        .count();
    if lossless_values.len() != lossless_count {
        return Err(GgzError::Contract(format!(
            "{} lossless values for {lossless_count} lossless entries",
            lossless_values.len()
        )));
    }
    let mut out = x_hat_gen.to_vec();
    let mut next = 0;
    for i in 0..d {
        if m_s[i] == 1 && m_c[i] == 0 {
            out[i] = lossless_values[next];
            next += 1;
        }
    }
    Ok(out)
}

/// Receiver-side reconstruction of one container. When the payload carries no
/// latent (nothing went generative), the receiver re-derives it by encoding
/// an all-zero masked window under the same context — both sides know the
/// generative input is identically zero in that case.
pub fn reconstruct_payload(
    params: &ParamSet,
    ae: &AeSpec,
    embed: &EmbeddingSpec,
    payload: &Payload,
) -> Result<Vec<f64>> {
    payload.validate()?;
    let d = payload.d();
    if d != ae.d {
        return Err(GgzError::Dim(format!(
            "payload dimension {d} vs model dimension {}",
            ae.d
        )));
    }
    let key = ContextKey {
        bs_class: payload.bs_class as usize,
        hour: payload.hour_base as usize,
        task: payload.task_id.map(|t| t as usize),
    };
    let latent: Vec<f64> = match &payload.latent {
        Some(values) => values.iter().map(|&v| v as f64).collect(),
        None => ae.encode_eval(params, embed, key, &vec![0.0; d])?,
    };
    let x_hat_gen = ae.decode_eval(params, embed, key, &latent)?;
    let lossless = lossless_decode(&payload.blob, &payload.lossless_mask())?;
    merge_reconstruction(&x_hat_gen, &lossless, &payload.m_s, &payload.m_c)
}

// ---------------------------------------------------------------------------
// Rate accounting
// ---------------------------------------------------------------------------

/// Normalized bit-costs of the two routes. `r_ge` is the latent size over the
/// raw window size; `r_lc` is the calibrated per-entry lossless cost relative
/// to one raw entry.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RateModel {
    r_ge: f64,
    r_lc: Option<f64>,
    calibration_windows: usize,
}

impl RateModel {
    /// Rate model with the generative cost fixed by configuration and the
    /// lossless cost not yet calibrated.
    pub fn uncalibrated(latent_dim: usize, d: usize) -> Self {
        RateModel {
            r_ge: latent_dim as f64 * LATENT_BITS / (d as f64 * RAW_BITS_PER_ENTRY),
            r_lc: None,
            calibration_windows: 0,
        }
    }

    pub fn with_r_lc(latent_dim: usize, d: usize, r_lc: f64, windows: usize) -> Self {
        RateModel {
            r_ge: latent_dim as f64 * LATENT_BITS / (d as f64 * RAW_BITS_PER_ENTRY),
            r_lc: Some(r_lc),
            calibration_windows: windows,
        }
    }

    pub fn r_ge(&self) -> f64 {
        self.r_ge
    }

    pub fn r_lc(&self) -> f64 {
        self.r_lc.unwrap_or(f64::NAN)
    }

    pub fn calibration_windows(&self) -> usize {
        self.calibration_windows
    }

    pub fn is_calibrated(&self) -> bool {
        self.r_lc.is_some()
    }

    pub fn require_calibrated(&self) -> Result<()> {
        if self.is_calibrated() {
            Ok(())
        } else {
            Err(GgzError::Contract(
                "rate model used before calibration".into(),
            ))
        }
    }
}

/// Measure the per-entry LZMA cost over calibration windows and their mask
/// distribution: mean over windows of (blob bits / lossless entries) / 16.
pub fn calibrate_rate_model(
    windows: &[Vec<f64>],
    masks: &[Vec<u8>],
    latent_dim: usize,
    d: usize,
) -> Result<RateModel> {
    if windows.len() < 100 {
        return Err(GgzError::Contract(format!(
            "rate calibration needs at least 100 windows, got {}",
            windows.len()
        )));
    }
    if windows.len() != masks.len() {
        return Err(GgzError::Dim(format!(
            "{} windows vs {} masks",
            windows.len(),
            masks.len()
        )));
    }
    let mut ratios = Vec::new();
    for (w, m) in windows.iter().zip(masks) {
        let count = m.iter().filter(|&&b| b != 0).count();
        if count == 0 {
            continue;
        }
        let blob = lossless_encode(w, m)?;
        ratios.push(blob.len() as f64 * 8.0 / count as f64 / RAW_BITS_PER_ENTRY);
    }
    if ratios.is_empty() {
        return Err(GgzError::Contract(
            "no lossless entries anywhere in the calibration set".into(),
        ));
    }
    let r_lc = ratios.iter().sum::<f64>() / ratios.len() as f64;
    Ok(RateModel::with_r_lc(latent_dim, d, r_lc, ratios.len()))
}

/// Measured compression ratio: raw bytes (16-bit per entry) over container
/// bytes, with dimensions read from each container's own header.
pub fn measured_cr(containers: &[Vec<u8>]) -> Result<f64> {
    if containers.is_empty() {
        return Err(GgzError::InvalidArg("measured_cr over no containers".into()));
    }
    let mut raw = 0usize;
    let mut packed = 0usize;
    for c in containers {
        let payload = unpack_container(c)?;
        raw += payload.d() * 2;
        packed += c.len();
    }
    Ok(raw as f64 / packed as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::PolicyDecision;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn embed() -> EmbeddingSpec {
        EmbeddingSpec {
            n_classes: 4,
            class_dim: 4,
            hour_dim: 4,
            n_tasks: 3,
            task_dim: 4,
            with_task: false,
        }
    }

    fn tiny_ae(d: usize, latent: usize) -> AeSpec {
        AeSpec {
            d,
            ctx_dim: 8,
            latent_dim: latent,
            enc_hidden: vec![16],
            dec_hidden: vec![16],
        }
    }

    #[test]
    fn quantization_error_bounded_by_2_pow_17() {
        let bound = 2f64.powi(-17);
        let mut r = rng(4);
        for _ in 0..20_000 {
            let x: f64 = r.gen();
            let err = (x - quantize_roundtrip(x).unwrap()).abs();
            assert!(err <= bound + 1e-15, "x {x} err {err:e}");
        }
        // the named midpoint case
        let err = (0.5 - quantize_roundtrip(0.5).unwrap()).abs();
        assert!(err <= bound, "err {err:e}");
        // grid points survive exactly
        for q in [0u16, 1, 7, 32768, 65534, 65535] {
            assert_eq!(quantize16(dequantize16(q)).unwrap(), q);
        }
    }

    #[test]
    fn quantize_rejects_out_of_range() {
        assert!(quantize16(1.2).is_err());
        assert!(quantize16(-0.1).is_err());
        assert!(quantize16(1.0 + 5e-10).is_ok());
    }

    #[test]
    fn lossless_empty_mask_is_empty_blob() {
        let blob = lossless_encode(&[0.3, 0.4], &[0, 0]).unwrap();
        assert!(blob.is_empty());
        assert!(lossless_decode(&blob, &[0, 0]).unwrap().is_empty());
    }

    #[test]
    fn lossless_roundtrip_exact_at_grid() {
        let window: Vec<f64> = (0..50).map(|i| dequantize16(i * 1000)).collect();
        let mask: Vec<u8> = (0..50).map(|i| (i % 3 == 0) as u8).collect();
        let blob = lossless_encode(&window, &mask).unwrap();
        let decoded = lossless_decode(&blob, &mask).unwrap();
        let expected: Vec<f64> = window
            .iter()
            .zip(&mask)
            .filter(|(_, &m)| m == 1)
            .map(|(&x, _)| x)
            .collect();
        assert_eq!(decoded, expected);
    }

    #[test]
    fn lossless_constant_window_compresses_well() {
        let window = vec![0.5; 400];
        let mask = vec![1u8; 400];
        let blob = lossless_encode(&window, &mask).unwrap();
        assert!(
            blob.len() * 4 < 2 * 400,
            "constant data should compress far below raw: {} bytes",
            blob.len()
        );
    }

    #[test]
    fn lossless_truncated_blob_fails_closed() {
        let window: Vec<f64> = (0..64).map(|i| i as f64 / 64.0).collect();
        let mask = vec![1u8; 64];
        let blob = lossless_encode(&window, &mask).unwrap();
        let truncated = &blob[..blob.len() - blob.len() / 4];
        assert!(matches!(
            lossless_decode(truncated, &mask),
            Err(GgzError::Corruption(_))
        ));
        // mid-stream corruption also fails closed
        let mut flipped = blob.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 0x5a;
        assert!(lossless_decode(&flipped, &mask).is_err());
        // wrong mask length vs payload
        let short_mask = vec![1u8; 60];
        assert!(lossless_decode(&blob, &short_mask).is_err());
    }

    fn sample_payload(latent_dim: u16, with_gen: bool, blob: Vec<u8>) -> Payload {
        let (k, t) = (34u16, 24u16);
        let d = (k * t) as usize;
        let mut m_s = vec![0u8; d];
        let mut m_c = vec![0u8; d];
        for i in 0..d {
            if with_gen && i % 2 == 0 {
                m_s[i] = 1;
                m_c[i] = 1;
            }
        }
        Payload {
            bs_class: 3,
            hour_base: 0,
            task_id: None,
            k,
            t,
            latent_dim,
            m_s,
            m_c,
            latent: with_gen.then(|| (0..latent_dim).map(|i| i as f32 * 0.25).collect()),
            blob,
        }
    }

    #[test]
    fn container_byte_count_follows_layout_arithmetic() {
        // independent layout oracle: magic 4 + version 2 + header fields 12
        // + two ceil(816/8)=102 bitsets + 192*4 latent + 4 blob length
        let payload = sample_payload(192, true, Vec::new());
        let expected = 4 + 2 + 12 + 102 + 102 + 192 * 4 + 4;
        assert_eq!(expected, 994);
        let packed = pack_container(&payload).unwrap();
        assert_eq!(packed.len(), expected);
        assert_eq!(payload.packed_len(), expected);
    }

    #[test]
    fn halving_latent_dim_shrinks_by_half_latent_bytes() {
        let full = pack_container(&sample_payload(192, true, Vec::new())).unwrap();
        let half = pack_container(&sample_payload(96, true, Vec::new())).unwrap();
        assert_eq!(full.len() - half.len(), 96 * 4);
    }

    #[test]
    fn container_roundtrip_identity() {
        let payload = sample_payload(16, true, vec![1, 2, 3, 250]);
        let packed = pack_container(&payload).unwrap();
        let back = unpack_container(&packed).unwrap();
        assert_eq!(payload, back);
    }

    #[test]
    fn no_sampling_container_is_header_plus_bitsets() {
        let payload = sample_payload(16, false, Vec::new());
        let packed = pack_container(&payload).unwrap();
        assert_eq!(packed.len(), 4 + 2 + 12 + 102 + 102 + 4);
        let back = unpack_container(&packed).unwrap();
        assert!(back.latent.is_none());
        assert_eq!(back, payload);
    }

    #[test]
    fn corrupted_magic_is_format_error() {
        let mut packed = pack_container(&sample_payload(8, true, Vec::new())).unwrap();
        packed[0] = b'X';
        match unpack_container(&packed) {
            Err(GgzError::Format { offset: 0, .. }) => {}
            other => panic!("expected format error at offset 0, got {other:?}"),
        }
    }

    #[test]
    fn latent_flag_zero_with_nonzero_latent_dim_is_legal() {
        let payload = sample_payload(192, false, Vec::new());
        assert_eq!(payload.latent_dim, 192);
        let packed = pack_container(&payload).unwrap();
        let back = unpack_container(&packed).unwrap();
        assert!(back.latent.is_none());
        assert_eq!(back.latent_dim, 192);
    }

    #[test]
    fn latent_missing_for_generative_entries_rejected() {
        let mut payload = sample_payload(8, true, Vec::new());
        payload.latent = None;
        assert!(matches!(
            pack_container(&payload),
            Err(GgzError::Contract(_))
        ));
    }

    #[test]
    fn merge_pure_lossless_restores_quantized_exactly() {
        let d = 24;
        let window: Vec<f64> = (0..d).map(|i| i as f64 / d as f64).collect();
        let m_s = vec![1u8; d];
        let m_c = vec![0u8; d];
        let blob = lossless_encode(&window, &m_s).unwrap();
        let lossless = lossless_decode(&blob, &m_s).unwrap();
        let gen = vec![0.123; d];
        let merged = merge_reconstruction(&gen, &lossless, &m_s, &m_c).unwrap();
        for (i, (&m, &x)) in merged.iter().zip(&window).enumerate() {
            assert_eq!(m, quantize_roundtrip(x).unwrap(), "entry {i}");
        }
    }

    #[test]
    fn merge_pure_imputation_copies_generative_output() {
        let gen = vec![0.7; 10];
        let merged = merge_reconstruction(&gen, &[], &vec![0u8; 10], &vec![0u8; 10]).unwrap();
        assert_eq!(merged, gen);
    }

    #[test]
    fn merge_partitions_every_entry_exactly_once() {
        let d = 9;
        let m_s = vec![1, 1, 0, 1, 0, 1, 1, 0, 1];
        let m_c = vec![1, 0, 0, 1, 0, 0, 1, 0, 0];
        let gen = vec![-1.0; d]; // sentinel for "from decoder"
        let lossless = vec![2.0; 3]; // entries with m_s=1, m_c=0
        let merged = merge_reconstruction(&gen, &lossless, &m_s, &m_c).unwrap();
        for i in 0..d {
            let expect_lossless = m_s[i] == 1 && m_c[i] == 0;
            assert_eq!(merged[i] == 2.0, expect_lossless, "entry {i}");
            assert_eq!(merged[i] == -1.0, !expect_lossless, "entry {i}");
        }
    }

    #[test]
    fn merge_rejects_inconsistent_masks() {
        assert!(matches!(
            merge_reconstruction(&[0.0; 2], &[], &[0, 0], &[1, 0]),
            Err(GgzError::Contract(_))
        ));
    }

    #[test]
    fn rate_model_r_ge_formula() {
        let rm = RateModel::uncalibrated(192, 816);
        assert!((rm.r_ge() - 192.0 * 32.0 / (816.0 * 16.0)).abs() < 1e-12);
        assert!((rm.r_ge() - 0.47058823529411764).abs() < 1e-12);
        assert!(rm.require_calibrated().is_err());
    }

    #[test]
    fn calibration_random_data_near_or_above_one() {
        let mut r = rng(10);
        let windows: Vec<Vec<f64>> = (0..120)
            .map(|_| (0..256).map(|_| r.gen::<f64>()).collect())
            .collect();
        let masks: Vec<Vec<u8>> = (0..120).map(|_| vec![1u8; 256]).collect();
        let rm = calibrate_rate_model(&windows, &masks, 32, 256).unwrap();
        assert!(rm.r_lc() > 0.9, "incompressible noise should cost ~raw, got {}", rm.r_lc());
    }

    #[test]
    fn calibration_constant_data_far_below_one() {
        let windows: Vec<Vec<f64>> = (0..120).map(|_| vec![0.5; 256]).collect();
        let masks: Vec<Vec<u8>> = (0..120).map(|_| vec![1u8; 256]).collect();
        let rm = calibrate_rate_model(&windows, &masks, 32, 256).unwrap();
        assert!(rm.r_lc() < 0.5, "constant data should compress hard, got {}", rm.r_lc());
    }

    #[test]
    fn calibration_preconditions() {
        let windows = vec![vec![0.5; 8]; 99];
        let masks = vec![vec![1u8; 8]; 99];
        assert!(matches!(
            calibrate_rate_model(&windows, &masks, 8, 8),
            Err(GgzError::Contract(_))
        ));
        let windows = vec![vec![0.5; 8]; 120];
        let masks = vec![vec![0u8; 8]; 120];
        assert!(matches!(
            calibrate_rate_model(&windows, &masks, 8, 8),
            Err(GgzError::Contract(_))
        ));
    }

    #[test]
    fn measured_cr_identity_when_container_equals_raw() {
        // hypothetical raw passthrough: a container whose byte size happens to
        // equal the raw size gives CR = 1 by definition
        let payload = sample_payload(8, false, vec![0u8; 1632 - 226]);
        let packed = pack_container(&payload).unwrap();
        assert_eq!(packed.len(), 1632);
        let cr = measured_cr(&[packed]).unwrap();
        assert!((cr - 1.0).abs() < 1e-12);
        assert!(measured_cr(&[]).is_err());
    }

    #[test]
    fn generative_only_size_ratio_is_4_25_for_192_of_816() {
        // the size-ratio definition at equal float width
        assert!((816.0_f64 / 192.0 - 4.25).abs() < 1e-12);
    }

    #[test]
    fn ae_encode_is_total_and_deterministic() {
        let d = 24;
        let ae = tiny_ae(d, 6);
        let em = embed();
        let mut params = ParamSet::new();
        let mut r = rng(1);
        em.register(&mut params, &mut r);
        ae.register(&mut params, &mut r);
        let key = ContextKey {
            bs_class: 1,
            hour: 2,
            task: None,
        };
        let zeros = vec![0.0; d];
        let l1 = ae.encode_eval(&params, &em, key, &zeros).unwrap();
        let l2 = ae.encode_eval(&params, &em, key, &zeros).unwrap();
        assert_eq!(l1.len(), 6);
        assert_eq!(l1, l2);
    }

    #[test]
    fn ae_decode_stays_in_unit_interval_untrained() {
        let d = 24;
        let ae = tiny_ae(d, 6);
        let em = embed();
        let mut params = ParamSet::new();
        let mut r = rng(2);
        em.register(&mut params, &mut r);
        ae.register(&mut params, &mut r);
        let key = ContextKey {
            bs_class: 0,
            hour: 9,
            task: None,
        };
        let latent: Vec<f64> = (0..6).map(|i| i as f64 * 3.0 - 8.0).collect();
        let out = ae.decode_eval(&params, &em, key, &latent).unwrap();
        assert_eq!(out.len(), d);
        assert!(out.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn ae_decode_responds_to_context() {
        let d = 24;
        let ae = tiny_ae(d, 6);
        let em = embed();
        let mut params = ParamSet::new();
        let mut r = rng(3);
        em.register(&mut params, &mut r);
        ae.register(&mut params, &mut r);
        let latent = vec![0.3; 6];
        let a = ae
            .decode_eval(
                &params,
                &em,
                ContextKey {
                    bs_class: 0,
                    hour: 0,
                    task: None,
                },
                &latent,
            )
            .unwrap();
        let b = ae
            .decode_eval(
                &params,
                &em,
                ContextKey {
                    bs_class: 3,
                    hour: 12,
                    task: None,
                },
                &latent,
            )
            .unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn latent_f32_truncation_changes_reconstruction_below_1e6() {
        let d = 48;
        let ae = tiny_ae(d, 12);
        let em = embed();
        let mut params = ParamSet::new();
        let mut r = rng(8);
        em.register(&mut params, &mut r);
        ae.register(&mut params, &mut r);
        let key = ContextKey {
            bs_class: 2,
            hour: 6,
            task: None,
        };
        let x: Vec<f64> = (0..d).map(|i| (i as f64 / d as f64).sin().abs()).collect();
        let latent = ae.encode_eval(&params, &em, key, &x).unwrap();
        let truncated: Vec<f64> = latent.iter().map(|&v| v as f32 as f64).collect();
        let full = ae.decode_eval(&params, &em, key, &latent).unwrap();
        let narrow = ae.decode_eval(&params, &em, key, &truncated).unwrap();
        let mae = full
            .iter()
            .zip(&narrow)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / d as f64;
        assert!(mae < 1e-6, "truncation mae {mae:e}");
    }

    #[test]
    fn reconstruct_payload_uses_lossless_values_exactly() {
        let d = 24;
        let ae = tiny_ae(d, 6);
        let em = embed();
        let mut params = ParamSet::new();
        let mut r = rng(5);
        em.register(&mut params, &mut r);
        ae.register(&mut params, &mut r);

        let window: Vec<f64> = (0..d).map(|i| (i as f64) / d as f64).collect();
        let m_s = vec![1u8; d];
        let m_c = vec![0u8; d];
        let blob = lossless_encode(&window, &m_s).unwrap();
        let payload = Payload {
            bs_class: 1,
            hour_base: 0,
            task_id: None,
            k: 4,
            t: 6,
            latent_dim: 6,
            m_s,
            m_c,
            latent: None,
            blob,
        };
        let out = reconstruct_payload(&params, &ae, &em, &payload).unwrap();
        for (a, &x) in out.iter().zip(&window) {
            assert_eq!(*a, quantize_roundtrip(x).unwrap());
        }
    }

    #[test]
    fn decision_to_payload_smoke() {
        // glue check: a hard decision turns into a valid container
        let d = 12;
        let logits = Tensor::matrix(d, 3, {
            let mut v = vec![0.0; d * 3];
            for i in 0..d {
                v[i * 3 + (i % 3)] = 4.0;
            }
            v
        })
        .unwrap();
        let dec: PolicyDecision = crate::policy::hard_decode(&logits);
        let window: Vec<f64> = (0..d).map(|i| i as f64 / d as f64).collect();
        let lossless_mask: Vec<u8> = dec
            .m_s
            .iter()
            .zip(&dec.m_c)
            .map(|(&s, &c)| s & (1 - c))
            .collect();
        let blob = lossless_encode(&window, &lossless_mask).unwrap();
        let payload = Payload {
            bs_class: 0,
            hour_base: 0,
            task_id: Some(2),
            k: 3,
            t: 4,
            latent_dim: 4,
            m_s: dec.m_s.clone(),
            m_c: dec.m_c.clone(),
            latent: (dec.generative_count() > 0).then(|| vec![0.5f32; 4]),
            blob,
        };
        let packed = pack_container(&payload).unwrap();
        assert_eq!(unpack_container(&packed).unwrap(), payload);
    }
}
