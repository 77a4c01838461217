//! Channel-prefix progressive bitstream.
//!
//! # Layout
//!
//! All integers little-endian.
//!
//! ```text
//! magic            b"SPC1"
//! version          u8  (= 1)
//! flags            u8  bit 0: refinement enabled, bit 1: coordinate order
//! num_blocks       u8  n
//! reserved         u8  (= 0)
//! boundaries       u32 x n     k_1 < ... < k_n = C
//! hyper_channels   u32
//! height, width    u32, u32    latent grid; hyperlatent is ceil(H/4) x ceil(W/4)
//! weights_hash     [u8; 32]
//! segment_lengths  u32 x (n + 1)
//! segments         hyperlatent, then blocks 1..n
//! ```
//!
//! The hyperlatent is coded in raster `(c, y, x)` order under the static
//! per-channel prior of the bundle. Block `b` is coded under parameters
//! derived from the latent with channels `>= k_{b-1}` zeroed, so it only
//! depends on earlier blocks. Within a block symbols are sent by refined
//! scale, largest first, ties by ascending `(c, y, x)`.

use std::cmp::Ordering;

use thiserror::Error;

use crate::entropycoder::{
    self, clip_to_support, in_support, quantize_cdf, GaussianModel, RangeDecoder, RangeEncoder,
};
use crate::formats::HASH_LEN;
use crate::latent::{ChannelConfig, LatentTensor};
use crate::models::{FeatureField, GaussianField, ModelBundle, ModelError, HYPER_STRIDE};
use crate::rng::Lcg64;

pub const MAGIC: &[u8; 4] = b"SPC1";
pub const VERSION: u8 = 1;
/// Nominal pixels per latent position along each axis.
pub const PIXEL_STRIDE: usize = 16;
/// Largest accepted latent grid, `H * W`.
pub const MAX_POSITIONS: usize = 1 << 16;

const FLAG_DELTA: u8 = 1;
const FLAG_COORDINATE: u8 = 2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodecError {
    #[error(
        "symbol {symbol} at (c={channel}, y={y}, x={x}) of {tensor} is outside the coder support"
    )]
    SymbolOutOfSupport {
        tensor: &'static str,
        channel: usize,
        y: usize,
        x: usize,
        symbol: i32,
    },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("bitstream was encoded with different model weights")]
    WeightsHashMismatch,
    #[error("corrupt header: {0}")]
    CorruptHeader(String),
    #[error(
        "prefix of {available} bytes is shorter than the {needed} bytes of header and hyperlatent"
    )]
    HeaderIncomplete { needed: usize, available: usize },
    #[error("invalid block {0}")]
    InvalidBlock(usize),
    #[error("segment {0} does not decode")]
    CorruptSegment(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SymbolOrdering {
    #[default]
    Sigma,
    Coordinate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CodecOptions {
    pub delta_refinement: bool,
    pub ordering: SymbolOrdering,
}

impl Default for CodecOptions {
    fn default() -> Self {
        Self {
            delta_refinement: true,
            ordering: SymbolOrdering::Sigma,
        }
    }
}

impl CodecOptions {
    fn flags(&self) -> u8 {
        let mut f = 0;
        if self.delta_refinement {
            f |= FLAG_DELTA;
        }
        if self.ordering == SymbolOrdering::Coordinate {
            f |= FLAG_COORDINATE;
        }
        f
    }

    fn from_flags(f: u8) -> Result<Self, CodecError> {
        if f & !(FLAG_DELTA | FLAG_COORDINATE) != 0 {
            return Err(CodecError::CorruptHeader(format!("unknown flags {f:#04x}")));
        }
        Ok(Self {
            delta_refinement: f & FLAG_DELTA != 0,
            ordering: if f & FLAG_COORDINATE != 0 {
                SymbolOrdering::Coordinate
            } else {
                SymbolOrdering::Sigma
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Header {
    pub options: CodecOptions,
    pub channels: ChannelConfig,
    pub hyper_channels: usize,
    pub height: usize,
    pub width: usize,
    pub weights_hash: [u8; HASH_LEN],
    /// Hyperlatent segment first, then one per block.
    pub segment_lengths: Vec<usize>,
}

impl Header {
    pub fn encoded_len(num_blocks: usize) -> usize {
        8 + 4 * num_blocks + 12 + HASH_LEN + 4 * (num_blocks + 1)
    }

    pub fn len(&self) -> usize {
        Self::encoded_len(self.channels.num_blocks())
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn hyper_height(&self) -> usize {
        self.height.div_ceil(HYPER_STRIDE)
    }

    pub fn hyper_width(&self) -> usize {
        self.width.div_ceil(HYPER_STRIDE)
    }

    pub fn total_len(&self) -> usize {
        self.len() + self.segment_lengths.iter().sum::<usize>()
    }

    /// Byte offset where segment `i` starts.
    pub fn segment_offset(&self, i: usize) -> usize {
        self.len() + self.segment_lengths[..i].iter().sum::<usize>()
    }

    pub fn write(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(self.options.flags());
        out.push(self.channels.num_blocks() as u8);
        out.push(0);
        let mut put = |v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
        for &b in self.channels.boundaries() {
            put(b);
        }
        put(self.hyper_channels);
        put(self.height);
        put(self.width);
        out.extend_from_slice(&self.weights_hash);
        for &l in &self.segment_lengths {
            out.extend_from_slice(&(l as u32).to_le_bytes());
        }
    }

    /// Parses a header from the front of `bytes`, which may be any prefix of
    /// a stream. Fails with `HeaderIncomplete` when the header itself is cut.
    pub fn parse(bytes: &[u8]) -> Result<Self, CodecError> {
        let incomplete = |needed: usize| CodecError::HeaderIncomplete {
            needed,
            available: bytes.len(),
        };
        if bytes.len() < 8 {
            return Err(incomplete(8));
        }
        if &bytes[..4] != MAGIC {
            return Err(CodecError::CorruptHeader("bad magic".into()));
        }
        if bytes[4] != VERSION {
            return Err(CodecError::CorruptHeader(format!(
                "unsupported version {}",
                bytes[4]
            )));
        }
        let options = CodecOptions::from_flags(bytes[5])?;
        let n = usize::from(bytes[6]);
        if n == 0 || bytes[7] != 0 {
            return Err(CodecError::CorruptHeader(
                "bad block count or reserved byte".into(),
            ));
        }
        let len = Self::encoded_len(n);
        if bytes.len() < len {
            return Err(incomplete(len));
        }
        let mut pos = 8;
        let mut u32_at = || {
            let v = u32::from_le_bytes(bytes[pos..pos + 4].try_into().expect("4 bytes"));
            pos += 4;
            v as usize
        };
        let boundaries: Vec<usize> = (0..n).map(|_| u32_at()).collect();
        let hyper_channels = u32_at();
        let height = u32_at();
        let width = u32_at();
        let channels =
            ChannelConfig::new(boundaries).map_err(|e| CodecError::CorruptHeader(e.to_string()))?;
        if hyper_channels == 0 || height == 0 || width == 0 || height * width > MAX_POSITIONS {
            return Err(CodecError::CorruptHeader(format!(
                "bad grid {hyper_channels}x{height}x{width}"
            )));
        }
        let mut weights_hash = [0u8; HASH_LEN];
        weights_hash.copy_from_slice(&bytes[pos..pos + HASH_LEN]);
        pos += HASH_LEN;
        let mut u32_at = || {
            let v = u32::from_le_bytes(bytes[pos..pos + 4].try_into().expect("4 bytes"));
            pos += 4;
            v as usize
        };
        let segment_lengths = (0..=n).map(|_| u32_at()).collect();
        Ok(Self {
            options,
            channels,
            hyper_channels,
            height,
            width,
            weights_hash,
            segment_lengths,
        })
    }

    fn check_bundle(&self, bundle: &ModelBundle) -> Result<(), CodecError> {
        if self.weights_hash != bundle.hash() {
            return Err(CodecError::WeightsHashMismatch);
        }
        if &self.channels != bundle.channel_config()
            || self.hyper_channels != bundle.config().hyper_channels
        {
            return Err(CodecError::CorruptHeader(
                "channel layout disagrees with the model".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProgressiveBitstream {
    pub header: Header,
    pub segments: Vec<Vec<u8>>,
}

impl ProgressiveBitstream {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.header.total_len());
        self.header.write(&mut out);
        for s in &self.segments {
            out.extend_from_slice(s);
        }
        out
    }

    /// Parses a complete stream; trailing or missing bytes are errors.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CodecError> {
        let header = Header::parse(bytes)?;
        if bytes.len() != header.total_len() {
            return Err(CodecError::CorruptHeader(format!(
                "stream is {} bytes, header declares {}",
                bytes.len(),
                header.total_len()
            )));
        }
        let segments = (0..header.segment_lengths.len())
            .map(|i| {
                let start = header.segment_offset(i);
                bytes[start..start + header.segment_lengths[i]].to_vec()
            })
            .collect();
        Ok(Self { header, segments })
    }

    pub fn len(&self) -> usize {
        self.header.total_len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Header, hyperlatent and blocks `1..=level`.
    pub fn truncate_to_level(&self, level: usize) -> Result<Vec<u8>, CodecError> {
        if level > self.header.channels.num_blocks() {
            return Err(CodecError::InvalidBlock(level));
        }
        let mut out = self.to_bytes();
        out.truncate(self.header.segment_offset(level + 1));
        Ok(out)
    }
}

/// Copy with channels `>= k_{block-1}` zeroed: the context visible while
/// coding `block`.
pub fn prefix_mask(
    latent: &LatentTensor,
    cfg: &ChannelConfig,
    block: usize,
) -> Result<LatentTensor, CodecError> {
    if block == 0 || block > cfg.num_blocks() {
        return Err(CodecError::InvalidBlock(block));
    }
    Ok(latent.masked(cfg.prefix_end(block - 1)))
}

/// Transmission order over within-block indices `(c - k_{b-1}) * H * W + y * W + x`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SymbolOrder(Vec<usize>);

impl SymbolOrder {
    pub fn coordinate(n: usize) -> Self {
        Self((0..n).collect())
    }

    pub fn positions(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `inverse()[i]` is the rank at which index `i` is sent.
    pub fn inverse(&self) -> Vec<usize> {
        let mut inv = vec![0; self.0.len()];
        for (rank, &i) in self.0.iter().enumerate() {
            inv[i] = rank;
        }
        inv
    }
}

/// Stable sort by scale descending, ties by ascending index.
pub fn sigma_order(params: &GaussianField) -> SymbolOrder {
    let mut idx: Vec<usize> = (0..params.len()).collect();
    idx.sort_by(|&a, &b| {
        params.sigma[b]
            .partial_cmp(&params.sigma[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    SymbolOrder(idx)
}

fn block_order(params: &GaussianField, opts: &CodecOptions) -> SymbolOrder {
    match opts.ordering {
        SymbolOrdering::Sigma => sigma_order(params),
        SymbolOrdering::Coordinate => SymbolOrder::coordinate(params.len()),
    }
}

/// Parameters visible to both sides for one block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockTrace {
    pub params: GaussianField,
    pub order: SymbolOrder,
    /// Information content under the coding models; `None` on the decoder side.
    pub ideal_bits: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CodecTrace {
    pub hyper_ideal_bits: Option<f64>,
    pub blocks: Vec<BlockTrace>,
}

fn hyper_models(bundle: &ModelBundle, hyper: &LatentTensor) -> Vec<GaussianModel> {
    let (mean, scale) = bundle.prior();
    let plane = hyper.plane();
    (0..hyper.channels())
        .flat_map(|c| {
            std::iter::repeat_n(
                GaussianModel::new(f64::from(mean[c]), f64::from(scale[c])),
                plane,
            )
        })
        .collect()
}

fn block_params(
    bundle: &ModelBundle,
    p: &FeatureField,
    context_input: &LatentTensor,
    block: usize,
    opts: &CodecOptions,
) -> Result<GaussianField, CodecError> {
    let c = bundle.context_features(context_input)?;
    let base = bundle.entropy_params(p, &c, block)?;
    if block >= 2 && opts.delta_refinement {
        Ok(bundle.delta_refine(p, &c, &base, block)?)
    } else {
        Ok(base)
    }
}

fn ordered_models(params: &GaussianField, order: &SymbolOrder) -> Vec<GaussianModel> {
    order
        .positions()
        .iter()
        .map(|&i| GaussianModel::new(params.mu[i], params.sigma[i]))
        .collect()
}

/// Codes in-support symbols and returns the segment with its ideal size in
/// bits, sharing one table per symbol.
fn code_sequence(symbols: &[i32], models: &[GaussianModel]) -> (Vec<u8>, f64) {
    let mut enc = RangeEncoder::new();
    let mut bits = 0.0;
    for (&s, m) in symbols.iter().zip(models) {
        let cdf = quantize_cdf(m);
        bits += -cdf.probability(s).log2();
        enc.encode_symbol(s, &cdf);
    }
    (enc.finish(), bits)
}

fn check_support(t: &LatentTensor, tensor: &'static str) -> Result<(), CodecError> {
    if let Some(i) = t.data().iter().position(|&s| !in_support(s)) {
        let plane = t.plane();
        return Err(CodecError::SymbolOutOfSupport {
            tensor,
            channel: i / plane,
            y: i % plane / t.width(),
            x: i % t.width(),
            symbol: t.data()[i],
        });
    }
    Ok(())
}

fn check_shapes(
    latent: &LatentTensor,
    hyper: &LatentTensor,
    bundle: &ModelBundle,
) -> Result<(), CodecError> {
    let c = bundle.channel_config().total_channels();
    if latent.channels() != c {
        return Err(CodecError::ShapeMismatch(format!(
            "latent has {} channels, model expects {c}",
            latent.channels()
        )));
    }
    if latent.plane() > MAX_POSITIONS {
        return Err(CodecError::ShapeMismatch("latent grid too large".into()));
    }
    let want = (
        bundle.config().hyper_channels,
        latent.height().div_ceil(HYPER_STRIDE),
        latent.width().div_ceil(HYPER_STRIDE),
    );
    let found = (hyper.channels(), hyper.height(), hyper.width());
    if want != found {
        return Err(CodecError::ShapeMismatch(format!(
            "hyperlatent is {found:?}, expected {want:?}"
        )));
    }
    Ok(())
}

pub fn encode(
    latent: &LatentTensor,
    hyper: &LatentTensor,
    bundle: &ModelBundle,
    opts: &CodecOptions,
) -> Result<ProgressiveBitstream, CodecError> {
    Ok(encode_traced(latent, hyper, bundle, opts)?.0)
}

pub fn encode_traced(
    latent: &LatentTensor,
    hyper: &LatentTensor,
    bundle: &ModelBundle,
    opts: &CodecOptions,
) -> Result<(ProgressiveBitstream, CodecTrace), CodecError> {
    check_shapes(latent, hyper, bundle)?;
    check_support(latent, "latent")?;
    check_support(hyper, "hyperlatent")?;
    let cfg = bundle.channel_config();
    let (h, w) = (latent.height(), latent.width());
    let plane = h * w;

    let mut trace = CodecTrace::default();
    let hm = hyper_models(bundle, hyper);
    let (hyper_segment, hyper_bits) = code_sequence(hyper.data(), &hm);
    let mut segments = vec![hyper_segment];
    trace.hyper_ideal_bits = Some(hyper_bits);

    let p = bundle.hyper_features(hyper, h, w)?;
    for b in 1..=cfg.num_blocks() {
        let params = block_params(bundle, &p, &prefix_mask(latent, cfg, b)?, b, opts)?;
        let order = block_order(&params, opts);
        let base = params.first_channel * plane;
        let symbols: Vec<i32> = order
            .positions()
            .iter()
            .map(|&i| latent.data()[base + i])
            .collect();
        let models = ordered_models(&params, &order);
        let (segment, bits) = code_sequence(&symbols, &models);
        segments.push(segment);
        let ideal_bits = Some(bits);
        trace.blocks.push(BlockTrace {
            params,
            order,
            ideal_bits,
        });
    }

    let header = Header {
        options: *opts,
        channels: cfg.clone(),
        hyper_channels: hyper.channels(),
        height: h,
        width: w,
        weights_hash: bundle.hash(),
        segment_lengths: segments.iter().map(Vec::len).collect(),
    };
    Ok((ProgressiveBitstream { header, segments }, trace))
}

/// Result of decoding a possibly truncated stream.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedDecode {
    pub latent: LatentTensor,
    /// Exactly recovered symbols per block, in transmission order.
    pub exact_counts: Vec<usize>,
    /// Total symbols per block.
    pub block_sizes: Vec<usize>,
    /// Blocks whose parameters were derived (fully or partially decoded).
    pub decoded_blocks: usize,
}

/// Decodes from segments that may be cut short. `lenient` fills a short
/// block with rounded means; otherwise a short block is an error.
fn decode_segments(
    header: &Header,
    segments: &[&[u8]],
    bundle: &ModelBundle,
    up_to_block: usize,
    lenient: bool,
) -> Result<(TruncatedDecode, CodecTrace), CodecError> {
    header.check_bundle(bundle)?;
    let cfg = &header.channels;
    let (h, w) = (header.height, header.width);
    let plane = h * w;
    let opts = header.options;

    let hyper_shape = (
        header.hyper_channels,
        header.hyper_height(),
        header.hyper_width(),
    );
    let mut hyper = LatentTensor::zeros(hyper_shape.0, hyper_shape.1, hyper_shape.2);
    let hm = hyper_models(bundle, &hyper);
    let decoded = entropycoder::decode_symbols(segments[0], &hm);
    if decoded.decoded_count() != hm.len() {
        return Err(CodecError::CorruptSegment(0));
    }
    hyper.data_mut().copy_from_slice(&decoded.symbols);

    let p = bundle.hyper_features(&hyper, h, w)?;
    let mut latent = LatentTensor::zeros(cfg.total_channels(), h, w);
    let mut trace = CodecTrace::default();
    let mut exact_counts = vec![0; cfg.num_blocks()];
    let block_sizes: Vec<usize> = (1..=cfg.num_blocks())
        .map(|b| cfg.block_channels(b).len() * plane)
        .collect();
    let mut decoded_blocks = 0;

    for b in 1..=up_to_block {
        let seg = segments.get(b).copied().unwrap_or(&[]);
        if seg.is_empty() {
            break;
        }
        let params = block_params(bundle, &p, &prefix_mask(&latent, cfg, b)?, b, &opts)?;
        let order = block_order(&params, &opts);
        let models = ordered_models(&params, &order);
        let mut dec = RangeDecoder::new(seg);
        let base = params.first_channel * plane;
        let mut count = 0;
        for (&i, m) in order.positions().iter().zip(&models) {
            match dec.decode_symbol(&quantize_cdf(m)) {
                Some(s) => {
                    latent.data_mut()[base + i] = s;
                    count += 1;
                }
                None => break,
            }
        }
        exact_counts[b - 1] = count;
        decoded_blocks = b;
        let short = count < order.len();
        if short {
            if !lenient {
                return Err(CodecError::CorruptSegment(b));
            }
            for &i in &order.positions()[count..] {
                latent.data_mut()[base + i] = clip_to_support(params.mu[i].round() as i64);
            }
        }
        trace.blocks.push(BlockTrace {
            params,
            order,
            ideal_bits: None,
        });
        if short {
            break;
        }
    }

    Ok((
        TruncatedDecode {
            latent,
            exact_counts,
            block_sizes,
            decoded_blocks,
        },
        trace,
    ))
}

fn full_segments(bs: &ProgressiveBitstream) -> Vec<&[u8]> {
    bs.segments.iter().map(Vec::as_slice).collect()
}

/// Decodes blocks `1..=up_to_block`; later channels are zero.
pub fn decode(
    bs: &ProgressiveBitstream,
    bundle: &ModelBundle,
    up_to_block: usize,
) -> Result<LatentTensor, CodecError> {
    Ok(decode_traced(bs, bundle, up_to_block)?.0)
}

pub fn decode_traced(
    bs: &ProgressiveBitstream,
    bundle: &ModelBundle,
    up_to_block: usize,
) -> Result<(LatentTensor, CodecTrace), CodecError> {
    if up_to_block == 0 || up_to_block > bs.header.channels.num_blocks() {
        return Err(CodecError::InvalidBlock(up_to_block));
    }
    if bs.segments.len() != bs.header.segment_lengths.len()
        || bs
            .segments
            .iter()
            .zip(&bs.header.segment_lengths)
            .any(|(s, &l)| s.len() != l)
    {
        return Err(CodecError::CorruptHeader(
            "segment lengths disagree with header".into(),
        ));
    }
    let segments = full_segments(bs);
    let (out, trace) = decode_segments(&bs.header, &segments, bundle, up_to_block, false)?;
    Ok((out.latent, trace))
}

/// Decodes a byte prefix of a stream: whole segments exactly, the first cut
/// segment up to its exact prefix with the remaining symbols set to their
/// rounded means, and nothing after it.
pub fn decode_truncated(
    prefix: &[u8],
    bundle: &ModelBundle,
) -> Result<TruncatedDecode, CodecError> {
    let header = Header::parse(prefix)?;
    let needed = header.segment_offset(1);
    if prefix.len() < needed {
        return Err(CodecError::HeaderIncomplete {
            needed,
            available: prefix.len(),
        });
    }
    if prefix.len() > header.total_len() {
        return Err(CodecError::CorruptHeader(format!(
            "{} bytes exceed the declared {}",
            prefix.len(),
            header.total_len()
        )));
    }
    let segments: Vec<&[u8]> = (0..header.segment_lengths.len())
        .map(|i| {
            let start = header.segment_offset(i).min(prefix.len());
            let end = (header.segment_offset(i) + header.segment_lengths[i]).min(prefix.len());
            &prefix[start..end]
        })
        .collect();
    let n = header.channels.num_blocks();
    Ok(decode_segments(&header, &segments, bundle, n, true)?.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateReport {
    pub header_bytes: usize,
    pub segment_bytes: Vec<usize>,
    pub pixels: usize,
    /// `bpp[k - 1]` covers header, hyperlatent and blocks `1..=k`.
    pub bpp: Vec<f64>,
    pub total_bytes: usize,
}

pub fn rate_report(header: &Header) -> RateReport {
    let pixels = PIXEL_STRIDE * header.height * PIXEL_STRIDE * header.width;
    let mut bytes = header.len() + header.segment_lengths[0];
    let bpp = header.segment_lengths[1..]
        .iter()
        .map(|&l| {
            bytes += l;
            8.0 * bytes as f64 / pixels as f64
        })
        .collect();
    RateReport {
        header_bytes: header.len(),
        segment_bytes: header.segment_lengths.clone(),
        pixels,
        bpp,
        total_bytes: header.total_len(),
    }
}

fn sample_symbol(rng: &mut Lcg64, mu: f64, sigma: f64) -> i32 {
    clip_to_support((mu + sigma * rng.normal()).round() as i64)
}

/// Hyperlatent drawn from the bundle's prior for a `height x width` latent.
pub fn sample_hyperlatent(
    bundle: &ModelBundle,
    height: usize,
    width: usize,
    rng: &mut Lcg64,
) -> LatentTensor {
    let (mean, scale) = bundle.prior();
    let mut z = LatentTensor::zeros(
        bundle.config().hyper_channels,
        height.div_ceil(HYPER_STRIDE),
        width.div_ceil(HYPER_STRIDE),
    );
    let plane = z.plane();
    for (i, v) in z.data_mut().iter_mut().enumerate() {
        let c = i / plane;
        *v = sample_symbol(rng, f64::from(mean[c]), f64::from(scale[c]));
    }
    z
}

/// Latent drawn block by block from the model's own conditional predictions.
pub fn sample_latent(
    bundle: &ModelBundle,
    hyper: &LatentTensor,
    height: usize,
    width: usize,
    opts: &CodecOptions,
    rng: &mut Lcg64,
) -> Result<LatentTensor, CodecError> {
    let cfg = bundle.channel_config();
    let mut latent = LatentTensor::zeros(cfg.total_channels(), height, width);
    check_shapes(&latent, hyper, bundle)?;
    let p = bundle.hyper_features(hyper, height, width)?;
    let plane = height * width;
    for b in 1..=cfg.num_blocks() {
        let params = block_params(bundle, &p, &prefix_mask(&latent, cfg, b)?, b, opts)?;
        let base = params.first_channel * plane;
        for i in 0..params.len() {
            latent.data_mut()[base + i] = sample_symbol(rng, params.mu[i], params.sigma[i]);
        }
    }
    Ok(latent)
}
