//! SeedPack: the compact on-disk model format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "SFM1"  u16 version  u32 descriptor_len  descriptor (UTF-8 text)
//! per layer: u8 tag, payload
//!     sinefm:  seed filters f32[], combine f32[], transform seed u64, family u8
//!     conv / addproj: weights f32[]
//!     dense / seghead: weights f32[], bias f32[]
//!     others: empty
//! u64 FNV-1a checksum of everything before it
//! ```
//!
//! Generated filters are never stored; they are re-derived from the seed.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{ArchDescriptor, LayerSpec, Model};
use crate::real::Real;
use crate::tensor::Tensor;
use crate::transforms::TransformFamily;

pub const MAGIC: &[u8; 4] = b"SFM1";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 4;
const CHECKSUM_LEN: usize = 8;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn layer_tag(spec: &LayerSpec) -> u8 {
    match spec {
        LayerSpec::StandardConv(_) => 0,
        LayerSpec::SineFM(_) => 1,
        LayerSpec::MaxPool => 2,
        LayerSpec::NearestUpsample => 3,
        LayerSpec::Relu => 4,
        LayerSpec::GlobalAvgPool => 5,
        LayerSpec::DenseHead { .. } => 6,
        LayerSpec::SegHead { .. } => 7,
        LayerSpec::Save => 8,
        LayerSpec::Add => 9,
        LayerSpec::AddProj { .. } => 10,
    }
}

fn payload_len(spec: &LayerSpec) -> usize {
    let floats = spec.learnable_params() * 4;
    match spec {
        LayerSpec::SineFM(_) => floats + 8 + 1,
        _ => floats,
    }
}

/// Serialises `model`; weights are stored as `f32`.
pub fn pack<T: Real>(model: &Model<T>) -> Vec<u8> {
    let desc = model.descriptor();
    let text = desc.to_text();
    let mut out = Vec::with_capacity(packed_len(desc));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    let mut params = model.params().into_iter();
    for spec in &desc.layers {
        out.push(layer_tag(spec));
        for _ in spec.weight_shapes() {
            let t = params.next().expect("model matches its descriptor");
            for &v in t.data() {
                out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
        }
        if let LayerSpec::SineFM(cfg) = spec {
            out.extend_from_slice(&cfg.seed.to_le_bytes());
            out.push(cfg.family.tag());
        }
    }
    let sum = fnv1a64(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

/// Exact packed size for a model with this descriptor.
pub fn packed_len(desc: &ArchDescriptor) -> usize {
    HEADER_LEN
        + desc.to_text().len()
        + desc.layers.iter().map(|l| 1 + payload_len(l)).sum::<usize>()
        + CHECKSUM_LEN
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

#[derive(Debug)]
enum ParseFailure {
    Truncated(usize),
    Other(Error),
}

impl From<Error> for ParseFailure {
    fn from(e: Error) -> Self {
        ParseFailure::Other(e)
    }
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], ParseFailure> {
        if self.bytes.len() - self.pos < n {
            return Err(ParseFailure::Truncated(self.pos));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> std::result::Result<u8, ParseFailure> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> std::result::Result<u32, ParseFailure> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, ParseFailure> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// A named byte range of a pack, for inspection.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Section {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

struct Parsed {
    descriptor: ArchDescriptor,
    weights: Vec<Tensor<f32>>,
    sections: Vec<Section>,
}

/// Parses everything but the checksum. `body` excludes the trailing 8 bytes.
fn parse_body(body: &[u8]) -> std::result::Result<Parsed, ParseFailure> {
    let mut r = Reader { bytes: body, pos: HEADER_LEN - 4 };
    let desc_len = r.u32()? as usize;
    let desc_off = r.pos;
    let text = std::str::from_utf8(r.take(desc_len)?)
        .map_err(|_| Error::Format("descriptor is not valid UTF-8".into()))?;
    let descriptor = ArchDescriptor::from_text(text)?;
    descriptor.validate()?;
    let mut sections = vec![
        Section { name: "header".into(), offset: 0, len: HEADER_LEN },
        Section { name: "descriptor".into(), offset: desc_off, len: desc_len },
    ];
    let mut weights = Vec::new();
    for (i, spec) in descriptor.layers.iter().enumerate() {
        let start = r.pos;
        let tag = r.u8()?;
        if tag != layer_tag(spec) {
            return Err(Error::Format(format!(
                "layer {i}: record tag {tag} does not match descriptor kind '{}'",
                spec.keyword()
            ))
            .into());
        }
        for dims in spec.weight_shapes() {
            let n: usize = dims.iter().product();
            let raw = r.take(n * 4)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            weights.push(Tensor::new(dims, data)?);
        }
        if let LayerSpec::SineFM(cfg) = spec {
            let seed = r.u64()?;
            let family_tag = r.u8()?;
            let family = TransformFamily::from_tag(family_tag)
                .ok_or_else(|| Error::Version(format!("layer {i}: unknown transform family tag {family_tag}")))?;
            if seed != cfg.seed || family != cfg.family {
                return Err(Error::Format(format!("layer {i}: transform record disagrees with descriptor")).into());
            }
        }
        sections.push(Section {
            name: format!("layer {i} {}", spec.keyword()),
            offset: start,
            len: r.pos - start,
        });
    }
    if r.pos != body.len() {
        return Err(Error::Format(format!("{} unexpected trailing bytes", body.len() - r.pos)).into());
    }
    Ok(Parsed { descriptor, weights, sections })
}

fn check_header(bytes: &[u8]) -> Result<()> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format("not a SeedPack file (bad magic)".into()));
    }
    if bytes.len() < 6 {
        return Err(Error::Format("truncated header".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::Version(format!("unsupported SeedPack version {version} (expected {VERSION})")));
    }
    if bytes.len() < HEADER_LEN + CHECKSUM_LEN {
        return Err(Error::Format("truncated file".into()));
    }
    Ok(())
}

fn parse_checked(bytes: &[u8]) -> Result<Parsed> {
    check_header(bytes)?;
    let split = bytes.len() - CHECKSUM_LEN;
    let stored = u64::from_le_bytes(bytes[split..].try_into().unwrap());
    let computed = fnv1a64(&bytes[..split]);
    let parsed = parse_body(&bytes[..split]);
    if stored != computed {
        return Err(match parsed {
            Err(ParseFailure::Truncated(at)) => Error::Format(format!("truncated file: record at byte {at} is incomplete")),
            _ => Error::Corruption { offset: split, stored, computed },
        });
    }
    parsed.map_err(|f| match f {
        ParseFailure::Truncated(at) => Error::Format(format!("truncated file: record at byte {at} is incomplete")),
        ParseFailure::Other(e) => e,
    })
}

/// Restores a model. Transform hyperparameters are regenerated from each
/// layer's seed, so the result is bit-identical to the packed model.
pub fn unpack(bytes: &[u8]) -> Result<Model<f32>> {
    let p = parse_checked(bytes)?;
    Model::from_weights(&p.descriptor, p.weights)
}

/// Byte ranges of every section, including the checksum.
pub fn sections(bytes: &[u8]) -> Result<Vec<Section>> {
    let mut s = parse_checked(bytes)?.sections;
    s.push(Section {
        name: "checksum".into(),
        offset: bytes.len() - CHECKSUM_LEN,
        len: CHECKSUM_LEN,
    });
    Ok(s)
}

/// Section table followed by a hex dump of at most `limit` bytes per section.
pub fn hex_dump(bytes: &[u8], limit: usize) -> Result<String> {
    let mut out = String::new();
    for s in sections(bytes)? {
        let _ = writeln!(out, "{:08x}  {:>10}  {}", s.offset, s.len, s.name);
        let shown = &bytes[s.offset..s.offset + s.len.min(limit)];
        for (row, chunk) in shown.chunks(16).enumerate() {
            let hex: Vec<String> = chunk.iter().map(|b| format!("{b:02x}")).collect();
            let _ = writeln!(out, "  {:08x}  {}", s.offset + row * 16, hex.join(" "));
        }
        if s.len > limit {
            let _ = writeln!(out, "  ... {} more bytes", s.len - limit);
        }
    }
    Ok(out)
}

/// Editable weight state: descriptor text plus every learnable tensor, as
/// JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightState {
    pub descriptor: String,
    pub tensors: Vec<TensorState>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorState {
    pub shape: [usize; 4],
    pub data: Vec<f32>,
}

impl WeightState {
    pub fn from_model<T: Real>(model: &Model<T>) -> Self {
        Self {
            descriptor: model.descriptor().to_text(),
            tensors: model
                .params()
                .into_iter()
                .map(|t| TensorState {
                    shape: t.shape().0,
                    data: t.data().iter().map(|v| v.as_f64() as f32).collect(),
                })
                .collect(),
        }
    }

    pub fn to_model(&self) -> Result<Model<f32>> {
        let desc = ArchDescriptor::from_text(&self.descriptor)?;
        let tensors = self
            .tensors
            .iter()
            .map(|t| Tensor::new(t.shape, t.data.clone()))
            .collect::<Result<Vec<_>>>()?;
        Model::from_weights(&desc, tensors)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("state serialises")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("weight state: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SizeReport {
    pub total_bytes: usize,
    pub descriptor_bytes: usize,
    pub weight_bytes: usize,
    pub overhead_bytes: usize,
    /// Size of the same network with every SineFM layer stored as a dense
    /// convolution.
    pub standard_bytes: usize,
    pub ratio: f64,
}

pub fn size_report(desc: &ArchDescriptor) -> SizeReport {
    let total = packed_len(desc);
    let descriptor_bytes = desc.to_text().len();
    let weight_bytes = desc.learnable_params() * 4;
    let standard_bytes = packed_len(&crate::network::to_standard(desc));
    SizeReport {
        total_bytes: total,
        descriptor_bytes,
        weight_bytes,
        overhead_bytes: total - descriptor_bytes - weight_bytes,
        standard_bytes,
        ratio: standard_bytes as f64 / total as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{convert_to_sinefm, tiny_vgg};

    fn sample() -> Model<f32> {
        let d = convert_to_sinefm(&tiny_vgg(4, 16), 16, 5, TransformFamily::Sinusoidal, 5);
        Model::build(&d, 5).unwrap()
    }

    #[test]
    fn fnv_vectors() {
        assert_eq!(fnv1a64(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a64(b"a"), 0xaf63_dc4c_8601_ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x8594_4171_f739_67e8);
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = sample();
        let bytes = pack(&m);
        assert_eq!(bytes.len(), packed_len(m.descriptor()));
        let back = unpack(&bytes).unwrap();
        assert_eq!(back.descriptor(), m.descriptor());
        for (a, b) in m.params().iter().zip(back.params()) {
            assert!(a.bit_eq(b));
        }
        assert_eq!(pack(&back), bytes);
        let state = WeightState::from_json(&WeightState::from_model(&m).to_json()).unwrap();
        assert_eq!(pack(&state.to_model().unwrap()), bytes);
    }

    #[test]
    fn error_kinds() {
        let bytes = pack(&sample());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(unpack(&bad), Err(Error::Format(_))));
        let mut ver = bytes.clone();
        ver[4] = 9;
        assert!(matches!(unpack(&ver), Err(Error::Version(_))));
        let mut flip = bytes.clone();
        let mid = bytes.len() - 100;
        flip[mid] ^= 0x10;
        assert!(matches!(unpack(&flip), Err(Error::Corruption { .. })));
        assert!(matches!(unpack(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
        assert!(matches!(unpack(&bytes[..bytes.len() / 2]), Err(Error::Format(_))));
    }

    #[test]
    fn sections_cover_file() {
        let bytes = pack(&sample());
        let s = sections(&bytes).unwrap();
        let mut end = 0;
        for sec in &s {
            assert_eq!(sec.offset, end, "{}", sec.name);
            end += sec.len;
        }
        assert_eq!(end, bytes.len());
        assert!(hex_dump(&bytes, 32).unwrap().contains("checksum"));
    }
}
