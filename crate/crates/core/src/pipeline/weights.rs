//! RXW1 binary weight files.
//!
//! Layout: the magic bytes "RXW1", a u32 tensor count, then per tensor a
//! u16 name length, the UTF-8 name, a u8 rank, rank u32 dims, and the
//! f32 row-major payload. All integers and floats are little-endian.
//! Decoding errors carry the byte offset where the problem starts.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::detector::{ConvWeights, DetectorConfig, DetectorWeights, ResidualStage, STAGES};
use crate::error::{Error, Result};
use crate::recognizer::{
    AttentionWeights, FeedForwardWeights, LayerWeights, RecognizerConfig, RecognizerWeights,
};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"RXW1";

/// Serialize named tensors in the given order.
pub fn encode_tensors(tensors: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    let count = u32::try_from(tensors.len())
        .map_err(|_| Error::Config(format!("{} tensors exceed format capacity", tensors.len())))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in tensors {
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::Config(format!("tensor name {name:?} too long")))?;
        let rank = u8::try_from(t.rank())
            .map_err(|_| Error::Config(format!("tensor {name:?} rank {} too deep", t.rank())))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d)
                .map_err(|_| Error::Config(format!("tensor {name:?} dim {d} too large")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::WeightFormat {
                offset: self.pos as u64,
                reason: format!(
                    "truncated: {what} needs {n} bytes, {} left",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
}

/// Parse a complete RXW1 byte stream.
pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::WeightFormat {
            offset: 0,
            reason: format!("bad magic {:?}, expected \"RXW1\"", String::from_utf8_lossy(magic)),
        });
    }
    let count = r.u32("tensor count")? as usize;
    let mut out: Vec<(String, Tensor)> = Vec::with_capacity(count);
    let mut seen = std::collections::HashSet::new();
    for _ in 0..count {
        let name_offset = r.pos as u64;
        let name_len = r.u16("name length")? as usize;
        let name_bytes = r.take(name_len, "name")?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|e| Error::WeightFormat {
                offset: name_offset,
                reason: format!("name is not UTF-8: {e}"),
            })?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(Error::WeightFormat {
                offset: name_offset,
                reason: format!("duplicate tensor name {name:?}"),
            });
        }
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut elems: usize = 1;
        for _ in 0..rank {
            let dim_offset = r.pos as u64;
            let d = r.u32("dim")? as usize;
            elems = elems.checked_mul(d).ok_or(Error::WeightFormat {
                offset: dim_offset,
                reason: "dimension product overflows".into(),
            })?;
            shape.push(d);
        }
        let payload_offset = r.pos;
        let payload = r.take(elems * 4, "payload")?;
        let mut data = Vec::with_capacity(elems);
        for c in payload.chunks_exact(4) {
            data.push(f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        }
        let t = Tensor::new(shape, data).map_err(|e| Error::WeightFormat {
            offset: payload_offset as u64,
            reason: e.to_string(),
        })?;
        out.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(Error::WeightFormat {
            offset: r.pos as u64,
            reason: format!("{} bytes of trailing data", bytes.len() - r.pos),
        });
    }
    Ok(out)
}

pub fn save_tensors(path: impl AsRef<Path>, tensors: &[(String, Tensor)]) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_tensors(tensors)?;
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_tensors(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    decode_tensors(&bytes)
}

fn conv_names(prefix: &str, w: &ConvWeights, out: &mut Vec<(String, Tensor)>) {
    out.push((format!("{prefix}.kernel"), w.kernel.clone()));
    out.push((format!("{prefix}.bias"), w.bias.clone()));
}

/// Flatten both weight sets into one stable, named tensor list.
pub fn pack_weights(det: &DetectorWeights, rec: &RecognizerWeights) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    for (i, s) in det.backbone.iter().enumerate() {
        conv_names(&format!("det.stage{i}.conv1"), &s.conv1, &mut out);
        conv_names(&format!("det.stage{i}.conv2"), &s.conv2, &mut out);
    }
    for (i, l) in det.fpn_lateral.iter().enumerate() {
        conv_names(&format!("det.lateral{i}"), l, &mut out);
    }
    conv_names("det.rpn_score", &det.rpn_score, &mut out);
    conv_names("det.rpn_bbox", &det.rpn_bbox, &mut out);
    conv_names("det.head_score", &det.head_score, &mut out);
    conv_names("det.head_bbox", &det.head_bbox, &mut out);
    conv_names("det.head_mask", &det.head_mask, &mut out);
    out.push(("rec.patch_embed".into(), rec.patch_embed.clone()));
    out.push(("rec.pos_embed".into(), rec.pos_embed.clone()));
    for (what, layers) in [("encoder", &rec.encoder), ("decoder", &rec.decoder)] {
        for (i, l) in layers.iter().enumerate() {
            out.push((format!("rec.{what}{i}.w_q"), l.attn.w_q.clone()));
            out.push((format!("rec.{what}{i}.w_k"), l.attn.w_k.clone()));
            out.push((format!("rec.{what}{i}.w_v"), l.attn.w_v.clone()));
            out.push((format!("rec.{what}{i}.w_o"), l.attn.w_o.clone()));
            out.push((format!("rec.{what}{i}.ffn_w1"), l.ffn.w1.clone()));
            out.push((format!("rec.{what}{i}.ffn_w2"), l.ffn.w2.clone()));
        }
    }
    out.push(("rec.out_proj".into(), rec.out_proj.clone()));
    out.push(("rec.out_bias".into(), rec.out_bias.clone()));
    out
}

/// Rebuild both weight sets from a named tensor list, checking that the
/// names and every shape agree with the given configurations.
pub fn unpack_weights(
    tensors: Vec<(String, Tensor)>,
    det_cfg: DetectorConfig,
    rec_cfg: RecognizerConfig,
) -> Result<(DetectorWeights, RecognizerWeights)> {
    fn take(map: &mut BTreeMap<String, Tensor>, name: String) -> Result<Tensor> {
        map.remove(&name)
            .ok_or_else(|| Error::Config(format!("weight file is missing tensor {name:?}")))
    }
    fn conv(map: &mut BTreeMap<String, Tensor>, prefix: &str) -> Result<ConvWeights> {
        Ok(ConvWeights {
            kernel: take(map, format!("{prefix}.kernel"))?,
            bias: take(map, format!("{prefix}.bias"))?,
        })
    }
    fn layers(
        map: &mut BTreeMap<String, Tensor>,
        what: &str,
        n: usize,
    ) -> Result<Vec<LayerWeights>> {
        (0..n)
            .map(|i| {
                Ok(LayerWeights {
                    attn: AttentionWeights {
                        w_q: take(map, format!("rec.{what}{i}.w_q"))?,
                        w_k: take(map, format!("rec.{what}{i}.w_k"))?,
                        w_v: take(map, format!("rec.{what}{i}.w_v"))?,
                        w_o: take(map, format!("rec.{what}{i}.w_o"))?,
                    },
                    ffn: FeedForwardWeights {
                        w1: take(map, format!("rec.{what}{i}.ffn_w1"))?,
                        w2: take(map, format!("rec.{what}{i}.ffn_w2"))?,
                    },
                })
            })
            .collect()
    }

    let mut map: BTreeMap<String, Tensor> = tensors.into_iter().collect();
    let mut backbone = Vec::with_capacity(STAGES);
    for i in 0..STAGES {
        backbone.push(ResidualStage {
            conv1: conv(&mut map, &format!("det.stage{i}.conv1"))?,
            conv2: conv(&mut map, &format!("det.stage{i}.conv2"))?,
        });
    }
    let mut fpn_lateral = Vec::with_capacity(STAGES);
    for i in 0..STAGES {
        fpn_lateral.push(conv(&mut map, &format!("det.lateral{i}"))?);
    }
    let det = DetectorWeights {
        config: det_cfg,
        backbone,
        fpn_lateral,
        rpn_score: conv(&mut map, "det.rpn_score")?,
        rpn_bbox: conv(&mut map, "det.rpn_bbox")?,
        head_score: conv(&mut map, "det.head_score")?,
        head_bbox: conv(&mut map, "det.head_bbox")?,
        head_mask: conv(&mut map, "det.head_mask")?,
    };
    let rec = RecognizerWeights {
        patch_embed: take(&mut map, "rec.patch_embed".into())?,
        pos_embed: take(&mut map, "rec.pos_embed".into())?,
        encoder: layers(&mut map, "encoder", rec_cfg.layers)?,
        decoder: layers(&mut map, "decoder", rec_cfg.layers)?,
        out_proj: take(&mut map, "rec.out_proj".into())?,
        out_bias: take(&mut map, "rec.out_bias".into())?,
        config: rec_cfg,
    };
    if let Some(name) = map.keys().next() {
        return Err(Error::Config(format!("weight file has unexpected tensor {name:?}")));
    }
    det.validate()?;
    rec.validate()?;
    Ok((det, rec))
}
