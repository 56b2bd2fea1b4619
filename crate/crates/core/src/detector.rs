//! Convolutional text-region detector.
//!
//! The stages mirror a small instance-segmentation network: a three-stage
//! residual backbone builds a feature pyramid, lateral convolutions merge
//! it top-down, a region-proposal head scores one square anchor per cell,
//! and the per-region heads read an aligned crop into a score, a box
//! refinement, and a binary mask. Everything is forward-only.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::BitMask;
use crate::tensor::{
    add, bilinear_sample, conv2d, max_pool_2x, sigmoid, sigmoid_map, upsample_nearest_2x, Tensor,
};

/// Backbone depth; stage s produces the level with index s + 1.
pub const STAGES: usize = 3;
/// Finest pyramid level index (stride 2).
pub const FINEST_LEVEL: usize = 2;

/// Feature-map stride of pyramid level `l` relative to the input image.
pub fn level_stride(l: usize) -> usize {
    1 << (l - 1)
}

/// Runtime knobs for detection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    /// Channel count shared by every feature map.
    pub channels: usize,
    /// Anchors at or above this objectness become proposals.
    pub proposal_threshold: f64,
    /// Overlap above which a lower-scored box is suppressed.
    pub nms_iou: f64,
    /// Side of the square aligned crop (and of the predicted mask).
    pub roi_size: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig { channels: 4, proposal_threshold: 0.7, nms_iou: 0.5, roi_size: 7 }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.roi_size == 0 {
            return Err(Error::Config("detector dimensions must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.proposal_threshold) {
            return Err(Error::Config(format!(
                "proposal threshold {} outside [0, 1]",
                self.proposal_threshold
            )));
        }
        if !(0.0..1.0).contains(&self.nms_iou) || self.nms_iou == 0.0 {
            return Err(Error::Config(format!(
                "nms iou {} outside (0, 1)",
                self.nms_iou
            )));
        }
        Ok(())
    }
}

/// One convolution: kernel `[C_out x C_in x k x k]` plus bias `[C_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvWeights {
    pub kernel: Tensor,
    pub bias: Tensor,
}

impl ConvWeights {
    pub fn zeros(c_out: usize, c_in: usize, k: usize) -> Self {
        ConvWeights {
            kernel: Tensor::zeros(vec![c_out, c_in, k, k]),
            bias: Tensor::zeros(vec![c_out]),
        }
    }

    fn random(c_out: usize, c_in: usize, k: usize, rng: &mut impl rand::Rng) -> Self {
        let scale = 1.0 / ((c_in * k * k) as f32).sqrt();
        ConvWeights {
            kernel: Tensor::uniform(vec![c_out, c_in, k, k], scale, rng),
            bias: Tensor::uniform(vec![c_out], scale, rng),
        }
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        conv2d(x, &self.kernel, &self.bias)
    }
}

/// Two stacked convolutions whose sum with the input forms one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualStage {
    pub conv1: ConvWeights,
    pub conv2: ConvWeights,
}

/// Every parameter of the detector.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorWeights {
    pub config: DetectorConfig,
    pub backbone: Vec<ResidualStage>,
    /// One 1x1 lateral per pyramid level, coarsest first.
    pub fpn_lateral: Vec<ConvWeights>,
    /// Objectness per cell, `[1 x C x 1 x 1]`.
    pub rpn_score: ConvWeights,
    /// Box deltas per cell, `[4 x C x 1 x 1]`.
    pub rpn_bbox: ConvWeights,
    /// Region score head, `[1 x C x 3 x 3]`.
    pub head_score: ConvWeights,
    /// Region refinement head, `[4 x C x 3 x 3]`.
    pub head_bbox: ConvWeights,
    /// Region mask head, `[1 x C x 3 x 3]`.
    pub head_mask: ConvWeights,
}

impl DetectorWeights {
    pub fn zeros(config: DetectorConfig) -> Self {
        let c = config.channels;
        DetectorWeights {
            config,
            backbone: (0..STAGES)
                .map(|_| ResidualStage {
                    conv1: ConvWeights::zeros(c, c, 3),
                    conv2: ConvWeights::zeros(c, c, 3),
                })
                .collect(),
            fpn_lateral: (0..STAGES).map(|_| ConvWeights::zeros(c, c, 1)).collect(),
            rpn_score: ConvWeights::zeros(1, c, 1),
            rpn_bbox: ConvWeights::zeros(4, c, 1),
            head_score: ConvWeights::zeros(1, c, 3),
            head_bbox: ConvWeights::zeros(4, c, 3),
            head_mask: ConvWeights::zeros(1, c, 3),
        }
    }

    pub fn random<R: rand::Rng>(config: DetectorConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        Ok(DetectorWeights {
            config,
            backbone: (0..STAGES)
                .map(|_| ResidualStage {
                    conv1: ConvWeights::random(c, c, 3, rng),
                    conv2: ConvWeights::random(c, c, 3, rng),
                })
                .collect(),
            fpn_lateral: (0..STAGES).map(|_| ConvWeights::random(c, c, 1, rng)).collect(),
            rpn_score: ConvWeights::random(1, c, 1, rng),
            rpn_bbox: ConvWeights::random(4, c, 1, rng),
            head_score: ConvWeights::random(1, c, 3, rng),
            head_bbox: ConvWeights::random(4, c, 3, rng),
            head_mask: ConvWeights::random(1, c, 3, rng),
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let c = self.config.channels;
        let check = |w: &ConvWeights, co: usize, k: usize, what: &str| -> Result<()> {
            if w.kernel.shape() != [co, c, k, k] || w.bias.shape() != [co] {
                return Err(Error::Config(format!(
                    "{what} must be [{co} x {c} x {k} x {k}] (+[{co}] bias), got {:?} and {:?}",
                    w.kernel.shape(),
                    w.bias.shape()
                )));
            }
            Ok(())
        };
        if self.backbone.len() != STAGES || self.fpn_lateral.len() != STAGES {
            return Err(Error::Config(format!(
                "expected {STAGES} backbone stages and laterals, got {} and {}",
                self.backbone.len(),
                self.fpn_lateral.len()
            )));
        }
        for (i, s) in self.backbone.iter().enumerate() {
            check(&s.conv1, c, 3, &format!("backbone stage {i} conv1"))?;
            check(&s.conv2, c, 3, &format!("backbone stage {i} conv2"))?;
        }
        for (i, l) in self.fpn_lateral.iter().enumerate() {
            check(l, c, 1, &format!("lateral {i}"))?;
        }
        check(&self.rpn_score, 1, 1, "rpn score")?;
        check(&self.rpn_bbox, 4, 1, "rpn bbox")?;
        check(&self.head_score, 1, 3, "head score")?;
        check(&self.head_bbox, 4, 3, "head bbox")?;
        check(&self.head_mask, 1, 3, "head mask")
    }
}

/// Ordered feature maps, coarsest first, each half the spatial size of the
/// next and all sharing one channel count.
#[derive(Debug, Clone, PartialEq)]
pub struct PyramidLevels {
    levels: Vec<(usize, Tensor)>,
}

impl PyramidLevels {
    pub fn new(levels: Vec<(usize, Tensor)>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::BadShape {
                op: "PyramidLevels::new",
                detail: "no levels".into(),
                shape: vec![],
            });
        }
        for (l, feat) in &levels {
            if feat.rank() != 3 {
                return Err(Error::BadShape {
                    op: "PyramidLevels::new",
                    detail: format!("level {l} is not [C x H x W]"),
                    shape: feat.shape().to_vec(),
                });
            }
        }
        let c = levels[0].1.shape()[0];
        for w in levels.windows(2) {
            let (la, a) = (&w[0].0, &w[0].1);
            let (lb, b) = (&w[1].0, &w[1].1);
            let ok = *lb + 1 == *la
                && b.shape()[0] == c
                && b.shape()[1] == 2 * a.shape()[1]
                && b.shape()[2] == 2 * a.shape()[2];
            if !ok {
                return Err(Error::ShapeMismatch {
                    op: "PyramidLevels::new",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
        }
        Ok(PyramidLevels { levels })
    }

    /// Coarsest first.
    pub fn levels(&self) -> &[(usize, Tensor)] {
        &self.levels
    }

    pub fn get(&self, level: usize) -> Option<&Tensor> {
        self.levels.iter().find(|(l, _)| *l == level).map(|(_, t)| t)
    }
}

/// Copy a single-channel image into `c` identical channels so the shared
/// channel width holds from the first stage on without extra weights.
pub fn replicate_channels(image: &Tensor, c: usize) -> Result<Tensor> {
    let (h, w) = match image.shape() {
        [h, w] => (*h, *w),
        [1, h, w] => (*h, *w),
        _ => {
            return Err(Error::BadShape {
                op: "replicate_channels",
                detail: "image must be [H x W] or [1 x H x W]".into(),
                shape: image.shape().to_vec(),
            })
        }
    };
    let mut data = Vec::with_capacity(c * h * w);
    for _ in 0..c {
        data.extend_from_slice(&image.data()[..h * w]);
    }
    Tensor::new(vec![c, h, w], data)
}

/// Three residual stages, each `conv2(conv1(x)) + x` followed by a 2x2
/// max-pool, producing levels 2..4 at 1/2, 1/4, and 1/8 scale.
pub fn toy_backbone(image: &Tensor, w: &DetectorWeights) -> Result<PyramidLevels> {
    let (h, wd) = match image.shape() {
        [1, h, wd] => (*h, *wd),
        _ => {
            return Err(Error::BadShape {
                op: "toy_backbone",
                detail: "image must be [1 x H x W]".into(),
                shape: image.shape().to_vec(),
            })
        }
    };
    let divisor = 1 << STAGES;
    if h % divisor != 0 || wd % divisor != 0 {
        return Err(Error::BadShape {
            op: "toy_backbone",
            detail: format!("spatial sides must be divisible by {divisor}"),
            shape: image.shape().to_vec(),
        });
    }
    let mut x = replicate_channels(image, w.config.channels)?;
    let mut levels = Vec::with_capacity(STAGES);
    for (i, stage) in w.backbone.iter().enumerate() {
        let f = stage.conv2.apply(&stage.conv1.apply(&x)?)?;
        let y = add(&f, &x)?;
        x = max_pool_2x(&y)?;
        levels.push((FINEST_LEVEL + i, x.clone()));
    }
    levels.reverse();
    PyramidLevels::new(levels)
}

/// Top-down merge: the coarsest level is its lateral convolution alone,
/// and every finer level adds the 2x upsample of the level above.
pub fn fpn_merge(c: &PyramidLevels, w: &DetectorWeights) -> Result<PyramidLevels> {
    if w.fpn_lateral.len() != c.levels.len() {
        return Err(Error::Config(format!(
            "{} lateral kernels for {} pyramid levels",
            w.fpn_lateral.len(),
            c.levels.len()
        )));
    }
    let mut out: Vec<(usize, Tensor)> = Vec::with_capacity(c.levels.len());
    for (i, (l, feat)) in c.levels.iter().enumerate() {
        let lateral = w.fpn_lateral[i].apply(feat)?;
        let merged = match out.last() {
            None => lateral,
            Some((_, coarser)) => add(&lateral, &upsample_nearest_2x(coarser)?)?,
        };
        out.push((*l, merged));
    }
    PyramidLevels::new(out)
}

/// One anchor with its raw region-proposal outputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RpnAnchor {
    pub level: usize,
    /// Square anchor in image pixels, side 4x the level stride.
    pub anchor: [f32; 4],
    /// Objectness in (0, 1).
    pub score: f32,
    /// (dx, dy, dw, dh) in the standard center/size parameterization.
    pub deltas: [f32; 4],
}

/// Score and regress one anchor per feature cell on every level.
pub fn rpn_forward(p: &PyramidLevels, w: &DetectorWeights) -> Result<Vec<RpnAnchor>> {
    let mut out = Vec::new();
    for (l, feat) in &p.levels {
        let stride = level_stride(*l) as f32;
        let side = 4.0 * stride;
        let scores = sigmoid_map(&w.rpn_score.apply(feat)?);
        let deltas = w.rpn_bbox.apply(feat)?;
        let (h, wd) = (feat.shape()[1], feat.shape()[2]);
        for y in 0..h {
            for x in 0..wd {
                let cx = (x as f32 + 0.5) * stride;
                let cy = (y as f32 + 0.5) * stride;
                out.push(RpnAnchor {
                    level: *l,
                    anchor: [
                        cx - side / 2.0,
                        cy - side / 2.0,
                        cx + side / 2.0,
                        cy + side / 2.0,
                    ],
                    score: scores.at3(0, y, x),
                    deltas: [
                        deltas.at3(0, y, x),
                        deltas.at3(1, y, x),
                        deltas.at3(2, y, x),
                        deltas.at3(3, y, x),
                    ],
                });
            }
        }
    }
    Ok(out)
}

/// Shift and rescale a box by regression deltas: the center moves by
/// (dx, dy) in units of the box size, the sides scale by exp(dw), exp(dh).
pub fn decode_box(anchor: [f32; 4], deltas: [f32; 4]) -> [f32; 4] {
    let w = anchor[2] - anchor[0];
    let h = anchor[3] - anchor[1];
    let cx = anchor[0] + w / 2.0 + deltas[0] * w;
    let cy = anchor[1] + h / 2.0 + deltas[1] * h;
    let nw = w * deltas[2].exp();
    let nh = h * deltas[3].exp();
    [cx - nw / 2.0, cy - nh / 2.0, cx + nw / 2.0, cy + nh / 2.0]
}

/// Clamp a box into `[0, max_x] x [0, max_y]`.
pub fn clamp_box(b: [f32; 4], max_x: f32, max_y: f32) -> [f32; 4] {
    [
        b[0].clamp(0.0, max_x),
        b[1].clamp(0.0, max_y),
        b[2].clamp(0.0, max_x),
        b[3].clamp(0.0, max_y),
    ]
}

/// Crop a box from a feature map into a fixed `S x S` grid, sampling one
/// point per output cell at the cell center with bilinear interpolation.
/// No coordinate is ever rounded.
pub fn roi_align(level: &Tensor, bbox: [f32; 4], s: usize) -> Result<Tensor> {
    if level.rank() != 3 {
        return Err(Error::BadShape {
            op: "roi_align",
            detail: "feature map must be [C x H x W]".into(),
            shape: level.shape().to_vec(),
        });
    }
    if s == 0 {
        return Err(Error::Config("roi size must be positive".into()));
    }
    let (c, h, w) = (level.shape()[0], level.shape()[1], level.shape()[2]);
    let bw = bbox[2] - bbox[0];
    let bh = bbox[3] - bbox[1];
    if bw <= 0.0 || bh <= 0.0 {
        return Err(Error::DegenerateBox { x1: bbox[0], y1: bbox[1], x2: bbox[2], y2: bbox[3] });
    }
    let mut out = Tensor::zeros(vec![c, s, s]);
    for ch in 0..c {
        let plane = Tensor::new(
            vec![h, w],
            level.data()[ch * h * w..(ch + 1) * h * w].to_vec(),
        )?;
        for i in 0..s {
            for j in 0..s {
                let x = bbox[0] + (j as f32 + 0.5) * bw / s as f32;
                let y = bbox[1] + (i as f32 + 0.5) * bh / s as f32;
                out.data_mut()[(ch * s + i) * s + j] = bilinear_sample(&plane, x, y)?;
            }
        }
    }
    Ok(out)
}

/// Raw per-region head outputs before any box arithmetic.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiHead {
    /// Sigmoid of the spatially pooled score map.
    pub score: f32,
    /// Spatially pooled refinement deltas.
    pub deltas: [f32; 4],
    /// Mask probabilities binarized at strictly greater than 0.5.
    pub mask: Vec<bool>,
    pub mask_size: usize,
}

fn spatial_mean(map: &Tensor) -> Vec<f32> {
    let (c, h, w) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    (0..c)
        .map(|ch| {
            let sum: f32 = map.data()[ch * h * w..(ch + 1) * h * w].iter().sum();
            sum / (h * w) as f32
        })
        .collect()
}

/// Run the three per-region heads on one aligned crop.
pub fn head_forward(roi: &Tensor, w: &DetectorWeights) -> Result<RoiHead> {
    let s = roi.shape()[1];
    let score = sigmoid(spatial_mean(&w.head_score.apply(roi)?)[0]);
    let d = spatial_mean(&w.head_bbox.apply(roi)?);
    let mask_probs = sigmoid_map(&w.head_mask.apply(roi)?);
    let mask = mask_probs.data().iter().map(|&p| p > 0.5).collect();
    Ok(RoiHead { score, deltas: [d[0], d[1], d[2], d[3]], mask, mask_size: s })
}

/// Final per-region output in image coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub score: f32,
    /// (x1, y1, x2, y2) in image pixels, clamped, x1 < x2 and y1 < y2.
    pub bbox: [f32; 4],
    /// Square mask aligned to the box, row-major.
    pub mask: Vec<bool>,
    pub mask_size: usize,
}

impl Detection {
    pub fn bbox_f64(&self) -> [f64; 4] {
        [self.bbox[0] as f64, self.bbox[1] as f64, self.bbox[2] as f64, self.bbox[3] as f64]
    }

    /// Paste the box-aligned mask onto the full pixel grid. A pixel is set
    /// only if its center falls inside the box and the covering mask cell
    /// is set, so no set pixel escapes the box footprint.
    pub fn mask_on_image(&self, img_h: usize, img_w: usize) -> BitMask {
        let [x1, y1, x2, y2] = self.bbox;
        let (bw, bh) = (x2 - x1, y2 - y1);
        let s = self.mask_size;
        let mut bits = vec![false; img_h * img_w];
        for y in 0..img_h {
            for x in 0..img_w {
                let (cx, cy) = (x as f32 + 0.5, y as f32 + 0.5);
                if cx <= x1 || cx >= x2 || cy <= y1 || cy >= y2 {
                    continue;
                }
                let mx = (((cx - x1) / bw * s as f32) as usize).min(s - 1);
                let my = (((cy - y1) / bh * s as f32) as usize).min(s - 1);
                bits[y * img_w + x] = self.mask[my * s + mx];
            }
        }
        BitMask::new(img_h, img_w, bits).expect("bit count matches grid")
    }
}

/// Refine one proposal with the head outputs and clamp into the image.
/// A box that collapses under refinement is reported as degenerate.
pub fn detect_heads(
    roi: &Tensor,
    w: &DetectorWeights,
    proposal: [f32; 4],
    img_w: usize,
    img_h: usize,
) -> Result<Detection> {
    let head = head_forward(roi, w)?;
    let refined = clamp_box(decode_box(proposal, head.deltas), img_w as f32, img_h as f32);
    if refined[2] - refined[0] < 1.0 || refined[3] - refined[1] < 1.0 {
        return Err(Error::DegenerateBox {
            x1: refined[0],
            y1: refined[1],
            x2: refined[2],
            y2: refined[3],
        });
    }
    Ok(Detection { score: head.score, bbox: refined, mask: head.mask, mask_size: head.mask_size })
}

fn iou_f32(a: [f32; 4], b: [f32; 4]) -> f64 {
    crate::metrics::box_iou(
        [a[0] as f64, a[1] as f64, a[2] as f64, a[3] as f64],
        [b[0] as f64, b[1] as f64, b[2] as f64, b[3] as f64],
    )
}

/// Greedy suppression: keep in descending score order (equal scores keep
/// the lower (y1, x1) first) and drop anything overlapping a kept box at
/// or above the threshold.
pub fn nms(detections: Vec<Detection>, iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        detections[b]
            .score
            .total_cmp(&detections[a].score)
            .then(detections[a].bbox[1].total_cmp(&detections[b].bbox[1]))
            .then(detections[a].bbox[0].total_cmp(&detections[b].bbox[0]))
    });
    let mut kept: Vec<Detection> = Vec::new();
    for idx in order {
        let cand = &detections[idx];
        if kept.iter().all(|k| iou_f32(k.bbox, cand.bbox) < iou_threshold) {
            kept.push(cand.clone());
        }
    }
    kept
}

/// The whole detector: backbone, merge, proposals, aligned crops, heads,
/// suppression. Output is ordered top-to-bottom then left-to-right.
pub fn segment_image(image: &Tensor, w: &DetectorWeights) -> Result<Vec<Detection>> {
    w.validate()?;
    let cfg = &w.config;
    let pyramid = fpn_merge(&toy_backbone(image, w)?, w)?;
    let (img_h, img_w) = (image.shape()[1], image.shape()[2]);
    let mut detections = Vec::new();
    for a in rpn_forward(&pyramid, w)? {
        if (a.score as f64) < cfg.proposal_threshold {
            continue;
        }
        let proposal = clamp_box(decode_box(a.anchor, a.deltas), img_w as f32, img_h as f32);
        let stride = level_stride(a.level) as f32;
        let feat = pyramid.get(a.level).expect("proposal level exists");
        let fbox = clamp_box(
            [
                proposal[0] / stride,
                proposal[1] / stride,
                proposal[2] / stride,
                proposal[3] / stride,
            ],
            (feat.shape()[2] - 1) as f32,
            (feat.shape()[1] - 1) as f32,
        );
        let roi = match roi_align(feat, fbox, cfg.roi_size) {
            Ok(roi) => roi,
            Err(Error::DegenerateBox { .. }) => continue,
            Err(e) => return Err(e),
        };
        match detect_heads(&roi, w, proposal, img_w, img_h) {
            Ok(d) => detections.push(d),
            Err(Error::DegenerateBox { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    let mut kept = nms(detections, cfg.nms_iou);
    kept.sort_by(|a, b| {
        a.bbox[1]
            .total_cmp(&b.bbox[1])
            .then(a.bbox[0].total_cmp(&b.bbox[0]))
            .then(b.score.total_cmp(&a.score))
    });
    Ok(kept)
}
