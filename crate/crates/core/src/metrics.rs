//! Evaluation metrics: box and mask overlap, average precision over a
//! sweep of overlap thresholds, and character error rate.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::matcher::levenshtein;

/// Overlap thresholds for the AP sweep, 0.50 through 0.95 in steps of 0.05.
pub const IOU_THRESHOLDS: [f64; 10] =
    [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];

/// Pixel-area bounds (in box area units) for the medium bucket; large is
/// everything above the upper bound, and smaller objects fall in neither.
pub const AREA_MEDIUM: (f64, f64) = (32.0 * 32.0, 96.0 * 96.0);

/// Row-major boolean pixel mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BitMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::BadShape {
                op: "BitMask::new",
                detail: format!("{} bits for {height} x {width}", bits.len()),
                shape: vec![height, width],
            });
        }
        Ok(BitMask { height, width, bits })
    }

    /// Mask covering the integer pixels inside `[x1, x2) x [y1, y2)`,
    /// clipped to the grid.
    pub fn from_box(height: usize, width: usize, bbox: [f64; 4]) -> Self {
        let mut bits = vec![false; height * width];
        for y in 0..height {
            for x in 0..width {
                let (xf, yf) = (x as f64, y as f64);
                if xf >= bbox[0] && xf < bbox[2] && yf >= bbox[1] && yf < bbox[3] {
                    bits[y * width + x] = true;
                }
            }
        }
        BitMask { height, width, bits }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// Area of an `[x1, y1, x2, y2]` box; inverted boxes count as zero.
pub fn box_area(b: [f64; 4]) -> f64 {
    (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0)
}

/// Intersection over union of two boxes; zero when the union is empty.
pub fn box_iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = box_area(a) + box_area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Intersection over union of two same-sized masks; zero when both are
/// empty, so an empty mask never matches anything.
pub fn mask_iou(a: &BitMask, b: &BitMask) -> Result<f64> {
    if a.height != b.height || a.width != b.width {
        return Err(Error::ShapeMismatch {
            op: "mask_iou",
            lhs: vec![a.height, a.width],
            rhs: vec![b.height, b.width],
        });
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    if union == 0 {
        Ok(0.0)
    } else {
        Ok(inter as f64 / union as f64)
    }
}

/// One annotated object.
#[derive(Debug, Clone)]
pub struct GtInstance {
    pub bbox: [f64; 4],
    pub mask: Option<BitMask>,
}

/// One scored prediction.
#[derive(Debug, Clone)]
pub struct DetInstance {
    pub score: f64,
    pub bbox: [f64; 4],
    pub mask: Option<BitMask>,
}

/// Ground truth and predictions for a single image.
#[derive(Debug, Clone, Default)]
pub struct ImageEval {
    pub gts: Vec<GtInstance>,
    pub dets: Vec<DetInstance>,
}

/// Which overlap measure drives matching.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IouKind {
    Box,
    Mask,
}

fn pair_iou(det: &DetInstance, gt: &GtInstance, kind: IouKind) -> f64 {
    match kind {
        IouKind::Box => box_iou(det.bbox, gt.bbox),
        // A side without a mask cannot match under the mask measure.
        IouKind::Mask => match (&det.mask, &gt.mask) {
            (Some(d), Some(g)) => mask_iou(d, g).unwrap_or(0.0),
            _ => 0.0,
        },
    }
}

/// Average precision at one overlap threshold, on a 0..=100 scale.
///
/// Detections are ranked by score across all images (ties by image then
/// detection index), each greedily claims the unmatched ground truth with
/// the highest overlap at or above the threshold (ties to the lowest
/// index), and the precision/recall curve is integrated with the
/// all-point interpolation. With no ground truth at all, an empty
/// prediction set scores 100 and any prediction scores 0.
pub fn average_precision(images: &[ImageEval], threshold: f64, kind: IouKind) -> f64 {
    let total_gt: usize = images.iter().map(|im| im.gts.len()).sum();
    let mut order: Vec<(usize, usize)> = images
        .iter()
        .enumerate()
        .flat_map(|(i, im)| (0..im.dets.len()).map(move |d| (i, d)))
        .collect();
    order.sort_by(|&(ia, da), &(ib, db)| {
        images[ib].dets[db]
            .score
            .total_cmp(&images[ia].dets[da].score)
            .then(ia.cmp(&ib))
            .then(da.cmp(&db))
    });
    if total_gt == 0 {
        return if order.is_empty() { 100.0 } else { 0.0 };
    }
    if order.is_empty() {
        return 0.0;
    }

    let mut claimed: Vec<Vec<bool>> = images.iter().map(|im| vec![false; im.gts.len()]).collect();
    let mut tps = Vec::with_capacity(order.len());
    let mut tp = 0usize;
    for &(i, d) in &order {
        let det = &images[i].dets[d];
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in images[i].gts.iter().enumerate() {
            if claimed[i][g] {
                continue;
            }
            let iou = pair_iou(det, gt, kind);
            if iou >= threshold && best.map_or(true, |(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        if let Some((g, _)) = best {
            claimed[i][g] = true;
            tp += 1;
        }
        tps.push(tp);
    }

    // Integrate the running-max precision envelope over recall. Recall
    // steps stay in whole true-positive units until one final division,
    // so a perfect prediction set scores exactly 100.
    let mut weighted = 0.0;
    let mut max_p = 0.0f64;
    for i in (0..tps.len()).rev() {
        let step = tps[i] - if i == 0 { 0 } else { tps[i - 1] };
        max_p = max_p.max(tps[i] as f64 / (i + 1) as f64);
        weighted += step as f64 * max_p;
    }
    weighted / total_gt as f64 * 100.0
}

/// Aggregate AP figures, each on a 0..=100 scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ApSummary {
    /// Mean over the ten overlap thresholds.
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    /// Medium objects only; `None` when no ground truth falls in the bucket.
    pub ap_m: Option<f64>,
    /// Large objects only; `None` when no ground truth falls in the bucket.
    pub ap_l: Option<f64>,
}

fn filter_by_area(images: &[ImageEval], keep: impl Fn(f64) -> bool) -> Vec<ImageEval> {
    images
        .iter()
        .map(|im| ImageEval {
            gts: im.gts.iter().filter(|g| keep(box_area(g.bbox))).cloned().collect(),
            dets: im.dets.iter().filter(|d| keep(box_area(d.bbox))).cloned().collect(),
        })
        .collect()
}

fn mean_ap(images: &[ImageEval], kind: IouKind) -> f64 {
    let sum: f64 = IOU_THRESHOLDS
        .iter()
        .map(|&t| average_precision(images, t, kind))
        .sum();
    sum / IOU_THRESHOLDS.len() as f64
}

/// The full sweep: mean AP, the 0.50 and 0.75 points, and the per-size
/// buckets. Size buckets filter predictions and ground truth by box area
/// so a perfect prediction set scores 100 in every populated bucket.
pub fn ap_suite(images: &[ImageEval], kind: IouKind) -> ApSummary {
    let per: Vec<f64> = IOU_THRESHOLDS
        .iter()
        .map(|&t| average_precision(images, t, kind))
        .collect();
    let ap = per.iter().sum::<f64>() / per.len() as f64;

    let medium = filter_by_area(images, |a| (AREA_MEDIUM.0..=AREA_MEDIUM.1).contains(&a));
    let large = filter_by_area(images, |a| a > AREA_MEDIUM.1);
    let has_gt = |ims: &[ImageEval]| ims.iter().any(|im| !im.gts.is_empty());

    ApSummary {
        ap,
        ap50: per[0],
        ap75: per[5],
        ap_m: has_gt(&medium).then(|| mean_ap(&medium, kind)),
        ap_l: has_gt(&large).then(|| mean_ap(&large, kind)),
    }
}

/// Character error rate: edit distance over reference length.
pub fn cer(reference: &str, hypothesis: &str) -> Result<f64> {
    let ref_chars = reference.chars().count();
    if ref_chars == 0 {
        return Err(Error::EmptyReference { index: 0 });
    }
    Ok(levenshtein(reference, hypothesis) as f64 / ref_chars as f64)
}

/// Corpus totals behind a micro-averaged character error rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CorpusCer {
    pub pairs: usize,
    pub ref_chars: usize,
    pub edits: usize,
}

impl CorpusCer {
    /// Total edits over total reference characters, not a mean of per-pair
    /// rates.
    pub fn value(&self) -> f64 {
        self.edits as f64 / self.ref_chars as f64
    }
}

/// Micro-averaged character error rate over (reference, hypothesis) pairs.
pub fn corpus_cer<'a>(
    pairs: impl IntoIterator<Item = (&'a str, &'a str)>,
) -> Result<CorpusCer> {
    let mut out = CorpusCer { pairs: 0, ref_chars: 0, edits: 0 };
    for (i, (reference, hypothesis)) in pairs.into_iter().enumerate() {
        let rc = reference.chars().count();
        if rc == 0 {
            return Err(Error::EmptyReference { index: i });
        }
        out.pairs += 1;
        out.ref_chars += rc;
        out.edits += levenshtein(reference, hypothesis);
    }
    if out.pairs == 0 {
        return Err(Error::Config("corpus_cer needs at least one pair".into()));
    }
    Ok(out)
}

/// Error-rate totals before and after a correction step, over one shared
/// set of references.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CerComparison {
    pub pairs: usize,
    pub ref_chars: usize,
    pub edits_before: usize,
    pub edits_after: usize,
}

impl CerComparison {
    pub fn cer_before(&self) -> f64 {
        self.edits_before as f64 / self.ref_chars as f64
    }

    pub fn cer_after(&self) -> f64 {
        self.edits_after as f64 / self.ref_chars as f64
    }

    /// Positive when the correction step helped. Always recomputed from
    /// the two rates so the three published figures stay consistent.
    pub fn improvement(&self) -> f64 {
        self.cer_before() - self.cer_after()
    }
}

/// Join two corpora that must share references pair for pair.
pub fn compare_corpora(
    before: &[(String, String)],
    after: &[(String, String)],
) -> Result<CerComparison> {
    if before.len() != after.len() {
        return Err(Error::Config(format!(
            "corpus size mismatch: {} before vs {} after",
            before.len(),
            after.len()
        )));
    }
    if before.is_empty() {
        return Err(Error::Config("compare_corpora needs at least one pair".into()));
    }
    let mut out = CerComparison { pairs: 0, ref_chars: 0, edits_before: 0, edits_after: 0 };
    for (i, ((rb, hb), (ra, ha))) in before.iter().zip(after).enumerate() {
        if rb != ra {
            return Err(Error::MisalignedReferences {
                index: i,
                before: rb.clone(),
                after: ra.clone(),
            });
        }
        let rc = rb.chars().count();
        if rc == 0 {
            return Err(Error::EmptyReference { index: i });
        }
        out.pairs += 1;
        out.ref_chars += rc;
        out.edits_before += levenshtein(rb, hb);
        out.edits_after += levenshtein(ra, ha);
    }
    Ok(out)
}

/// Stable ordering helper for reports: score descending, then position.
pub fn sort_detections_for_report(dets: &mut [DetInstance]) {
    dets.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.bbox[1].total_cmp(&b.bbox[1]))
            .then(a.bbox[0].total_cmp(&b.bbox[0]))
            .then(Ordering::Equal)
    });
}
