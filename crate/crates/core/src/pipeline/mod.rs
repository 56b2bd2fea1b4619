//! End-to-end composition: load weights and lexicon, walk a directory of
//! annotated pages, segment, recognize, match, and score.
//!
//! Reports are rendered as key-sorted JSON with fixed number formatting
//! (error rates to 4 decimals, AP to 3), so two runs over the same inputs
//! produce identical bytes no matter how many worker threads they use.

pub mod fixtures;
pub mod pgm;
pub mod weights;

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::{segment_image, DetectorConfig, DetectorWeights};
use crate::error::{Error, Result};
use crate::matcher::{decide, Lexicon, MatchStage, Thresholds};
use crate::metrics::{
    ap_suite, compare_corpora, ApSummary, BitMask, CerComparison, DetInstance, GtInstance,
    ImageEval, IouKind,
};
use crate::recognizer::{recognize, RecognizerConfig, RecognizerWeights};
use crate::tensor::Tensor;

/// Everything a run needs. Serializes with sorted keys through
/// `serde_json::Value`; `parallelism` is deliberately never serialized so
/// the thread count cannot leak into report bytes.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub weights: String,
    pub lexicon: String,
    pub input_dir: String,
    pub report_out: Option<String>,
    /// Acceptance bar for the edit-distance stage, 0..=100.
    pub t_l: f64,
    /// Acceptance bar for the fuzzy fallback stage, 0..=100.
    pub t_f: f64,
    pub detector: DetectorConfig,
    pub recognizer: RecognizerConfig,
    /// Echoed for provenance; the run itself draws no random numbers.
    pub seed: u64,
    #[serde(skip_serializing)]
    pub parallelism: usize,
    /// Feed annotated boxes and printed transcripts straight to the
    /// matcher, bypassing the detector and recognizer.
    pub oracle_regions: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            weights: String::new(),
            lexicon: String::new(),
            input_dir: String::new(),
            report_out: None,
            t_l: 70.0,
            t_f: 80.0,
            detector: DetectorConfig::default(),
            recognizer: RecognizerConfig::default(),
            seed: 0,
            parallelism: 1,
            oracle_regions: false,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.thresholds().validate()?;
        if self.parallelism == 0 {
            return Err(Error::Config("parallelism must be at least 1".into()));
        }
        if self.lexicon.is_empty() {
            return Err(Error::Config("lexicon path is required".into()));
        }
        if self.input_dir.is_empty() {
            return Err(Error::Config("input directory is required".into()));
        }
        if self.weights.is_empty() && !self.oracle_regions {
            return Err(Error::Config("weights path is required unless oracle_regions".into()));
        }
        self.detector.validate()?;
        self.recognizer.validate()
    }

    pub fn thresholds(&self) -> Thresholds {
        Thresholds { t_l: self.t_l, t_f: self.t_f }
    }
}

pub fn parse_config(text: &str) -> Result<PipelineConfig> {
    serde_json::from_str(text).map_err(|e| Error::Config(format!("bad config JSON: {e}")))
}

pub fn load_config(path: impl AsRef<Path>) -> Result<PipelineConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: bad config JSON: {e}", path.display())))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MatchCounts {
    pub levenshtein: usize,
    pub fuzzy: usize,
    pub rejected: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageError {
    pub image: String,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub config: PipelineConfig,
    /// Images scored without error.
    pub images: usize,
    /// Annotated regions across scored images.
    pub regions: usize,
    /// `None` when no region pair was scored.
    pub cer: Option<CerComparison>,
    /// `None` when every image failed.
    pub ap_bbox: Option<ApSummary>,
    pub ap_segm: Option<ApSummary>,
    pub matches: MatchCounts,
    pub errors: Vec<ImageError>,
}

/// One region handed to the matcher: where it is, its pixels, and the
/// text read off it.
struct Region {
    score: f64,
    bbox: [f64; 4],
    mask: BitMask,
    text: String,
}

struct ImageResult {
    name: String,
    pairs_before: Vec<(String, String)>,
    pairs_after: Vec<(String, String)>,
    eval: ImageEval,
    counts: MatchCounts,
    regions: usize,
    error: Option<String>,
}

impl ImageResult {
    fn failed(name: String, message: String) -> Self {
        ImageResult {
            name,
            pairs_before: Vec::new(),
            pairs_after: Vec::new(),
            eval: ImageEval::default(),
            counts: MatchCounts::default(),
            regions: 0,
            error: Some(message),
        }
    }
}

/// Pixel-rectangle crop covering the box, clamped to the image.
fn crop_region(img: &Tensor, bbox: [f32; 4]) -> Result<Tensor> {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let x1 = bbox[0].floor().max(0.0) as usize;
    let y1 = bbox[1].floor().max(0.0) as usize;
    let x2 = (bbox[2].ceil().max(0.0) as usize).min(w);
    let y2 = (bbox[3].ceil().max(0.0) as usize).min(h);
    if x2 <= x1 || y2 <= y1 {
        return Err(Error::DegenerateBox {
            x1: bbox[0],
            y1: bbox[1],
            x2: bbox[2],
            y2: bbox[3],
        });
    }
    let mut data = Vec::with_capacity((y2 - y1) * (x2 - x1));
    for y in y1..y2 {
        data.extend_from_slice(&img.data()[y * w + x1..y * w + x2]);
    }
    Tensor::new(vec![y2 - y1, x2 - x1], data)
}

struct LoadedAnnotation {
    bbox: [f64; 4],
    mask: BitMask,
    transcript: String,
    printed: String,
}

fn load_image_annotations(img: &Tensor, sidecar: &Path) -> Result<Vec<LoadedAnnotation>> {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let ann = fixtures::load_annotations(sidecar)?;
    let mut out = Vec::with_capacity(ann.boxes.len());
    for i in 0..ann.boxes.len() {
        let [x1, y1, x2, y2] = ann.boxes[i];
        if !(x1 >= 0.0 && y1 >= 0.0 && x1 < x2 && y1 < y2 && x2 <= w as f64 && y2 <= h as f64) {
            return Err(Error::Config(format!(
                "{}: box {i} [{x1}, {y1}, {x2}, {y2}] not inside the {w}x{h} image",
                sidecar.display()
            )));
        }
        let mask = ann.masks[i].to_mask()?;
        if mask.height() != h || mask.width() != w {
            return Err(Error::Config(format!(
                "{}: mask {i} is {}x{}, image is {w}x{h}",
                sidecar.display(),
                mask.width(),
                mask.height()
            )));
        }
        out.push(LoadedAnnotation {
            bbox: ann.boxes[i],
            mask,
            transcript: ann.transcripts[i].clone(),
            printed: ann.corrupted[i].clone(),
        });
    }
    // top-to-bottom, then left-to-right, to pair with detector output order
    out.sort_by(|a, b| {
        a.bbox[1].total_cmp(&b.bbox[1]).then(a.bbox[0].total_cmp(&b.bbox[0]))
    });
    Ok(out)
}

fn extract_regions(
    img: &Tensor,
    anns: &[LoadedAnnotation],
    weights: Option<&(DetectorWeights, RecognizerWeights)>,
) -> Result<Vec<Region>> {
    match weights {
        // oracle path: the annotation is the detection and the printed
        // text stands in for a perfect read of the page
        None => Ok(anns
            .iter()
            .map(|a| Region {
                score: 1.0,
                bbox: a.bbox,
                mask: a.mask.clone(),
                text: a.printed.clone(),
            })
            .collect()),
        Some((det_w, rec_w)) => {
            let (h, w) = (img.shape()[0], img.shape()[1]);
            let stacked = Tensor::new(vec![1, h, w], img.data().to_vec())?;
            let mut regions = Vec::new();
            for d in segment_image(&stacked, det_w)? {
                let crop = crop_region(img, d.bbox)?;
                let text = recognize(&crop, rec_w)?;
                regions.push(Region {
                    score: d.score as f64,
                    bbox: d.bbox_f64(),
                    mask: d.mask_on_image(h, w),
                    text,
                });
            }
            Ok(regions)
        }
    }
}

fn try_process(
    cfg: &PipelineConfig,
    lex: &Lexicon,
    weights: Option<&(DetectorWeights, RecognizerWeights)>,
    path: &Path,
    name: &str,
) -> Result<ImageResult> {
    let img = pgm::load_pgm(path)?;
    let anns = load_image_annotations(&img, &path.with_extension("json"))?;
    let regions = extract_regions(&img, &anns, weights)?;

    let mut counts = MatchCounts::default();
    let mut pairs_before = Vec::with_capacity(anns.len());
    let mut pairs_after = Vec::with_capacity(anns.len());
    for (i, ann) in anns.iter().enumerate() {
        // index-wise pairing after the shared position sort; a region the
        // detector missed reads as an empty hypothesis and never reaches
        // the matcher
        let (before, after) = match regions.get(i) {
            Some(region) => {
                let decision = decide(lex, &region.text, cfg.thresholds());
                match decision.stage {
                    Some(MatchStage::Levenshtein) => counts.levenshtein += 1,
                    Some(MatchStage::Fuzzy) => counts.fuzzy += 1,
                    None => counts.rejected += 1,
                }
                let accepted =
                    if decision.stage.is_some() { decision.outcome } else { String::new() };
                (region.text.clone(), accepted)
            }
            None => (String::new(), String::new()),
        };
        pairs_before.push((ann.transcript.clone(), before));
        pairs_after.push((ann.transcript.clone(), after));
    }

    let eval = ImageEval {
        gts: anns
            .iter()
            .map(|a| GtInstance { bbox: a.bbox, mask: Some(a.mask.clone()) })
            .collect(),
        dets: regions
            .iter()
            .map(|r| DetInstance { score: r.score, bbox: r.bbox, mask: Some(r.mask.clone()) })
            .collect(),
    };
    Ok(ImageResult {
        name: name.to_string(),
        pairs_before,
        pairs_after,
        eval,
        counts,
        regions: anns.len(),
        error: None,
    })
}

/// Sorted page images under the input directory.
fn list_inputs(dir: &str) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir.to_string(), e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "pgm"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Config(format!("no .pgm inputs under {dir}")));
    }
    Ok(paths)
}

pub fn run_pipeline(cfg: &PipelineConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let lex = Lexicon::load(&cfg.lexicon)?;
    let weights = if cfg.oracle_regions {
        None
    } else {
        let tensors = weights::load_tensors(&cfg.weights)?;
        Some(weights::unpack_weights(tensors, cfg.detector, cfg.recognizer)?)
    };
    let paths = list_inputs(&cfg.input_dir)?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.parallelism)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    // ordered collect keeps results in input order whatever the pool does
    let results: Vec<ImageResult> = pool.install(|| {
        paths
            .par_iter()
            .map(|path| {
                let name = path
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_else(|| path.display().to_string());
                try_process(cfg, &lex, weights.as_ref(), path, &name)
                    .unwrap_or_else(|e| ImageResult::failed(name, e.to_string()))
            })
            .collect()
    });

    let mut pairs_before = Vec::new();
    let mut pairs_after = Vec::new();
    let mut evals = Vec::new();
    let mut matches = MatchCounts::default();
    let mut errors = Vec::new();
    let mut images = 0;
    let mut regions = 0;
    for r in results {
        match r.error {
            Some(message) => errors.push(ImageError { image: r.name, message }),
            None => {
                images += 1;
                regions += r.regions;
                pairs_before.extend(r.pairs_before);
                pairs_after.extend(r.pairs_after);
                evals.push(r.eval);
                matches.levenshtein += r.counts.levenshtein;
                matches.fuzzy += r.counts.fuzzy;
                matches.rejected += r.counts.rejected;
            }
        }
    }

    let cer = if pairs_before.is_empty() {
        None
    } else {
        Some(compare_corpora(&pairs_before, &pairs_after)?)
    };
    let (ap_bbox, ap_segm) = if evals.is_empty() {
        (None, None)
    } else {
        (Some(ap_suite(&evals, IouKind::Box)), Some(ap_suite(&evals, IouKind::Mask)))
    };
    Ok(EvalReport {
        config: cfg.clone(),
        images,
        regions,
        cer,
        ap_bbox,
        ap_segm,
        matches,
        errors,
    })
}

fn fmt_rate(x: f64) -> String {
    format!("{x:.4}")
}

fn fmt_ap(x: f64) -> String {
    format!("{x:.3}")
}

fn json_str(s: &str) -> String {
    serde_json::to_string(s).expect("strings always serialize")
}

/// `{"ap":51.251,"ap50":77.227,...}`, AP to 3 decimals, empty buckets null.
pub fn render_ap_summary(s: &ApSummary) -> String {
    let opt = |v: Option<f64>| v.map(fmt_ap).unwrap_or_else(|| "null".into());
    format!(
        "{{\"ap\":{},\"ap50\":{},\"ap75\":{},\"ap_l\":{},\"ap_m\":{}}}",
        fmt_ap(s.ap),
        fmt_ap(s.ap50),
        fmt_ap(s.ap75),
        opt(s.ap_l),
        opt(s.ap_m)
    )
}

/// One error-rate table row; rates to 4 decimals, improvement recomputed
/// from the raw edit counts rather than copied from anywhere.
pub fn render_cer_section(c: &CerComparison) -> String {
    format!(
        "{{\"overall\":{{\"after\":{},\"before\":{},\"edits_after\":{},\"edits_before\":{},\
         \"improvement\":{},\"pairs\":{},\"ref_chars\":{}}}}}",
        fmt_rate(c.cer_after()),
        fmt_rate(c.cer_before()),
        c.edits_after,
        c.edits_before,
        fmt_rate(c.improvement()),
        c.pairs,
        c.ref_chars
    )
}

/// The whole report as compact JSON with keys in sorted order at every
/// level. The config echo routes through `serde_json::Value`, whose map
/// keeps keys sorted.
pub fn render_report(r: &EvalReport) -> Result<String> {
    let config = serde_json::to_value(&r.config)
        .and_then(|v| serde_json::to_string(&v))
        .map_err(|e| Error::Config(format!("config echo failed: {e}")))?;
    let opt_ap = |s: &Option<ApSummary>| {
        s.as_ref().map(|s| render_ap_summary(s)).unwrap_or_else(|| "null".into())
    };
    let errors = r
        .errors
        .iter()
        .map(|e| {
            format!("{{\"image\":{},\"message\":{}}}", json_str(&e.image), json_str(&e.message))
        })
        .collect::<Vec<_>>()
        .join(",");
    Ok(format!(
        "{{\"ap_bbox\":{},\"ap_segm\":{},\"cer\":{},\"config\":{},\"errors\":[{}],\
         \"images\":{},\"matches\":{{\"fuzzy\":{},\"levenshtein\":{},\"rejected\":{}}},\
         \"regions\":{},\"seed\":{}}}",
        opt_ap(&r.ap_bbox),
        opt_ap(&r.ap_segm),
        r.cer.as_ref().map(render_cer_section).unwrap_or_else(|| "null".into()),
        config,
        errors,
        r.images,
        r.matches.fuzzy,
        r.matches.levenshtein,
        r.matches.rejected,
        r.regions,
        r.config.seed
    ))
}

pub fn emit_report(report: &EvalReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = render_report(report)?;
    fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}
