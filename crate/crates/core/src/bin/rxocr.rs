use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rxocr_core::detector::{segment_image, DetectorConfig, DetectorWeights};
use rxocr_core::matcher::{decide, Lexicon, MatchStage, Thresholds};
use rxocr_core::metrics::corpus_cer;
use rxocr_core::pipeline::fixtures::{gen_fixtures, write_fixtures, CorruptionMode};
use rxocr_core::pipeline::weights::{load_tensors, pack_weights, save_tensors, unpack_weights};
use rxocr_core::pipeline::{
    emit_report, load_config, render_cer_section, render_report, run_pipeline, PipelineConfig,
};
use rxocr_core::recognizer::{recognize, RecognizerConfig, RecognizerWeights};
use rxocr_core::tensor::Tensor;
use rxocr_core::{Error, Result};

#[derive(Parser)]
#[command(name = "rxocr", version, about = "Find, read, and match medicine names on page images")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render synthetic annotated pages from a lexicon
    GenFixtures(GenFixturesCmd),
    /// Write a seeded random weight file
    InitWeights(InitWeightsCmd),
    /// Detect name regions on one image
    Segment(SegmentCmd),
    /// Read the text off one image crop
    Recognize(RecognizeCmd),
    /// Match one query string against a lexicon
    Match(MatchCmd),
    /// Score line-paired hypothesis files against references
    Eval(EvalCmd),
    /// Full run over an annotated directory, emitting a JSON report
    Pipeline(PipelineCmd),
}

#[derive(Args)]
struct DetectorArgs {
    /// Feature channels shared by every pyramid level
    #[arg(long, default_value_t = DetectorConfig::default().channels)]
    channels: usize,
    /// Objectness needed for an anchor to become a proposal
    #[arg(long, default_value_t = DetectorConfig::default().proposal_threshold)]
    proposal_threshold: f64,
    /// Overlap above which a lower-scored box is suppressed
    #[arg(long, default_value_t = DetectorConfig::default().nms_iou)]
    nms_iou: f64,
    /// Side of the square aligned crop and mask
    #[arg(long, default_value_t = DetectorConfig::default().roi_size)]
    roi_size: usize,
}

impl DetectorArgs {
    fn config(&self) -> DetectorConfig {
        DetectorConfig {
            channels: self.channels,
            proposal_threshold: self.proposal_threshold,
            nms_iou: self.nms_iou,
            roi_size: self.roi_size,
        }
    }
}

#[derive(Args)]
struct RecognizerArgs {
    /// Square patch side in pixels
    #[arg(long, default_value_t = RecognizerConfig::default().patch)]
    patch: usize,
    /// Embedding width
    #[arg(long, default_value_t = RecognizerConfig::default().dim)]
    dim: usize,
    /// Attention heads per layer
    #[arg(long, default_value_t = RecognizerConfig::default().heads)]
    heads: usize,
    /// Encoder depth (the decoder matches it)
    #[arg(long, default_value_t = RecognizerConfig::default().layers)]
    layers: usize,
    /// Output positions decoded per region
    #[arg(long, default_value_t = RecognizerConfig::default().max_len)]
    max_len: usize,
    /// Positional table rows, the patch-count ceiling
    #[arg(long, default_value_t = RecognizerConfig::default().max_patches)]
    max_patches: usize,
}

impl RecognizerArgs {
    fn config(&self) -> RecognizerConfig {
        RecognizerConfig {
            patch: self.patch,
            dim: self.dim,
            heads: self.heads,
            layers: self.layers,
            max_len: self.max_len,
            max_patches: self.max_patches,
        }
    }
}

#[derive(Args)]
struct GenFixturesCmd {
    #[arg(long)]
    seed: u64,
    /// Pages to render
    #[arg(long, default_value_t = 16)]
    count: usize,
    #[arg(long)]
    lexicon: PathBuf,
    /// Output directory for PGM pages and JSON sidecars
    #[arg(long)]
    out: PathBuf,
    /// Per-character substitution probability for the printed text
    #[arg(long, default_value_t = 0.0, conflicts_with = "single_edit")]
    p_noise: f64,
    /// Corrupt exactly one character per transcript instead
    #[arg(long)]
    single_edit: bool,
}

#[derive(Args)]
struct InitWeightsCmd {
    #[arg(long)]
    seed: u64,
    /// Weight file to create
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    detector: DetectorArgs,
    #[command(flatten)]
    recognizer: RecognizerArgs,
}

#[derive(Args)]
struct SegmentCmd {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    #[command(flatten)]
    detector: DetectorArgs,
    #[command(flatten)]
    recognizer: RecognizerArgs,
}

#[derive(Args)]
struct RecognizeCmd {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    #[command(flatten)]
    detector: DetectorArgs,
    #[command(flatten)]
    recognizer: RecognizerArgs,
}

#[derive(Args)]
struct MatchCmd {
    #[arg(long)]
    query: String,
    #[arg(long)]
    lexicon: PathBuf,
    /// Edit-distance stage acceptance bar, 0..=100
    #[arg(long, default_value_t = 70.0)]
    t_l: f64,
    /// Fuzzy fallback acceptance bar, 0..=100
    #[arg(long, default_value_t = 80.0)]
    t_f: f64,
}

#[derive(Args)]
struct EvalCmd {
    /// Reference transcripts, one per line
    #[arg(long)]
    refs: PathBuf,
    /// Hypotheses, line-paired with the references
    #[arg(long)]
    hyps: PathBuf,
    /// Optional second hypothesis file to compare against the first
    #[arg(long)]
    hyps_after: Option<PathBuf>,
}

#[derive(Args)]
struct PipelineCmd {
    /// JSON config; other flags below override its values
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    weights: Option<String>,
    #[arg(long)]
    lexicon: Option<String>,
    #[arg(long)]
    input_dir: Option<String>,
    /// Where to write the report (stdout always gets a copy)
    #[arg(long)]
    report_out: Option<String>,
    #[arg(long)]
    t_l: Option<f64>,
    #[arg(long)]
    t_f: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads
    #[arg(long)]
    parallelism: Option<usize>,
    /// Feed annotated regions and printed text straight to the matcher
    #[arg(long)]
    oracle_regions: bool,
}

/// Print one line, treating a closed pipe as a normal end of output.
fn say(line: &str) {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    let r = out.write_all(line.as_bytes()).and_then(|()| out.write_all(b"\n"));
    if let Err(e) = r {
        if e.kind() == std::io::ErrorKind::BrokenPipe {
            std::process::exit(0);
        }
        eprintln!("error: cannot write to stdout: {e}");
        std::process::exit(1);
    }
}

fn load_pair(
    weights: &PathBuf,
    det: &DetectorArgs,
    rec: &RecognizerArgs,
) -> Result<(DetectorWeights, RecognizerWeights)> {
    unpack_weights(load_tensors(weights)?, det.config(), rec.config())
}

fn read_lines(path: &PathBuf) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(text.lines().map(str::to_string).collect())
}

/// Runs one subcommand; Ok(code) is the process exit code.
fn run(cli: Cli) -> Result<u8> {
    match cli.cmd {
        Cmd::GenFixtures(cmd) => {
            let lex = Lexicon::load(&cmd.lexicon)?;
            let mode = if cmd.single_edit {
                CorruptionMode::SingleEdit
            } else if cmd.p_noise > 0.0 {
                CorruptionMode::PerChar(cmd.p_noise)
            } else {
                CorruptionMode::Clean
            };
            let set = gen_fixtures(cmd.seed, cmd.count, &lex, mode)?;
            write_fixtures(&cmd.out, &set)?;
            say(&format!("wrote {} pages to {}", set.fixtures.len(), cmd.out.display()));
            Ok(0)
        }
        Cmd::InitWeights(cmd) => {
            let det_cfg = cmd.detector.config();
            let rec_cfg = cmd.recognizer.config();
            det_cfg.validate()?;
            rec_cfg.validate()?;
            let mut rng = ChaCha8Rng::seed_from_u64(cmd.seed);
            let det = DetectorWeights::random(det_cfg, &mut rng)?;
            let rec = RecognizerWeights::random(rec_cfg, &mut rng)?;
            let tensors = pack_weights(&det, &rec);
            save_tensors(&cmd.out, &tensors)?;
            say(&format!("wrote {} tensors to {}", tensors.len(), cmd.out.display()));
            Ok(0)
        }
        Cmd::Segment(cmd) => {
            let (det_w, _) = load_pair(&cmd.weights, &cmd.detector, &cmd.recognizer)?;
            let img = rxocr_core::pipeline::pgm::load_pgm(&cmd.image)?;
            let (h, w) = (img.shape()[0], img.shape()[1]);
            let stacked = Tensor::new(vec![1, h, w], img.data().to_vec())?;
            for d in segment_image(&stacked, &det_w)? {
                let [x1, y1, x2, y2] = d.bbox;
                say(&format!(
                    "{{\"bbox\":[{x1:.3},{y1:.3},{x2:.3},{y2:.3}],\"score\":{:.4}}}",
                    d.score
                ));
            }
            Ok(0)
        }
        Cmd::Recognize(cmd) => {
            let (_, rec_w) = load_pair(&cmd.weights, &cmd.detector, &cmd.recognizer)?;
            let img = rxocr_core::pipeline::pgm::load_pgm(&cmd.image)?;
            say(&recognize(&img, &rec_w)?);
            Ok(0)
        }
        Cmd::Match(cmd) => {
            let th = Thresholds { t_l: cmd.t_l, t_f: cmd.t_f };
            th.validate()?;
            let lex = Lexicon::load(&cmd.lexicon)?;
            let d = decide(&lex, &cmd.query, th);
            let stage = match d.stage {
                Some(MatchStage::Levenshtein) => "\"levenshtein\"".into(),
                Some(MatchStage::Fuzzy) => "\"fuzzy\"".into(),
                None => "null".to_string(),
            };
            say(&format!(
                "{{\"outcome\":{},\"s_f\":{:.4},\"s_l\":{:.4},\"stage\":{}}}",
                serde_json::to_string(&d.outcome).expect("strings serialize"),
                d.s_f,
                d.s_l,
                stage
            ));
            Ok(0)
        }
        Cmd::Eval(cmd) => {
            let refs = read_lines(&cmd.refs)?;
            let hyps = read_lines(&cmd.hyps)?;
            if refs.len() != hyps.len() {
                return Err(Error::Config(format!(
                    "{} references but {} hypotheses",
                    refs.len(),
                    hyps.len()
                )));
            }
            match cmd.hyps_after {
                Some(after_path) => {
                    let after = read_lines(&after_path)?;
                    if after.len() != refs.len() {
                        return Err(Error::Config(format!(
                            "{} references but {} after-hypotheses",
                            refs.len(),
                            after.len()
                        )));
                    }
                    let pair = |hs: &[String]| -> Vec<(String, String)> {
                        refs.iter().cloned().zip(hs.iter().cloned()).collect()
                    };
                    let cmp =
                        rxocr_core::metrics::compare_corpora(&pair(&hyps), &pair(&after))?;
                    say(&render_cer_section(&cmp));
                }
                None => {
                    let c =
                        corpus_cer(refs.iter().map(String::as_str).zip(hyps.iter().map(String::as_str)))?;
                    say(&format!(
                        "{{\"cer\":{:.4},\"edits\":{},\"pairs\":{},\"ref_chars\":{}}}",
                        c.value(),
                        c.edits,
                        c.pairs,
                        c.ref_chars
                    ));
                }
            }
            Ok(0)
        }
        Cmd::Pipeline(cmd) => {
            let mut cfg = match &cmd.config {
                Some(path) => load_config(path)?,
                None => PipelineConfig::default(),
            };
            if let Some(v) = cmd.weights {
                cfg.weights = v;
            }
            if let Some(v) = cmd.lexicon {
                cfg.lexicon = v;
            }
            if let Some(v) = cmd.input_dir {
                cfg.input_dir = v;
            }
            if let Some(v) = cmd.report_out {
                cfg.report_out = Some(v);
            }
            if let Some(v) = cmd.t_l {
                cfg.t_l = v;
            }
            if let Some(v) = cmd.t_f {
                cfg.t_f = v;
            }
            if let Some(v) = cmd.seed {
                cfg.seed = v;
            }
            if let Some(v) = cmd.parallelism {
                cfg.parallelism = v;
            }
            if cmd.oracle_regions {
                cfg.oracle_regions = true;
            }
            let report = run_pipeline(&cfg)?;
            say(&render_report(&report)?);
            if let Some(out) = &report.config.report_out {
                emit_report(&report, out)?;
            }
            Ok(if report.errors.is_empty() { 0 } else { 2 })
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help and version are handled prints, not config errors
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
