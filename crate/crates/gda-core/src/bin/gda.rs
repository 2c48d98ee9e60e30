//! Command-line front end for the grouped differential attention toolkit.
//!
//! - One command per process. All heavy lifting lives in the library; the
//!   binary only parses flags, validates paths up front, dispatches on the
//!   stored precision, and maps library errors onto stable exit codes.
//! - Exit codes: 0 success, 1 usage or configuration problems (bad flags,
//!   bad paths, malformed files, invalid plans), 2 runtime aborts (training
//!   hit a non-finite loss), 3 audit verdicts (a preservation or gradient
//!   audit ran to completion and failed its tolerance).
//! - Report files end with one machine-readable line: `summary key=value ...`
//!   in text reports, `# summary key=value ...` in delimiter-separated data
//!   so column parsers skip it as a comment. Stdout ends with the same
//!   summary line.
//! - Tables are emitted twice: aligned for eyes, tab-separated for tools.
//!   No plotting or rendering here; figures are a downstream concern.
//! - Every subcommand is deterministic given its flags and seed. The only
//!   nondeterministic outputs anywhere are the throughput fields of training
//!   metrics lines, which carry wall-clock time by design.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gda_core::attention::{allocation_table, flops_estimate, param_count, AttentionMaps};
use gda_core::checkpoint::{AnyCheckpoint, Checkpoint};
use gda_core::config::{
    lm_config_from_kv, train_config_from_kv, GdaConfig, KvFile, LambdaInit,
};
use gda_core::error::{GdaError, Result};
use gda_core::gradcheck::run_gradcheck;
use gda_core::growth::{group_diff_grow, verify_preservation, GrowthPlan};
use gda_core::lm::{byte_tokenize, Model};
use gda_core::tensor::{Precision, Scalar};
use gda_core::training::{eval_perplexity, train, CorpusStream};

#[derive(Parser)]
#[command(
    name = "gda",
    version,
    about = "Grouped differential attention: training, growth, and audit tooling",
    subcommand_required = true,
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model described by a config file; optionally resume.
    Train(TrainArgs),
    /// Report held-out perplexity of a checkpoint on a corpus.
    Eval(EvalArgs),
    /// Grow a checkpoint and audit that the logits are preserved.
    Grow(GrowArgs),
    /// Audit analytic gradients against central differences.
    Gradcheck(GradcheckArgs),
    /// Dump attention score maps and row-sum statistics for an input.
    Inspect(InspectArgs),
    /// Print the signal/noise head split for candidate ratios.
    Alloc(AllocArgs),
    /// Print parameter and flop accounting for one configuration.
    Flops(FlopsArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Config file of `key = value` lines: model shape, training
    /// hyperparameters, and `corpus` (comma-separated text file paths).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Output directory for metrics.log and checkpoints.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Resume from this checkpoint. Model-shape keys in the config are
    /// ignored in favor of the checkpoint header.
    #[arg(long, value_name = "PATH")]
    ckpt: Option<PathBuf>,
    /// Override the config's `seed`.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Use 64-bit parameters regardless of the config's `precision`; when
    /// resuming, require the checkpoint to be 64-bit.
    #[arg(long = "f64")]
    use_f64: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Config file naming the `corpus` and evaluation `seq_len`.
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Checkpoint to evaluate.
    #[arg(long, value_name = "PATH")]
    ckpt: PathBuf,
    /// Optional directory for an eval.txt report.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Require the checkpoint to be 64-bit.
    #[arg(long = "f64")]
    use_f64: bool,
}

#[derive(Args)]
struct GrowArgs {
    /// Source checkpoint.
    #[arg(long, value_name = "PATH")]
    ckpt: PathBuf,
    /// Output directory for grown.gda and audit.txt.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Hidden-width factor n: d_model and mlp_hidden scale by n.
    #[arg(long, value_name = "N", default_value_t = 1)]
    factor: usize,
    /// Grow the signal group until signal:noise reaches this ratio; the
    /// noise head count stays fixed. Must be a multiple of the source
    /// ratio. Omitted: uniform cloning, every group scales by --factor.
    #[arg(long, value_name = "G")]
    target_ratio: Option<usize>,
    /// Audit tolerance on the max absolute logit difference. Growth is
    /// function-preserving only in exact arithmetic, so --tol 0 fails for
    /// any plan that actually changes the model.
    #[arg(long, value_name = "X", default_value_t = 1e-9)]
    tol: f64,
    /// Seed for the audit's random probe sequences.
    #[arg(long, value_name = "N", default_value_t = 0)]
    seed: u64,
    /// Require the checkpoint to be 64-bit.
    #[arg(long = "f64")]
    use_f64: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Total heads of the audited layer (d_model = 4 * heads, d_head = 4).
    #[arg(long, value_name = "H", default_value_t = 4)]
    heads: usize,
    /// Signal to noise ratio G of the audited layer.
    #[arg(long, value_name = "G", default_value_t = 1)]
    ratio: usize,
    /// Seed for parameters and probe input.
    #[arg(long, value_name = "N", default_value_t = 0)]
    seed: u64,
    /// Worst acceptable relative error per parameter group.
    #[arg(long, value_name = "X", default_value_t = 1e-4)]
    tol: f64,
    /// Optional directory for a gradcheck.txt report.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    /// Text file whose bytes are the probe sequence.
    #[arg(value_name = "INPUT")]
    input: PathBuf,
    /// Checkpoint to inspect.
    #[arg(long, value_name = "PATH")]
    ckpt: PathBuf,
    /// Output directory for per-head map files and summary.txt.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Require the checkpoint to be 64-bit.
    #[arg(long = "f64")]
    use_f64: bool,
}

#[derive(Args)]
struct AllocArgs {
    /// Total head count H.
    #[arg(long, value_name = "H", default_value_t = 48)]
    heads: usize,
    /// Candidate ratios G, comma separated; invalid ones are flagged.
    #[arg(
        long,
        value_name = "G",
        value_delimiter = ',',
        default_values_t = [1usize, 2, 3, 5, 11]
    )]
    ratio: Vec<usize>,
    /// Optional directory for alloc.txt and alloc.tsv.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FlopsArgs {
    /// Config file supplying the geometry (overrides --heads/--ratio).
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Checkpoint supplying the geometry (overrides --heads/--ratio).
    #[arg(long, value_name = "PATH")]
    ckpt: Option<PathBuf>,
    /// Total head count H. 48 selects the published 1536-wide preset;
    /// other counts use d_head = 32 and one KV unit per signal head.
    #[arg(long, value_name = "H", default_value_t = 48)]
    heads: usize,
    /// Signal to noise ratio G; G + 1 must divide the head count.
    #[arg(long, value_name = "G", default_value_t = 1)]
    ratio: usize,
    /// Optional directory for flops.txt, flops.tsv, and params.tsv.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            // Requested help or version is a success, not a usage error.
            let ok = matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            let _ = e.print();
            return if ok { ExitCode::SUCCESS } else { ExitCode::from(1) };
        }
    };
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}

/// Usage and configuration problems are 1; numeric runtime aborts are 2.
/// Audit verdicts never reach this path, they are Ok(3) outcomes.
fn exit_code(err: &GdaError) -> u8 {
    match err {
        GdaError::NonFiniteLoss { .. } | GdaError::NonFinite { .. } | GdaError::AllMasked { .. } => {
            2
        }
        _ => 1,
    }
}

fn run(cmd: Command) -> Result<u8> {
    match cmd {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Grow(a) => cmd_grow(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Inspect(a) => cmd_inspect(a),
        Command::Alloc(a) => cmd_alloc(a),
        Command::Flops(a) => cmd_flops(a),
    }
}

// ---------------------------------------------------------------- shared

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        return Err(GdaError::Config(format!(
            "{what} `{}` is not a readable file",
            path.display()
        )));
    }
    Ok(())
}

fn read_kv(path: &Path) -> Result<KvFile> {
    KvFile::parse(&fs::read_to_string(path)?)
}

/// Keys a train/eval config file may contain: model shape plus training.
fn all_config_keys() -> Vec<&'static str> {
    let mut keys = gda_core::config::LM_KEYS.to_vec();
    keys.extend_from_slice(gda_core::config::TRAIN_KEYS);
    keys
}

/// The `corpus` key holds comma-separated paths, each validated up front.
fn corpus_paths(kv: &KvFile, config_dir: &Path) -> Result<Vec<PathBuf>> {
    let raw = kv.require("corpus")?;
    let mut paths = Vec::new();
    for part in raw.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        // Relative corpus paths resolve against the config file, so a
        // config directory can be moved as a unit.
        let p = PathBuf::from(part);
        let p = if p.is_relative() { config_dir.join(p) } else { p };
        require_file(&p, "corpus file")?;
        paths.push(p);
    }
    if paths.is_empty() {
        return Err(GdaError::BadValue {
            key: "corpus".into(),
            msg: "expected at least one path".into(),
        });
    }
    Ok(paths)
}

fn require_f64(ckpt: &AnyCheckpoint, requested: bool) -> Result<()> {
    if requested && ckpt.precision() != Precision::F64 {
        return Err(GdaError::PrecisionMismatch {
            expected: "f64",
            found: "f32",
        });
    }
    Ok(())
}

/// `summary key=value ...` line; floats render with `{:?}` so they parse
/// back to the same bits.
fn summary_line(command: &str, fields: &[(&str, String)]) -> String {
    let mut line = format!("summary command={command}");
    for (k, v) in fields {
        let _ = write!(line, " {k}={v}");
    }
    line
}

fn write_report(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body)?;
    Ok(())
}

// ----------------------------------------------------------------- train

fn cmd_train(a: TrainArgs) -> Result<u8> {
    require_file(&a.config, "config file")?;
    if let Some(ckpt) = &a.ckpt {
        require_file(ckpt, "checkpoint")?;
    }
    let kv = read_kv(&a.config)?;
    kv.check_known(&all_config_keys())?;
    let mut cfg = train_config_from_kv(&kv)?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    let config_dir = a.config.parent().unwrap_or(Path::new("."));
    let paths = corpus_paths(&kv, config_dir)?;
    let corpus = CorpusStream::ingest(&paths, cfg.seq_len, cfg.seed)?;
    fs::create_dir_all(&a.out)?;

    match &a.ckpt {
        Some(path) => {
            let any = AnyCheckpoint::load(path)?;
            require_f64(&any, a.use_f64)?;
            match any {
                AnyCheckpoint::F32(ckpt) => train_run(&ckpt, &corpus, &cfg, &a.out),
                AnyCheckpoint::F64(ckpt) => train_run(&ckpt, &corpus, &cfg, &a.out),
            }
        }
        None => {
            let mut lm = lm_config_from_kv(&kv)?;
            if a.use_f64 {
                lm.gda.precision = Precision::F64;
            }
            match lm.gda.precision {
                Precision::F32 => {
                    let model = Model::<f32>::init(&lm, cfg.seed)?;
                    train_run(&model.to_checkpoint(0, cfg.seed), &corpus, &cfg, &a.out)
                }
                Precision::F64 => {
                    let model = Model::<f64>::init(&lm, cfg.seed)?;
                    train_run(&model.to_checkpoint(0, cfg.seed), &corpus, &cfg, &a.out)
                }
            }
        }
    }
}

fn train_run<T: Scalar>(
    ckpt: &Checkpoint<T>,
    corpus: &CorpusStream,
    cfg: &gda_core::config::TrainConfig,
    out: &Path,
) -> Result<u8> {
    let outcome = train(ckpt, corpus, cfg, out)?;
    let mut fields = vec![
        ("steps", cfg.total_steps.to_string()),
        ("windows", corpus.n_windows().to_string()),
    ];
    if let Some(last) = outcome.records.last() {
        fields.push(("final_loss", format!("{:?}", last.loss)));
        fields.push(("final_grad_norm", format!("{:?}", last.grad_norm)));
    }
    if let Some((step, ppl)) = outcome.evals.last() {
        fields.push(("eval_step", step.to_string()));
        fields.push(("eval_perplexity", format!("{ppl:?}")));
    }
    // The file summary stays path-free so two runs of the same seed into
    // different directories write the same line; paths go to stdout only.
    let file_summary = summary_line("train", &fields);
    let mut log = fs::OpenOptions::new()
        .append(true)
        .open(&outcome.metrics_path)?;
    use std::io::Write as _;
    writeln!(log, "{file_summary}")?;

    fields.push((
        "final_checkpoint",
        outcome.final_checkpoint.display().to_string(),
    ));
    fields.push(("metrics", outcome.metrics_path.display().to_string()));
    println!("{}", summary_line("train", &fields));
    Ok(0)
}

// ------------------------------------------------------------------ eval

fn cmd_eval(a: EvalArgs) -> Result<u8> {
    require_file(&a.config, "config file")?;
    require_file(&a.ckpt, "checkpoint")?;
    let kv = read_kv(&a.config)?;
    kv.check_known(&all_config_keys())?;
    let cfg = train_config_from_kv(&kv)?;
    let config_dir = a.config.parent().unwrap_or(Path::new("."));
    let paths = corpus_paths(&kv, config_dir)?;
    let corpus = CorpusStream::ingest(&paths, cfg.seq_len, cfg.seed)?;

    let any = AnyCheckpoint::load(&a.ckpt)?;
    require_f64(&any, a.use_f64)?;
    let (step, precision, ppl) = match &any {
        AnyCheckpoint::F32(ckpt) => {
            let model = Model::from_checkpoint(ckpt)?;
            (ckpt.step, "f32", eval_perplexity(&model, &corpus)?)
        }
        AnyCheckpoint::F64(ckpt) => {
            let model = Model::from_checkpoint(ckpt)?;
            (ckpt.step, "f64", eval_perplexity(&model, &corpus)?)
        }
    };

    let fields = vec![
        ("checkpoint", a.ckpt.display().to_string()),
        ("step", step.to_string()),
        ("precision", precision.to_string()),
        ("eval_windows", corpus.n_eval_windows().to_string()),
        ("perplexity", format!("{ppl:?}")),
    ];
    let summary = summary_line("eval", &fields);
    if let Some(out) = &a.out {
        fs::create_dir_all(out)?;
        let mut body = String::new();
        let _ = writeln!(body, "# held-out perplexity");
        for (k, v) in &fields {
            let _ = writeln!(body, "{k} = {v}");
        }
        let _ = writeln!(body, "{summary}");
        write_report(&out.join("eval.txt"), &body)?;
    }
    println!("perplexity = {ppl:?}");
    println!("{summary}");
    Ok(0)
}

// ------------------------------------------------------------------ grow

fn cmd_grow(a: GrowArgs) -> Result<u8> {
    require_file(&a.ckpt, "checkpoint")?;
    fs::create_dir_all(&a.out)?;
    let any = AnyCheckpoint::load(&a.ckpt)?;
    require_f64(&any, a.use_f64)?;
    match any {
        AnyCheckpoint::F32(ckpt) => grow_run(&ckpt, &a),
        AnyCheckpoint::F64(ckpt) => grow_run(&ckpt, &a),
    }
}

fn grow_run<T: Scalar>(src: &Checkpoint<T>, a: &GrowArgs) -> Result<u8> {
    let plan = match a.target_ratio {
        None => GrowthPlan::uniform(&src.config, a.factor)?,
        Some(target) => {
            let g0 = src.config.gda.ratio;
            if target == 0 || target % g0 != 0 {
                return Err(GdaError::Plan(format!(
                    "target ratio {target}:1 is not an integer multiple of the source ratio {g0}:1"
                )));
            }
            GrowthPlan::group_differentiated(&src.config, a.factor, target / g0)?
        }
    };
    let grown = group_diff_grow(src, &plan)?;
    let grown_path = a.out.join("grown.gda");
    grown.save(&grown_path)?;

    // The audit is not optional: growth without a preservation check is a
    // silent way to destroy a training run.
    const AUDIT_SAMPLES: usize = 16;
    let report = verify_preservation(src, &grown, AUDIT_SAMPLES, a.seed, a.tol)?;

    let sg = &src.config.gda;
    let tg = &grown.config.gda;
    let fields = vec![
        ("hidden_factor", plan.hidden_factor.to_string()),
        ("signal_factor", plan.signal_factor.to_string()),
        ("noise_factor", plan.noise_factor.to_string()),
        ("from", format!("d{}xh{}r{}", sg.d_model, sg.heads, sg.ratio)),
        ("to", format!("d{}xh{}r{}", tg.d_model, tg.heads, tg.ratio)),
        ("samples", report.n_samples.to_string()),
        ("seed", report.seed.to_string()),
        ("max_abs_diff", format!("{:?}", report.max_abs_diff)),
        ("tol", format!("{:?}", report.tol)),
        ("passed", report.passed.to_string()),
        ("grown", grown_path.display().to_string()),
    ];
    let summary = summary_line("grow", &fields);

    let mut body = String::new();
    let _ = writeln!(body, "# logit preservation audit");
    let _ = writeln!(body, "source = {}", a.ckpt.display());
    for (k, v) in &fields {
        let _ = writeln!(body, "{k} = {v}");
    }
    let _ = writeln!(body, "# max abs logit diff with only the first k layers active");
    for (i, d) in report.per_layer.iter().enumerate() {
        let _ = writeln!(body, "prefix_depth {} max_abs_diff {d:?}", i + 1);
    }
    if let Some(k) = report.first_drift_layer() {
        let _ = writeln!(body, "# first depth over tolerance: {}", k + 1);
    }
    let _ = writeln!(body, "{summary}");
    write_report(&a.out.join("audit.txt"), &body)?;

    println!("{summary}");
    Ok(if report.passed { 0 } else { 3 })
}

// ------------------------------------------------------------- gradcheck

fn cmd_gradcheck(a: GradcheckArgs) -> Result<u8> {
    // Small fixed head width keeps the numeric sweep fast while leaving
    // every parameter group non-trivial.
    const D_HEAD: usize = 4;
    if a.ratio == 0 || a.heads == 0 || a.heads % (a.ratio + 1) != 0 {
        return Err(GdaError::Config(format!(
            "heads must be a positive multiple of ratio + 1, got heads={} ratio={}",
            a.heads, a.ratio
        )));
    }
    // One KV group: every key/value column then feeds every head in its
    // arm, which keeps each probed gradient coordinate large relative to
    // the forward pass's own rounding and so keeps the audit sharp.
    let cfg = GdaConfig {
        d_model: a.heads * D_HEAD,
        n_layers: 1,
        heads: a.heads,
        ratio: a.ratio,
        d_head: D_HEAD,
        n_kv: 1,
        rope_theta: 10_000.0,
        max_seq_len: 8,
        lambda_init: LambdaInit::Schedule,
        precision: Precision::F64,
    };
    // The audit always runs in 64-bit: central differences at eps = 1e-5
    // only resolve gradients when the forward pass rounds far below that,
    // so a 32-bit run could not certify any useful tolerance.
    const EPS: f64 = 1e-5;
    let report = run_gradcheck::<f64>(&cfg, a.seed, EPS, a.tol)?;

    let mut body = String::new();
    for g in &report.groups {
        let _ = writeln!(
            body,
            "group={} params={} max_rel={:?} mean_rel={:?}",
            g.name, g.params, g.max_rel, g.mean_rel
        );
    }
    let fields = vec![
        ("precision", report.precision.to_string()),
        ("heads", a.heads.to_string()),
        ("ratio", a.ratio.to_string()),
        ("seed", report.seed.to_string()),
        ("eps", format!("{:?}", report.eps)),
        ("tol", format!("{:?}", report.tol)),
        ("max_rel", format!("{:?}", report.max_rel())),
        ("passed", report.passed.to_string()),
    ];
    let summary = summary_line("gradcheck", &fields);
    let _ = writeln!(body, "{summary}");

    if let Some(out) = &a.out {
        fs::create_dir_all(out)?;
        write_report(&out.join("gradcheck.txt"), &body)?;
    }
    print!("{body}");
    Ok(if report.passed { 0 } else { 3 })
}

// --------------------------------------------------------------- inspect

fn cmd_inspect(a: InspectArgs) -> Result<u8> {
    require_file(&a.input, "input file")?;
    require_file(&a.ckpt, "checkpoint")?;
    fs::create_dir_all(&a.out)?;
    let bytes = fs::read(&a.input)?;
    if bytes.is_empty() {
        return Err(GdaError::Config(format!(
            "input file `{}` is empty",
            a.input.display()
        )));
    }
    let tokens = byte_tokenize(&bytes);
    let any = AnyCheckpoint::load(&a.ckpt)?;
    require_f64(&any, a.use_f64)?;
    match any {
        AnyCheckpoint::F32(ckpt) => inspect_run(&ckpt, &tokens, &a),
        AnyCheckpoint::F64(ckpt) => inspect_run(&ckpt, &tokens, &a),
    }
}

/// One score map as structured text: a `#` header, then one line per query
/// row, values space-separated in column order (row-major).
fn render_map<T: Scalar>(
    map: &gda_core::tensor::Tensor<T>,
    layer: usize,
    kind: &str,
    head: usize,
) -> Result<String> {
    let (rows, cols) = map.dims2("score map")?;
    let mut body = format!("# layer={layer} kind={kind} head={head} rows={rows} cols={cols} row-major\n");
    for r in 0..rows {
        let row = &map.data()[r * cols..(r + 1) * cols];
        for (j, &v) in row.iter().enumerate() {
            if j > 0 {
                body.push(' ');
            }
            let _ = write!(body, "{:?}", v.to_f64());
        }
        body.push('\n');
    }
    Ok(body)
}

fn inspect_run<T: Scalar>(ckpt: &Checkpoint<T>, tokens: &[u32], a: &InspectArgs) -> Result<u8> {
    let model = Model::from_checkpoint(ckpt)?;
    let maps: Vec<AttentionMaps<T>> = model.layer_attention_maps(tokens)?;
    let cfg = &ckpt.config.gda;

    let mut summary_body = String::new();
    let _ = writeln!(summary_body, "# attention inspection");
    let _ = writeln!(summary_body, "checkpoint = {}", a.ckpt.display());
    let _ = writeln!(summary_body, "input = {}", a.input.display());
    let _ = writeln!(summary_body, "tokens = {}", tokens.len());

    let mut files = 0usize;
    let mut max_rowsum_dev = 0.0f64;
    for (li, layer_maps) in maps.iter().enumerate() {
        let layer = li + 1;
        for (i, map) in layer_maps.signal.iter().enumerate() {
            let name = format!("layer-{layer:02}-signal-{i:02}.map");
            write_report(&a.out.join(&name), &render_map(map, layer, "signal", i)?)?;
            files += 1;
        }
        for (j, map) in layer_maps.noise.iter().enumerate() {
            let name = format!("layer-{layer:02}-noise-{j:02}.map");
            write_report(&a.out.join(&name), &render_map(map, layer, "noise", j)?)?;
            files += 1;
        }

        // Differential-map row sums: every visible row must total 1 - λ.
        let lambda = layer_maps.lambda.to_f64();
        let expected = 1.0 - lambda;
        let (mut min, mut max, mut sum, mut count) = (f64::INFINITY, f64::NEG_INFINITY, 0.0, 0u64);
        for i in 0..layer_maps.signal.len() {
            let diff = layer_maps.differential(i)?;
            let (rows, cols) = diff.dims2("differential map")?;
            for r in 0..rows {
                let s: f64 = diff.data()[r * cols..(r + 1) * cols]
                    .iter()
                    .map(|&v| v.to_f64())
                    .sum();
                min = min.min(s);
                max = max.max(s);
                sum += s;
                count += 1;
                max_rowsum_dev = max_rowsum_dev.max((s - expected).abs());
            }
        }
        let mean = sum / count as f64;
        let _ = writeln!(
            summary_body,
            "layer={layer} lambda={lambda:?} lambda_init={:?} expected_rowsum={expected:?}",
            layer_maps.lambda_init
        );
        let _ = writeln!(
            summary_body,
            "layer={layer} rowsum_min={min:?} rowsum_mean={mean:?} rowsum_max={max:?}"
        );

        // Reuse accounting: each noise map serves exactly G signal heads.
        let mut reuse = vec![0usize; layer_maps.noise.len()];
        for &partner in &layer_maps.noise_partner {
            reuse[partner] += 1;
        }
        for (j, n) in reuse.iter().enumerate() {
            let _ = writeln!(summary_body, "layer={layer} noise_head={j} reuse={n}");
        }
    }

    let fields = vec![
        ("layers", cfg.n_layers.to_string()),
        ("signal_heads", cfg.signal_heads().to_string()),
        ("noise_heads", cfg.noise_heads().to_string()),
        ("tokens", tokens.len().to_string()),
        ("map_files", files.to_string()),
        ("max_rowsum_dev", format!("{max_rowsum_dev:?}")),
    ];
    let summary = summary_line("inspect", &fields);
    let _ = writeln!(summary_body, "{summary}");
    write_report(&a.out.join("summary.txt"), &summary_body)?;
    print!("{summary_body}");
    Ok(0)
}

// ----------------------------------------------------------- alloc/flops

/// Left-aligned text table from header + rows.
fn aligned_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in rows {
        for (i, cell) in row.iter().enumerate() {
            widths[i] = widths[i].max(cell.len());
        }
    }
    let mut out = String::new();
    let render = |cells: Vec<String>, out: &mut String, widths: &[usize]| {
        for (i, cell) in cells.iter().enumerate() {
            if i > 0 {
                out.push_str("  ");
            }
            let _ = write!(out, "{:<width$}", cell, width = widths[i]);
        }
        while out.ends_with(' ') {
            out.pop();
        }
        out.push('\n');
    };
    render(header.iter().map(|s| s.to_string()).collect(), &mut out, &widths);
    for row in rows {
        render(row.clone(), &mut out, &widths);
    }
    out
}

fn tsv_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = header.join("\t");
    out.push('\n');
    for row in rows {
        out.push_str(&row.join("\t"));
        out.push('\n');
    }
    out
}

fn cmd_alloc(a: AllocArgs) -> Result<u8> {
    if a.heads == 0 {
        return Err(GdaError::Config("heads must be positive".into()));
    }
    let table = allocation_table(a.heads, &a.ratio);
    let header = ["ratio", "valid", "signal", "noise", "note"];
    let rows: Vec<Vec<String>> = table
        .iter()
        .map(|r| {
            vec![
                format!("{}:1", r.ratio),
                if r.valid { "yes" } else { "no" }.to_string(),
                r.signal.to_string(),
                r.noise.to_string(),
                r.note.clone(),
            ]
        })
        .collect();
    let valid = table.iter().filter(|r| r.valid).count();
    let fields = vec![
        ("heads", a.heads.to_string()),
        ("rows", table.len().to_string()),
        ("valid", valid.to_string()),
    ];
    let summary = summary_line("alloc", &fields);

    let aligned = aligned_table(&header, &rows);
    let tsv = tsv_table(&header, &rows);
    if let Some(out) = &a.out {
        fs::create_dir_all(out)?;
        write_report(&out.join("alloc.txt"), &format!("{aligned}{summary}\n"))?;
        write_report(&out.join("alloc.tsv"), &format!("{tsv}# {summary}\n"))?;
    }
    print!("{aligned}\n{tsv}{summary}\n");
    Ok(0)
}

fn cmd_flops(a: FlopsArgs) -> Result<u8> {
    let cfg: GdaConfig = if let Some(path) = &a.config {
        require_file(path, "config file")?;
        let kv = read_kv(path)?;
        kv.check_known(gda_core::config::LM_KEYS)?;
        lm_config_from_kv(&kv)?.gda
    } else if let Some(path) = &a.ckpt {
        require_file(path, "checkpoint")?;
        AnyCheckpoint::load(path)?.config().gda.clone()
    } else {
        if a.ratio == 0 || a.heads == 0 || a.heads % (a.ratio + 1) != 0 {
            return Err(GdaError::Config(format!(
                "heads must be a positive multiple of ratio + 1, got heads={} ratio={}; \
                 run `gda alloc --heads {}` to scan valid ratios",
                a.heads, a.ratio, a.heads
            )));
        }
        if a.heads == 48 {
            GdaConfig::preset_48(a.ratio)
        } else {
            const D_HEAD: usize = 32;
            let noise = a.heads / (a.ratio + 1);
            GdaConfig {
                d_model: a.heads * D_HEAD,
                n_layers: 1,
                heads: a.heads,
                ratio: a.ratio,
                d_head: D_HEAD,
                n_kv: a.heads - noise,
                rope_theta: 10_000.0,
                max_seq_len: 4096,
                lambda_init: LambdaInit::Schedule,
                precision: Precision::F32,
            }
        }
    };

    let params = param_count(&cfg);
    let flops = flops_estimate(&cfg, cfg.max_seq_len);

    let p_header = ["tensor", "params"];
    let p_rows: Vec<Vec<String>> = [
        ("wq1", params.wq1),
        ("wk1", params.wk1),
        ("wq2", params.wq2),
        ("wk2", params.wk2),
        ("wv", params.wv),
        ("wo", params.wo),
        ("lambda", params.lambda),
        ("head_norm", params.head_norm),
        ("projections", params.projections()),
        ("per_layer", params.per_layer()),
    ]
    .iter()
    .map(|(n, v)| vec![n.to_string(), v.to_string()])
    .collect();

    let f_header = ["stage", "flops"];
    let mut f_rows: Vec<Vec<String>> = flops
        .stages
        .iter()
        .map(|(n, v)| vec![n.to_string(), v.to_string()])
        .collect();
    f_rows.push(vec!["layer_total".into(), flops.layer_total().to_string()]);

    let fields = vec![
        ("heads", cfg.heads.to_string()),
        ("ratio", cfg.ratio.to_string()),
        ("signal", cfg.signal_heads().to_string()),
        ("noise", cfg.noise_heads().to_string()),
        ("n_kv", cfg.n_kv.to_string()),
        ("d_model", cfg.d_model.to_string()),
        ("d_head", cfg.d_head.to_string()),
        ("seq_len", flops.seq_len.to_string()),
        ("score_maps", flops.score_maps.to_string()),
        ("projection_params", params.projections().to_string()),
        ("layer_params", params.per_layer().to_string()),
        ("layer_flops", flops.layer_total().to_string()),
    ];
    let summary = summary_line("flops", &fields);

    let p_aligned = aligned_table(&p_header, &p_rows);
    let f_aligned = aligned_table(&f_header, &f_rows);
    let p_tsv = tsv_table(&p_header, &p_rows);
    let f_tsv = tsv_table(&f_header, &f_rows);
    if let Some(out) = &a.out {
        fs::create_dir_all(out)?;
        write_report(
            &out.join("flops.txt"),
            &format!("{p_aligned}\n{f_aligned}{summary}\n"),
        )?;
        write_report(&out.join("params.tsv"), &format!("{p_tsv}# {summary}\n"))?;
        write_report(&out.join("flops.tsv"), &format!("{f_tsv}# {summary}\n"))?;
    }
    print!("{p_aligned}\n{f_aligned}\n{p_tsv}\n{f_tsv}{summary}\n");
    Ok(0)
}
