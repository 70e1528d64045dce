//! `pocketforge`: corpus generation, training, completion, adaptation and
//! evaluation from the command line.
//!
//! Exit status is 0 on success, 1 on a runtime failure and 2 on a usage
//! error. All randomness is derived from `--seed` through named streams.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use pocketforge::dataset::{build_corpus, Corpus, CorpusConfig, Split};
use pocketforge::distances::{chamfer_with, chamfer_indexed_with, emd_exact, uhd, Reduction};
use pocketforge::generation::{
    adapt_best_of_restarts, complete, export_representations, floor_constraint, stitch, summarize_representations,
    AdaptConfig, DEFAULT_SIGMA,
};
use pocketforge::io::{format_number, read_xyz, write_ply, write_xyz};
use pocketforge::metrics::{eval_generation, EvalConfig, DEFAULT_EMD_POINTS, DEFAULT_GRID};
use pocketforge::model::target_forward;
use pocketforge::training::{train, validate, TrainConfig};
use pocketforge::verify::{gradient_check, Fault, Scale};
use pocketforge::{seed, HyperPocket, PointCloud, Variant};

type CliResult<T = ()> = Result<T, Box<dyn std::error::Error>>;

#[derive(Parser)]
#[command(name = "pocketforge", version, about = "Point cloud completion with a hypernetwork")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "POCKETFORGE_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a synthetic shape corpus.
    GenData(GenData),
    /// Train a model on a corpus.
    Train(Train),
    /// Sample completions of a partial cloud.
    Complete(Complete),
    /// Fit the missing-part code of a partial cloud to a floor.
    Adapt(Adapt),
    /// Generative metrics on the test split.
    EvalGen(EvalGen),
    /// Mean reconstruction Chamfer distance on one split.
    EvalRec(EvalRec),
    /// Compare autodiff gradients with finite differences.
    Gradcheck(Gradcheck),
    /// Distance between two cloud files.
    Dist(Dist),
    /// Export latent codes and target weights for two views per object.
    ExportRepr(ExportRepr),
    /// Combine the existing part of one cloud with the missing part of another.
    Stitch(Stitch),
}

#[derive(Args)]
struct GenData {
    /// Corpus configuration (JSON); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct Train {
    /// Training configuration (JSON); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct Complete {
    #[arg(long)]
    model: PathBuf,
    /// Existing part, in the text cloud format.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = DEFAULT_SIGMA)]
    sigma: f64,
    #[arg(long, default_value_t = 2048)]
    points: usize,
    #[arg(long)]
    out: PathBuf,
    /// Also write ASCII PLY copies.
    #[arg(long)]
    ply: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct Adapt {
    #[arg(long)]
    model: PathBuf,
    /// Existing part; required unless `--demo` is given.
    #[arg(long, required_unless_present = "demo")]
    input: Option<PathBuf>,
    /// Floor points; required unless `--demo` is given.
    #[arg(long, required_unless_present = "demo")]
    floor: Option<PathBuf>,
    /// Corpus whose packaged demo scene supplies the input and floor.
    #[arg(long, conflicts_with_all = ["input", "floor"])]
    demo: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 5)]
    restarts: usize,
    #[arg(long, default_value_t = DEFAULT_SIGMA)]
    init_sigma: f64,
    #[arg(long, default_value_t = 1.0)]
    consistency_weight: f64,
    #[arg(long, default_value_t = 1.0)]
    floor_weight: f64,
    #[arg(long, default_value_t = 2048)]
    points: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    ply: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvalGen {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = DEFAULT_SIGMA)]
    sigma: f64,
    #[arg(long, default_value_t = 2048)]
    points: usize,
    #[arg(long, default_value_t = DEFAULT_GRID)]
    grid: usize,
    #[arg(long, default_value_t = DEFAULT_EMD_POINTS)]
    emd_points: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args)]
struct EvalRec {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "val")]
    split: SplitArg,
    /// Which stored partition of each sample to use.
    #[arg(long, default_value_t = 0)]
    partition: usize,
    #[arg(long, default_value_t = 2048)]
    points: usize,
    /// Optional directory for a JSON result.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct Gradcheck {
    #[arg(long, value_enum, default_value = "tiny")]
    scale: ScaleArg,
    #[arg(long, default_value = "full")]
    variant: Variant,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Corrupt one analytic gradient to confirm the check fails.
    #[arg(long, hide = true)]
    inject_fault: bool,
    /// Optional directory for the JSON report.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScaleArg {
    Tiny,
    Full,
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Cd,
    CdIndexed,
    Emd,
    Uhd,
}

#[derive(Args)]
struct Dist {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    #[arg(long, value_enum, default_value = "cd")]
    metric: MetricArg,
    /// Chamfer reduction.
    #[arg(long, default_value = "sum")]
    reduction: Reduction,
}

#[derive(Args)]
struct ExportRepr {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Number of objects (manifest order).
    #[arg(long, default_value_t = 100)]
    limit: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Stitch {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    existing: PathBuf,
    #[arg(long)]
    missing: PathBuf,
    #[arg(long, default_value_t = 2048)]
    points: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    ply: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => run_train(a),
        Command::Complete(a) => run_complete(a),
        Command::Adapt(a) => run_adapt(a),
        Command::EvalGen(a) => run_eval_gen(a),
        Command::EvalRec(a) => run_eval_rec(a),
        Command::Gradcheck(a) => run_gradcheck(a),
        Command::Dist(a) => run_dist(a),
        Command::ExportRepr(a) => run_export(a),
        Command::Stitch(a) => run_stitch(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
            Ok(serde_json::from_str(&text).map_err(|e| format!("{}: {e}", p.display()))?)
        }
    }
}

fn create_dir(dir: &Path) -> CliResult {
    fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(())
}

fn write_cloud(dir: &Path, stem: &str, cloud: &PointCloud, ply: bool) -> CliResult {
    write_xyz(dir.join(format!("{stem}.xyz")), cloud)?;
    if ply {
        write_ply(dir.join(format!("{stem}.ply")), cloud)?;
    }
    Ok(())
}

fn load_model(dir: &Path) -> CliResult<HyperPocket> {
    Ok(HyperPocket::load(dir)?)
}

fn gen_data(a: GenData) -> CliResult {
    let mut config: CorpusConfig = read_json(a.config.as_deref())?;
    if let Some(s) = a.seed {
        config.seed = s;
    }
    let manifest = build_corpus(&config, &a.out)?;
    println!("{}", manifest.summary());
    Ok(())
}

fn run_train(a: Train) -> CliResult {
    let mut config: TrainConfig = read_json(a.config.as_deref())?;
    if let Some(v) = a.variant {
        config.variant = v;
    }
    if let Some(e) = a.epochs {
        config.epochs = e;
    }
    if let Some(s) = a.seed {
        config.seed = s;
    }
    config.validate()?;
    let corpus = Corpus::open(&a.data)?;
    let train_set = corpus.train_samples()?;
    let val_set = corpus.partitions(Split::Val, 0)?;
    let model = HyperPocket::new(config.architecture(), config.seed)?;
    let outcome = train(&config, &train_set, &val_set, model, Some(&a.out))?;
    match (outcome.best_val, outcome.best_epoch) {
        (Some(v), Some(e)) => println!("best val CD {} (x1e4: {:.3}) at epoch {e}", format_number(v), v * 1e4),
        _ => println!("no epochs run; initial checkpoint written"),
    }
    Ok(())
}

fn run_complete(a: Complete) -> CliResult {
    let model = load_model(&a.model)?;
    let input = read_xyz(&a.input)?;
    let mut rng = seed::stream(a.seed, "complete");
    let outs = complete(&model, &input, a.k, a.sigma, a.points, &mut rng)?;
    create_dir(&a.out)?;
    write_cloud(&a.out, "input", &input, a.ply)?;
    for (j, c) in outs.iter().enumerate() {
        write_cloud(&a.out, &format!("completion_{j:02}"), c, a.ply)?;
    }
    println!("wrote {} completions to {}", outs.len(), a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct AdaptSummary {
    restart: usize,
    initial_objective: f64,
    final_objective: f64,
    initial_consistency: f64,
    final_consistency: f64,
    initial_floor: f64,
    final_floor: f64,
    floor_ratio: f64,
    consistency_ratio: f64,
    r: Vec<f64>,
}

fn run_adapt(a: Adapt) -> CliResult {
    let model = load_model(&a.model)?;
    let (existing, floor) = match &a.demo {
        Some(dir) => {
            let (scene, floor) = Corpus::open(dir)?.demo()?;
            (scene.existing, floor)
        }
        None => (
            read_xyz(a.input.as_ref().expect("clap enforces --input"))?,
            read_xyz(a.floor.as_ref().expect("clap enforces --floor"))?,
        ),
    };
    let cfg = AdaptConfig {
        steps: a.steps,
        lr: a.lr,
        restarts: a.restarts,
        init_sigma: a.init_sigma,
        consistency_weight: a.consistency_weight,
        n_points: a.points,
    };
    let constraint = floor_constraint(floor.clone())?.with_weight(a.floor_weight);
    let result = adapt_best_of_restarts(&model, &existing, &constraint, &cfg, &mut seed::stream(a.seed, "adapt"))?;

    create_dir(&a.out)?;
    let mut w = csv::Writer::from_path(a.out.join("objective.csv"))?;
    for s in &result.trajectory {
        w.serialize(s)?;
    }
    w.flush()?;

    // both renders share one noise draw so that zero steps reproduce the
    // starting completion exactly
    let u = pocketforge::cloud::sample_ball_interior(
        a.points,
        model.noise_alpha,
        &mut seed::stream(a.seed, "adapt-render"),
    )?;
    let z_e = model.encode_existing(&existing)?;
    let before = target_forward(&model.decode_weights(&z_e, Some(&result.init))?, &u)?;
    let after = target_forward(&model.decode_weights(&z_e, Some(&result.r))?, &u)?;
    write_cloud(&a.out, "input", &existing, a.ply)?;
    write_cloud(&a.out, "floor", &floor, a.ply)?;
    write_cloud(&a.out, "initial", &before, a.ply)?;
    write_cloud(&a.out, "adapted", &after, a.ply)?;

    let (i, f) = (result.initial(), result.last());
    let summary = AdaptSummary {
        restart: result.restart,
        initial_objective: i.objective,
        final_objective: f.objective,
        initial_consistency: i.consistency,
        final_consistency: f.consistency,
        initial_floor: i.constraint,
        final_floor: f.constraint,
        floor_ratio: f.constraint / i.constraint,
        consistency_ratio: f.consistency / i.consistency,
        r: result.r.clone(),
    };
    write_json(&a.out.join("summary.json"), &summary)?;
    println!(
        "restart {}: floor {} -> {} (ratio {:.3}), consistency {} -> {} (ratio {:.3})",
        summary.restart,
        format_number(i.constraint),
        format_number(f.constraint),
        summary.floor_ratio,
        format_number(i.consistency),
        format_number(f.consistency),
        summary.consistency_ratio
    );
    Ok(())
}

fn run_eval_gen(a: EvalGen) -> CliResult {
    let model = load_model(&a.model)?;
    let corpus = Corpus::open(&a.data)?;
    let test = corpus.partitions(Split::Test, 0)?;
    let cfg = EvalConfig {
        k: a.k,
        sigma: a.sigma,
        n_points: a.points,
        grid: a.grid,
        emd_points: a.emd_points,
        seed: a.seed,
    };
    let (report, elements) = eval_generation(&model, &test, &cfg)?;
    create_dir(&a.out)?;
    write_json(&a.out.join("report.json"), &report)?;
    let mut w = csv::Writer::from_path(a.out.join("elements.csv"))?;
    for e in &elements {
        w.serialize(e)?;
    }
    w.flush()?;
    println!("JSD     x1e2 {:8.3}", report.jsd * 1e2);
    println!("MMD-CD  x1e3 {:8.3}", report.mmd_cd * 1e3);
    println!("MMD-EMD x1e2 {:8.3}", report.mmd_emd * 1e2);
    println!("COV-CD  %    {:8.2}", report.cov_cd * 100.0);
    println!("COV-EMD %    {:8.2}", report.cov_emd * 100.0);
    match report.tmd {
        Some(t) => println!("TMD     x1e2 {:8.3}", t * 1e2),
        None => println!("TMD          undefined (k < 2)"),
    }
    println!("UHD     x1e2 {:8.3}", report.uhd * 1e2);
    Ok(())
}

#[derive(Serialize)]
struct RecResult {
    split: String,
    partition: usize,
    n: usize,
    mean_cd: f64,
}

fn run_eval_rec(a: EvalRec) -> CliResult {
    let model = load_model(&a.model)?;
    let corpus = Corpus::open(&a.data)?;
    let split: Split = a.split.into();
    let set = corpus.partitions(split, a.partition)?;
    let cd = validate(&model, &set, a.points, a.seed)?;
    println!("mean CD {} (x1e4: {:.3}) over {} samples", format_number(cd), cd * 1e4, set.len());
    if let Some(out) = &a.out {
        create_dir(out)?;
        let r = RecResult {
            split: split.name().to_string(),
            partition: a.partition,
            n: set.len(),
            mean_cd: cd,
        };
        write_json(&out.join("eval_rec.json"), &r)?;
    }
    Ok(())
}

fn run_gradcheck(a: Gradcheck) -> CliResult {
    let scale = match a.scale {
        ScaleArg::Tiny => Scale::Tiny,
        ScaleArg::Full => Scale::Full,
    };
    let fault = if a.inject_fault {
        let model = HyperPocket::new(
            match scale {
                Scale::Tiny => pocketforge::Architecture::tiny(a.variant),
                Scale::Full => pocketforge::Architecture::with_variant(a.variant),
            },
            a.seed,
        )?;
        Some(Fault::default_for(&model))
    } else {
        None
    };
    let report = gradient_check(scale, a.variant, a.seed, fault.as_ref())?;
    for g in &report.groups {
        let worst = g.worst.as_ref().map(|w| format!("{}[{}]", w.name, w.index)).unwrap_or_default();
        println!(
            "{:<18} max rel error {:.3e}  checked {:>6}  skipped {:>4}  worst {worst}",
            g.group, g.max_rel_error, g.checked, g.skipped
        );
    }
    println!("overall max rel error {:.3e} (tolerance {:.0e})", report.max_rel_error, report.tolerance);
    if let Some(out) = &a.out {
        create_dir(out)?;
        write_json(&out.join("gradcheck.json"), &report)?;
    }
    if report.passed {
        Ok(())
    } else {
        Err(format!(
            "gradient check failed at {}",
            report.worst.as_deref().unwrap_or("(nothing checked)")
        )
        .into())
    }
}

fn run_dist(a: Dist) -> CliResult {
    let (p, q) = (read_xyz(&a.a)?, read_xyz(&a.b)?);
    let v = match a.metric {
        MetricArg::Cd => chamfer_with(&p, &q, a.reduction),
        MetricArg::CdIndexed => chamfer_indexed_with(&p, &q, a.reduction),
        MetricArg::Emd => emd_exact(&p, &q)?,
        MetricArg::Uhd => uhd(&p, &q),
    };
    println!("{}", format_number(v));
    Ok(())
}

fn run_export(a: ExportRepr) -> CliResult {
    let model = load_model(&a.model)?;
    let corpus = Corpus::open(&a.data)?;
    let views = corpus.two_views(a.split.into(), Some(a.limit))?;
    let rows = export_representations(&model, &views)?;
    let summary = summarize_representations(&rows);
    create_dir(&a.out)?;

    let mut w = csv::Writer::from_path(a.out.join("representations.csv"))?;
    let (nz, nt) = (rows[0].latent.len(), rows[0].theta.len());
    let mut header = vec!["sample_id".to_string(), "split_id".to_string()];
    header.extend((0..nz).map(|i| format!("z{i}")));
    header.extend((0..nt).map(|i| format!("theta{i}")));
    w.write_record(&header)?;
    for r in &rows {
        let mut rec = vec![r.sample_id.clone(), r.split_id.to_string()];
        rec.extend(r.latent.iter().chain(&r.theta).map(|v| format_number(*v)));
        w.write_record(&rec)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(a.out.join("distances.csv"))?;
    w.write_record(["kind", "a", "b", "latent", "theta"])?;
    for (kind, pairs) in [("same", &summary.same_object), ("different", &summary.different_object)] {
        for p in pairs {
            w.write_record([kind, &p.a, &p.b, &format_number(p.latent), &format_number(p.theta)])?;
        }
    }
    w.flush()?;

    #[derive(Serialize)]
    struct Medians {
        objects: usize,
        rows: usize,
        median_latent_same: f64,
        median_latent_different: f64,
        median_theta_same: f64,
        median_theta_different: f64,
    }
    let m = Medians {
        objects: summary.same_object.len(),
        rows: rows.len(),
        median_latent_same: summary.median_latent_same,
        median_latent_different: summary.median_latent_different,
        median_theta_same: summary.median_theta_same,
        median_theta_different: summary.median_theta_different,
    };
    write_json(&a.out.join("summary.json"), &m)?;
    println!(
        "median theta distance: same object {}, different objects {}",
        format_number(m.median_theta_same),
        format_number(m.median_theta_different)
    );
    println!(
        "median latent distance: same object {}, different objects {}",
        format_number(m.median_latent_same),
        format_number(m.median_latent_different)
    );
    Ok(())
}

fn run_stitch(a: Stitch) -> CliResult {
    let model = load_model(&a.model)?;
    let (e, m) = (read_xyz(&a.existing)?, read_xyz(&a.missing)?);
    let out = stitch(&model, &e, &m, a.points, &mut seed::stream(a.seed, "stitch"))?;
    create_dir(&a.out)?;
    write_cloud(&a.out, "stitched", &out, a.ply)?;
    println!("wrote {}", a.out.join("stitched.xyz").display());
    Ok(())
}
