use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use fullpoint_core::cloud::{
    canonical_seed, farthest_point_sample, knn_self, read_cloud, voxel_downsample, write_cloud, AugmentSpec,
};
use fullpoint_core::harness::{
    ablate, evaluate, gen_dataset, load_dataset, robustness, save_dataset, train, verify_gradients, verify_lemmas,
    AblationConfig, AblationGrid, AblationKind, Dataset, DatasetKind, Perturbation, RunConfig, SyntheticDatasetSpec,
    TrainConfig,
};
use fullpoint_core::network::{LayerKind, Network, NetworkSpec, SamplingBlock, Task};
use fullpoint_core::{Error, Rng};

#[derive(Parser)]
#[command(name = "fullpoint", version, about = "Full point encoding layers: verification, training and ablations")]
struct Cli {
    /// Seed for data generation, initialization and shuffling.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// JSON file with optional `network`, `data` and `train` sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory for reports, checkpoints and generated data.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Print the report as JSON instead of text.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Randomized equivalence trials of the efficient layer forms.
    VerifyLemmas {
        #[arg(long, default_value_t = 100)]
        trials: usize,
    },
    /// Finite-difference gradient checks of every layer.
    VerifyGrads,
    /// Write a synthetic dataset to --out.
    GenData {
        #[arg(long, value_enum, default_value_t = DataArg::ShapesCls)]
        kind: DataArg,
        #[arg(long)]
        train: Option<usize>,
        #[arg(long)]
        test: Option<usize>,
        #[arg(long)]
        points: Option<usize>,
    },
    /// Train a network and save its checkpoint and metrics.
    Train {
        #[arg(long, value_enum)]
        task: Option<TaskArg>,
        #[arg(long, value_enum, default_value_t = LayerArg::Fptransformer)]
        layer: LayerArg,
        /// Dataset directory written by `gen-data`.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        points: Option<usize>,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// `none`, `permute`, `density:<points>`, `scale:<s>` or `translate:<t>`.
        #[arg(long, default_value = "none")]
        perturb: String,
    },
    /// Perturbation and density sweep on a trained classifier.
    Robustness {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train one model per grid value and tabulate.
    Ablate {
        /// position-encoding, c_mid, sigma or sampling-block.
        what: String,
        /// Comma separated values; c_mid rows are separated by `;`.
        #[arg(long)]
        grid: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Farthest point sampling, kNN or voxel downsampling on a cloud file.
    Sample {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum)]
        method: SampleMethod,
        /// Number of FPS picks.
        #[arg(long)]
        m: Option<usize>,
        /// Neighbors per point for kNN.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        voxel_size: Option<f64>,
        /// Output cloud file (fps, voxel).
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum DataArg {
    ShapesCls,
    SceneSeg,
    SphereNormals,
}

impl From<DataArg> for DatasetKind {
    fn from(d: DataArg) -> Self {
        match d {
            DataArg::ShapesCls => DatasetKind::ShapesCls,
            DataArg::SceneSeg => DatasetKind::SceneSeg,
            DataArg::SphereNormals => DatasetKind::SphereNormals,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Classification,
    Segmentation,
    NormalEstimation,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Classification => Task::Classification,
            TaskArg::Segmentation => Task::Segmentation,
            TaskArg::NormalEstimation => Task::NormalEstimation,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum LayerArg {
    Fpconv,
    Fptransformer,
    MlpBaseline,
}

impl From<LayerArg> for LayerKind {
    fn from(l: LayerArg) -> Self {
        match l {
            LayerArg::Fpconv => LayerKind::Fpconv,
            LayerArg::Fptransformer => LayerKind::Fptransformer,
            LayerArg::MlpBaseline => LayerKind::MlpBaseline,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SampleMethod {
    Fps,
    Knn,
    Voxel,
}

/// Exit status: verification failure vs bad input.
enum Failure {
    Verification(String),
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Validation { .. } | Error::Schema(_) | Error::Parse { .. } | Error::Parameter(_) => {
                Failure::Usage(e.to_string())
            }
            e => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verification(m)) => {
            eprintln!("verification failed: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: &Cli) -> Outcome {
    let config = match &cli.config {
        Some(p) => RunConfig::from_json(
            &std::fs::read_to_string(p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?,
        )?,
        None => RunConfig::default(),
    };
    match &cli.command {
        Command::VerifyLemmas { trials } => cmd_verify_lemmas(cli, *trials),
        Command::VerifyGrads => cmd_verify_grads(cli),
        Command::GenData {
            kind,
            train,
            test,
            points,
        } => cmd_gen_data(cli, &config, (*kind).into(), *train, *test, *points),
        Command::Train {
            task,
            layer,
            data,
            epochs,
            points,
        } => cmd_train(cli, &config, task.map(Task::from), (*layer).into(), data.as_deref(), *epochs, *points),
        Command::Eval { model, data, perturb } => cmd_eval(cli, &config, model, data.as_deref(), perturb),
        Command::Robustness { model, data } => cmd_robustness(cli, &config, model, data.as_deref()),
        Command::Ablate { what, grid, epochs } => cmd_ablate(cli, &config, what, grid.as_deref(), *epochs),
        Command::Sample {
            input,
            method,
            m,
            k,
            voxel_size,
            output,
        } => cmd_sample(cli, input, *method, *m, *k, *voxel_size, output.as_deref()),
    }
}

fn out_dir(cli: &Cli) -> Result<Option<&Path>, Failure> {
    if let Some(d) = &cli.out {
        std::fs::create_dir_all(d)?;
    }
    Ok(cli.out.as_deref())
}

fn write_out(cli: &Cli, name: &str, contents: &str) -> Outcome {
    if let Some(dir) = out_dir(cli)? {
        std::fs::write(dir.join(name), contents)?;
    }
    Ok(())
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("reports serialize")
}

fn cmd_verify_lemmas(cli: &Cli, trials: usize) -> Outcome {
    if trials == 0 {
        return Err(Failure::Usage("--trials must be at least 1".into()));
    }
    let reports = verify_lemmas(trials, cli.seed)?;
    let json = to_json(&reports);
    write_out(cli, "lemmas.json", &json)?;
    if cli.json {
        println!("{json}");
    } else {
        for r in &reports {
            println!(
                "{:<14} {}/{} trials  max rel error {:.3e} (tol {:.0e})  C_m=C trials {}  negative control {}  {:.2}s",
                r.layer,
                r.passed,
                r.trials,
                r.max_rel_error,
                r.tolerance,
                r.boundary_trials,
                if r.negative_control_detected { "caught" } else { "MISSED" },
                r.seconds
            );
        }
    }
    match reports.iter().find(|r| !r.ok()) {
        Some(r) => Err(Failure::Verification(format!("{} lemma", r.layer))),
        None => Ok(()),
    }
}

fn cmd_verify_grads(cli: &Cli) -> Outcome {
    let r = verify_gradients(cli.seed)?;
    let json = to_json(&r);
    write_out(cli, "gradients.json", &json)?;
    if cli.json {
        println!("{json}");
    } else {
        for c in &r.checks {
            println!(
                "{:<44} {:>5} coords  max rel error {:.3e}  {}",
                c.name,
                c.checked,
                c.max_rel_error,
                if c.passed { "ok" } else { "FAIL" }
            );
        }
        println!(
            "negative control {}  tolerance {:.0e}  {:.2}s",
            if r.negative_control_detected { "caught" } else { "MISSED" },
            r.tolerance,
            r.seconds
        );
    }
    if r.ok() {
        Ok(())
    } else {
        Err(Failure::Verification("gradient checks".into()))
    }
}

fn default_data(kind: DatasetKind, seed: u64) -> SyntheticDatasetSpec {
    match kind {
        DatasetKind::ShapesCls => SyntheticDatasetSpec::new(kind, 200, 80, seed),
        DatasetKind::SceneSeg => SyntheticDatasetSpec::new(kind, 120, 40, seed),
        DatasetKind::SphereNormals => SyntheticDatasetSpec::new(kind, 40, 10, seed),
    }
}

fn data_kind(task: Task) -> DatasetKind {
    match task {
        Task::Classification => DatasetKind::ShapesCls,
        Task::Segmentation => DatasetKind::SceneSeg,
        Task::NormalEstimation => DatasetKind::SphereNormals,
    }
}

fn task_of(kind: DatasetKind) -> Task {
    match kind {
        DatasetKind::ShapesCls => Task::Classification,
        DatasetKind::SceneSeg => Task::Segmentation,
        DatasetKind::SphereNormals => Task::NormalEstimation,
    }
}

fn cmd_gen_data(
    cli: &Cli,
    config: &RunConfig,
    kind: DatasetKind,
    train: Option<usize>,
    test: Option<usize>,
    points: Option<usize>,
) -> Outcome {
    let dir = out_dir(cli)?.ok_or_else(|| Failure::Usage("gen-data needs --out".into()))?;
    let mut spec = config.data.clone().unwrap_or_else(|| default_data(kind, cli.seed));
    if config.data.is_none() {
        spec.kind = kind;
    }
    spec.train_count = train.unwrap_or(spec.train_count);
    spec.test_count = test.unwrap_or(spec.test_count);
    spec.points_per_cloud = points.unwrap_or(spec.points_per_cloud);
    let data = gen_dataset(&spec)?;
    save_dataset(&data, dir)?;
    if cli.json {
        println!("{}", to_json(&spec));
    } else {
        println!(
            "wrote {} train and {} test clouds of {} points to {}",
            data.train.len(),
            data.test.len(),
            spec.points_per_cloud,
            dir.display()
        );
    }
    Ok(())
}

/// Dataset from a directory, the config, or the task default.
fn resolve_data(cli: &Cli, config: &RunConfig, task: Task, dir: Option<&Path>, points: Option<usize>) -> Result<Dataset, Failure> {
    if let Some(d) = dir {
        return Ok(load_dataset(d)?);
    }
    let mut spec = config.data.clone().unwrap_or_else(|| default_data(data_kind(task), cli.seed));
    if let Some(p) = points {
        spec.points_per_cloud = p;
    }
    Ok(gen_dataset(&spec)?)
}

fn cmd_train(
    cli: &Cli,
    config: &RunConfig,
    task: Option<Task>,
    layer: LayerKind,
    data_dir: Option<&Path>,
    epochs: Option<usize>,
    points: Option<usize>,
) -> Outcome {
    let task = task
        .or(config.network.as_ref().map(|n| n.task))
        .or(config.data.as_ref().map(|d| task_of(d.kind)))
        .unwrap_or(Task::Classification);
    let data = resolve_data(cli, config, task, data_dir, points)?;
    let task = if data_dir.is_some() { task_of(data.spec.kind) } else { task };
    let spec = config.network.clone().unwrap_or_else(|| {
        let classes = if task == Task::NormalEstimation { 0 } else { data.spec.num_classes() };
        NetworkSpec::desk(task, layer, classes)
    });
    let mut cfg = config.train.clone().unwrap_or(TrainConfig {
        seed: cli.seed,
        ..TrainConfig::default()
    });
    cfg.epochs = epochs.unwrap_or(cfg.epochs);
    let mut net = Network::build(&spec, &mut Rng::new(cli.seed))?;
    let report = train(&mut net, &data.train, Some(&data.test), &cfg)?;
    let json = to_json(&report);
    if let Some(dir) = out_dir(cli)? {
        net.save(dir.join("model.ckpt"))?;
        std::fs::write(dir.join("metrics.json"), &json)?;
        let mut csv = String::from("epoch,lr,loss,seconds\n");
        for e in &report.epochs {
            csv.push_str(&format!("{},{},{},{:.3}\n", e.epoch, e.lr, e.loss, e.seconds));
        }
        std::fs::write(dir.join("epochs.csv"), csv)?;
    }
    if cli.json {
        println!("{json}");
    } else {
        println!("{} parameters, schedule {}", report.param_count, report.schedule);
        for e in &report.epochs {
            println!("epoch {:>3}  lr {:.5}  loss {:.5}  {:.1}s", e.epoch, e.lr, e.loss, e.seconds);
        }
        if let Some(t) = &report.test {
            print_metrics(task, t);
        }
        println!("trained in {:.1}s", report.train_seconds);
    }
    Ok(())
}

fn print_metrics(task: Task, m: &fullpoint_core::harness::EvalMetrics) {
    match task {
        Task::NormalEstimation => println!(
            "test: mean angular error {:.2} deg over {} clouds",
            m.normal_angle_error.unwrap_or(f64::NAN),
            m.samples
        ),
        _ => println!(
            "test: OA {:.2}%  mAcc {:.2}%  mIoU {:.2}%  loss {:.4}  ({} clouds)",
            100.0 * m.oa,
            100.0 * m.macc,
            100.0 * m.miou,
            m.loss,
            m.samples
        ),
    }
}

fn parse_perturbation(s: &str) -> Result<Perturbation, Failure> {
    let bad = || Failure::Usage(format!("unknown perturbation `{s}`"));
    let (name, arg) = s.split_once(':').map_or((s, None), |(a, b)| (a, Some(b)));
    let num = |a: Option<&str>| -> Result<f64, Failure> { a.and_then(|v| v.parse().ok()).ok_or_else(bad) };
    Ok(match name {
        "none" => Perturbation::None,
        "permute" => Perturbation::Augment(AugmentSpec::permutation()),
        "density" => Perturbation::Density(arg.and_then(|v| v.parse().ok()).ok_or_else(bad)?),
        "scale" => Perturbation::Augment(AugmentSpec {
            scale: num(arg)?,
            ..AugmentSpec::identity()
        }),
        "translate" => Perturbation::Augment(AugmentSpec {
            translate: [num(arg)?; 3],
            ..AugmentSpec::identity()
        }),
        _ => return Err(bad()),
    })
}

fn load_model(path: &Path) -> Result<Network, Failure> {
    Network::load(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn cmd_eval(cli: &Cli, config: &RunConfig, model: &Path, data: Option<&Path>, perturb: &str) -> Outcome {
    let p = parse_perturbation(perturb)?;
    let net = load_model(model)?;
    let data = resolve_data(cli, config, net.spec.task, data, None)?;
    let m = evaluate(&net, &data.test, &p, cli.seed)?;
    if cli.json {
        println!("{}", to_json(&m));
    } else {
        print_metrics(net.spec.task, &m);
    }
    write_out(cli, "eval.json", &to_json(&m))
}

fn cmd_robustness(cli: &Cli, config: &RunConfig, model: &Path, data: Option<&Path>) -> Outcome {
    let net = load_model(model)?;
    if net.spec.task != Task::Classification {
        return Err(Failure::Usage("robustness runs on classification checkpoints".into()));
    }
    let data = resolve_data(cli, config, net.spec.task, data, None)?;
    let r = robustness(&net, &data.test, cli.seed)?;
    let mut csv = String::from("perturbation,OA(%),delta OA(pp)\n");
    csv.push_str(&format!("clean,{:.2},0.00\n", 100.0 * r.clean.oa));
    for row in &r.transforms {
        csv.push_str(&format!("{},{:.2},{:+.2}\n", row.perturbation, 100.0 * row.oa, row.delta_oa_pp));
    }
    for (n, oa) in &r.density {
        csv.push_str(&format!("density {n},{:.2},{:+.2}\n", 100.0 * oa, 100.0 * (oa - r.clean.oa)));
    }
    let json = to_json(&r);
    write_out(cli, "robustness.csv", &csv)?;
    write_out(cli, "robustness.json", &json)?;
    if cli.json {
        println!("{json}");
    } else {
        print!("{csv}");
        if r.monotonicity_violations.is_empty() {
            println!("density curve is monotone");
        } else {
            println!("density curve rises at {:?} points", r.monotonicity_violations);
        }
    }
    Ok(())
}

fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>, Failure> {
    s.split(',')
        .map(|v| v.trim().parse().map_err(|_| Failure::Usage(format!("bad grid value `{v}`"))))
        .collect()
}

fn parse_grid(kind: AblationKind, s: &str) -> Result<AblationGrid, Failure> {
    use fullpoint_core::encoding::{EncoderKind, PositionVariant};
    Ok(match kind {
        AblationKind::Sigma => AblationGrid::Sigma(parse_list(s)?),
        AblationKind::CMid => AblationGrid::CMid(s.split(';').map(parse_list).collect::<Result<_, _>>()?),
        AblationKind::SamplingBlock => AblationGrid::SamplingBlock(
            s.split(',')
                .map(|v| match v.trim().to_ascii_lowercase().as_str() {
                    "sads" => Ok(SamplingBlock::Sads),
                    "tds" => Ok(SamplingBlock::Tds),
                    "gds" => Ok(SamplingBlock::Gds),
                    o => Err(Failure::Usage(format!("unknown sampling block `{o}`"))),
                })
                .collect::<Result<_, _>>()?,
        ),
        AblationKind::PositionEncoding => AblationGrid::PositionEncoding(
            s.split(',')
                .map(|v| {
                    let (e, p) = v.trim().split_once(':').ok_or_else(|| {
                        Failure::Usage(format!("position-encoding cells look like mlp:fpe, got `{v}`"))
                    })?;
                    let enc = match e.to_ascii_lowercase().as_str() {
                        "mlp" => EncoderKind::LearnableMlp,
                        "sinusoidal" | "sin" => EncoderKind::Sinusoidal,
                        o => return Err(Failure::Usage(format!("unknown encoder `{o}`"))),
                    };
                    let var = match p.to_ascii_lowercase().as_str() {
                        "fpe" => PositionVariant::Fpe,
                        "lpe" => PositionVariant::Lpe,
                        "gpe" => PositionVariant::Gpe,
                        o => return Err(Failure::Usage(format!("unknown strategy `{o}`"))),
                    };
                    Ok((enc, var))
                })
                .collect::<Result<_, _>>()?,
        ),
    })
}

fn cmd_ablate(cli: &Cli, config: &RunConfig, what: &str, grid: Option<&str>, epochs: Option<usize>) -> Outcome {
    let kind: AblationKind = what.parse()?;
    let grid = match grid {
        Some(g) => parse_grid(kind, g)?,
        None => AblationGrid::standard(kind),
    };
    let mut cfg = AblationConfig::desk(kind, cli.seed);
    if let Some(n) = &config.network {
        cfg.network = n.clone();
    }
    if let Some(d) = &config.data {
        cfg.data = d.clone();
    }
    if let Some(t) = &config.train {
        cfg.train = t.clone();
    }
    cfg.train.epochs = epochs.unwrap_or(cfg.train.epochs);
    let table = ablate(&grid, &cfg)?;
    let csv = table.to_csv()?;
    let json = to_json(&table);
    write_out(cli, &format!("ablation_{kind}.csv"), &csv)?;
    write_out(cli, &format!("ablation_{kind}.json"), &json)?;
    if cli.json {
        println!("{json}");
    } else {
        print!("{csv}");
    }
    Ok(())
}

fn cmd_sample(
    cli: &Cli,
    input: &Path,
    method: SampleMethod,
    m: Option<usize>,
    k: Option<usize>,
    voxel_size: Option<f64>,
    output: Option<&Path>,
) -> Outcome {
    let cloud = read_cloud(input)?;
    let need = |name: &str| Failure::Usage(format!("this method needs --{name}"));
    match method {
        SampleMethod::Fps => {
            let m = m.ok_or_else(|| need("m"))?;
            let seed = canonical_seed(&cloud);
            let picks = farthest_point_sample(&cloud, m, seed)?;
            if let Some(o) = output {
                write_cloud(&cloud.select(&picks)?, o)?;
            }
            if cli.json {
                println!("{}", to_json(&picks));
            } else {
                println!("{}", picks.iter().map(usize::to_string).collect::<Vec<_>>().join(" "));
            }
        }
        SampleMethod::Knn => {
            let k = k.ok_or_else(|| need("k"))?;
            let nbr = knn_self(cloud.positions(), k, true)?;
            let rows: Vec<Vec<usize>> = (0..nbr.queries()).map(|i| nbr.row(i).to_vec()).collect();
            if cli.json {
                println!("{}", to_json(&rows));
            } else {
                for r in rows {
                    println!("{}", r.iter().map(usize::to_string).collect::<Vec<_>>().join(" "));
                }
            }
        }
        SampleMethod::Voxel => {
            let size = voxel_size.ok_or_else(|| need("voxel-size"))?;
            let down = voxel_downsample(&cloud, size)?;
            if let Some(o) = output {
                write_cloud(&down, o)?;
            }
            if cli.json {
                println!("{{\"input_points\": {}, \"output_points\": {}}}", cloud.len(), down.len());
            } else {
                println!("{} -> {} points", cloud.len(), down.len());
            }
        }
    }
    Ok(())
}
