use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use dlka::bench::{bench, BenchConfig, BENCH_HEADER};
use dlka::config::RunConfig;
use dlka::cost::{cost_report, optimal_dilation, BiasMode, CostQuery};
use dlka::gradcheck::GradCheckConfig;
use dlka::gradsuite::run_suite;
use dlka::io::{load_checkpoint, load_labels, load_tensor, save_checkpoint, save_raster, Raster};
use dlka::synth::{synth_generate, Dataset};
use dlka::train::{batch, csv_header, evaluate, Evaluation, Trainer};
use dlka::Error;

#[derive(Parser)]
#[command(name = "dlka", version, about = "Deformable large kernel attention networks for segmentation")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Seed for initialization, data order and synthetic data.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Run everything on one thread.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Worker threads for `bench`.
    #[arg(long, global = true, env = "DLKA_THREADS")]
    threads: Option<usize>,
}

impl Global {
    fn threads(&self) -> usize {
        if self.deterministic {
            1
        } else {
            self.threads.unwrap_or(1).max(1)
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Parameter and FLOP counts of decomposed (deformable) convolutions.
    Cost(CostArgs),
    /// Compare analytic gradients of every operator with finite differences.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic dataset as image and label rasters.
    Synth(SynthArgs),
    /// Train a network and write a checkpoint and a metric log.
    Train(TrainArgs),
    /// Score a checkpoint on held-out data.
    Eval(EvalArgs),
    /// Segment a raster with a checkpoint.
    Infer(InferArgs),
    /// Time inference with deformable layers on and off.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum BiasArg {
    Table,
    Eq3,
}

#[derive(Args)]
struct CostArgs {
    #[arg(long, default_value_t = 2)]
    rank: usize,
    #[arg(long, value_delimiter = ',', default_value = "32,64,128,256,512")]
    channels: Vec<usize>,
    #[arg(short = 'K', default_value_t = 21)]
    kernel: usize,
    #[arg(short = 'd', default_value_t = 3)]
    dilation: usize,
    #[arg(long, value_enum, default_value_t = BiasArg::Table)]
    bias_mode: BiasArg,
    /// Spatial extents for the FLOP column; unit extents when omitted.
    #[arg(long, value_delimiter = ',')]
    spatial: Option<Vec<usize>>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Only run cases whose name contains this.
    #[arg(long, default_value = "")]
    filter: String,
    /// Number of seeds, counting up from `--seed`.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    /// Fourth-order differences with step 1e-3 instead of central ones with step 1e-5.
    #[arg(long)]
    fine: bool,
}

#[derive(Args)]
struct DataArgs {
    /// Image raster `(N, 1, spatial..)`; synthetic data is generated when omitted.
    #[arg(long, requires = "labels")]
    images: Option<PathBuf>,
    /// Label raster matching `--images`.
    #[arg(long, requires = "images")]
    labels: Option<PathBuf>,
    /// Seed of the synthetic data; defaults to `--seed`.
    #[arg(long)]
    data_seed: Option<u64>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 3)]
    rank: usize,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    dims: Option<Vec<usize>>,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    /// Directory receiving `images.dlkv` and `labels.dlkv`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Configuration file; rank defaults apply when omitted.
    #[arg(long, conflicts_with = "resume")]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 3, conflicts_with_all = ["config", "resume"])]
    rank: usize,
    /// Train until this many epochs are complete.
    #[arg(long)]
    epochs: Option<u64>,
    /// Continue from a checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long, default_value = "checkpoint.dlkc")]
    checkpoint: PathBuf,
    /// Append per-epoch metrics here instead of printing them.
    #[arg(long)]
    log: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 3, conflicts_with = "config")]
    rank: usize,
    #[arg(long, value_delimiter = ',', default_value = "1")]
    batch_sizes: Vec<usize>,
    #[arg(long, default_value_t = 1000)]
    repetitions: usize,
    #[arg(long, default_value_t = 50)]
    warmup: usize,
    #[arg(long, value_delimiter = ',')]
    dims: Option<Vec<usize>>,
    /// Write the CSV here instead of printing it.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Divergence(_) => 4,
                _ => 3,
            })
        }
    }
}

fn run(cli: Cli) -> dlka::Result<()> {
    let g = &cli.global;
    match cli.command {
        Command::Cost(a) => cost(a),
        Command::Gradcheck(a) => gradcheck(a, g),
        Command::Synth(a) => synth(a, g),
        Command::Train(a) => train(a, g),
        Command::Eval(a) => eval(a, g),
        Command::Infer(a) => infer(a),
        Command::Bench(a) => run_bench(a, g),
    }
}

fn cost(a: CostArgs) -> dlka::Result<()> {
    let mode = match a.bias_mode {
        BiasArg::Table => BiasMode::Table,
        BiasArg::Eq3 => BiasMode::Eq3,
    };
    let spatial = a.spatial.unwrap_or_else(|| vec![1; a.rank]);
    let reports = a
        .channels
        .iter()
        .map(|&c| {
            let q = CostQuery::new(a.rank, c, a.kernel, a.dilation)
                .with_spatial(&spatial)
                .with_bias_mode(mode);
            cost_report(&q)
        })
        .collect::<dlka::Result<Vec<_>>>()?;

    if let Some(q) = reports.first().map(|r| &r.query) {
        println!(
            "rank {} K {} d {} offset kernels {}/{} bias {:?} spatial {:?}",
            q.rank, q.kernel, q.dilation, q.deform_kernels.0, q.deform_kernels.1, mode, spatial
        );
    }
    if let Ok((d_star, d_int)) = optimal_dilation(a.kernel) {
        println!("optimal dilation d* {d_star:.4}, best integer {d_int}");
    }
    let cols = ["channels", "std_conv", "decomposed", "deform_total", "offset_dw", "offset_dwd", "flops"];
    let rows: Vec<[u64; 7]> = reports
        .iter()
        .map(|r| {
            [
                r.query.channels as u64,
                r.params_std,
                r.params_decomposed,
                r.params_deform_total,
                r.params_offsets[0],
                r.params_offsets[1],
                r.flops,
            ]
        })
        .collect();
    let widths: Vec<usize> = (0..cols.len())
        .map(|i| rows.iter().map(|r| r[i].to_string().len()).chain([cols[i].len()]).max().unwrap_or(0))
        .collect();
    let line: Vec<String> = cols.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect();
    println!("{}", line.join("  "));
    for r in &rows {
        let line: Vec<String> = r.iter().zip(&widths).map(|(v, w)| format!("{v:>w$}")).collect();
        println!("{}", line.join("  "));
    }
    println!();
    println!("{}", cols.join(","));
    for r in &rows {
        let line: Vec<String> = r.iter().map(u64::to_string).collect();
        println!("{}", line.join(","));
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs, g: &Global) -> dlka::Result<()> {
    let cfg = if a.fine {
        GradCheckConfig::fine()
    } else {
        GradCheckConfig::default()
    };
    let seeds: Vec<u64> = (g.seed..g.seed + a.seeds).collect();
    let reports = run_suite(&a.filter, &seeds, &cfg)?;
    for r in &reports {
        println!("{r}");
    }
    let failed = reports.iter().filter(|r| !r.passed()).count();
    println!("{} of {} checks passed", reports.len() - failed, reports.len());
    if failed > 0 {
        return Err(Error::InvalidArgument(format!("{failed} gradient checks exceeded the tolerance")));
    }
    Ok(())
}

fn synth(a: SynthArgs, g: &Global) -> dlka::Result<()> {
    let defaults = RunConfig::for_rank(a.rank.clamp(2, 3));
    let n = a.samples.unwrap_or(defaults.data.samples);
    let dims = a.dims.unwrap_or(defaults.data.dims);
    let data = synth_generate(a.rank, n, &dims, a.classes, g.seed)?;
    std::fs::create_dir_all(&a.out)?;
    let all: Vec<usize> = (0..data.len()).collect();
    if all.is_empty() {
        return Err(Error::InvalidArgument("no samples requested".into()));
    }
    let (x, y) = batch(&data, &all)?;
    save_raster(&a.out.join("images.dlkv"), &Raster::Real(x))?;
    save_raster(&a.out.join("labels.dlkv"), &Raster::Labels(y))?;
    println!("wrote {n} samples of {dims:?} to {}", a.out.display());
    Ok(())
}

/// Dataset from files, or synthetic data matching `cfg`. Returns whether it
/// was generated.
fn dataset(d: &DataArgs, cfg: &RunConfig, g: &Global) -> dlka::Result<(Dataset, bool)> {
    match (&d.images, &d.labels) {
        (Some(i), Some(l)) => Ok((Dataset::from_batch(&load_tensor(i)?, &load_labels(l)?, cfg.net.num_classes)?, false)),
        _ => {
            let seed = d.data_seed.unwrap_or(g.seed);
            let data = synth_generate(cfg.net.rank, cfg.data.samples, &cfg.data.dims, cfg.net.num_classes, seed)?;
            Ok((data, true))
        }
    }
}

fn train(a: TrainArgs, g: &Global) -> dlka::Result<()> {
    let mut trainer = match (&a.resume, &a.config) {
        (Some(p), _) => Trainer::from_checkpoint(&load_checkpoint(p)?)?,
        (None, Some(p)) => Trainer::new(RunConfig::parse(&std::fs::read_to_string(p)?)?, g.seed)?,
        (None, None) => {
            if a.rank != 2 && a.rank != 3 {
                return Err(Error::Config(format!("rank must be 2 or 3, got {}", a.rank)));
            }
            Trainer::new(RunConfig::for_rank(a.rank), g.seed)?
        }
    };
    let target = a.epochs.unwrap_or(trainer.cfg.train.epochs as u64);
    let (data, _) = dataset(&a.data, &trainer.cfg, g)?;
    let split = data.split(trainer.seed);
    if split.train.is_empty() {
        return Err(Error::InvalidArgument("need at least one training sample".into()));
    }

    let mut log: Box<dyn Write> = match &a.log {
        Some(p) => {
            let fresh = std::fs::metadata(p).map(|m| m.len() == 0).unwrap_or(true);
            let mut f = OpenOptions::new().create(true).append(true).open(p)?;
            if fresh {
                writeln!(f, "{}", csv_header(trainer.cfg.net.num_classes))?;
            }
            Box::new(f)
        }
        None => {
            println!("{}", csv_header(trainer.cfg.net.num_classes));
            Box::new(std::io::stdout())
        }
    };
    while trainer.epoch < target {
        let entry = trainer.run_epoch(&data, &split)?;
        writeln!(log, "{}", entry.csv_row())?;
        log.flush()?;
    }
    save_checkpoint(&a.checkpoint, &trainer.checkpoint())?;
    eprintln!("saved {} after epoch {}", a.checkpoint.display(), trainer.epoch);
    Ok(())
}

fn print_eval(e: &Evaluation) {
    let mut head = String::from("dice_mean");
    let mut row = format!("{:.6}", e.dice_mean);
    for (c, d) in e.dice.iter().enumerate() {
        head.push_str(&format!(",dice_c{}", c + 1));
        row.push_str(&format!(",{d:.6}"));
    }
    head.push_str(",hd95_mean");
    match e.hd95_mean {
        Some(h) => row.push_str(&format!(",{h:.6}")),
        None => row.push_str(",nan"),
    }
    println!("{head}\n{row}");
}

fn eval(a: EvalArgs, g: &Global) -> dlka::Result<()> {
    let t = Trainer::from_checkpoint(&load_checkpoint(&a.checkpoint)?)?;
    let (data, generated) = dataset(&a.data, &t.cfg, g)?;
    let idx = if generated {
        data.split(t.seed).val
    } else {
        (0..data.len()).collect()
    };
    print_eval(&evaluate(&t.net, &t.params, &data, &idx, t.cfg.train.batch_size)?);
    Ok(())
}

fn infer(a: InferArgs) -> dlka::Result<()> {
    let t = Trainer::from_checkpoint(&load_checkpoint(&a.checkpoint)?)?;
    let pred = t.predict(&load_tensor(&a.input)?)?;
    eprintln!("wrote labels {:?} to {}", pred.shape(), a.output.display());
    save_raster(&a.output, &Raster::Labels(pred))
}

fn run_bench(a: BenchArgs, g: &Global) -> dlka::Result<()> {
    let cfg = match &a.config {
        Some(p) => RunConfig::parse(&std::fs::read_to_string(p)?)?,
        None if a.rank == 2 || a.rank == 3 => RunConfig::for_rank(a.rank),
        None => return Err(Error::Config(format!("rank must be 2 or 3, got {}", a.rank))),
    };
    let bc = BenchConfig {
        batch_sizes: a.batch_sizes,
        repetitions: a.repetitions,
        warmup: a.warmup,
        threads: g.threads(),
        dims: a.dims.unwrap_or(cfg.data.dims),
        seed: g.seed,
    };
    let rows = bench(&cfg.net, &bc)?;
    let mut text = format!("{BENCH_HEADER}\n");
    for r in &rows {
        text.push_str(&r.csv_row());
        text.push('\n');
    }
    match &a.out {
        Some(p) => std::fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}
