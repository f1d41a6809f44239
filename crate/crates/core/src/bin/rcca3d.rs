use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rcca3d::bench::run_bench;
use rcca3d::cost::{
    nonlocal_cost, rcca_total_cost, render_checks, render_reports, reproduce_tables, ReportFormat, StageGeometry,
};
use rcca3d::influence::{encode_pgm, frame_maps, influence_magnitudes};
use rcca3d::init::SeededInit;
use rcca3d::io::{read_tensor, read_weights, weights_fit_variant, write_tensor, write_weights, AnyFeatureMap};
use rcca3d::verify::{run_verify, Category};
use rcca3d::{
    rcca_forward, ChannelFraction, Error, FeatureMap4D, Grid, ModuleWeights, Position, RccaConfig, RccaWeights,
    Scalar, Variant,
};

const EXIT_CHECK: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_IO: u8 = 3;

#[derive(Parser)]
#[command(name = "rcca3d", version, about = "3D criss-cross attention: verification, cost model, benchmarks")]
struct Cli {
    /// Worker threads for forward passes.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the self-check suite.
    Verify {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Restrict to one category (paths, softmax, oracle, sparsity, identity, reachability, gradients, cost).
        #[arg(long)]
        only: Option<Category>,
    },
    /// Print closed-form cost reports.
    Cost(CostArgs),
    /// Time criss-cross and non-local forwards at the same dims.
    Bench {
        #[arg(long, value_parser = parse_dims, default_value = "64,8,28,28")]
        dims: [usize; 4],
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 3)]
        seed: u64,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Apply RCCA to a CCT1 tensor file.
    Run {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Weights file; seeded random weights are used when absent.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Override gamma.
        #[arg(long)]
        gamma: Option<f64>,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Write finite-difference influence maps as P5 graymaps, one per frame and recurrence count.
    Influence {
        #[arg(long, value_parser = parse_dims, default_value = "4,3,8,8")]
        dims: [usize; 4],
        /// Source position as t,h,w.
        #[arg(long, value_parser = parse_position, default_value = "1,4,4")]
        source: Position,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        r: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value = "a")]
        variant: Variant,
        #[arg(long, default_value = "1/4")]
        cd: ChannelFraction,
    },
    /// Write a seeded random tensor.
    RandomTensor {
        #[arg(long, value_parser = parse_dims)]
        dims: [usize; 4],
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Scalar width in bytes: 4 or 8.
        #[arg(long, default_value_t = 4)]
        precision: u8,
        #[arg(long)]
        output: PathBuf,
    },
    /// Write seeded random module weights.
    InitWeights {
        #[arg(long)]
        channels: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        precision: u8,
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value = "a")]
        variant: Variant,
        #[arg(long, default_value = "1/4")]
        cd: ChannelFraction,
    },
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long, default_value = "a")]
    variant: Variant,
    #[arg(long, default_value_t = 3)]
    r: usize,
    #[arg(long, default_value = "1/4")]
    cd: ChannelFraction,
}

impl ModelArgs {
    fn config(&self) -> rcca3d::Result<RccaConfig> {
        RccaConfig::new(self.variant, self.r, self.cd)
    }
}

#[derive(Args)]
struct CostArgs {
    #[arg(long)]
    geometry: Option<String>,
    #[arg(long, default_value_t = 3)]
    r: u64,
    #[arg(long, default_value = "1/4")]
    cd: ChannelFraction,
    #[arg(long, default_value = "a")]
    variant: Variant,
    #[arg(long, default_value = "text")]
    format: ReportFormat,
    /// Report the non-local block instead of RCCA.
    #[arg(long)]
    nl: bool,
    /// Print every reproduced table cell with pass/fail.
    #[arg(long)]
    tables: bool,
}

fn parse_dims(s: &str) -> Result<[usize; 4], String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    let dims: [usize; 4] = parts.try_into().map_err(|_| "expected C,T,H,W".to_string())?;
    if dims.contains(&0) {
        return Err("dims must be positive".into());
    }
    Ok(dims)
}

fn parse_position(s: &str) -> Result<Position, String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [t, h, w] => Ok(Position::new(t, h, w)),
        _ => Err("expected t,h,w".into()),
    }
}

fn grid_of(dims: [usize; 4]) -> rcca3d::Result<Grid> {
    Grid::new(dims[1], dims[2], dims[3])
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) | Error::Format(_) => EXIT_IO,
        Error::NonFinite(_) => EXIT_CHECK,
        Error::Shape { .. } | Error::InvalidDims(_) | Error::OutOfRange { .. } | Error::Config(_) => EXIT_USAGE,
    }
}

fn cmd_verify(seed: u64, only: Option<Category>) -> u8 {
    let outcomes = run_verify(seed, only);
    let mut failed = 0;
    for o in &outcomes {
        let mark = if o.passed { "pass" } else { "FAIL" };
        println!("[{mark}] {:<13} {} ({})", o.category.to_string(), o.name, o.detail);
        failed += usize::from(!o.passed);
    }
    println!("{} checks, {} failed", outcomes.len(), failed);
    if failed == 0 {
        0
    } else {
        EXIT_CHECK
    }
}

fn cmd_cost(args: &CostArgs) -> rcca3d::Result<u8> {
    if args.tables {
        let checks = reproduce_tables();
        print!("{}", render_checks(&checks, args.format));
        let failed = checks.iter().any(|c| c.gated && !c.passed());
        return Ok(if failed { EXIT_CHECK } else { 0 });
    }
    let geoms = match &args.geometry {
        Some(name) => vec![StageGeometry::by_name(name)?],
        None => StageGeometry::builtin().to_vec(),
    };
    let mut rows = Vec::new();
    for g in &geoms {
        if args.nl {
            rows.push((format!("{} non-local", g.name), nonlocal_cost(g)));
        } else {
            let report = rcca_total_cost(g, args.r, args.cd, args.variant)?;
            rows.push((format!("{} {} R={} C_d={}", g.name, args.variant, args.r, args.cd), report));
        }
    }
    print!("{}", render_reports(&rows, args.format));
    if args.format == ReportFormat::Text {
        for (label, r) in &rows {
            println!("{label}: delta params {:.2}M, total {:.1}G / {:.2}M", r.params as f64 / 1e6, r.total_flops() / 1e9, r.total_params() / 1e6);
        }
        if args.nl {
            println!("note: the non-local reference figure matches the MAC count (total G/MAC column)");
        }
    }
    Ok(0)
}

fn cmd_bench(dims: [usize; 4], k: usize, seed: u64, model: &ModelArgs) -> rcca3d::Result<u8> {
    let cfg = model.config()?;
    let report = run_bench(dims[0], grid_of(dims)?, &cfg, k, seed)?;
    println!("dims {:?}, median of {k}", report.dims);
    println!("cca3d_forward     {:>10.3} ms", report.cca.as_secs_f64() * 1e3);
    println!("rcca_forward R={} {:>10.3} ms", cfg.recurrences, report.rcca.as_secs_f64() * 1e3);
    println!("nonlocal_forward  {:>10.3} ms", report.nonlocal.as_secs_f64() * 1e3);
    println!("speedup (non-local / rcca) {:.2}", report.speedup());
    println!("checksums {:?}", report.checksums);
    Ok(0)
}

fn run_typed<S: Scalar>(
    x: FeatureMap4D<S>,
    output: &PathBuf,
    weights: Option<&PathBuf>,
    seed: u64,
    gamma: Option<f64>,
    cfg: &RccaConfig,
) -> rcca3d::Result<()> {
    let module: ModuleWeights<S> = match weights {
        Some(path) => {
            let w = read_weights::<S>(path)?;
            weights_fit_variant(&w, cfg.variant)?;
            w
        }
        None => {
            let inner = cfg.channel_fraction.inner_channels(x.channels());
            SeededInit::new(seed).module_weights(cfg.variant, x.channels(), inner)
        }
    };
    let module = match gamma {
        Some(g) => module.with_gamma(S::of(g)),
        None => module,
    };
    let (y, _) = rcca_forward(&x, cfg, &RccaWeights::shared(module))?;
    write_tensor(output, &y)
}

fn cmd_influence(
    dims: [usize; 4],
    source: Position,
    rs: &[usize],
    seed: u64,
    out_dir: &PathBuf,
    variant: Variant,
    cd: ChannelFraction,
) -> rcca3d::Result<u8> {
    let grid = grid_of(dims)?;
    grid.check(source)?;
    fs::create_dir_all(out_dir)?;
    let mut init = SeededInit::new(seed);
    let x = init.feature_map::<f64>(dims[0], grid);
    let module = init.module_weights::<f64>(variant, dims[0], cd.inner_channels(dims[0]));
    let w = RccaWeights::shared(module);
    for &r in rs {
        let cfg = RccaConfig::new(variant, r, cd)?;
        let mags = influence_magnitudes(&x, &cfg, &w, source, 1e-4)?;
        let maps = frame_maps(grid, &mags);
        let mut nonzero = 0;
        for (t, map) in maps.iter().enumerate() {
            nonzero += map.iter().filter(|&&p| p != 0).count();
            let path = out_dir.join(format!("influence_r{r}_t{t}.pgm"));
            fs::write(&path, encode_pgm(grid.w, grid.h, map))?;
        }
        println!("R={r}: {nonzero}/{} positions influenced by {source}", grid.len());
    }
    Ok(0)
}

fn dispatch(cli: Cli) -> rcca3d::Result<u8> {
    match cli.command {
        Command::Verify { seed, only } => Ok(cmd_verify(seed, only)),
        Command::Cost(args) => cmd_cost(&args),
        Command::Bench { dims, k, seed, model } => cmd_bench(dims, k, seed, &model),
        Command::Run {
            input,
            output,
            weights,
            seed,
            gamma,
            model,
        } => {
            let cfg = model.config()?;
            match read_tensor(&input).inspect_err(|_| eprintln!("cannot read {}", input.display()))? {
                AnyFeatureMap::F32(x) => run_typed(x, &output, weights.as_ref(), seed, gamma, &cfg)?,
                AnyFeatureMap::F64(x) => run_typed(x, &output, weights.as_ref(), seed, gamma, &cfg)?,
            }
            Ok(0)
        }
        Command::Influence {
            dims,
            source,
            r,
            seed,
            out_dir,
            variant,
            cd,
        } => cmd_influence(dims, source, &r, seed, &out_dir, variant, cd),
        Command::RandomTensor {
            dims,
            seed,
            precision,
            output,
        } => {
            let grid = grid_of(dims)?;
            let mut init = SeededInit::new(seed);
            match precision {
                4 => write_tensor(&output, &init.feature_map::<f32>(dims[0], grid))?,
                8 => write_tensor(&output, &init.feature_map::<f64>(dims[0], grid))?,
                p => return Err(Error::Config(format!("precision must be 4 or 8, got {p}"))),
            }
            Ok(0)
        }
        Command::InitWeights {
            channels,
            seed,
            precision,
            gamma,
            output,
            variant,
            cd,
        } => {
            let inner = cd.inner_channels(channels);
            let module = SeededInit::new(seed).module_weights::<f64>(variant, channels, inner);
            let module = match gamma {
                Some(g) => module.with_gamma(g),
                None => module,
            };
            match precision {
                4 => write_weights(&output, &module.cast::<f32>())?,
                8 => write_weights(&output, &module)?,
                p => return Err(Error::Config(format!("precision must be 4 or 8, got {p}"))),
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    if cli.threads == 0 {
        eprintln!("error: --threads must be at least 1");
        return ExitCode::from(EXIT_USAGE);
    }
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
        eprintln!("error: {e}");
        return ExitCode::from(EXIT_USAGE);
    }
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
