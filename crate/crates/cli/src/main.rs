use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ssr::aulm::{solve_network, IterationRecord, NetworkSolve};
use ssr::nn::{evaluate, train, Dataset, Network};
use ssr::prune::{
    compact_all, default_lambda_grid, finetune, mask_from_scores, prunable_layers, score_apoz, score_filter_l1,
    score_random, sensitivity_sweep, PruneMask,
};
use ssr::report::{
    bench_inference, filter_string, load_checkpoint, load_mnist, save_checkpoint, to_text, write_csv, PruneReport,
    RunConfig, RunManifest, TrainingState,
};
use ssr::{Error, Result as SsrResult};

#[derive(Parser, Debug)]
#[command(name = "ssr", version, about = "Structured-sparsity filter pruning for LeNet-style networks")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides `out_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the baseline network from scratch, or resume a checkpoint.
    Train {
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Run the solver over every configured λ group.
    Solve {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Apply masks or a baseline criterion and compact the network.
    Prune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "masks")]
        criterion: Criterion,
        /// Masks written by `solve`.
        #[arg(long)]
        masks: Option<PathBuf>,
        /// Filters to keep per prunable layer, e.g. `2,8,77`.
        #[arg(long, value_delimiter = ',')]
        keep: Vec<usize>,
    },
    /// Retrain every layer of a pruned network at the fine-tune schedule.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Top-1 error on the test set.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Median forward-pass latency.
    Bench {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also time this network and print the speedup against it.
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Solve one layer per λ on the grid and record the error without fine-tuning.
    Sensitivity {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        layer: String,
        #[arg(long, value_delimiter = ',')]
        grid: Vec<f32>,
    },
    /// Compare a pruned network with its baseline as one table row.
    Report {
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        pruned: PathBuf,
        #[arg(long)]
        method: Option<String>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Criterion {
    Masks,
    Random,
    FilterL1,
    Apoz,
}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
    command: String,
}

impl Ctx {
    fn new(common: &Common, command: &str) -> anyhow::Result<Self> {
        let mut cfg = match &common.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
            None => RunConfig::default(),
        };
        if let Some(seed) = common.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &common.out {
            cfg.out_dir = out.clone();
        }
        std::fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
        Ok(Self {
            out: cfg.out_dir.clone(),
            cfg,
            command: command.to_string(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn train_set(&self) -> SsrResult<Dataset> {
        load_mnist(&self.cfg.data.train_images, &self.cfg.data.train_labels)
    }

    fn test_set(&self) -> SsrResult<Dataset> {
        load_mnist(&self.cfg.data.test_images, &self.cfg.data.test_labels)
    }

    /// Saves a checkpoint plus a manifest next to it.
    fn save(&self, net: &Network, state: &TrainingState, name: &str) -> anyhow::Result<PathBuf> {
        let path = self.path(name);
        save_checkpoint(net, state, &path)?;
        let manifest = RunManifest::new(&self.command, &self.cfg, &path)?;
        manifest.write(path.with_extension("manifest.json"))?;
        println!("wrote {} ({})", path.display(), net.spec().filter_counts());
        Ok(path)
    }

    fn state(&self, stage: &str, epochs: usize) -> TrainingState {
        TrainingState {
            stage: stage.into(),
            epochs,
            seed: self.cfg.seed,
            ..Default::default()
        }
    }
}

/// The error chain joined with `: `, leaving out causes the previous
/// message already quotes.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if out.contains(&text) {
            continue;
        }
        if !out.is_empty() {
            out.push_str(": ");
        }
        out.push_str(&text);
    }
    out
}

fn load(path: &Path) -> anyhow::Result<(Network, TrainingState)> {
    let (net, header) = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    Ok((net, header.state))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let ctx = Ctx::new(&cli.common, &std::env::args().collect::<Vec<_>>().join(" "))?;
    let cfg = &ctx.cfg;
    match cli.command {
        Command::Train { resume, epochs } => {
            let epochs = epochs.unwrap_or(cfg.train_epochs);
            let (mut net, done) = match resume {
                Some(p) => {
                    let (net, state) = load(&p)?;
                    (net, state.epochs)
                }
                None => (Network::init_scaled(cfg.network.spec(), cfg.seed, cfg.init)?, 0),
            };
            let data = ctx.train_set()?;
            train(&mut net, &data, &cfg.train, epochs, cfg.seed.wrapping_add(done as u64), |e, loss| {
                println!("epoch {} loss {loss:.4}", done + e + 1)
            })?;
            let err = evaluate(&net, &ctx.test_set()?)?.top1_error;
            println!("test top-1 error {:.2}%", 100.0 * err);
            let mut state = ctx.state("baseline", done + epochs);
            state.notes.insert("top1_error".into(), format!("{err:.6}"));
            ctx.save(&net, &state, "baseline.ckpt")?;
        }
        Command::Solve { checkpoint } => {
            let (net, _) = load(&checkpoint)?;
            let data = ctx.train_set()?;
            let groups = cfg.lambdas.groups();
            for (g, lambdas) in groups.iter().enumerate() {
                let suffix = if groups.len() == 1 { String::new() } else { format!("_g{g}") };
                let solve = solve_network(&net, lambdas, cfg.regularizer, &cfg.aulm, &data, cfg.seed)?;
                check_divergence(&solve)?;
                let trace: Vec<IterationRecord> = solve.layers.iter().flat_map(|l| l.trace.clone()).collect();
                write_csv(&trace, ctx.path(&format!("trace{suffix}.csv")))?;
                std::fs::write(ctx.path(&format!("masks{suffix}.json")), serde_json::to_string_pretty(&solve.masks)?)?;
                let mut state = ctx.state("solved", 0);
                state.notes.insert("regularizer".into(), cfg.regularizer.to_string());
                state.notes.insert("lambdas".into(), format!("{lambdas:?}"));
                state.notes.insert(
                    "solver_iterations".into(),
                    solve.layers.iter().map(|l| l.iterations.to_string()).collect::<Vec<_>>().join("/"),
                );
                state
                    .notes
                    .insert("solver_converged".into(), solve.layers.iter().all(|l| l.converged).to_string());
                println!("λ {lambdas:?} → {}", solve.net.spec().filter_counts());
                ctx.save(&solve.net, &state, &format!("solved{suffix}.ckpt"))?;
            }
        }
        Command::Prune {
            checkpoint,
            criterion,
            masks,
            keep,
        } => {
            let (net, state) = load(&checkpoint)?;
            let layers = prunable_layers(&net);
            let pruned = match criterion {
                Criterion::Masks => {
                    let path = masks.ok_or_else(|| usage("--masks is required with --criterion masks"))?;
                    let masks: Vec<PruneMask> = serde_json::from_str(&std::fs::read_to_string(&path)?)
                        .map_err(|e| Error::Format(ssr::FormatError::Header(e.to_string())))?;
                    if already_applied(&net, &masks) {
                        net.clone()
                    } else {
                        compact_all(&net, &masks)?
                    }
                }
                c => {
                    if keep.len() != layers.len() {
                        return Err(usage(&format!(
                            "--keep needs {} counts ({})",
                            layers.len(),
                            layers.join(", ")
                        )));
                    }
                    let probe = if c == Criterion::Apoz { Some(ctx.train_set()?.take(1000)) } else { None };
                    let mut work = net.clone();
                    for (i, (layer, &k)) in layers.iter().zip(&keep).enumerate() {
                        let score = match c {
                            Criterion::Random => score_random(&work, layer, cfg.seed.wrapping_add(i as u64))?,
                            Criterion::FilterL1 => score_filter_l1(&work, layer)?,
                            _ => score_apoz(&work, layer, probe.as_ref().expect("probe loaded"))?,
                        };
                        work = compact_all(&work, &[mask_from_scores(&score, k)?])?;
                    }
                    work
                }
            };
            let mut out_state = ctx.state("pruned", 0);
            out_state.notes = state.notes;
            out_state.notes.insert("criterion".into(), format!("{criterion:?}").to_lowercase());
            ctx.save(&pruned, &out_state, "pruned.ckpt")?;
        }
        Command::Finetune { checkpoint, epochs } => {
            let (mut net, state) = load(&checkpoint)?;
            let epochs = epochs.unwrap_or(cfg.finetune_epochs);
            let data = ctx.train_set()?;
            let losses = finetune(&mut net, &data, &cfg.finetune, epochs, cfg.seed)?;
            for (e, l) in losses.iter().enumerate() {
                println!("epoch {} loss {l:.4}", e + 1);
            }
            let err = evaluate(&net, &ctx.test_set()?)?.top1_error;
            println!("test top-1 error {:.2}%", 100.0 * err);
            let mut out_state = ctx.state("finetuned", epochs);
            out_state.notes = state.notes;
            out_state.notes.insert("top1_error".into(), format!("{err:.6}"));
            ctx.save(&net, &out_state, "finetuned.ckpt")?;
        }
        Command::Eval { checkpoint } => {
            let (net, _) = load(&checkpoint)?;
            let ev = evaluate(&net, &ctx.test_set()?)?;
            println!(
                "{}  top-1 error {:.2}%  mean loss {:.4}",
                net.spec().filter_counts(),
                100.0 * ev.top1_error,
                ev.mean_loss
            );
            std::fs::write(ctx.path("eval.json"), serde_json::to_string_pretty(&ev)?)?;
        }
        Command::Bench { checkpoint, baseline } => {
            let (net, _) = load(&checkpoint)?;
            let stats = bench_inference(&net, &cfg.bench, cfg.seed)?;
            println!(
                "{}  median {:.3} ms  iqr {:.3} ms  batch {}  threads {}",
                net.spec().filter_counts(),
                stats.median_ms,
                stats.iqr_ms,
                stats.batch_size,
                stats.threads
            );
            let mut all = vec![stats.clone()];
            if let Some(b) = baseline {
                let (base, _) = load(&b)?;
                let bs = bench_inference(&base, &cfg.bench, cfg.seed)?;
                println!("baseline median {:.3} ms  speedup {:.2}x", bs.median_ms, stats.speedup_over(&bs));
                all.push(bs);
            }
            write_csv(&all, ctx.path("bench.csv"))?;
        }
        Command::Sensitivity { checkpoint, layer, grid } => {
            let (net, _) = load(&checkpoint)?;
            let grid = if grid.is_empty() { default_lambda_grid() } else { grid };
            let train_set = ctx.train_set()?;
            let test_set = ctx.test_set()?;
            let curve = sensitivity_sweep(&net, &layer, &grid, cfg.regularizer, &cfg.aulm, &train_set, &test_set, cfg.seed)?;
            for p in &curve {
                println!("λ {:.2}  kept {:>4}  top-1 error {:.2}%", p.lambda, p.kept, 100.0 * p.top1_error);
            }
            write_csv(&curve, ctx.path(&format!("sensitivity_{layer}.csv")))?;
        }
        Command::Report { baseline, pruned, method } => {
            let (base, _) = load(&baseline)?;
            let (net, state) = load(&pruned)?;
            let names = prunable_layers(&base);
            let names: Vec<&str> = names.iter().map(String::as_str).collect();
            let method = method.unwrap_or_else(|| match state.notes.get("regularizer") {
                Some(r) => format!("SSR-{}", r.to_uppercase()),
                None => "pruned".into(),
            });
            let mut report = PruneReport::new(method, base.spec(), net.spec(), &names)?;
            let test_set = ctx.test_set()?;
            report.top1_error_before = evaluate(&base, &test_set)?.top1_error;
            report.top1_error_after = evaluate(&net, &test_set)?.top1_error;
            let bs = bench_inference(&base, &cfg.bench, cfg.seed)?;
            let ps = bench_inference(&net, &cfg.bench, cfg.seed)?;
            report.set_latency(&bs, &ps);
            if let Some(it) = state.notes.get("solver_iterations") {
                report.solver_iterations = it.clone();
            }
            if let Some(c) = state.notes.get("solver_converged") {
                report.solver_converged = c == "true";
            }
            report.verify(base.spec(), net.spec())?;
            debug_assert_eq!(report.filters, filter_string(net.spec(), &names)?);
            let text = to_text(std::slice::from_ref(&report));
            print!("{text}");
            std::fs::write(ctx.path("report.txt"), &text)?;
            write_csv(&[report], ctx.path("report.csv"))?;
        }
    }
    Ok(())
}

/// `solve` writes compacted networks; their masks match the widths already.
fn already_applied(net: &Network, masks: &[PruneMask]) -> bool {
    masks.iter().all(|m| {
        net.spec()
            .index_of(&m.layer)
            .ok()
            .and_then(|i| net.spec().width(i))
            .is_some_and(|w| w == m.kept())
    })
}

/// A solve that hit the iteration cap with residuals larger than where they
/// started is a numeric failure.
fn check_divergence(solve: &NetworkSolve) -> anyhow::Result<()> {
    for layer in &solve.layers {
        if layer.converged {
            continue;
        }
        if let (Some(first), Some(last)) = (layer.trace.first(), layer.trace.last()) {
            let diverged = !last.primal_residual.is_finite() || last.primal_residual > 10.0 * first.primal_residual.max(1e-6);
            if diverged {
                return Err(Error::Numeric(format!(
                    "solver residuals on `{}` grew from {:.3e} to {:.3e} without converging",
                    layer.mask.layer, first.primal_residual, last.primal_residual
                ))
                .into());
            }
        }
    }
    Ok(())
}

#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: &str) -> anyhow::Error {
    anyhow!(Usage(msg.to_string()))
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() {
        return 1;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::Numeric(_)) => 3,
        Some(Error::Format(_) | Error::Io(_)) => 2,
        Some(Error::Input(_) | Error::Constraint(_) | Error::Shape(_)) => 1,
        None if err.downcast_ref::<std::io::Error>().is_some() => 2,
        None if err.downcast_ref::<serde_json::Error>().is_some() => 2,
        None => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
