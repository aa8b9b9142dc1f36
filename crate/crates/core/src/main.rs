use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use mxlab::autodiff::ParamStore;
use mxlab::baselines::InterpMethod;
use mxlab::check;
use mxlab::config::{RunConfig, RunManifest, UplinkInput};
use mxlab::container::{load_trace, save_trace, write_container, Record};
use mxlab::eval::{run_sweep, Models, SweepKind};
use mxlab::pilots::{build_srs_pattern, SrsPattern};
use mxlab::sfcen::SfcenConfig;
use mxlab::sim::{generate_channel_trace, ChannelTrace};
use mxlab::svg::nmse_chart;
use mxlab::training::{
    make_windows, split_windows, train_dcen, train_sfcen, train_tudcen, train_udccn, TrainReport, TudcenParams, UplinkSource,
    Window,
};
use mxlab::tudcen::{extrapolate_batch, udccn_forward};
use mxlab::{Error, Result};

/// Stored checkpoints are trained and evaluated at 32 bits.
type W = f32;

#[derive(Parser)]
#[command(name = "mxlab", version, about = "Channel-estimation lab: datasets, training, sweeps and self-checks")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    /// Key-value run configuration (a saved manifest also works).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "runs")]
    out_dir: PathBuf,
    /// Use the reduced-dimension preset instead of the full-size one.
    #[arg(long, global = true)]
    desk_scale: bool,
    #[arg(long, global = true)]
    no_plots: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate channel traces.
    Gen,
    /// Train one network or the whole chain.
    Train {
        #[arg(value_enum)]
        model: Model,
    },
    /// Evaluate a sweep (or all of them) on the test split.
    Eval {
        /// freq_cr | spat_cr | snr | velocity | slot_index | all
        sweep: String,
        /// Also write the pipeline rollout on the test split to rollout.mxl.
        #[arg(long)]
        dump_rollout: bool,
    },
    /// Run the invariant and property suite.
    Check,
    /// Print the resolved configuration.
    ShowConfig,
}

#[derive(Clone, Copy, ValueEnum)]
enum Model {
    Sfcen,
    Udccn,
    Dcen,
    All,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            if !path.exists() {
                return Err(Error::MissingFile(path.clone()));
            }
            let mut text = std::fs::read_to_string(path)?;
            if cli.desk_scale {
                // Same line count, so diagnostics still point at the file.
                text = text
                    .lines()
                    .map(|l| if l.split('=').next().is_some_and(|k| k.trim() == "preset") { "preset = desk" } else { l })
                    .collect::<Vec<_>>()
                    .join("\n");
                if !text.lines().any(|l| l.trim() == "preset = desk") {
                    text = format!("{text}\npreset = desk");
                }
            }
            RunConfig::parse(&text, path)?
        }
        None if cli.desk_scale => RunConfig::desk(),
        None => RunConfig::full(),
    };
    if let Some(s) = cli.seed {
        cfg.trace_seed = s;
        cfg.pilot_seed = s;
        cfg.train_sfcen.seed = s;
        cfg.train_tudcen.seed = s;
        cfg.eval_seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn trace_path(out: &Path, k: usize) -> PathBuf {
    out.join("traces").join(format!("trace_{k:03}.mxl"))
}

fn write_manifest(out: &Path, cmd: &str, m: &RunManifest) -> Result<()> {
    let p = out.join(format!("manifest.{cmd}.txt"));
    m.save(&p)?;
    println!("wrote {}", p.display());
    Ok(())
}

fn cmd_gen(cfg: &RunConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out.join("traces"))?;
    let mut m = RunManifest::new(cfg.clone());
    for k in 0..cfg.n_traces {
        let t = generate_channel_trace(&cfg.sys, &cfg.trace_model(k))?;
        let p = trace_path(out, k);
        save_trace(&p, &t)?;
        m.add_file(&format!("trace_{k:03}"), &p);
    }
    println!(
        "generated {} traces of shape {:?}",
        cfg.n_traces,
        [cfg.sys.n_subframes, cfg.sys.n_slot, cfg.sys.n_tx, cfg.sys.n_rx, cfg.sys.n_sc]
    );
    write_manifest(out, "gen", &m)
}

fn load_traces(cfg: &RunConfig, out: &Path, range: std::ops::Range<usize>) -> Result<Vec<ChannelTrace>> {
    let want = [cfg.sys.n_subframes, cfg.sys.n_slot, cfg.sys.n_tx, cfg.sys.n_rx, cfg.sys.n_sc];
    range
        .map(|k| {
            let p = trace_path(out, k);
            let t = load_trace(&p)?;
            if t.uplink.shape() != want {
                return Err(Error::InvalidConfig(format!("{} has shape {:?}, config expects {want:?}", p.display(), t.uplink.shape())));
            }
            Ok(t)
        })
        .collect()
}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
    pattern: SrsPattern,
    net: SfcenConfig,
}

impl Ctx {
    fn new(cfg: RunConfig, out: &Path) -> Result<Self> {
        let pattern = build_srs_pattern(&cfg.sys, cfg.comb, cfg.r_s, cfg.pilot_seed)?;
        let mut net = SfcenConfig::new(&cfg.sys, &pattern, cfg.sfcen_d_rep, cfg.sfcen_heads)?;
        net.p_attn = cfg.sfcen_p_attn;
        net.p_seg = cfg.sfcen_p_seg;
        Ok(Ctx { cfg, out: out.to_path_buf(), pattern, net })
    }

    fn ckpt(&self, name: &str) -> PathBuf {
        self.out.join(format!("{name}.ckpt"))
    }

    fn load_ckpt(&self, name: &str) -> Result<Option<ParamStore<W>>> {
        let p = self.ckpt(name);
        if p.exists() {
            ParamStore::load(&p).map(Some)
        } else {
            Ok(None)
        }
    }

    fn save(&self, m: &mut RunManifest, name: &str, store: &ParamStore<W>, report: &TrainReport) -> Result<()> {
        let (c, l) = (self.ckpt(name), self.out.join(format!("{name}_loss.csv")));
        store.save(&c)?;
        report.write_csv(&l)?;
        m.add_file(&format!("{name}_ckpt"), &c);
        m.add_file(&format!("{name}_loss"), &l);
        println!("{name}: best epoch {} valid {:.6e}", report.best_epoch, report.best_valid);
        Ok(())
    }
}

fn cmd_train(ctx: &Ctx, model: Model) -> Result<()> {
    let cfg = &ctx.cfg;
    let (a, b, c) = cfg.train_sfcen.split;
    let traces = load_traces(cfg, &ctx.out, 0..a + b + c)?;
    let mut manifest = RunManifest::new(cfg.clone());
    let want_sfcen = matches!(model, Model::Sfcen | Model::All);
    if want_sfcen {
        let split = split_windows(&traces, &cfg.train_sfcen)?;
        let (store, rep) = train_sfcen::<W>(&split, &ctx.pattern, &ctx.net, &cfg.train_sfcen, cfg.train_sfcen.seed)?;
        ctx.save(&mut manifest, "sfcen", &store, &rep)?;
    }
    if !matches!(model, Model::Sfcen) {
        let split = split_windows(&traces, &cfg.train_tudcen)?;
        let sfcen = if cfg.udccn_input == UplinkInput::Sfcen { ctx.load_ckpt("sfcen")? } else { None };
        let source = match (cfg.udccn_input, &sfcen) {
            (UplinkInput::Sfcen, Some(store)) => UplinkSource::Sfcen { store, net: &ctx.net, pattern: &ctx.pattern },
            (UplinkInput::LsDft, _) => {
                UplinkSource::Interp { method: InterpMethod::Dft, pattern: &ctx.pattern, n_tx: cfg.sys.n_tx, n_sc: cfg.sys.n_sc }
            }
            (UplinkInput::Sfcen, None) => {
                eprintln!("note: no sfcen checkpoint, calibration trains on the true uplink");
                manifest.config.udccn_input = UplinkInput::Truth;
                UplinkSource::Truth
            }
            (UplinkInput::Truth, _) => UplinkSource::Truth,
        };
        let tc = &cfg.train_tudcen;
        match model {
            Model::Udccn => {
                let (u, rep) = train_udccn::<W>(&split, &cfg.tudcen, tc, &source, tc.seed)?;
                ctx.save(&mut manifest, "udccn", &u, &rep)?;
            }
            Model::Dcen => {
                let u = ctx.load_ckpt("udccn")?.ok_or_else(|| Error::MissingFile(ctx.ckpt("udccn")))?;
                let (d, rep) = train_dcen::<W>(&split, &cfg.tudcen, tc, &source, &u, tc.seed)?;
                ctx.save(&mut manifest, "dcen", &d, &rep)?;
            }
            _ => {
                let (p, rep) = train_tudcen::<W>(&split, &cfg.tudcen, tc, &source, tc.seed)?;
                if !tc.joint {
                    ctx.save(&mut manifest, "udccn", &p.udccn, &rep.udccn)?;
                } else {
                    p.udccn.save(&ctx.ckpt("udccn"))?;
                    manifest.add_file("udccn_ckpt", &ctx.ckpt("udccn"));
                }
                ctx.save(&mut manifest, "dcen", &p.dcen, &rep.dcen)?;
            }
        }
    }
    let name = match model {
        Model::Sfcen => "train_sfcen",
        Model::Udccn => "train_udccn",
        Model::Dcen => "train_dcen",
        Model::All => "train_all",
    };
    write_manifest(&ctx.out, name, &manifest)
}

fn test_split(ctx: &Ctx) -> Result<Vec<Window>> {
    let cfg = &ctx.cfg;
    let (a, b, c) = cfg.train_sfcen.split;
    let traces = load_traces(cfg, &ctx.out, a + b..a + b + c)?;
    let mut out = Vec::new();
    for (i, t) in traces.iter().enumerate() {
        out.extend(make_windows(t, a + b + i, &cfg.train_sfcen)?);
    }
    Ok(out)
}

/// Returns whether every threshold flag passed.
fn cmd_eval(ctx: &Ctx, sweep: &str, no_plots: bool, dump_rollout: bool) -> Result<bool> {
    let kinds: Vec<SweepKind> = if sweep == "all" { SweepKind::ALL.to_vec() } else { vec![sweep.parse()?] };
    let windows = test_split(ctx)?;
    let sfcen = ctx.load_ckpt("sfcen")?;
    let udccn = ctx.load_ckpt("udccn")?;
    let dcen = ctx.load_ckpt("dcen")?;
    let tud = match (udccn, dcen) {
        (Some(udccn), Some(dcen)) => Some(TudcenParams { udccn, dcen }),
        _ => None,
    };
    let models = Models::<W> {
        sfcen: sfcen.as_ref().map(|s| (s, &ctx.net)),
        tudcen: tud.as_ref().map(|p| (p, &ctx.cfg.tudcen)),
    };
    let mut manifest = RunManifest::new(ctx.cfg.clone());
    let mut all_ok = true;
    for kind in kinds {
        let report = run_sweep(kind, &ctx.cfg, &windows, &models)?;
        let csv = ctx.out.join(format!("eval_{}.csv", kind.name()));
        report.write_csv(&csv)?;
        manifest.add_file(&format!("eval_{}", kind.name()), &csv);
        println!("wrote {} ({:.1} s)", csv.display(), report.runtime_s);
        for n in &report.notes {
            println!("  note: {n}");
        }
        for (name, ok) in report.threshold_flags() {
            println!("  [{}] {name}", if ok { "PASS" } else { "FAIL" });
            all_ok &= ok;
        }
        if !no_plots {
            let svg = ctx.out.join(format!("eval_{}.svg", kind.name()));
            nmse_chart(&report).save(&svg)?;
            manifest.add_file(&format!("eval_{}_svg", kind.name()), &svg);
        }
    }
    if dump_rollout {
        let p = tud.as_ref().ok_or_else(|| Error::MissingCheckpoint("udccn/dcen".into()))?;
        let source = match &sfcen {
            Some(store) => UplinkSource::Sfcen { store, net: &ctx.net, pattern: &ctx.pattern },
            None => UplinkSource::Truth,
        };
        let up = source.estimates(&windows, ctx.cfg.eval_snr_db, ctx.cfg.eval_seed)?;
        let h1 = udccn_forward(&p.udccn, &ctx.cfg.tudcen.udccn, &up)?;
        let roll = extrapolate_batch(&p.dcen, &ctx.cfg.tudcen, &h1, ctx.cfg.sys.n_slot - 2)?;
        let d = ctx.cfg.tudcen.dims;
        let mut data = Vec::new();
        for (h, r) in h1.iter().zip(&roll) {
            data.extend(h.iter().copied());
            r.iter().for_each(|s| data.extend(s.iter().copied()));
        }
        let rec = Record::complex("rollout", vec![windows.len(), ctx.cfg.sys.n_slot - 1, d.n_rx, d.n_tx, d.n_sc], data);
        let path = ctx.out.join("rollout.mxl");
        write_container(&path, &[rec])?;
        manifest.add_file("rollout", &path);
        println!("wrote {} (uplink source {})", path.display(), source.name());
    }
    write_manifest(&ctx.out, &format!("eval_{sweep}"), &manifest)?;
    Ok(all_ok)
}

fn cmd_check() -> bool {
    let mut ok = true;
    for o in check::run_all() {
        println!("{o}");
        ok &= o.passed;
    }
    println!("{}", if ok { "all checks passed" } else { "some checks FAILED" });
    ok
}

fn run(cli: &Cli) -> Result<bool> {
    if let Some(n) = std::env::var("MXL_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        #[cfg(feature = "parallel")]
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
        #[cfg(not(feature = "parallel"))]
        let _ = n;
    }
    if let Cmd::Check = cli.cmd {
        return Ok(cmd_check());
    }
    let cfg = load_config(cli)?;
    match &cli.cmd {
        Cmd::ShowConfig => {
            print!("{}", cfg.to_text());
            Ok(true)
        }
        Cmd::Gen => cmd_gen(&cfg, &cli.out_dir).map(|_| true),
        Cmd::Train { model } => {
            std::fs::create_dir_all(&cli.out_dir)?;
            cmd_train(&Ctx::new(cfg, &cli.out_dir)?, *model).map(|_| true)
        }
        Cmd::Eval { sweep, dump_rollout } => {
            if sweep != "all" {
                sweep.parse::<SweepKind>()?;
            }
            std::fs::create_dir_all(&cli.out_dir)?;
            cmd_eval(&Ctx::new(cfg, &cli.out_dir)?, sweep, cli.no_plots, *dump_rollout)
        }
        Cmd::Check => unreachable!(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
