use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use clickforge_client::{Client, NewSession};
use clickforge_core::adapter::{AdaptConfig, AdaptMode};
use clickforge_core::evalbench::{
    ablation_grid, curve_csv, forgetting_protocol, miou_curve, noc_eval, ModelSegmenter,
};
use clickforge_core::guidance::{next_robot_click, Click, Polarity};
use clickforge_core::netcore::{load_checkpoint, save_checkpoint, ModelConfig, Network};
use clickforge_core::optim::OptimizerKind;
use clickforge_core::raster::{
    encode_image_png, encode_mask_png, generate_dataset, iou, load_dataset, save_dataset, DomainSpec,
};
use clickforge_core::trainer::{train_adm, train_bsm, TrainConfig};
use clickforge_server::ServerConfig;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "clickforge", version, about = "Click-guided segmentation with test-time adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset as images/ and masks/ PNG folders.
    GenData(GenData),
    /// Train the BSM, then the ADM with the BSM frozen.
    Train(Train),
    /// Number-of-clicks evaluation with the robot clicker.
    NocEval(NocEval),
    /// Baseline, adapt, re-evaluate: how much the source domain degrades.
    ForgetEval(ForgetEval),
    /// The 2x2 grid over ADM on/off and adaptation on/off.
    Ablation(Ablation),
    /// Run the annotation service.
    Serve(Serve),
    /// Robot-annotate a dataset through a running service.
    Annotate(Annotate),
    /// Talk to a running service one request at a time.
    Session {
        #[arg(long, default_value = "http://127.0.0.1:7878", global = true)]
        server: String,
        #[command(subcommand)]
        action: SessionAction,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Domain {
    Source,
    Shifted,
    Changed,
}

#[derive(Args)]
struct GenData {
    #[arg(long, value_enum)]
    domain: Domain,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    count: usize,
    /// Square side in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Train {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    epochs_bsm: usize,
    #[arg(long, default_value_t = 20)]
    epochs_adm: usize,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr_bsm: f64,
    #[arg(long, default_value_t = 5e-4)]
    lr_adm: f64,
    #[arg(long, value_enum, default_value_t = Optim::Sgd)]
    optimizer: Optim,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.3)]
    iterative_prob: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Optim {
    Sgd,
    Adam,
}

impl From<Optim> for OptimizerKind {
    fn from(o: Optim) -> Self {
        match o {
            Optim::Sgd => OptimizerKind::Sgd,
            Optim::Adam => OptimizerKind::Adam,
        }
    }
}

#[derive(Args)]
struct EvalOpts {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value = "off")]
    mode: AdaptMode,
    /// Target IoUs, as percentages or fractions.
    #[arg(long, default_value = "85,90", value_parser = parse_targets)]
    targets: Targets,
    #[arg(long, default_value_t = 20)]
    cap: usize,
    /// Recorded in the report; evaluation itself draws no random numbers.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    lr_adm: Option<f64>,
    #[arg(long)]
    lr_bsm: Option<f64>,
    #[arg(long)]
    steps_per_click: Option<usize>,
}

#[derive(Clone, Debug)]
struct Targets(Vec<f64>);

fn parse_targets(s: &str) -> Result<Targets, String> {
    s.split(',')
        .map(|t| {
            let v: f64 = t.trim().parse().map_err(|_| format!("bad target `{t}`"))?;
            let v = if v > 1.0 { v / 100.0 } else { v };
            if v > 0.0 && v <= 1.0 {
                Ok(v)
            } else {
                Err(format!("target `{t}` out of range"))
            }
        })
        .collect::<Result<Vec<_>, _>>()
        .map(Targets)
}

impl EvalOpts {
    fn adapt_config(&self) -> AdaptConfig {
        let mut cfg = AdaptConfig::default().with_mode(self.mode);
        if let Some(v) = self.lr_adm {
            cfg.lr_adm = v;
            if self.lr_bsm.is_none() {
                cfg.lr_bsm = 0.01 * v;
            }
        }
        if let Some(v) = self.lr_bsm {
            cfg.lr_bsm = v;
        }
        if let Some(v) = self.steps_per_click {
            cfg.steps_per_click = v;
        }
        cfg
    }
}

#[derive(Args)]
struct NocEval {
    #[command(flatten)]
    opts: EvalOpts,
    #[arg(long)]
    data: PathBuf,
    /// Bypass the ADM and output the coarse map.
    #[arg(long)]
    no_adm: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the mean IoU after k = 1..k_max clicks as CSV.
    #[arg(long)]
    curve: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    k_max: usize,
}

#[derive(Args)]
struct ForgetEval {
    #[command(flatten)]
    opts: EvalOpts,
    #[arg(long)]
    adapt: PathBuf,
    #[arg(long)]
    eval: PathBuf,
    /// Also evaluate with adaptation on during both evaluation passes.
    #[arg(long)]
    deployed: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Where to save the parameters after the adaptation pass.
    #[arg(long)]
    save_params: Option<PathBuf>,
}

#[derive(Args)]
struct Ablation {
    #[command(flatten)]
    opts: EvalOpts,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Serve {
    /// TOML config; `CLICKFORGE_*` variables override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    listen: Option<std::net::SocketAddr>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    state_dir: Option<PathBuf>,
}

#[derive(Args)]
struct Annotate {
    #[arg(long, default_value = "http://127.0.0.1:7878")]
    server: String,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "local")]
    mode: AdaptMode,
    #[arg(long, default_value_t = 0.9)]
    target: f64,
    #[arg(long, default_value_t = 20)]
    cap: usize,
}

#[derive(Subcommand)]
enum SessionAction {
    Create {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long)]
        mode: Option<AdaptMode>,
    },
    Click {
        id: String,
        #[arg(long)]
        row: usize,
        #[arg(long)]
        col: usize,
        #[arg(long)]
        ordinal: u32,
        #[arg(long)]
        negative: bool,
    },
    Undo {
        id: String,
    },
    Finish {
        id: String,
    },
    Discard {
        id: String,
    },
    Show {
        id: String,
    },
    Health,
    Checkpoints,
}

fn write_json(value: &impl Serialize, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn load(opts: &EvalOpts) -> Result<(Network, clickforge_core::netcore::ParamSet)> {
    let net = Network::new(ModelConfig::default())?;
    let params = load_checkpoint(&opts.ckpt).with_context(|| format!("loading {}", opts.ckpt.display()))?;
    net.check_params(&params)?;
    Ok((net, params))
}

fn dataset(dir: &Path) -> Result<Vec<clickforge_core::raster::Sample>> {
    load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

#[derive(Serialize)]
struct Report<'a, T: Serialize> {
    checkpoint: String,
    mode: AdaptMode,
    seed: u64,
    #[serde(flatten)]
    body: &'a T,
}

fn gen_data(a: GenData) -> Result<()> {
    let spec = match a.domain {
        Domain::Source => DomainSpec::source(a.seed),
        Domain::Shifted => DomainSpec::shifted(a.seed),
        Domain::Changed => DomainSpec::changed(a.seed),
    }
    .with_size(a.size, a.size);
    let samples = generate_dataset(&spec, a.count)?;
    save_dataset(&samples, &a.out)?;
    println!("wrote {} samples to {}", samples.len(), a.out.display());
    Ok(())
}

fn train(a: Train) -> Result<()> {
    let data = dataset(&a.data)?;
    let net = Network::new(ModelConfig::default())?;
    let base = TrainConfig {
        epochs: a.epochs_bsm,
        batch_size: a.batch_size,
        lr_bsm: a.lr_bsm,
        lr_adm: a.lr_adm,
        optimizer: a.optimizer.into(),
        seed: a.seed,
        iterative_prob: a.iterative_prob,
        ..TrainConfig::default()
    };
    let p1 = train_bsm(&net, &data, &base)?;
    for e in &p1.log {
        println!("{e}");
    }
    let p2 = train_adm(&net, &data, &p1.params, &TrainConfig { epochs: a.epochs_adm, ..base })?;
    for e in &p2.log {
        println!("{e}");
    }
    save_checkpoint(&p2.params, &a.out)?;
    println!("saved {}", a.out.display());
    Ok(())
}

fn noc(a: NocEval) -> Result<()> {
    let (net, params) = load(&a.opts)?;
    let data = dataset(&a.data)?;
    let cfg = AdaptConfig {
        use_adm: !a.no_adm,
        ..a.opts.adapt_config()
    };
    let mut seg = ModelSegmenter::new(&net, params.clone(), cfg.clone())?;
    let report = noc_eval(&mut seg, &data, &a.opts.targets.0, a.opts.cap)?;
    for (t, m) in report.targets.iter().zip(&report.mean_noc) {
        eprintln!("NoC@{:.0}: {m:.3}", t * 100.0);
    }
    let wrapped = Report {
        checkpoint: a.opts.ckpt.display().to_string(),
        mode: a.opts.mode,
        seed: a.opts.seed,
        body: &report,
    };
    write_json(&wrapped, a.out.as_deref())?;
    if let Some(path) = &a.curve {
        let mut seg = ModelSegmenter::new(&net, params, cfg)?;
        let curve = miou_curve(&mut seg, &data, a.k_max)?;
        fs::write(path, curve_csv(&curve))?;
    }
    Ok(())
}

fn forget(a: ForgetEval) -> Result<()> {
    if a.opts.mode == AdaptMode::Off {
        log::warn!("mode off: the adaptation pass leaves the parameters unchanged");
    }
    let (net, params) = load(&a.opts)?;
    let (adapt, eval) = (dataset(&a.adapt)?, dataset(&a.eval)?);
    let cfg = a.opts.adapt_config();
    let (report, evolved) = forgetting_protocol(
        &net,
        &params,
        &adapt,
        &eval,
        &cfg,
        &a.opts.targets.0,
        a.opts.cap,
        a.deployed,
    )?;
    for (t, d) in report.targets.iter().zip(&report.decay) {
        eprintln!("decay@{:.0}: {d:.2}%", t * 100.0);
    }
    if let Some(p) = &a.save_params {
        save_checkpoint(&evolved, p)?;
    }
    let wrapped = Report {
        checkpoint: a.opts.ckpt.display().to_string(),
        mode: a.opts.mode,
        seed: a.opts.seed,
        body: &report,
    };
    write_json(&wrapped, a.out.as_deref())
}

fn ablation(a: Ablation) -> Result<()> {
    let (net, params) = load(&a.opts)?;
    let data = dataset(&a.data)?;
    let report = ablation_grid(&net, &params, &data, &a.opts.adapt_config(), &a.opts.targets.0, a.opts.cap)?;
    write_json(&report, a.out.as_deref())
}

async fn serve(a: Serve) -> Result<()> {
    let mut cfg = ServerConfig::load(a.config.as_deref())?;
    if let Some(v) = a.listen {
        cfg.listen = v;
    }
    if let Some(v) = a.checkpoint {
        cfg.checkpoint = Some(v);
    }
    if let Some(v) = a.state_dir {
        cfg.state_dir = v;
    }
    let server = clickforge_server::spawn(cfg).await?;
    println!("listening on http://{}", server.addr);
    tokio::signal::ctrl_c().await?;
    server.shutdown().await?;
    Ok(())
}

#[derive(Serialize)]
struct AnnotatedImage {
    name: String,
    session: String,
    clicks: usize,
    iou: f64,
    checkpoint_version: Option<u64>,
}

async fn annotate(a: Annotate) -> Result<()> {
    let client = Client::new(&a.server).with_busy_retries(30);
    let data = dataset(&a.data)?;
    let mut out = Vec::with_capacity(data.len());
    for s in &data {
        let created = client
            .create_session(&NewSession {
                image: encode_image_png(&s.image)?,
                gt: Some(encode_mask_png(&s.mask)?),
                mode: Some(a.mode),
            })
            .await?;
        let mut pred = clickforge_core::raster::Mask::zeros(s.mask.height(), s.mask.width());
        let mut score = 0.0;
        let mut used = 0;
        for k in 1..=a.cap as u32 {
            if score >= a.target || pred == s.mask {
                break;
            }
            let click = next_robot_click(&pred, &s.mask, k)?;
            let r = client.click(&created.id, click).await?;
            pred = r.mask.decode()?;
            score = iou(&pred, &s.mask)?;
            used = k as usize;
        }
        let done = client.finish(&created.id).await?;
        out.push(AnnotatedImage {
            name: s.name.clone(),
            session: created.id,
            clicks: used,
            iou: score,
            checkpoint_version: done.checkpoint_version,
        });
    }
    write_json(&out, None)
}

async fn session(server: String, action: SessionAction) -> Result<()> {
    let client = Client::new(server);
    match action {
        SessionAction::Create { image, gt, mode } => {
            let req = NewSession {
                image: fs::read(&image).with_context(|| format!("reading {}", image.display()))?,
                gt: gt.map(fs::read).transpose()?,
                mode,
            };
            write_json(&client.create_session(&req).await?, None)
        }
        SessionAction::Click { id, row, col, ordinal, negative } => {
            let polarity = if negative { Polarity::Negative } else { Polarity::Positive };
            let click = Click { row, col, polarity, ordinal };
            write_json(&client.click(&id, click).await?, None)
        }
        SessionAction::Undo { id } => write_json(&client.undo(&id).await?, None),
        SessionAction::Finish { id } => write_json(&client.finish(&id).await?, None),
        SessionAction::Discard { id } => {
            client.discard(&id).await?;
            Ok(())
        }
        SessionAction::Show { id } => write_json(&client.session(&id).await?, None),
        SessionAction::Health => write_json(&client.health().await?, None),
        SessionAction::Checkpoints => write_json(&client.checkpoints().await?, None),
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let rt = || tokio::runtime::Builder::new_multi_thread().enable_all().build();
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::NocEval(a) => noc(a),
        Command::ForgetEval(a) => forget(a),
        Command::Ablation(a) => ablation(a),
        Command::Serve(a) => rt()?.block_on(serve(a)),
        Command::Annotate(a) => {
            if !(a.target > 0.0 && a.target <= 1.0) {
                bail!("--target must lie in (0, 1]");
            }
            rt()?.block_on(annotate(a))
        }
        Command::Session { server, action } => rt()?.block_on(session(server, action)),
    }
}
