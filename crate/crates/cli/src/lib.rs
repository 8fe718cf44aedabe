//! Subcommands of the `qaconv` tool. Each command reads its inputs from
//! files, runs one or more library stages and writes its artifacts back out.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use qaconv_core::augment::{random_hflip, random_occlude};
use qaconv_core::config::Config;
use qaconv_core::eval::{evaluate, EvalReport};
use qaconv_core::io;
use qaconv_core::matching::{interpret, match_batch, Direction};
use qaconv_core::rerank::k_reciprocal_rerank;
use qaconv_core::tlift::{tlift_fuse, TLiftParams};
use qaconv_core::train::train_head;
use qaconv_core::{Error, GalleryStore, HeadParams, MetaRecord, Result, SimilarityMatrix};

/// Exit status for each error class. Usage errors exit with 2 (clap).
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io(_) => 1,
        Error::Format(_) => 3,
        Error::ProfileMismatch(_) => 4,
        Error::Precondition(_) => 5,
    }
}

#[derive(Debug, Parser)]
#[command(name = "qaconv", version, about = "Query-adaptive convolutional matching for person re-identification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Score every query feature map against every gallery feature map.
    Match(MatchArgs),
    /// Train the matching head on labelled feature maps.
    TrainHead(TrainHeadArgs),
    /// Apply k-reciprocal re-ranking to a query-gallery score file.
    Rerank(RerankArgs),
    /// Fuse appearance scores with temporal co-occurrence.
    Tlift(TliftArgs),
    /// Compute CMC and mAP for a score file.
    Eval(EvalArgs),
    /// Run match, optional rerank and tlift, then eval, keeping every stage.
    Pipeline(PipelineArgs),
    /// List the local correspondences behind one query-gallery score.
    Interpret(InterpretArgs),
    /// Randomly occlude and flip an image tensor.
    Augment(AugmentArgs),
    /// Re-run tlift and eval over a grid of temporal parameters.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// key=value configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Worker threads (overrides the config file and QACONV_WORKERS).
    #[arg(long)]
    pub workers: Option<usize>,
    /// Query kernel size (odd).
    #[arg(long)]
    pub kernel_size: Option<usize>,
}

impl Common {
    fn load(&self) -> Result<Config> {
        let mut cfg = match &self.config {
            Some(path) => Config::parse(&fs::read_to_string(path)?)?,
            None => Config::default(),
        };
        cfg.apply_env()?;
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
        if let Some(s) = self.kernel_size {
            cfg.kernel_size = s;
            cfg.train.kernel_size = s;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    #[arg(long)]
    pub query: PathBuf,
    #[arg(long)]
    pub gallery: PathBuf,
    /// Head file; without one the mean of the pooled vector is scored.
    #[arg(long)]
    pub head: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct TrainHeadArgs {
    #[arg(long)]
    pub features: PathBuf,
    /// Metadata file whose identity column holds the class labels.
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long)]
    pub num_classes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Where to write the `epoch,loss` trace.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct RerankArgs {
    #[arg(long)]
    pub qg: PathBuf,
    #[arg(long)]
    pub qq: PathBuf,
    #[arg(long)]
    pub gg: PathBuf,
    #[arg(long)]
    pub k1: Option<usize>,
    #[arg(long)]
    pub k2: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TemporalFlags {
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
}

impl TemporalFlags {
    fn apply(&self, p: &mut TLiftParams) {
        if let Some(v) = self.tau {
            p.tau = v;
        }
        if let Some(v) = self.sigma {
            p.sigma = v;
        }
        if let Some(v) = self.k {
            p.k = v;
        }
        if let Some(v) = self.alpha {
            p.alpha = v;
        }
    }
}

#[derive(Debug, Args)]
pub struct TliftArgs {
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long)]
    pub query_meta: PathBuf,
    #[arg(long)]
    pub gallery_meta: PathBuf,
    #[command(flatten)]
    pub temporal: TemporalFlags,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long)]
    pub query_meta: PathBuf,
    #[arg(long)]
    pub gallery_meta: PathBuf,
    #[arg(long)]
    pub r_max: Option<usize>,
    /// Also write the full CMC curve as `rank,cmc` rows.
    #[arg(long)]
    pub table: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    #[arg(long)]
    pub query: PathBuf,
    #[arg(long)]
    pub gallery: PathBuf,
    #[arg(long)]
    pub query_meta: PathBuf,
    #[arg(long)]
    pub gallery_meta: PathBuf,
    #[arg(long)]
    pub head: Option<PathBuf>,
    /// Re-rank with k-reciprocal encoding (matches query-query and
    /// gallery-gallery as well).
    #[arg(long)]
    pub rerank: bool,
    /// Fuse with temporal co-occurrence; every record needs a frame and fps.
    #[arg(long)]
    pub tlift: bool,
    /// Directory receiving every intermediate artifact.
    #[arg(long)]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct InterpretArgs {
    #[arg(long)]
    pub query: PathBuf,
    #[arg(long)]
    pub gallery: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub query_index: usize,
    #[arg(long, default_value_t = 0)]
    pub gallery_index: usize,
    #[arg(long)]
    pub head: Option<PathBuf>,
    #[arg(long)]
    pub threshold: Option<f32>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub max_frac: Option<f64>,
    #[arg(long)]
    pub flip_p: Option<f64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long)]
    pub query_meta: PathBuf,
    #[arg(long)]
    pub gallery_meta: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub tau: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    pub sigma: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    pub k: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    pub alpha: Vec<f64>,
    /// Output CSV; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    match path {
        Some(p) => Config::parse(&fs::read_to_string(p)?),
        None => Ok(Config::default()),
    }
}

fn load_store(path: &Path) -> Result<GalleryStore> {
    Ok(GalleryStore::new(io::read_features(path)?.maps)?.normalized())
}

fn load_head(path: Option<&Path>, store: &GalleryStore) -> Result<HeadParams> {
    match path {
        Some(p) => io::read_head(p),
        None => {
            let (_, h, w) = store.profile().unwrap_or_default();
            Ok(HeadParams::mean_pooling(2 * h * w))
        }
    }
}

/// Runs one parsed command; anything meant for the user is returned as text.
pub fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Match(a) => cmd_match(&a),
        Command::TrainHead(a) => cmd_train_head(&a),
        Command::Rerank(a) => cmd_rerank(&a),
        Command::Tlift(a) => cmd_tlift(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Pipeline(a) => cmd_pipeline(&a),
        Command::Interpret(a) => cmd_interpret(&a),
        Command::Augment(a) => cmd_augment(&a),
        Command::Sweep(a) => cmd_sweep(&a),
    }
}

fn cmd_match(a: &MatchArgs) -> Result<String> {
    let cfg = a.common.load()?;
    let queries = load_store(&a.query)?;
    let gallery = load_store(&a.gallery)?;
    let head = load_head(a.head.as_deref(), &queries)?;
    let scores = match_batch(&queries, &gallery, &head, cfg.kernel_size, cfg.workers)?;
    io::write_scores(&a.out, &scores)?;
    Ok(String::new())
}

fn cmd_train_head(a: &TrainHeadArgs) -> Result<String> {
    let cfg = a.common.load()?;
    cfg.train.validate()?;
    let features = io::read_features(&a.features)?;
    let meta = io::read_meta(&a.labels)?;
    if meta.len() != features.maps.len() {
        return Err(Error::ProfileMismatch(format!(
            "{} feature maps but {} label records",
            features.maps.len(),
            meta.len()
        )));
    }
    let labels = meta
        .iter()
        .map(|m| {
            usize::try_from(m.identity)
                .ok()
                .filter(|&l| l < a.num_classes)
                .ok_or_else(|| Error::Precondition(format!("label {} outside [0, {})", m.identity, a.num_classes)))
        })
        .collect::<Result<Vec<_>>>()?;
    let out = train_head(&features.maps, &labels, a.num_classes, &cfg.train, a.seed)?;
    io::write_head(&a.out, &out.head)?;
    let mut trace = String::new();
    for (epoch, loss) in &out.loss_trace {
        writeln!(trace, "{epoch},{loss}").unwrap();
    }
    if let Some(path) = &a.trace {
        fs::write(path, &trace)?;
    }
    let (_, last) = out.loss_trace.last().copied().unwrap_or_default();
    Ok(format!("final_loss={last:.6}\n"))
}

fn cmd_rerank(a: &RerankArgs) -> Result<String> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(v) = a.k1 {
        cfg.rerank.k1 = v;
    }
    if let Some(v) = a.k2 {
        cfg.rerank.k2 = v;
    }
    if let Some(v) = a.lambda {
        cfg.rerank.lambda = v;
    }
    let out = k_reciprocal_rerank(&io::read_scores(&a.qg)?, &io::read_scores(&a.qq)?, &io::read_scores(&a.gg)?, &cfg.rerank)?;
    io::write_scores(&a.out, &out)?;
    Ok(String::new())
}

fn cmd_tlift(a: &TliftArgs) -> Result<String> {
    let mut cfg = load_config(a.config.as_deref())?;
    a.temporal.apply(&mut cfg.tlift);
    let out = tlift_fuse(&io::read_scores(&a.scores)?, &io::read_meta(&a.query_meta)?, &io::read_meta(&a.gallery_meta)?, &cfg.tlift)?;
    io::write_scores(&a.out, &out)?;
    Ok(String::new())
}

fn write_report(report: &EvalReport, table: Option<&Path>) -> Result<String> {
    if let Some(path) = table {
        fs::write(path, report.to_table())?;
    }
    Ok(report.to_key_values())
}

fn cmd_eval(a: &EvalArgs) -> Result<String> {
    let cfg = load_config(a.config.as_deref())?;
    let r_max = a.r_max.unwrap_or(cfg.r_max);
    let report = evaluate(&io::read_scores(&a.scores)?, &io::read_meta(&a.query_meta)?, &io::read_meta(&a.gallery_meta)?, r_max)?;
    write_report(&report, a.table.as_deref())
}

fn cmd_pipeline(a: &PipelineArgs) -> Result<String> {
    let cfg = a.common.load()?;
    cfg.validate()?;
    let qmeta = io::read_meta(&a.query_meta)?;
    let gmeta = io::read_meta(&a.gallery_meta)?;
    let queries = load_store(&a.query)?.with_meta(qmeta.clone())?;
    let gallery = load_store(&a.gallery)?.with_meta(gmeta.clone())?;
    if a.tlift {
        require_times(&qmeta, "query")?;
        require_times(&gmeta, "gallery")?;
    }
    let head = load_head(a.head.as_deref(), &queries)?;
    fs::create_dir_all(&a.out_dir)?;
    let out = |name: &str| a.out_dir.join(name);

    let mut scores = match_batch(&queries, &gallery, &head, cfg.kernel_size, cfg.workers)?;
    io::write_scores(out("match.qsim"), &scores)?;
    if a.rerank {
        let qq = match_batch(&queries, &queries, &head, cfg.kernel_size, cfg.workers)?;
        let gg = match_batch(&gallery, &gallery, &head, cfg.kernel_size, cfg.workers)?;
        io::write_scores(out("qq.qsim"), &qq)?;
        io::write_scores(out("gg.qsim"), &gg)?;
        scores = k_reciprocal_rerank(&scores, &qq, &gg, &cfg.rerank)?;
        io::write_scores(out("rerank.qsim"), &scores)?;
    }
    if a.tlift {
        scores = tlift_fuse(&scores, &qmeta, &gmeta, &cfg.tlift)?;
        io::write_scores(out("tlift.qsim"), &scores)?;
    }
    let report = evaluate(&scores, &qmeta, &gmeta, cfg.r_max)?;
    let text = write_report(&report, Some(&out("cmc.csv")))?;
    fs::write(out("report.txt"), &text)?;
    Ok(text)
}

fn require_times(meta: &[MetaRecord], side: &str) -> Result<()> {
    match meta.iter().position(|m| m.time.is_none()) {
        Some(i) => Err(Error::Precondition(format!("{side} record {i} has no timestamp; --tlift needs frame and fps"))),
        None => Ok(()),
    }
}

fn pick(store: &GalleryStore, index: usize, side: &str) -> Result<GalleryStore> {
    let map = store
        .maps()
        .get(index)
        .ok_or_else(|| Error::Precondition(format!("{side} index {index} out of range (n = {})", store.len())))?;
    GalleryStore::new(vec![map.clone()])
}

fn cmd_interpret(a: &InterpretArgs) -> Result<String> {
    let cfg = a.common.load()?;
    let threshold = a.threshold.unwrap_or(cfg.threshold);
    let q = pick(&load_store(&a.query)?, a.query_index, "query")?;
    let g = pick(&load_store(&a.gallery)?, a.gallery_index, "gallery")?;
    let head = load_head(a.head.as_deref(), &q)?;
    let set = interpret(&q.maps()[0], &g.maps()[0], &head, threshold, cfg.kernel_size)?;
    let mut text = format!("probability={}\ndirection,query_y,query_x,gallery_y,gallery_x,score\n", set.probability);
    for c in &set.correspondences {
        let dir = match c.direction {
            Direction::QueryToGallery => "q2g",
            Direction::GalleryToQuery => "g2q",
        };
        writeln!(text, "{dir},{},{},{},{},{}", c.query.0, c.query.1, c.gallery.0, c.gallery.1, c.score).unwrap();
    }
    Ok(text)
}

fn cmd_augment(a: &AugmentArgs) -> Result<String> {
    let cfg = load_config(a.config.as_deref())?;
    let img = io::read_image(&a.input)?;
    let (occluded, occ) = random_occlude(&img, a.seed, a.max_frac.unwrap_or(cfg.max_frac))?;
    let (out, flipped) = random_hflip(&occluded, a.seed.wrapping_add(1), a.flip_p.unwrap_or(cfg.flip_p))?;
    io::write_image(&a.out, &out)?;
    Ok(format!("occlusion_top={}\nocclusion_left={}\nocclusion_side={}\nflipped={flipped}\n", occ.top, occ.left, occ.side))
}

fn or_default<T: Copy>(values: &[T], default: T) -> Vec<T> {
    if values.is_empty() {
        vec![default]
    } else {
        values.to_vec()
    }
}

/// Header and rows of a temporal-parameter sweep.
pub fn sweep_table(
    scores: &SimilarityMatrix,
    qmeta: &[MetaRecord],
    gmeta: &[MetaRecord],
    grid: &[TLiftParams],
    r_max: usize,
) -> Result<String> {
    let mut text = String::from("tau,sigma,k,alpha,rank1,rank5,rank10,map\n");
    for p in grid {
        let fused = tlift_fuse(scores, qmeta, gmeta, p)?;
        let r = evaluate(&fused, qmeta, gmeta, r_max.max(10))?;
        writeln!(
            text,
            "{},{},{},{},{:.6},{:.6},{:.6},{:.6}",
            p.tau,
            p.sigma,
            p.k,
            p.alpha,
            r.rank(1),
            r.rank(5),
            r.rank(10),
            r.map
        )
        .unwrap();
    }
    Ok(text)
}

fn cmd_sweep(a: &SweepArgs) -> Result<String> {
    let cfg = load_config(a.config.as_deref())?;
    let base = cfg.tlift;
    let mut grid = Vec::new();
    for &tau in &or_default(&a.tau, base.tau) {
        for &sigma in &or_default(&a.sigma, base.sigma) {
            for &k in &or_default(&a.k, base.k) {
                for &alpha in &or_default(&a.alpha, base.alpha) {
                    grid.push(TLiftParams { tau, sigma, k, alpha, ..base });
                }
            }
        }
    }
    let table = sweep_table(&io::read_scores(&a.scores)?, &io::read_meta(&a.query_meta)?, &io::read_meta(&a.gallery_meta)?, &grid, cfg.r_max)?;
    match &a.out {
        Some(path) => {
            fs::write(path, &table)?;
            Ok(String::new())
        }
        None => Ok(table),
    }
}
