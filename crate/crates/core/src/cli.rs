//! Command-line front end.
//!
//! Reports go to stdout as JSON (or a bare number for `hierarchy wup` and
//! `eval loss`). Failures print a single JSON line `{"error": kind,
//! "message": ...}` to stderr and exit with 2 (usage), 3 (data or format) or
//! 4 (integrity).

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::clustering::{self, ClusterError, EmbeddingSet};
use crate::codec::{self, CodecError, CodecOptions, Header, ProgressiveBitstream, SymbolOrdering};
use crate::eval::{self, BdMethod, EvalError, LevelTerms, PredictionTable, RdPoint};
use crate::fixtures;
use crate::formats::{self, FormatError, Tensor};
use crate::latent::{ChannelConfig, LatentTensor, LayoutError};
use crate::models::{ModelBundle, ModelConfig, ModelError};
use crate::taxonomy::{Clustering, ClusteringError, Taxonomy, TaxonomyError};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_INTEGRITY: i32 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "semcode",
    version,
    about = "Semantic progressive latent codec toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Taxonomy queries and class clustering.
    #[command(subcommand)]
    Hierarchy(HierarchyCmd),
    /// Progressive bitstream encode, decode and inspection.
    #[command(subcommand)]
    Codec(CodecCmd),
    /// Rate and accuracy evaluation.
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Synthetic input generation.
    #[command(subcommand)]
    Fixtures(FixturesCmd),
}

#[derive(Debug, Args)]
struct SeedArg {
    /// PRNG seed.
    #[arg(long, env = "SEMCODE_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Subcommand)]
enum HierarchyCmd {
    /// Cluster leaves by their ancestor at the depth nearest to K clusters.
    DepthCut {
        #[arg(long)]
        tree: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// k-means over normalized class embeddings.
    Kmeans {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        seed: SeedArg,
    },
    /// Intra- and inter-cluster Wu-Palmer similarity and balance.
    Coherence {
        #[arg(long)]
        tree: PathBuf,
        #[arg(long)]
        clustering: PathBuf,
    },
    /// Wu-Palmer similarity of two classes.
    Wup {
        #[arg(long)]
        tree: PathBuf,
        #[arg(long)]
        a: String,
        #[arg(long)]
        b: String,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum OrderArg {
    Sigma,
    Coordinate,
}

#[derive(Debug, Subcommand)]
enum CodecCmd {
    Encode {
        #[arg(long)]
        latent: PathBuf,
        #[arg(long)]
        hyper: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Code later blocks without the refinement networks.
        #[arg(long)]
        no_delta: bool,
        #[arg(long, value_enum, default_value = "sigma")]
        order: OrderArg,
    },
    /// Decode a complete or truncated stream to a latent tensor file.
    Decode {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Last block to decode; defaults to all available.
        #[arg(long)]
        level: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cut a stream to a byte count or to whole levels.
    Truncate {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, conflicts_with = "level", required_unless_present = "level")]
        bytes: Option<usize>,
        #[arg(long)]
        level: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print header fields, segment sizes and per-level rate.
    Inspect {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MethodArg {
    Cubic,
    Pchip,
}

#[derive(Debug, Subcommand)]
enum EvalCmd {
    /// Bjøntegaard delta-rate of curve B against curve A, per level.
    Bdrate {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, value_enum, default_value = "cubic")]
        method: MethodArg,
    },
    /// Per-level rate, distortion and cross-entropy objective.
    Loss {
        #[arg(long, value_delimiter = ',', required = true)]
        bpp: Vec<f64>,
        #[arg(long, value_delimiter = ',', required = true)]
        mse: Vec<f64>,
        #[arg(long, value_delimiter = ',', required = true)]
        ce: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = eval::REFERENCE_LAMBDAS)]
        lambdas: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = eval::REFERENCE_GAMMAS)]
        gammas: Vec<f64>,
    },
    /// Mean WUP and per-level accuracy of a predictions file.
    Score {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        tree: PathBuf,
        /// One clustering CSV per level, comma separated.
        #[arg(long, value_delimiter = ',')]
        clusterings: Vec<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
enum FixturesCmd {
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        seed: SeedArg,
        #[arg(long, default_value_t = 16)]
        height: usize,
        #[arg(long, default_value_t = 16)]
        width: usize,
        /// Block boundaries of the latent channels.
        #[arg(long, value_delimiter = ',', default_values_t = [128usize, 224, 320])]
        blocks: Vec<usize>,
        /// Use narrow network layers.
        #[arg(long)]
        small: bool,
        #[arg(long, default_value_t = 32)]
        embedding_dim: usize,
        #[arg(long, default_value_t = 200)]
        images: usize,
    },
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(String),
    Integrity(String),
}

impl Failure {
    fn code(&self) -> i32 {
        match self {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::Data(_) => EXIT_DATA,
            Failure::Integrity(_) => EXIT_INTEGRITY,
        }
    }

    fn line(&self) -> String {
        let (kind, message) = match self {
            Failure::Usage(m) => ("usage", m),
            Failure::Data(m) => ("data", m),
            Failure::Integrity(m) => ("integrity", m),
        };
        serde_json::json!({ "error": kind, "message": message }).to_string()
    }
}

macro_rules! data_failure {
    ($($t:ty),*) => {
        $(impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                Failure::Data(e.to_string())
            }
        })*
    };
}

data_failure!(
    TaxonomyError,
    ClusteringError,
    ClusterError,
    EvalError,
    LayoutError
);

impl From<FormatError> for Failure {
    fn from(e: FormatError) -> Self {
        match e {
            FormatError::HashMismatch => Failure::Integrity(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Format(f) => f.into(),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<CodecError> for Failure {
    fn from(e: CodecError) -> Self {
        match e {
            CodecError::WeightsHashMismatch => Failure::Integrity(e.to_string()),
            CodecError::Model(m) => m.into(),
            _ => Failure::Data(e.to_string()),
        }
    }
}

type Outcome = Result<(), Failure>;

fn read(path: &Path) -> Result<Vec<u8>, Failure> {
    fs::read(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn read_text(path: &Path) -> Result<String, Failure> {
    String::from_utf8(read(path)?)
        .map_err(|_| Failure::Data(format!("{}: not UTF-8", path.display())))
}

fn write(path: &Path, bytes: &[u8]) -> Outcome {
    fs::write(path, bytes).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn load_tree(path: &Path) -> Result<Taxonomy, Failure> {
    Ok(Taxonomy::parse(&read_text(path)?)?)
}

fn load_model(path: &Path) -> Result<ModelBundle, Failure> {
    Ok(ModelBundle::from_bytes(&read(path)?)?)
}

fn load_latent(path: &Path) -> Result<LatentTensor, Failure> {
    Ok(LatentTensor::from_tensor(&formats::read_tensor(&read(
        path,
    )?)?)?)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn emit<T: Serialize>(out: &mut dyn Write, value: &T) -> Outcome {
    let text = serde_json::to_string_pretty(value).expect("serializable report");
    writeln!(out, "{text}").map_err(|e| Failure::Data(format!("stdout: {e}")))
}

#[derive(Serialize)]
struct BalanceJson {
    sizes: Vec<usize>,
    normalized_entropy: f64,
    max_share: f64,
}

impl From<clustering::BalanceReport> for BalanceJson {
    fn from(b: clustering::BalanceReport) -> Self {
        Self {
            sizes: b.sizes,
            normalized_entropy: b.normalized_entropy,
            max_share: b.max_share,
        }
    }
}

fn hierarchy(cmd: HierarchyCmd, out: &mut dyn Write) -> Outcome {
    match cmd {
        HierarchyCmd::DepthCut { tree, k, out: path } => {
            let t = load_tree(&tree)?;
            let cut = t.depth_cut(k)?;
            write(&path, cut.clustering.to_csv().as_bytes())?;
            #[derive(Serialize)]
            struct Report {
                depth: u32,
                clusters: usize,
                balance: BalanceJson,
            }
            emit(
                out,
                &Report {
                    depth: cut.depth,
                    clusters: cut.clustering.k(),
                    balance: clustering::balance(&cut.clustering).into(),
                },
            )
        }
        HierarchyCmd::Kmeans {
            embeddings,
            labels,
            k,
            out: path,
            seed,
        } => {
            let t = formats::read_tensor(&read(&embeddings)?)?;
            let [n, d] = t.shape[..] else {
                return Err(Failure::Data(format!(
                    "embeddings must be N x D, got {:?}",
                    t.shape
                )));
            };
            let labels: Vec<String> = read_text(&labels)?
                .lines()
                .map(|l| l.trim_end_matches('\r').to_owned())
                .filter(|l| !l.is_empty())
                .collect();
            if labels.len() != n {
                return Err(Failure::Data(format!(
                    "{} labels for {n} embeddings",
                    labels.len()
                )));
            }
            let vectors = t.as_f32()?.iter().map(|&v| f64::from(v)).collect();
            let e = EmbeddingSet::new(d, vectors, labels)?.normalize()?;
            let r = clustering::kmeans(&e, k, seed.seed)?;
            write(&path, r.clustering.to_csv().as_bytes())?;
            #[derive(Serialize)]
            struct Report {
                clusters: usize,
                iterations: usize,
                sse: f64,
                balance: BalanceJson,
            }
            emit(
                out,
                &Report {
                    clusters: r.clustering.k(),
                    iterations: r.iterations,
                    sse: r.sse(),
                    balance: clustering::balance(&r.clustering).into(),
                },
            )
        }
        HierarchyCmd::Coherence { tree, clustering } => {
            let t = load_tree(&tree)?;
            let c = Clustering::parse_csv(&read_text(&clustering)?)?;
            let coh = t.coherence(&c)?;
            #[derive(Serialize)]
            struct Report {
                wup_intra: f64,
                wup_inter: f64,
                gap: f64,
                balance: BalanceJson,
            }
            emit(
                out,
                &Report {
                    wup_intra: coh.wup_intra,
                    wup_inter: coh.wup_inter,
                    gap: coh.gap,
                    balance: clustering::balance(&c).into(),
                },
            )
        }
        HierarchyCmd::Wup { tree, a, b } => {
            let w = load_tree(&tree)?.wup(&a, &b)?;
            writeln!(out, "{w:?}").map_err(|e| Failure::Data(e.to_string()))
        }
    }
}

fn codec_cmd(cmd: CodecCmd, out: &mut dyn Write) -> Outcome {
    match cmd {
        CodecCmd::Encode {
            latent,
            hyper,
            model,
            out: path,
            no_delta,
            order,
        } => {
            let bundle = load_model(&model)?;
            let y = load_latent(&latent)?;
            let z = load_latent(&hyper)?;
            let opts = CodecOptions {
                delta_refinement: !no_delta,
                ordering: match order {
                    OrderArg::Sigma => SymbolOrdering::Sigma,
                    OrderArg::Coordinate => SymbolOrdering::Coordinate,
                },
            };
            let bs = codec::encode(&y, &z, &bundle, &opts)?;
            write(&path, &bs.to_bytes())?;
            emit(out, &inspect_report(&bs.header, bs.len()))
        }
        CodecCmd::Decode {
            input,
            model,
            level,
            out: path,
        } => {
            let bundle = load_model(&model)?;
            let bytes = read(&input)?;
            let header = Header::parse(&bytes)?;
            let n = header.channels.num_blocks();
            if let Some(l) = level {
                if l == 0 || l > n {
                    return Err(Failure::Usage(format!("--level must be in 1..={n}")));
                }
            }
            #[derive(Serialize)]
            struct Report {
                complete: bool,
                decoded_blocks: usize,
                exact_symbols: Vec<usize>,
                block_symbols: Vec<usize>,
            }
            let (latent, report) = if bytes.len() == header.total_len() {
                let bs = ProgressiveBitstream::from_bytes(&bytes)?;
                let l = level.unwrap_or(n);
                let latent = codec::decode(&bs, &bundle, l)?;
                let plane = header.height * header.width;
                let sizes: Vec<usize> = (1..=n)
                    .map(|b| header.channels.block_channels(b).len() * plane)
                    .collect();
                let exact = (0..n).map(|b| if b < l { sizes[b] } else { 0 }).collect();
                let report = Report {
                    complete: true,
                    decoded_blocks: l,
                    exact_symbols: exact,
                    block_symbols: sizes,
                };
                (latent, report)
            } else {
                let t = codec::decode_truncated(&bytes, &bundle)?;
                let mut latent = t.latent;
                let mut exact = t.exact_counts;
                let mut decoded = t.decoded_blocks;
                if let Some(l) = level {
                    latent = latent.masked(header.channels.prefix_end(l));
                    exact.iter_mut().skip(l).for_each(|c| *c = 0);
                    decoded = decoded.min(l);
                }
                let report = Report {
                    complete: false,
                    decoded_blocks: decoded,
                    exact_symbols: exact,
                    block_symbols: t.block_sizes,
                };
                (latent, report)
            };
            write(&path, &formats::write_tensor(&latent.to_tensor()))?;
            emit(out, &report)
        }
        CodecCmd::Truncate {
            input,
            bytes: count,
            level,
            out: path,
        } => {
            let bytes = read(&input)?;
            let cut = match (count, level) {
                (Some(c), _) => c.min(bytes.len()),
                (None, Some(l)) => {
                    let header = Header::parse(&bytes)?;
                    if l > header.channels.num_blocks() {
                        return Err(Failure::Usage(format!(
                            "--level must be at most {}",
                            header.channels.num_blocks()
                        )));
                    }
                    header.segment_offset(l + 1).min(bytes.len())
                }
                (None, None) => unreachable!("clap requires --bytes or --level"),
            };
            write(&path, &bytes[..cut])?;
            #[derive(Serialize)]
            struct Report {
                bytes: usize,
            }
            emit(out, &Report { bytes: cut })
        }
        CodecCmd::Inspect { input } => {
            let bytes = read(&input)?;
            let header = Header::parse(&bytes)?;
            emit(out, &inspect_report(&header, bytes.len()))
        }
    }
}

#[derive(Serialize)]
struct InspectReport {
    version: u8,
    delta_refinement: bool,
    ordering: &'static str,
    boundaries: Vec<usize>,
    hyper_channels: usize,
    height: usize,
    width: usize,
    weights_hash: String,
    header_bytes: usize,
    segment_bytes: Vec<usize>,
    total_bytes: usize,
    file_bytes: usize,
    pixels: usize,
    bpp: Vec<f64>,
}

fn inspect_report(h: &Header, file_bytes: usize) -> InspectReport {
    let r = codec::rate_report(h);
    InspectReport {
        version: codec::VERSION,
        delta_refinement: h.options.delta_refinement,
        ordering: match h.options.ordering {
            SymbolOrdering::Sigma => "sigma",
            SymbolOrdering::Coordinate => "coordinate",
        },
        boundaries: h.channels.boundaries().to_vec(),
        hyper_channels: h.hyper_channels,
        height: h.height,
        width: h.width,
        weights_hash: hex(&h.weights_hash),
        header_bytes: r.header_bytes,
        segment_bytes: r.segment_bytes,
        total_bytes: r.total_bytes,
        file_bytes,
        pixels: r.pixels,
        bpp: r.bpp,
    }
}

fn eval_cmd(cmd: EvalCmd, out: &mut dyn Write) -> Outcome {
    match cmd {
        EvalCmd::Bdrate { a, b, method } => {
            let a = eval::parse_rd(&read_text(&a)?)?;
            let b = eval::parse_rd(&read_text(&b)?)?;
            let method = match method {
                MethodArg::Cubic => BdMethod::Cubic,
                MethodArg::Pchip => BdMethod::Pchip,
            };
            let mut levels: Vec<usize> = a.iter().map(|p| p.level).collect();
            levels.sort_unstable();
            levels.dedup();
            #[derive(Serialize)]
            struct Level {
                level: usize,
                bd_rate_percent: f64,
            }
            let select = |pts: &[RdPoint], l: usize| -> Vec<RdPoint> {
                pts.iter().filter(|p| p.level == l).copied().collect()
            };
            let mut report = Vec::new();
            for l in levels {
                let pb = select(&b, l);
                if pb.is_empty() {
                    continue;
                }
                report.push(Level {
                    level: l,
                    bd_rate_percent: eval::bd_rate(&select(&a, l), &pb, method)?,
                });
            }
            if report.is_empty() {
                return Err(Failure::Data("curves share no level".into()));
            }
            emit(out, &report)
        }
        EvalCmd::Loss {
            bpp,
            mse,
            ce,
            lambdas,
            gammas,
        } => {
            if bpp.len() != mse.len() || bpp.len() != ce.len() {
                return Err(Failure::Usage(
                    "--bpp, --mse and --ce need one value per level".into(),
                ));
            }
            let terms: Vec<LevelTerms> = bpp
                .iter()
                .zip(&mse)
                .zip(&ce)
                .map(|((&bpp, &mse), &ce)| LevelTerms { bpp, mse, ce })
                .collect();
            let l = eval::composite_loss(&terms, &lambdas, &gammas)?;
            writeln!(out, "{l:?}").map_err(|e| Failure::Data(e.to_string()))
        }
        EvalCmd::Score {
            predictions,
            tree,
            clusterings,
        } => {
            let table = PredictionTable::parse_csv(&read_text(&predictions)?)?;
            let t = load_tree(&tree)?;
            let cs = clusterings
                .iter()
                .map(|p| Ok(Clustering::parse_csv(&read_text(p)?)?))
                .collect::<Result<Vec<_>, Failure>>()?;
            #[derive(Serialize)]
            struct Level {
                level: usize,
                rows: usize,
                accuracy: Option<f64>,
            }
            #[derive(Serialize)]
            struct Report {
                rows: usize,
                wup: f64,
                accuracy: Vec<Level>,
            }
            let accuracy = eval::hierarchical_accuracy(&table, &cs)?
                .into_iter()
                .map(|a| Level {
                    level: a.level,
                    rows: a.rows,
                    accuracy: a.accuracy,
                })
                .collect();
            emit(
                out,
                &Report {
                    rows: table.rows.len(),
                    wup: eval::wup_score(&table, &t)?,
                    accuracy,
                },
            )
        }
    }
}

fn fixtures_cmd(cmd: FixturesCmd, out: &mut dyn Write) -> Outcome {
    let FixturesCmd::Generate {
        out: dir,
        seed,
        height,
        width,
        blocks,
        small,
        embedding_dim,
        images,
    } = cmd;
    let seed = seed.seed;
    if height == 0 || width == 0 || height * width > codec::MAX_POSITIONS || embedding_dim == 0 {
        return Err(Failure::Usage(
            "grid and embedding sizes must be positive and bounded".into(),
        ));
    }
    fs::create_dir_all(&dir).map_err(|e| Failure::Data(format!("{}: {e}", dir.display())))?;
    let channels = ChannelConfig::new(blocks)?;
    let config = if small {
        ModelConfig::small(channels)
    } else {
        ModelConfig {
            channels,
            ..ModelConfig::default()
        }
    };
    let tree_text = fixtures::skewed_taxonomy();
    let t = Taxonomy::parse(&tree_text)?;
    let e = fixtures::hierarchical_embeddings(&t, embedding_dim, seed);
    let bundle = ModelBundle::random(config, seed)?;
    let (y, z) = fixtures::codec_instance(&bundle, height, width, seed.wrapping_add(1))?;
    let (rd_a, rd_b) = fixtures::rd_curves(seed);

    let embeddings: Vec<f32> = (0..e.len())
        .flat_map(|i| e.row(i).to_vec())
        .map(|v| v as f32)
        .collect();
    let mut labels = e.labels().join("\n");
    labels.push('\n');
    let files: Vec<(&str, Vec<u8>)> = vec![
        ("taxonomy.tsv", tree_text.into_bytes()),
        (
            "embeddings.sptn",
            formats::write_tensor(&Tensor::f32(vec![e.len(), e.dim()], embeddings)),
        ),
        ("labels.txt", labels.into_bytes()),
        ("model.scmb", bundle.to_bytes()),
        ("latent.sptn", formats::write_tensor(&y.to_tensor())),
        ("hyper.sptn", formats::write_tensor(&z.to_tensor())),
        (
            "predictions.csv",
            fixtures::predictions(&t, images, seed)
                .to_csv()
                .into_bytes(),
        ),
        ("rd_a.csv", eval::export_rd(&rd_a).into_bytes()),
        ("rd_b.csv", eval::export_rd(&rd_b).into_bytes()),
    ];
    for (name, bytes) in &files {
        write(&dir.join(name), bytes)?;
    }
    #[derive(Serialize)]
    struct Report {
        files: Vec<String>,
        weights_hash: String,
    }
    emit(
        out,
        &Report {
            files: files.iter().map(|(n, _)| (*n).to_owned()).collect(),
            weights_hash: hex(&bundle.hash()),
        },
    )
}

/// Runs one invocation and returns its exit code.
pub fn run<I, T>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(stdout, "{e}");
                return 0;
            }
            let message = e.render().to_string();
            let f = Failure::Usage(message.trim_end().to_owned());
            let _ = writeln!(stderr, "{}", f.line());
            return f.code();
        }
    };
    let result = match cli.command {
        Command::Hierarchy(c) => hierarchy(c, stdout),
        Command::Codec(c) => codec_cmd(c, stdout),
        Command::Eval(c) => eval_cmd(c, stdout),
        Command::Fixtures(c) => fixtures_cmd(c, stdout),
    };
    match result {
        Ok(()) => 0,
        Err(f) => {
            let _ = writeln!(stderr, "{}", f.line());
            f.code()
        }
    }
}
