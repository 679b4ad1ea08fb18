//! Subcommand implementations.

use std::path::{Path, PathBuf};

use clap::{Args, Subcommand};
use serde_json::{json, Value};

use oversmooth::density::{dip_statistic, kde1d, kde2d, phoneme_pairs, phoneme_values, JointAxis};
use oversmooth::dsp::{mel_spectrogram, read_wav, MelFilterbank, DEFAULT_SAMPLE_RATE};
use oversmooth::flow::{train_flow, ConditionedBatch, FlowConfig, FlowModel, FlowTrainConfig};
use oversmooth::io::{decode_mel, encode_mel, parse_alignment};
use oversmooth::metrics::{laplacian_response, ssim, ssim_map, var_laplacian, SsimConfig};
use oversmooth::toylab::{export_corpus, make_corpus, run_experiment, Strategy, ToyCorpusSpec, ToyHyper};
use oversmooth::{Grid, SeededRng, Spectrogram, Utterance};

use crate::report::{sha256_hex, Report};
use crate::svg::{self, Panel};
use crate::{CliError, Common};

type Result<T> = std::result::Result<T, CliError>;

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| CliError::Read {
        path: path.to_path_buf(),
        source,
    })
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| CliError::Read {
        path: path.to_path_buf(),
        source,
    })
}

fn load_mel(path: &Path) -> Result<(Spectrogram, Vec<u8>)> {
    let bytes = read_bytes(path)?;
    Ok((decode_mel(&bytes)?, bytes))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| CliError::Core(e.into()))
}

fn seed(c: &Common) -> Result<u64> {
    if let Some(s) = c.seed {
        return Ok(s);
    }
    match std::env::var("OVERSMOOTH_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("OVERSMOOTH_SEED={v:?} is not an unsigned integer"))),
        Err(_) => Ok(0),
    }
}

fn emit(report: &Report, c: &Common) -> Result<()> {
    let text = report.to_json();
    match &c.out {
        Some(p) => write(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

#[derive(Debug, Args)]
pub struct MelArgs {
    /// Input mono 16-bit PCM WAV at 22050 Hz.
    pub wav: PathBuf,
    /// Output MEL1 file.
    pub mel: PathBuf,
    #[arg(long, default_value_t = 1024)]
    pub frame: usize,
    #[arg(long, default_value_t = 256)]
    pub hop: usize,
    #[arg(long, default_value_t = 80)]
    pub bins: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub floor: f64,
    #[command(flatten)]
    pub common: Common,
}

pub fn mel(a: MelArgs) -> Result<()> {
    let wav_bytes = read_bytes(&a.wav)?;
    let clip = read_wav(&a.wav)?;
    let fb = MelFilterbank::standard(DEFAULT_SAMPLE_RATE, a.frame, a.bins)?;
    let spec = mel_spectrogram(&clip, &fb, a.hop, a.floor)?;
    let bytes = encode_mel(&spec);
    write(&a.mel, &bytes)?;

    let mut r = Report::new("mel");
    r.input("wav", &wav_bytes);
    r.param("frame", a.frame);
    r.param("hop", a.hop);
    r.param("bins", a.bins);
    r.param("floor", a.floor);
    r.result("frames", spec.frames());
    r.result("bins", spec.bins());
    r.result("mel_sha256", sha256_hex(&bytes));
    if spec.frames() >= 3 && spec.bins() >= 3 {
        r.result("var_l", var_laplacian(&spec)?);
    }
    emit(&r, &a.common)
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    pub a: PathBuf,
    /// Second spectrogram; enables SSIM.
    pub b: Option<PathBuf>,
    /// Require SSIM (fails without a second input).
    #[arg(long)]
    pub ssim: bool,
    /// SSIM window width (odd).
    #[arg(long, default_value_t = 11)]
    pub window: usize,
    /// Heatmaps of |Laplacian| and, with two inputs, the SSIM map.
    #[arg(long)]
    pub svg: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

fn abs_grid(g: Grid) -> Grid {
    let (r, c) = g.shape();
    Grid::from_vec(r, c, g.into_vec().into_iter().map(f64::abs).collect()).expect("same shape")
}

pub fn metrics(a: MetricsArgs) -> Result<()> {
    if a.ssim && a.b.is_none() {
        return Err(CliError::Usage("--ssim needs a second spectrogram".into()));
    }
    let (sa, bytes_a) = load_mel(&a.a)?;
    let mut r = Report::new("metrics");
    r.input("a", &bytes_a);
    r.result("var_l", var_laplacian(&sa)?);
    let cfg = SsimConfig {
        window_size: a.window,
        ..SsimConfig::default()
    };
    let mut map = None;
    if let Some(pb) = &a.b {
        let (sb, bytes_b) = load_mel(pb)?;
        r.input("b", &bytes_b);
        r.param("window", a.window);
        r.result("ssim", ssim(&sa, &sb, &cfg)?);
        r.result("var_l_b", var_laplacian(&sb)?);
        map = Some(ssim_map(&sa, &sb, &cfg)?);
    }
    if let Some(path) = &a.svg {
        let lap = abs_grid(laplacian_response(&sa)?);
        let mut panels = vec![Panel {
            title: "|Laplacian| of a".into(),
            x_label: "mel bin".into(),
            y_label: "frame".into(),
            grid: &lap,
        }];
        if let Some(m) = &map {
            panels.push(Panel {
                title: "SSIM map".into(),
                x_label: "mel bin".into(),
                y_label: "frame".into(),
                grid: m,
            });
        }
        write(path, svg::heatmaps("Spectrogram metrics", &panels))?;
    }
    emit(&r, &a.common)
}

#[derive(Debug, Args)]
pub struct DistArgs {
    /// JSON list of `{"mel": path, "align": path}`, relative to the manifest.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub ph: String,
    /// Mel bin(s) for marginal densities; repeat or separate with commas.
    #[arg(long = "bin", alias = "bins", value_delimiter = ',')]
    pub bins: Vec<usize>,
    /// Joint density: `freq:F1,F2` or `time:F,LAG`.
    #[arg(long)]
    pub joint: Option<String>,
    /// Long-form density table.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long)]
    pub svg: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

fn parse_joint(s: &str) -> Result<JointAxis> {
    let bad = || CliError::Usage(format!("--joint {s:?}: expected freq:F1,F2 or time:F,LAG"));
    let (kind, rest) = s.split_once(':').ok_or_else(bad)?;
    let (x, y) = rest.split_once(',').ok_or_else(bad)?;
    let x: usize = x.trim().parse().map_err(|_| bad())?;
    let y: usize = y.trim().parse().map_err(|_| bad())?;
    match kind {
        "freq" => Ok(JointAxis::Freq { f1: x, f2: y }),
        "time" => Ok(JointAxis::Time { f: x, lag: y }),
        _ => Err(bad()),
    }
}

fn load_corpus(manifest: &Path, r: &mut Report) -> Result<Vec<Utterance>> {
    let text = read_text(manifest)?;
    r.input("manifest", text.as_bytes());
    let entries: Value = serde_json::from_str(&text).map_err(|source| CliError::Json {
        path: manifest.to_path_buf(),
        source,
    })?;
    let list = entries
        .as_array()
        .ok_or_else(|| CliError::Usage(format!("{}: expected a JSON list", manifest.display())))?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut corpus = Vec::with_capacity(list.len());
    for (i, e) in list.iter().enumerate() {
        let field = |k: &str| {
            e.get(k)
                .and_then(Value::as_str)
                .map(|p| base.join(p))
                .ok_or_else(|| CliError::Usage(format!("manifest entry {i} lacks {k:?}")))
        };
        let (spec, mel_bytes) = load_mel(&field("mel")?)?;
        let align_text = read_text(&field("align")?)?;
        r.input(format!("mel[{i}]"), &mel_bytes);
        r.input(format!("align[{i}]"), align_text.as_bytes());
        corpus.push(Utterance {
            spec,
            align: parse_alignment(&align_text)?,
        });
    }
    Ok(corpus)
}

pub fn dist(a: DistArgs) -> Result<()> {
    if a.bins.is_empty() == a.joint.is_none() {
        return Err(CliError::Usage("give either --bin or --joint".into()));
    }
    let mut r = Report::new("dist");
    let corpus = load_corpus(&a.manifest, &mut r)?;
    r.param("ph", a.ph.as_str());
    if let Some(j) = &a.joint {
        let axis = parse_joint(j)?;
        r.param("joint", j.as_str());
        let pairs = phoneme_pairs(&corpus, &a.ph, axis)?;
        let d = kde2d(&pairs, None)?;
        r.result("pairs", pairs.len());
        r.result("bandwidths", vec![d.bandwidths.0, d.bandwidths.1]);
        r.result("grid", vec![d.grid_x.len(), d.grid_y.len()]);
        if let Some(path) = &a.csv {
            let mut out = String::from("x,y,density\n");
            for (i, x) in d.grid_x.iter().enumerate() {
                for (j, y) in d.grid_y.iter().enumerate() {
                    out.push_str(&format!("{x},{y},{}\n", d.at(i, j)));
                }
            }
            write(path, out)?;
        }
        if let Some(path) = &a.svg {
            let (nx, ny) = (d.grid_x.len(), d.grid_y.len());
            // y grows upward
            let mut g = Grid::zeros(ny, nx);
            for i in 0..nx {
                for j in 0..ny {
                    g.set(ny - 1 - j, i, d.at(i, j));
                }
            }
            let panel = Panel {
                title: format!("{} {j}", a.ph),
                x_label: "first value (grid index)".into(),
                y_label: "second value (grid index, upward)".into(),
                grid: &g,
            };
            write(path, svg::heatmaps("Joint density", &[panel]))?;
        }
    } else {
        r.param("bins", a.bins.clone());
        let mut cells = Vec::new();
        let mut series = Vec::new();
        let mut csv = String::from("bin,x,density\n");
        let mut dip_sum = 0.0;
        for &f in &a.bins {
            let values = phoneme_values(&corpus, &a.ph, f)?;
            let d = kde1d(&values, None, None)?;
            let dip = dip_statistic(&values)?.dip;
            dip_sum += dip;
            cells.push(json!({
                "bin": f,
                "n": values.len(),
                "bandwidth": d.bandwidth,
                "dip": dip,
                "modes": d.local_maxima().len(),
            }));
            for (x, v) in d.grid.iter().zip(&d.values) {
                csv.push_str(&format!("{f},{x},{v}\n"));
            }
            series.push((format!("bin {f}"), d.grid.iter().copied().zip(d.values.iter().copied()).collect()));
        }
        r.result("cells", cells);
        r.result("mean_dip", dip_sum / a.bins.len() as f64);
        if let Some(path) = &a.csv {
            write(path, csv)?;
        }
        if let Some(path) = &a.svg {
            let title = format!("Marginal densities for {}", a.ph);
            write(path, svg::line_chart(&title, "log-mel value", "density", &series))?;
        }
    }
    emit(&r, &a.common)
}

#[derive(Debug, Args)]
pub struct ToylabArgs {
    /// Built-in corpus.
    #[arg(long, default_value = "canonical", conflicts_with = "spec")]
    pub preset: String,
    /// Corpus specification as JSON.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Comma-separated strategy names; all when omitted.
    #[arg(long, value_delimiter = ',')]
    pub strategies: Vec<String>,
    #[arg(long)]
    pub markdown: Option<PathBuf>,
    /// Bar chart of Var_L and mode coherence.
    #[arg(long)]
    pub svg: Option<PathBuf>,
    /// Also write the training corpus as MEL1 files plus a manifest.
    #[arg(long)]
    pub export_corpus: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

pub fn toylab(a: ToylabArgs) -> Result<()> {
    let seed = seed(&a.common)?;
    let mut r = Report::new("toylab");
    let spec = match &a.spec {
        Some(p) => {
            let text = read_text(p)?;
            r.input("spec", text.as_bytes());
            serde_json::from_str::<ToyCorpusSpec>(&text).map_err(|source| CliError::Json {
                path: p.clone(),
                source,
            })?
        }
        None if a.preset == "canonical" => {
            r.param("preset", "canonical");
            ToyCorpusSpec::canonical(seed)
        }
        None => {
            return Err(CliError::Usage(format!(
                "unknown preset {:?}; available: canonical",
                a.preset
            )))
        }
    };
    let strategies: Vec<Strategy> = if a.strategies.is_empty() {
        Strategy::ALL.to_vec()
    } else {
        a.strategies
            .iter()
            .map(|s| {
                s.parse().map_err(|_| {
                    CliError::Usage(format!(
                        "unknown strategy {s:?}; valid names: {}",
                        Strategy::names().join(", ")
                    ))
                })
            })
            .collect::<Result<_>>()?
    };
    r.param("seed", seed);
    r.param("strategies", strategies.iter().map(|s| s.name()).collect::<Vec<_>>());
    let hyper = ToyHyper::for_spec(&spec);
    let exp = run_experiment(&spec, &strategies, seed, &hyper)?;
    r.result(
        "experiment",
        serde_json::to_value(&exp).map_err(|e| CliError::Usage(e.to_string()))?,
    );
    if let Some(path) = &a.markdown {
        write(path, exp.to_markdown())?;
    }
    if let Some(path) = &a.svg {
        let cats: Vec<String> = exp.rows.iter().map(|row| row.strategy.clone()).collect();
        let var_l: Vec<f64> = exp.rows.iter().map(|row| row.var_l.unwrap_or(0.0)).collect();
        let coh: Vec<f64> = exp.rows.iter().map(|row| row.mode_coherence).collect();
        let dip: Vec<f64> = exp.rows.iter().map(|row| row.dip).collect();
        let series = vec![
            ("Var_L".to_string(), var_l),
            ("mode coherence".to_string(), coh),
            ("mean dip".to_string(), dip),
        ];
        write(path, svg::bar_chart("Toy experiment", "score", &cats, &series))?;
    }
    if let Some(dir) = &a.export_corpus {
        let corpus = make_corpus(&ToyCorpusSpec { seed, ..spec })?;
        export_corpus(&corpus, dir)?;
    }
    emit(&r, &a.common)
}

#[derive(Debug, Subcommand)]
pub enum FlowAction {
    /// Fit an unconditioned flow to MEL1 spectrograms (channels = mel bins).
    Train(FlowTrainArgs),
    /// Draw one spectrogram from a checkpoint.
    Sample(FlowSampleArgs),
    /// Mean negative log-likelihood of spectrograms under a checkpoint.
    Nll(FlowNllArgs),
}

#[derive(Debug, Args)]
pub struct FlowTrainArgs {
    #[arg(required = true)]
    pub mels: Vec<PathBuf>,
    /// Output FLW1 checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub steps: usize,
    #[arg(long, default_value_t = 16)]
    pub hidden: usize,
    /// Frames on each side visible to the coupling networks.
    #[arg(long, default_value_t = 0)]
    pub context: usize,
    #[arg(long, default_value_t = 500)]
    pub iterations: usize,
    #[arg(long, default_value_t = 5e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    #[arg(long, default_value_t = 50)]
    pub eval_every: usize,
    /// Training curve as CSV.
    #[arg(long)]
    pub curve: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct FlowSampleArgs {
    /// Output MEL1 file.
    pub mel: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub frames: usize,
    /// Latent standard deviation.
    #[arg(long, default_value_t = 1.0)]
    pub tau: f64,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct FlowNllArgs {
    #[arg(required = true)]
    pub mels: Vec<PathBuf>,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

fn load_targets(paths: &[PathBuf], r: &mut Report) -> Result<Vec<Grid>> {
    paths
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let (s, bytes) = load_mel(p)?;
            r.input(format!("mel[{i}]"), &bytes);
            Ok(s.to_grid())
        })
        .collect()
}

fn load_checkpoint(path: &Path, r: &mut Report) -> Result<FlowModel> {
    let bytes = read_bytes(path)?;
    r.input("checkpoint", &bytes);
    Ok(FlowModel::decode(&bytes)?)
}

pub fn flow(action: FlowAction) -> Result<()> {
    match action {
        FlowAction::Train(a) => {
            let seed = seed(&a.common)?;
            let mut r = Report::new("flow train");
            let targets = load_targets(&a.mels, &mut r)?;
            let channels = targets[0].cols();
            let cfg = FlowConfig {
                channels,
                cond_dim: 0,
                steps: a.steps,
                hidden: a.hidden,
                context: a.context,
            };
            let train = FlowTrainConfig {
                iterations: a.iterations,
                step_size: a.lr,
                batch_size: a.batch,
                eval_every: a.eval_every,
                seed,
            };
            let data = ConditionedBatch::new(
                targets.clone(),
                targets.iter().map(|y| Grid::zeros(y.rows(), 0)).collect(),
            )?;
            let (model, curve) = train_flow(FlowModel::new(cfg, seed)?, &data, &train)?;
            let bytes = model.encode()?;
            write(&a.checkpoint, &bytes)?;
            if let Some(p) = &a.curve {
                write(p, curve.to_csv())?;
            }
            for (k, v) in [
                ("steps", a.steps),
                ("hidden", a.hidden),
                ("context", a.context),
                ("iterations", a.iterations),
                ("batch", a.batch),
                ("eval_every", a.eval_every),
            ] {
                r.param(k, v);
            }
            r.param("lr", a.lr);
            r.param("seed", seed);
            r.result("initial_nll", curve.initial());
            r.result("final_nll", curve.last());
            r.result(
                "curve",
                curve.points.iter().map(|&(s, v)| json!([s, v])).collect::<Vec<_>>(),
            );
            r.result("checkpoint_sha256", sha256_hex(&bytes));
            emit(&r, &a.common)
        }
        FlowAction::Sample(a) => {
            let seed = seed(&a.common)?;
            let mut r = Report::new("flow sample");
            let model = load_checkpoint(&a.checkpoint, &mut r)?;
            if a.frames == 0 {
                return Err(CliError::Usage("--frames must be positive".into()));
            }
            let mut rng = SeededRng::new(seed, 0);
            let cond = Grid::zeros(a.frames, model.config().cond_dim);
            let y = model.sample(&cond, &mut rng, a.tau)?;
            let bytes = encode_mel(&y.to_spectrogram()?);
            write(&a.mel, &bytes)?;
            r.param("frames", a.frames);
            r.param("tau", a.tau);
            r.param("seed", seed);
            r.result("mel_sha256", sha256_hex(&bytes));
            emit(&r, &a.common)
        }
        FlowAction::Nll(a) => {
            let mut r = Report::new("flow nll");
            let model = load_checkpoint(&a.checkpoint, &mut r)?;
            let targets = load_targets(&a.mels, &mut r)?;
            let d = model.config().cond_dim;
            let conds: Vec<Grid> = targets.iter().map(|y| Grid::zeros(y.rows(), d)).collect();
            let per: Vec<f64> = targets
                .iter()
                .zip(&conds)
                .map(|(y, x)| model.nll_one(y, x))
                .collect::<oversmooth::Result<_>>()?;
            let dims: usize = targets.iter().map(|y| y.data().len()).sum();
            let data = ConditionedBatch::new(targets, conds)?;
            r.result("nll", model.nll(&data)?);
            r.result("nll_per_dim", per.iter().sum::<f64>() / dims as f64);
            r.result("per_file", per);
            emit(&r, &a.common)
        }
    }
}
