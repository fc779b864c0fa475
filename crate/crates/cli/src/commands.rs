use std::fmt;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use styleflow::data::{load_image, pad_to_multiple, save_png, scan_dir, scan_domain};
use styleflow::flow::{FlowNetwork, NetConfig};
use styleflow::infer::{fit_style_prior, translate_guided, translate_with_style, SampleRecord};
use styleflow::metrics::evaluate_run;
use styleflow::perceptual::{load_encoder, PerceptualEncoder};
use styleflow::tensor::Tensor;
use styleflow::train::{load_checkpoint, RunConfig, TrainState, Trainer};
use styleflow::Error;

/// A command failure: a library error or a failed invertibility check.
#[derive(Debug)]
pub enum Failure {
    Core(Error),
    ToleranceExceeded { error: f64, tolerance: f64 },
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Core(e) => write!(f, "{e}"),
            Failure::ToleranceExceeded { error, tolerance } => {
                write!(f, "round-trip error {error:e} exceeds tolerance {tolerance:e}")
            }
        }
    }
}

impl Failure {
    fn kind(&self) -> &'static str {
        match self {
            Failure::Core(e) => e.kind(),
            Failure::ToleranceExceeded { .. } => "tolerance",
        }
    }
}

pub type Outcome = std::result::Result<(), Failure>;

/// `{"error": <kind>, "message": <text>}` on a single line.
pub fn error_line(f: &Failure) -> String {
    let message = f.to_string().replace('\n', " ");
    serde_json::json!({ "error": f.kind(), "message": message }).to_string()
}

fn parameter(msg: impl Into<String>) -> Failure {
    Failure::Core(Error::Parameter(msg.into()))
}

/// A single image, or every image of a directory in lexicographic order.
fn image_files(path: &Path) -> Result<Vec<PathBuf>, Failure> {
    if path.is_dir() {
        Ok(scan_dir("src", path)?.files)
    } else {
        Ok(vec![path.to_path_buf()])
    }
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into())
}

fn create_dir(dir: &Path) -> Outcome {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    Ok(())
}

/// Checkpoint and the encoder it was trained against.
fn load_model(checkpoint: &Path) -> Result<(TrainState<f32>, PerceptualEncoder<f32>), Failure> {
    let state = load_checkpoint::<f32>(checkpoint)?;
    let enc = load_encoder::<f32>(&state.encoder)?;
    if enc.style_dim() != state.net.config().style_dim {
        return Err(Failure::Core(Error::Config {
            path: checkpoint.to_path_buf(),
            reason: format!(
                "encoder '{}' gives style vectors of length {}, the network expects {}",
                state.encoder,
                enc.style_dim(),
                state.net.config().style_dim
            ),
        }));
    }
    Ok((state, enc))
}

pub fn train(config: &Path, checkpoint: Option<&Path>, k: Option<f64>, seed: Option<u64>) -> Outcome {
    let mut cfg = RunConfig::load(config)?;
    if let Some(k) = k {
        cfg.k = k;
    }
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let mut trainer = match checkpoint {
        Some(path) => Trainer::<f32>::resume(cfg, path)?,
        None => Trainer::<f32>::new(cfg)?,
    };
    let last = trainer.run(|step, r| {
        log::debug!("step {step}: {}", r.log_line(step));
        if step % 100 == 0 {
            log::info!(
                "step {step}: total {:.5} content {:.5} style {:.5} smooth {:.5}",
                r.total,
                r.content,
                r.aligned_style,
                r.smooth
            );
        }
    })?;
    println!("{}", last.display());
    Ok(())
}

pub fn translate(checkpoint: &Path, src: &Path, reference: &Path, out: &Path) -> Outcome {
    let (state, enc) = load_model(checkpoint)?;
    let style_image = load_image::<f32>(reference, None, None)?;
    create_dir(out)?;
    for path in image_files(src)? {
        let image = load_image::<f32>(&path, None, None)?;
        let result = translate_guided(&image, &style_image, &state.net, &enc)?;
        let target = out.join(format!("{}.png", stem(&path)));
        save_png(&result, &target)?;
        println!("{}", target.display());
    }
    Ok(())
}

pub struct SampleArgs<'a> {
    pub checkpoint: &'a Path,
    pub config: &'a Path,
    pub src: &'a Path,
    pub domain: &'a str,
    pub n: usize,
    pub temperature: f64,
    pub seed: u64,
    pub out: &'a Path,
}

/// Fits the named domain's prior, then writes `n` draws per source image
/// with a JSON sidecar each. The seed fixes every draw.
pub fn sample(args: &SampleArgs<'_>) -> Outcome {
    let cfg = RunConfig::load(args.config)?;
    let (domain_id, spec) = cfg
        .target_domains()
        .enumerate()
        .find(|(_, d)| d.name == args.domain)
        .ok_or_else(|| {
            let names: Vec<&str> = cfg.target_domains().map(|d| d.name.as_str()).collect();
            parameter(format!(
                "unknown target domain '{}' (config has: {})",
                args.domain,
                names.join(", ")
            ))
        })?;
    let (state, enc) = load_model(args.checkpoint)?;
    let images = scan_domain(spec)?
        .files
        .iter()
        .map(|p| load_image::<f32>(p, spec.crop, Some(spec.resize)))
        .collect::<styleflow::Result<Vec<_>>>()?;
    let prior = fit_style_prior(&images, &enc, domain_id)?;
    create_dir(args.out)?;
    prior.save(&args.out.join(format!("prior_{}.json", args.domain)))?;

    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    for path in image_files(args.src)? {
        let image = load_image::<f32>(&path, None, None)?;
        for draw in 0..args.n {
            let style = prior.sample::<f32, _>(args.temperature, &mut rng)?;
            let result = translate_with_style(&image, &style, &state.net)?;
            let name = format!("{}_{}_{draw}", stem(&path), args.domain);
            let target = args.out.join(format!("{name}.png"));
            save_png(&result, &target)?;
            let record = SampleRecord {
                source: path.display().to_string(),
                output: target.display().to_string(),
                seed: args.seed,
                temperature: args.temperature,
                domain: args.domain.to_string(),
                domain_id,
                draw,
            };
            let sidecar = args.out.join(format!("{name}.json"));
            let text = serde_json::to_string_pretty(&record).expect("record serializes");
            std::fs::write(&sidecar, text).map_err(|source| Error::Io { path: sidecar, source })?;
            println!("{}", target.display());
        }
    }
    Ok(())
}

pub fn evaluate(
    out: &Path,
    src: &Path,
    reference: &Path,
    report: Option<PathBuf>,
    encoder: Option<String>,
    checkpoint: Option<&Path>,
) -> Outcome {
    let spec = match (encoder, checkpoint) {
        (Some(spec), _) => spec,
        (None, Some(ckpt)) => load_checkpoint::<f32>(ckpt)?.encoder,
        (None, None) => return Err(parameter("evaluate needs --encoder or --checkpoint")),
    };
    let enc = load_encoder::<f32>(&spec)?;
    let result = evaluate_run(out, src, reference, &enc)?;
    let path = report.unwrap_or_else(|| out.join("report.jsonl"));
    result.write(&path)?;
    println!("{}", serde_json::to_string(&result.summary).expect("summary serializes"));
    Ok(())
}

fn parse_shape(shape: &str) -> Result<[usize; 4], Failure> {
    let dims: Vec<usize> = shape
        .split(',')
        .map(|d| d.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| parameter(format!("shape must be B,C,H,W, got '{shape}'")))?;
    match dims[..] {
        [b, c, h, w] if b > 0 && c > 0 && h > 0 && w > 0 => Ok([b, c, h, w]),
        _ => Err(parameter(format!("shape must be four positive integers B,C,H,W, got '{shape}'"))),
    }
}

/// Round trip `x -> E -> E^-1` on uniform inputs; `fresh` uses a default
/// network whose actnorm layers are initialized on those inputs.
pub fn invert_check(checkpoint: &str, shape: &str, tolerance: f64, seed: u64) -> Outcome {
    let shape = parse_shape(shape)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = if checkpoint == "fresh" {
        FlowNetwork::<f32>::new(NetConfig::default(), &mut rng)?
    } else {
        load_checkpoint::<f32>(Path::new(checkpoint))?.net
    };
    let x = Tensor::<f32>::uniform(&shape, 0.0, 1.0, &mut rng);
    let (x, _) = pad_to_multiple(&x, net.config().divisor())?;
    if !net.is_initialized() {
        net.initialize(&x)?;
    }
    let z = net.encode(&x)?.pop().expect("at least one block");
    let error = f64::from(net.decode(&z, None)?.max_abs_diff(&x));
    let pass = error < tolerance;
    println!(
        "{}",
        serde_json::json!({ "max_abs_error": error, "tolerance": tolerance, "pass": pass })
    );
    if pass {
        Ok(())
    } else {
        Err(Failure::ToleranceExceeded { error, tolerance })
    }
}
