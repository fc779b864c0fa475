//! Training: run configuration, optimizer state, the single update step,
//! checkpoints and the training loop.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive;
use crate::autodiff::Graph;
use crate::data::{sample_pair, Domain, DomainSpec, Role};
use crate::error::{Error, Result};
use crate::flow::{FlowNetwork, NetConfig, DEFAULT_COUPLING_HIDDEN};
use crate::infer::stylize_var;
use crate::losses::{objective_var, LossReport, LossWeights};
use crate::params::Parameters;
use crate::perceptual::{load_encoder, PerceptualEncoder};
use crate::san::{CgaMode, DEFAULT_CGA_HIDDEN};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Checkpoint layout version written by this build.
pub const CHECKPOINT_VERSION: u32 = 1;

/// Every hyperparameter of a training run, read from a TOML file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Number of blocks `M`.
    pub blocks: usize,
    /// Flow steps per block `N`.
    pub flows: usize,
    pub hidden: usize,
    pub cga_hidden: usize,
    pub cga_mode: CgaMode,
    pub lr: f64,
    pub batch_size: usize,
    /// Source images used for the data-dependent actnorm initialization.
    pub init_batch: usize,
    pub iterations: u64,
    pub k: f64,
    pub lambda_style: f64,
    pub lambda_smooth: f64,
    pub seed: u64,
    pub checkpoint_every: u64,
    /// Global gradient-norm clip.
    pub grad_clip: f64,
    /// Weight file or `stub:<seed>`.
    pub encoder: String,
    pub output_dir: PathBuf,
    pub domains: Vec<DomainSpec>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            blocks: 2,
            flows: 15,
            hidden: DEFAULT_COUPLING_HIDDEN,
            cga_hidden: DEFAULT_CGA_HIDDEN,
            cga_mode: CgaMode::Direct,
            lr: 5e-5,
            batch_size: 1,
            init_batch: 8,
            iterations: 100_000,
            k: 1.0,
            lambda_style: 0.1,
            lambda_smooth: 10.0,
            seed: 0,
            checkpoint_every: 1000,
            grad_clip: 5.0,
            encoder: "vgg19.safetensors".into(),
            output_dir: PathBuf::from("runs"),
            domains: Vec::new(),
        }
    }
}

impl RunConfig {
    /// Parses a config file; relative paths are taken from its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let err = |reason: String| Error::Config {
            path: path.to_path_buf(),
            reason,
        };
        let text = fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| err(e.message().to_string()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        rebase(&mut cfg.output_dir);
        for d in &mut cfg.domains {
            rebase(&mut d.root);
        }
        if !cfg.encoder.starts_with("stub:") {
            let p = base.join(&cfg.encoder);
            if p.exists() {
                cfg.encoder = p.to_string_lossy().into_owned();
            }
        }
        cfg.validate().map_err(|e| err(e.to_string()))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("blocks", self.blocks),
            ("flows", self.flows),
            ("hidden", self.hidden),
            ("cga_hidden", self.cga_hidden),
            ("batch_size", self.batch_size),
            ("init_batch", self.init_batch),
            ("checkpoint_every", self.checkpoint_every as usize),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::Parameter(format!("{key} must be positive")));
            }
        }
        for (key, v) in [("lr", self.lr), ("grad_clip", self.grad_clip)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Parameter(format!("{key} must be positive, got {v}")));
            }
        }
        self.loss_weights().validate()?;
        let sources = self.domains.iter().filter(|d| d.role == Role::Source).count();
        if sources != 1 {
            return Err(Error::Parameter(format!(
                "domains: exactly one source domain required, found {sources}"
            )));
        }
        if !self.domains.iter().any(|d| d.role == Role::Target) {
            return Err(Error::Parameter("domains: at least one target domain required".into()));
        }
        let size = self.domains[0].resize;
        if let Some(d) = self.domains.iter().find(|d| d.resize != size) {
            return Err(Error::Parameter(format!(
                "domains: '{}' resizes to {:?} but '{}' to {size:?}; training compares images pixelwise",
                d.name, d.resize, self.domains[0].name
            )));
        }
        Ok(())
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_style: self.lambda_style,
            lambda_smooth: self.lambda_smooth,
            k: self.k,
        }
    }

    pub fn net_config(&self, style_dim: usize) -> NetConfig {
        NetConfig {
            blocks: self.blocks,
            flows: self.flows,
            in_channels: 3,
            hidden: self.hidden,
            style_dim,
            cga_hidden: self.cga_hidden,
            cga_mode: self.cga_mode,
        }
    }

    pub fn target_domains(&self) -> impl Iterator<Item = &DomainSpec> {
        self.domains.iter().filter(|d| d.role == Role::Target)
    }
}

/// Adam with bias correction and a constant learning rate.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Applies one update to every parameter that has a gradient.
    pub fn step<P: Parameters<T>>(&mut self, model: &mut P, grads: &BTreeMap<String, Tensor<T>>) {
        self.t += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(self.t as i32));
        let c2 = T::lit(1.0 - self.beta2.powi(self.t as i32));
        let (lr, eps) = (T::lit(self.lr), T::lit(self.eps));
        let (ms, vs) = (&mut self.m, &mut self.v);
        model.visit_params_mut("", &mut |name, p| {
            let Some(g) = grads.get(&name) else {
                return;
            };
            let m = ms.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
            let v = vs.entry(name).or_insert_with(|| Tensor::zeros(p.shape()));
            for (((w, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + (T::one() - b1) * gv;
                *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                *w -= lr * (*mv / c1) / ((*vv / c2).sqrt() + eps);
            }
        });
    }
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub step: u64,
    pub net: FlowNetwork<T>,
    pub optimizer: Adam<T>,
    /// Drives data sampling.
    pub rng: ChaCha8Rng,
    /// Encoder spec the network was trained against.
    pub encoder: String,
}

impl<T: Scalar> TrainState<T> {
    /// Fresh state; the network draws from stream 0 of the seed and data
    /// sampling from stream 1.
    pub fn new(cfg: &RunConfig, style_dim: usize) -> Result<Self> {
        let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let net = FlowNetwork::new(cfg.net_config(style_dim), &mut init_rng)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Ok(TrainState {
            step: 0,
            net,
            optimizer: Adam::new(cfg.lr),
            rng,
            encoder: cfg.encoder.clone(),
        })
    }
}

/// One optimization step on a batch of `(source, target)` images, which
/// must share one shape. Initializes actnorm layers on first use.
pub fn train_step<T: Scalar>(
    state: &mut TrainState<T>,
    source: &Tensor<T>,
    target: &Tensor<T>,
    cfg: &RunConfig,
    enc: &PerceptualEncoder<T>,
) -> Result<LossReport> {
    let weights = cfg.loss_weights();
    if !state.net.is_initialized() {
        let (padded, _) = crate::data::pad_to_multiple(source, state.net.config().divisor())?;
        state.net.initialize(&padded)?;
    }
    let style = enc.extract_style(target)?;
    let (report, grads) = {
        let net = &state.net;
        let g = Graph::new();
        let gen = stylize_var(&g, net, source, &g.constant(style.0))?;
        let objective = objective_var(&g, &gen, source, target, enc, &weights)?;
        let report = objective.report(&weights)?;
        let back = g.backward(&objective.total);
        let mut grads = BTreeMap::new();
        for (name, p) in net.named_params() {
            if let Some(v) = g.param_var(p) {
                grads.insert(name, back.wrt_or_zeros(&v));
            }
        }
        (report, grads)
    };
    let grads = clip_global_norm(grads, cfg.grad_clip);
    state.optimizer.lr = cfg.lr;
    state.optimizer.step(&mut state.net, &grads);
    state.step += 1;
    Ok(report)
}

/// Scales all gradients together so their joint norm is at most `max_norm`.
pub fn clip_global_norm<T: Scalar>(
    mut grads: BTreeMap<String, Tensor<T>>,
    max_norm: f64,
) -> BTreeMap<String, Tensor<T>> {
    let norm = grads
        .values()
        .map(|g| g.sq_norm().to_f64().unwrap_or(f64::INFINITY))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let k = T::lit(max_norm / norm);
        for g in grads.values_mut() {
            *g = g.map(|v| v * k);
        }
    }
    grads
}

#[derive(Serialize, Deserialize)]
struct RngState {
    seed: [u8; 32],
    stream: u64,
    word_pos: String,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    version: u32,
    dtype: String,
    step: u64,
    net: NetConfig,
    actnorm_initialized: Vec<bool>,
    encoder: String,
    rng: RngState,
    adam: AdamMeta,
}

#[derive(Serialize, Deserialize)]
struct AdamMeta {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
}

const NET_PREFIX: &str = "net.";
const ADAM_M_PREFIX: &str = "adam.m.";
const ADAM_V_PREFIX: &str = "adam.v.";

fn checkpoint_parts<T: Scalar>(state: &TrainState<T>) -> (BTreeMap<String, Tensor<T>>, serde_json::Value) {
    let mut tensors = BTreeMap::new();
    for (name, t) in state.net.named_params() {
        tensors.insert(format!("{NET_PREFIX}{name}"), t.clone());
    }
    for (name, t) in &state.optimizer.m {
        tensors.insert(format!("{ADAM_M_PREFIX}{name}"), t.clone());
    }
    for (name, t) in &state.optimizer.v {
        tensors.insert(format!("{ADAM_V_PREFIX}{name}"), t.clone());
    }
    let meta = CheckpointMeta {
        version: CHECKPOINT_VERSION,
        dtype: T::NAME.into(),
        step: state.step,
        net: state.net.config().clone(),
        actnorm_initialized: state.net.actnorm_flags(),
        encoder: state.encoder.clone(),
        rng: RngState {
            seed: state.rng.get_seed(),
            stream: state.rng.get_stream(),
            word_pos: state.rng.get_word_pos().to_string(),
        },
        adam: AdamMeta {
            lr: state.optimizer.lr,
            beta1: state.optimizer.beta1,
            beta2: state.optimizer.beta2,
            eps: state.optimizer.eps,
            t: state.optimizer.t,
        },
    };
    (tensors, serde_json::to_value(meta).expect("meta serializes"))
}

/// Writes a checkpoint atomically.
pub fn save_checkpoint<T: Scalar>(state: &TrainState<T>, path: &Path) -> Result<()> {
    let (tensors, meta) = checkpoint_parts(state);
    archive::save(path, &tensors, &meta)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<TrainState<T>> {
    let fail = |reason: String| Error::Load {
        path: path.to_path_buf(),
        reason,
    };
    let archive = archive::load::<T>(path)?;
    let version = archive.meta.get("version").cloned().unwrap_or(serde_json::Value::Null);
    if version.as_u64() != Some(CHECKPOINT_VERSION as u64) {
        return Err(Error::Version {
            path: path.to_path_buf(),
            found: version.to_string(),
            expected: CHECKPOINT_VERSION,
        });
    }
    let meta: CheckpointMeta =
        serde_json::from_value(archive.meta).map_err(|e| fail(format!("bad checkpoint metadata: {e}")))?;
    // Parameter shapes come from the config; the values are overwritten below.
    let mut net = FlowNetwork::new(meta.net.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    let mut tensors = archive.tensors;
    let mut problem = None;
    net.visit_params_mut("", &mut |name, p| {
        match tensors.remove(&format!("{NET_PREFIX}{name}")) {
            Some(t) if t.shape() == p.shape() => *p = t,
            Some(t) => {
                problem.get_or_insert(format!("tensor '{name}' has shape {:?}, expected {:?}", t.shape(), p.shape()));
            }
            None => {
                problem.get_or_insert(format!("missing tensor '{NET_PREFIX}{name}'"));
            }
        }
    });
    if let Some(p) = problem {
        return Err(fail(p));
    }
    net.set_actnorm_flags(&meta.actnorm_initialized)?;
    let mut optimizer = Adam::new(meta.adam.lr);
    optimizer.beta1 = meta.adam.beta1;
    optimizer.beta2 = meta.adam.beta2;
    optimizer.eps = meta.adam.eps;
    optimizer.t = meta.adam.t;
    for (name, t) in tensors {
        if let Some(n) = name.strip_prefix(ADAM_M_PREFIX) {
            optimizer.m.insert(n.to_string(), t);
        } else if let Some(n) = name.strip_prefix(ADAM_V_PREFIX) {
            optimizer.v.insert(n.to_string(), t);
        } else {
            return Err(fail(format!("unexpected tensor '{name}'")));
        }
    }
    let mut rng = ChaCha8Rng::from_seed(meta.rng.seed);
    rng.set_stream(meta.rng.stream);
    rng.set_word_pos(
        meta.rng
            .word_pos
            .parse()
            .map_err(|_| fail("bad rng word position".into()))?,
    );
    Ok(TrainState {
        step: meta.step,
        net,
        optimizer,
        rng,
        encoder: meta.encoder,
    })
}

/// Path of the checkpoint for `step` inside a run directory.
pub fn checkpoint_path(output_dir: &Path, step: u64) -> PathBuf {
    output_dir.join("checkpoints").join(format!("step_{step:08}.safetensors"))
}

/// Drives a configured run: data, encoder, state and log.
pub struct Trainer<T> {
    pub cfg: RunConfig,
    pub encoder: PerceptualEncoder<T>,
    pub state: TrainState<T>,
    source: Domain,
    targets: Vec<Domain>,
    last_checkpoint: Option<PathBuf>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let encoder = load_encoder::<T>(&cfg.encoder)?;
        let state = TrainState::new(&cfg, encoder.style_dim())?;
        Self::assemble(cfg, encoder, state)
    }

    /// Continues from a checkpoint written by an earlier run of `cfg`.
    pub fn resume(cfg: RunConfig, checkpoint: &Path) -> Result<Self> {
        cfg.validate()?;
        let encoder = load_encoder::<T>(&cfg.encoder)?;
        let state = load_checkpoint::<T>(checkpoint)?;
        if state.net.config() != &cfg.net_config(encoder.style_dim()) {
            return Err(Error::Config {
                path: checkpoint.to_path_buf(),
                reason: "checkpoint network does not match the run configuration".into(),
            });
        }
        let mut t = Self::assemble(cfg, encoder, state)?;
        t.last_checkpoint = Some(checkpoint.to_path_buf());
        Ok(t)
    }

    fn assemble(cfg: RunConfig, encoder: PerceptualEncoder<T>, state: TrainState<T>) -> Result<Self> {
        let mut source = None;
        let mut targets = Vec::new();
        for spec in &cfg.domains {
            let d = Domain::open(spec.clone())?;
            match spec.role {
                Role::Source => source = Some(d),
                Role::Target => targets.push(d),
            }
        }
        Ok(Trainer {
            source: source.expect("validated config has a source domain"),
            targets,
            cfg,
            encoder,
            state,
            last_checkpoint: None,
        })
    }

    /// Initializes actnorm on `init_batch` freshly drawn source images.
    fn initialize(&mut self) -> Result<()> {
        let images = (0..self.cfg.init_batch)
            .map(|_| self.source.draw::<T, _>(&mut self.state.rng).map(|(t, _)| t))
            .collect::<Result<Vec<_>>>()?;
        let batch = Tensor::stack_batch(&images)?;
        let (padded, _) = crate::data::pad_to_multiple(&batch, self.state.net.config().divisor())?;
        self.state.net.initialize(&padded)
    }

    /// Samples a batch and takes one step.
    pub fn step(&mut self) -> Result<LossReport> {
        if !self.state.net.is_initialized() {
            self.initialize()?;
        }
        let mut sources = Vec::with_capacity(self.cfg.batch_size);
        let mut targets = Vec::with_capacity(self.cfg.batch_size);
        for _ in 0..self.cfg.batch_size {
            let pair = sample_pair::<T, _>(&mut self.state.rng, &self.source, &self.targets)?;
            sources.push(pair.source);
            targets.push(pair.target);
        }
        let source = Tensor::stack_batch(&sources)?;
        let target = Tensor::stack_batch(&targets)?;
        train_step(&mut self.state, &source, &target, &self.cfg, &self.encoder).map_err(|e| match e {
            Error::NonFinite { component, value } => Error::Diverged {
                step: self.state.step + 1,
                component,
                value,
                last_checkpoint: self.last_checkpoint.clone(),
            },
            other => other,
        })
    }

    pub fn save(&mut self) -> Result<PathBuf> {
        let path = checkpoint_path(&self.cfg.output_dir, self.state.step);
        save_checkpoint(&self.state, &path)?;
        self.last_checkpoint = Some(path.clone());
        Ok(path)
    }

    /// Trains up to `cfg.iterations`, appending to `train_log.jsonl` and
    /// checkpointing every `checkpoint_every` steps and at the end. The
    /// callback sees every report.
    pub fn run(&mut self, mut on_step: impl FnMut(u64, &LossReport)) -> Result<PathBuf> {
        fs::create_dir_all(&self.cfg.output_dir).map_err(|e| Error::io(&self.cfg.output_dir, e))?;
        let log_path = self.cfg.output_dir.join("train_log.jsonl");
        let mut log = open_log(&log_path, self.state.step == 0)?;
        let mut last = match &self.last_checkpoint {
            Some(p) => p.clone(),
            None => self.save()?,
        };
        while self.state.step < self.cfg.iterations {
            let report = self.step()?;
            let step = self.state.step;
            writeln!(log, "{}", report.log_line(step)).map_err(|e| Error::io(&log_path, e))?;
            on_step(step, &report);
            if step.is_multiple_of(self.cfg.checkpoint_every) || step == self.cfg.iterations {
                log.flush().map_err(|e| Error::io(&log_path, e))?;
                last = self.save()?;
            }
        }
        Ok(last)
    }
}

fn open_log(path: &Path, truncate: bool) -> Result<File> {
    let mut opts = OpenOptions::new();
    opts.create(true);
    if truncate {
        opts.write(true).truncate(true);
    } else {
        opts.append(true);
    }
    opts.open(path).map_err(|e| Error::io(path, e))
}

/// Runs training from scratch and returns the final checkpoint path.
pub fn fit<T: Scalar>(cfg: RunConfig) -> Result<PathBuf> {
    Trainer::<T>::new(cfg)?.run(|step, r| {
        log::info!("step {step}: total {:.5} content {:.5} style {:.5} smooth {:.5}", r.total, r.content, r.aligned_style, r.smooth);
    })
}
