//! `stpnet`: generate data, train, evaluate, inspect retrieval, run the
//! gradient suite and export saliency maps.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use stpnet::checkpoint::{load_checkpoint, save_checkpoint, RunConfig};
use stpnet::gradcheck::{failures, run_suite, SuiteConfig};
use stpnet::losses::Lambdas;
use stpnet::retrieval::{retrieve, LocOrder};
use stpnet::saliency::{export_saliency, parse_pgm};
use stpnet::synthgen::{generate_sample, generate_split, load_dataset, save_dataset, GenConfig, SegSample};
use stpnet::textbank::{Category, EncodedBank, TextBank, TextEncoder};
use stpnet::train::{evaluate, train};
use stpnet::{ForwardOptions, StpnetConfig, StpnetModel};

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] stpnet::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Usage(String),
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "stpnet", version, about = "Text-prompted lesion segmentation harness")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// TOML run config; flags below override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file, directory or prefix, depending on the subcommand.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    ckpt: Option<PathBuf>,
    #[arg(long, global = true)]
    no_text: bool,
    #[arg(long, global = true)]
    no_ssm: bool,
    #[arg(long, global = true)]
    no_utrans_text: bool,
    #[arg(long, global = true)]
    teacher_force_text: bool,
    /// Recombine RightLoc before LeftLoc.
    #[arg(long, global = true)]
    swap_loc_order: bool,
    #[arg(long, global = true)]
    lambda1: Option<f64>,
    #[arg(long, global = true)]
    lambda2: Option<f64>,
    #[arg(long, global = true)]
    lambda3: Option<f64>,
    #[arg(long, global = true)]
    tau: Option<f64>,
    /// Phrase bank in the plain-text list format.
    #[arg(long, global = true)]
    text_bank: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write `--n` synthetic samples to `--out` (STPD1 format).
    Gen {
        #[arg(long, default_value_t = 512)]
        n: usize,
        /// First sample index; sample i uses seed `seed ^ i`.
        #[arg(long, default_value_t = 0)]
        start: usize,
    },
    /// Train on a generated split; writes model.ckpt, metrics.jsonl,
    /// config.toml and test.json into `--out`.
    Train,
    /// Evaluate `--ckpt` on a dataset file or on the generated test split.
    Eval {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Rank every phrase category for one image.
    Retrieve {
        /// A PGM image, or an STPD1 dataset together with `--index`.
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Finite-difference checks of every block and loss (64-bit).
    Gradcheck {
        /// Sampled coordinates per block check.
        #[arg(long, default_value_t = 100)]
        samples: usize,
        /// Negative control: corrupt this op's backward.
        #[arg(long, hide = true)]
        fault: Option<String>,
    },
    /// Write `{out}_up{k}.pgm` activation maps and `{out}_mask.pgm`.
    Saliency {
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
}

impl Common {
    fn run_config(&self) -> Result<RunConfig> {
        let mut rc = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::new(),
        };
        if let Some(s) = self.seed {
            rc.model.seed = s;
            rc.train.seed = s;
        }
        if let Some(t) = self.tau {
            rc.model.tau = t;
        }
        rc.train.options = self.options(rc.train.options);
        if self.lambda1.is_some() || self.lambda2.is_some() || self.lambda3.is_some() {
            let base = rc.train.lambdas.unwrap_or(rc.model.lambdas);
            rc.train.lambdas = Some(self.lambdas(base));
        }
        rc.model.validate()?;
        rc.train.validate()?;
        Ok(rc)
    }

    fn options(&self, mut o: ForwardOptions) -> ForwardOptions {
        o.no_text |= self.no_text;
        o.no_ssm |= self.no_ssm;
        o.no_utrans_text |= self.no_utrans_text;
        o.teacher_force_text |= self.teacher_force_text;
        if self.swap_loc_order {
            o.loc_order = LocOrder::RightFirst;
        }
        o
    }

    fn lambdas(&self, base: Lambdas) -> Lambdas {
        Lambdas {
            seg: self.lambda1.unwrap_or(base.seg),
            retrieval: self.lambda2.unwrap_or(base.retrieval),
            focal: self.lambda3.unwrap_or(base.focal),
        }
    }

    fn bank(&self, cfg: &StpnetConfig) -> Result<EncodedBank> {
        match &self.text_bank {
            Some(p) => {
                let bank = TextBank::from_text(&std::fs::read_to_string(p)?)?;
                Ok(EncodedBank::new(bank, TextEncoder::new(cfg.text_seed, cfg.text_len, cfg.text_dim)?)?)
            }
            None => Ok(cfg.text_bank()?),
        }
    }

    fn out(&self, what: &str) -> Result<&Path> {
        self.out.as_deref().ok_or_else(|| CliError::Usage(format!("--out is required ({what})")))
    }

    fn model(&self) -> Result<StpnetModel<f32>> {
        let p = self.ckpt.as_deref().ok_or_else(|| CliError::Usage("--ckpt is required".into()))?;
        let mut m: StpnetModel<f32> = load_checkpoint(p)?;
        if let Some(t) = self.tau {
            m.net.cfg.tau = t;
        }
        Ok(m)
    }
}

/// One image from a PGM file or from entry `index` of a dataset file.
fn load_image(path: &Path, index: usize, size: usize) -> Result<Vec<f32>> {
    let bytes = std::fs::read(path)?;
    if bytes.starts_with(b"STPD1") {
        let samples = load_dataset(path)?;
        let s = samples
            .get(index)
            .ok_or_else(|| CliError::Usage(format!("index {index} out of range for {} samples", samples.len())))?;
        return Ok(s.image.clone());
    }
    let (w, h, px) = parse_pgm(&bytes)?;
    if (w, h) != (size, size) {
        return Err(CliError::Usage(format!("image is {w}x{h}, the model expects {size}x{size}")));
    }
    Ok(px)
}

fn gen(c: &Common, n: usize, start: usize) -> Result<()> {
    let rc = c.run_config()?;
    let out = c.out("dataset file")?;
    let gen = GenConfig::for_size(rc.model.image_size);
    let samples =
        (start..start + n).map(|i| generate_sample(rc.train.seed ^ i as u64, &gen)).collect::<stpnet::Result<Vec<_>>>()?;
    save_dataset(out, &samples)?;
    log::info!("wrote {n} samples to {}", out.display());
    Ok(())
}

fn train_cmd(c: &Common) -> Result<()> {
    let rc = c.run_config()?;
    let dir = c.out("run directory")?;
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.toml"), rc.to_toml())?;
    let bank = c.bank(&rc.model)?;
    let tc = &rc.train;
    let split = generate_split(tc.seed, tc.n_train, tc.n_val, tc.n_test, &GenConfig::for_size(rc.model.image_size))?;
    let mut model = StpnetModel::<f32>::new(&rc.model)?;
    let mut log = BufWriter::new(File::create(dir.join("metrics.jsonl"))?);
    let mut io_err = None;
    let outcome = train(&mut model, &bank, tc, &split.train, &split.val, |rec| {
        if let Err(e) = writeln!(log, "{}", rec.to_json_line()).and_then(|()| log.flush()) {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    save_checkpoint(&dir.join("model.ckpt"), &outcome.model)?;
    let test = evaluate(&outcome.model, &bank, &split.test, tc.options, "test")?;
    std::fs::write(dir.join("test.json"), test.to_json_line() + "\n")?;
    println!("best epoch {}: {}", outcome.best_epoch, test.to_json_line());
    Ok(())
}

fn eval_cmd(c: &Common, data: Option<&Path>) -> Result<()> {
    let model = c.model()?;
    let rc = c.run_config()?;
    let bank = c.bank(model.cfg())?;
    let opts = rc.train.options;
    let samples: Vec<SegSample> = match data {
        Some(p) => load_dataset(p)?,
        None => {
            let tc = &rc.train;
            generate_split(tc.seed, tc.n_train, tc.n_val, tc.n_test, &GenConfig::for_size(model.cfg().image_size))?.test
        }
    };
    let rec = evaluate(&model, &bank, &samples, opts, if data.is_some() { "data" } else { "test" })?;
    println!("{}", rec.to_json_line());
    if let Some(out) = &c.out {
        std::fs::write(out, rec.to_json_line() + "\n")?;
    }
    Ok(())
}

fn retrieve_cmd(c: &Common, image: &Path, index: usize) -> Result<()> {
    let model = c.model()?;
    let bank = c.bank(model.cfg())?;
    let s = model.cfg().image_size;
    let px = load_image(image, index, s)?;
    let f_v = stpnet::train::image_embedding(&model, &px)?;
    let r = retrieve(&f_v, &bank, model.cfg().tau)?;
    for (cat, cr) in Category::ALL.iter().zip(&r.categories) {
        println!("[{}]", cat.header());
        for (j, (p, sc)) in bank.bank.phrases(*cat).iter().zip(&cr.scores.scores).enumerate() {
            let mark = if j == cr.scores.j_star { '*' } else { ' ' };
            println!("{mark} {sc:.4}  {p}");
        }
    }
    Ok(())
}

fn gradcheck_cmd(c: &Common, samples: usize, fault: Option<String>) -> Result<bool> {
    let rc = c.run_config()?;
    let cfg = SuiteConfig {
        samples,
        seed: rc.model.seed,
        // the hook wants a 'static name; this is a one-shot process
        fault: fault.map(|f| &*Box::leak(f.into_boxed_str())),
        ..SuiteConfig::default()
    };
    let model_cfg = StpnetConfig { seed: rc.model.seed, ..StpnetConfig::reduced() };
    let t0 = std::time::Instant::now();
    let out = run_suite(&model_cfg, &cfg)?;
    for o in &out {
        let tol = if o.name == "mix_loss_end_to_end" { cfg.e2e_tol } else { cfg.tol };
        let verdict = if o.report.pass { "ok" } else { "FAIL" };
        println!("{verdict:<4} {:<22} max_rel {:.3e} (tol {tol:.0e}, {} coords)", o.name, o.report.max_rel_error, o.report.checked);
    }
    let failed = failures(&out);
    println!("{} checks, {} failed, {:.1}s", out.len(), failed.len(), t0.elapsed().as_secs_f64());
    if !failed.is_empty() {
        eprintln!("failing: {}", failed.join(", "));
    }
    Ok(failed.is_empty())
}

fn saliency_cmd(c: &Common, image: &Path, index: usize) -> Result<()> {
    let model = c.model()?;
    let rc = c.run_config()?;
    let bank = c.bank(model.cfg())?;
    let px = load_image(image, index, model.cfg().image_size)?;
    let prefix = c.out("file prefix")?.to_string_lossy().into_owned();
    for p in export_saliency(&model, &bank, &px, rc.train.options, &prefix)? {
        println!("{}", p.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    let c = &cli.common;
    match cli.cmd {
        Command::Gen { n, start } => gen(c, n, start)?,
        Command::Train => train_cmd(c)?,
        Command::Eval { data } => eval_cmd(c, data.as_deref())?,
        Command::Retrieve { image, index } => retrieve_cmd(c, &image, index)?,
        Command::Gradcheck { samples, fault } => return gradcheck_cmd(c, samples, fault),
        Command::Saliency { image, index } => saliency_cmd(c, &image, index)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
