//! The `mfn` command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or I/O error, 3 failed check.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::analysis::{erf_map_averaged, importance_map, model_cost, receptive_field};
use crate::arch::{build_model, ArchSpec, Resolution, Variant};
use crate::error::Error;
use crate::pipeline::{
    cosine_similarity, embed_tensor, fold_batchnorm, kfold_accuracy, load_model, save_model, tar_points, Embedding,
    Input, PairList,
};
use crate::tensor::{Rng, Tensor};
use crate::training::{
    check_ops, check_setup, grad_check_model, toy_setup, train_loop, training_accuracy, GradCheckOptions, TrainConfig,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_CHECK: i32 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Csv,
}

#[derive(Debug, Parser)]
#[command(name = "mfn", version, about = "Build, analyze, train and run MobileFaceNet models")]
pub struct Cli {
    /// Seed for every random draw (overrides a training config's seed).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for embedding extraction in `eval`.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub threads: u64,
    /// Output file (model for build/fold/train; report otherwise).
    #[arg(short = 'o', long = "output", global = true)]
    pub output: Option<PathBuf>,
    /// Report format. A `.csv` output path also selects CSV.
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    pub format: Format,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ArchArgs {
    #[arg(long, default_value = "primary", value_parser = parse_variant)]
    pub variant: Variant,
    #[arg(long, default_value = "112x112", value_parser = parse_resolution)]
    pub input: Resolution,
    /// Divide every channel width by this factor.
    #[arg(long, default_value_t = 1)]
    pub width_divisor: usize,
    /// Omit batch norm after the linear GDConv and final 1×1 conv.
    #[arg(long)]
    pub no_bn_linear: bool,
}

impl ArchArgs {
    fn arch(&self) -> crate::Result<ArchSpec> {
        ArchSpec::mobilefacenet(self.variant, self.input)?
            .with_bn_linear(!self.no_bn_linear)
            .with_width_divisor(self.width_divisor)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a freshly initialized model file.
    Build(ArchArgs),
    /// Parameter and MAdds report of a model file.
    Analyze { model: PathBuf },
    /// Theoretical receptive fields of an architecture.
    Rf(ArchArgs),
    /// Effective receptive field of one unit of the map entering the global operator.
    Erf {
        model: PathBuf,
        /// `channel,i,j`
        #[arg(long, value_parser = parse_unit)]
        unit: (usize, usize, usize),
        /// Number of random inputs averaged.
        #[arg(long, default_value_t = 1)]
        samples: usize,
    },
    /// GDConv spatial-importance map.
    Importance { model: PathBuf },
    /// Toy-scale ArcFace training on synthetic identities.
    Train {
        /// `key=value` file; the desk preset is used when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Extra `key=value` overrides applied after the config file.
        #[arg(long = "set")]
        overrides: Vec<String>,
        /// Per-iteration `iter,lr,loss` CSV.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Fold batch norm into the preceding linear layers.
    Fold { model: PathBuf },
    /// Print the embedding of one image or tensor file.
    Embed {
        model: PathBuf,
        input: PathBuf,
        #[arg(long)]
        normalize: bool,
    },
    /// Compare two inputs by cosine similarity.
    Verify {
        model: PathBuf,
        a: PathBuf,
        b: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// k-fold verification accuracy and TAR at FAR over a pair list.
    Eval {
        model: PathBuf,
        pairs: PathBuf,
        #[arg(long, default_value_t = 10)]
        folds: usize,
        /// Comma-separated false-accept rates.
        #[arg(long, value_delimiter = ',', default_value = "1e-3")]
        far: Vec<f64>,
    },
    /// Finite-difference gradient checks of every op and a downscaled network.
    Gradcheck {
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        /// Parameters sampled from the network.
        #[arg(long, default_value_t = 200)]
        samples: usize,
        #[arg(long, default_value_t = 4)]
        width_divisor: usize,
        #[arg(long, default_value_t = 4)]
        batch: usize,
        /// Random instances per op.
        #[arg(long, default_value_t = 3)]
        op_instances: usize,
    },
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_resolution(s: &str) -> Result<Resolution, String> {
    let r: Resolution = s.parse().map_err(|e: Error| e.to_string())?;
    if !Resolution::SUPPORTED.contains(&r) {
        return Err(format!("unsupported input {r} (112x112|112x96|96x96)"));
    }
    Ok(r)
}

fn parse_unit(s: &str) -> Result<(usize, usize, usize), String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse().map_err(|_| format!("bad unit {s:?}, expected c,i,j")))
        .collect::<Result<_, _>>()?;
    match v.as_slice() {
        [c, i, j] => Ok((*c, *i, *j)),
        _ => Err(format!("bad unit {s:?}, expected c,i,j")),
    }
}

enum Failure {
    Usage(String),
    Data(String),
    Check(String),
}

trait Stage<T> {
    fn stage(self, name: &str) -> Result<T, Failure>;
}

impl<T> Stage<T> for crate::Result<T> {
    fn stage(self, name: &str) -> Result<T, Failure> {
        self.map_err(|e| Failure::Data(format!("{name}: {e}")))
    }
}

impl<T> Stage<T> for std::io::Result<T> {
    fn stage(self, name: &str) -> Result<T, Failure> {
        self.map_err(|e| Failure::Data(format!("{name}: {e}")))
    }
}

struct Ctx<'a> {
    cli: &'a Cli,
    out: &'a mut dyn Write,
}

impl Ctx<'_> {
    fn csv(&self) -> bool {
        self.cli.format == Format::Csv
            || self.cli.output.as_deref().and_then(Path::extension).is_some_and(|e| e == "csv")
    }

    fn seed(&self) -> u64 {
        self.cli.seed.unwrap_or(0)
    }

    fn model_output(&self, verb: &str) -> Result<&Path, Failure> {
        self.cli
            .output
            .as_deref()
            .ok_or_else(|| Failure::Usage(format!("-o <file> is required for {verb}")))
    }

    fn print(&mut self, text: &str) -> Result<(), Failure> {
        self.out.write_all(text.as_bytes()).stage("write output")
    }

    /// Writes a report to `-o` when given, else to stdout.
    fn report(&mut self, text: &str) -> Result<(), Failure> {
        match &self.cli.output {
            Some(p) => std::fs::write(p, text).stage(&format!("write {}", p.display())),
            None => self.print(text),
        }
    }
}

fn load(path: &Path) -> Result<crate::arch::Model, Failure> {
    load_model(path).stage(&format!("load model {}", path.display()))
}

fn read_input(path: &Path, res: Resolution) -> crate::Result<Tensor<f32>> {
    Input::read(path)?.to_tensor(res)
}

fn embeddings(model: &crate::arch::Model, paths: &[PathBuf], threads: usize) -> Result<Vec<Embedding>, Failure> {
    let res = model.arch().input;
    let one = |p: &PathBuf| -> Result<Embedding, Failure> {
        let x = read_input(p, res).stage(&format!("read {}", p.display()))?;
        embed_tensor(model, &x, true).stage(&format!("embed {}", p.display()))
    };
    if threads <= 1 || paths.len() < 2 {
        return paths.iter().map(one).collect();
    }
    let chunk = paths.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = paths
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(one).collect::<Result<Vec<_>, _>>()))
            .collect();
        let mut all = Vec::with_capacity(paths.len());
        for h in handles {
            all.extend(h.join().map_err(|_| Failure::Data("embedding worker panicked".into()))??);
        }
        Ok(all)
    })
}

impl Command {
    fn verb(&self) -> &'static str {
        match self {
            Command::Build(_) => "build",
            Command::Analyze { .. } => "analyze",
            Command::Rf(_) => "rf",
            Command::Erf { .. } => "erf",
            Command::Importance { .. } => "importance",
            Command::Train { .. } => "train",
            Command::Fold { .. } => "fold",
            Command::Embed { .. } => "embed",
            Command::Verify { .. } => "verify",
            Command::Eval { .. } => "eval",
            Command::Gradcheck { .. } => "gradcheck",
        }
    }
}

fn execute(ctx: &mut Ctx) -> Result<(), Failure> {
    let csv = ctx.csv();
    match &ctx.cli.command {
        Command::Build(a) => {
            let path = ctx.model_output("build")?.to_path_buf();
            let arch = a.arch().stage("architecture")?;
            let model = build_model(&arch, &mut Rng::new(ctx.seed())).stage("build")?;
            let size = save_model(&model, &path).stage(&format!("save {}", path.display()))?;
            let msg = format!(
                "wrote {} ({size} bytes, {} parameters, {}-d embedding)\n",
                path.display(),
                model.num_params(),
                model.embedding_dim()
            );
            ctx.print(&msg)
        }
        Command::Analyze { model } => {
            let m = load(model)?;
            let r = model_cost(&m).stage("count")?;
            ctx.report(&if csv { r.to_csv() } else { r.to_text() })
        }
        Command::Rf(a) => {
            let arch = a.arch().stage("architecture")?;
            let rf = receptive_field(&arch).stage("receptive field")?;
            ctx.report(&if csv { rf.to_csv() } else { rf.to_text() })
        }
        Command::Erf { model, unit, samples } => {
            let m = load(model)?;
            let map = erf_map_averaged(&m, *unit, *samples, &mut Rng::new(ctx.seed())).stage("erf")?;
            let text = if csv {
                map.to_csv()
            } else {
                let mut t = String::new();
                if let Some((r, c)) = map.centroid() {
                    let _ = writeln!(t, "centroid {r:.3} {c:.3}");
                }
                t + &map.to_text()
            };
            ctx.report(&text)
        }
        Command::Importance { model } => {
            let m = load(model)?;
            let g = m
                .gdconv()
                .ok_or_else(|| Failure::Data("model has no GDConv layer".into()))?;
            let map = importance_map(g);
            ctx.report(&if csv { map.to_csv() } else { map.to_text() })
        }
        Command::Train { config, overrides, log } => {
            let mut cfg = match config {
                Some(p) => {
                    let text = std::fs::read_to_string(p).stage(&format!("read config {}", p.display()))?;
                    TrainConfig::parse(&text).stage("parse config")?
                }
                None => TrainConfig::desk(),
            };
            for o in overrides {
                let (k, v) = o
                    .split_once('=')
                    .ok_or_else(|| Failure::Usage(format!("--set expects key=value, got {o:?}")))?;
                cfg.set(k.trim(), v.trim())
                    .map_err(|e| Failure::Usage(format!("--set {o}: {e}")))?;
            }
            if let Some(s) = ctx.cli.seed {
                cfg.seed = s;
            }
            cfg.validate().stage("config")?;
            let (mut model, mut head, data) = toy_setup(&cfg).stage("setup")?;
            let tlog = train_loop(&mut model, &mut head, &data, &cfg).stage("train")?;
            let acc = training_accuracy(&model, &head, &data, cfg.batch_size).stage("accuracy")?;
            if let Some(p) = log {
                std::fs::write(p, tlog.to_csv()).stage(&format!("write log {}", p.display()))?;
            }
            if let Some(p) = &ctx.cli.output {
                save_model(&model, p).stage(&format!("save {}", p.display()))?;
            }
            let n = tlog.rows.len();
            let at = n.min(100);
            let early = tlog.smoothed(at, 100).unwrap_or(f64::NAN);
            let late = tlog.smoothed(n, 100).unwrap_or(f64::NAN);
            let text = if csv {
                format!("iters,smoothed_loss_early,smoothed_loss_final,train_accuracy\n{n},{early},{late},{acc}\n")
            } else {
                format!(
                    "iterations {n}\nsmoothed loss at {at}: {early:.4}\nsmoothed loss at {n}: {late:.4}\ntraining accuracy {acc:.4}\n"
                )
            };
            ctx.print(&text)
        }
        Command::Fold { model } => {
            let path = ctx.model_output("fold")?.to_path_buf();
            let m = load(model)?;
            let f = fold_batchnorm(&m).stage("fold")?;
            let size = save_model(&f, &path).stage(&format!("save {}", path.display()))?;
            let msg = format!(
                "wrote {} ({size} bytes, {:.2} MB, {} parameters)\n",
                path.display(),
                size as f64 / 1e6,
                f.num_params()
            );
            ctx.print(&msg)
        }
        Command::Embed { model, input, normalize } => {
            let m = load(model)?;
            let x = read_input(input, m.arch().input).stage(&format!("read {}", input.display()))?;
            let e = embed_tensor(&m, &x, *normalize).stage("embed")?;
            let text = if csv {
                let mut t = String::from("index,value\n");
                for (i, v) in e.values.iter().enumerate() {
                    let _ = writeln!(t, "{i},{v}");
                }
                t
            } else {
                let vals: Vec<String> = e.values.iter().map(|v| v.to_string()).collect();
                vals.join(" ") + "\n"
            };
            ctx.report(&text)
        }
        Command::Verify { model, a, b, threshold } => {
            let m = load(model)?;
            let e = embeddings(&m, &[a.clone(), b.clone()], 1)?;
            let sim = cosine_similarity(&e[0], &e[1]).stage("similarity")?;
            let matched = sim >= *threshold;
            let text = if csv {
                format!("match,similarity,threshold\n{},{sim},{threshold}\n", u8::from(matched))
            } else {
                format!("{} similarity {sim:.6} threshold {threshold}\n", if matched { "MATCH" } else { "NO MATCH" })
            };
            ctx.print(&text)
        }
        Command::Eval { model, pairs, folds, far } => {
            let m = load(model)?;
            let text = std::fs::read_to_string(pairs).stage(&format!("read pairs {}", pairs.display()))?;
            let list = PairList::parse(&text).stage("parse pairs")?;
            let base = pairs.parent().unwrap_or(Path::new("."));
            let mut unique: Vec<PathBuf> = Vec::new();
            let mut index = std::collections::HashMap::new();
            let mut refs = Vec::with_capacity(list.len());
            for p in &list.pairs {
                let mut ids = [0; 2];
                for (slot, name) in ids.iter_mut().zip([&p.a, &p.b]) {
                    let path = base.join(name);
                    *slot = *index.entry(path.clone()).or_insert_with(|| {
                        unique.push(path);
                        unique.len() - 1
                    });
                }
                refs.push(ids);
            }
            let emb = embeddings(&m, &unique, ctx.cli.threads as usize)?;
            let scores = refs
                .iter()
                .map(|[a, b]| cosine_similarity(&emb[*a], &emb[*b]))
                .collect::<crate::Result<Vec<f64>>>()
                .stage("similarity")?;
            let labels = list.labels();
            let mut report = kfold_accuracy(&labels, &scores, *folds).stage("k-fold evaluation")?;
            report.tar = tar_points(&labels, &scores, far).stage("tar at far")?;
            ctx.report(&if csv { report.to_csv() } else { report.to_text() })
        }
        Command::Gradcheck { tol, samples, width_divisor, batch, op_instances } => {
            let mut rng = Rng::new(ctx.seed());
            let ops = check_ops(*op_instances, &mut rng).stage("op gradient check")?;
            let (model, head, x, labels) = check_setup(*width_divisor, *batch, ctx.seed()).stage("setup")?;
            let opts = GradCheckOptions { tolerance: *tol, samples: *samples, seed: ctx.seed(), ..Default::default() };
            let r = grad_check_model(&model, &head, &x, &labels, &opts).stage("model gradient check")?;
            let mut failed = Vec::new();
            let mut text = if csv { String::from("check,entries,max_rel_error,pass\n") } else { String::new() };
            for c in &ops {
                let pass = c.max_rel_error < *tol;
                if !pass {
                    failed.push(c.op.to_string());
                }
                if csv {
                    let _ = writeln!(text, "{},{},{},{}", c.op, c.entries, c.max_rel_error, u8::from(pass));
                } else {
                    let _ = writeln!(
                        text,
                        "{:<10} {:>6} entries  max rel error {:.3e}  {}",
                        c.op,
                        c.entries,
                        c.max_rel_error,
                        if pass { "PASS" } else { "FAIL" }
                    );
                }
            }
            if !r.passed() {
                failed.push("model".into());
            }
            if csv {
                let _ = writeln!(text, "model,{},{},{}", r.checks.len(), r.max_rel_error(), u8::from(r.passed()));
            } else {
                let _ = writeln!(text, "model      {}  {}", r.summary(), if r.passed() { "PASS" } else { "FAIL" });
            }
            ctx.report(&text)?;
            if failed.is_empty() {
                Ok(())
            } else {
                Err(Failure::Check(format!(
                    "{} exceeded tolerance {tol:e}",
                    failed.join(", ")
                )))
            }
        }
    }
}

/// Parses `args` (including the program name), runs the verb and returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK { out.write_all(text.as_bytes()) } else { err.write_all(text.as_bytes()) };
            return code;
        }
    };
    let mut ctx = Ctx { cli: &cli, out };
    match execute(&mut ctx) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            let (code, msg) = match f {
                Failure::Usage(m) => (EXIT_USAGE, m),
                Failure::Data(m) => (EXIT_DATA, m),
                Failure::Check(m) => (EXIT_CHECK, m),
            };
            let _ = writeln!(err, "{}: {msg}", cli.command.verb());
            code
        }
    }
}
