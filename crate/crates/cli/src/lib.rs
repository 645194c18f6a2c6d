//! `dbg` command-line tool.
//!
//! Exit codes: 0 on success, 1 for invalid input or usage, 2 when a
//! computation produced a non-finite value.

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Arg, ArgAction, ArgMatches, Command};

mod commands;
pub mod manifest;
pub mod settings;

use manifest::Run;
use settings::Settings;

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Numeric(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric failure: {m}"),
        }
    }
}

impl From<dbg_core::Error> for CliError {
    fn from(e: dbg_core::Error) -> Self {
        if e.is_numeric() {
            CliError::Numeric(e.to_string())
        } else {
            CliError::Validation(e.to_string())
        }
    }
}

fn opt(name: &'static str, help: &'static str) -> Arg {
    Arg::new(name).long(name).value_name("VALUE").help(help)
}

fn data_args() -> Vec<Arg> {
    vec![
        opt("features-dir", "directory of <id>_spatial / <id>_temporal feature files"),
        opt("annotations", "annotation JSON"),
        opt("mode", "rescale (whole video to L) or window (sliding windows of L) [rescale]"),
        opt("L", "temporal scale L [100 rescale, 128 window]"),
        opt("overlap", "window overlap in window mode [0.5]"),
        opt("precision", "f32 or f64 [f32]"),
    ]
}

fn train_args() -> Vec<Arg> {
    vec![
        opt("epochs", "total epochs; the schedule is stretched to fit [schedule length]"),
        opt("batch-size", "mini-batch size [16]"),
        opt("lr-schedule", "lr:epochs stages [1e-3:10,1e-4:2]"),
        opt("sampling", "proposal feature samples N_l/N_c/N_r [8/16/8]"),
        opt("widths", "hidden widths dsb,dsb_out,acr,tbc_collapse,tbc [256,128,256,512,256]"),
        opt("lambda", "actionness loss weight [2]"),
    ]
}

fn post_args() -> Vec<Arg> {
    vec![
        opt("snms-theta", "Soft-NMS overlap threshold [0.8 rescale, 0.65 window]"),
        opt("snms-eps", "Soft-NMS Gaussian width [0.75]"),
        Arg::new("snms-ungated")
            .long("snms-ungated")
            .action(ArgAction::SetTrue)
            .help("decay every pair, ignoring the threshold"),
        opt("max-proposals", "proposals kept per video [100]"),
        opt("min-score", "drop proposals scoring below this [0]"),
    ]
}

fn common_args() -> Vec<Arg> {
    vec![
        opt("config", "key = value file; flags take precedence over it"),
        opt("out", "run directory [runs/<command>]"),
        opt("seed", "random seed [0]"),
        opt("threads", "worker threads, 0 for all cores; 1 is bit-reproducible [0]"),
    ]
}

pub fn command() -> Command {
    let sub = |name: &'static str, about: &'static str, groups: Vec<Vec<Arg>>| {
        let mut c = Command::new(name).about(about).args(common_args());
        for g in groups {
            c = c.args(g);
        }
        c
    };
    Command::new("dbg")
        .about("Dense boundary generator for temporal action proposals")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(sub(
            "synth",
            "write a synthetic feature corpus with planted actions",
            vec![vec![
                opt("videos", "number of videos [8]"),
                opt("length", "feature rows per video [32]"),
                opt("channels", "feature channels per stream [16]"),
                opt("actions", "actions per video [2]"),
                opt("classes", "action classes [2]"),
                opt("noise", "feature noise standard deviation [0.1]"),
                opt("seconds-per-unit", "seconds covered by one feature row [1]"),
                opt("format", "txt or bin [bin]"),
            ]],
        ))
        .subcommand(sub(
            "train",
            "train a model; writes checkpoint.bin and loss.csv",
            vec![data_args(), train_args(), vec![opt("checkpoint", "start from these weights")]],
        ))
        .subcommand(sub(
            "infer",
            "score maps and proposals for every video",
            vec![
                data_args(),
                post_args(),
                vec![
                    opt("checkpoint", "trained model"),
                    opt("save-maps", "write per-video score maps, true or false [true]"),
                ],
            ],
        ))
        .subcommand(sub(
            "eval",
            "AR@AN and AUC of a proposals file",
            vec![vec![
                opt("proposals", "proposals JSON written by infer"),
                opt("annotations", "annotation JSON"),
                opt("iou-set", "activitynet (0.5:0.05:0.95) or thumos (0.5:0.05:1.0) [activitynet]"),
            ]],
        ))
        .subcommand(sub("gradcheck", "finite-difference check of every gradient", vec![]))
        .subcommand(sub(
            "ablate-pfg",
            "train and evaluate one model per sampling configuration",
            vec![
                data_args(),
                train_args().into_iter().filter(|a| a.get_id() != "sampling").collect(),
                post_args(),
                vec![
                    opt("configs", "comma-separated N_l/N_c/N_r list [4/8/4,6/12/6,8/16/8,10/20/10,0/16/0,8/0/8]"),
                    opt("holdout", "fraction of videos (last ids) held out for evaluation, 0 to evaluate on the training set [0.25]"),
                    opt("iou-set", "activitynet or thumos [activitynet]"),
                ],
            ],
        ))
}

fn known_keys(m: &Command) -> Vec<String> {
    m.get_arguments().map(|a| a.get_id().to_string()).collect()
}

/// Runs the tool on `argv` (including the program name) and returns the exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let printable: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let cmd = command();
    let matches = match cmd.clone().try_get_matches_from(&argv) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    let keys = known_keys(cmd.find_subcommand(name).expect("parsed subcommand exists"));
    match dispatch(name, sub, &keys, &printable) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

fn dispatch(name: &str, m: &ArgMatches, keys: &[String], argv: &[String]) -> Result<(), CliError> {
    let mut settings = Settings::from_matches(m, keys)?;
    let out: PathBuf = settings.get("out", format!("runs/{name}"))?.into();
    let threads: usize = settings.get("threads", 0)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Validation(format!("cannot start {threads} threads: {e}")))?;
    let mut run = Run::start(name, argv, out)?;
    let outcome = pool.install(|| match name {
        "synth" => commands::synth(&mut settings, &mut run),
        "train" => commands::train(&mut settings, &mut run),
        "infer" => commands::infer(&mut settings, &mut run),
        "eval" => commands::eval(&mut settings, &mut run),
        "gradcheck" => commands::gradcheck(&mut settings, &mut run),
        "ablate-pfg" => commands::ablate(&mut settings, &mut run),
        other => Err(CliError::Validation(format!("unknown command {other}"))),
    });
    run.manifest.config = settings.resolved().clone();
    let finished = run.finish(&outcome);
    outcome.and(finished)
}
