//! `vpcctl` commands. Exit codes: 0 success, 1 refused operation or
//! invariant violation, 2 bad usage or config.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use vpc_core::harness::bench::{self, BenchConfig, BenchError};
use vpc_core::harness::{run_scenario, Fault, Scenario, ScenarioScript, Target};
use vpc_core::model::{ExecutionMode, Micros, SemVer, VpfDescriptor};
use vpc_core::hash::Digest256;
use vpc_core::registry::RegistryError;
use vpc_core::simnet::LinkSpec;
use vpc_core::wire::FrameProfile;

use crate::config::{load_json, RunConfig};
use crate::export;
use crate::session::{parse_duration, parse_script, Command, Outcome, Session, When};
use crate::store::{FileStore, StoreError};
use crate::sweep::par_sweep;

pub const OK: i32 = 0;
pub const FAILED: i32 = 1;
pub const USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "vpcctl", version, about = "Run, inspect and benchmark simulated VPC clusters")]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Scenario presets and sweeps.
    Scenario {
        #[command(subcommand)]
        cmd: ScenarioCmd,
    },
    /// Run a session script against a stepped simulation.
    Session(SessionArgs),
    /// Deploy a spec onto a fresh cluster and print the plan.
    Deploy(DeployArgs),
    /// Deploy, then redeploy with a scheduled handover.
    Reconfigure(ReconfigureArgs),
    /// Frame latency benchmark.
    Bench(BenchArgs),
    /// File-backed VPF registry.
    Vpf {
        #[command(subcommand)]
        cmd: VpfCmd,
    },
}

#[derive(Debug, Subcommand)]
pub enum ScenarioCmd {
    Run(RunArgs),
    /// Print the preset ids.
    List,
}

fn scenario_arg(s: &str) -> Result<Scenario, String> {
    s.parse::<Scenario>().map_err(|e| e.to_string())
}

fn duration_arg(s: &str) -> Result<Micros, String> {
    parse_duration(s).ok_or_else(|| format!("bad duration `{s}` (use e.g. 250us, 10ms, 1s)"))
}

fn semver_arg(s: &str) -> Result<SemVer, String> {
    let parts: Vec<&str> = s.split('.').collect();
    let n = |p: &str| p.parse::<u16>().map_err(|_| format!("bad version `{s}`"));
    match parts.as_slice() {
        [a, b, c] => Ok(SemVer::new(n(a)?, n(b)?, n(c)?)),
        _ => Err(format!("bad version `{s}` (want MAJOR.MINOR.PATCH)")),
    }
}

#[derive(Debug, Args)]
pub struct OutArgs {
    /// Output directory.
    #[arg(long, env = "VPCCTL_OUT_DIR", default_value = "vpcctl-out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// 1, 2, 3a, 3b, 3c, 3c-isolated or 4.
    #[arg(value_parser = scenario_arg)]
    pub id: Scenario,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Cluster topology JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Deployment spec JSON.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Whole scenario script JSON (replaces the preset).
    #[arg(long)]
    pub script: Option<PathBuf>,
    #[command(flatten)]
    pub out: OutArgs,
    /// Sweep the failure time over one sync period instead of a single run.
    #[arg(long)]
    pub sweep: bool,
    /// Sweep seeds 1..=N.
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,
    #[arg(long, default_value = "100us", value_parser = duration_arg)]
    pub step: Micros,
}

#[derive(Debug, Args)]
pub struct ClusterArgs {
    /// Cluster topology JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Deployment spec JSON.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// When the deploy is issued.
    #[arg(long, default_value = "5ms", value_parser = duration_arg)]
    pub deploy_at: Micros,
}

#[derive(Debug, Args)]
pub struct SessionArgs {
    pub file: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Cluster topology JSON (a `cluster` line in the script wins).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Also write the trace files here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DeployArgs {
    #[command(flatten)]
    pub cluster: ClusterArgs,
    /// Simulated time to run after the deploy.
    #[arg(long, default_value = "100ms", value_parser = duration_arg)]
    pub run: Micros,
    /// Print the cluster status after running.
    #[arg(long)]
    pub status: bool,
}

#[derive(Debug, Args)]
pub struct ReconfigureArgs {
    #[command(flatten)]
    pub cluster: ClusterArgs,
    /// Spec for the new deployment (defaults to the initial spec).
    #[arg(long)]
    pub new_spec: Option<PathBuf>,
    /// When the redeploy is issued.
    #[arg(long, default_value = "100ms", value_parser = duration_arg)]
    pub at: Micros,
    /// Absolute handover time.
    #[arg(long, value_parser = duration_arg)]
    pub handover: Micros,
    /// Simulated time to run after the handover.
    #[arg(long, default_value = "50ms", value_parser = duration_arg)]
    pub settle: Micros,
    #[arg(long)]
    pub status: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Profile {
    Compact,
    Routed,
}

impl From<Profile> for FrameProfile {
    fn from(p: Profile) -> Self {
        match p {
            Profile::Compact => FrameProfile::Compact,
            Profile::Routed => FrameProfile::Routed,
        }
    }
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_enum, default_value = "compact")]
    pub profile: Profile,
    /// Run both profiles on the same samples and print the deltas.
    #[arg(long)]
    pub compare: bool,
    #[arg(long, default_value_t = 10_000)]
    pub count: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub base_us: Micros,
    #[arg(long, default_value_t = 50)]
    pub jitter_us: Micros,
    #[arg(long, default_value_t = bench::DEFAULT_PER_BYTE_NS)]
    pub per_byte_ns: u64,
    #[arg(long, default_value_t = 20)]
    pub buckets: usize,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Subcommand)]
pub enum VpfCmd {
    Publish(PublishArgs),
    List(StoreArgs),
    Fetch(FetchArgs),
}

#[derive(Debug, Args)]
pub struct StoreArgs {
    #[arg(long, env = "VPCCTL_STORE", default_value = "vpf-store")]
    pub store: PathBuf,
}

#[derive(Debug, Args)]
pub struct PublishArgs {
    #[command(flatten)]
    pub store: StoreArgs,
    #[arg(long)]
    pub id: String,
    #[arg(long, value_parser = semver_arg)]
    pub version: SemVer,
    /// Artifact file (for built-in logic, its parameter sheet).
    #[arg(long)]
    pub file: PathBuf,
    /// Built-in step function; defaults to the id.
    #[arg(long)]
    pub logic: Option<String>,
    #[arg(long)]
    pub schema: Option<String>,
    /// Cyclic period; acyclic when absent.
    #[arg(long, value_parser = duration_arg)]
    pub period: Option<Micros>,
}

#[derive(Debug, Args)]
pub struct FetchArgs {
    #[command(flatten)]
    pub store: StoreArgs,
    #[arg(long)]
    pub id: String,
    #[arg(long, value_parser = semver_arg)]
    pub version: SemVer,
    /// Write the blob here and print the descriptor; without it the blob
    /// goes to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(cli: Cli) -> i32 {
    match cli.cmd {
        Cmd::Scenario { cmd: ScenarioCmd::List } => {
            for s in Scenario::ALL {
                println!("{s}");
            }
            OK
        }
        Cmd::Scenario { cmd: ScenarioCmd::Run(a) } => scenario(a),
        Cmd::Session(a) => session(a),
        Cmd::Deploy(a) => deploy(a),
        Cmd::Reconfigure(a) => reconfigure(a),
        Cmd::Bench(a) => bench_cmd(a),
        Cmd::Vpf { cmd } => vpf(cmd),
    }
}

fn fail(code: i32, msg: impl std::fmt::Display) -> i32 {
    eprintln!("vpcctl: {msg}");
    code
}

fn json_line<T: serde::Serialize>(v: &T) {
    println!("{}", serde_json::to_string(v).expect("outputs serialize"));
}

fn scenario(a: RunArgs) -> i32 {
    let cfg = RunConfig { script: a.script, topology: a.config, spec: a.spec, seed: a.seed, out_dir: a.out.out };
    let script = match cfg.script(a.id) {
        Ok(s) => s,
        Err(e) => return fail(USAGE, e),
    };
    if a.sweep {
        return sweep(&script, &cfg.out_dir, a.seeds, a.step);
    }
    let run = match run_scenario(&script, cfg.seed) {
        Ok(r) => r,
        Err(e) => return fail(USAGE, e),
    };
    let written = match export::write_run(&cfg.out_dir, &run) {
        Ok(w) => w,
        Err(e) => return fail(USAGE, format!("{}: {e}", cfg.out_dir.display())),
    };
    let r = &run.report;
    println!("scenario {} seed {}: {} events, trace {}", r.scenario, r.seed, r.events, written.trace_hash);
    println!(
        "missed_control_cycles={} detection_us={} double_active_us={} redundancy_gap_us={} max_actuator_gap_us={}",
        r.metrics.missed_control_cycles,
        r.metrics.failover_detection_us.map_or("-".into(), |d| d.to_string()),
        r.metrics.double_active_window_us,
        r.metrics.redundancy_gap_us,
        r.metrics.max_actuator_gap_us
    );
    for op in &r.operations {
        match &op.result {
            Ok(p) => println!("{} at {}: ok epoch {}", op.op, op.at, p.epoch),
            Err(e) => println!("{} at {}: {e}", op.op, op.at),
        }
    }
    for v in &r.violations {
        eprintln!("violation {} at event {} (t={}): {}", v.invariant, v.index, v.time, v.detail);
    }
    if r.ok() {
        OK
    } else {
        FAILED
    }
}

/// The fault a sweep moves around: the preset's kill.
fn sweep_target(script: &ScenarioScript) -> Option<(Target, Micros)> {
    script.injections.iter().find_map(|i| match &i.fault {
        Fault::Kill { target } => Some((target.clone(), i.at)),
        _ => None,
    })
}

fn sweep(script: &ScenarioScript, out: &Path, seeds: u64, step: Micros) -> i32 {
    let Some((target, t0)) = sweep_target(script) else {
        return fail(USAGE, format!("scenario {} has no kill to sweep", script.scenario));
    };
    let seeds: Vec<u64> = (1..=seeds).collect();
    let range = (t0, t0 + script.spec.sync_period);
    let report = match par_sweep(script, &target, range, step, &seeds) {
        Ok(r) => r,
        Err(e) => return fail(USAGE, e),
    };
    let write = || -> std::io::Result<()> {
        fs::create_dir_all(out)?;
        fs::write(out.join("sweep.json"), serde_json::to_string_pretty(&report).expect("reports serialize") + "\n")?;
        fs::write(out.join("sweep.csv"), export::sweep_csv(&report))
    };
    if let Err(e) = write() {
        return fail(USAGE, format!("{}: {e}", out.display()));
    }
    println!(
        "sweep {} over [{}, {}) step {} x {} seeds: {} runs, {} failed, worst detection {} us, worst actuator gap {} us, worst missed cycles {}",
        script.scenario,
        range.0,
        range.1,
        step,
        seeds.len(),
        report.runs,
        report.failed_runs,
        report.worst_detection_us.map_or("-".into(), |d| d.to_string()),
        report.worst_actuator_gap_us,
        report.worst_missed_cycles
    );
    if report.failed_runs == 0 {
        OK
    } else {
        FAILED
    }
}

fn session(a: SessionArgs) -> i32 {
    let text = match fs::read_to_string(&a.file) {
        Ok(t) => t,
        Err(e) => return fail(USAGE, format!("{}: {e}", a.file.display())),
    };
    let cmds = match parse_script(&text) {
        Ok(c) => c,
        Err(e) => return fail(USAGE, format!("{}:{}", a.file.display(), e)),
    };
    let spec = match &a.config {
        Some(p) => match load_json(p) {
            Ok(s) => s,
            Err(e) => return fail(USAGE, e),
        },
        None => Default::default(),
    };
    let mut s = Session::new(spec, a.seed);
    let mut code = OK;
    for (line, cmd) in &cmds {
        match s.exec(cmd) {
            Ok(Outcome::Done) => {}
            Ok(o) => json_line(&o),
            Err(e) => {
                eprintln!("{}:{line}: {}: {e}", a.file.display(), cmd.name());
                if e.exit_code() == USAGE {
                    return USAGE;
                }
                code = FAILED;
            }
        }
    }
    finish(s, a.out.as_deref(), code)
}

fn finish(s: Session, out: Option<&Path>, mut code: i32) -> i32 {
    let (trace, violations) = match s.finish() {
        Ok(x) => x,
        Err(e) => return fail(e.exit_code(), e),
    };
    for v in &violations {
        eprintln!("violation {} at event {} (t={}): {}", v.invariant, v.index, v.time, v.detail);
        code = FAILED;
    }
    if let Some(dir) = out {
        let t = export::trace_jsonl(&trace);
        let r = fs::create_dir_all(dir).and_then(|_| fs::write(dir.join(export::TRACE), &t));
        if let Err(e) = r {
            return fail(USAGE, format!("{}: {e}", dir.display()));
        }
        eprintln!("trace {} written to {}", Digest256::of(t.as_bytes()), dir.display());
    }
    code
}

fn start(c: &ClusterArgs) -> Result<Session, i32> {
    let spec = match &c.config {
        Some(p) => load_json(p).map_err(|e| fail(USAGE, e))?,
        None => Default::default(),
    };
    let mut s = Session::new(spec, c.seed);
    s.exec(&Command::Until(c.deploy_at)).map_err(|e| fail(e.exit_code(), e))?;
    Ok(s)
}

fn step(s: &mut Session, cmd: Command) -> Result<Outcome, i32> {
    s.exec(&cmd).map_err(|e| fail(e.exit_code(), e))
}

fn deploy(a: DeployArgs) -> i32 {
    let go = || -> Result<i32, i32> {
        let mut s = start(&a.cluster)?;
        json_line(&step(&mut s, Command::Deploy(a.cluster.spec.clone()))?);
        step(&mut s, Command::Run(a.run))?;
        if a.status {
            json_line(&step(&mut s, Command::Status)?);
        }
        Ok(finish(s, None, OK))
    };
    go().unwrap_or_else(|c| c)
}

fn reconfigure(a: ReconfigureArgs) -> i32 {
    let go = || -> Result<i32, i32> {
        let mut s = start(&a.cluster)?;
        let Outcome::Plan(plan) = step(&mut s, Command::Deploy(a.cluster.spec.clone()))? else { unreachable!() };
        if a.at < s.now() {
            return Err(fail(USAGE, "--at is before the deploy"));
        }
        step(&mut s, Command::Until(a.at))?;
        let spec = a.new_spec.clone().or_else(|| a.cluster.spec.clone());
        let cmd = Command::Reconfigure { deployment: plan.deployment_id.clone(), spec, when: When::At(a.handover) };
        json_line(&step(&mut s, cmd)?);
        let end = a.handover.max(s.now()) + a.settle;
        step(&mut s, Command::Until(end))?;
        if a.status {
            json_line(&step(&mut s, Command::Status)?);
        }
        Ok(finish(s, None, OK))
    };
    go().unwrap_or_else(|c| c)
}

fn bench_cmd(a: BenchArgs) -> i32 {
    let cfg = BenchConfig {
        link: LinkSpec { base_latency: a.base_us, jitter_max: a.jitter_us, drop_probability: 0.0 },
        message_count: a.count,
        seed: a.seed,
        per_byte_ns: a.per_byte_ns,
    };
    let usage = |e: BenchError| fail(USAGE, format!("{e}\nusage: vpcctl bench [--profile compact|routed] [--compare] --count N (N >= {})", bench::MIN_MESSAGES));
    let (csv, code) = if a.compare {
        let c = match bench::compare(cfg) {
            Ok(c) => c,
            Err(e) => return usage(e),
        };
        print!("{}", bench::table(&[&c.compact, &c.routed]));
        let [d50, d90, d99, dmax] = c.delta;
        println!("{:<8} {:>10} {:>10} {:>10} {:>10} {:>10}", "delta", "", d50, d90, d99, dmax);
        println!("paired: compact <= routed on every sample: {}", c.paired_ok);
        println!("\ncompact\n{}", bench::histogram(&c.compact.samples, a.buckets, 50));
        println!("routed\n{}", bench::histogram(&c.routed.samples, a.buckets, 50));
        let ok = c.paired_ok && c.delta.iter().all(|d| *d <= 0);
        (export::bench_csv(&[&c.compact, &c.routed], Some(&c)), if ok { OK } else { FAILED })
    } else {
        let r = match bench::latency_bench(a.profile.into(), cfg) {
            Ok(r) => r,
            Err(e) => return usage(e),
        };
        print!("{}", bench::table(&[&r]));
        println!("\n{}", bench::histogram(&r.samples, a.buckets, 50));
        (export::bench_csv(&[&r], None), OK)
    };
    let path = a.out.out.join("bench.csv");
    if let Err(e) = fs::create_dir_all(&a.out.out).and_then(|_| fs::write(&path, csv)) {
        return fail(USAGE, format!("{}: {e}", path.display()));
    }
    code
}

fn store_code(e: &StoreError) -> i32 {
    match e {
        StoreError::Registry(RegistryError::DuplicateVersion(..) | RegistryError::NotFound(..)) => FAILED,
        _ => USAGE,
    }
}

fn vpf(cmd: VpfCmd) -> i32 {
    let open = |a: &StoreArgs| FileStore::open(&a.store).map_err(|e| fail(store_code(&e), e));
    let go = || -> Result<i32, i32> {
        match cmd {
            VpfCmd::Publish(a) => {
                let store = open(&a.store)?;
                let blob = fs::read(&a.file).map_err(|e| fail(USAGE, format!("{}: {e}", a.file.display())))?;
                let desc = VpfDescriptor {
                    logic_name: a.logic.unwrap_or_else(|| a.id.clone()),
                    state_schema_id: a.schema.unwrap_or_else(|| format!("{}/{}", a.id, a.version.major)),
                    vpf_id: a.id,
                    version: a.version,
                    execution_mode: a.period.map_or(ExecutionMode::Acyclic, |period| ExecutionMode::Cyclic { period }),
                    artifact_digest: Digest256::default(),
                };
                let d = store.publish(desc, blob).map_err(|e| fail(store_code(&e), e))?;
                println!("{d}");
            }
            VpfCmd::List(a) => {
                for e in open(&a)?.list() {
                    println!("{} {} {}", e.vpf_id, e.version, e.digest);
                }
            }
            VpfCmd::Fetch(a) => {
                let (desc, blob) = open(&a.store)?.fetch(&a.id, a.version).map_err(|e| fail(store_code(&e), e))?;
                match &a.out {
                    Some(p) => {
                        fs::write(p, &blob).map_err(|e| fail(USAGE, format!("{}: {e}", p.display())))?;
                        json_line(&desc);
                    }
                    None => {
                        let mut out = std::io::stdout().lock();
                        out.write_all(&blob).and_then(|_| out.flush()).map_err(|e| fail(USAGE, e))?;
                    }
                }
            }
        }
        Ok(OK)
    };
    go().unwrap_or_else(|c| c)
}
