mod spool;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use detcloud_core::gateway::{
    Clock, Gateway, GatewayConfig, GatewayMutation, LogicalClock, Manifest, ResultRecord, WallClock,
};
use detcloud_core::harness::{self, HarnessMutation, ProbeConfig};
use sha2::{Digest, Sha256};

use spool::Spool;

#[derive(Parser)]
#[command(name = "detcloud", version, about = "Deterministic job gateway and test harness")]
struct Cli {
    /// Directory holding the store, the job queue and released results.
    #[arg(long, global = true, default_value = "detcloud-state")]
    state: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a job manifest and queue it for the gateway.
    Submit { manifest: PathBuf },
    /// Print released results.
    Results {
        /// Keep printing results as they are released.
        #[arg(long)]
        watch: bool,
    },
    /// Run the gateway over the queue.
    Gateway {
        #[arg(long, default_value_t = 1000)]
        quantum_ms: u64,
        /// Kernel workers per job.
        #[arg(long, default_value_t = 2)]
        workers: usize,
        /// Jobs run at once.
        #[arg(long, default_value_t = 2)]
        parallel_jobs: usize,
        #[arg(long, default_value_t = 1 << 20)]
        max_program_bytes: usize,
        /// Exit once the queue is empty and every result is released.
        #[arg(long)]
        once: bool,
        /// Use a logical clock that jumps straight to the next event instead
        /// of the wall clock.
        #[arg(long)]
        logical: bool,
    },
    /// Inspect or create customer stores.
    Store {
        #[command(subcommand)]
        command: StoreCommand,
    },
    /// Run schedule-fuzz plans.
    Fuzz {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long, default_value_t = 1)]
        master_seed: u64,
    },
    /// Measure wall time of a parallel guest across worker counts.
    Bench {
        /// bruteforce, matmult or qsort.
        #[arg(long)]
        guest: String,
        #[arg(long, default_value = "1,2,4,8")]
        workers: String,
        #[arg(long, default_value_t = 3)]
        reps: usize,
    },
    /// Run one set of jobs repeatedly under injected worker stalls.
    Probe {
        #[arg(long, default_value_t = 50)]
        runs: usize,
        #[arg(long, default_value_t = 10)]
        max_stall_ms: u64,
        #[arg(long, default_value_t = 1000)]
        quantum_ms: u64,
        #[arg(long, default_value_t = 4)]
        workers: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Run against a gateway that leaks the wall clock into /env/now.
        #[arg(long)]
        wall_clock_now: bool,
    },
    /// Check that each documented determinism-breaking defect is caught.
    Mutations {
        #[arg(long, default_value_t = 1)]
        master_seed: u64,
    },
}

#[derive(Subcommand)]
enum StoreCommand {
    /// Create an empty store for a customer. Run while the gateway is
    /// stopped.
    Init { customer: String },
    /// List a customer's versions and the files of one of them.
    Show {
        customer: String,
        /// Defaults to the latest version.
        #[arg(long)]
        version: Option<u64>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Submit { manifest } => submit(&cli.state, &manifest),
        Command::Results { watch } => results(&cli.state, watch),
        Command::Gateway {
            quantum_ms,
            workers,
            parallel_jobs,
            max_program_bytes,
            once,
            logical,
        } => {
            if quantum_ms == 0 {
                bail!("--quantum-ms must be positive");
            }
            let config = GatewayConfig {
                quantum_ms,
                workers,
                parallel_jobs,
                max_program_bytes,
                ..GatewayConfig::default()
            };
            gateway(&cli.state, config, once, logical)
        }
        Command::Store { command } => store(&cli.state, command),
        Command::Fuzz { plan, master_seed } => fuzz(&plan, master_seed),
        Command::Bench { guest, workers, reps } => bench(&guest, &workers, reps),
        Command::Probe {
            runs,
            max_stall_ms,
            quantum_ms,
            workers,
            seed,
            wall_clock_now,
        } => {
            let report = harness::probe_timing(&ProbeConfig {
                runs,
                max_stall: Duration::from_millis(max_stall_ms),
                quantum_ms,
                workers,
                seed,
                mutation: wall_clock_now.then_some(GatewayMutation::WallClockNow),
                ..ProbeConfig::default()
            });
            println!("{:>4} {:>10} {:>12} {:>18}", "run", "wall", "/env/now", "output");
            for (i, r) in report.runs.iter().enumerate() {
                println!(
                    "{:>4} {:>10.1?} {:>12} {:>18}",
                    i,
                    r.wall,
                    r.now.as_deref().unwrap_or("-"),
                    hex::encode(&r.output_hash[..8])
                );
            }
            println!("{}", report.summary());
            Ok(report.passed())
        }
        Command::Mutations { master_seed } => {
            let mut all = true;
            for m in HarnessMutation::ALL {
                let r = harness::detect_mutation(m, master_seed);
                println!(
                    "{}: {}\n  {}",
                    m.name(),
                    if r.detected { "detected" } else { "MISSED" },
                    r.evidence.replace('\n', "\n  ")
                );
                all &= r.detected;
            }
            Ok(all)
        }
    }
}

fn submit(state: &Path, manifest: &Path) -> Result<bool> {
    let text = std::fs::read_to_string(manifest).with_context(|| format!("reading {}", manifest.display()))?;
    let m = Manifest::parse(&text)?;
    let dir = manifest.parent().unwrap_or(Path::new("."));
    let spec = m.resolve(dir)?;
    let spool = Spool::open(state)?;
    spool.load_store()?.latest_version(&spec.customer)?;
    let ticket = spool.enqueue(&spec)?;
    println!("queued ticket {ticket}");
    Ok(true)
}

fn results(state: &Path, watch: bool) -> Result<bool> {
    let spool = Spool::open(state)?;
    let mut shown = std::collections::BTreeSet::new();
    loop {
        for rec in spool.results()? {
            if shown.insert(rec.job) {
                println!("{}", rec.to_text());
            }
        }
        if !watch {
            return Ok(true);
        }
        std::thread::sleep(Duration::from_millis(200));
    }
}

fn gateway(state: &Path, config: GatewayConfig, once: bool, logical: bool) -> Result<bool> {
    let spool = Spool::open(state)?;
    let logical_clock = Arc::new(LogicalClock::new(0));
    let clock: Arc<dyn Clock> = if logical {
        logical_clock.clone()
    } else {
        Arc::new(WallClock)
    };
    let q = config.quantum_ms;
    let gw = Gateway::with_store(config, clock.clone(), spool.load_store()?);
    eprintln!("gateway: quantum {q} ms, state {}", state.display());
    loop {
        for (ticket, dir) in spool.queued()? {
            let outcome = Manifest::parse(&std::fs::read_to_string(dir.join("manifest"))?)
                .and_then(|m| m.resolve(&dir))
                .and_then(|spec| gw.submit(spec));
            let note = match outcome {
                Ok(id) => format!("job {id}\n"),
                Err(e) => {
                    eprintln!("ticket {ticket}: rejected: {e}");
                    format!("rejected {e}\n")
                }
            };
            spool.close_ticket(ticket, &dir, &note)?;
        }
        if !gw.run_ready()?.is_empty() {
            spool.save_store(&gw.store())?;
        }
        for r in gw.release() {
            let rec = ResultRecord::from(&r);
            eprintln!("released job {} at {}: {}, {}", rec.job, rec.release_time, rec.status, rec.commit);
            spool.write_result(&rec)?;
        }
        let idle = gw.pending() == 0 && gw.held() == 0 && spool.queued()?.is_empty();
        if once && idle {
            return Ok(true);
        }
        if logical {
            match gw.next_event() {
                Some(t) => {
                    logical_clock.set(t);
                }
                None if once => continue,
                None => std::thread::sleep(Duration::from_millis(100)),
            }
        } else {
            let now = clock.now_ms();
            let wait = match gw.next_event() {
                Some(t) if t > now => (t - now).min(100),
                Some(_) => 0,
                None => 100,
            };
            std::thread::sleep(Duration::from_millis(wait));
        }
    }
}

fn store(state: &Path, command: StoreCommand) -> Result<bool> {
    let spool = Spool::open(state)?;
    let mut store = spool.load_store()?;
    match command {
        StoreCommand::Init { customer } => {
            store.add_customer(&customer)?;
            spool.save_store(&store)?;
            println!("created store for {customer}");
        }
        StoreCommand::Show { customer, version } => {
            let latest = store.latest_version(&customer)?;
            println!("customer: {customer}\nlatest: {latest}");
            for c in store.commits(&customer)? {
                let job = c.job.map_or("-".to_string(), |j| j.to_string());
                println!(
                    "version {} job {job}: {} changed, {} deleted",
                    c.version,
                    c.diff.changed.len(),
                    c.diff.deleted.len()
                );
            }
            let v = version.unwrap_or(latest);
            let image = store.snapshot(&customer, v)?;
            println!("files at version {v}:");
            for (name, e) in image.files() {
                println!("  {name:?} {} {}", e.data.len(), hex::encode(Sha256::digest(&e.data)));
            }
        }
    }
    Ok(true)
}

fn fuzz(plan: &Path, master_seed: u64) -> Result<bool> {
    let text = std::fs::read_to_string(plan).with_context(|| format!("reading {}", plan.display()))?;
    let plans = harness::parse_plan(&text, master_seed).map_err(anyhow::Error::msg)?;
    let mut ok = true;
    for p in &plans {
        let r = harness::fuzz(p);
        println!("{}", r.summary());
        ok &= r.passed() && r.oracle_failure.is_none();
    }
    println!("{}", if ok { "PASS" } else { "FAIL" });
    Ok(ok)
}

fn bench(guest: &str, workers: &str, reps: usize) -> Result<bool> {
    let w = harness::bench_workload(guest).with_context(|| format!("unknown bench guest `{guest}`"))?;
    let counts = harness::parse_list(workers).map_err(anyhow::Error::msg)?;
    let rows = harness::bench_scaling(&w, &counts, reps, 0);
    println!("{:>8} {:>12} {:>8} {:>18}", "workers", "wall", "speedup", "output");
    let base = rows[0].wall.as_secs_f64();
    for r in &rows {
        println!(
            "{:>8} {:>12.1?} {:>7.2}x {:>18}{}",
            r.workers,
            r.wall,
            base / r.wall.as_secs_f64(),
            hex::encode(&r.hash[..8]),
            match &r.check {
                Ok(()) => String::new(),
                Err(e) => format!("  ORACLE: {e}"),
            }
        );
    }
    let same = rows.iter().all(|r| r.hash == rows[0].hash);
    println!("output identical across rows: {same}");
    Ok(same && rows.iter().all(|r| r.check.is_ok()))
}
