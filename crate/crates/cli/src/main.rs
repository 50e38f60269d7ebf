mod scenario;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use condense::engine::{compare_costs, run_scenario, Application, Scenario, ScenarioResult};
use condense::graph::NodeRole;
use condense::solvability::{linear_identity_check, search, SearchSpace, Solvable, SolvabilityInstance};

use scenario::{ManifestInfo, Resolved};

#[derive(Parser)]
#[command(name = "condense", version, about = "In-network function computation simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Suppress the summary line.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Check a scenario file without running it.
    Validate { path: PathBuf },
    /// Run a scenario and write CSV metrics plus a replay manifest.
    Run {
        path: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the generation count (one trial per generation).
        #[arg(long)]
        trials: Option<u64>,
    },
    /// Solvability verdicts over the scenario's (K, L) sweep.
    Capacity {
        path: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Symbol cost of the scenario's application against raw forwarding.
    Compare {
        path: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        trials: Option<u64>,
    },
}

enum Failure {
    Validation(Vec<String>),
    Io(String),
    Runtime(String),
    Cap,
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 2,
            Failure::Io(_) => 3,
            Failure::Runtime(_) => 4,
            Failure::Cap => 5,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Validate { path } => cmd_validate(path),
        Command::Run { path, seed, out, trials } => cmd_run(path, *seed, out.as_deref(), *trials, cli.quiet),
        Command::Capacity { path, out } => cmd_capacity(path, out.as_deref(), cli.quiet),
        Command::Compare { path, seed, out, trials } => cmd_compare(path, *seed, out.as_deref(), *trials, cli.quiet),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Validation(lines) => lines.iter().for_each(|l| eprintln!("{l}")),
                Failure::Io(msg) => eprintln!("error: {msg}"),
                Failure::Runtime(msg) => eprintln!("runtime error: {msg}"),
                Failure::Cap => eprintln!("search cap exceeded; verdicts above are partial"),
            }
            ExitCode::from(f.code())
        }
    }
}

fn load(path: &Path) -> Result<Resolved, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Io(format!("cannot read {}: {e}", path.display())))?;
    scenario::resolve(&text).map_err(|diags| {
        let name = path.display().to_string();
        Failure::Validation(diags.iter().map(|d| d.render(&name, &text)).collect())
    })
}

fn cmd_validate(path: &Path) -> Result<(), Failure> {
    load(path).map(|_| ())
}

fn out_dir(r: &Resolved, out: Option<&Path>) -> PathBuf {
    out.map(Path::to_path_buf)
        .or_else(|| r.file.output.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("condense-out"))
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::Io(format!("cannot create {}: {e}", dir.display())))?;
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| Failure::Io(format!("cannot write {}: {e}", path.display())))
}

/// Applies command-line overrides and returns the engine scenario.
fn prepare(r: &mut Resolved, seed: Option<u64>, trials: Option<u64>) -> Result<Scenario, Failure> {
    if let Some(s) = seed {
        r.file.seed = s;
    }
    if let Some(t) = trials {
        r.file.generations = t;
    }
    r.scenario().ok_or_else(|| Failure::Validation(vec!["scenario has no [application] table".into()]))
}

fn nodes_csv(r: &Resolved) -> String {
    let mut out = String::from("id,name,role,parent\n");
    for v in r.graph.nodes() {
        let role = match r.graph.role(v) {
            NodeRole::Source => "source",
            NodeRole::Atomic => "atomic",
            NodeRole::Destination => "destination",
        };
        let parent = r.graph.parent(v).map(|p| p.0.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{role},{parent}\n", v.0, r.names[v.0]));
    }
    out
}

fn manifest(r: &Resolved) -> Result<String, Failure> {
    let mut file = r.file.clone();
    file.manifest = Some(ManifestInfo { tool_version: env!("CARGO_PKG_VERSION").to_string() });
    toml::to_string(&file).map_err(|e| Failure::Runtime(format!("cannot serialize manifest: {e}")))
}

fn write_run(dir: &Path, r: &Resolved, result: &ScenarioResult) -> Result<(), Failure> {
    write(dir, "trajectory.csv", &result.trajectory_csv())?;
    write(dir, "arc_generation.csv", &result.arc_generation_csv())?;
    write(dir, "arc_totals.csv", &result.arc_totals_csv())?;
    write(dir, "nodes.csv", &nodes_csv(r))?;
    write(dir, "manifest.toml", &manifest(r)?)
}

fn cmd_run(path: &Path, seed: Option<u64>, out: Option<&Path>, trials: Option<u64>, quiet: bool) -> Result<(), Failure> {
    let mut r = load(path)?;
    let s = prepare(&mut r, seed, trials)?;
    let result = run_scenario(&s).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    write_run(&out_dir(&r, out), &r, &result)?;
    if !quiet {
        println!("{}", result.summary());
    }
    Ok(())
}

fn cmd_compare(path: &Path, seed: Option<u64>, out: Option<&Path>, trials: Option<u64>, quiet: bool) -> Result<(), Failure> {
    let mut r = load(path)?;
    let nfc = prepare(&mut r, seed, trials)?;
    let baseline = Scenario { application: Application::Forwarding, ..nfc.clone() };
    let report = compare_costs(&nfc, &baseline).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    let dir = out_dir(&r, out);
    write(&dir, "costs.csv", &report.csv())?;
    write(&dir, "manifest.toml", &manifest(&r)?)?;
    if !quiet {
        println!(
            "application={} nfc_symbols={} forwarding_symbols={} ratio={}",
            nfc.application.name(),
            report.nfc_total,
            report.forwarding_total,
            report.ratio
        );
    }
    Ok(())
}

fn cmd_capacity(path: &Path, out: Option<&Path>, quiet: bool) -> Result<(), Failure> {
    let r = load(path)?;
    let (base, space, sweep) = r
        .capacity()
        .ok_or_else(|| Failure::Validation(vec![format!("{}: scenario has no [capacity] table", path.display())]))?;
    let dest = r.graph.destinations()[0];
    let say = |line: String| {
        if !quiet {
            println!("{line}");
        }
    };
    let check = linear_identity_check(&r.graph, dest).map_err(|e| Failure::Runtime(e.to_string()))?;
    say(format!("linear identity check: {check}"));
    let mut csv = String::from("k,l,space,target,solvable,explored,candidate_bound,ratio\n");
    let mut witnesses = Vec::new();
    let mut capped = false;
    for (k, l) in sweep {
        let inst = SolvabilityInstance { k, l, ..base.clone() };
        let v = search(&inst, space).map_err(|e| Failure::Runtime(format!("K={k} L={l}: {e}")))?;
        let space_name = match space {
            SearchSpace::General => "general",
            SearchSpace::Linear => "linear",
        };
        let verdict = match v.solvable {
            Solvable::Yes => "solvable, witness attached".to_string(),
            Solvable::No => "not solvable".to_string(),
            Solvable::UnknownCapped => {
                capped = true;
                format!("unknown (candidate bound {:e} exceeds cap {})", v.candidate_bound, inst.cap)
            }
        };
        say(format!("{} K={k} L={l} {space_name}: {verdict}", inst.target.name()));
        let solvable = match v.solvable {
            Solvable::Yes => "yes",
            Solvable::No => "no",
            Solvable::UnknownCapped => "unknown_capped",
        };
        csv.push_str(&format!(
            "{k},{l},{space_name},{},{solvable},{},{},{}\n",
            inst.target.name(),
            v.explored,
            v.candidate_bound,
            v.ratio().map(|x| x.to_string()).unwrap_or_default()
        ));
        if let Some(w) = v.witness {
            say(serde_json::to_string(&w).map_err(|e| Failure::Runtime(e.to_string()))?);
            witnesses.push(serde_json::json!({ "k": k, "l": l, "witness": w }));
        }
    }
    let dir = out_dir(&r, out);
    write(&dir, "capacity.csv", &csv)?;
    let json = serde_json::to_string_pretty(&witnesses).map_err(|e| Failure::Runtime(e.to_string()))?;
    write(&dir, "witnesses.json", &(json + "\n"))?;
    if capped {
        Err(Failure::Cap)
    } else {
        Ok(())
    }
}
