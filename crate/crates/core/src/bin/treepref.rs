use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use treepref::dataset::{self, read_jsonl, split_corpus, validate_roundtrip, Schema, TreeNodeRow};
use treepref::judgment::Judge;
use treepref::pipeline::{
    render_stats_text, run_iteration, BackendConfig, IterationStats, PipelineConfig, ScriptedConfig,
};
use treepref::search::{infer_refine, run_search, RefineStrategy, SearchContext, SearchKind, StrategyKind};
use treepref::taxonomy::{evolve_all, filter_seeds, ConstraintTaxonomy, EvolutionSettings, SeedFilterRules};
use treepref::{seed, Label, Origin, Producer, Prompt, Response};

#[derive(Parser)]
#[command(name = "treepref", version, about = "Self-play preference data synthesis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Pipeline configuration (TOML).
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override any configuration value, e.g. `--set search.expansion_budget=10`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iteration: Option<u32>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    concurrency: Option<usize>,
    #[arg(long)]
    prompts: Option<PathBuf>,
}

#[derive(Args)]
struct ItemArgs {
    #[arg(long)]
    instruction: String,
    #[arg(long)]
    response: String,
}

#[derive(Clone, Copy, ValueEnum)]
enum SearchArg {
    Bfs,
    Dfs,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Greedy,
    BestOfN,
    Iterative,
    Bfs,
    Dfs,
}

#[derive(Subcommand)]
enum Command {
    /// Filter seed prompts and evolve them into multi-constraint prompts.
    Evolve {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Seed prompts as JSONL `{id, text, origin}`.
        #[arg(long)]
        seeds: PathBuf,
        /// Taxonomy JSON; the bundled one is used when absent.
        #[arg(long)]
        taxonomy: Option<PathBuf>,
        #[arg(long, default_value_t = 2)]
        n_extra: usize,
        /// Where to write the valid evolved prompts.
        #[arg(long)]
        out: PathBuf,
    },
    /// Judge one response with self-consistency voting.
    Judge {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        item: ItemArgs,
    },
    /// Judge one response and, if it violates, refine it by tree search.
    Refine {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        item: ItemArgs,
        #[arg(long, value_enum)]
        search: Option<SearchArg>,
    },
    /// Run one full iteration over the configured prompts.
    Iterate {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Refine one response with an inference-time strategy.
    InferRefine {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        item: ItemArgs,
        #[arg(long, value_enum, default_value = "bfs")]
        strategy: StrategyArg,
        #[arg(long, default_value_t = 15)]
        budget: usize,
    },
    /// Run an iteration over synthetic prompts with scripted models.
    Simulate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 200)]
        n_prompts: usize,
        #[arg(long, default_value_t = 0.5)]
        actor_pass: f64,
        #[arg(long, default_value_t = 0.4)]
        refine_success: f64,
        #[arg(long, default_value_t = 1.0)]
        judge_accuracy: f64,
    },
    /// Split a prompt corpus into named partitions.
    Emit {
        /// Prompt corpus as JSONL; synthetic prompts are used when absent.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        synthetic: usize,
        /// Partition sizes, e.g. `actor=8000,refiner=5000,selfplay=30000`.
        #[arg(long, value_delimiter = ',', required = true)]
        split: Vec<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        output_dir: PathBuf,
    },
    /// Check that dataset files parse and re-serialize byte-for-byte.
    Validate {
        #[arg(long)]
        schema: String,
        files: Vec<PathBuf>,
    },
    /// Recount an iteration's statistics from its tree dump.
    Stats {
        dir: PathBuf,
        #[arg(long, default_value_t = 1)]
        iteration: u32,
    },
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().context("empty override key")?;
    let mut cur = table;
    for p in parts {
        cur = cur
            .entry(p)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .with_context(|| format!("{p} is not a table"))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl ConfigArgs {
    fn load(&self) -> Result<PipelineConfig> {
        let text = match &self.config {
            Some(p) => fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
            None => String::new(),
        };
        let mut table: toml::Table = toml::from_str(&text).context("parsing configuration")?;
        for o in &self.overrides {
            let (k, v) = o.split_once('=').with_context(|| format!("override {o:?} lacks '='"))?;
            set_path(&mut table, k.trim(), parse_value(v.trim()))?;
        }
        let mut cfg: PipelineConfig = table.try_into().context("configuration")?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(t) = self.iteration {
            cfg.iteration = t;
        }
        if let Some(d) = &self.output_dir {
            cfg.output_dir = d.clone();
        }
        if let Some(c) = self.concurrency {
            cfg.concurrency = c;
        }
        if let Some(p) = &self.prompts {
            cfg.prompts = Some(p.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn item_prompt(item: &ItemArgs) -> (Prompt, Response) {
    (
        Prompt::new("cli", item.instruction.clone(), Origin::Seed),
        Response::new(item.response.clone(), Producer::Actor, 0),
    )
}

fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Evolve { cfg, seeds, taxonomy, n_extra, out } => {
            let cfg = cfg.load()?;
            let taxonomy = match taxonomy {
                Some(p) => ConstraintTaxonomy::from_json(&fs::read_to_string(&p)?)?,
                None => ConstraintTaxonomy::bundled(),
            };
            let candidates: Vec<Prompt> = read_jsonl(&seeds)?;
            let total = candidates.len();
            let admitted: Vec<_> =
                filter_seeds(candidates, SeedFilterRules { seed: cfg.seed, ..Default::default() })?.collect();
            let settings = EvolutionSettings { n_extra, seed: cfg.seed, ..Default::default() };
            let roles = cfg.roles()?;
            let report = evolve_all(&admitted, &taxonomy, roles.refiner.as_ref(), &settings)?;
            let prompts = report.prompts();
            dataset::emit(&prompts, &out, Some(&cfg.digest()))?;
            println!(
                "seeds {total}, admitted {}, evolved {}, invalid {}, errors {:?}",
                admitted.len(),
                report.evolved.len(),
                report.dropped_invalid,
                report.errors
            );
            Ok(if report.errors.is_empty() { 0 } else { 2 })
        }
        Command::Judge { cfg, item } => {
            let cfg = cfg.load()?;
            let roles = cfg.roles()?;
            let judge = Judge::new(cfg.judge.clone());
            let plan = cfg.effective_plan();
            let (judgment, votes) = judge.judge(
                roles.refiner.as_ref(),
                &item.instruction,
                &item.response,
                &plan,
                seed::derive(plan.seed, "cli/judge"),
            )?;
            print_json(&serde_json::json!({ "judgment": judgment, "votes": votes }))?;
            Ok(0)
        }
        Command::Refine { cfg, item, search } => {
            let cfg = cfg.load()?;
            let roles = cfg.roles()?;
            let judge = Judge::new(cfg.judge.clone());
            let plan = cfg.effective_plan();
            let (prompt, response) = item_prompt(&item);
            let (judgment, _) = judge.judge(
                roles.refiner.as_ref(),
                &prompt.text,
                &response.text,
                &plan,
                seed::derive(plan.seed, "cli/judge"),
            )?;
            if judgment.label == Label::Follows {
                print_json(&serde_json::json!({ "already_follows": true, "judgment": judgment }))?;
                return Ok(0);
            }
            let kind = match search {
                Some(SearchArg::Dfs) => SearchKind::Dfs,
                Some(SearchArg::Bfs) => SearchKind::Bfs,
                None => cfg.search_kind,
            };
            let negative = treepref::judgment::NegativeRecord { prompt, response, judgment };
            let ctx = SearchContext { refiner: roles.refiner.as_ref(), judge: &judge, plan: &plan };
            let outcome = run_search(kind, &negative, &cfg.search, &ctx, seed::derive(plan.seed, "cli/tree"))?;
            print_json(&outcome)?;
            Ok(0)
        }
        Command::Iterate { cfg } => {
            let cfg = cfg.load()?;
            iterate(&cfg)
        }
        Command::InferRefine { cfg, item, strategy, budget } => {
            let cfg = cfg.load()?;
            let roles = cfg.roles()?;
            let judge = Judge::new(cfg.judge.clone());
            let plan = cfg.effective_plan();
            let kind = match strategy {
                StrategyArg::Greedy => StrategyKind::Greedy,
                StrategyArg::BestOfN => StrategyKind::BestOfN,
                StrategyArg::Iterative => StrategyKind::Iterative,
                StrategyArg::Bfs => StrategyKind::Bfs,
                StrategyArg::Dfs => StrategyKind::Dfs,
            };
            let strategy = RefineStrategy {
                depth_limit: cfg.search.depth_limit,
                branch_limit: cfg.search.branch_limit,
                vote_threshold: cfg.search.vote_threshold,
                ..RefineStrategy::new(kind, if kind == StrategyKind::Greedy { 1 } else { budget })
            };
            let (prompt, response) = item_prompt(&item);
            let ctx = SearchContext { refiner: roles.refiner.as_ref(), judge: &judge, plan: &plan };
            let result = infer_refine(&prompt, &response, &strategy, &ctx, seed::derive(plan.seed, "cli/infer"))?;
            print_json(&result)?;
            Ok(0)
        }
        Command::Simulate { cfg, n_prompts, actor_pass, refine_success, judge_accuracy } => {
            let mut cfg = cfg.load()?;
            let scripted = ScriptedConfig {
                actor_pass_prob: actor_pass,
                refine_success_prob: refine_success,
                judge_accuracy,
                ..Default::default()
            };
            cfg.actor = BackendConfig::Scripted(scripted);
            cfg.refiner = BackendConfig::Scripted(scripted);
            cfg.prompts = None;
            cfg.synthetic_prompts = n_prompts;
            cfg.validate()?;
            iterate(&cfg)
        }
        Command::Emit { input, synthetic, split, seed, output_dir } => {
            let corpus: Vec<Prompt> = match input {
                Some(p) => read_jsonl(&p)?,
                None => treepref::synthetic::synthetic_prompts(synthetic, seed).into_iter().map(|(p, _)| p).collect(),
            };
            let mut counts = Vec::new();
            for s in &split {
                let (name, n) = s.split_once('=').with_context(|| format!("split {s:?} should be name=count"))?;
                counts.push((name.trim(), n.trim().parse::<usize>().with_context(|| format!("count in {s:?}"))?));
            }
            let parts = split_corpus(&corpus, &counts, seed)?;
            for p in &parts.partitions {
                let m = dataset::emit(&p.items, &output_dir.join(format!("prompts.{}.jsonl", p.name)), None)?;
                println!("{:<12} {:>8}  {}", p.name, m.count, m.digest);
            }
            let m = dataset::emit(&parts.overflow, &output_dir.join("prompts.overflow.jsonl"), None)?;
            println!("{:<12} {:>8}  {}", "overflow", m.count, m.digest);
            Ok(0)
        }
        Command::Validate { schema, files } => {
            let schema: Schema = schema.parse()?;
            if files.is_empty() {
                bail!("no files given");
            }
            let mut clean = true;
            for f in &files {
                let rep = validate_roundtrip(f, schema)?;
                clean &= rep.byte_equal;
                match rep.first_divergence() {
                    None if rep.byte_equal => println!("{}: ok ({} records)", f.display(), rep.records),
                    None => println!("{}: trailing bytes differ", f.display()),
                    Some(line) => {
                        println!("{}: {} divergent lines, first at line {line}", f.display(), rep.divergent_lines.len())
                    }
                }
            }
            Ok(if clean { 0 } else { 2 })
        }
        Command::Stats { dir, iteration } => stats(&dir, iteration),
    }
}

fn iterate(cfg: &PipelineConfig) -> Result<u8> {
    let prompts = cfg.load_prompts()?;
    let out = run_iteration(cfg, &prompts)?;
    print!("{}", render_stats_text(&out.stats));
    Ok(out.exit_code() as u8)
}

fn stats(dir: &Path, t: u32) -> Result<u8> {
    let rows: Vec<TreeNodeRow> = read_jsonl(&dir.join(format!("trees.t{t}.jsonl")))?;
    let trees = rows.iter().filter(|r| r.parent_id.is_none()).count();
    let refined = rows.iter().filter(|r| r.refined).count();
    let nodes = rows.len();
    let expansions = nodes - trees;
    println!("trees {trees}, refined {refined}, nodes {nodes}, expansions {expansions}");
    let recorded: Vec<IterationStats> = read_jsonl(&dir.join(format!("stats.t{t}.json")))?;
    let Some(s) = recorded.first() else { bail!("stats file is empty") };
    print!("{}", render_stats_text(s));
    let dpo = fs::read_to_string(dir.join(format!("dpo.t{t}.jsonl")))?.lines().count();
    let consistent = s.trees == trees
        && s.refined == refined
        && s.judgment_records == nodes
        && s.expansions_total == expansions
        && dpo == refined - s.identical_pairs;
    if !consistent {
        println!("recount disagrees with the recorded statistics");
        return Ok(2);
    }
    Ok(0)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
