//! Two self-play iterations over synthetic prompts with scripted models.
//! The second iteration reuses the output directory; each iteration writes
//! its own `*.t{n}` files and journal.

use anyhow::Result;

use treepref::pipeline::{render_stats_text, run_iteration, BackendConfig, PipelineConfig, ScriptedConfig};
use treepref::search::SearchKind;
use treepref::synthetic::synthetic_prompts;

fn main() -> Result<()> {
    let dir = tempfile::tempdir()?;
    let prompts: Vec<_> = synthetic_prompts(80, 3).into_iter().map(|(p, _)| p).collect();

    // The second iteration stands in for a better-trained actor and refiner.
    let stages = [
        (
            1,
            SearchKind::Bfs,
            ScriptedConfig {
                actor_pass_prob: 0.4,
                refine_success_prob: 0.35,
                judge_accuracy: 0.9,
                ..Default::default()
            },
        ),
        (
            2,
            SearchKind::Dfs,
            ScriptedConfig {
                actor_pass_prob: 0.6,
                refine_success_prob: 0.5,
                judge_accuracy: 0.95,
                ..Default::default()
            },
        ),
    ];
    for (iteration, search_kind, scripted) in stages {
        let config = PipelineConfig {
            iteration,
            seed: 17,
            search_kind,
            output_dir: dir.path().to_path_buf(),
            actor: BackendConfig::Scripted(scripted),
            refiner: BackendConfig::Scripted(scripted),
            ..Default::default()
        };
        let out = run_iteration(&config, &prompts)?;
        println!("== iteration {iteration} ({search_kind:?})\n{}", render_stats_text(&out.stats));
    }

    let mut files: Vec<String> = std::fs::read_dir(dir.path())?
        .map(|e| Ok(e?.file_name().to_string_lossy().into_owned()))
        .collect::<std::io::Result<_>>()?;
    files.sort();
    println!("wrote {}", files.join(", "));
    Ok(())
}
