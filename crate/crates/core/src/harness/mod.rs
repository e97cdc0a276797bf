//! Scenario runner: configuration, the scenario library, the results
//! document and the acceptance checks.

pub mod acceptance;
pub mod config;
pub mod results;
pub mod scenarios;

use std::time::Instant;

use crate::error::Result;
use config::{EngineChoice, RunConfig};
use results::ResultsDocument;
use scenarios::{run_scenario, scenario_info, Ctx, Engine};

/// Runs the configured scenario and assembles the results document.
/// With `EngineChoice::Both` the trajectory pass is checked against the
/// density engine setting by setting.
pub fn run(cfg: &RunConfig) -> Result<ResultsDocument> {
    cfg.validate()?;
    let info = scenario_info(&cfg.scenario)?;
    let shots = cfg.shots.unwrap_or(info.default_shots);
    let model = cfg.noise_model()?;
    let start = Instant::now();
    let mut doc = ResultsDocument::new(cfg, shots, model.clone());
    let engines: &[Engine] = match cfg.engine {
        EngineChoice::Trajectory => &[Engine::Trajectory],
        EngineChoice::Density => &[Engine::Density],
        EngineChoice::Both => &[Engine::Trajectory, Engine::Density],
    };
    for &engine in engines {
        let mut ctx = Ctx::new(model.clone(), shots, cfg.seed, engine);
        ctx.workers = cfg.workers;
        ctx.records_dir = cfg.records_dir.clone();
        ctx.compare = cfg.engine == EngineChoice::Both && engine == Engine::Trajectory;
        for s in run_scenario(&cfg.scenario, &ctx)? {
            if !doc.sections.iter().any(|d| d.name == s.name && d.engine == s.engine) {
                doc.sections.push(s);
            }
        }
        doc.comparisons.extend(ctx.take_comparisons());
    }
    doc.wall_clock_seconds = start.elapsed().as_secs_f64();
    Ok(doc)
}
