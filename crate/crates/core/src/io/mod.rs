//! Files, configuration, synthetic scenarios, rendering and batch runs.

pub mod config;
pub mod evaluate;
pub mod render;
pub mod scenario_file;
pub mod synthetic;

pub use config::{config_from_json, config_from_toml, load_config_file, RunConfig, SEED_ENV};
pub use evaluate::{
    aggregate, aggregate_table, evaluate, load_model, report_to_string, write_evaluation,
    write_run, Aggregate, Evaluation,
};
pub use render::{render_log_svg, render_scenario_svg, render_svg, RenderOptions};
pub use scenario_file::{
    canonical_heading, load_log, load_scenario, load_scenario_dir, load_scenario_with,
    log_to_string, parse_json_strict, parse_scenario, save_log, save_scenario, scenario_to_string,
    write_atomic, ScenarioFileV1, FORMAT_VERSION,
};
pub use synthetic::{gen_synthetic, synthetic_corpus, SyntheticKind, SyntheticParams};
