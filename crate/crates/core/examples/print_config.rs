//! Prints the default pipeline configuration as TOML.

fn main() {
    print!("{}", navformer::config::PipelineConfig::default().to_toml());
}
