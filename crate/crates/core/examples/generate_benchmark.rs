//! Generates a small benchmark, writes it as JSON lines and reads it back.
//!
//!     cargo run --release --example generate_benchmark -- /tmp/bench

use std::path::PathBuf;

use auxbo::tasks::{generate_benchmark, load_tasks, write_benchmark, BenchmarkConfig, Split};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("auxbo-bench"));
    let cfg = BenchmarkConfig { seed: 7, n_train: 20, n_val: 5, n_test: 5, pool_size: 128 };
    let bench = generate_benchmark(&cfg, 1)?;
    let summary = write_benchmark(&dir, &cfg, &bench)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);

    let test = load_tasks(&dir.join("test.jsonl"))?;
    assert_eq!(test, bench.split(Split::Test));
    for t in &test {
        let solved = t.records.iter().filter(|r| r.f >= t.max_f).count();
        println!("{}: max_f {:.1}, {} of {} designs reach it", t.task_id, t.max_f, solved, t.len());
    }
    println!("wrote {}", dir.display());
    Ok(())
}
