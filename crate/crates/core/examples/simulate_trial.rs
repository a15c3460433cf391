//! Evaluates a few designs on one simulated task and prints the reward and
//! the per-level feedback trace.

use auxbo::tasks::{simulate_trial, Theta, LEVELS};

fn main() {
    let theta = Theta { k: 1.2, c: 0.3, m: 0.9, g0: 0.05 };
    let designs = [[0.0, 0.0, 0.0, 0.0], [0.6, -0.2, 0.3, 0.1], [-0.8, 0.9, -0.4, 0.7]];
    for x in designs {
        let rec = simulate_trial(&theta, &x);
        println!("x = {x:?}  f = {:.1}  (of {LEVELS} levels)", rec.f);
        for (i, step) in rec.h.steps().enumerate() {
            let cells: Vec<String> = step.iter().map(|v| format!("{v:+.3}")).collect();
            println!("  step {i:2}: {}", cells.join(" "));
        }
        match rec.h.terminated_at() {
            Some(t) => println!("  terminated at step {t}"),
            None => println!("  survived every level"),
        }
    }
}
