use auxbo::tasks::Theta;
use serde::Deserialize;

#[derive(Deserialize)]
struct RawCase {
    theta: [u64; 4],
    x: [u64; 4],
    f: u64,
    h: Vec<Vec<u64>>,
}

#[derive(Deserialize)]
struct RawFile {
    cases: Vec<RawCase>,
}

pub struct SimCase {
    pub theta: Theta,
    pub x: Vec<f64>,
    pub f: f64,
    pub h: Vec<Vec<f64>>,
}

pub fn theta_from(k: f64, c: f64, m: f64, g0: f64) -> Theta {
    Theta { k, c, m, g0 }
}

/// Reference trials produced by `tests/oracles/simulate_reference.py`, stored
/// as IEEE-754 bit patterns.
pub fn load_simulator_cases() -> Vec<SimCase> {
    let text = include_str!("../fixtures/simulate_reference.json");
    let raw: RawFile = serde_json::from_str(text).expect("fixture parses");
    let f = f64::from_bits;
    raw.cases
        .into_iter()
        .map(|c| SimCase {
            theta: theta_from(f(c.theta[0]), f(c.theta[1]), f(c.theta[2]), f(c.theta[3])),
            x: c.x.iter().map(|&b| f(b)).collect(),
            f: f(c.f),
            h: c.h.iter().map(|row| row.iter().map(|&b| f(b)).collect()).collect(),
        })
        .collect()
}
